use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::Digest;
use crate::mlcore::{aggregate, contribution_weights, ClientId, LocalUpdate, MlError, ParamVector, WeightRule};

pub const HEADER_VERSION: u8 = 1;

/// Serialized header size: version(1) prev(32) height(8) round(8) nonce(8)
/// difficulty(4) aggregate_digest(32) body_digest(32) miner(4) timestamp(8).
pub const HEADER_LEN: usize = 137;

pub fn hash_bytes(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

pub fn leading_zero_bits(d: &Digest) -> u32 {
    let mut bits = 0;
    for &b in d {
        if b == 0 {
            bits += 8;
        } else {
            bits += b.leading_zeros();
            break;
        }
    }
    bits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    #[serde(with = "hex::serde")]
    pub prev_hash: Digest,
    pub height: u64,
    pub round: u64,
    pub nonce: u64,
    pub difficulty_bits: u32,
    #[serde(with = "hex::serde")]
    pub aggregate_digest: Digest,
    #[serde(with = "hex::serde")]
    pub body_digest: Digest,
    pub miner_id: ClientId,
    pub timestamp_ticks: u64,
}

impl BlockHeader {
    /// Canonical little-endian encoding, the preimage of [`Self::hash`].
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        let mut w = Writer { buf: &mut out, pos: 0 };
        w.put(&[HEADER_VERSION]);
        w.put(&self.prev_hash);
        w.put(&self.height.to_le_bytes());
        w.put(&self.round.to_le_bytes());
        w.put(&self.nonce.to_le_bytes());
        w.put(&self.difficulty_bits.to_le_bytes());
        w.put(&self.aggregate_digest);
        w.put(&self.body_digest);
        w.put(&self.miner_id.to_le_bytes());
        w.put(&self.timestamp_ticks.to_le_bytes());
        debug_assert_eq!(w.pos, HEADER_LEN);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != HEADER_LEN || bytes[0] != HEADER_VERSION {
            return None;
        }
        let mut r = Reader { buf: bytes, pos: 1 };
        Some(Self {
            prev_hash: r.digest(),
            height: r.u64(),
            round: r.u64(),
            nonce: r.u64(),
            difficulty_bits: r.u32(),
            aggregate_digest: r.digest(),
            body_digest: r.digest(),
            miner_id: r.u32(),
            timestamp_ticks: r.u64(),
        })
    }

    pub fn hash(&self) -> Digest {
        hash_bytes(&self.to_bytes())
    }

    pub fn meets_difficulty(&self) -> bool {
        leading_zero_bits(&self.hash()) >= self.difficulty_bits
    }
}

/// Metadata for one update listed in a block; the parameters themselves stay
/// in the nodes' pools and are referenced by digest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub client_id: ClientId,
    pub round: u64,
    #[serde(with = "hex::serde")]
    pub params_digest: Digest,
    pub samples: u64,
    pub compute_time: f64,
}

pub const RECORD_LEN: usize = 4 + 8 + 32 + 8 + 8;

impl UpdateRecord {
    pub fn of(update: &LocalUpdate) -> Self {
        Self {
            client_id: update.client_id,
            round: update.round,
            params_digest: update.params_digest(),
            samples: update.samples,
            compute_time: update.compute_time,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.params_digest);
        out.extend_from_slice(&self.samples.to_le_bytes());
        out.extend_from_slice(&self.compute_time.to_bits().to_le_bytes());
    }

    fn read(bytes: &[u8]) -> Self {
        let mut r = Reader { buf: bytes, pos: 0 };
        Self {
            client_id: r.u32(),
            round: r.u64(),
            params_digest: r.digest(),
            samples: r.u64(),
            compute_time: f64::from_bits(r.u64()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBody {
    /// Sorted by ascending client id.
    pub updates: Vec<UpdateRecord>,
    /// Sample-size weighted mean of the listed deltas (the initial model in genesis).
    pub aggregate: ParamVector,
    /// `(client, n_i / Σ n_j)` in ascending client id.
    pub contributions: Vec<(ClientId, f64)>,
}

impl BlockBody {
    pub fn from_updates(updates: &[&LocalUpdate], rule: WeightRule) -> Result<Self, MlError> {
        let mut ordered = updates.to_vec();
        ordered.sort_by_key(|u| u.client_id);
        let aggregate = aggregate(&ordered, rule)?;
        let contributions = contribution_weights(&ordered)?;
        Ok(Self { updates: ordered.iter().map(|u| UpdateRecord::of(u)).collect(), aggregate, contributions })
    }

    /// Digest over the update records and contribution weights.
    pub fn digest(&self) -> Digest {
        let mut bytes = Vec::with_capacity(8 + self.updates.len() * (RECORD_LEN + 12));
        self.write_records(&mut bytes);
        hash_bytes(&bytes)
    }

    fn write_records(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.updates.len() as u32).to_le_bytes());
        for r in &self.updates {
            r.write(out);
        }
        out.extend_from_slice(&(self.contributions.len() as u32).to_le_bytes());
        for (id, w) in &self.contributions {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&w.to_bits().to_le_bytes());
        }
    }

    pub(crate) fn write(&self, out: &mut Vec<u8>) {
        self.write_records(out);
        let values = self.aggregate.as_slice();
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    /// Parses a body; returns `None` on truncation, trailing bytes or
    /// non-finite aggregate values.
    pub(crate) fn read(bytes: &[u8]) -> Option<Self> {
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
            let s = bytes.get(*pos..*pos + n)?;
            *pos += n;
            Some(s)
        };
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
        let mut updates = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            updates.push(UpdateRecord::read(take(&mut pos, RECORD_LEN)?));
        }
        let m = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?) as usize;
        let mut contributions = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let id = u32::from_le_bytes(take(&mut pos, 4)?.try_into().ok()?);
            let w = f64::from_bits(u64::from_le_bytes(take(&mut pos, 8)?.try_into().ok()?));
            contributions.push((id, w));
        }
        let dim = u64::from_le_bytes(take(&mut pos, 8)?.try_into().ok()?) as usize;
        if bytes.len() - pos != dim.checked_mul(8)? {
            return None;
        }
        let values = (0..dim)
            .map(|_| f64::from_bits(u64::from_le_bytes(take(&mut pos, 8).unwrap().try_into().unwrap())))
            .collect();
        Some(Self { updates, aggregate: ParamVector::new(values).ok()?, contributions })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub body: BlockBody,
}

impl Block {
    /// Height-0 block holding the initial global model. `task_tag` separates
    /// genesis blocks of different tasks.
    pub fn genesis(initial_model: ParamVector, task_tag: u64) -> Self {
        let body = BlockBody { updates: Vec::new(), aggregate: initial_model, contributions: Vec::new() };
        let header = BlockHeader {
            prev_hash: [0; 32],
            height: 0,
            round: 0,
            nonce: task_tag,
            difficulty_bits: 0,
            aggregate_digest: body.aggregate.digest(),
            body_digest: body.digest(),
            miner_id: ClientId::MAX,
            timestamp_ticks: 0,
        };
        Self { header, body }
    }

    pub fn hash(&self) -> Digest {
        self.header.hash()
    }

    /// Unsealed header on top of `parent` that commits to `body`.
    pub fn template(parent: &BlockHeader, round: u64, miner: ClientId, timestamp: u64, body: &BlockBody) -> BlockHeader {
        BlockHeader {
            prev_hash: parent.hash(),
            height: parent.height + 1,
            round,
            nonce: 0,
            difficulty_bits: 0,
            aggregate_digest: body.aggregate.digest(),
            body_digest: body.digest(),
            miner_id: miner,
            timestamp_ticks: timestamp,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 64 + self.body.aggregate.dim() * 8);
        out.extend_from_slice(&self.header.to_bytes());
        self.body.write(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < HEADER_LEN {
            return None;
        }
        let header = BlockHeader::from_bytes(&bytes[..HEADER_LEN])?;
        let body = BlockBody::read(&bytes[HEADER_LEN..])?;
        Some(Self { header, body })
    }
}

struct Writer<'a> {
    buf: &'a mut [u8],
    pos: usize,
}

impl Writer<'_> {
    fn put(&mut self, bytes: &[u8]) {
        self.buf[self.pos..self.pos + bytes.len()].copy_from_slice(bytes);
        self.pos += bytes.len();
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().expect("length checked by caller");
        self.pos += N;
        out
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn digest(&mut self) -> [u8; 32] {
        self.take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_zeros() {
        let mut d = [0xffu8; 32];
        assert_eq!(leading_zero_bits(&d), 0);
        d[0] = 0;
        d[1] = 0x1f;
        assert_eq!(leading_zero_bits(&d), 11);
        assert_eq!(leading_zero_bits(&[0; 32]), 256);
    }

    #[test]
    fn header_layout_is_fixed() {
        let h = Block::genesis(ParamVector::zeros(3), 9).header;
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(bytes[0], HEADER_VERSION);
        // nonce sits after version, prev hash, height and round
        assert_eq!(&bytes[49..57], &9u64.to_le_bytes());
        assert_eq!(BlockHeader::from_bytes(&bytes), Some(h));
    }

    #[test]
    fn block_bytes_roundtrip() {
        let u = LocalUpdate {
            client_id: 4,
            round: 2,
            params: ParamVector::new(vec![0.5, -0.25]).unwrap(),
            samples: 30,
            compute_time: 12.0,
        };
        let body = BlockBody::from_updates(&[&u], WeightRule::BySampleSize).unwrap();
        let g = Block::genesis(ParamVector::zeros(2), 1);
        let header = Block::template(&g.header, 2, 4, 100, &body);
        let block = Block { header, body };
        let bytes = block.to_bytes();
        assert_eq!(Block::from_bytes(&bytes), Some(block));
        assert_eq!(Block::from_bytes(&bytes[..bytes.len() - 1]), None);
    }
}
