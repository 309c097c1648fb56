//! Chain dumps: a length-prefixed binary format and a JSON export.
//!
//! Binary layout: magic `BLDCHAIN`, `u16` version, `u32` block count, then
//! per block a `u32` byte length followed by the block bytes. Integers are
//! little-endian.

use std::sync::Arc;

use thiserror::Error;

use super::block::Block;
use super::chain::Chain;

pub const MAGIC: &[u8; 8] = b"BLDCHAIN";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("not a chain dump")]
    BadMagic,
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u16),
    #[error("dump truncated")]
    Truncated,
    #[error("malformed block at index {0}")]
    MalformedBlock(usize),
    #[error("block at index {0} does not link to its predecessor")]
    BrokenChain(usize),
    #[error("trailing bytes after last block")]
    TrailingBytes,
}

pub fn encode_chain(chain: &Chain) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(chain.blocks().len() as u32).to_le_bytes());
    for b in chain.blocks() {
        let bytes = b.to_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode_chain(bytes: &[u8]) -> Result<Chain, CodecError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CodecError> {
        let s = bytes.get(pos..pos + n).ok_or(CodecError::Truncated)?;
        pos += n;
        Ok(s)
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    take(MAGIC.len())?;
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut blocks = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let block = Block::from_bytes(take(len)?).ok_or(CodecError::MalformedBlock(i))?;
        blocks.push(Arc::new(block));
    }
    if pos != bytes.len() {
        return Err(CodecError::TrailingBytes);
    }
    if blocks.is_empty() {
        return Err(CodecError::Truncated);
    }
    let n = blocks.len();
    Chain::from_blocks(blocks).map_err(|e| match e {
        super::LedgerError::BadLink { height } => CodecError::BrokenChain(height as usize),
        _ => CodecError::BrokenChain(n),
    })
}

pub fn chain_to_json(chain: &Chain) -> serde_json::Value {
    let blocks: Vec<serde_json::Value> = chain
        .blocks()
        .iter()
        .map(|b| {
            serde_json::json!({
                "hash": hex::encode(b.hash()),
                "header": b.header,
                "updates": b.body.updates,
                "contributions": b.body.contributions,
                "aggregate_dim": b.body.aggregate.dim(),
            })
        })
        .collect();
    serde_json::json!({ "height": chain.height(), "blocks": blocks })
}

#[cfg(test)]
mod tests {
    use super::super::chain::empty_body;
    use super::super::pow::mine;
    use super::*;
    use crate::mlcore::ParamVector;

    fn sample_chain() -> Chain {
        let mut c = Chain::new(Block::genesis(ParamVector::new(vec![1.0, -2.0, 0.5]).unwrap(), 8));
        for i in 0..3 {
            let body = empty_body(3);
            let t = Block::template(&c.tip().header, i + 1, i as u32, 10 * i, &body);
            c.push(Arc::new(Block { header: mine(&t, 3, 0, 1 << 16).unwrap().header, body })).unwrap();
        }
        c
    }

    #[test]
    fn roundtrip() {
        let c = sample_chain();
        let bytes = encode_chain(&c);
        assert_eq!(decode_chain(&bytes).unwrap(), c);
    }

    #[test]
    fn decode_errors() {
        let bytes = encode_chain(&sample_chain());
        assert_eq!(decode_chain(b"NOTACHAIN___"), Err(CodecError::BadMagic));
        assert_eq!(decode_chain(&bytes[..bytes.len() - 3]), Err(CodecError::Truncated));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_chain(&extra), Err(CodecError::TrailingBytes));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(decode_chain(&v2), Err(CodecError::UnsupportedVersion(2)));
        // flip a byte inside block 2's prev hash
        let mut broken = bytes.clone();
        let first_len = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let second_start = 18 + first_len + 4;
        broken[second_start + 5] ^= 1;
        assert_eq!(decode_chain(&broken), Err(CodecError::BrokenChain(1)));
    }

    #[test]
    fn json_lists_every_block() {
        let v = chain_to_json(&sample_chain());
        assert_eq!(v["height"], 3);
        assert_eq!(v["blocks"].as_array().unwrap().len(), 4);
        assert_eq!(v["blocks"][0]["header"]["prev_hash"], "0".repeat(64));
    }
}
