use thiserror::Error;

use super::block::BlockHeader;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MineError {
    #[error("no nonce found after {tries} tries")]
    Exhausted { tries: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sealed {
    pub header: BlockHeader,
    pub tries: u64,
}

/// Grinds nonces upward from `nonce_start` until the header hash has at least
/// `difficulty_bits` leading zero bits.
pub fn mine(template: &BlockHeader, difficulty_bits: u32, nonce_start: u64, max_tries: u64) -> Result<Sealed, MineError> {
    let mut header = *template;
    header.difficulty_bits = difficulty_bits;
    for i in 0..max_tries {
        header.nonce = nonce_start.wrapping_add(i);
        if header.meets_difficulty() {
            return Ok(Sealed { header, tries: i + 1 });
        }
    }
    Err(MineError::Exhausted { tries: max_tries })
}
