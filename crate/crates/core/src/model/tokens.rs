//! `.tok` token corpora: `"HFTK" | u32 version | u32 T | u32 N | u32 ids[N·T]`,
//! little-endian.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TokenId;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HFTK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `N` token sequences sharing one length `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    seq_len: usize,
    sequences: Vec<Vec<TokenId>>,
}

impl TokenFile {
    pub fn new(sequences: Vec<Vec<TokenId>>) -> Result<Self> {
        let seq_len = sequences.first().map_or(0, Vec::len);
        if let Some(i) = sequences.iter().position(|s| s.len() != seq_len) {
            return Err(Error::Shape(format!(
                "sequence {i} has length {} but the first has {seq_len}",
                sequences[i].len()
            )));
        }
        Ok(TokenFile { seq_len, sequences })
    }

    /// Uniformly random token ids.
    pub fn random(vocab_size: usize, seq_len: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..count)
            .map(|_| {
                (0..seq_len)
                    .map(|_| rng.random_range(0..vocab_size as TokenId))
                    .collect()
            })
            .collect();
        TokenFile { seq_len, sequences }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.sequences
    }

    pub fn total_tokens(&self) -> usize {
        self.seq_len * self.sequences.len()
    }

    pub fn max_token(&self) -> Option<TokenId> {
        self.sequences.iter().flatten().copied().max()
    }

    /// Fails when any token id is outside `0..vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.max_token() {
            Some(t) if t as usize >= vocab_size => Err(Error::Vocab(format!(
                "token id {t} outside model vocabulary of {vocab_size}"
            ))),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical `.tok` encoding.
    pub fn digest(&self) -> String {
        sha256_hex(&token_bytes(self))
    }
}

pub fn token_bytes(tokens: &TokenFile) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * tokens.total_tokens());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tokens.seq_len as u32).to_le_bytes());
    buf.extend_from_slice(&(tokens.sequences.len() as u32).to_le_bytes());
    for &t in tokens.sequences.iter().flatten() {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

pub fn parse_tokens(buf: &[u8]) -> Result<TokenFile> {
    if buf.len() < HEADER_LEN {
        return Err(Error::format("token header", "file truncated"));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::format("token header.magic", "expected \"HFTK\""));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != VERSION {
        return Err(Error::format(
            "token header.version",
            format!("unsupported version {}", word(1)),
        ));
    }
    let seq_len = word(2) as usize;
    let count = word(3) as usize;
    let expected = seq_len
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(buf.len()) {
        return Err(Error::format(
            "token payload",
            format!(
                "{count} sequences of length {seq_len} need {} bytes, file has {}",
                expected.map_or("overflowing".to_string(), |n| n.to_string()),
                buf.len()
            ),
        ));
    }
    let ids: Vec<TokenId> = buf[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let sequences = if seq_len == 0 {
        vec![Vec::new(); count]
    } else {
        ids.chunks_exact(seq_len).map(<[TokenId]>::to_vec).collect()
    };
    Ok(TokenFile { seq_len, sequences })
}

pub fn save_tokens(tokens: &TokenFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, token_bytes(tokens)).map_err(|e| Error::io(path, e))
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenFile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(seq_len in 0usize..6, count in 0usize..5, seed in any::<u64>()) {
            let t = TokenFile::random(50, seq_len, count, seed);
            let bytes = token_bytes(&t);
            let back = parse_tokens(&bytes).unwrap();
            prop_assert_eq!(token_bytes(&back), bytes);
            prop_assert_eq!(back.len(), count);
        }
    }

    #[test]
    fn rejects_ragged_and_truncated() {
        assert!(TokenFile::new(vec![vec![1, 2], vec![3]]).is_err());
        let bytes = token_bytes(&TokenFile::random(10, 4, 2, 0));
        assert!(parse_tokens(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_tokens(&bytes[..8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(parse_tokens(&bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn vocab_check() {
        let t = TokenFile::new(vec![vec![0, 9]]).unwrap();
        assert!(t.check_vocab(10).is_ok());
        assert!(matches!(t.check_vocab(9), Err(Error::Vocab(_))));
    }
}
