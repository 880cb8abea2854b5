//! Token sequences over a finite alphabet plus the absorbing MASK symbol,
//! and the `TOKD` token-stream file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TOKD" | version u16 | vocab_size u32 | token_rate_hz f64 | count u64 | count x u32 ids
//! ```
//!
//! MASK is written as `vocab_size`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

const MAGIC: &[u8; 4] = b"TOKD";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    vocab_size: u32,
    token_rate_hz: f64,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab_size: u32, token_rate_hz: f64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidParameter("vocab_size must be positive".into()));
        }
        if !(token_rate_hz > 0.0 && token_rate_hz.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "token rate must be positive, got {token_rate_hz}"
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id > vocab_size) {
            return Err(Error::InvalidParameter(format!(
                "token id {bad} outside alphabet of size {vocab_size}"
            )));
        }
        Ok(Self {
            ids,
            vocab_size,
            token_rate_hz,
        })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn mask_id(&self) -> TokenId {
        self.vocab_size
    }

    pub fn token_rate_hz(&self) -> f64 {
        self.token_rate_hz
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.ids[i] == self.vocab_size
    }

    pub fn masked_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == self.vocab_size).count()
    }

    /// Same alphabet and rate, different ids.
    pub fn with_ids(&self, ids: Vec<TokenId>) -> Result<Self> {
        Self::new(ids, self.vocab_size, self.token_rate_hz)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.vocab_size.to_le_bytes())?;
        w.write_all(&self.token_rate_hz.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.ids.len() * 4);
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedTokenStream(m.to_string());
        const HEADER: usize = 4 + 2 + 4 + 8 + 8;
        if bytes.len() < HEADER {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::MalformedTokenStream(format!(
                "unsupported version {version}"
            )));
        }
        let vocab_size = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let rate = f64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let payload = &bytes[HEADER..];
        if (payload.len() as u64) != count.saturating_mul(4) {
            return Err(Error::MalformedTokenStream(format!(
                "payload holds {} bytes, header declares {count} ids",
                payload.len()
            )));
        }
        let ids: Vec<TokenId> = payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some((i, id)) = ids.iter().enumerate().find(|(_, &id)| id > vocab_size) {
            return Err(Error::MalformedTokenStream(format!(
                "id {id} at {i} out of range for vocab {vocab_size}"
            )));
        }
        Self::new(ids, vocab_size, rate)
            .map_err(|e| Error::MalformedTokenStream(e.to_string()))
    }
}

pub fn export_tokens(t: &TokenSequence, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    t.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn import_tokens(path: impl AsRef<Path>) -> Result<TokenSequence> {
    TokenSequence::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_of(t: &TokenSequence) -> Vec<u8> {
        let mut v = Vec::new();
        t.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn small_round_trip() {
        let t = TokenSequence::new(vec![3, 1, 4, 1, 5], 8, 62.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tok");
        export_tokens(&t, &p).unwrap();
        assert_eq!(import_tokens(&p).unwrap(), t);
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let t = TokenSequence::new(vec![1, 2], 8, 75.0).unwrap();
        let mut b = bytes_of(&t);
        let n = b.len();
        b[n - 4..].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            TokenSequence::from_bytes(&b),
            Err(Error::MalformedTokenStream(_))
        ));
        // id == vocab_size is MASK and is allowed
        b[n - 4..].copy_from_slice(&8u32.to_le_bytes());
        assert!(TokenSequence::from_bytes(&b).unwrap().is_masked(1));
    }

    #[test]
    fn empty_payload() {
        let t = TokenSequence::new(vec![], 8, 75.0).unwrap();
        let back = TokenSequence::from_bytes(&bytes_of(&t)).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.vocab_size(), 8);
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let t = TokenSequence::new(vec![0, 1, 2], 4, 75.0).unwrap();
        let good = bytes_of(&t);
        let mut b = good.clone();
        b[0] = b'X';
        assert!(TokenSequence::from_bytes(&b).is_err());
        let mut b = good.clone();
        b[4] = 9;
        assert!(TokenSequence::from_bytes(&b).is_err());
        assert!(TokenSequence::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(TokenSequence::from_bytes(&good[..10]).is_err());
    }

    proptest! {
        #[test]
        fn stream_round_trip_is_bit_exact(
            vocab in 1u32..5000,
            raw in proptest::collection::vec(any::<u32>(), 0..200),
            rate in 0.001f64..1e5,
        ) {
            let ids: Vec<u32> = raw.iter().map(|r| r % (vocab + 1)).collect();
            let t = TokenSequence::new(ids, vocab, rate).unwrap();
            let b = bytes_of(&t);
            let back = TokenSequence::from_bytes(&b).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(bytes_of(&back), b);
        }
    }
}
