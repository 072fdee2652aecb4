use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{BinRange, TokenId};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub split: Split,
    pub ids: Vec<TokenId>,
}

impl TokenStream {
    pub fn new(split: Split, ids: Vec<TokenId>) -> Self {
        TokenStream { split, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks every id lies in `[1, vocab_size]`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().position(|&id| id == 0 || id as usize > vocab_size) {
            Some(p) => Err(Error::input(format!(
                "{} stream: id {} at position {p} outside [1, {vocab_size}]",
                self.split.name(),
                self.ids[p]
            ))),
            None => Ok(()),
        }
    }

    /// Little-endian u32 ids, no header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.ids.len() * 4);
        for id in &self.ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(split: Split, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::input(format!("{}: length not a multiple of 4", path.display())));
        }
        let ids = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(TokenStream { split, ids })
    }
}

/// Summary written next to the binary streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub vocab_size: usize,
    pub bins: Vec<BinRange>,
    pub has_unk: bool,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
    #[serde(default)]
    pub config_hash: String,
}

impl DataManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let s = TokenStream::new(Split::Valid, vec![1, 258, 70000]);
        s.save(&p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[4..8], &[2, 1, 0, 0]);
        assert_eq!(TokenStream::load(Split::Valid, &p).unwrap(), s);
    }

    #[test]
    fn validate_rejects_zero_and_overflow() {
        assert!(TokenStream::new(Split::Train, vec![1, 0]).validate(5).is_err());
        assert!(TokenStream::new(Split::Train, vec![1, 6]).validate(5).is_err());
        assert!(TokenStream::new(Split::Train, vec![1, 5]).validate(5).is_ok());
    }
}
