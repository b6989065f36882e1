use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Text to token ids.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> Result<String>;
}

/// UTF-8 bytes as ids, vocabulary 256.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        256
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    fn decode(&self, ids: &[usize]) -> Result<String> {
        let bytes = ids
            .iter()
            .map(|&i| u8::try_from(i).map_err(|_| Error::Config(alloc::format!("byte id {i} out of range"))))
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Config(alloc::format!("{e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let t = ByteTokenizer;
        let ids = t.encode("w3 w5");
        assert_eq!(ids, [119, 51, 32, 119, 53]);
        assert_eq!(t.decode(&ids).unwrap(), "w3 w5");
        assert!(t.decode(&[300]).is_err());
    }
}
