/// Document separator token.
pub const SEP: usize = 256;
/// Padding token (never produced by packing; reserved).
pub const PAD: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// Byte-level tokenizer: one token per byte plus two specials.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    /// Byte tokens back to bytes; special tokens are dropped.
    pub fn decode_bytes(&self, tokens: &[usize]) -> Vec<u8> {
        tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }

    /// Lossy text rendering; separators become newlines.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| if t == SEP { b'\n' } else { t as u8 })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let t = ByteTokenizer;
        assert_eq!(t.encode("Hi"), vec![72, 105]);
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[72, 105, SEP, PAD]), "Hi\n");
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = ByteTokenizer;
            prop_assert_eq!(t.decode_bytes(&t.encode_bytes(&bytes)), bytes);
        }

        #[test]
        fn text_round_trip(s in ".{0,80}") {
            let t = ByteTokenizer;
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
