//! Byte-level tokenizer: every byte is its own token, vocabulary 256.

pub const VOCAB_SIZE: usize = 256;

pub fn encode(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

pub fn encode_str(text: &str) -> Vec<u32> {
    encode(text.as_bytes())
}

/// Token ids above 255 are replaced by `?`.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect()
}
