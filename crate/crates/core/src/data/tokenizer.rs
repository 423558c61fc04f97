//! Byte-level tokenizer: every byte is its own token, plus three specials.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn is_special(id: usize) -> bool {
    id >= PAD
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`tokenize`]. Special tokens are dropped; byte runs that are not
/// valid UTF-8 (possible for sampled output) are replaced lossily.
pub fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| !is_special(t))
        .map(|&t| t as u8)
        .collect();
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    }
}
