//! Byte-level toy tokenizer.
//!
//! The synthetic vocabulary has one token per byte value (ids 0..=255, all
//! real) plus four special bookkeeping tokens (ids 256..=259, never real, so
//! greedy decoding can't emit them). Both checkpoints of a pair share this
//! vocabulary, which keeps prompt token ids trivially identical across models.
//! There are no chat templates: prompts are consumed as raw text.

/// Byte tokens plus `<pad>`, `<bos>`, `<eos>`, `<unk>`.
pub const TOY_VOCAB_SIZE: usize = 260;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Coarse text class of a token, used when picking class-matched alternative
/// tokens. The four-class rule is a declared convention: a token is
/// space-leading if its text starts with whitespace, otherwise classified by
/// its first character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Alphabetic,
    Numeric,
    Punctuation,
    SpaceLeading,
}

/// The full toy vocabulary: printable ASCII bytes as themselves, other bytes
/// as `<0xNN>`, then the four specials.
pub fn toy_vocab() -> Vec<String> {
    let mut v = Vec::with_capacity(TOY_VOCAB_SIZE);
    for b in 0u16..=255 {
        let b = b as u8;
        if (0x20..=0x7e).contains(&b) {
            v.push((b as char).to_string());
        } else {
            v.push(format!("<0x{b:02X}>"));
        }
    }
    for s in SPECIALS {
        v.push(s.to_string());
    }
    v
}

/// Mask marking the 256 byte tokens real and the specials non-real.
pub fn toy_real_token_mask() -> Vec<bool> {
    let mut m = vec![true; 256];
    m.extend([false; 4]);
    m
}

/// Text to token ids: one token per byte.
pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Token ids back to text. Byte tokens concatenate (invalid UTF-8 replaced);
/// special tokens are dropped.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Class of a byte token. Special tokens classify as punctuation.
pub fn token_class(token: u32) -> TokenClass {
    if token >= 256 {
        return TokenClass::Punctuation;
    }
    let b = token as u8;
    if b.is_ascii_whitespace() {
        TokenClass::SpaceLeading
    } else if b.is_ascii_alphabetic() {
        TokenClass::Alphabetic
    } else if b.is_ascii_digit() {
        TokenClass::Numeric
    } else {
        TokenClass::Punctuation
    }
}
