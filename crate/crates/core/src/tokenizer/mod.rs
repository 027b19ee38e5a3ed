//! Chat templating, greedy tokenization, image placeholder expansion and
//! assistant-only supervision.

mod chat;
mod sequence;
mod vocab;

pub use chat::{render_chat, render_chat_expanded, ChatMessage, ChatPart, RenderedPrompt, Role};
pub use sequence::{
    build_supervision_mask, encode_prompt, expand_image_placeholders, masked_cross_entropy, Expanded, ImageSpan,
    TokenSequence,
};
pub use vocab::{SpecialIds, SpecialTokens, Vocab, BUILTIN_VOCAB};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("vocab format error at token line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("special token {0:?} is not in the vocab")]
    MissingSpecial(String),
    #[error("{0}")]
    Io(String),
    #[error("chat template error: {0}")]
    Template(String),
    #[error("placeholder expansion error: {markers} image markers but {counts} tile counts")]
    Expansion { markers: usize, counts: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("detokenized bytes are not UTF-8 (valid up to byte {0})")]
    InvalidUtf8(usize),
    #[error("malformed sequence: first assistant index {index} exceeds length {len}")]
    MalformedSequence { index: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    vocab.tokenize(text)
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Result<String, TokenizerError> {
    vocab.detokenize(ids)
}
