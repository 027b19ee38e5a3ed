use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenizerError;

/// Vocabulary shipped with the crate.
pub const BUILTIN_VOCAB: &str = include_str!("../../assets/vocab.txt");

/// Token strings of the special entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: String,
    pub eos: String,
    pub user_header: String,
    pub assistant_header: String,
    pub image_marker: String,
    pub image_context: String,
    pub pad: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            bos: "<s>".into(),
            eos: "</s>".into(),
            user_header: "<|user|>".into(),
            assistant_header: "<|assistant|>".into(),
            image_marker: "<|image|>".into(),
            image_context: "<IMG_CONTEXT>".into(),
            pad: "<pad>".into(),
        }
    }
}

impl SpecialTokens {
    fn all(&self) -> [&str; 7] {
        [
            &self.bos,
            &self.eos,
            &self.user_header,
            &self.assistant_header,
            &self.image_marker,
            &self.image_context,
            &self.pad,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub user_header: u32,
    pub assistant_header: u32,
    pub image_marker: u32,
    pub image_context: u32,
    pub pad: u32,
}

/// First line of a vocab file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabHeader {
    specials: SpecialTokens,
    #[serde(default)]
    byte_fallback: bool,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(u8, u32)>,
    token: Option<u32>,
}

/// Byte trie for greedy longest-match lookup.
#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn new() -> Self {
        Self { nodes: vec![TrieNode::default()] }
    }

    fn insert(&mut self, bytes: &[u8], id: u32) {
        let mut node = 0usize;
        for &b in bytes {
            node = match self.nodes[node].children.binary_search_by_key(&b, |&(k, _)| k) {
                Ok(i) => self.nodes[node].children[i].1 as usize,
                Err(i) => {
                    let next = self.nodes.len() as u32;
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(i, (b, next));
                    next as usize
                }
            };
        }
        self.nodes[node].token = Some(id);
    }

    /// Longest token that prefixes `bytes`: `(id, byte length)`.
    fn longest_prefix(&self, bytes: &[u8]) -> Option<(u32, usize)> {
        let mut node = 0usize;
        let mut best = None;
        for (i, &b) in bytes.iter().enumerate() {
            let children = &self.nodes[node].children;
            match children.binary_search_by_key(&b, |&(k, _)| k) {
                Ok(j) => node = children[j].1 as usize,
                Err(_) => break,
            }
            if let Some(id) = self.nodes[node].token {
                best = Some((id, i + 1));
            }
        }
        best
    }
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Immutable token table with greedy longest-match tokenization and
/// byte fallback.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    special_tokens: SpecialTokens,
    specials: SpecialIds,
    /// id of `<0xNN>` for every byte, when byte fallback is enabled.
    byte_ids: Option<Box<[u32; 256]>>,
    /// byte value for each id that is a fallback token.
    byte_of: Vec<Option<u8>>,
    trie: Trie,
}

impl Vocab {
    /// Builds a vocab from its token list; id = position. Every special must
    /// be present, and with `byte_fallback` all 256 `<0xNN>` tokens too.
    pub fn new(tokens: Vec<String>, special_tokens: SpecialTokens, byte_fallback: bool) -> Result<Self, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TokenizerError::VocabFormat { line: i, reason: "empty token".into() });
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::VocabFormat { line: i, reason: format!("duplicate token {t:?}") });
            }
        }
        let lookup = |s: &str| ids.get(s).copied().ok_or_else(|| TokenizerError::MissingSpecial(s.to_owned()));
        let specials = SpecialIds {
            bos: lookup(&special_tokens.bos)?,
            eos: lookup(&special_tokens.eos)?,
            user_header: lookup(&special_tokens.user_header)?,
            assistant_header: lookup(&special_tokens.assistant_header)?,
            image_marker: lookup(&special_tokens.image_marker)?,
            image_context: lookup(&special_tokens.image_context)?,
            pad: lookup(&special_tokens.pad)?,
        };
        let mut distinct: Vec<&str> = special_tokens.all().to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != 7 {
            return Err(TokenizerError::VocabFormat { line: 0, reason: "special tokens must be distinct".into() });
        }

        let mut byte_of = vec![None; tokens.len()];
        let byte_ids = if byte_fallback {
            let mut table = Box::new([0u32; 256]);
            for b in 0..=255u8 {
                let id = lookup(&byte_token(b))?;
                table[b as usize] = id;
                byte_of[id as usize] = Some(b);
            }
            Some(table)
        } else {
            None
        };

        let mut trie = Trie::new();
        for (i, t) in tokens.iter().enumerate() {
            if byte_of[i].is_none() {
                trie.insert(t.as_bytes(), i as u32);
            }
        }
        Ok(Self { tokens, ids, special_tokens, specials, byte_ids, byte_of, trie })
    }

    /// A vocab holding `words`, the default specials and the byte-fallback
    /// range.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self, TokenizerError> {
        let specials = SpecialTokens::default();
        let mut tokens: Vec<String> = specials.all().iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(byte_token));
        for w in words {
            let w = w.as_ref().to_owned();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::new(tokens, specials, true)
    }

    /// Parses the file format: a JSON header line, then one token per line
    /// with id = index among the token lines.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.split('\n');
        let header_line = lines.next().unwrap_or_default();
        let header: VocabHeader = serde_json::from_str(header_line)
            .map_err(|e| TokenizerError::VocabFormat { line: 0, reason: format!("bad header: {e}") })?;
        let mut tokens: Vec<String> = lines.map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned()).collect();
        if tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop();
        }
        Self::new(tokens, header.specials, header.byte_fallback)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_VOCAB).expect("builtin vocab is valid")
    }

    /// Serializes to the file format accepted by [`Vocab::parse`].
    pub fn to_file_string(&self) -> String {
        let header = VocabHeader { specials: self.special_tokens.clone(), byte_fallback: self.byte_ids.is_some() };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> &SpecialIds {
        &self.specials
    }

    pub fn special_tokens(&self) -> &SpecialTokens {
        &self.special_tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let s = &self.specials;
        [s.bos, s.eos, s.user_header, s.assistant_header, s.image_marker, s.image_context, s.pad].contains(&id)
    }

    /// Greedy longest match; bytes no token covers become fallback tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut pos = 0;
        while pos < bytes.len() {
            match self.trie.longest_prefix(&bytes[pos..]) {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    let b = bytes[pos];
                    match &self.byte_ids {
                        Some(table) => out.push(table[b as usize]),
                        // Without fallback an unmatched byte maps to pad.
                        None => out.push(self.specials.pad),
                    }
                    pos += 1;
                }
            }
        }
        out
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(ids.len() * 4);
        for &id in ids {
            match self.byte_of.get(id as usize) {
                Some(Some(b)) => bytes.push(*b),
                Some(None) => bytes.extend_from_slice(self.tokens[id as usize].as_bytes()),
                None => return Err(TokenizerError::UnknownId(id)),
            }
        }
        String::from_utf8(bytes).map_err(|e| TokenizerError::InvalidUtf8(e.utf8_error().valid_up_to()))
    }
}
