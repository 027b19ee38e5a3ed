use serde::{Deserialize, Serialize};

use super::{render_chat, render_chat_expanded, ChatMessage, TokenizerError, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpan {
    pub start: usize,
    pub len: usize,
}

/// Token ids with image spans and the assistant-only supervision mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Index of the first assistant header id, or `ids.len()` if none.
    pub first_assistant_index: usize,
    /// Number of header ids at `first_assistant_index` (0 or 1).
    pub header_len: usize,
    pub image_spans: Vec<ImageSpan>,
    pub supervision_mask: Vec<bool>,
}

impl TokenSequence {
    /// Locates the assistant header and builds the mask.
    pub fn new(ids: Vec<u32>, image_spans: Vec<ImageSpan>, vocab: &Vocab) -> Self {
        let header = vocab.specials().assistant_header;
        let t = ids.iter().position(|&id| id == header).unwrap_or(ids.len());
        let header_len = usize::from(t < ids.len());
        let seq = Self {
            supervision_mask: vec![false; ids.len()],
            ids,
            first_assistant_index: t,
            header_len,
            image_spans,
        };
        build_supervision_mask(seq).expect("index located within the sequence")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn visual_len(&self) -> usize {
        self.image_spans.iter().map(|s| s.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expanded {
    pub ids: Vec<u32>,
    pub image_spans: Vec<ImageSpan>,
}

/// Replaces the k-th image marker with `counts[k] · tokens_per_tile` context
/// ids.
pub fn expand_image_placeholders(
    ids: &[u32],
    counts: &[u32],
    tokens_per_tile: u32,
    vocab: &Vocab,
) -> Result<Expanded, TokenizerError> {
    let marker = vocab.specials().image_marker;
    let context = vocab.specials().image_context;
    let markers = ids.iter().filter(|&&id| id == marker).count();
    if markers != counts.len() {
        return Err(TokenizerError::Expansion { markers, counts: counts.len() });
    }
    let visual: usize = counts.iter().map(|&c| (c * tokens_per_tile) as usize).sum();
    let mut out = Vec::with_capacity(ids.len() - markers + visual);
    let mut spans = Vec::with_capacity(markers);
    let mut k = 0;
    for &id in ids {
        if id == marker {
            let len = (counts[k] * tokens_per_tile) as usize;
            spans.push(ImageSpan { start: out.len(), len });
            out.resize(out.len() + len, context);
            k += 1;
        } else {
            out.push(id);
        }
    }
    Ok(Expanded { ids: out, image_spans: spans })
}

/// Recovers image spans from an id list in which placeholders were
/// tokenized from text.
fn spans_from_runs(ids: &[u32], counts: &[u32], tokens_per_tile: u32, vocab: &Vocab) -> Result<Vec<ImageSpan>, TokenizerError> {
    let context = vocab.specials().image_context;
    let mut spans = Vec::with_capacity(counts.len());
    let mut cursor = 0;
    for &c in counts {
        let len = (c * tokens_per_tile) as usize;
        let start = ids[cursor..]
            .iter()
            .position(|&id| id == context)
            .map(|p| p + cursor)
            .ok_or(TokenizerError::Expansion { markers: spans.len(), counts: counts.len() })?;
        if start + len > ids.len() || ids[start..start + len].iter().any(|&id| id != context) {
            return Err(TokenizerError::Expansion { markers: spans.len(), counts: counts.len() });
        }
        spans.push(ImageSpan { start, len });
        cursor = start + len;
    }
    Ok(spans)
}

/// Renders and tokenizes a chat. `compact` inserts context ids after
/// tokenization; otherwise the placeholder text is repeated in the prompt
/// string and tokenized with everything else. Both give the same ids.
pub fn encode_prompt(
    messages: &[ChatMessage],
    vocab: &Vocab,
    tokens_per_tile: u32,
    compact: bool,
) -> Result<TokenSequence, TokenizerError> {
    if compact {
        let rendered = render_chat(messages, vocab)?;
        let ids = vocab.tokenize(&rendered.text);
        let expanded = expand_image_placeholders(&ids, &rendered.image_tiles, tokens_per_tile, vocab)?;
        Ok(TokenSequence::new(expanded.ids, expanded.image_spans, vocab))
    } else {
        let counts: Vec<u32> = render_chat(messages, vocab)?.image_tiles;
        let text = render_chat_expanded(messages, vocab, tokens_per_tile)?;
        let ids = vocab.tokenize(&text);
        let spans = spans_from_runs(&ids, &counts, tokens_per_tile, vocab)?;
        Ok(TokenSequence::new(ids, spans, vocab))
    }
}

/// Sets the mask to true exactly on indices past the assistant header.
pub fn build_supervision_mask(mut seq: TokenSequence) -> Result<TokenSequence, TokenizerError> {
    let len = seq.ids.len();
    let t = seq.first_assistant_index;
    if t > len {
        return Err(TokenizerError::MalformedSequence { index: t, len });
    }
    let first_response = (t + seq.header_len).min(len);
    seq.supervision_mask = (0..len).map(|i| i >= first_response).collect();
    Ok(seq)
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    row[target] - max - sum.ln()
}

/// Next-token cross entropy summed over supervised positions: row `i − 1`
/// of the `T × V` logits scores token `i`.
pub fn masked_cross_entropy(logits: &[f64], vocab_size: usize, seq: &TokenSequence) -> Result<f64, TokenizerError> {
    let t = seq.ids.len();
    if vocab_size == 0 || logits.len() != t * vocab_size {
        return Err(TokenizerError::Dimension(format!(
            "logits hold {} values, expected {t} x {vocab_size}",
            logits.len()
        )));
    }
    if seq.supervision_mask.len() != t {
        return Err(TokenizerError::Dimension(format!("mask length {} != sequence length {t}", seq.supervision_mask.len())));
    }
    let mut loss = 0.0;
    for i in 1..t {
        if !seq.supervision_mask[i] {
            continue;
        }
        let target = seq.ids[i] as usize;
        if target >= vocab_size {
            return Err(TokenizerError::Dimension(format!("token id {target} outside vocab of {vocab_size}")));
        }
        loss -= log_softmax_at(&logits[(i - 1) * vocab_size..i * vocab_size], target);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ChatPart;

    #[test]
    fn expansion_basics() {
        let v = Vocab::builtin();
        let s = v.specials();
        let ids = vec![s.user_header, 10, 11];
        let e = expand_image_placeholders(&ids, &[], 64, &v).unwrap();
        assert_eq!(e.ids, ids);
        assert!(e.image_spans.is_empty());

        let ids = vec![s.user_header, s.image_marker, 10];
        let e = expand_image_placeholders(&ids, &[2], 64, &v).unwrap();
        assert_eq!(e.ids.len(), 2 + 128);
        assert_eq!(e.image_spans, vec![ImageSpan { start: 1, len: 128 }]);
        assert!(e.ids[1..129].iter().all(|&id| id == s.image_context));

        assert_eq!(
            expand_image_placeholders(&ids, &[1, 1], 64, &v),
            Err(TokenizerError::Expansion { markers: 1, counts: 2 })
        );
    }

    #[test]
    fn mask_on_short_dialogue() {
        let v = Vocab::builtin();
        let msgs = [ChatMessage::user(vec![ChatPart::Text("q".into())]), ChatMessage::assistant("ab")];
        let seq = encode_prompt(&msgs, &v, 64, true).unwrap();
        let t = seq.first_assistant_index;
        assert_eq!(seq.ids[t], v.specials().assistant_header);
        assert_eq!(seq.len() - t - 1, 2);
        assert_eq!(seq.supervision_mask.iter().filter(|&&m| m).count(), 2);
        assert!(seq.supervision_mask[seq.len() - 2..].iter().all(|&m| m));
    }

    #[test]
    fn empty_response_masks_nothing() {
        let v = Vocab::builtin();
        let seq = encode_prompt(&[ChatMessage::user(vec![ChatPart::Text("hello".into())])], &v, 64, true).unwrap();
        assert!(seq.supervision_mask.iter().all(|&m| !m));
    }

    #[test]
    fn malformed_index() {
        let v = Vocab::builtin();
        let mut seq = TokenSequence::new(vec![1, 2, 3], vec![], &v);
        seq.first_assistant_index = 4;
        assert_eq!(build_supervision_mask(seq), Err(TokenizerError::MalformedSequence { index: 4, len: 3 }));
    }

    #[test]
    fn loss_edge_cases() {
        let v = Vocab::builtin();
        let msgs = [ChatMessage::user(vec![ChatPart::Text("q".into())]), ChatMessage::assistant("ab")];
        let seq = encode_prompt(&msgs, &v, 64, true).unwrap();
        let vs = v.len();
        // Certain predictions cost nothing.
        let mut logits = vec![-1e9; seq.len() * vs];
        for i in 1..seq.len() {
            logits[(i - 1) * vs + seq.ids[i] as usize] = 0.0;
        }
        assert!(masked_cross_entropy(&logits, vs, &seq).unwrap().abs() < 1e-12);
        // Uniform logits cost ln V per supervised token.
        let uniform = vec![0.25; seq.len() * vs];
        let loss = masked_cross_entropy(&uniform, vs, &seq).unwrap();
        assert!((loss - 2.0 * (vs as f64).ln()).abs() < 1e-9);
        assert!(matches!(masked_cross_entropy(&uniform[1..], vs, &seq), Err(TokenizerError::Dimension(_))));
    }

    #[test]
    fn all_true_mask_is_unmasked_loss() {
        let v = Vocab::with_words(&["x", "y"]).unwrap();
        let mut seq = TokenSequence::new(v.tokenize("xyxy"), vec![], &v);
        seq.supervision_mask = vec![true; seq.len()];
        let vs = v.len();
        let logits: Vec<f64> = (0..seq.len() * vs).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
        let masked = masked_cross_entropy(&logits, vs, &seq).unwrap();
        let mut unmasked = 0.0;
        for i in 1..seq.len() {
            let row = &logits[(i - 1) * vs..i * vs];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            unmasked += lse - row[seq.ids[i] as usize];
        }
        assert!((masked - unmasked).abs() < 1e-9);
    }
}
