use serde::{Deserialize, Serialize};

use super::{TokenizerError, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatPart {
    Text(String),
    /// An image encoded as `tiles` encoder inputs (grid tiles plus thumbnail).
    Image { tiles: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ChatPart>,
}

impl ChatMessage {
    pub fn user(parts: Vec<ChatPart>) -> Self {
        Self { role: Role::User, parts }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, parts: vec![ChatPart::Text(text.into())] }
    }
}

/// Prompt text with one marker per image and the tile count of each marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub image_tiles: Vec<u32>,
}

fn validate(messages: &[ChatMessage], vocab: &Vocab) -> Result<(), TokenizerError> {
    if messages.is_empty() {
        return Err(TokenizerError::Template("no messages".into()));
    }
    let specials = vocab.special_tokens();
    let reserved = [
        &specials.bos,
        &specials.eos,
        &specials.user_header,
        &specials.assistant_header,
        &specials.image_marker,
        &specials.image_context,
        &specials.pad,
    ];
    for (i, m) in messages.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if m.role != expected {
            return Err(TokenizerError::Template(format!(
                "message {i} has role {:?}, expected {expected:?} (roles alternate starting with user)",
                m.role
            )));
        }
        if m.parts.is_empty() {
            return Err(TokenizerError::Template(format!("message {i} has no parts")));
        }
        for part in &m.parts {
            match part {
                ChatPart::Image { tiles: 0 } => {
                    return Err(TokenizerError::Template(format!("message {i} has an image with zero tiles")))
                }
                ChatPart::Text(t) => {
                    if let Some(tok) = reserved.iter().find(|s| t.contains(s.as_str())) {
                        return Err(TokenizerError::Template(format!(
                            "message {i} text contains reserved token {tok}"
                        )));
                    }
                }
                ChatPart::Image { .. } => {}
            }
        }
    }
    Ok(())
}

fn render_with(
    messages: &[ChatMessage],
    vocab: &Vocab,
    mut image: impl FnMut(&mut String, u32),
) -> Result<String, TokenizerError> {
    validate(messages, vocab)?;
    let specials = vocab.special_tokens();
    let mut text = String::new();
    for m in messages {
        text.push_str(match m.role {
            Role::User => &specials.user_header,
            Role::Assistant => &specials.assistant_header,
        });
        for part in &m.parts {
            match part {
                ChatPart::Text(t) => text.push_str(t),
                ChatPart::Image { tiles } => image(&mut text, *tiles),
            }
        }
    }
    if messages.last().is_some_and(|m| m.role == Role::User) {
        text.push_str(&specials.assistant_header);
    }
    Ok(text)
}

/// Renders the chat template with a single image marker per image part.
/// A trailing user turn gets the assistant header appended.
pub fn render_chat(messages: &[ChatMessage], vocab: &Vocab) -> Result<RenderedPrompt, TokenizerError> {
    let marker = vocab.special_tokens().image_marker.clone();
    let mut image_tiles = Vec::new();
    let text = render_with(messages, vocab, |text, tiles| {
        text.push_str(&marker);
        image_tiles.push(tiles);
    })?;
    Ok(RenderedPrompt { text, image_tiles })
}

/// Renders with the context placeholder repeated `tiles · tokens_per_tile`
/// times per image.
pub fn render_chat_expanded(
    messages: &[ChatMessage],
    vocab: &Vocab,
    tokens_per_tile: u32,
) -> Result<String, TokenizerError> {
    let placeholder = vocab.special_tokens().image_context.clone();
    render_with(messages, vocab, |text, tiles| {
        let n = (tiles * tokens_per_tile) as usize;
        text.reserve(placeholder.len() * n);
        for _ in 0..n {
            text.push_str(&placeholder);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(s: &str) -> ChatPart {
        ChatPart::Text(s.into())
    }

    #[test]
    fn text_only_prompt() {
        let v = Vocab::builtin();
        let r = render_chat(&[ChatMessage::user(vec![text("hi")])], &v).unwrap();
        assert_eq!(r.text, "<|user|>hi<|assistant|>");
        assert!(r.image_tiles.is_empty());
    }

    #[test]
    fn one_marker_per_image() {
        let v = Vocab::builtin();
        let r = render_chat(&[ChatMessage::user(vec![ChatPart::Image { tiles: 5 }, text("what")])], &v).unwrap();
        assert_eq!(r.text.matches("<|image|>").count(), 1);
        assert_eq!(r.image_tiles, vec![5]);

        let r = render_chat(
            &[ChatMessage::user(vec![ChatPart::Image { tiles: 3 }, text(" and "), ChatPart::Image { tiles: 1 }])],
            &v,
        )
        .unwrap();
        assert_eq!(r.text.matches("<|image|>").count(), 2);
        assert_eq!(r.image_tiles, vec![3, 1]);
    }

    #[test]
    fn expanded_repeats_placeholder() {
        let v = Vocab::builtin();
        let msgs = [ChatMessage::user(vec![ChatPart::Image { tiles: 2 }])];
        let s = render_chat_expanded(&msgs, &v, 64).unwrap();
        assert_eq!(s.matches("<IMG_CONTEXT>").count(), 128);
    }

    #[test]
    fn template_errors() {
        let v = Vocab::builtin();
        assert!(render_chat(&[ChatMessage::assistant("x")], &v).is_err());
        assert!(render_chat(&[ChatMessage::user(vec![text("a")]), ChatMessage::user(vec![text("b")])], &v).is_err());
        assert!(render_chat(&[], &v).is_err());
        assert!(render_chat(&[ChatMessage::user(vec![])], &v).is_err());
        assert!(render_chat(&[ChatMessage::user(vec![ChatPart::Image { tiles: 0 }])], &v).is_err());
        assert!(render_chat(&[ChatMessage::user(vec![text("sneaky <|image|>")])], &v).is_err());
    }

    #[test]
    fn completed_dialogue_has_no_trailing_header() {
        let v = Vocab::builtin();
        let r = render_chat(&[ChatMessage::user(vec![text("q")]), ChatMessage::assistant("ab")], &v).unwrap();
        assert_eq!(r.text, "<|user|>q<|assistant|>ab");
    }
}
