//! Instruction prompt assembly around the projected video tokens.

use serde::{Deserialize, Serialize};

use super::error::{AdapterError, Result};

const PREFIX: &str = "USER: ";
const SUFFIX: &str = "Assistant:";
const SENTINEL_OPEN: &str = "<video:";

/// A rendered prompt with a single video-token placeholder span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    rendered_text: String,
    instruction: String,
    video_token_count: usize,
}

impl PromptLayout {
    pub fn rendered_text(&self) -> &str {
        &self.rendered_text
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn video_token_count(&self) -> usize {
        self.video_token_count
    }

    /// Byte range of the `<video:COUNT>` span within the rendered text.
    pub fn placeholder_span(&self) -> std::ops::Range<usize> {
        let start = PREFIX.len() + self.instruction.len() + 1;
        start..start + placeholder(self.video_token_count).len()
    }

    /// Recovers instruction and token count from rendered text.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(PREFIX)
            .and_then(|t| t.strip_suffix(SUFFIX))
            .and_then(|t| t.strip_suffix(' '))
            .ok_or_else(|| AdapterError::Prompt("missing USER:/Assistant: frame".into()))?;
        let open = body
            .rfind(SENTINEL_OPEN)
            .ok_or_else(|| AdapterError::Prompt("no video placeholder".into()))?;
        let count: usize = body[open + SENTINEL_OPEN.len()..]
            .strip_suffix('>')
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| AdapterError::Prompt("malformed video placeholder".into()))?;
        let instruction = body[..open]
            .strip_suffix(' ')
            .ok_or_else(|| AdapterError::Prompt("placeholder must follow the instruction".into()))?;
        build_prompt(instruction, count)
    }
}

fn placeholder(count: usize) -> String {
    format!("{SENTINEL_OPEN}{count}>")
}

/// Renders `USER: <instruction> <video:COUNT> Assistant:`.
pub fn build_prompt(instruction: &str, video_token_count: usize) -> Result<PromptLayout> {
    if instruction.trim().is_empty() {
        return Err(AdapterError::Prompt("instruction is empty".into()));
    }
    if video_token_count == 0 {
        return Err(AdapterError::Prompt("video token count must be positive".into()));
    }
    if instruction.contains(SENTINEL_OPEN) {
        return Err(AdapterError::Prompt(format!(
            "instruction contains the reserved `{SENTINEL_OPEN}` sentinel"
        )));
    }
    Ok(PromptLayout {
        rendered_text: format!("{PREFIX}{instruction} {} {SUFFIX}", placeholder(video_token_count)),
        instruction: instruction.to_string(),
        video_token_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_template() {
        let p = build_prompt("Describe the video", 264).unwrap();
        assert_eq!(p.rendered_text(), "USER: Describe the video <video:264> Assistant:");
        assert_eq!(&p.rendered_text()[p.placeholder_span()], "<video:264>");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_prompt("Describe", 0).is_err());
        assert!(build_prompt("  ", 3).is_err());
        assert!(build_prompt("ignore <video:5> this", 3).is_err());
    }

    #[test]
    fn parse_roundtrip() {
        let p = build_prompt("What happens after the dog <jumps>?", 12).unwrap();
        assert_eq!(PromptLayout::parse(p.rendered_text()).unwrap(), p);
        assert!(PromptLayout::parse("USER: hi Assistant:").is_err());
    }
}
