use serde::{Deserialize, Serialize};

use super::{CaptionSource, EnrichedCaption, EnrichmentError, FrameAnnotations, MergeInputs, Provenance, Result};
use crate::services::{LlmRequest, TextLlm};

pub const MERGE_PROMPT_VERSION: &str = "merge/v1";
const MERGE_TEMPLATE: &str = include_str!("../../assets/merge_prompt_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeSettings {
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            seed: 0,
        }
    }
}

fn frame_blocks(context: &[FrameAnnotations], include_regions: bool) -> String {
    if context.is_empty() {
        return "(none)".into();
    }
    let mut out = String::new();
    for frame in context {
        out.push_str(&format!("Frame {}:\n", frame.frame_index));
        if let Some(c) = &frame.caption {
            out.push_str(&format!("  caption: {}\n", c.text.trim()));
        }
        if include_regions && !frame.region_captions.is_empty() {
            let regions: Vec<&str> = frame.region_captions.iter().map(|r| r.text.trim()).collect();
            out.push_str(&format!("  regions: {}\n", regions.join("; ")));
        }
        if !frame.tags.is_empty() {
            out.push_str(&format!("  tags: {}\n", frame.tags.labels().collect::<Vec<_>>().join(", ")));
        }
    }
    out.trim_end().to_string()
}

/// Renders the merge prompt. Frames appear in the given order.
pub fn merge_prompt(base_caption: &str, context: &[FrameAnnotations], include_regions: bool) -> String {
    MERGE_TEMPLATE
        .replace("{base_caption}", base_caption.trim())
        .replace("{frame_blocks}", &frame_blocks(context, include_regions))
}

/// Ground-truth caption followed by the surviving frame captions.
pub fn fallback_caption(base_caption: &str, context: &[FrameAnnotations]) -> String {
    let parts: Vec<&str> = std::iter::once(base_caption)
        .chain(context.iter().filter_map(|f| f.caption.as_ref().map(|c| c.text.as_str())))
        .map(|s| s.trim().trim_end_matches('.'))
        .filter(|s| !s.is_empty())
        .collect();
    format!("{}.", parts.join(". "))
}

/// Asks the LLM to fuse the ground-truth caption with filtered frame context.
///
/// A truncated or failed reply is retried once without region captions; if
/// that also fails, the caption is assembled locally and flagged `fallback`.
pub fn merge_to_video_caption(
    llm: &dyn TextLlm,
    video_id: &str,
    base_caption: &str,
    context: &[FrameAnnotations],
    settings: &MergeSettings,
) -> Result<EnrichedCaption> {
    if base_caption.trim().is_empty() {
        return Err(EnrichmentError::Validation("base caption is empty".into()));
    }
    let mut provenance = Provenance {
        merge_inputs: MergeInputs {
            frames: context.len(),
            captions: context.iter().filter(|f| f.caption.is_some()).count(),
            region_captions: context.iter().map(|f| f.region_captions.len()).sum(),
            tags: context.iter().map(|f| f.tags.len()).sum(),
        },
        llm_model: Some(llm.model_tag().to_string()),
        ..Default::default()
    };

    let attempt = |include_regions: bool| -> Option<String> {
        let req = LlmRequest::deterministic(merge_prompt(base_caption, context, include_regions), settings.max_tokens, settings.seed);
        match llm.complete_text(&req) {
            Ok(resp) if !resp.is_truncated() && !resp.text.trim().is_empty() => Some(resp.text.trim().to_string()),
            Ok(resp) => {
                tracing::warn!(video_id, finish_reason = ?resp.finish_reason, "merge reply unusable");
                None
            }
            Err(err) => {
                tracing::warn!(video_id, error = %err, "merge call failed");
                None
            }
        }
    };

    let text = match attempt(true) {
        Some(t) => t,
        None => {
            provenance.reduced_context = true;
            match attempt(false) {
                Some(t) => t,
                None => {
                    provenance.fallback = true;
                    fallback_caption(base_caption, context)
                }
            }
        }
    };

    Ok(EnrichedCaption {
        video_id: video_id.to_string(),
        base_caption: base_caption.to_string(),
        enriched_text: text,
        source: CaptionSource::SemiAutomatic,
        task_id: None,
        annotator_id: None,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::services::{FinishReason, FrameCaption, LlmResponse, RegionBox, RegionCaption, ScriptedLlm, Tag, TagSet};

    fn context() -> Vec<FrameAnnotations> {
        vec![FrameAnnotations {
            frame_index: 4,
            caption: Some(FrameCaption { text: "a man holding a guitar".into(), confidence: 0.9 }),
            region_captions: vec![RegionCaption { text: "wooden guitar".into(), confidence: 0.8, region: RegionBox(0.1, 0.2, 0.6, 0.9) }],
            tags: TagSet::normalized(vec![
                Tag { label: "man".into(), confidence: 0.9 },
                Tag { label: "guitar".into(), confidence: 0.9 },
            ])
            .unwrap(),
        }]
    }

    fn truncated() -> crate::services::ServiceResult<LlmResponse> {
        Ok(LlmResponse { text: "A man".into(), finish_reason: FinishReason::Length })
    }

    #[test]
    fn scripted_reply_is_used_verbatim() {
        let llm = ScriptedLlm::new("mock-llm");
        llm.push_text("FIXED MERGED CAPTION");
        let out = merge_to_video_caption(&llm, "v1", "A man plays.", &context(), &MergeSettings::default()).unwrap();
        assert_eq!(out.enriched_text, "FIXED MERGED CAPTION");
        assert_eq!(out.provenance.merge_inputs, MergeInputs { frames: 1, captions: 1, region_captions: 1, tags: 2 });
        assert_eq!(out.provenance.llm_model.as_deref(), Some("mock-llm"));
        assert!(!out.provenance.fallback);
        let prompt = &llm.calls()[0];
        assert!(prompt.contains("A man plays."));
        assert!(prompt.contains("wooden guitar"));
        assert!(prompt.contains("Discard inconsistent information across frames"));
    }

    #[test]
    fn empty_context_prompt_has_only_base_caption() {
        let llm = ScriptedLlm::default();
        llm.push_text("merged");
        let out = merge_to_video_caption(&llm, "v", "Kids play football.", &[], &MergeSettings::default()).unwrap();
        assert_eq!(out.enriched_text, "merged");
        assert!(llm.calls()[0].contains("Kids play football.\n"));
        assert!(!llm.calls()[0].contains("Frame "));
    }

    #[test]
    fn truncation_retries_without_regions() {
        let llm = ScriptedLlm::default();
        llm.push(truncated()).push_text("shorter caption");
        let out = merge_to_video_caption(&llm, "v", "A man plays.", &context(), &MergeSettings::default()).unwrap();
        assert_eq!(out.enriched_text, "shorter caption");
        assert!(out.provenance.reduced_context && !out.provenance.fallback);
        assert!(!llm.calls()[1].contains("wooden guitar"));
    }

    #[test]
    fn persistent_truncation_falls_back() {
        let llm = ScriptedLlm::default();
        llm.push(truncated()).push(truncated());
        let out = merge_to_video_caption(&llm, "v", "A man plays.", &context(), &MergeSettings::default()).unwrap();
        assert!(out.provenance.fallback);
        assert_eq!(out.enriched_text, "A man plays. a man holding a guitar.");
    }

    #[test]
    fn empty_base_caption_rejected() {
        let llm = ScriptedLlm::default();
        assert!(merge_to_video_caption(&llm, "v", " ", &[], &MergeSettings::default()).is_err());
    }
}
