use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filter::{tag_vocabulary_filter, threshold_filter, CaptionCandidate, CaptionKind, StopwordPolicy, Thresholds};
use super::merge::{merge_to_video_caption, MergeSettings};
use super::{EnrichedCaption, EnrichmentError, FrameAnnotations, Result, Stage, StageCount, Stream};
use crate::keyframe::{Frame, KeyFrameSet};
use crate::services::{DenseCaptioner, FrameCaptioner, FrameTagger, TagSet, TextLlm};

pub struct EnrichmentClients<'a> {
    pub captioner: &'a dyn FrameCaptioner,
    pub dense_captioner: &'a dyn DenseCaptioner,
    pub tagger: &'a dyn FrameTagger,
    pub llm: &'a dyn TextLlm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnrichConfig {
    pub thresholds: Thresholds,
    pub stopwords: StopwordPolicy,
    pub merge: MergeSettings,
}

struct Gathered {
    annotations: FrameAnnotations,
    degraded: bool,
}

fn gather(frame_index: usize, frame: &Frame, clients: &EnrichmentClients<'_>) -> Gathered {
    let tags = clients.tagger.tag_frame(frame);
    let caption = clients.captioner.caption_frame(frame);
    let regions = clients.dense_captioner.dense_caption_frame(frame);
    let degraded = tags.is_err() || caption.is_err() || regions.is_err();
    for err in [tags.as_ref().err(), caption.as_ref().err(), regions.as_ref().err()].into_iter().flatten() {
        tracing::warn!(frame = %frame.id, error = %err, "frame service failed; frame degraded");
    }
    // A frame with any caption-service failure contributes tags only.
    let (caption, region_captions) = match (caption, regions) {
        (Ok(c), Ok(r)) => (Some(c), r),
        _ => (None, Vec::new()),
    };
    Gathered {
        annotations: FrameAnnotations {
            frame_index,
            caption,
            region_captions,
            tags: tags.unwrap_or_default(),
        },
        degraded,
    }
}

/// Full semi-automatic path for one video: gather per-keyframe predictions,
/// threshold them, drop captions outside each frame's tag vocabulary, and
/// merge what survives with the ground-truth caption.
pub fn enrich_video(
    video_id: &str,
    base_caption: &str,
    keyframes: &KeyFrameSet,
    clients: &EnrichmentClients<'_>,
    config: &EnrichConfig,
) -> Result<EnrichedCaption> {
    config.thresholds.validate()?;
    if base_caption.trim().is_empty() {
        return Err(EnrichmentError::Validation("base caption is empty".into()));
    }

    let gathered: Vec<Gathered> = keyframes
        .indices
        .par_iter()
        .zip(keyframes.frames.par_iter())
        .map(|(&i, f)| gather(i, f, clients))
        .collect();

    let mut threshold_counts = [
        StageCount::new(Stage::Threshold, Stream::Caption),
        StageCount::new(Stage::Threshold, Stream::Region),
        StageCount::new(Stage::Threshold, Stream::Tag),
    ];
    let mut degraded_frames = Vec::new();
    let mut thresholded = Vec::with_capacity(gathered.len());
    for g in &gathered {
        if g.degraded {
            degraded_frames.push(g.annotations.frame_index);
        }
        let (kept, counts) = threshold_filter(&g.annotations, &config.thresholds)?;
        for (total, c) in threshold_counts.iter_mut().zip(counts) {
            total.record(c.input, c.kept);
        }
        thresholded.push(kept);
    }

    let tags_by_frame: BTreeMap<usize, TagSet> =
        thresholded.iter().map(|a| (a.frame_index, a.tags.clone())).collect();
    let mut candidates = Vec::new();
    for a in &thresholded {
        if let Some(c) = &a.caption {
            candidates.push(CaptionCandidate { frame_index: a.frame_index, kind: CaptionKind::Frame, text: c.text.clone() });
        }
        for r in &a.region_captions {
            candidates.push(CaptionCandidate { frame_index: a.frame_index, kind: CaptionKind::Region, text: r.text.clone() });
        }
    }
    let outcome = tag_vocabulary_filter(&candidates, &tags_by_frame, &config.stopwords)?;
    for d in &outcome.dropped {
        tracing::debug!(frame = d.caption.frame_index, text = %d.caption.text, offending = ?d.offending, "caption dropped by vocabulary filter");
    }

    let mut vocab_captions = StageCount::new(Stage::Vocabulary, Stream::Caption);
    let mut vocab_regions = StageCount::new(Stage::Vocabulary, Stream::Region);
    let count = |kind, list: &[CaptionCandidate]| list.iter().filter(|c| c.kind == kind).count();
    vocab_captions.record(count(CaptionKind::Frame, &candidates), count(CaptionKind::Frame, &outcome.kept));
    vocab_regions.record(count(CaptionKind::Region, &candidates), count(CaptionKind::Region, &outcome.kept));

    // The filter never edits text, so survivors are matched back by position.
    let survivors: Vec<FrameAnnotations> = thresholded
        .into_iter()
        .map(|mut a| {
            let keep = |kind: CaptionKind, text: &str| {
                outcome.kept.iter().any(|k| k.frame_index == a.frame_index && k.kind == kind && k.text == text)
            };
            if a.caption.as_ref().is_some_and(|c| !keep(CaptionKind::Frame, &c.text)) {
                a.caption = None;
            }
            let regions = std::mem::take(&mut a.region_captions);
            a.region_captions = regions.into_iter().filter(|r| keep(CaptionKind::Region, &r.text)).collect();
            a
        })
        .collect();

    let mut enriched = merge_to_video_caption(clients.llm, video_id, base_caption, &survivors, &config.merge)?;
    let mut stages = threshold_counts.to_vec();
    stages.push(vocab_captions);
    stages.push(vocab_regions);
    enriched.provenance.stages = stages;
    enriched.provenance.degraded_frames = degraded_frames;
    Ok(enriched)
}
