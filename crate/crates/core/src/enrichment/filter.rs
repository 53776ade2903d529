use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EnrichmentError, FrameAnnotations, Result, Stage, StageCount, Stream};
use crate::services::TagSet;

pub const STOPWORDS_VERSION: &str = "stopwords/v1";
const SHIPPED_STOPWORDS: &str = include_str!("../../assets/stopwords_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub caption_min: f64,
    pub region_min: f64,
    pub tag_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            caption_min: 0.7,
            region_min: 0.7,
            tag_min: 0.7,
        }
    }
}

impl Thresholds {
    pub fn uniform(t: f64) -> Self {
        Self {
            caption_min: t,
            region_min: t,
            tag_min: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("caption_min", self.caption_min),
            ("region_min", self.region_min),
            ("tag_min", self.tag_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EnrichmentError::Config(format!("{name} = {v} is outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Drops every prediction whose confidence is below its threshold. Items
/// exactly at the threshold are kept; order is preserved.
pub fn threshold_filter(
    ann: &FrameAnnotations,
    thresholds: &Thresholds,
) -> Result<(FrameAnnotations, [StageCount; 3])> {
    thresholds.validate()?;
    let mut counts = [
        StageCount::new(Stage::Threshold, Stream::Caption),
        StageCount::new(Stage::Threshold, Stream::Region),
        StageCount::new(Stage::Threshold, Stream::Tag),
    ];

    let caption = ann
        .caption
        .clone()
        .filter(|c| c.confidence >= thresholds.caption_min);
    counts[0].record(ann.caption.is_some() as usize, caption.is_some() as usize);

    let region_captions: Vec<_> = ann
        .region_captions
        .iter()
        .filter(|r| r.confidence >= thresholds.region_min)
        .cloned()
        .collect();
    counts[1].record(ann.region_captions.len(), region_captions.len());

    let mut tags = ann.tags.clone();
    tags.retain(|t| t.confidence >= thresholds.tag_min);
    counts[2].record(ann.tags.len(), tags.len());

    Ok((
        FrameAnnotations {
            frame_index: ann.frame_index,
            caption,
            region_captions,
            tags,
        },
        counts,
    ))
}

/// Word normalization shared by captions and tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopwordPolicy {
    pub stopwords: BTreeSet<String>,
    pub plural_fold: bool,
}

impl Default for StopwordPolicy {
    fn default() -> Self {
        Self {
            stopwords: SHIPPED_STOPWORDS
                .lines()
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect(),
            plural_fold: true,
        }
    }
}

impl StopwordPolicy {
    fn fold(&self, word: &str) -> String {
        if self.plural_fold && word.len() > 2 && word.ends_with('s') && !word.ends_with("ss") {
            word[..word.len() - 1].to_string()
        } else {
            word.to_string()
        }
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Lowercased content words of a caption: stopwords removed, plurals folded.
pub fn content_words(caption_text: &str, policy: &StopwordPolicy) -> BTreeSet<String> {
    tokens(caption_text)
        .filter(|w| !policy.stopwords.contains(w))
        .map(|w| policy.fold(&w))
        .collect()
}

/// Words a frame's tags allow, folded like caption words.
pub fn tag_vocabulary(tags: &TagSet, policy: &StopwordPolicy) -> BTreeSet<String> {
    tags.labels().flat_map(tokens).map(|w| policy.fold(&w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    Frame,
    Region,
}

/// A caption awaiting the vocabulary check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub frame_index: usize,
    pub kind: CaptionKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedCaption {
    pub caption: CaptionCandidate,
    pub offending: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VocabularyOutcome {
    pub kept: Vec<CaptionCandidate>,
    pub dropped: Vec<DroppedCaption>,
}

/// Keeps a caption only if every content word appears in its own frame's
/// tag vocabulary.
pub fn tag_vocabulary_filter(
    captions: &[CaptionCandidate],
    tags_by_frame: &BTreeMap<usize, TagSet>,
    policy: &StopwordPolicy,
) -> Result<VocabularyOutcome> {
    let mut vocabularies: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    let mut outcome = VocabularyOutcome::default();
    for caption in captions {
        let tags = tags_by_frame
            .get(&caption.frame_index)
            .ok_or(EnrichmentError::MissingFrame(caption.frame_index))?;
        let vocab = vocabularies
            .entry(caption.frame_index)
            .or_insert_with(|| tag_vocabulary(tags, policy));
        let offending: BTreeSet<String> = content_words(&caption.text, policy)
            .into_iter()
            .filter(|w| !vocab.contains(w))
            .collect();
        if offending.is_empty() {
            outcome.kept.push(caption.clone());
        } else {
            outcome.dropped.push(DroppedCaption {
                caption: caption.clone(),
                offending,
            });
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::services::{FrameCaption, RegionBox, RegionCaption, Tag};

    fn tags(items: &[(&str, f64)]) -> TagSet {
        TagSet::normalized(
            items
                .iter()
                .map(|&(l, c)| Tag { label: l.into(), confidence: c })
                .collect(),
        )
        .unwrap()
    }

    fn words(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn cand(frame: usize, text: &str) -> CaptionCandidate {
        CaptionCandidate { frame_index: frame, kind: CaptionKind::Frame, text: text.into() }
    }

    #[test]
    fn threshold_keeps_tags_at_or_above() {
        let ann = FrameAnnotations { tags: tags(&[("dog", 0.9), ("cat", 0.5)]), ..Default::default() };
        let (out, counts) = threshold_filter(&ann, &Thresholds::default()).unwrap();
        assert_eq!(out.tags, tags(&[("dog", 0.9)]));
        assert_eq!((counts[2].input, counts[2].kept, counts[2].dropped), (2, 1, 1));
    }

    #[test]
    fn zero_thresholds_keep_everything() {
        let ann = FrameAnnotations {
            frame_index: 2,
            caption: Some(FrameCaption { text: "a dog".into(), confidence: 0.1 }),
            region_captions: vec![RegionCaption { text: "ball".into(), confidence: 0.0, region: RegionBox(0.0, 0.0, 1.0, 1.0) }],
            tags: tags(&[("dog", 0.2)]),
        };
        let (out, _) = threshold_filter(&ann, &Thresholds::uniform(0.0)).unwrap();
        assert_eq!(out, ann);
    }

    #[test]
    fn full_threshold_keeps_only_exact_ones() {
        let ann = FrameAnnotations {
            caption: Some(FrameCaption { text: "a dog".into(), confidence: 0.999 }),
            tags: tags(&[("dog", 1.0), ("cat", 0.99)]),
            ..Default::default()
        };
        let (out, _) = threshold_filter(&ann, &Thresholds::uniform(1.0)).unwrap();
        assert!(out.caption.is_none());
        assert_eq!(out.tags, tags(&[("dog", 1.0)]));
    }

    #[test]
    fn threshold_out_of_range() {
        let err = threshold_filter(&FrameAnnotations::default(), &Thresholds::uniform(1.5)).unwrap_err();
        assert!(matches!(err, EnrichmentError::Config(_)));
    }

    #[test]
    fn content_word_examples() {
        let p = StopwordPolicy::default();
        assert_eq!(content_words("A man playing the guitar", &p), words(&["man", "playing", "guitar"]));
        assert_eq!(content_words("Dogs dogs DOG", &p), words(&["dog"]));
        assert!(content_words("", &p).is_empty());
        let no_fold = StopwordPolicy { plural_fold: false, ..p };
        assert_eq!(content_words("Dogs dog", &no_fold), words(&["dogs", "dog"]));
    }

    #[test]
    fn vocabulary_subset_rule() {
        let p = StopwordPolicy::default();
        let caption = [cand(3, "a man playing guitar")];
        let full: BTreeMap<_, _> = [(3, tags(&[("man", 0.9), ("playing", 0.9), ("guitar", 0.9)]))].into();
        let out = tag_vocabulary_filter(&caption, &full, &p).unwrap();
        assert_eq!(out.kept.len(), 1);

        let sparse: BTreeMap<_, _> = [(3, tags(&[("man", 0.9)]))].into();
        let out = tag_vocabulary_filter(&caption, &sparse, &p).unwrap();
        assert!(out.kept.is_empty());
        assert_eq!(out.dropped[0].offending, words(&["playing", "guitar"]));
    }

    #[test]
    fn plural_tags_match_singular_words() {
        let p = StopwordPolicy::default();
        let t: BTreeMap<_, _> = [(0, tags(&[("dogs", 0.9), ("tennis court", 0.8)]))].into();
        let out = tag_vocabulary_filter(&[cand(0, "Dog on the tennis court.")], &t, &p).unwrap();
        assert_eq!(out.kept.len(), 1);
    }

    #[test]
    fn missing_frame_is_wiring_error() {
        let err = tag_vocabulary_filter(&[cand(5, "dog")], &BTreeMap::new(), &StopwordPolicy::default()).unwrap_err();
        assert_eq!(err, EnrichmentError::MissingFrame(5));
    }

    #[test]
    fn stopword_asset_is_lowercase_and_non_empty() {
        let p = StopwordPolicy::default();
        assert!(p.stopwords.len() > 50);
        assert!(p.stopwords.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
        assert!(p.stopwords.contains("the") && p.stopwords.contains("a"));
    }
}
