//! Frame ingestion and histogram-based key-frame selection.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BINS_PER_CHANNEL: usize = 32;
pub const DEFAULT_KEYFRAME_COUNT: usize = 8;

#[derive(Debug, Error)]
pub enum KeyframeError {
    #[error("input path `{0}` does not exist")]
    MissingPath(PathBuf),
    #[error("cannot decode `{path}`: {reason}")]
    Undecodable { path: PathBuf, reason: String },
    #[error("frame `{path}` is {found:?} (w,h,c) but earlier frames are {expected:?}")]
    MixedDimensions {
        path: PathBuf,
        expected: (u32, u32, u8),
        found: (u32, u32, u8),
    },
    #[error("no frames found in `{0}`")]
    NoFrames(PathBuf),
    #[error("video decoder failed: {0}")]
    Decoder(String),
    #[error("invalid frame batch: {0}")]
    InvalidBatch(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("histograms have {0} and {1} bins")]
    BinMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = KeyframeError> = std::result::Result<T, E>;

/// An 8-bit raster image with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn from_image(id: impl Into<String>, image: DynamicImage) -> Self {
        let (width, height) = (image.width(), image.height());
        let (channels, data) = match image {
            DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
            DynamicImage::ImageLumaA8(b) => (2, b.into_raw()),
            DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        Self {
            id: id.into(),
            width,
            height,
            channels,
            data,
        }
    }

    /// Uniformly filled frame.
    pub fn solid(id: impl Into<String>, width: u32, height: u32, channels: u8, value: u8) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            channels,
            data: vec![value; (width * height) as usize * channels as usize],
        }
    }

    pub fn dims(&self) -> (u32, u32, u8) {
        (self.width, self.height, self.channels)
    }

    pub fn to_image(&self) -> Option<DynamicImage> {
        let (w, h, raw) = (self.width, self.height, self.data.clone());
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, raw).map(DynamicImage::ImageLuma8),
            2 => image::GrayAlphaImage::from_raw(w, h, raw).map(DynamicImage::ImageLumaA8),
            3 => image::RgbImage::from_raw(w, h, raw).map(DynamicImage::ImageRgb8),
            4 => image::RgbaImage::from_raw(w, h, raw).map(DynamicImage::ImageRgba8),
            _ => None,
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = self
            .to_image()
            .ok_or_else(|| KeyframeError::InvalidBatch(format!("frame `{}` has an invalid buffer", self.id)))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).map_err(|e| KeyframeError::Undecodable {
            path: PathBuf::from(&self.id),
            reason: e.to_string(),
        })?;
        Ok(out.into_inner())
    }
}

/// Ordered frames of one video.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    video_id: String,
    frames: Vec<Frame>,
    timestamps: Vec<f64>,
    sources: Vec<Option<PathBuf>>,
}

impl FrameBatch {
    pub fn new(video_id: impl Into<String>, frames: Vec<Frame>, timestamps: Vec<f64>) -> Result<Self> {
        let sources = vec![None; frames.len()];
        Self::with_sources(video_id, frames, timestamps, sources)
    }

    pub fn with_sources(
        video_id: impl Into<String>,
        frames: Vec<Frame>,
        timestamps: Vec<f64>,
        sources: Vec<Option<PathBuf>>,
    ) -> Result<Self> {
        if frames.len() != timestamps.len() || frames.len() != sources.len() {
            return Err(KeyframeError::InvalidBatch("frames, timestamps and sources differ in length".into()));
        }
        if let Some(first) = frames.first() {
            if let Some(f) = frames.iter().find(|f| f.dims() != first.dims()) {
                return Err(KeyframeError::MixedDimensions {
                    path: PathBuf::from(&f.id),
                    expected: first.dims(),
                    found: f.dims(),
                });
            }
        }
        if timestamps.iter().any(|t| !t.is_finite() || *t < 0.0) || timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KeyframeError::InvalidBatch(
                "timestamps must be non-negative and strictly increasing".into(),
            ));
        }
        Ok(Self {
            video_id: video_id.into(),
            frames,
            timestamps,
            sources,
        })
    }

    /// Frames with timestamps `0, 1, 2, ...` seconds.
    pub fn from_frames(video_id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let ts = (0..frames.len()).map(|i| i as f64).collect();
        Self::new(video_id, frames, ts)
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn sources(&self) -> &[Option<PathBuf>] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Keep every n-th frame.
    Stride(usize),
    /// Resample to roughly this many frames per second.
    Fps(f64),
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Stride(1)
    }
}

/// External decoder invocation. Tokens `{input}`, `{output_dir}` and `{fps}`
/// are substituted; the command must write `frame_%06d.png` files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderCommand(pub String);

impl Default for DecoderCommand {
    fn default() -> Self {
        Self("ffmpeg -loglevel error -i {input} -vf fps={fps} {output_dir}/frame_%06d.png".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub video_id: Option<String>,
    pub sampling: Sampling,
    /// Frame rate of a directory of frames; sets timestamps.
    pub source_fps: f64,
    pub decoder: DecoderCommand,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            video_id: None,
            sampling: Sampling::default(),
            source_fps: 1.0,
            decoder: DecoderCommand::default(),
        }
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Reads a directory of numbered image files, or decodes a video file with
/// the configured decoder command and reads its output.
pub fn ingest_frames(path: &Path, options: &IngestOptions) -> Result<FrameBatch> {
    if !path.exists() {
        return Err(KeyframeError::MissingPath(path.to_path_buf()));
    }
    let video_id = options.video_id.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into())
    });
    if path.is_dir() {
        return ingest_directory(path, &video_id, options.sampling, options.source_fps);
    }

    let fps = match options.sampling {
        Sampling::Fps(f) => f,
        Sampling::Stride(_) => options.source_fps,
    };
    let scratch = tempfile::Builder::new().prefix("vidinstruct-decode-").tempdir()?;
    run_decoder(&options.decoder, path, scratch.path(), fps)?;
    let stride = match options.sampling {
        Sampling::Stride(s) => Sampling::Stride(s),
        Sampling::Fps(_) => Sampling::Stride(1),
    };
    let batch = ingest_directory(scratch.path(), &video_id, stride, fps);
    batch.map(|mut b| {
        b.sources = vec![None; b.frames.len()];
        b
    })
}

fn run_decoder(cmd: &DecoderCommand, input: &Path, out_dir: &Path, fps: f64) -> Result<()> {
    let tokens: Vec<String> = cmd
        .0
        .split_whitespace()
        .map(|t| {
            t.replace("{input}", &input.to_string_lossy())
                .replace("{output_dir}", &out_dir.to_string_lossy())
                .replace("{fps}", &fps.to_string())
        })
        .collect();
    let (program, args) = tokens
        .split_first()
        .ok_or_else(|| KeyframeError::Decoder("empty decoder command".into()))?;
    let output = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| KeyframeError::Decoder(format!("cannot run `{program}`: {e}")))?;
    if !output.status.success() {
        return Err(KeyframeError::Undecodable {
            path: input.to_path_buf(),
            reason: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(())
}

fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_string_lossy();
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn ingest_directory(dir: &Path, video_id: &str, sampling: Sampling, source_fps: f64) -> Result<FrameBatch> {
    if !(source_fps.is_finite() && source_fps > 0.0) {
        return Err(KeyframeError::Invalid(format!("source fps {source_fps} must be positive")));
    }
    let stride = match sampling {
        Sampling::Stride(0) => return Err(KeyframeError::Invalid("stride must be at least 1".into())),
        Sampling::Stride(s) => s,
        Sampling::Fps(f) if f.is_finite() && f > 0.0 => ((source_fps / f).round() as usize).max(1),
        Sampling::Fps(f) => return Err(KeyframeError::Invalid(format!("target fps {f} must be positive"))),
    };

    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
        })
        .collect();
    files.sort_by(|a, b| frame_number(a).cmp(&frame_number(b)).then_with(|| a.cmp(b)));
    if files.is_empty() {
        return Err(KeyframeError::NoFrames(dir.to_path_buf()));
    }

    let mut frames = Vec::new();
    let mut timestamps = Vec::new();
    let mut sources = Vec::new();
    for (i, path) in files.iter().enumerate().step_by(stride) {
        let image = image::open(path).map_err(|e| KeyframeError::Undecodable {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let frame = Frame::from_image(format!("{video_id}/{stem}"), image);
        if let Some(first) = frames.first().map(Frame::dims) {
            if frame.dims() != first {
                return Err(KeyframeError::MixedDimensions {
                    path: path.clone(),
                    expected: first,
                    found: frame.dims(),
                });
            }
        }
        frames.push(frame);
        timestamps.push(i as f64 / source_fps);
        sources.push(Some(path.clone()));
    }
    FrameBatch::with_sources(video_id, frames, timestamps, sources)
}

/// Per-channel intensity histogram, each channel normalized to sum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSignature {
    pub channels: usize,
    pub bins: Vec<f64>,
}

pub fn frame_signature(frame: &Frame) -> HistogramSignature {
    let c = frame.channels.max(1) as usize;
    let mut counts = vec![0u64; c * BINS_PER_CHANNEL];
    for pixel in frame.data.chunks_exact(c) {
        for (ch, &v) in pixel.iter().enumerate() {
            counts[ch * BINS_PER_CHANNEL + (v as usize * BINS_PER_CHANNEL) / 256] += 1;
        }
    }
    let pixels = (frame.data.len() / c).max(1) as f64;
    HistogramSignature {
        channels: c,
        bins: counts.into_iter().map(|n| n as f64 / pixels).collect(),
    }
}

/// L1 distance between signatures.
pub fn signature_distance(a: &HistogramSignature, b: &HistogramSignature) -> Result<f64> {
    if a.bins.len() != b.bins.len() {
        return Err(KeyframeError::BinMismatch(a.bins.len(), b.bins.len()));
    }
    Ok(a.bins.iter().zip(&b.bins).map(|(x, y)| (x - y).abs()).sum())
}

#[derive(Debug, Clone)]
pub struct KeyFrameSet {
    pub video_id: String,
    pub indices: Vec<usize>,
    pub frames: Vec<Frame>,
}

/// JSON manifest describing a key-frame selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeManifest {
    pub video_id: String,
    pub indices: Vec<usize>,
    pub files: Vec<String>,
}

impl KeyFrameSet {
    /// Manifest referencing the frames' source files, or their ids when a
    /// frame has no file behind it.
    pub fn manifest(&self, batch: &FrameBatch) -> KeyframeManifest {
        let files = self
            .indices
            .iter()
            .map(|&i| match &batch.sources()[i] {
                Some(p) => p.to_string_lossy().into_owned(),
                None => batch.frames()[i].id.clone(),
            })
            .collect();
        KeyframeManifest {
            video_id: self.video_id.clone(),
            indices: self.indices.clone(),
            files,
        }
    }

    /// Writes the selected frames as PNG files into `dir` and returns a
    /// manifest pointing at them.
    pub fn write_to(&self, dir: &Path) -> Result<KeyframeManifest> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.frames.len());
        for (&i, frame) in self.indices.iter().zip(&self.frames) {
            let path = dir.join(format!("frame_{i:06}.png"));
            std::fs::write(&path, frame.to_png()?)?;
            files.push(path.to_string_lossy().into_owned());
        }
        Ok(KeyframeManifest {
            video_id: self.video_id.clone(),
            indices: self.indices.clone(),
            files,
        })
    }
}

/// Greedy farthest-point selection in histogram space.
///
/// Starts from frame 0 and repeatedly adds the frame whose nearest selected
/// frame is farthest away (lowest index wins ties), stopping at `k` frames or
/// once every remaining frame duplicates a selected one.
pub fn select_keyframes(batch: &FrameBatch, k: usize) -> Result<KeyFrameSet> {
    if k == 0 {
        return Err(KeyframeError::Invalid("keyframe count must be at least 1".into()));
    }
    if batch.is_empty() {
        return Err(KeyframeError::InvalidBatch("cannot select keyframes from an empty batch".into()));
    }
    let signatures: Vec<HistogramSignature> = batch.frames().iter().map(frame_signature).collect();
    let mut selected = vec![0usize];
    let mut chosen = vec![false; signatures.len()];
    chosen[0] = true;
    let mut nearest: Vec<f64> = signatures
        .iter()
        .map(|s| signature_distance(&signatures[0], s))
        .collect::<Result<_>>()?;

    while selected.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in nearest.iter().enumerate() {
            if !chosen[i] && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((next, dist)) = best else { break };
        if dist <= 0.0 {
            break;
        }
        chosen[next] = true;
        selected.push(next);
        for (i, s) in signatures.iter().enumerate() {
            let d = signature_distance(&signatures[next], s)?;
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }

    selected.sort_unstable();
    Ok(KeyFrameSet {
        video_id: batch.video_id().to_string(),
        frames: selected.iter().map(|&i| batch.frames()[i].clone()).collect(),
        indices: selected,
    })
}
