//! Time-synchronized video and audio chunking.
//!
//! A chunk spans 64 source frames (≈2.56 s at 25 fps) of which every second
//! frame is kept, giving 32 frames. The matching audio window is anchored at
//! the chunk's first source frame and holds exactly 132 300 samples (3 s at
//! 44.1 kHz), so it runs 0.44 s into the next chunk.

use crate::geometry::{BoundingBox, Track};
use crate::tensor::{Tensor, TensorError};

pub const CHUNK_FRAMES: usize = 32;
pub const FRAME_STRIDE: usize = 2;
pub const CHUNK_SPAN: usize = CHUNK_FRAMES * FRAME_STRIDE;
pub const NOMINAL_FPS: f64 = 25.0;
pub const AUDIO_SAMPLE_RATE: u32 = 44_100;
pub const AUDIO_CHUNK_SAMPLES: usize = 132_300;
pub const CHUNK_SIZE: usize = 112;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ChunkError {
    #[error("video has {0} frames, at least 64 are needed for one chunk")]
    TooShort(usize),
    #[error("frames [{start}, {end}) exceed the video's {frame_count} frames")]
    RangeOutOfVideo {
        start: usize,
        end: usize,
        frame_count: usize,
    },
    #[error("face crop requested but the track is empty")]
    EmptyTrack,
    #[error("audio sample rate {0} Hz is not supported (expected 44100)")]
    SampleRate(u32),
    #[error("normalization std must be positive, got {0:?}")]
    BadStats([f64; 3]),
    #[error("invalid video: {0}")]
    InvalidVideo(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ChunkError>;

/// Raw RGB video, `(frames, height, width, 3)` row-major, values in [0,255].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoStream {
    frame_count: usize,
    height: usize,
    width: usize,
    fps: f64,
    data: Vec<f64>,
}

impl VideoStream {
    pub fn new(frame_count: usize, height: usize, width: usize, fps: f64, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ChunkError::InvalidVideo(format!("frame size {width}x{height}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(ChunkError::InvalidVideo(format!("fps {fps}")));
        }
        let expected = frame_count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| ChunkError::InvalidVideo("dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(ChunkError::InvalidVideo(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(ChunkError::InvalidVideo(format!("pixel value {v} outside [0,255]")));
        }
        Ok(VideoStream {
            frame_count,
            height,
            width,
            fps,
            data,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, frame: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((frame * self.height + y) * self.width + x) * 3 + c]
    }
}

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

/// Half-open range of source frames covered by one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    /// The 32 frames kept from the range.
    pub fn selected_frames(&self) -> impl Iterator<Item = usize> {
        (self.start..self.end).step_by(FRAME_STRIDE)
    }
}

/// Consecutive disjoint 64-frame ranges; a trailing remainder is dropped.
pub fn plan_chunks(frame_count: usize) -> Result<Vec<FrameRange>> {
    if frame_count < CHUNK_SPAN {
        return Err(ChunkError::TooShort(frame_count));
    }
    Ok((0..frame_count / CHUNK_SPAN)
        .map(|k| FrameRange {
            start: k * CHUNK_SPAN,
            end: (k + 1) * CHUNK_SPAN,
        })
        .collect())
}

/// Bilinear sample of channel `c` of `frame` over the region `(x1,y1)-(x2,y2)`
/// into an `size×size` grid written to `out` (row-major, 3 channels).
fn resample_region(
    video: &VideoStream,
    frame: usize,
    region: (f64, f64, f64, f64),
    size: usize,
    out: &mut [f64],
) {
    let (x1, y1, x2, y2) = region;
    let (h, w) = (video.height, video.width);
    let sy = (y2 - y1) / size as f64;
    let sx = (x2 - x1) / size as f64;
    let axis = |start: f64, step: f64, i: usize, n: usize| {
        let p = (start + (i as f64 + 0.5) * step - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    for i in 0..size {
        let (ya, yb, wy) = axis(y1, sy, i, h);
        for j in 0..size {
            let (xa, xb, wx) = axis(x1, sx, j, w);
            for c in 0..3 {
                let top = video.pixel(frame, ya, xa, c) * (1.0 - wx) + video.pixel(frame, ya, xb, c) * wx;
                let bot = video.pixel(frame, yb, xa, c) * (1.0 - wx) + video.pixel(frame, yb, xb, c) * wx;
                out[(i * size + j) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
}

/// The 32 selected frames of `range`, each resized to `size×size`. With a
/// track, every frame is cropped to the track box nearest in time first.
pub fn extract_chunk(
    video: &VideoStream,
    range: FrameRange,
    crop: Option<&Track>,
    size: usize,
) -> Result<Tensor> {
    if range.end > video.frame_count || range.end - range.start != CHUNK_SPAN {
        return Err(ChunkError::RangeOutOfVideo {
            start: range.start,
            end: range.end,
            frame_count: video.frame_count,
        });
    }
    if crop.is_some_and(Track::is_empty) {
        return Err(ChunkError::EmptyTrack);
    }
    let full = (0.0, 0.0, video.width as f64, video.height as f64);
    let per_frame = size * size * 3;
    let mut data = vec![0.0; CHUNK_FRAMES * per_frame];
    for (k, frame) in range.selected_frames().enumerate() {
        let region = match crop.and_then(|t| t.nearest(frame)) {
            Some(BoundingBox { x1, y1, x2, y2, .. }) => (*x1, *y1, *x2, *y2),
            None => full,
        };
        resample_region(video, frame, region, size, &mut data[k * per_frame..(k + 1) * per_frame]);
    }
    Ok(Tensor::new(&[CHUNK_FRAMES, size, size, 3], data)?)
}

/// Audio window for the chunk starting at `range.start`, zero-padded at the
/// end of the stream.
pub fn extract_audio(audio: &AudioBuffer, range: FrameRange, fps: f64) -> Result<Tensor> {
    if audio.sample_rate != AUDIO_SAMPLE_RATE {
        return Err(ChunkError::SampleRate(audio.sample_rate));
    }
    let start = (range.start as f64 / fps * AUDIO_SAMPLE_RATE as f64).round() as usize;
    let mut window = vec![0.0; AUDIO_CHUNK_SAMPLES];
    if start < audio.samples.len() {
        let end = (start + AUDIO_CHUNK_SAMPLES).min(audio.samples.len());
        window[..end - start].copy_from_slice(&audio.samples[start..end]);
    }
    Ok(Tensor::new(&[AUDIO_CHUNK_SAMPLES], window)?)
}

/// Per-channel pixel statistics in [0,1] units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(ChunkError::BadStats(std));
        }
        Ok(NormalizationStats { mean, std })
    }
}

impl Default for NormalizationStats {
    /// Stand-in values commonly used for video backbones.
    fn default() -> Self {
        NormalizationStats {
            mean: [0.43216, 0.394666, 0.37645],
            std: [0.22803, 0.22145, 0.216989],
        }
    }
}

/// `x → (x/255 − mean_c)/std_c` on the trailing channel axis.
pub fn normalize_pixels(chunk: &Tensor, stats: &NormalizationStats) -> Result<Tensor> {
    map_channels(chunk, |v, c| (v / 255.0 - stats.mean[c]) / stats.std[c])
}

/// Inverse of [`normalize_pixels`].
pub fn denormalize_pixels(chunk: &Tensor, stats: &NormalizationStats) -> Result<Tensor> {
    map_channels(chunk, |v, c| (v * stats.std[c] + stats.mean[c]) * 255.0)
}

fn map_channels(chunk: &Tensor, f: impl Fn(f64, usize) -> f64) -> Result<Tensor> {
    if chunk.shape().last() != Some(&3) {
        return Err(TensorError::Invalid(format!(
            "expected a trailing RGB axis, got shape {:?}",
            chunk.shape()
        ))
        .into());
    }
    let data = chunk
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, i % 3))
        .collect();
    Ok(Tensor::new(chunk.shape(), data)?)
}

/// Keep about `target` items spread uniformly: indices `round(i·len/target)`.
pub fn subsample_uniform<T: Clone>(items: &[T], target: usize) -> Vec<T> {
    let len = items.len();
    if len <= target {
        return items.to_vec();
    }
    let mut out = Vec::with_capacity(target);
    let mut last = None;
    for i in 0..target {
        let idx = ((i * len) as f64 / target as f64).round() as usize;
        let idx = idx.min(len - 1);
        if last != Some(idx) {
            out.push(items[idx].clone());
            last = Some(idx);
        }
    }
    out
}

/// Face, local, and extended video chunks plus the audio window of one
/// time slice.
#[derive(Debug, Clone)]
pub struct ChunkBundle {
    pub face: Tensor,
    pub local: Tensor,
    pub extended: Tensor,
    pub audio: Tensor,
    pub chunk_index: usize,
    pub range: FrameRange,
}

/// Assemble the bundle for one chunk of a dyadic recording.
pub fn build_bundle(
    local: &VideoStream,
    extended: &VideoStream,
    audio: &AudioBuffer,
    face_track: &Track,
    chunk_index: usize,
    range: FrameRange,
    size: usize,
) -> Result<ChunkBundle> {
    Ok(ChunkBundle {
        face: extract_chunk(local, range, Some(face_track), size)?,
        local: extract_chunk(local, range, None, size)?,
        extended: extract_chunk(extended, range, None, size)?,
        audio: extract_audio(audio, range, local.fps())?,
        chunk_index,
        range,
    })
}
