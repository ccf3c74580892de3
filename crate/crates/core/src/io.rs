//! Raw media and checkpoint file formats.
//!
//! * video: four little-endian `u32` dims `(frames, height, width, 3)`, then
//!   `f64` pixels row-major.
//! * audio: `u32` sample rate, then `f64` samples to the end of the file.
//! * checkpoint: `DPTCKPT1`, `u32` length + model config as TOML, `u32`
//!   entry count, then per entry `u32` name length, name, `u32` rank, `u32`
//!   dims, and `f64` data. Everything little-endian.

use std::fs;
use std::path::Path;

use crate::chunking::{AudioBuffer, ChunkError, VideoStream, NOMINAL_FPS};
use crate::model::{DyadicModel, ModelConfig, ModelError};
use crate::nn::Module;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPTCKPT1";
/// Refuse allocations beyond this many elements while decoding.
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("cannot access {path}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format}: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn malformed(format: &'static str, reason: impl Into<String>) -> IoError {
    IoError::Malformed { format, reason: reason.into() }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| IoError::File { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    fs::write(path, bytes).map_err(wrap)
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Reader { buf, pos: 0, format }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(malformed(self.format, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| malformed(self.format, "size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn element_count(format: &'static str, dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| malformed(format, format!("dims {dims:?} too large")))
}

/// Frames as 8-bit RGB: pixel values are rounded and clamped to `0..=255`.
pub fn encode_video(video: &VideoStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + video.data().len());
    for d in [video.frame_count(), video.height(), video.width(), 3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(video.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

/// Decode a raw video; the frame rate is not stored and is taken as nominal.
pub fn decode_video(bytes: &[u8]) -> Result<VideoStream> {
    let mut r = Reader::new(bytes, "video");
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    if dims[3] != 3 {
        return Err(malformed("video", format!("expected 3 channels, got {}", dims[3])));
    }
    let n = element_count("video", &dims)?;
    let data = r.take(n)?.iter().map(|&b| f64::from(b)).collect();
    if r.remaining() != 0 {
        return Err(malformed("video", format!("{} trailing bytes", r.remaining())));
    }
    Ok(VideoStream::new(dims[0], dims[1], dims[2], NOMINAL_FPS, data)?)
}

const PCM_SCALE: f64 = i16::MAX as f64;

/// Quantize a sample in `[-1, 1]` to the nearest 16-bit PCM level.
pub fn quantize_sample(x: f64) -> f64 {
    (x.clamp(-1.0, 1.0) * PCM_SCALE).round() / PCM_SCALE
}

/// Sample rate followed by 16-bit PCM samples; values are clamped to
/// `[-1, 1]`.
pub fn encode_audio(audio: &AudioBuffer) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + audio.samples.len() * 2);
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    for &x in &audio.samples {
        let q = (x.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn decode_audio(bytes: &[u8]) -> Result<AudioBuffer> {
    let mut r = Reader::new(bytes, "audio");
    let sample_rate = r.u32()?;
    if !r.remaining().is_multiple_of(2) {
        return Err(malformed("audio", "sample data is not a whole number of 16-bit values"));
    }
    let samples = r
        .take(r.remaining())?
        .chunks_exact(2)
        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / PCM_SCALE)
        .collect();
    Ok(AudioBuffer { sample_rate, samples })
}

/// Named parameter tensors plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &DyadicModel) -> Self {
        Checkpoint {
            config: model.config().clone(),
            tensors: model
                .parameters()
                .iter()
                .map(|p| NamedTensor { name: p.name().to_string(), shape: p.shape().to_vec(), data: p.values() })
                .collect(),
        }
    }

    /// Rebuild the model and load the stored values.
    pub fn to_model(&self) -> Result<DyadicModel> {
        let model = DyadicModel::new(self.config.clone())?;
        for t in &self.tensors {
            let p = model.parameter(&t.name).ok_or_else(|| ModelError::UnknownParameter(t.name.clone()))?;
            if p.shape() != t.shape.as_slice() {
                return Err(malformed("checkpoint", format!("{} has shape {:?}, model expects {:?}", t.name, t.shape, p.shape())));
            }
        }
        model.load_values(self.tensors.iter().map(|t| (t.name.as_str(), t.data.as_slice())))?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let cfg = toml::to_string(&self.config).expect("model config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            push_f64s(&mut out, &t.data);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(malformed("checkpoint", "bad magic"));
        }
        let len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(len)?).map_err(|e| malformed("checkpoint", e.to_string()))?;
        let config: ModelConfig = toml::from_str(cfg).map_err(|e| malformed("checkpoint", e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| malformed("checkpoint", e.to_string()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(malformed("checkpoint", format!("{name}: rank {rank} too large")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = element_count("checkpoint", &shape)?;
            let data = r.f64s(n)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(malformed("checkpoint", format!("{name}: non-finite value")));
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(malformed("checkpoint", format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Geometry, Scenario};
    use proptest::prelude::*;

    #[test]
    fn video_roundtrip() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 3).map(|i| (i % 256) as f64).collect();
        let v = VideoStream::new(2, 3, 4, NOMINAL_FPS, data).unwrap();
        let bytes = encode_video(&v);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        let back = decode_video(&bytes).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!((back.frame_count(), back.height(), back.width()), (2, 3, 4));
        assert!(decode_video(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_video(&extra).is_err());
    }

    #[test]
    fn video_rejects_huge_dims() {
        let mut bytes = vec![];
        for d in [u32::MAX, u32::MAX, 1, 3] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        assert!(matches!(decode_video(&bytes), Err(IoError::Malformed { .. })));
    }

    #[test]
    fn audio_roundtrip() {
        let samples = [0.5, -0.25, 0.0, 1.0, -1.0].map(quantize_sample).to_vec();
        let a = AudioBuffer { sample_rate: 44100, samples };
        assert_eq!(decode_audio(&encode_audio(&a)).unwrap(), a);
        assert!((quantize_sample(0.3) - 0.3).abs() <= 0.5 / PCM_SCALE);
        assert_eq!(quantize_sample(7.0), 1.0);
        assert!(decode_audio(&[1, 2]).is_err());
        assert!(decode_audio(&encode_audio(&a)[..7]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = DyadicModel::new(ModelConfig::new(Scenario::LEm, Geometry::Reduced, 5).unwrap()).unwrap();
        let ck = Checkpoint::from_model(&model);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_model().unwrap();
        assert!(rebuilt.parameters().iter().zip(model.parameters()).all(|(a, b)| a.values() == b.values()));
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn checkpoint_with_mismatched_shape_rejected() {
        let model = DyadicModel::new(ModelConfig::new(Scenario::L, Geometry::Reduced, 5).unwrap()).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.tensors[0].shape = vec![ck.tensors[0].data.len()];
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&model);
        ck.tensors.pop();
        assert!(ck.to_model().is_err());
    }

    proptest! {
        #[test]
        fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_video(&bytes);
            let _ = decode_audio(&bytes);
            let _ = Checkpoint::decode(&bytes);
            let mut with_magic = CHECKPOINT_MAGIC.to_vec();
            with_magic.extend_from_slice(&bytes);
            let _ = Checkpoint::decode(&with_magic);
        }
    }
}
