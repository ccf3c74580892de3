//! Feature extractors behind fixed shape contracts, with deterministic stubs.
//!
//! Visual: `(32, S, S, 3)` chunk → `(16, S/4, S/4, 128)` features (S = 112 at
//! full geometry). Audio: 132 300 samples → 128 features. The stubs are
//! seeded random projections; they are frozen on construction.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chunking::{normalize_pixels, ChunkBundle, ChunkError, NormalizationStats, AUDIO_CHUNK_SAMPLES, CHUNK_FRAMES};
use crate::nn::{freeze, Linear, Module};
use crate::tensor::{Parameter, Tensor, TensorError};

pub const FEATURE_CHANNELS: usize = 128;
pub const FEATURE_FRAMES: usize = 16;
pub const AUDIO_FEATURES: usize = 128;
const SPATIAL_REDUCTION: usize = 4;
const AUDIO_WINDOW: usize = 1024;
const AUDIO_LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("{backbone} expects input shape {expected}, got {got:?}")]
    InputShape {
        backbone: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

pub trait VisualBackbone: Module {
    /// `(32, S, S, 3)` → `(16, S/4, S/4, 128)`.
    fn forward(&self, chunk: &Tensor) -> Result<Tensor>;
}

pub trait AudioBackbone: Module {
    /// `(132300,)` → `(128,)`.
    fn forward(&self, audio: &Tensor) -> Result<Tensor>;
}

/// Temporal pair averaging, 4×4 spatial average pooling, and a seeded
/// 3→128 channel lift with ReLU.
#[derive(Debug, Clone)]
pub struct StubVisual {
    lift: Linear,
}

impl StubVisual {
    pub fn new(name: &str, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lift = Linear::new(&format!("{name}.lift"), 3, FEATURE_CHANNELS, true, &mut rng)?;
        let stub = StubVisual { lift };
        freeze(&stub);
        Ok(stub)
    }
}

impl Module for StubVisual {
    fn parameters(&self) -> Vec<Parameter> {
        self.lift.parameters()
    }
}

impl VisualBackbone for StubVisual {
    fn forward(&self, chunk: &Tensor) -> Result<Tensor> {
        let shape = chunk.shape();
        let ok = matches!(shape, [t, h, w, 3] if *t == CHUNK_FRAMES && h == w && *h % SPATIAL_REDUCTION == 0);
        if !ok {
            return Err(BackboneError::InputShape {
                backbone: "visual stub",
                expected: "(32, S, S, 3) with S divisible by 4".into(),
                got: shape.to_vec(),
            });
        }
        let s = shape[1] / SPATIAL_REDUCTION;
        let pooled = chunk.pool_avg(&[2, SPATIAL_REDUCTION, SPATIAL_REDUCTION], &[2, SPATIAL_REDUCTION, SPATIAL_REDUCTION])?;
        let rows = pooled.reshape(&[FEATURE_FRAMES * s * s, 3])?;
        let lifted = self.lift.forward(&rows)?.relu()?;
        Ok(lifted.reshape(&[FEATURE_FRAMES, s, s, FEATURE_CHANNELS])?)
    }
}

/// Log energies of 128 seeded filters placed on evenly strided windows.
#[derive(Debug, Clone)]
pub struct StubAudio {
    bank: Parameter,
}

impl StubAudio {
    pub fn new(name: &str, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = Parameter::uniform(format!("{name}.bank"), &[AUDIO_FEATURES, AUDIO_WINDOW], 1, &mut rng)?;
        let stub = StubAudio { bank };
        freeze(&stub);
        Ok(stub)
    }

    fn window_stride() -> usize {
        (AUDIO_CHUNK_SAMPLES - AUDIO_WINDOW) / (AUDIO_FEATURES - 1)
    }
}

impl Module for StubAudio {
    fn parameters(&self) -> Vec<Parameter> {
        vec![self.bank.clone()]
    }
}

impl AudioBackbone for StubAudio {
    fn forward(&self, audio: &Tensor) -> Result<Tensor> {
        if audio.shape() != [AUDIO_CHUNK_SAMPLES] {
            return Err(BackboneError::InputShape {
                backbone: "audio stub",
                expected: format!("({AUDIO_CHUNK_SAMPLES},)"),
                got: audio.shape().to_vec(),
            });
        }
        let x = audio.data();
        let bank = self.bank.tensor().data();
        let stride = Self::window_stride();
        let feats: Vec<f64> = (0..AUDIO_FEATURES)
            .map(|k| {
                let seg = &x[k * stride..k * stride + AUDIO_WINDOW];
                let taps = &bank[k * AUDIO_WINDOW..(k + 1) * AUDIO_WINDOW];
                let energy = seg.iter().zip(taps).map(|(s, w)| (s * w).powi(2)).sum::<f64>() / AUDIO_WINDOW as f64;
                (energy + AUDIO_LOG_FLOOR).ln()
            })
            .collect();
        Ok(Tensor::vector(&feats)?)
    }
}

/// Face network, the context network shared by the local and extended
/// streams, and the audio network.
#[derive(Clone)]
pub struct BackboneSet {
    pub face: Rc<dyn VisualBackbone>,
    context: Rc<dyn VisualBackbone>,
    pub audio: Rc<dyn AudioBackbone>,
}

impl BackboneSet {
    pub fn new(face: Rc<dyn VisualBackbone>, context: Rc<dyn VisualBackbone>, audio: Rc<dyn AudioBackbone>) -> Self {
        BackboneSet { face, context, audio }
    }

    /// Seeded stubs; each network gets its own derived seed.
    pub fn stubs(seed: u64) -> Result<Self> {
        Ok(BackboneSet {
            face: Rc::new(StubVisual::new("g_face", seed ^ 0xface)?),
            context: Rc::new(StubVisual::new("g_context", seed ^ 0xc0de)?),
            audio: Rc::new(StubAudio::new("g_audio", seed ^ 0xa0d1)?),
        })
    }

    pub fn local(&self) -> &Rc<dyn VisualBackbone> {
        &self.context
    }

    pub fn extended(&self) -> &Rc<dyn VisualBackbone> {
        &self.context
    }

    /// Normalize a bundle's pixels and run all backbones. Outputs are
    /// detached: the backbones are not trained through.
    pub fn extract(&self, bundle: &ChunkBundle, stats: &NormalizationStats) -> Result<ChunkFeatures> {
        let run = |net: &Rc<dyn VisualBackbone>, chunk: &Tensor| -> Result<Tensor> {
            Ok(net.forward(&normalize_pixels(chunk, stats)?)?.detach())
        };
        Ok(ChunkFeatures {
            face: run(&self.face, &bundle.face)?,
            local: run(self.local(), &bundle.local)?,
            extended: run(self.extended(), &bundle.extended)?,
            audio: self.audio.forward(&bundle.audio)?.detach(),
        })
    }
}

impl Module for BackboneSet {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.face.parameters();
        p.extend(self.context.parameters());
        p.extend(self.audio.parameters());
        p
    }
}

/// Backbone outputs for one chunk: `Z'_F`, `Z'_L`, `Z'_E`, and `a`.
#[derive(Debug, Clone)]
pub struct ChunkFeatures {
    pub face: Tensor,
    pub local: Tensor,
    pub extended: Tensor,
    pub audio: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Adam, AdamConfig};
    use rand::Rng;

    fn random_chunk(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = CHUNK_FRAMES * size * size * 3;
        Tensor::new(&[CHUNK_FRAMES, size, size, 3], (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn visual_shape_contract() {
        let stub = StubVisual::new("g", 1).unwrap();
        let out = stub.forward(&random_chunk(112, 2)).unwrap();
        assert_eq!(out.shape(), &[16, 28, 28, 128]);
        let out = stub.forward(&random_chunk(16, 2)).unwrap();
        assert_eq!(out.shape(), &[16, 4, 4, 128]);
        assert!(stub.forward(&Tensor::zeros(&[32, 10, 10, 3]).unwrap()).is_err());
        assert!(stub.forward(&Tensor::zeros(&[31, 16, 16, 3]).unwrap()).is_err());
    }

    #[test]
    fn zero_input_gives_relu_of_bias() {
        let stub = StubVisual::new("g", 1).unwrap();
        let out = stub.forward(&Tensor::zeros(&[32, 16, 16, 3]).unwrap()).unwrap();
        let bias = stub.lift.bias.as_ref().unwrap().values();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, bias[i % 128].max(0.0));
        }
    }

    #[test]
    fn temporal_average_matches_direct_mean() {
        // With an identity-like lift on one channel we can read the pooled
        // value straight out of the features.
        let stub = StubVisual::new("g", 1).unwrap();
        let mut w = vec![0.0; 3 * 128];
        w[0] = 1.0; // channel 0 -> feature 0
        stub.lift.weight.assign(&w).unwrap();
        stub.lift.bias.as_ref().unwrap().assign(&[0.0; 128]).unwrap();
        let size = 8;
        let chunk = random_chunk(size, 9);
        let chunk = chunk.relu().unwrap(); // keep values non-negative so ReLU is transparent
        let out = stub.forward(&chunk).unwrap();
        let d = chunk.data();
        let px = |t: usize, y: usize, x: usize| d[((t * size + y) * size + x) * 3];
        for t in 0..16 {
            for (oy, ox) in [(0, 0), (1, 1), (0, 1)] {
                let mut acc = 0.0;
                for dt in 0..2 {
                    for y in 0..4 {
                        for x in 0..4 {
                            acc += px(2 * t + dt, 4 * oy + y, 4 * ox + x);
                        }
                    }
                }
                let want = acc / 32.0;
                let got = out.data()[((t * 2 + oy) * 2 + ox) * 128];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn audio_stub_contract() {
        let stub = StubAudio::new("a", 3).unwrap();
        let silence = stub.forward(&Tensor::zeros(&[AUDIO_CHUNK_SAMPLES]).unwrap()).unwrap();
        assert_eq!(silence.shape(), &[128]);
        assert!(silence.data().iter().all(|&v| v == AUDIO_LOG_FLOOR.ln()));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..AUDIO_CHUNK_SAMPLES).map(|_| rng.random_range(-0.5..0.5)).collect();
        let base = stub.forward(&Tensor::vector(&x).unwrap()).unwrap().to_vec();
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let louder = stub.forward(&Tensor::vector(&doubled).unwrap()).unwrap().to_vec();
        assert!(base.iter().zip(&louder).all(|(b, l)| l > b));
        assert!(stub.forward(&Tensor::zeros(&[100]).unwrap()).is_err());
    }

    #[test]
    fn stubs_are_deterministic_and_frozen() {
        let a = BackboneSet::stubs(7).unwrap();
        let b = BackboneSet::stubs(7).unwrap();
        let chunk = random_chunk(16, 5);
        assert_eq!(a.face.forward(&chunk).unwrap().to_vec(), b.face.forward(&chunk).unwrap().to_vec());
        assert!(a.parameters().iter().all(Parameter::is_frozen));
    }

    #[test]
    fn local_and_extended_share_parameters() {
        let set = BackboneSet::stubs(7).unwrap();
        assert!(Rc::ptr_eq(set.local(), set.extended()));
        let (pl, pe) = (set.local().parameters(), set.extended().parameters());
        assert!(pl.iter().zip(&pe).all(|(a, b)| a.same_storage(b)));
        // Mutating through one handle is visible through the other.
        let w = pl[0].values().iter().map(|v| v + 1.0).collect::<Vec<_>>();
        pl[0].assign(&w).unwrap();
        assert_eq!(pe[0].values(), w);
        assert!(!set.face.parameters()[0].same_storage(&pl[0]));
    }

    #[test]
    fn freeze_controls_adam_updates() {
        let stub = StubVisual::new("g", 1).unwrap();
        let head = Parameter::new("head", &[128], vec![0.5; 128]).unwrap();
        let mut params = stub.parameters();
        params.push(head.clone());
        let mut adam = Adam::new(AdamConfig::default());

        let step = |adam: &mut Adam| {
            params.iter().for_each(Parameter::zero_grad);
            let out = stub.forward(&random_chunk(16, 3).relu().unwrap()).unwrap();
            let pooled = out.reshape(&[16 * 16, 128]).unwrap().mean().unwrap();
            let loss = pooled.mul(&head.tensor().sum().unwrap()).unwrap();
            loss.backward().unwrap();
            adam.step(&params).unwrap();
        };

        let before: Vec<Vec<f64>> = stub.parameters().iter().map(Parameter::values).collect();
        let head_before = head.values();
        step(&mut adam);
        let after: Vec<Vec<f64>> = stub.parameters().iter().map(Parameter::values).collect();
        assert_eq!(before, after);
        assert_ne!(head.values(), head_before);

        crate::nn::unfreeze(&stub);
        step(&mut adam);
        let unfrozen: Vec<Vec<f64>> = stub.parameters().iter().map(Parameter::values).collect();
        assert_ne!(after, unfrozen);
    }
}
