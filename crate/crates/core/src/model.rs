//! The dyadic transformer: spatiotemporal encodings, query preprocessor,
//! multimodal fusion, key/value/query projections, stacked two-unit
//! attention layers, and the OCEAN regression head.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{ChunkFeatures, AUDIO_FEATURES, FEATURE_CHANNELS, FEATURE_FRAMES};
use crate::metadata::{MetadataVectors, EXTENDED_DIM, LOCAL_DIM};
use crate::nn::{LayerNorm, Linear, Module};
use crate::tensor::{Parameter, Tensor, TensorError};

pub const TRAITS: usize = 5;
pub const TRAIT_NAMES: [&str; TRAITS] = ["O", "C", "E", "A", "N"];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("cannot aggregate an empty list of predictions")]
    EmptyAggregate,
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// The evaluated input combinations. `B` is the mean-value baseline and has
/// no model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    B,
    L,
    Lm,
    LE,
    LEm,
    LEa,
    LEam,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::B,
        Scenario::L,
        Scenario::Lm,
        Scenario::LE,
        Scenario::LEm,
        Scenario::LEa,
        Scenario::LEam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::B => "B",
            Scenario::L => "L",
            Scenario::Lm => "Lm",
            Scenario::LE => "LE",
            Scenario::LEm => "LEm",
            Scenario::LEa => "LEa",
            Scenario::LEam => "LEam",
        }
    }

    /// Input toggles, or `None` for the baseline.
    pub fn inputs(self) -> Option<ScenarioConfig> {
        let row = |m, e, em, a| ScenarioConfig {
            query_face: true,
            query_metadata: m,
            kv_local_frame: true,
            kv_extended_frame: e,
            kv_extended_metadata: em,
            kv_audio: a,
        };
        match self {
            Scenario::B => None,
            Scenario::L => Some(row(false, false, false, false)),
            Scenario::Lm => Some(row(true, false, false, false)),
            Scenario::LE => Some(row(false, true, false, false)),
            Scenario::LEm => Some(row(true, true, true, false)),
            Scenario::LEa => Some(row(false, true, false, true)),
            Scenario::LEam => Some(row(true, true, true, true)),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown scenario {s:?}; expected one of B, L, Lm, LE, LEm, LEa, LEam")))
    }
}

/// Which inputs feed the query and the key/value contexts. Only the six
/// model rows of [`Scenario`] are constructible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Scenario", into = "Scenario")]
pub struct ScenarioConfig {
    query_face: bool,
    query_metadata: bool,
    kv_local_frame: bool,
    kv_extended_frame: bool,
    kv_extended_metadata: bool,
    kv_audio: bool,
}

impl ScenarioConfig {
    pub fn new(
        query_face: bool,
        query_metadata: bool,
        kv_local_frame: bool,
        kv_extended_frame: bool,
        kv_extended_metadata: bool,
        kv_audio: bool,
    ) -> Result<Self> {
        let candidate = ScenarioConfig {
            query_face,
            query_metadata,
            kv_local_frame,
            kv_extended_frame,
            kv_extended_metadata,
            kv_audio,
        };
        Scenario::ALL
            .into_iter()
            .filter_map(Scenario::inputs)
            .find(|row| *row == candidate)
            .ok_or_else(|| ModelError::Config(format!("{candidate:?} is not one of the evaluated scenarios")))
    }

    pub fn scenario(&self) -> Scenario {
        Scenario::ALL
            .into_iter()
            .find(|s| s.inputs().as_ref() == Some(self))
            .expect("constructible configs are rows of the scenario table")
    }

    pub fn query_face(&self) -> bool {
        self.query_face
    }
    pub fn query_metadata(&self) -> bool {
        self.query_metadata
    }
    pub fn kv_local_frame(&self) -> bool {
        self.kv_local_frame
    }
    pub fn kv_extended_frame(&self) -> bool {
        self.kv_extended_frame
    }
    pub fn kv_extended_metadata(&self) -> bool {
        self.kv_extended_metadata
    }
    pub fn kv_audio(&self) -> bool {
        self.kv_audio
    }
}

impl TryFrom<Scenario> for ScenarioConfig {
    type Error = ModelError;

    fn try_from(s: Scenario) -> Result<Self> {
        s.inputs()
            .ok_or_else(|| ModelError::Config("the baseline scenario has no model".into()))
    }
}

impl From<ScenarioConfig> for Scenario {
    fn from(c: ScenarioConfig) -> Scenario {
        c.scenario()
    }
}

/// Spatial extent of the backbone features. `Reduced` shrinks 28×28 to 4×4
/// (and the 112×112 chunks to 16×16) for cheap tests and desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Full,
    Reduced,
}

impl Geometry {
    pub fn feature_spatial(self) -> usize {
        match self {
            Geometry::Full => 28,
            Geometry::Reduced => 4,
        }
    }

    pub fn chunk_size(self) -> usize {
        4 * self.feature_spatial()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub audio_proj_dim: usize,
    pub ste_hidden: usize,
    pub ste_out: usize,
    pub qp_filters: usize,
    pub dropout: f64,
    pub geometry: Geometry,
    pub scenario: ScenarioConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(scenario: Scenario, geometry: Geometry, seed: u64) -> Result<Self> {
        Ok(ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 128,
            audio_proj_dim: 100,
            ste_hidden: 20,
            ste_out: 10,
            qp_filters: 16,
            dropout: 0.1,
            geometry,
            scenario: scenario.try_into()?,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_layers == 0 {
            return bad("at least one transformer layer is required");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if [self.d_model, self.audio_proj_dim, self.ste_hidden, self.ste_out, self.qp_filters].contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Channels of `Z = Z' ∥ P`.
    pub fn z_channels(&self) -> usize {
        FEATURE_CHANNELS + 2 * self.ste_out
    }

    pub fn local_kv_dim(&self) -> usize {
        self.z_channels() + if self.scenario.kv_audio { self.audio_proj_dim } else { 0 }
    }

    pub fn extended_kv_dim(&self) -> usize {
        self.local_kv_dim() + if self.scenario.kv_extended_metadata { EXTENDED_DIM } else { 0 }
    }

    pub fn query_dim(&self) -> usize {
        self.d_model + if self.scenario.query_metadata { LOCAL_DIM } else { 0 }
    }

    pub fn qp_flatten_dim(&self) -> usize {
        let s = self.geometry.feature_spatial() / 4;
        s * s * self.qp_filters
    }
}

/// Train mode draws dropout masks from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Named intermediate shapes recorded during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeLedger {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeLedger {
    fn record(&mut self, name: &str, t: &Tensor) {
        self.entries.push((name.to_string(), t.shape().to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

fn note(ledger: &mut Option<&mut ShapeLedger>, name: &str, t: &Tensor) {
    if let Some(l) = ledger.as_deref_mut() {
        l.record(name, t);
    }
}

fn expect_shape(what: &'static str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() == expected {
        Ok(())
    } else {
        Err(ModelError::Shape {
            what,
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        })
    }
}

/// Learned temporal and spatial position encodings.
#[derive(Debug, Clone)]
pub struct SpatioTemporalEncoding {
    pub theta_t1: Parameter,
    pub theta_t2: Parameter,
    pub theta_s1: Parameter,
    pub theta_s2: Parameter,
    frames: usize,
    spatial: usize,
}

impl SpatioTemporalEncoding {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (h, o) = (cfg.ste_hidden, cfg.ste_out);
        Ok(SpatioTemporalEncoding {
            theta_t1: Parameter::uniform("ste.Theta_T1", &[1, h], 1, rng)?,
            theta_t2: Parameter::uniform("ste.Theta_T2", &[h, o], h, rng)?,
            theta_s1: Parameter::uniform("ste.Theta_S1", &[2, h], 2, rng)?,
            theta_s2: Parameter::uniform("ste.Theta_S2", &[h, o], h, rng)?,
            frames: FEATURE_FRAMES,
            spatial: cfg.geometry.feature_spatial(),
        })
    }

    /// `⟨−T/2, …, T/2−1⟩`.
    pub fn time_indices(frames: usize) -> Vec<f64> {
        (0..frames).map(|t| t as f64 - (frames / 2) as f64).collect()
    }

    /// Row-major `(S·S, 2)` grid of `⟨i−S/2, j−S/2⟩`.
    pub fn spatial_indices(spatial: usize) -> Vec<f64> {
        let c = (spatial / 2) as f64;
        (0..spatial)
            .flat_map(|i| (0..spatial).flat_map(move |j| [i as f64 - c, j as f64 - c]))
            .collect()
    }

    /// `P = P_S ∥ P_T`, shape `(16, S, S, 2·ste_out)`.
    pub fn forward(&self, ledger: &mut Option<&mut ShapeLedger>) -> Result<Tensor> {
        let (t, s) = (self.frames, self.spatial);
        let out = self.theta_t2.shape()[1];
        let ti = Tensor::new(&[t, 1], Self::time_indices(t))?;
        let pt = ti.matmul(self.theta_t1.tensor())?.relu()?.matmul(self.theta_t2.tensor())?.relu()?;
        let si = Tensor::new(&[s * s, 2], Self::spatial_indices(s))?;
        let ps = si.matmul(self.theta_s1.tensor())?.relu()?.matmul(self.theta_s2.tensor())?.relu()?;
        let pt = pt.reshape(&[t, 1, 1, out])?;
        let ps = ps.reshape(&[1, s, s, out])?;
        note(ledger, "P_T", &pt);
        note(ledger, "P_S", &ps);
        let p = Tensor::concat(&[ps, pt], 3)?;
        note(ledger, "P", &p);
        Ok(p)
    }
}

impl Module for SpatioTemporalEncoding {
    fn parameters(&self) -> Vec<Parameter> {
        vec![self.theta_t1.clone(), self.theta_t2.clone(), self.theta_s1.clone(), self.theta_s2.clone()]
    }
}

/// Pool/convolve/flatten pipeline turning `Z_F` into the 128-d vector `f`.
#[derive(Debug, Clone)]
pub struct QueryPreprocessor {
    pub conv3d: Linear,
    pub conv2d: Linear,
    pub fc: Linear,
    dropout: f64,
}

impl QueryPreprocessor {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let f = cfg.qp_filters;
        Ok(QueryPreprocessor {
            conv3d: Linear::new("qp.conv3d", cfg.z_channels(), f, true, rng)?,
            conv2d: Linear::new("qp.conv2d", FEATURE_FRAMES * f, f, true, rng)?,
            fc: Linear::new("qp.fc", cfg.qp_flatten_dim(), cfg.d_model, true, rng)?,
            dropout: cfg.dropout,
        })
    }

    /// 1×1 convolution: a linear map over the trailing channel axis.
    fn pointwise(conv: &Linear, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let (c, rows) = (shape[shape.len() - 1], x.numel() / shape[shape.len() - 1]);
        let y = conv.forward(&x.reshape(&[rows, c])?)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = conv.outputs();
        Ok(y.reshape(&out_shape)?)
    }

    pub fn forward(&self, z_f: &Tensor, mode: &mut Mode, ledger: &mut Option<&mut ShapeLedger>) -> Result<Tensor> {
        let x = z_f.pool_max(&[1, 2, 2], &[1, 2, 2])?;
        note(ledger, "qp.pool3d", &x);
        let x = Self::pointwise(&self.conv3d, &x)?.relu()?;
        note(ledger, "qp.conv3d", &x);
        let [t, h, w, c] = *x.shape() else {
            return Err(ModelError::Shape { what: "qp.conv3d", expected: vec![0; 4], got: x.shape().to_vec() });
        };
        let x = x.permute(&[1, 2, 0, 3])?.reshape(&[h, w, t * c])?;
        note(ledger, "qp.merge", &x);
        let x = x.pool_max(&[2, 2], &[2, 2])?;
        note(ledger, "qp.pool2d", &x);
        let x = Self::pointwise(&self.conv2d, &x)?.relu()?;
        note(ledger, "qp.conv2d", &x);
        let x = x.reshape(&[1, x.numel()])?;
        note(ledger, "qp.flatten", &x);
        let x = self.fc.forward(&x)?.relu()?;
        let x = match mode {
            Mode::Train(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.mul(&Tensor::new(x.shape(), mask)?)?
            }
            _ => x,
        };
        let f = x.reshape(&[x.numel()])?;
        note(ledger, "f", &f);
        Ok(f)
    }
}

impl Module for QueryPreprocessor {
    fn parameters(&self) -> Vec<Parameter> {
        [&self.conv3d, &self.conv2d, &self.fc].iter().flat_map(|l| l.parameters()).collect()
    }
}

/// Scaled dot-product attention of a single query row over `P` positions.
/// Returns the attended values `(1, dv)` and the weights `(1, P)`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = q.shape()[1] as f64;
    let weights = q.matmul_t(k)?.scale(1.0 / d.sqrt())?.softmax(1)?;
    Ok((weights.matmul(v)?, weights))
}

/// Attention internals exposed for inspection.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    /// Per head: `(1, P)` weights.
    pub weights: Vec<Tensor>,
    /// Per head: `(1, d_head)` attended values.
    pub head_outputs: Vec<Tensor>,
    /// Per head: `(P, d_head)` projected values.
    pub head_values: Vec<Tensor>,
}

/// One attention unit: multi-head attention followed by residual, layer
/// norm, a two-layer feedforward block, residual, and layer norm.
#[derive(Debug, Clone)]
pub struct TxUnit {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
    heads: usize,
}

impl TxUnit {
    pub fn new(prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TxUnit {
            w_q: Linear::new(&format!("{prefix}.W_q"), d, d, false, rng)?,
            w_k: Linear::new(&format!("{prefix}.W_k"), d, d, false, rng)?,
            w_v: Linear::new(&format!("{prefix}.W_v"), d, d, false, rng)?,
            w_o: Linear::new(&format!("{prefix}.W_o"), d, d, true, rng)?,
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d)?,
            ffn1: Linear::new(&format!("{prefix}.ffn1"), d, d, true, rng)?,
            ffn2: Linear::new(&format!("{prefix}.ffn2"), d, d, true, rng)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d)?,
            heads,
        })
    }

    /// `q_in` is `(d,)`; `k` and `v` are `(P, d)`.
    pub fn forward(&self, q_in: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.attend(q_in, k, v, None)
    }

    pub fn forward_traced(&self, q_in: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AttentionTrace)> {
        let mut trace = AttentionTrace::default();
        let y = self.attend(q_in, k, v, Some(&mut trace))?;
        Ok((y, trace))
    }

    // With one query, head h's projections can move off the P positions:
    // (q W_q)(K W_k)ᵀ = ((q W_q) W_kᵀ) Kᵀ and w (V W_v) = (w V) W_v.
    fn attend(&self, q_in: &Tensor, k: &Tensor, v: &Tensor, mut trace: Option<&mut AttentionTrace>) -> Result<Tensor> {
        let d = q_in.numel();
        for (what, t) in [("keys", k), ("values", v)] {
            if t.shape().len() != 2 || t.shape()[1] != d {
                return Err(ModelError::Shape { what, expected: vec![t.shape().first().copied().unwrap_or(0), d], got: t.shape().to_vec() });
            }
        }
        let q_row = q_in.reshape(&[1, d])?;
        let q = self.w_q.forward(&q_row)?;
        let dh = d / self.heads;
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wk = self.w_k.weight.tensor().narrow(1, h * dh, dh)?;
            let wv = self.w_v.weight.tensor().narrow(1, h * dh, dh)?;
            let query = q.narrow(1, h * dh, dh)?.matmul_t(&wk)?;
            let w = query.matmul_t(k)?.scale(1.0 / (dh as f64).sqrt())?.softmax(1)?;
            let out = w.matmul(v)?.matmul(&wv)?;
            if let Some(t) = trace.as_deref_mut() {
                t.weights.push(w);
                t.head_outputs.push(out.clone());
                t.head_values.push(v.matmul(&wv)?);
            }
            outputs.push(out);
        }
        let attn = self.w_o.forward(&Tensor::concat(&outputs, 1)?)?;
        let x = self.ln1.forward(&q_row.add(&attn)?)?;
        let ff = self.ffn2.forward(&self.ffn1.forward(&x)?.relu()?)?;
        let y = self.ln2.forward(&x.add(&ff)?)?;
        Ok(y.reshape(&[d])?)
    }
}

impl Module for TxUnit {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = vec![];
        for l in [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ffn1, &self.ffn2] {
            p.extend(l.parameters());
        }
        p.extend(self.ln1.parameters());
        p.extend(self.ln2.parameters());
        p
    }
}

/// Keys and values of one context, each `(P, d_model)`.
#[derive(Debug, Clone)]
pub struct Context {
    pub keys: Tensor,
    pub values: Tensor,
}

/// A local unit, an optional extended unit, and the joint query projection.
#[derive(Debug, Clone)]
pub struct TxLayer {
    pub local: TxUnit,
    pub extended: Option<TxUnit>,
    pub theta_q: Linear,
}

impl TxLayer {
    fn new(index: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let local = TxUnit::new(&format!("layer{index}.local"), d, cfg.n_heads, rng)?;
        let extended = if cfg.scenario.kv_extended_frame {
            Some(TxUnit::new(&format!("layer{index}.extended"), d, cfg.n_heads, rng)?)
        } else {
            None
        };
        let fan_in = if extended.is_some() { 2 * d } else { d };
        let theta_q = Linear::new(&format!("layer{index}.Theta_Q_{index}"), fan_in, d, false, rng)?;
        Ok(TxLayer { local, extended, theta_q })
    }

    /// `(q_i, q_L_i, q_E_i)`.
    pub fn forward_parts(&self, q: &Tensor, local: &Context, extended: Option<&Context>) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let ql = self.local.forward(q, &local.keys, &local.values)?;
        let qe = match (&self.extended, extended) {
            (Some(unit), Some(ctx)) => Some(unit.forward(q, &ctx.keys, &ctx.values)?),
            (None, None) => None,
            _ => return Err(ModelError::Config("extended context does not match the layer's scenario".into())),
        };
        let joint = match &qe {
            Some(qe) => Tensor::concat(&[ql.clone(), qe.clone()], 0)?,
            None => ql.clone(),
        };
        let qi = self.theta_q.forward_vec(&joint)?.relu()?;
        Ok((qi, ql, qe))
    }

    pub fn forward(&self, q: &Tensor, local: &Context, extended: Option<&Context>) -> Result<Tensor> {
        Ok(self.forward_parts(q, local, extended)?.0)
    }
}

impl Module for TxLayer {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.local.parameters();
        if let Some(e) = &self.extended {
            p.extend(e.parameters());
        }
        p.extend(self.theta_q.parameters());
        p
    }
}

/// Everything the model consumes for one chunk.
#[derive(Debug, Clone)]
pub struct ChunkInput {
    pub features: ChunkFeatures,
    pub metadata: MetadataVectors,
}

#[derive(Debug, Clone)]
pub struct DyadicModel {
    config: ModelConfig,
    pub ste: SpatioTemporalEncoding,
    pub qp: QueryPreprocessor,
    pub audio_proj: Option<Linear>,
    pub theta_k_l: Linear,
    pub theta_v_l: Linear,
    pub theta_k_e: Option<Linear>,
    pub theta_v_e: Option<Linear>,
    pub theta_q0: Linear,
    pub layers: Vec<TxLayer>,
    pub fc: Linear,
}

impl DyadicModel {
    /// Build with weights drawn uniformly in `±1/√fan_in` from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let sc = config.scenario;
        let d = config.d_model;
        let ste = SpatioTemporalEncoding::new(&config, rng)?;
        let qp = QueryPreprocessor::new(&config, rng)?;
        let audio_proj = if sc.kv_audio {
            Some(Linear::new("audio.proj", AUDIO_FEATURES, config.audio_proj_dim, true, rng)?)
        } else {
            None
        };
        let (dl, de) = (config.local_kv_dim(), config.extended_kv_dim());
        let theta_k_l = Linear::new("kv_local.Theta_K_L", dl, d, false, rng)?;
        let theta_v_l = Linear::new("kv_local.Theta_V_L", dl, d, false, rng)?;
        let (theta_k_e, theta_v_e) = if sc.kv_extended_frame {
            (
                Some(Linear::new("kv_extended.Theta_K_E", de, d, false, rng)?),
                Some(Linear::new("kv_extended.Theta_V_E", de, d, false, rng)?),
            )
        } else {
            (None, None)
        };
        let theta_q0 = Linear::new("query.Theta_Q_0", config.query_dim(), d, false, rng)?;
        let layers = (1..=config.n_layers)
            .map(|i| TxLayer::new(i, &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let fc = Linear::new("head.Theta_FC", d, TRAITS, true, rng)?;
        let model = DyadicModel {
            config,
            ste,
            qp,
            audio_proj,
            theta_k_l,
            theta_v_l,
            theta_k_e,
            theta_v_e,
            theta_q0,
            layers,
            fc,
        };
        model.check_bookkeeping()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scenario(&self) -> Scenario {
        self.config.scenario.scenario()
    }

    /// Projection input widths must equal the sum of the enabled inputs.
    fn check_bookkeeping(&self) -> Result<()> {
        let sc = self.config.scenario;
        let z = FEATURE_CHANNELS + 2 * self.config.ste_out;
        let audio = if sc.kv_audio { self.config.audio_proj_dim } else { 0 };
        let meta_e = if sc.kv_extended_metadata { EXTENDED_DIM } else { 0 };
        let meta_l = if sc.query_metadata { LOCAL_DIM } else { 0 };
        let mut ok = self.theta_k_l.inputs() == z + audio && self.theta_v_l.inputs() == z + audio;
        for l in self.theta_k_e.iter().chain(&self.theta_v_e) {
            ok &= l.inputs() == z + audio + meta_e;
        }
        ok &= self.theta_q0.inputs() == self.config.d_model + meta_l;
        ok &= self.theta_k_e.is_some() == sc.kv_extended_frame;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config("projection widths disagree with the enabled inputs".into()))
        }
    }

    fn feature_shape(&self) -> Vec<usize> {
        let s = self.config.geometry.feature_spatial();
        vec![FEATURE_FRAMES, s, s, FEATURE_CHANNELS]
    }

    /// `(W_L, W_E)`: context features with audio and interlocutor metadata
    /// broadcast over every position.
    pub fn fuse(
        &self,
        z_l: &Tensor,
        z_e: Option<&Tensor>,
        audio: &Tensor,
        m_e: &Tensor,
        ledger: &mut Option<&mut ShapeLedger>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let sc = self.config.scenario;
        let a = match &self.audio_proj {
            Some(proj) => {
                expect_shape("audio features", audio, &[AUDIO_FEATURES])?;
                let a = proj.forward_vec(audio)?.reshape(&[1, 1, 1, self.config.audio_proj_dim])?;
                note(ledger, "A", &a);
                Some(a)
            }
            None => None,
        };
        let w_l = match &a {
            Some(a) => Tensor::concat(&[z_l.clone(), a.clone()], 3)?,
            None => z_l.clone(),
        };
        note(ledger, "W_L", &w_l);
        let w_e = match (z_e, sc.kv_extended_frame) {
            (Some(z_e), true) => {
                let mut parts = vec![z_e.clone()];
                parts.extend(a.clone());
                if sc.kv_extended_metadata {
                    expect_shape("m_E", m_e, &[EXTENDED_DIM])?;
                    let me = m_e.reshape(&[1, 1, 1, EXTENDED_DIM])?;
                    note(ledger, "M_E", &me);
                    parts.push(me);
                }
                let w_e = Tensor::concat(&parts, 3)?;
                note(ledger, "W_E", &w_e);
                Some(w_e)
            }
            (None, false) => None,
            _ => return Err(ModelError::Config("extended features do not match the scenario".into())),
        };
        Ok((w_l, w_e))
    }

    fn project_context(w: &Tensor, k: &Linear, v: &Linear) -> Result<Context> {
        let c = *w.shape().last().unwrap();
        let rows = w.reshape(&[w.numel() / c, c])?;
        Ok(Context {
            keys: k.forward(&rows)?.relu()?,
            values: v.forward(&rows)?.relu()?,
        })
    }

    /// `(q_0, local K/V, extended K/V)`.
    pub fn build_qkv(
        &self,
        w_l: &Tensor,
        w_e: Option<&Tensor>,
        f: &Tensor,
        m_l: &Tensor,
        ledger: &mut Option<&mut ShapeLedger>,
    ) -> Result<(Tensor, Context, Option<Context>)> {
        let local = Self::project_context(w_l, &self.theta_k_l, &self.theta_v_l)?;
        note(ledger, "K_L", &local.keys);
        note(ledger, "V_L", &local.values);
        let extended = match (w_e, &self.theta_k_e, &self.theta_v_e) {
            (Some(w), Some(k), Some(v)) => {
                let ctx = Self::project_context(w, k, v)?;
                note(ledger, "K_E", &ctx.keys);
                note(ledger, "V_E", &ctx.values);
                Some(ctx)
            }
            (None, None, None) => None,
            _ => return Err(ModelError::Config("extended features do not match the scenario".into())),
        };
        let w_q = if self.config.scenario.query_metadata {
            expect_shape("m_L", m_l, &[LOCAL_DIM])?;
            Tensor::concat(&[f.clone(), m_l.clone()], 0)?
        } else {
            f.clone()
        };
        note(ledger, "w_Q", &w_q);
        let q0 = self.theta_q0.forward_vec(&w_q)?.relu()?;
        note(ledger, "q_0", &q0);
        Ok((q0, local, extended))
    }

    /// Per-chunk OCEAN regression, shape `(5,)`.
    pub fn predict_chunk(&self, input: &ChunkInput, mode: &mut Mode) -> Result<Tensor> {
        self.forward(input, mode, &mut None)
    }

    /// Same as [`DyadicModel::predict_chunk`] in eval mode, recording every
    /// intermediate shape.
    pub fn shape_ledger(&self, input: &ChunkInput) -> Result<(Tensor, ShapeLedger)> {
        let mut ledger = ShapeLedger::default();
        let y = self.forward(input, &mut Mode::Eval, &mut Some(&mut ledger))?;
        Ok((y, ledger))
    }

    fn forward(&self, input: &ChunkInput, mode: &mut Mode, ledger: &mut Option<&mut ShapeLedger>) -> Result<Tensor> {
        let feats = &input.features;
        let fshape = self.feature_shape();
        expect_shape("Z'_F", &feats.face, &fshape)?;
        expect_shape("Z'_L", &feats.local, &fshape)?;
        note(ledger, "Z'_F", &feats.face);
        note(ledger, "Z'_L", &feats.local);
        let sc = self.config.scenario;
        if sc.kv_extended_frame {
            expect_shape("Z'_E", &feats.extended, &fshape)?;
            note(ledger, "Z'_E", &feats.extended);
        }

        let p = self.ste.forward(ledger)?;
        let z_f = Tensor::concat(&[feats.face.clone(), p.clone()], 3)?;
        let z_l = Tensor::concat(&[feats.local.clone(), p.clone()], 3)?;
        note(ledger, "Z_F", &z_f);
        note(ledger, "Z_L", &z_l);
        let z_e = if sc.kv_extended_frame {
            let z_e = Tensor::concat(&[feats.extended.clone(), p], 3)?;
            note(ledger, "Z_E", &z_e);
            Some(z_e)
        } else {
            None
        };

        let f = self.qp.forward(&z_f, mode, ledger)?;
        let (w_l, w_e) = self.fuse(&z_l, z_e.as_ref(), &feats.audio, &input.metadata.extended, ledger)?;
        let (mut q, local, extended) = self.build_qkv(&w_l, w_e.as_ref(), &f, &input.metadata.local, ledger)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let (qi, ql, qe) = layer.forward_parts(&q, &local, extended.as_ref())?;
            note(ledger, &format!("q_L_{}", i + 1), &ql);
            if let Some(qe) = &qe {
                note(ledger, &format!("q_E_{}", i + 1), qe);
            }
            note(ledger, &format!("q_{}", i + 1), &qi);
            q = qi;
        }
        let y = self.fc.forward_vec(&q)?;
        note(ledger, "y", &y);
        Ok(y)
    }

    /// Parameters grouped by component, in a stable order.
    pub fn parameter_groups(&self) -> Vec<(String, Vec<Parameter>)> {
        let mut groups = vec![
            ("ste".to_string(), self.ste.parameters()),
            ("qp".to_string(), self.qp.parameters()),
        ];
        if let Some(a) = &self.audio_proj {
            groups.push(("audio".into(), a.parameters()));
        }
        groups.push(("kv_local".into(), [&self.theta_k_l, &self.theta_v_l].iter().flat_map(|l| l.parameters()).collect()));
        if let (Some(k), Some(v)) = (&self.theta_k_e, &self.theta_v_e) {
            groups.push(("kv_extended".into(), [k, v].iter().flat_map(|l| l.parameters()).collect()));
        }
        groups.push(("query".into(), self.theta_q0.parameters()));
        for (i, layer) in self.layers.iter().enumerate() {
            let i = i + 1;
            groups.push((format!("layer{i}.local"), layer.local.parameters()));
            if let Some(e) = &layer.extended {
                groups.push((format!("layer{i}.extended"), e.parameters()));
            }
            groups.push((format!("layer{i}.joint"), layer.theta_q.parameters()));
        }
        groups.push(("head".into(), self.fc.parameters()));
        groups
    }

    pub fn parameter(&self, name: &str) -> Option<Parameter> {
        self.parameters().into_iter().find(|p| p.name() == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(Parameter::numel).sum()
    }

    /// Overwrite every parameter from `(name, values)` pairs. All names must
    /// be present exactly.
    pub fn load_values<'a>(&self, values: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Result<()> {
        let params = self.parameters();
        let mut seen = 0;
        for (name, data) in values {
            let p = params
                .iter()
                .find(|p| p.name() == name)
                .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
            p.assign(data)?;
            seen += 1;
        }
        if seen != params.len() {
            return Err(ModelError::Config(format!("expected {} parameters, got {seen}", params.len())));
        }
        Ok(())
    }
}

impl Module for DyadicModel {
    fn parameters(&self) -> Vec<Parameter> {
        self.parameter_groups().into_iter().flat_map(|(_, p)| p).collect()
    }
}

/// Per-trait median; an even count averages the two middle values.
pub fn aggregate_subject(preds: &[Tensor]) -> Result<Tensor> {
    let first = preds.first().ok_or(ModelError::EmptyAggregate)?;
    let width = first.numel();
    let mut out = Vec::with_capacity(width);
    for j in 0..width {
        let mut col = preds
            .iter()
            .map(|p| {
                if p.numel() != width {
                    return Err(ModelError::Shape { what: "prediction", expected: first.shape().to_vec(), got: p.shape().to_vec() });
                }
                Ok(p.data()[j])
            })
            .collect::<Result<Vec<f64>>>()?;
        col.sort_by(f64::total_cmp);
        let n = col.len();
        out.push(if n % 2 == 1 { col[n / 2] } else { 0.5 * (col[n / 2 - 1] + col[n / 2]) });
    }
    Ok(Tensor::new(first.shape(), out)?)
}
