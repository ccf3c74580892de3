//! Experiment driver: dataset preparation, scenario runs, the mean-value
//! baseline and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneError, BackboneSet};
use crate::chunking::{build_bundle, plan_chunks, ChunkError, NormalizationStats};
use crate::corpus::{CorpusError, DirSource, MediaSource, SessionEntry, SessionManifest, SyntheticSessionSpec, Task, TaskRecording, MANIFEST_FILE};
use crate::geometry::{identify_target, parse_detections, track_target, DetectionStream, GeometryError, Track, TARGET_IOU_THRESHOLD};
use crate::io::{decode_audio, decode_video, Checkpoint, IoError};
use crate::metadata::{MetadataError, MetadataVectors};
use crate::model::{aggregate_subject, DyadicModel, Geometry, Mode, ModelConfig, ModelError, Scenario, TRAITS, TRAIT_NAMES};
use crate::split::{greedy_optimize, CostWeights, Split, SplitAssignment, SplitError};
use crate::tensor::{Tensor, TensorError};
use crate::training::{train, Sample, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("split file {0} does not exist")]
    MissingSplit(PathBuf),
    #[error("session {session}, task {task}: {reason}")]
    Media { session: String, task: Task, reason: String },
    #[error("session {0} has no entry in the split assignment")]
    Unassigned(String),
    #[error("the {0} split has no samples")]
    EmptySplit(Split),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Corpus directory, or its manifest file.
    pub corpus: PathBuf,
    /// Session split CSV. Without one, a split is optimized on the fly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus: PathBuf::from("corpus"), split: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    pub weights: CostWeights,
    pub max_iters: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings { weights: CostWeights::default(), max_iters: 200 }
    }
}

/// Everything a run needs. One `seed` drives corpus generation, split
/// optimization, backbone stubs, model initialization and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub scenario: Scenario,
    pub geometry: Geometry,
    pub paths: Paths,
    pub train: TrainConfig,
    pub normalization: NormalizationStats,
    pub synthetic: SyntheticSessionSpec,
    pub split: SplitSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            tasks: vec![Task::Talk],
            scenario: Scenario::LEam,
            geometry: Geometry::Reduced,
            paths: Paths::default(),
            train: TrainConfig::default(),
            normalization: NormalizationStats::default(),
            synthetic: SyntheticSessionSpec::default(),
            split: SplitSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration types serialize to TOML")
    }

    /// Parse a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| HarnessError::Config(format!("{} is not UTF-8", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        if let Some(s) = &mut self.paths.split {
            fix(s);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(HarnessError::Config("at least one task is required".into()));
        }
        self.train.validate()?;
        NormalizationStats::new(self.normalization.mean, self.normalization.std)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.paths.corpus.extension().is_some_and(|e| e == "toml") {
            self.paths.corpus.clone()
        } else {
            self.paths.corpus.join(MANIFEST_FILE)
        }
    }

    pub fn load_corpus(&self) -> Result<(SessionManifest, DirSource)> {
        let path = self.manifest_path();
        let manifest = SessionManifest::load(&path)?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok((manifest, DirSource { root }))
    }

    /// The configured split file, or a freshly optimized split.
    pub fn load_split(&self, manifest: &SessionManifest) -> Result<SplitAssignment> {
        match &self.paths.split {
            Some(path) => {
                if !path.exists() {
                    return Err(HarnessError::MissingSplit(path.clone()));
                }
                let bytes = crate::io::read_file(path)?;
                let text = String::from_utf8_lossy(&bytes);
                Ok(SplitAssignment::from_csv(&text)?)
            }
            None => optimize_split(manifest, &self.split, self.seed),
        }
    }
}

pub fn optimize_split(manifest: &SessionManifest, settings: &SplitSettings, seed: u64) -> Result<SplitAssignment> {
    let records = manifest.session_records();
    Ok(greedy_optimize(&records, &settings.weights, seed, settings.max_iters)?)
}

fn media_err(session: &SessionEntry, rec: &TaskRecording, reason: impl std::fmt::Display) -> HarnessError {
    HarnessError::Media { session: session.id.clone(), task: rec.task, reason: reason.to_string() }
}

/// Face track of participant `i`: target identification on the detection
/// list followed by IoU tracking and gap interpolation.
pub fn track_participant(session: &SessionEntry, rec: &TaskRecording, i: usize, media: &dyn MediaSource) -> Result<Track> {
    let err = |e: &dyn std::fmt::Display| media_err(session, rec, format!("{}: {e}", rec.detections[i]));
    let bytes = media.read(&rec.detections[i])?;
    let text = String::from_utf8(bytes).map_err(|_| err(&"not UTF-8"))?;
    let boxes = parse_detections(&text).map_err(|e| err(&e))?;
    let stream = DetectionStream::new(rec.frame_count, (rec.width as f64, rec.height as f64), boxes).map_err(|e| err(&e))?;
    let track = identify_target(&stream, TARGET_IOU_THRESHOLD).and_then(|seed| track_target(&stream, &seed));
    track.map_err(|e: GeometryError| err(&e))
}

/// One model input with its label and provenance.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub participant: String,
    pub session: String,
    pub chunk_index: usize,
    pub sample: Sample,
}

/// Track, chunk and featurize every participant of every session that
/// recorded `task`. Each participant is the target once per session, with
/// the partner's stream as extended context.
pub fn prepare_task(
    manifest: &SessionManifest,
    media: &dyn MediaSource,
    task: Task,
    backbones: &BackboneSet,
    stats: &NormalizationStats,
    geometry: Geometry,
) -> Result<Vec<PreparedSample>> {
    let mut out = vec![];
    for session in &manifest.sessions {
        let Some(rec) = session.task(task) else { continue };
        let chunk_err = |e: ChunkError| media_err(session, rec, e);
        let meta_err = |e: MetadataError| media_err(session, rec, e);
        let videos = [0, 1].map(|i| {
            let v = decode_video(&media.read(&rec.video[i])?)?;
            if (v.frame_count(), v.height(), v.width()) != (rec.frame_count, rec.height, rec.width) {
                return Err(media_err(session, rec, format!("{} does not match the manifest dimensions", rec.video[i])));
            }
            Ok(v)
        });
        let [v0, v1] = videos;
        let videos = [v0?, v1?];
        let ranges = plan_chunks(rec.frame_count).map_err(chunk_err)?;
        let profiles = session.participants.each_ref().map(|id| manifest.profile(id).expect("validated manifest"));
        for i in 0..2 {
            let j = 1 - i;
            let audio = decode_audio(&media.read(&rec.audio[i])?)?;
            let track = track_participant(session, rec, i, media)?;
            let metadata = MetadataVectors::for_target(profiles[i], &session.state(i, rec), profiles[j], &session.state(j, rec))
                .map_err(meta_err)?;
            for (k, range) in ranges.iter().enumerate() {
                let bundle = build_bundle(&videos[i], &videos[j], &audio, &track, k, *range, geometry.chunk_size()).map_err(chunk_err)?;
                let features = backbones.extract(&bundle, stats)?;
                out.push(PreparedSample {
                    participant: profiles[i].id.clone(),
                    session: session.id.clone(),
                    chunk_index: k,
                    sample: Sample {
                        input: crate::model::ChunkInput { features, metadata: metadata.clone() },
                        target: profiles[i].personality,
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Samples partitioned by the split of their session; removed sessions
/// are dropped.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl SplitData {
    pub fn partition(samples: Vec<PreparedSample>, assignment: &SplitAssignment) -> Result<Self> {
        let mut data = SplitData::default();
        for s in samples {
            match assignment.get(&s.session).ok_or_else(|| HarnessError::Unassigned(s.session.clone()))? {
                Split::Train => data.train.push(s),
                Split::Val => data.val.push(s),
                Split::Test => data.test.push(s),
                Split::Removed => {}
            }
        }
        Ok(data)
    }

    /// Fit a [`FeatureScaler`] on the training samples and apply it to
    /// every split.
    pub fn standardize(&mut self) -> Result<FeatureScaler> {
        let scaler = FeatureScaler::fit(&self.train)?;
        for s in self.train.iter_mut().chain(&mut self.val).chain(&mut self.test) {
            scaler.apply(s)?;
        }
        Ok(scaler)
    }

    fn require(&self, split: Split) -> Result<&[PreparedSample]> {
        let v = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            _ => &self.test,
        };
        if v.is_empty() {
            Err(HarnessError::EmptySplit(split))
        } else {
            Ok(v)
        }
    }
}

/// Per-channel standardization of backbone outputs (trailing axis),
/// fitted on training samples. The stub backbones have arbitrary output
/// scales; audio log-energies in particular carry a large common offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    /// `(mean, std)` per channel for face, local, extended and audio.
    pub stats: [(Vec<f64>, Vec<f64>); 4],
}

fn feature_maps(f: &crate::backbones::ChunkFeatures) -> [&Tensor; 4] {
    [&f.face, &f.local, &f.extended, &f.audio]
}

impl FeatureScaler {
    pub fn fit(samples: &[PreparedSample]) -> Result<Self> {
        let first = samples.first().ok_or(HarnessError::EmptySplit(Split::Train))?;
        let widths = feature_maps(&first.sample.input.features).map(|t| *t.shape().last().expect("feature maps have rank >= 1"));
        let mut k = 0;
        let stats = widths.map(|c| {
            let mut sum = vec![0.0; c];
            let mut sq = vec![0.0; c];
            let mut n = 0usize;
            for s in samples {
                let data = feature_maps(&s.sample.input.features)[k].to_vec();
                for row in data.chunks_exact(c) {
                    for (j, v) in row.iter().enumerate() {
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                    n += 1;
                }
            }
            k += 1;
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let var = (q / n as f64 - m * m).max(0.0);
                    if var > 1e-12 { var.sqrt() } else { 1.0 }
                })
                .collect();
            (mean, std)
        });
        Ok(FeatureScaler { stats })
    }

    pub fn apply(&self, sample: &mut PreparedSample) -> Result<()> {
        let f = &mut sample.sample.input.features;
        for (t, (mean, std)) in [&mut f.face, &mut f.local, &mut f.extended, &mut f.audio].into_iter().zip(&self.stats) {
            let c = mean.len();
            if t.shape().last() != Some(&c) {
                return Err(HarnessError::Config(format!("feature map {:?} does not have {c} channels", t.shape())));
            }
            let data: Vec<f64> = t.to_vec().iter().enumerate().map(|(i, v)| (v - mean[i % c]) / std[i % c]).collect();
            *t = Tensor::new(t.shape(), data)?;
        }
        Ok(())
    }
}

/// One label per participant, in id order.
pub fn subject_labels(samples: &[PreparedSample]) -> BTreeMap<String, [f64; TRAITS]> {
    samples.iter().map(|s| (s.participant.clone(), s.sample.target)).collect()
}

/// Constant predictor equal to the per-trait mean of the training labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanBaseline {
    pub mean: [f64; TRAITS],
}

impl MeanBaseline {
    pub fn predict(&self) -> [f64; TRAITS] {
        self.mean
    }
}

pub fn mean_value_baseline(train_labels: &[[f64; TRAITS]]) -> Result<MeanBaseline> {
    if train_labels.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Train));
    }
    let n = train_labels.len() as f64;
    Ok(MeanBaseline { mean: std::array::from_fn(|k| train_labels.iter().map(|l| l[k]).sum::<f64>() / n) })
}

/// Per-trait MSE of `(prediction, label)` pairs plus the trait average.
pub fn trait_mse(pairs: &[([f64; TRAITS], [f64; TRAITS])]) -> ([f64; TRAITS], f64) {
    let n = pairs.len() as f64;
    let mse: [f64; TRAITS] = std::array::from_fn(|k| pairs.iter().map(|(p, l)| (p[k] - l[k]).powi(2)).sum::<f64>() / n);
    let avg = mse.iter().sum::<f64>() / TRAITS as f64;
    (mse, avg)
}

/// The median aggregation shared with the model module.
pub const SUBJECT_AGGREGATOR: fn(&[Tensor]) -> crate::model::Result<Tensor> = aggregate_subject;

/// Per test participant, the aggregated chunk predictions and the label.
pub fn predict_subjects(model: &DyadicModel, samples: &[PreparedSample]) -> Result<Vec<([f64; TRAITS], [f64; TRAITS])>> {
    let mut by_subject: BTreeMap<&str, (Vec<Tensor>, [f64; TRAITS])> = BTreeMap::new();
    for s in samples {
        let y = model.predict_chunk(&s.sample.input, &mut Mode::Eval)?;
        by_subject.entry(&s.participant).or_insert_with(|| (vec![], s.sample.target)).0.push(y);
    }
    by_subject
        .into_values()
        .map(|(preds, label)| {
            let agg = SUBJECT_AGGREGATOR(&preds)?;
            Ok((agg.to_vec().try_into().expect("one value per trait"), label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub task: Task,
    pub scenario: Scenario,
    pub mse: [f64; TRAITS],
    pub avg: f64,
}

impl MetricsRow {
    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.mse.iter().copied().chain([self.avg])
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn get(&self, task: Task, scenario: Scenario) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.task == task && r.scenario == scenario)
    }

    fn tasks(&self) -> Vec<Task> {
        let mut tasks: Vec<Task> = self.rows.iter().map(|r| r.task).collect();
        tasks.sort();
        tasks.dedup();
        tasks
    }

    /// One line per row: `task,scenario,O,C,E,A,N,Avg`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        let header = ["task", "scenario"].into_iter().chain(TRAIT_NAMES).chain(["Avg"]);
        w.write_record(header).unwrap();
        for r in &self.rows {
            let fields = [r.task.name().to_string(), r.scenario.name().to_string()].into_iter().chain(r.values().map(fmt_value));
            w.write_record(fields).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// Scenarios as rows, six columns (five traits and the average) per task.
    pub fn to_table_csv(&self) -> String {
        let tasks = self.tasks();
        let mut w = csv::Writer::from_writer(vec![]);
        let mut header = vec!["scenario".to_string()];
        for t in &tasks {
            header.extend(TRAIT_NAMES.iter().chain(&["Avg"]).map(|c| format!("{t}_{c}")));
        }
        w.write_record(&header).unwrap();
        for s in Scenario::ALL {
            if !self.rows.iter().any(|r| r.scenario == s) {
                continue;
            }
            let mut fields = vec![s.name().to_string()];
            for &t in &tasks {
                match self.get(t, s) {
                    Some(r) => fields.extend(r.values().map(fmt_value)),
                    None => fields.extend(std::iter::repeat_n(String::new(), TRAITS + 1)),
                }
            }
            w.write_record(&fields).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// Human-readable version of [`MetricsReport::to_table_csv`].
    pub fn to_text_table(&self) -> String {
        let tasks = self.tasks();
        let cell = 8;
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for t in &tasks {
            let _ = write!(out, "| {:<w$}", t.name(), w = cell * (TRAITS + 1));
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "scenario");
        for _ in &tasks {
            out.push_str("| ");
            for c in TRAIT_NAMES.iter().chain(&["Avg"]) {
                let _ = write!(out, "{c:>w$}", w = cell);
            }
        }
        out.push('\n');
        for s in Scenario::ALL {
            if !self.rows.iter().any(|r| r.scenario == s) {
                continue;
            }
            let _ = write!(out, "{:<10}", s.name());
            for &t in &tasks {
                out.push_str("| ");
                match self.get(t, s) {
                    Some(r) => r.values().for_each(|v| {
                        let _ = write!(out, "{v:>w$.3}", w = cell);
                    }),
                    None => out.push_str(&" ".repeat(cell * (TRAITS + 1))),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Baseline row: train-label means scored on the test participants.
pub fn baseline_row(task: Task, data: &SplitData) -> Result<MetricsRow> {
    let train_labels: Vec<[f64; TRAITS]> = subject_labels(data.require(Split::Train)?).into_values().collect();
    let baseline = mean_value_baseline(&train_labels)?;
    let pairs: Vec<_> = subject_labels(data.require(Split::Test)?).into_values().map(|l| (baseline.predict(), l)).collect();
    let (mse, avg) = trait_mse(&pairs);
    Ok(MetricsRow { task, scenario: Scenario::B, mse, avg })
}

/// Score a trained model on the test participants.
pub fn evaluate_model(model: &DyadicModel, task: Task, data: &SplitData) -> Result<MetricsRow> {
    let pairs = predict_subjects(model, data.require(Split::Test)?)?;
    let (mse, avg) = trait_mse(&pairs);
    Ok(MetricsRow { task, scenario: model.scenario(), mse, avg })
}

fn samples(v: &[PreparedSample]) -> Vec<Sample> {
    v.iter().map(|s| s.sample.clone()).collect()
}

/// Train (or, for the baseline, fit) one scenario on prepared data and
/// report its test metrics. With `run_dir`, training artifacts go there.
pub fn run_prepared(
    scenario: Scenario,
    task: Task,
    data: &SplitData,
    cfg: &ExperimentConfig,
    run_dir: Option<&Path>,
) -> Result<MetricsRow> {
    if scenario == Scenario::B {
        return baseline_row(task, data);
    }
    let model = DyadicModel::new(ModelConfig::new(scenario, cfg.geometry, cfg.seed)?)?;
    let train_set = samples(data.require(Split::Train)?);
    let val_set = samples(data.require(Split::Val)?);
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    train(&model, &train_set, &val_set, &train_cfg, run_dir)?;
    evaluate_model(&model, task, data)
}

/// Load the corpus and split named by `cfg`, featurize one task and
/// standardize features with training statistics.
pub fn prepare_split(cfg: &ExperimentConfig, task: Task) -> Result<SplitData> {
    cfg.validate()?;
    let (manifest, media) = cfg.load_corpus()?;
    let assignment = cfg.load_split(&manifest)?;
    let backbones = BackboneSet::stubs(cfg.seed)?;
    let samples = prepare_task(&manifest, &media, task, &backbones, &cfg.normalization, cfg.geometry)?;
    let mut data = SplitData::partition(samples, &assignment)?;
    data.standardize()?;
    Ok(data)
}

/// Run `cfg.scenario` on one task end to end.
pub fn run_scenario(cfg: &ExperimentConfig, task: Task, run_dir: Option<&Path>) -> Result<MetricsRow> {
    let data = prepare_split(cfg, task)?;
    run_prepared(cfg.scenario, task, &data, cfg, run_dir)
}

/// Score a saved checkpoint on one task's test participants.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, task: Task, checkpoint: &Path) -> Result<MetricsRow> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    if model.config().geometry != cfg.geometry {
        return Err(HarnessError::Config("checkpoint geometry differs from the configured geometry".into()));
    }
    let data = prepare_split(cfg, task)?;
    evaluate_model(&model, task, &data)
}

/// Every scenario on every configured task; features are computed once per
/// task and shared by all scenarios.
pub fn ablation_suite(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    ablation_suite_observed(cfg, |_| {})
}

pub fn ablation_suite_observed(cfg: &ExperimentConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for &task in &cfg.tasks {
        let data = prepare_split(cfg, task)?;
        for scenario in Scenario::ALL {
            let row = run_prepared(scenario, task, &data, cfg, None)?;
            on_row(&row);
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
