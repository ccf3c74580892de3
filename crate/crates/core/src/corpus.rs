//! Session manifests and the synthetic dyadic corpus.
//!
//! A corpus is a `manifest.toml` plus media files addressed by paths
//! relative to the manifest: per session, task and participant one frontal
//! video, one audio track and one detection list.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chunking::{AudioBuffer, VideoStream, AUDIO_SAMPLE_RATE, NOMINAL_FPS};
use crate::geometry::{format_detections, BoundingBox};
use crate::io::{self, encode_audio, encode_video, quantize_sample, IoError};
use crate::metadata::{Gender, ParticipantProfile, SessionState, CULTURE_REGIONS};
use crate::split::{group_label, ParticipantInfo, SessionRecord};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Evaluated tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Talk,
    Lego,
    Animals,
    Ghost,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Talk, Task::Lego, Task::Animals, Task::Ghost];

    pub fn name(self) -> &'static str {
        match self {
            Task::Talk => "Talk",
            Task::Lego => "Lego",
            Task::Animals => "Animals",
            Task::Ghost => "Ghost",
        }
    }

    /// Free conversation has no difficulty level.
    pub fn has_difficulty(self) -> bool {
        self != Task::Talk
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task {s:?} (expected one of Talk, Lego, Animals, Ghost)"))
    }
}

/// Questionnaire answers given before a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreSession {
    pub pre_mood: [f64; 8],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_fatigue: Option<f64>,
}

/// Media of one task; arrays are indexed like the session's participants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecording {
    pub task: Task,
    pub order: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u32>,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub video: [String; 2],
    pub audio: [String; 2],
    pub detections: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub id: String,
    pub participants: [String; 2],
    pub session_index: u32,
    pub relationship_known: bool,
    pub states: [PreSession; 2],
    pub tasks: Vec<TaskRecording>,
}

impl SessionEntry {
    pub fn task(&self, task: Task) -> Option<&TaskRecording> {
        self.tasks.iter().find(|t| t.task == task)
    }

    /// Metadata state of participant `i` during `rec`.
    pub fn state(&self, i: usize, rec: &TaskRecording) -> SessionState {
        SessionState {
            session_index: self.session_index,
            pre_mood: self.states[i].pre_mood,
            pre_fatigue: self.states[i].pre_fatigue,
            task_order: rec.order,
            task_difficulty: rec.difficulty,
            relationship_known: self.relationship_known,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionManifest {
    pub participants: Vec<ParticipantProfile>,
    pub sessions: Vec<SessionEntry>,
}

fn media_path_ok(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty()
        && path.is_relative()
        && path.components().all(|c| matches!(c, std::path::Component::Normal(_)))
}

impl SessionManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: SessionManifest = toml::from_str(text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest types serialize to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::Manifest(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text)
    }

    /// Ids are unique, sessions reference two distinct known participants,
    /// task entries are unique per session and media paths stay inside the
    /// corpus directory.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Manifest(m));
        let mut ids = BTreeSet::new();
        for p in &self.participants {
            if !ids.insert(p.id.as_str()) {
                return bad(format!("duplicate participant {}", p.id));
            }
        }
        let mut sessions = BTreeSet::new();
        for s in &self.sessions {
            if !sessions.insert(s.id.as_str()) {
                return bad(format!("duplicate session {}", s.id));
            }
            if s.participants[0] == s.participants[1] {
                return bad(format!("session {} pairs {} with itself", s.id, s.participants[0]));
            }
            if let Some(p) = s.participants.iter().find(|p| !ids.contains(p.as_str())) {
                return bad(format!("session {} references unknown participant {p}", s.id));
            }
            let mut tasks = BTreeSet::new();
            for t in &s.tasks {
                if !tasks.insert(t.task) {
                    return bad(format!("session {} lists task {} twice", s.id, t.task));
                }
                if let Some(p) = t.video.iter().chain(&t.audio).chain(&t.detections).find(|p| !media_path_ok(p)) {
                    return bad(format!("session {}: media path {p:?} must be relative and inside the corpus", s.id));
                }
            }
        }
        Ok(())
    }

    pub fn profile(&self, id: &str) -> Option<&ParticipantProfile> {
        self.participants.iter().find(|p| p.id == id)
    }

    /// Records for split construction.
    pub fn session_records(&self) -> Vec<SessionRecord> {
        self.sessions
            .iter()
            .filter_map(|s| {
                let info = |id: &str| {
                    self.profile(id).map(|p| ParticipantInfo { id: p.id.clone(), age: p.age, gender: p.gender, ocean: p.personality })
                };
                let a = info(&s.participants[0])?;
                let b = info(&s.participants[1])?;
                let group = group_label(&a, &b, s.relationship_known);
                Some(SessionRecord { session_id: s.id.clone(), participants: [a, b], group })
            })
            .collect()
    }
}

/// Read access to the media files of a corpus.
pub trait MediaSource {
    fn read(&self, path: &str) -> Result<Vec<u8>>;
}

/// Media stored under a directory.
pub struct DirSource {
    pub root: PathBuf,
}

impl MediaSource for DirSource {
    fn read(&self, path: &str) -> Result<Vec<u8>> {
        Ok(io::read_file(&self.root.join(path))?)
    }
}

/// Knobs of the synthetic corpus. Participants are partitioned into groups
/// of `group_size`; sessions pair members of a group round-robin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSessionSpec {
    pub participants: usize,
    pub group_size: usize,
    pub sessions_per_participant: usize,
    pub tasks: Vec<Task>,
    pub frame_count: usize,
    pub frame_size: usize,
    /// Strength of the mood/fatigue link to the participant's traits.
    pub metadata_effect: f64,
    /// Strength of the face colour and shading link.
    pub video_effect: f64,
    /// Strength of the voice band-amplitude link.
    pub audio_effect: f64,
    pub noise: f64,
    pub detection_miss_rate: f64,
    /// Expected new distractor detections per frame.
    pub distractor_rate: f64,
    pub fatigue_missing_rate: f64,
}

impl Default for SyntheticSessionSpec {
    fn default() -> Self {
        SyntheticSessionSpec {
            participants: 24,
            group_size: 4,
            sessions_per_participant: 2,
            tasks: Task::ALL.to_vec(),
            frame_count: 128,
            frame_size: 32,
            metadata_effect: 1.0,
            video_effect: 0.5,
            audio_effect: 1.0,
            noise: 0.5,
            detection_miss_rate: 0.1,
            distractor_rate: 0.05,
            fatigue_missing_rate: 0.1,
        }
    }
}

impl SyntheticSessionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.participants < 2 || self.group_size < 2 {
            return bad("need at least two participants per group");
        }
        if self.participants % self.group_size == 1 {
            return bad("participant count leaves a group of one");
        }
        if !(1..=5).contains(&self.sessions_per_participant) {
            return bad("sessions_per_participant must lie in 1..=5");
        }
        if self.tasks.is_empty() || self.tasks.iter().collect::<BTreeSet<_>>().len() != self.tasks.len() {
            return bad("tasks must be non-empty and distinct");
        }
        if self.frame_count == 0 || self.frame_size < 16 {
            return bad("frame_count must be positive and frame_size at least 16");
        }
        let effects = [self.metadata_effect, self.video_effect, self.audio_effect, self.noise, self.distractor_rate];
        if effects.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("effect sizes, noise and rates must be finite and non-negative");
        }
        if ![self.detection_miss_rate, self.fatigue_missing_rate].iter().all(|r| (0.0..1.0).contains(r)) {
            return bad("miss rates must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub manifest: SessionManifest,
    pub files: BTreeMap<String, Vec<u8>>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl SyntheticCorpus {
    /// Write `manifest.toml` and every media file under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_file(&dir.join(MANIFEST_FILE), self.manifest.to_toml().as_bytes())?;
        for (path, bytes) in &self.files {
            io::write_file(&dir.join(path), bytes)?;
        }
        Ok(())
    }
}

impl MediaSource for SyntheticCorpus {
    fn read(&self, path: &str) -> Result<Vec<u8>> {
        self.files
            .get(path)
            .cloned()
            .ok_or_else(|| {
                let source = std::io::Error::new(std::io::ErrorKind::NotFound, "not in corpus");
                IoError::File { path: path.into(), source }.into()
            })
    }
}

/// Pairings for each round of a round-robin over `n` members (circle
/// method; with odd `n` one member sits out each round).
fn round_robin(n: usize) -> Vec<Vec<(usize, usize)>> {
    let m = n + n % 2;
    let mut ring: Vec<Option<usize>> = (0..m).map(|i| (i < n).then_some(i)).collect();
    let mut rounds = vec![];
    for _ in 0..m - 1 {
        let mut pairs = vec![];
        for i in 0..m / 2 {
            if let (Some(a), Some(b)) = (ring[i], ring[m - 1 - i]) {
                pairs.push((a.min(b), a.max(b)));
            }
        }
        rounds.push(pairs);
        let last = ring.pop().unwrap();
        ring.insert(1, last);
    }
    rounds
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const AUDIO_BANDS_HZ: [f64; 5] = [180.0, 410.0, 760.0, 1240.0, 1870.0];

struct FacePath {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    phase: f64,
}

impl FacePath {
    fn at(&self, frame: usize) -> (f64, f64, f64, f64) {
        let t = frame as f64 / NOMINAL_FPS;
        let cx = self.cx + (t * 0.9 + self.phase).sin();
        let cy = self.cy + 0.5 * (t * 0.6 + self.phase).cos();
        (cx - self.w / 2.0, cy - self.h / 2.0, cx + self.w / 2.0, cy + self.h / 2.0)
    }
}

fn render_video(spec: &SyntheticSessionSpec, face: &FacePath, traits: &[f64; 5], rng: &mut ChaCha8Rng) -> VideoStream {
    let n = spec.frame_size;
    let e = spec.video_effect;
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..110.0));
    let skin = [170.0 + 30.0 * e * traits[0], 135.0 + 30.0 * e * traits[1], 115.0 + 30.0 * e * traits[2]];
    let (gx, gy) = (20.0 * e * traits[3], 20.0 * e * traits[4]);
    let mut data = Vec::with_capacity(spec.frame_count * n * n * 3);
    for f in 0..spec.frame_count {
        let (x1, y1, x2, y2) = face.at(f);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = px >= x1 && px < x2 && py >= y1 && py < y2;
                for c in 0..3 {
                    let v = if inside {
                        let u = (px - x1) / (x2 - x1) - 0.5;
                        let w = (py - y1) / (y2 - y1) - 0.5;
                        skin[c] + gx * u + gy * w
                    } else {
                        background[c] + 25.0 * (py / n as f64 - 0.5)
                    };
                    data.push((v + 6.0 * spec.noise * normal(rng)).round().clamp(0.0, 255.0));
                }
            }
        }
    }
    VideoStream::new(spec.frame_count, n, n, NOMINAL_FPS, data).expect("rendered video is well formed")
}

fn render_detections(spec: &SyntheticSessionSpec, face: &FacePath, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
    let n = spec.frame_size as f64;
    let snap = |v: f64| ((v * 10.0).round() / 10.0).clamp(0.0, n);
    let mut distractors: Vec<(usize, [f64; 4])> = vec![];
    let mut out = vec![];
    for f in 0..spec.frame_count {
        if rng.random::<f64>() >= spec.detection_miss_rate {
            let (x1, y1, x2, y2) = face.at(f);
            let j = |rng: &mut ChaCha8Rng| 0.3 * normal(rng);
            let b = [snap(x1 + j(rng)), snap(y1 + j(rng)), snap(x2 + j(rng)), snap(y2 + j(rng))];
            out.push(BoundingBox::new(f, b[0], b[1], b[2], b[3]).expect("face box is ordered"));
        }
        if rng.random::<f64>() < spec.distractor_rate {
            let size = rng.random_range(3.0..n / 4.0);
            let x = rng.random_range(0.0..n - size);
            let y = rng.random_range(0.0..n - size);
            distractors.push((f + rng.random_range(1..6), [snap(x), snap(y), snap(x + size), snap(y + size)]));
        }
        distractors.retain(|(until, _)| *until > f);
        for (_, b) in &distractors {
            out.push(BoundingBox::new(f, b[0], b[1], b[2], b[3]).expect("distractor box is ordered"));
        }
    }
    out
}

fn render_audio(spec: &SyntheticSessionSpec, traits: &[f64; 5], rng: &mut ChaCha8Rng) -> AudioBuffer {
    let rate = AUDIO_SAMPLE_RATE as f64;
    let len = (spec.frame_count as f64 / NOMINAL_FPS * rate).round() as usize;
    let amps: [f64; 5] = std::array::from_fn(|k| 0.04 * (0.5 * spec.audio_effect * traits[k]).exp());
    let phases: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let syllable = rng.random_range(3.0..5.0);
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let envelope = 0.6 + 0.4 * (std::f64::consts::TAU * syllable * t).sin();
            let voice: f64 = (0..5).map(|k| amps[k] * (std::f64::consts::TAU * AUDIO_BANDS_HZ[k] * t + phases[k]).sin()).sum();
            quantize_sample(envelope * voice + 0.01 * spec.noise * normal(rng))
        })
        .collect();
    AudioBuffer { sample_rate: AUDIO_SAMPLE_RATE, samples }
}

fn pre_session(spec: &SyntheticSessionSpec, traits: &[f64; 5], rng: &mut ChaCha8Rng) -> PreSession {
    let e = spec.metadata_effect;
    let pre_mood = std::array::from_fn(|k| (3.0 + e * traits[k % 5] + spec.noise * normal(rng)).round().clamp(1.0, 5.0));
    let fatigue = (5.0 - 2.0 * e * traits[2] + 2.0 * spec.noise * normal(rng)).round().clamp(0.0, 10.0);
    let pre_fatigue = (rng.random::<f64>() >= spec.fatigue_missing_rate).then_some(fatigue);
    PreSession { pre_mood, pre_fatigue }
}

/// Deterministic synthetic corpus. Trait labels are standard-normal
/// z-scores; pre-session mood and fatigue, face colour and shading, and
/// voice band amplitudes each carry them at their configured effect size.
pub fn generate_synthetic(spec: &SyntheticSessionSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let participants: Vec<ParticipantProfile> = (0..spec.participants)
        .map(|i| ParticipantProfile {
            id: format!("P{:03}", i + 1),
            age: rng.random_range(18..=70) as f64,
            gender: if rng.random::<bool>() { Gender::F } else { Gender::M },
            culture_region: rng.random_range(0..CULTURE_REGIONS),
            personality: std::array::from_fn(|_| normal(&mut rng)),
        })
        .collect();

    let mut pairs: Vec<(usize, usize, u32)> = vec![];
    for start in (0..spec.participants).step_by(spec.group_size) {
        let size = spec.group_size.min(spec.participants - start);
        let rounds = round_robin(size);
        for r in 0..spec.sessions_per_participant {
            for &(a, b) in &rounds[r % rounds.len()] {
                pairs.push((start + a, start + b, r as u32 + 1));
            }
        }
    }

    let mut files = BTreeMap::new();
    let mut sessions = vec![];
    for (k, &(a, b, round)) in pairs.iter().enumerate() {
        let id = format!("S{:03}", k + 1);
        let who = [a, b];
        let traits = who.map(|i| participants[i].personality);
        let states = traits.map(|t| pre_session(spec, &t, &mut rng));
        let mut order: Vec<usize> = (0..spec.tasks.len()).collect();
        order.shuffle(&mut rng);
        let mut tasks = vec![];
        for (ti, &task) in spec.tasks.iter().enumerate() {
            let stem = |i: usize, ext: &str| format!("sessions/{id}/{}_{i}.{ext}", task.name().to_lowercase());
            let n = spec.frame_size as f64;
            for i in 0..2 {
                let face = FacePath {
                    cx: n / 2.0 + rng.random_range(-2.0..2.0),
                    cy: 0.45 * n + rng.random_range(-1.5..1.5),
                    w: 0.42 * n,
                    h: 0.5 * n,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                };
                let video = render_video(spec, &face, &traits[i], &mut rng);
                let dets = render_detections(spec, &face, &mut rng);
                let audio = render_audio(spec, &traits[i], &mut rng);
                files.insert(stem(i, "vid"), encode_video(&video));
                files.insert(stem(i, "det"), format_detections(&dets).into_bytes());
                files.insert(stem(i, "aud"), encode_audio(&audio));
            }
            tasks.push(TaskRecording {
                task,
                order: order[ti] as u32 + 1,
                difficulty: task.has_difficulty().then(|| rng.random_range(1..=3)),
                frame_count: spec.frame_count,
                width: spec.frame_size,
                height: spec.frame_size,
                video: [stem(0, "vid"), stem(1, "vid")],
                audio: [stem(0, "aud"), stem(1, "aud")],
                detections: [stem(0, "det"), stem(1, "det")],
            });
        }
        sessions.push(SessionEntry {
            id,
            participants: who.map(|i| participants[i].id.clone()),
            session_index: round,
            relationship_known: rng.random::<f64>() < 0.3,
            states,
            tasks,
        });
    }
    let manifest = SessionManifest { participants, sessions };
    manifest.validate()?;
    Ok(SyntheticCorpus { manifest, files })
}

#[cfg(test)]
mod tests;
