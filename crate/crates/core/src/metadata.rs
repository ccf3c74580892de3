//! Context metadata encoding.
//!
//! Layout of the 18-d individual block:
//!
//! | idx   | field          | normalization            |
//! |-------|----------------|--------------------------|
//! | 0     | age            | `(age−17)/58`, clamped   |
//! | 1     | gender         | F→0, M→1                 |
//! | 2..8  | culture region | one-hot over 6 regions   |
//! | 8     | session index  | `(s−1)/4`                |
//! | 9..17 | pre-session mood (good, bad, happy, sad, friendly, unfriendly, tense, relaxed) | `(v−1)/4` |
//! | 17    | pre-session fatigue | `v/10`, missing → 0 |
//!
//! The local vector appends task order `(o−1)/3` and task difficulty `d/3`
//! (tasks without a difficulty level encode 0); the extended vector uses the
//! interlocutor's individual block and appends the relationship flag.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

pub const INDIVIDUAL_DIM: usize = 18;
pub const LOCAL_DIM: usize = 20;
pub const EXTENDED_DIM: usize = 19;
pub const CULTURE_REGIONS: usize = 6;
pub const MOOD_CATEGORIES: [&str; 8] = [
    "good",
    "bad",
    "happy",
    "sad",
    "friendly",
    "unfriendly",
    "tense",
    "relaxed",
];

const AGE_MIN: f64 = 17.0;
const AGE_MAX: f64 = 75.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error("{field} = {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("culture region {0} is not one of the {CULTURE_REGIONS} categories")]
    Culture(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetadataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

/// Stable, self-reported characteristics of one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub id: String,
    pub age: f64,
    pub gender: Gender,
    pub culture_region: usize,
    /// OCEAN z-scores. Labels only; never encoded as model input.
    #[serde(default)]
    pub personality: [f64; 5],
}

/// Per-session, per-participant state plus the session/dyad descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_index: u32,
    pub pre_mood: [f64; 8],
    pub pre_fatigue: Option<f64>,
    pub task_order: u32,
    /// `None` for tasks without a difficulty level.
    pub task_difficulty: Option<u32>,
    pub relationship_known: bool,
}

fn in_range(field: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<f64> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(value)
    } else {
        Err(MetadataError::OutOfRange { field, value, range })
    }
}

pub fn encode_individual_values(profile: &ParticipantProfile, state: &SessionState) -> Result<Vec<f64>> {
    if profile.culture_region >= CULTURE_REGIONS {
        return Err(MetadataError::Culture(profile.culture_region));
    }
    if !profile.age.is_finite() {
        return Err(MetadataError::OutOfRange {
            field: "age",
            value: profile.age,
            range: "finite years",
        });
    }
    let mut v = Vec::with_capacity(INDIVIDUAL_DIM);
    v.push(((profile.age - AGE_MIN) / (AGE_MAX - AGE_MIN)).clamp(0.0, 1.0));
    v.push(match profile.gender {
        Gender::F => 0.0,
        Gender::M => 1.0,
    });
    v.extend((0..CULTURE_REGIONS).map(|r| if r == profile.culture_region { 1.0 } else { 0.0 }));
    let s = in_range("session_index", state.session_index as f64, 1.0, 5.0, "[1,5]")?;
    v.push((s - 1.0) / 4.0);
    for &m in &state.pre_mood {
        v.push((in_range("pre_mood", m, 1.0, 5.0, "[1,5]")? - 1.0) / 4.0);
    }
    v.push(match state.pre_fatigue {
        Some(f) => in_range("pre_fatigue", f, 0.0, 10.0, "[0,10]")? / 10.0,
        None => 0.0,
    });
    debug_assert_eq!(v.len(), INDIVIDUAL_DIM);
    Ok(v)
}

pub fn encode_individual(profile: &ParticipantProfile, state: &SessionState) -> Result<Tensor> {
    Ok(Tensor::vector(&encode_individual_values(profile, state)?)?)
}

/// Target's individual block followed by task order and difficulty.
pub fn encode_local(profile: &ParticipantProfile, state: &SessionState) -> Result<Tensor> {
    let mut v = encode_individual_values(profile, state)?;
    let order = in_range("task_order", state.task_order as f64, 1.0, 4.0, "[1,4]")?;
    v.push((order - 1.0) / 3.0);
    v.push(match state.task_difficulty {
        Some(d) => in_range("task_difficulty", d as f64, 0.0, 3.0, "[0,3]")? / 3.0,
        None => 0.0,
    });
    Ok(Tensor::vector(&v)?)
}

/// Interlocutor's individual block (under the interlocutor's own session
/// state) followed by the relationship flag.
pub fn encode_extended(interlocutor: &ParticipantProfile, state: &SessionState) -> Result<Tensor> {
    let mut v = encode_individual_values(interlocutor, state)?;
    v.push(if state.relationship_known { 1.0 } else { 0.0 });
    Ok(Tensor::vector(&v)?)
}

/// `m_L` and `m_E` for one target in one session task.
#[derive(Debug, Clone)]
pub struct MetadataVectors {
    pub local: Tensor,
    pub extended: Tensor,
}

impl MetadataVectors {
    pub fn for_target(
        target: &ParticipantProfile,
        target_state: &SessionState,
        interlocutor: &ParticipantProfile,
        interlocutor_state: &SessionState,
    ) -> Result<Self> {
        Ok(MetadataVectors {
            local: encode_local(target, target_state)?,
            extended: encode_extended(interlocutor, interlocutor_state)?,
        })
    }
}
