//! The teacher-scored Empathy Vector and its projection into model space.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::init_linear;
use crate::real::Real;
use crate::tensor::{self, Activation, ParamId, ParamStore, Tape, Tensor, Var};

pub const EV_DIMS: usize = 9;
pub const MAX_SCORE: u8 = 5;
/// Zero-based index of the suicidal-ideation dimension.
pub const SUICIDE_DIM: usize = 8;

/// PHQ-9 item short names, in EV dimension order.
pub const DIMENSION_NAMES: [&str; EV_DIMS] = [
    "Anhedonia",
    "Depressed mood",
    "Sleep disturbance",
    "Fatigue",
    "Appetite change",
    "Worthlessness",
    "Concentration",
    "Psychomotor change",
    "Suicidal ideation",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvError {
    #[error("empathy vector needs {EV_DIMS} scores, got {got}")]
    Arity { got: usize },
    #[error("dimension {} score {value} is outside 0-5", .index + 1)]
    Range { index: usize, value: f64 },
    #[error("dimension {} score {value} is not an integer", .index + 1)]
    NotInteger { index: usize, value: f64 },
}

impl EvError {
    /// One-based dimension number the error refers to, if any.
    pub fn dimension(&self) -> Option<usize> {
        match self {
            EvError::Arity { .. } => None,
            EvError::Range { index, .. } | EvError::NotInteger { index, .. } => Some(index + 1),
        }
    }
}

/// Nine integer scores in `0..=5`, one per PHQ-9-aligned dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<u8>")]
pub struct EmpathyVector([u8; EV_DIMS]);

impl EmpathyVector {
    pub const ZERO: EmpathyVector = EmpathyVector([0; EV_DIMS]);

    pub fn new(scores: [u8; EV_DIMS]) -> Result<Self, EvError> {
        validate_ev(&scores.map(f64::from))
    }

    pub fn scores(&self) -> &[u8; EV_DIMS] {
        &self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().map(|&s| u32::from(s)).sum()
    }

    /// Copy with dimension `index` set to `value`.
    pub fn with(&self, index: usize, value: u8) -> Result<Self, EvError> {
        if index >= EV_DIMS {
            return Err(EvError::Arity { got: index + 1 });
        }
        let mut s = self.0;
        s[index] = value;
        Self::new(s)
    }

    pub fn to_reals<F: Real>(&self) -> [F; EV_DIMS] {
        self.0.map(|s| F::lit(f64::from(s)))
    }
}

impl TryFrom<Vec<f64>> for EmpathyVector {
    type Error = EvError;

    fn try_from(raw: Vec<f64>) -> Result<Self, Self::Error> {
        validate_ev(&raw)
    }
}

impl From<EmpathyVector> for Vec<u8> {
    fn from(ev: EmpathyVector) -> Self {
        ev.0.to_vec()
    }
}

impl fmt::Display for EmpathyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u8::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Accepts exactly nine integer scores in `0..=5`.
pub fn validate_ev(raw: &[f64]) -> Result<EmpathyVector, EvError> {
    if raw.len() != EV_DIMS {
        return Err(EvError::Arity { got: raw.len() });
    }
    let mut scores = [0u8; EV_DIMS];
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() || value.fract() != 0.0 {
            return Err(EvError::NotInteger { index, value });
        }
        if !(0.0..=f64::from(MAX_SCORE)).contains(&value) {
            return Err(EvError::Range { index, value });
        }
        scores[index] = value as u8;
    }
    Ok(EmpathyVector(scores))
}

/// The seven severity levels, in index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeverityLabel {
    NoDepression,
    Minimal,
    Mild,
    Moderate,
    ModeratelySevere,
    Severe,
    SevereSuicideRisk,
}

impl SeverityLabel {
    pub const COUNT: usize = 7;

    pub const ALL: [SeverityLabel; 7] = [
        SeverityLabel::NoDepression,
        SeverityLabel::Minimal,
        SeverityLabel::Mild,
        SeverityLabel::Moderate,
        SeverityLabel::ModeratelySevere,
        SeverityLabel::Severe,
        SeverityLabel::SevereSuicideRisk,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityLabel::NoDepression => "No Depression",
            SeverityLabel::Minimal => "Minimal Depression",
            SeverityLabel::Mild => "Mild Depression",
            SeverityLabel::Moderate => "Moderate Depression",
            SeverityLabel::ModeratelySevere => "Moderately Severe Depression",
            SeverityLabel::Severe => "Severe Depression",
            SeverityLabel::SevereSuicideRisk => "Severe Depression with High Suicide Risk",
        }
    }
}

impl fmt::Display for SeverityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for SeverityLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.index() as u64)
    }
}

impl<'de> Deserialize<'de> for SeverityLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let i = u64::deserialize(d)?;
        SeverityLabel::from_index(i as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("severity label {i} is outside 0-6")))
    }
}

/// Maps an EV to a severity level for synthetic data generation.
///
/// Total score bands decide levels 0-5; a high suicidal-ideation score forces
/// level 6 regardless of the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRule {
    /// Inclusive upper total for levels 0..=4; larger totals are level 5.
    pub upper_bounds: [u32; 5],
    pub suicide_threshold: u8,
}

impl Default for SynthesisRule {
    fn default() -> Self {
        Self {
            upper_bounds: [2, 7, 13, 21, 29],
            suicide_threshold: 4,
        }
    }
}

pub fn severity_from_ev(ev: &EmpathyVector, rule: &SynthesisRule) -> SeverityLabel {
    if ev.scores()[SUICIDE_DIM] >= rule.suicide_threshold {
        return SeverityLabel::SevereSuicideRisk;
    }
    let total = ev.total();
    let level = rule
        .upper_bounds
        .iter()
        .position(|&ub| total <= ub)
        .unwrap_or(5);
    SeverityLabel::ALL[level]
}

/// Layer widths of the EV projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            dims: vec![EV_DIMS, 64, 128],
            activation: Activation::Gelu,
        }
    }
}

impl ProjectionConfig {
    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("projection has layers")
    }
}

/// Parameters of the EV projection MLP.
#[derive(Clone, Debug)]
pub struct EvProjection {
    layers: Vec<(ParamId, ParamId)>,
    activation: Activation,
}

impl EvProjection {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        config: &ProjectionConfig,
        rng: &mut impl Rng,
    ) -> tensor::Result<Self> {
        let layers = config
            .dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| init_linear(store, &format!("ev.l{}", i + 1), w[0], w[1], rng))
            .collect::<tensor::Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation: config.activation,
        })
    }

    pub fn bind(store: &ParamStore<impl Real>, config: &ProjectionConfig) -> tensor::Result<Self> {
        let layers = (1..config.dims.len())
            .map(|i| Ok((store.id(&format!("ev.l{i}.w"))?, store.id(&format!("ev.l{i}.b"))?)))
            .collect::<tensor::Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation: config.activation,
        })
    }

    /// `act(… act(ev·W₁ + b₁) …·Wₙ + bₙ)` for `ev[b×9]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, ev: Var) -> tensor::Result<Var> {
        let mut h = ev;
        for &(w, b) in &self.layers {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.linear(h, w, Some(b))?;
            h = tape.activation(z, self.activation)?;
        }
        Ok(h)
    }
}

/// Raw (unnormalized) scores of a batch of EVs as a `[b×9]` tensor.
pub fn ev_batch<F: Real>(evs: &[EmpathyVector]) -> Tensor<F> {
    let data = evs.iter().flat_map(|e| e.to_reals::<F>()).collect();
    Tensor::new(vec![evs.len(), EV_DIMS], data).expect("EV scores are finite")
}
