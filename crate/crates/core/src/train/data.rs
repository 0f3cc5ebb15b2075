//! Synthetic labeled corpora, JSON-lines I/O and stratified splitting.
//!
//! Each sample draws a target level, then an EV whose total and
//! suicidal-ideation score produce that level, then a narrative whose tokens
//! come mostly from the level's lexicon band. Bands are coarser than levels,
//! so text alone cannot separate neighbouring levels and the EV is needed.
//! EV jitter after labeling keeps the EV from being a perfect oracle.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::empathy::{severity_from_ev, EmpathyVector, SeverityLabel, SynthesisRule, EV_DIMS, MAX_SCORE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Config(String),
    #[error("dataset has {got} samples, need at least {need}")]
    TooSmall { got: usize, need: usize },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub narrative: String,
    pub ev: EmpathyVector,
    pub label: SeverityLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassBalance {
    Uniform,
    /// Skewed toward low severity.
    Natural,
}

const NATURAL_WEIGHTS: [f64; SeverityLabel::COUNT] = [0.28, 0.24, 0.18, 0.13, 0.08, 0.05, 0.04];

/// Token pools: one per severity band, plus neutral filler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub bands: Vec<Vec<String>>,
    pub filler: Vec<String>,
    /// Band index of each of the 7 levels.
    pub level_band: [usize; SeverityLabel::COUNT],
}

const BAND_WORDS: [&str; 4] = [
    "happy calm friends laughing enjoyed excited proud playing rested energetic curious hopeful \
     relaxed cheerful grateful confident smiling motivated content joking sunny celebrate \
     teamwork achieved balanced steady",
    "tired bored stressed worried distracted restless irritable grumpy lonely quiet sluggish \
     overwhelmed nervous unsettled drained moody homesick flat uneasy sighing late behind \
     forgetful withdrawn distant",
    "hopeless empty worthless crying exhausted numb isolated ashamed guilty sleepless failing \
     heavy trapped broken skipping avoiding helpless useless miserable despair aching \
     collapsing burden hiding",
    "vanish disappear goodbye unbearable ending pointless dying giveup nothingleft darkness \
     finalnote erased gone forever alone hurtmyself noescape wishgone leaveforgood endit \
     cannotgoon lastday farewell",
];

const FILLER_WORDS: &str = "the a and then class teacher school lunch today yesterday morning \
    afternoon homework bus library math science music art break weekend family home room \
    book phone game walk talk week day said went came saw made took felt about with after \
    before during because when while also just really maybe";

impl Default for Lexicon {
    fn default() -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
        Self {
            bands: BAND_WORDS.iter().map(|b| split(b)).collect(),
            filler: split(FILLER_WORDS),
            level_band: [0, 0, 1, 1, 2, 3, 3],
        }
    }
}

impl Lexicon {
    fn validate(&self) -> Result<(), DataError> {
        if self.bands.is_empty() || self.bands.iter().any(Vec::is_empty) || self.filler.is_empty() {
            return Err(DataError::Config("lexicon pools must be non-empty".into()));
        }
        if self.level_band.iter().any(|&b| b >= self.bands.len()) {
            return Err(DataError::Config("lexicon level_band refers to a missing band".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default = "default_balance")]
    pub class_balance: ClassBalance,
    #[serde(default = "default_noise")]
    pub noise_rate: f64,
    #[serde(default = "default_ev_noise")]
    pub ev_noise: f64,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub lexicon: Lexicon,
    #[serde(default)]
    pub rule: SynthesisRule,
}

fn default_balance() -> ClassBalance {
    ClassBalance::Uniform
}
fn default_noise() -> f64 {
    0.3
}
fn default_ev_noise() -> f64 {
    0.1
}
fn default_min_tokens() -> usize {
    30
}
fn default_max_tokens() -> usize {
    1200
}

impl SyntheticDatasetSpec {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            class_balance: default_balance(),
            noise_rate: default_noise(),
            ev_noise: default_ev_noise(),
            min_tokens: default_min_tokens(),
            max_tokens: default_max_tokens(),
            lexicon: Lexicon::default(),
            rule: SynthesisRule::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_balance == ClassBalance::Uniform && self.n_samples < SeverityLabel::COUNT {
            return Err(DataError::Config(format!(
                "uniform balance needs at least {} samples",
                SeverityLabel::COUNT
            )));
        }
        if self.n_samples == 0 {
            return Err(DataError::Config("n_samples must be positive".into()));
        }
        for (name, v) in [("noise_rate", self.noise_rate), ("ev_noise", self.ev_noise)] {
            if !(0.0..1.0).contains(&v) {
                return Err(DataError::Config(format!("{name} = {v} is outside [0, 1)")));
            }
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(DataError::Config("token length range is empty".into()));
        }
        self.lexicon.validate()
    }
}

/// Draws EVs until one maps to `target`. Scores are Binomial(5, p) with a
/// per-draw `p ~ U(0,1)`, so every total range is reachable.
fn draw_ev(rng: &mut impl Rng, target: SeverityLabel, rule: &SynthesisRule) -> EmpathyVector {
    loop {
        let p: f64 = rng.gen();
        let dist = Binomial::new(u64::from(MAX_SCORE), p).expect("p in [0,1)");
        let mut scores = [0u8; EV_DIMS];
        for s in &mut scores {
            *s = dist.sample(rng) as u8;
        }
        let ev = EmpathyVector::new(scores).expect("binomial scores are in range");
        if severity_from_ev(&ev, rule) == target {
            return ev;
        }
    }
}

fn jitter(rng: &mut impl Rng, ev: EmpathyVector, rate: f64) -> EmpathyVector {
    let mut scores = *ev.scores();
    for s in &mut scores {
        if rng.gen::<f64>() < rate {
            *s = if rng.gen::<bool>() {
                (*s + 1).min(MAX_SCORE)
            } else {
                s.saturating_sub(1)
            };
        }
    }
    EmpathyVector::new(scores).expect("jitter clamps to range")
}

fn narrative(rng: &mut impl Rng, band: usize, spec: &SyntheticDatasetSpec) -> String {
    let lex = &spec.lexicon;
    let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let mut out = String::with_capacity(len * 8);
    let mut until_period = rng.gen_range(6..16);
    for i in 0..len {
        let word = if rng.gen::<f64>() < spec.noise_rate {
            // Off-band: filler half the time, otherwise another band.
            let others: Vec<usize> = (0..lex.bands.len()).filter(|&b| b != band).collect();
            if others.is_empty() || rng.gen::<bool>() {
                lex.filler.choose(rng)
            } else {
                lex.bands[*others.choose(rng).expect("non-empty")].choose(rng)
            }
        } else {
            lex.bands[band].choose(rng)
        }
        .expect("pools are non-empty");
        if i > 0 {
            out.push(' ');
        }
        out.push_str(word);
        until_period -= 1;
        if until_period == 0 || i + 1 == len {
            out.push('.');
            until_period = rng.gen_range(6..16);
        }
    }
    out
}

/// Generates a corpus fully determined by `spec`.
pub fn synthesize(spec: &SyntheticDatasetSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<SeverityLabel> = match spec.class_balance {
        ClassBalance::Uniform => (0..spec.n_samples).map(|i| SeverityLabel::ALL[i % SeverityLabel::COUNT]).collect(),
        ClassBalance::Natural => {
            let dist = rand::distributions::WeightedIndex::new(NATURAL_WEIGHTS).expect("weights are positive");
            (0..spec.n_samples).map(|_| SeverityLabel::ALL[dist.sample(&mut rng)]).collect()
        }
    };
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|label| {
            let ev = draw_ev(&mut rng, label, &spec.rule);
            let text = narrative(&mut rng, spec.lexicon.level_band[label.index()], spec);
            let ev = jitter(&mut rng, ev, spec.ev_noise);
            Sample {
                narrative: text,
                ev,
                label,
            }
        })
        .collect())
}

/// Stratified split: each level contributes `round((1 − train_frac)·n)`
/// samples to validation, at least one when it has two or more. Both halves
/// keep dataset order.
pub fn split(dataset: &[Sample], train_frac: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if dataset.len() < 10 {
        return Err(DataError::TooSmall {
            got: dataset.len(),
            need: 10,
        });
    }
    if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
        return Err(DataError::Config(format!("train_frac = {train_frac} is outside (0, 1)")));
    }
    let mut by_label: BTreeMap<SeverityLabel, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_label.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; dataset.len()];
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = ((1.0 - train_frac) * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = 0;
        }
        for &i in &idx[..k] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in dataset.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(s.clone());
    }
    Ok((train, val))
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| DataError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
