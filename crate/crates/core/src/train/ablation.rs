//! Desk-scale ablation families over fusion, enhancement factors, pooling and
//! classifier head.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::trainer::{run, EpochRecord, TrainConfig};
use crate::encoder::Aggregation;
use crate::fusion::{FusionConfig, FusionMode};
use crate::head::{BlockKind, HeadConfig};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fusion,
    Factors,
    Pooling,
    Classifier,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Fusion, Family::Factors, Family::Pooling, Family::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Family::Fusion => "fusion",
            Family::Factors => "factors",
            Family::Pooling => "pooling",
            Family::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown ablation family `{s}` (expected fusion, factors, pooling or classifier)"))
    }
}

/// One configuration in a family, with the published figure it corresponds
/// to, if any. Those figures come from a different corpus and encoder and are
/// context only.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
    pub reference: Option<&'static str>,
}

const FACTOR_GRID: [f64; 3] = [0.15, 0.30, 0.85];

pub fn variants(family: Family, base: &ModelConfig) -> Vec<Variant> {
    let with = |name: String, reference: Option<&'static str>, edit: &dyn Fn(&mut ModelConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        Variant { name, config, reference }
    };
    match family {
        Family::Fusion => vec![
            // The concatenation baseline pairs with the single linear layer.
            with("concat".into(), Some("73.00"), &|c| {
                c.fusion = FusionConfig::with_mode(FusionMode::Concat);
                c.head = HeadConfig::new(BlockKind::Shallow);
            }),
            with("xattn".into(), None, &|c| c.fusion = FusionConfig::with_mode(FusionMode::Xattn)),
            with("scme(0.15)".into(), Some("76.00"), &|c| c.fusion = FusionConfig::scme(0.15)),
            with("acme(0.85,0.30)".into(), Some("77.12"), &|c| c.fusion = FusionConfig::acme(0.85, 0.30)),
        ],
        Family::Factors => {
            let mut out = Vec::new();
            for &et in &FACTOR_GRID {
                for &te in &FACTOR_GRID {
                    let reference = match (et, te) {
                        (a, b) if a == 0.15 && b == 0.15 => Some("76.00"),
                        (a, b) if a == 0.85 && b == 0.30 => Some("77.12"),
                        _ => None,
                    };
                    out.push(with(format!("acme({et:.2},{te:.2})"), reference, &|c| {
                        c.fusion = FusionConfig::acme(et, te)
                    }));
                }
            }
            out.push(with("acme(learned)".into(), None, &|c| {
                c.fusion = FusionConfig {
                    learnable_alpha: true,
                    ..FusionConfig::acme(0.85, 0.30)
                }
            }));
            out
        }
        Family::Pooling => {
            let mut out = Vec::new();
            for (agg, label) in [
                (Aggregation::Mean, "mean"),
                (Aggregation::Max, "max"),
                (Aggregation::Attention, "attention"),
            ] {
                for ln in [false, true] {
                    let reference = (agg == Aggregation::Max && ln).then_some("79.08");
                    let name = format!("{label}{}", if ln { "+ln" } else { "" });
                    out.push(with(name, reference, &|c| {
                        c.encoder.aggregation = agg;
                        c.encoder.post_norm = ln;
                    }));
                }
            }
            out
        }
        Family::Classifier => [
            BlockKind::Shallow,
            BlockKind::PlainRelu,
            BlockKind::PlainSilu,
            BlockKind::PlainGelu,
            BlockKind::GluGelu,
        ]
        .into_iter()
        .map(|k| {
            let reference = (k == BlockKind::GluGelu).then_some("82.74");
            with(k.name().into(), reference, &|c| c.head = HeadConfig::new(k))
        })
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub error: Option<String>,
    pub paper_reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_sd: f64,
    pub paper_reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub family: Family,
    pub rows: Vec<AblationRow>,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn reference_label(r: Option<&'static str>) -> String {
    match r {
        Some(v) => format!("{v} (different corpus, not comparable)"),
        None => "n/a".into(),
    }
}

impl AblationReport {
    /// Per-variant mean ± sd over successful seeds, in variant order.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant.as_str()) {
                order.push(&r.variant);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v).collect();
                let acc: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
                let f1: Vec<f64> = rows.iter().filter_map(|r| r.macro_f1).collect();
                let (accuracy_mean, accuracy_sd) = mean_sd(&acc);
                let (macro_f1_mean, macro_f1_sd) = mean_sd(&f1);
                VariantSummary {
                    variant: v.to_owned(),
                    runs: rows.len(),
                    failures: rows.iter().filter(|r| r.error.is_some()).count(),
                    accuracy_mean,
                    accuracy_sd,
                    macro_f1_mean,
                    macro_f1_sd,
                    paper_reference: rows[0].paper_reference.clone(),
                }
            })
            .collect()
    }

    pub fn mean_accuracy(&self, variant: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.variant == variant)
            .map(|s| s.accuracy_mean)
    }

    /// Per-seed rows, then `mean` and `sd` rows per variant. Failed runs leave
    /// the metric cells empty.
    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "seed", "accuracy", "macro_f1", "paper_reference"])?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                cell(r.accuracy),
                cell(r.macro_f1),
                r.paper_reference.clone(),
            ])?;
        }
        for s in self.summary() {
            for (tag, a, f) in [
                ("mean", s.accuracy_mean, s.macro_f1_mean),
                ("sd", s.accuracy_sd, s.macro_f1_sd),
            ] {
                let finite = |x: f64| x.is_finite().then_some(x);
                w.write_record([
                    s.variant.clone(),
                    tag.to_owned(),
                    cell(finite(a)),
                    cell(finite(f)),
                    s.paper_reference.clone(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every variant of `family` on `data` once per seed. A failing run is
/// recorded in its row and the family continues.
pub fn ablate(
    family: Family,
    data: &[Sample],
    base: &ModelConfig,
    train: &TrainConfig,
    seeds: &[u64],
    split_seed: u64,
    mut progress: impl FnMut(&str, u64, &EpochRecord),
) -> AblationReport {
    let mut rows = Vec::new();
    for v in variants(family, base) {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..train.clone() };
            let outcome = run(data, &v.config, &cfg, split_seed, |r| progress(&v.name, seed, r));
            let (accuracy, macro_f1, error) = match outcome {
                Ok(o) => (Some(o.metrics.accuracy), Some(o.metrics.macro_f1), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                accuracy,
                macro_f1,
                error,
                paper_reference: reference_label(v.reference),
            });
        }
    }
    AblationReport { family, rows }
}
