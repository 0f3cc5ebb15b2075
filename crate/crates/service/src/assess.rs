//! Request validation and inference over a loaded checkpoint.

use std::path::Path;

use heae_core::empathy::{validate_ev, EvError, EV_DIMS, MAX_SCORE};
use heae_core::model::{assess_row, ModelError};
use heae_core::train::checkpoint::{self, CheckpointError, LoadedCheckpoint};
use heae_core::{EmpathyVector, HeaeModel};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

/// One problem with a request field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    /// Zero-based position in `empathy_vector` or `values`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// One-based EV dimension number.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            index: None,
            dimension: None,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AssessError {
    #[error("request is invalid")]
    Validation(Vec<FieldError>),
    #[error("no model is loaded")]
    ModelNotLoaded,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssessRequest {
    pub narrative: String,
    pub empathy_vector: EmpathyVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhatIfRequest {
    pub base: AssessRequest,
    pub dimension: usize,
    pub values: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssessResponse {
    pub probabilities: Vec<f64>,
    pub label_index: usize,
    pub label_name: &'static str,
    pub chunk_count: usize,
    pub model_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WhatIfPoint {
    pub value: u8,
    pub assessment: AssessResponse,
}

fn ev_field_error(prefix: &str, e: &EvError) -> FieldError {
    FieldError {
        field: format!("{prefix}empathy_vector"),
        index: e.dimension().map(|d| d - 1),
        dimension: e.dimension(),
        message: e.to_string(),
    }
}

fn parse_assess(v: &Value, prefix: &str) -> Result<AssessRequest, Vec<FieldError>> {
    let mut errors = Vec::new();
    let Some(obj) = v.as_object() else {
        return Err(vec![FieldError::new(prefix.trim_end_matches('.'), "expected a JSON object")]);
    };
    let narrative = match obj.get("narrative") {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
        Some(Value::String(_)) => {
            errors.push(FieldError::new(format!("{prefix}narrative"), "narrative is empty"));
            None
        }
        Some(_) => {
            errors.push(FieldError::new(format!("{prefix}narrative"), "narrative must be a string"));
            None
        }
        None => {
            errors.push(FieldError::new(format!("{prefix}narrative"), "narrative is required"));
            None
        }
    };
    let field = format!("{prefix}empathy_vector");
    let ev = match obj.get("empathy_vector") {
        Some(Value::Array(items)) => {
            let mut scores = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                match item.as_f64() {
                    Some(x) => scores.push(x),
                    None => errors.push(FieldError {
                        field: field.clone(),
                        index: Some(i),
                        dimension: Some(i + 1),
                        message: format!("dimension {} score must be a number", i + 1),
                    }),
                }
            }
            if scores.len() == items.len() {
                match validate_ev(&scores) {
                    Ok(ev) => Some(ev),
                    Err(e) => {
                        errors.push(ev_field_error(prefix, &e));
                        None
                    }
                }
            } else {
                None
            }
        }
        Some(_) => {
            errors.push(FieldError::new(&field, format!("empathy_vector must be an array of {EV_DIMS} integers")));
            None
        }
        None => {
            errors.push(FieldError::new(&field, "empathy_vector is required"));
            None
        }
    };
    match (narrative, ev) {
        (Some(narrative), Some(empathy_vector)) if errors.is_empty() => Ok(AssessRequest {
            narrative,
            empathy_vector,
        }),
        _ => Err(errors),
    }
}

fn parse_json(body: &[u8]) -> Result<Value, AssessError> {
    serde_json::from_slice(body).map_err(|e| AssessError::Validation(vec![FieldError::new("body", format!("invalid JSON: {e}"))]))
}

/// Parses `{narrative, empathy_vector}`.
pub fn parse_assess_request(body: &[u8]) -> Result<AssessRequest, AssessError> {
    parse_assess(&parse_json(body)?, "").map_err(AssessError::Validation)
}

/// Parses `{base, dimension, values?}`; `values` defaults to 0..=5.
pub fn parse_whatif_request(body: &[u8]) -> Result<WhatIfRequest, AssessError> {
    let v = parse_json(body)?;
    let mut errors = Vec::new();
    let base = match v.get("base") {
        Some(b) => parse_assess(b, "base.").map_err(|e| errors.extend(e)).ok(),
        None => {
            errors.push(FieldError::new("base", "base is required"));
            None
        }
    };
    let dimension = match v.get("dimension").and_then(Value::as_u64) {
        Some(d) if (d as usize) < EV_DIMS => Some(d as usize),
        Some(d) => {
            errors.push(FieldError::new("dimension", format!("dimension {d} is outside 0-{}", EV_DIMS - 1)));
            None
        }
        None => {
            errors.push(FieldError::new("dimension", format!("dimension must be an integer 0-{}", EV_DIMS - 1)));
            None
        }
    };
    let values = match v.get("values") {
        None | Some(Value::Null) => Some((0..=MAX_SCORE).collect()),
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                match item.as_u64().filter(|&x| x <= u64::from(MAX_SCORE)) {
                    Some(x) => out.push(x as u8),
                    None => errors.push(FieldError {
                        field: "values".into(),
                        index: Some(i),
                        dimension: None,
                        message: format!("value {item} is not an integer 0-{MAX_SCORE}"),
                    }),
                }
            }
            if out.is_empty() && items.is_empty() {
                errors.push(FieldError::new("values", "values must not be empty"));
            }
            Some(out)
        }
        Some(_) => {
            errors.push(FieldError::new("values", "values must be an array"));
            None
        }
    };
    match (base, dimension, values) {
        (Some(base), Some(dimension), Some(values)) if errors.is_empty() => Ok(WhatIfRequest { base, dimension, values }),
        _ => Err(AssessError::Validation(errors)),
    }
}

/// Read-only inference over one checkpoint.
#[derive(Clone, Debug)]
pub struct Assessor {
    model: HeaeModel<f32>,
    model_id: String,
}

impl Assessor {
    pub fn new(loaded: LoadedCheckpoint) -> Self {
        Self {
            model: loaded.model,
            model_id: loaded.model_id,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Ok(Self::new(checkpoint::load(path)?))
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn model(&self) -> &HeaeModel<f32> {
        &self.model
    }

    fn respond(&self, logits: &[f32], chunk_count: usize) -> Result<AssessResponse, AssessError> {
        let (probabilities, label) = assess_row(logits)?;
        Ok(AssessResponse {
            probabilities,
            label_index: label.index(),
            label_name: label.name(),
            chunk_count,
            model_id: self.model_id.clone(),
        })
    }

    fn prepare(&self, narrative: &str) -> Result<heae_core::encoder::PreparedText, AssessError> {
        self.model.prepare(narrative).map_err(|e| match e {
            ModelError::Encoder(e) => AssessError::Validation(vec![FieldError::new("narrative", e.to_string())]),
            other => other.into(),
        })
    }

    pub fn assess(&self, req: &AssessRequest) -> Result<AssessResponse, AssessError> {
        let text = self.prepare(&req.narrative)?;
        let x_t = self.model.text_embedding(&text)?;
        let logits = self.model.infer_from_text(&x_t, &[req.empathy_vector])?;
        self.respond(logits.data(), text.chunk_count())
    }

    /// One assessment per distinct value in ascending order, substituting
    /// only `dimension`. The narrative is encoded once.
    pub fn whatif(&self, req: &WhatIfRequest) -> Result<Vec<WhatIfPoint>, AssessError> {
        let mut values = req.values.clone();
        values.sort_unstable();
        values.dedup();
        let text = self.prepare(&req.base.narrative)?;
        let x_t = self.model.text_embedding(&text)?;
        values
            .into_iter()
            .map(|value| {
                let ev = req.base.empathy_vector.with(req.dimension, value).map_err(|e| AssessError::Validation(vec![ev_field_error("base.", &e)]))?;
                let logits = self.model.infer_from_text(&x_t, &[ev])?;
                Ok(WhatIfPoint {
                    value,
                    assessment: self.respond(logits.data(), text.chunk_count())?,
                })
            })
            .collect()
    }
}
