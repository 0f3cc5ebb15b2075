//! Full model assembly: text encoder, EV projection, fusion and head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::empathy::{ev_batch, EmpathyVector, EvProjection, ProjectionConfig, SeverityLabel, EV_DIMS};
use crate::encoder::{EncoderConfig, EncoderError, PreparedText, TextEncoder, TEXT_DIM};
use crate::fusion::{Fusion, FusionConfig, FusionError, EV_EMBED_DIM};
use crate::head::{argmax, ClassifierHead, HeadConfig, NUM_CLASSES};
use crate::real::Real;
use crate::tensor::{self, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// `w[din×dout]` drawn from `U(±1/√din)`, registered with weight decay.
pub fn init_weight<F: Real>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> tensor::Result<ParamId> {
    let bound = 1.0 / (din as f64).sqrt();
    let data = (0..din * dout).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    store.insert(name, Tensor::new(vec![din, dout], data)?, true)
}

/// `{prefix}.w[din×dout]` and `{prefix}.b[dout]`, both from `U(±1/√din)`.
pub fn init_linear<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut impl Rng,
) -> tensor::Result<(ParamId, ParamId)> {
    let w = init_weight(store, &format!("{prefix}.w"), din, dout, rng)?;
    let bound = 1.0 / (din as f64).sqrt();
    let data = (0..dout).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    let b = store.insert(format!("{prefix}.b"), Tensor::new(vec![dout], data)?, false)?;
    Ok((w, b))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    /// Feed an all-zero EV regardless of input (text-only baseline).
    #[serde(default)]
    pub text_only: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        if self.encoder.embed_dim != TEXT_DIM {
            return Err(ModelError::Config(format!("encoder.embed_dim must be {TEXT_DIM}")));
        }
        let dims = &self.projection.dims;
        if dims.len() < 2 || dims[0] != EV_DIMS || self.projection.output_dim() != EV_EMBED_DIM {
            return Err(ModelError::Config(format!(
                "projection.dims must run from {EV_DIMS} to {EV_EMBED_DIM}, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(ModelError::Config("projection.dims contains a zero width".into()));
        }
        Ok(())
    }
}

/// Assembled model with its parameters.
#[derive(Clone, Debug)]
pub struct HeaeModel<F: Real> {
    config: ModelConfig,
    params: ParamStore<F>,
    encoder: TextEncoder,
    projection: EvProjection,
    fusion: Fusion,
    head: ClassifierHead,
}

impl<F: Real> HeaeModel<F> {
    /// Freshly initialized model; `seed` fixes every initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = TextEncoder::register(&mut params, &config.encoder, &mut rng)?;
        let projection = EvProjection::register(&mut params, &config.projection, &mut rng)?;
        let fusion = Fusion::register(&mut params, &config.fusion, &mut rng)?;
        let head = ClassifierHead::register(&mut params, &config.head, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            projection,
            fusion,
            head,
        })
    }

    /// Binds `params` to the components described by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let encoder = TextEncoder::bind(&params, &config.encoder)?;
        let projection = EvProjection::bind(&params, &config.projection)?;
        let fusion = Fusion::bind(&params, &config.fusion)?;
        let head = ClassifierHead::bind(&params, &config.head)?;
        let model = Self {
            config,
            params,
            encoder,
            projection,
            fusion,
            head,
        };
        // Shape check by running a zero input through the text-free path.
        let mut tape = Tape::new(&model.params);
        let x_t = tape.constant(Tensor::zeros(&[1, TEXT_DIM]));
        model.logits_from_text(&mut tape, x_t, &[EmpathyVector::ZERO])?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn prepare(&self, text: &str) -> Result<PreparedText> {
        Ok(self.encoder.prepare(text)?)
    }

    pub fn cast<G: Real>(&self) -> HeaeModel<G> {
        HeaeModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            projection: self.projection.clone(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
        }
    }

    fn ev_input(&self, tape: &mut Tape<'_, F>, evs: &[EmpathyVector]) -> Var {
        if self.config.text_only {
            tape.constant(Tensor::zeros(&[evs.len(), EV_DIMS]))
        } else {
            tape.constant(ev_batch(evs))
        }
    }

    /// Logits `[b×7]` given already-encoded text `x_t[b×768]`.
    pub fn logits_from_text(&self, tape: &mut Tape<'_, F>, x_t: Var, evs: &[EmpathyVector]) -> Result<Var> {
        let rows = tape.shape(x_t)[0];
        if rows != evs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "model",
                lhs: vec![rows],
                rhs: vec![evs.len()],
            }
            .into());
        }
        let ev = self.ev_input(tape, evs);
        let x_e = self.projection.forward(tape, ev)?;
        let fused = self.fusion.forward(tape, x_t, x_e)?;
        Ok(self.head.classify(tape, fused)?)
    }

    /// Text embeddings `[b×768]`.
    pub fn encode_text(&self, tape: &mut Tape<'_, F>, texts: &[&PreparedText]) -> Result<Var> {
        Ok(self.encoder.forward(tape, texts)?)
    }

    /// Logits `[b×7]` for a batch.
    pub fn logits(&self, tape: &mut Tape<'_, F>, texts: &[&PreparedText], evs: &[EmpathyVector]) -> Result<Var> {
        if texts.len() != evs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "model",
                lhs: vec![texts.len()],
                rhs: vec![evs.len()],
            }
            .into());
        }
        if texts.is_empty() {
            return Err(TensorError::EmptyInput { op: "model" }.into());
        }
        let x_t = self.encode_text(tape, texts)?;
        self.logits_from_text(tape, x_t, evs)
    }

    /// Mean cross-entropy over a batch and the softmax probabilities.
    pub fn loss(
        &self,
        tape: &mut Tape<'_, F>,
        texts: &[&PreparedText],
        evs: &[EmpathyVector],
        labels: &[SeverityLabel],
    ) -> Result<(Var, Tensor<F>)> {
        let logits = self.logits(tape, texts, evs)?;
        let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        Ok(tape.softmax_cross_entropy(logits, &targets)?)
    }

    /// Inference-only logits as a `[b×7]` tensor.
    pub fn infer(&self, texts: &[&PreparedText], evs: &[EmpathyVector]) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.params);
        let l = self.logits(&mut tape, texts, evs)?;
        Ok(tape.value(l).clone())
    }

    /// Document embedding `[1×768]` of one text, reusable with
    /// [`HeaeModel::infer_from_text`].
    pub fn text_embedding(&self, text: &PreparedText) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.params);
        let x = self.encode_text(&mut tape, &[text])?;
        Ok(tape.value(x).clone())
    }

    /// Logits `[b×7]` from cached embeddings `[b×768]`.
    pub fn infer_from_text(&self, x_t: &Tensor<F>, evs: &[EmpathyVector]) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(x_t.clone());
        let l = self.logits_from_text(&mut tape, x, evs)?;
        Ok(tape.value(l).clone())
    }
}

/// Softmax evaluated in f64, max-subtracted.
pub fn probabilities<F: Real>(logits: &[F]) -> Vec<f64> {
    let m = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Probabilities and predicted label for one logit row.
pub fn assess_row<F: Real>(logits: &[F]) -> Result<(Vec<f64>, SeverityLabel)> {
    if logits.len() != NUM_CLASSES {
        return Err(TensorError::InvalidShape {
            shape: vec![NUM_CLASSES],
            len: logits.len(),
        }
        .into());
    }
    let label = SeverityLabel::from_index(argmax(logits)?).expect("index below class count");
    Ok((probabilities(logits), label))
}
