//! Text/EV fusion.
//!
//! The main mechanism is gated cross-modal enhancement: each modality is
//! additively enhanced by a linear map of the other, modulated elementwise by
//! a sigmoid gate computed from both, scaled by a fixed per-direction factor,
//! and layer-normalized:
//!
//! ```text
//! x_t' = LN(x_t + g_t ⊙ (x_e·W_e→t) · α_e→t)
//! x_e' = LN(x_e + g_e ⊙ (x_t·W_t→e) · α_t→e)
//! ```
//!
//! The symmetric variant uses one factor for both directions. Plain
//! concatenation and single-token multi-head cross-attention are kept as
//! baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{bind_norm, init_norm, LN_EPS};
use crate::model::{init_linear, init_weight};
use crate::real::Real;
use crate::tensor::{self, Activation, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const TEXT_DIM: usize = crate::encoder::TEXT_DIM;
pub const EV_EMBED_DIM: usize = 128;
pub const FUSED_DIM: usize = TEXT_DIM + EV_EMBED_DIM;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Scme,
    Acme,
    Xattn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub alpha_e_to_t: f64,
    pub alpha_t_to_e: f64,
    #[serde(default = "default_symmetric_alpha")]
    pub symmetric_alpha: f64,
    #[serde(default = "default_heads")]
    pub xattn_heads: usize,
    /// Replace the fixed factors by `sigmoid(θ)` with a trainable θ per
    /// direction, initialized at the configured factors.
    #[serde(default)]
    pub learnable_alpha: bool,
}

fn default_symmetric_alpha() -> f64 {
    0.15
}

fn default_heads() -> usize {
    4
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Acme,
            alpha_e_to_t: 0.85,
            alpha_t_to_e: 0.30,
            symmetric_alpha: default_symmetric_alpha(),
            xattn_heads: default_heads(),
            learnable_alpha: false,
        }
    }
}

impl FusionConfig {
    pub fn acme(alpha_e_to_t: f64, alpha_t_to_e: f64) -> Self {
        Self {
            alpha_e_to_t,
            alpha_t_to_e,
            ..Default::default()
        }
    }

    pub fn scme(alpha: f64) -> Self {
        Self {
            mode: FusionMode::Scme,
            symmetric_alpha: alpha,
            ..Default::default()
        }
    }

    pub fn with_mode(mode: FusionMode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }

    /// Factors actually applied, `(e→t, t→e)`.
    pub fn effective_alphas(&self) -> (f64, f64) {
        match self.mode {
            FusionMode::Scme => (self.symmetric_alpha, self.symmetric_alpha),
            _ => (self.alpha_e_to_t, self.alpha_t_to_e),
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        for (name, a) in [
            ("alpha_e_to_t", self.alpha_e_to_t),
            ("alpha_t_to_e", self.alpha_t_to_e),
            ("symmetric_alpha", self.symmetric_alpha),
        ] {
            if !(0.0..=1.0).contains(&a) {
                return Err(FusionError::Config(format!("{name} = {a} is outside [0, 1]")));
            }
        }
        if self.mode == FusionMode::Xattn && (self.xattn_heads == 0 || EV_EMBED_DIM % self.xattn_heads != 0) {
            return Err(FusionError::Config(format!(
                "xattn_heads = {} does not divide {EV_EMBED_DIM}",
                self.xattn_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn apply<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> tensor::Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }

    fn register<F: Real>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> tensor::Result<Self> {
        let (w, b) = init_linear(store, name, din, dout, rng)?;
        Ok(Self { w, b: Some(b) })
    }

    fn register_no_bias<F: Real>(store: &mut ParamStore<F>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> tensor::Result<Self> {
        Ok(Self {
            w: init_weight(store, &format!("{name}.w"), din, dout, rng)?,
            b: None,
        })
    }

    fn bind<F: Real>(store: &ParamStore<F>, name: &str, bias: bool) -> tensor::Result<Self> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: if bias { Some(store.id(&format!("{name}.b"))?) } else { None },
        })
    }
}

#[derive(Clone, Debug)]
struct Enhance {
    gate_t: Linear,
    gate_e: Linear,
    e_to_t: Linear,
    t_to_e: Linear,
    norm_t: (ParamId, ParamId),
    norm_e: (ParamId, ParamId),
    learned: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct AttnDir {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct CrossAttn {
    text_in: Linear,
    text_queries: AttnDir,
    ev_queries: AttnDir,
    back: Linear,
    norm_t: (ParamId, ParamId),
    norm_e: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
enum Params {
    Concat,
    Enhance(Enhance),
    CrossAttn(CrossAttn),
}

/// Fusion stage bound to its parameters.
#[derive(Clone, Debug)]
pub struct Fusion {
    config: FusionConfig,
    params: Params,
}

fn logit(a: f64) -> f64 {
    let a = a.clamp(1e-3, 1.0 - 1e-3);
    (a / (1.0 - a)).ln()
}

const ATTN_DIRS: [&str; 2] = ["text_queries", "ev_queries"];

impl Fusion {
    pub fn register<F: Real>(store: &mut ParamStore<F>, config: &FusionConfig, rng: &mut impl Rng) -> Result<Self, FusionError> {
        config.validate()?;
        let params = match config.mode {
            FusionMode::Concat => Params::Concat,
            FusionMode::Acme | FusionMode::Scme => {
                let learned = if config.learnable_alpha {
                    let (a, b) = config.effective_alphas();
                    let pa = store.insert("fusion.alpha_e_to_t.raw", Tensor::scalar(F::lit(logit(a))), false)?;
                    let pb = store.insert("fusion.alpha_t_to_e.raw", Tensor::scalar(F::lit(logit(b))), false)?;
                    Some((pa, pb))
                } else {
                    None
                };
                Params::Enhance(Enhance {
                    gate_t: Linear::register(store, "fusion.gate_t", FUSED_DIM, TEXT_DIM, rng)?,
                    gate_e: Linear::register(store, "fusion.gate_e", FUSED_DIM, EV_EMBED_DIM, rng)?,
                    e_to_t: Linear::register_no_bias(store, "fusion.e_to_t", EV_EMBED_DIM, TEXT_DIM, rng)?,
                    t_to_e: Linear::register_no_bias(store, "fusion.t_to_e", TEXT_DIM, EV_EMBED_DIM, rng)?,
                    norm_t: init_norm(store, "fusion.norm_t", TEXT_DIM)?,
                    norm_e: init_norm(store, "fusion.norm_e", EV_EMBED_DIM)?,
                    learned,
                })
            }
            FusionMode::Xattn => {
                let d = EV_EMBED_DIM;
                let mut dir = |store: &mut ParamStore<F>, name: &str| -> tensor::Result<AttnDir> {
                    let p = format!("fusion.xattn.{name}");
                    Ok(AttnDir {
                        q: Linear::register(store, &format!("{p}.q"), d, d, rng)?,
                        k: Linear::register(store, &format!("{p}.k"), d, d, rng)?,
                        v: Linear::register(store, &format!("{p}.v"), d, d, rng)?,
                        o: Linear::register(store, &format!("{p}.o"), d, d, rng)?,
                    })
                };
                let text_queries = dir(store, ATTN_DIRS[0])?;
                let ev_queries = dir(store, ATTN_DIRS[1])?;
                Params::CrossAttn(CrossAttn {
                    text_in: Linear::register(store, "fusion.xattn.text_in", TEXT_DIM, d, rng)?,
                    text_queries,
                    ev_queries,
                    back: Linear::register(store, "fusion.xattn.back", d, TEXT_DIM, rng)?,
                    norm_t: init_norm(store, "fusion.norm_t", TEXT_DIM)?,
                    norm_e: init_norm(store, "fusion.norm_e", EV_EMBED_DIM)?,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, config: &FusionConfig) -> Result<Self, FusionError> {
        config.validate()?;
        let params = match config.mode {
            FusionMode::Concat => Params::Concat,
            FusionMode::Acme | FusionMode::Scme => Params::Enhance(Enhance {
                gate_t: Linear::bind(store, "fusion.gate_t", true)?,
                gate_e: Linear::bind(store, "fusion.gate_e", true)?,
                e_to_t: Linear::bind(store, "fusion.e_to_t", false)?,
                t_to_e: Linear::bind(store, "fusion.t_to_e", false)?,
                norm_t: bind_norm(store, "fusion.norm_t")?,
                norm_e: bind_norm(store, "fusion.norm_e")?,
                learned: if config.learnable_alpha {
                    Some((store.id("fusion.alpha_e_to_t.raw")?, store.id("fusion.alpha_t_to_e.raw")?))
                } else {
                    None
                },
            }),
            FusionMode::Xattn => {
                let dir = |name: &str| -> tensor::Result<AttnDir> {
                    let p = format!("fusion.xattn.{name}");
                    Ok(AttnDir {
                        q: Linear::bind(store, &format!("{p}.q"), true)?,
                        k: Linear::bind(store, &format!("{p}.k"), true)?,
                        v: Linear::bind(store, &format!("{p}.v"), true)?,
                        o: Linear::bind(store, &format!("{p}.o"), true)?,
                    })
                };
                Params::CrossAttn(CrossAttn {
                    text_in: Linear::bind(store, "fusion.xattn.text_in", true)?,
                    text_queries: dir(ATTN_DIRS[0])?,
                    ev_queries: dir(ATTN_DIRS[1])?,
                    back: Linear::bind(store, "fusion.xattn.back", true)?,
                    norm_t: bind_norm(store, "fusion.norm_t")?,
                    norm_e: bind_norm(store, "fusion.norm_e")?,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Elementwise gates `(g_t[b×768], g_e[b×128])` from `[x_t; x_e]`.
    /// Only defined for the enhancement modes.
    pub fn compute_gates<F: Real>(&self, tape: &mut Tape<'_, F>, x_t: Var, x_e: Var) -> Result<(Var, Var), FusionError> {
        let Params::Enhance(p) = &self.params else {
            return Err(FusionError::Config(format!("{:?} fusion has no gates", self.config.mode)));
        };
        Ok(gates(tape, p, x_t, x_e)?)
    }

    /// Enhanced pair `(x_t'[b×768], x_e'[b×128])`; for concat mode the inputs
    /// are returned unchanged.
    pub fn fuse_pair<F: Real>(&self, tape: &mut Tape<'_, F>, x_t: Var, x_e: Var) -> Result<(Var, Var), FusionError> {
        check_inputs(tape, x_t, x_e)?;
        Ok(match &self.params {
            Params::Concat => (x_t, x_e),
            Params::Enhance(p) => self.enhance(tape, p, x_t, x_e)?,
            Params::CrossAttn(p) => cross_attend(tape, p, self.config.xattn_heads, x_t, x_e)?,
        })
    }

    /// Fused representation `[b×896]`, text first.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x_t: Var, x_e: Var) -> Result<Var, FusionError> {
        let (t, e) = self.fuse_pair(tape, x_t, x_e)?;
        Ok(concat_fuse(tape, t, e)?)
    }

    fn enhance<F: Real>(&self, tape: &mut Tape<'_, F>, p: &Enhance, x_t: Var, x_e: Var) -> tensor::Result<(Var, Var)> {
        let (g_t, g_e) = gates(tape, p, x_t, x_e)?;
        let (a_et, a_te) = self.config.effective_alphas();

        let cross_t = p.e_to_t.apply(tape, x_e)?;
        let gated_t = tape.mul(g_t, cross_t)?;
        let cross_e = p.t_to_e.apply(tape, x_t)?;
        let gated_e = tape.mul(g_e, cross_e)?;
        let (scaled_t, scaled_e) = match p.learned {
            None => (tape.scale(gated_t, F::lit(a_et))?, tape.scale(gated_e, F::lit(a_te))?),
            Some((raw_et, raw_te)) => {
                let (r1, r2) = (tape.param(raw_et), tape.param(raw_te));
                let s1 = tape.activation(r1, Activation::Sigmoid)?;
                let s2 = tape.activation(r2, Activation::Sigmoid)?;
                (tape.scale_by(gated_t, s1)?, tape.scale_by(gated_e, s2)?)
            }
        };
        let t = tape.add(x_t, scaled_t)?;
        let e = tape.add(x_e, scaled_e)?;
        Ok((norm(tape, p.norm_t, t)?, norm(tape, p.norm_e, e)?))
    }
}

fn check_inputs<F: Real>(tape: &Tape<'_, F>, x_t: Var, x_e: Var) -> Result<(), FusionError> {
    let (st, se) = (tape.shape(x_t), tape.shape(x_e));
    if st.len() != 2 || se.len() != 2 || st[1] != TEXT_DIM || se[1] != EV_EMBED_DIM || st[0] != se[0] {
        return Err(TensorError::ShapeMismatch {
            op: "fusion",
            lhs: st.to_vec(),
            rhs: se.to_vec(),
        }
        .into());
    }
    Ok(())
}

fn norm<F: Real>(tape: &mut Tape<'_, F>, (g, b): (ParamId, ParamId), x: Var) -> tensor::Result<Var> {
    let (g, b) = (tape.param(g), tape.param(b));
    tape.layer_norm(x, g, b, F::lit(LN_EPS))
}

fn gates<F: Real>(tape: &mut Tape<'_, F>, p: &Enhance, x_t: Var, x_e: Var) -> tensor::Result<(Var, Var)> {
    let both = tape.concat(&[x_t, x_e])?;
    let zt = p.gate_t.apply(tape, both)?;
    let ze = p.gate_e.apply(tape, both)?;
    Ok((tape.activation(zt, Activation::Sigmoid)?, tape.activation(ze, Activation::Sigmoid)?))
}

/// `[x_t; x_e]` along the feature axis.
pub fn concat_fuse<F: Real>(tape: &mut Tape<'_, F>, x_t: Var, x_e: Var) -> tensor::Result<Var> {
    tape.concat(&[x_t, x_e])
}

/// Multi-head attention of `query_src` over a single key/value token
/// `kv_src`, followed by the output projection.
fn single_token_attention<F: Real>(tape: &mut Tape<'_, F>, dir: &AttnDir, heads: usize, query_src: Var, kv_src: Var) -> tensor::Result<Var> {
    let b = tape.shape(query_src)[0];
    let dh = EV_EMBED_DIM / heads;
    let q = dir.q.apply(tape, query_src)?;
    let k = dir.k.apply(tape, kv_src)?;
    let v = dir.v.apply(tape, kv_src)?;
    let qk = tape.mul(q, k)?;
    let qk = tape.reshape(qk, vec![b, heads, dh])?;
    let scores = tape.sum_last(qk)?;
    let scores = tape.scale(scores, F::one() / F::lit(dh as f64).sqrt())?;
    // one key per head: the softmax axis has length 1
    let weights = tape.softmax(scores)?;
    let v = tape.reshape(v, vec![b, heads, dh])?;
    let attended = tape.mul_bcast_last(v, weights)?;
    let attended = tape.reshape(attended, vec![b, EV_EMBED_DIM])?;
    dir.o.apply(tape, attended)
}

fn cross_attend<F: Real>(tape: &mut Tape<'_, F>, p: &CrossAttn, heads: usize, x_t: Var, x_e: Var) -> tensor::Result<(Var, Var)> {
    let text = p.text_in.apply(tape, x_t)?;
    let from_ev = single_token_attention(tape, &p.text_queries, heads, text, x_e)?;
    let back = p.back.apply(tape, from_ev)?;
    let t = tape.add(x_t, back)?;
    let from_text = single_token_attention(tape, &p.ev_queries, heads, x_e, text)?;
    let e = tape.add(x_e, from_text)?;
    Ok((norm(tape, p.norm_t, t)?, norm(tape, p.norm_e, e)?))
}
