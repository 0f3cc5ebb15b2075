//! Classifier head: two gated blocks narrowing 896 → 448 → 224, then a final
//! linear map to the 7 severity logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::empathy::SeverityLabel;
use crate::encoder::{bind_norm, init_norm, LN_EPS};
use crate::fusion::FUSED_DIM;
use crate::model::init_linear;
use crate::real::Real;
use crate::tensor::{self, Activation, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const HIDDEN_DIMS: [usize; 2] = [448, 224];
pub const NUM_CLASSES: usize = SeverityLabel::COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `GELU(LN((x·Wa + ba) ⊙ GELU(x·Wb + bb)))`
    GluGelu,
    /// Same with a sigmoid gate.
    GluSigmoid,
    PlainGelu,
    PlainRelu,
    PlainSilu,
    /// Single linear map 896 → 7.
    Shallow,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::Shallow,
        BlockKind::PlainRelu,
        BlockKind::PlainSilu,
        BlockKind::PlainGelu,
        BlockKind::GluSigmoid,
        BlockKind::GluGelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::GluGelu => "glu_gelu",
            BlockKind::GluSigmoid => "glu_sigmoid",
            BlockKind::PlainGelu => "plain_gelu",
            BlockKind::PlainRelu => "plain_relu",
            BlockKind::PlainSilu => "plain_silu",
            BlockKind::Shallow => "shallow",
        }
    }

    fn gate(self) -> Option<Activation> {
        match self {
            BlockKind::GluGelu => Some(Activation::Gelu),
            BlockKind::GluSigmoid => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    fn activation(self) -> Activation {
        match self {
            BlockKind::PlainRelu => Activation::Relu,
            BlockKind::PlainSilu => Activation::Silu,
            _ => Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub block: BlockKind,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { block: BlockKind::GluGelu }
    }
}

impl HeadConfig {
    pub fn new(block: BlockKind) -> Self {
        Self { block }
    }

    /// Layer widths from input to logits.
    pub fn dims(&self) -> Vec<usize> {
        match self.block {
            BlockKind::Shallow => vec![FUSED_DIM, NUM_CLASSES],
            _ => vec![FUSED_DIM, HIDDEN_DIMS[0], HIDDEN_DIMS[1], NUM_CLASSES],
        }
    }
}

/// Parameters of one hidden block.
#[derive(Clone, Copy, Debug)]
pub struct GluBlockParams {
    pub value: (ParamId, ParamId),
    pub gate: Option<(ParamId, ParamId)>,
    pub norm: (ParamId, ParamId),
}

/// One hidden block of kind `kind`.
pub fn glu_block<F: Real>(tape: &mut Tape<'_, F>, x: Var, p: &GluBlockParams, kind: BlockKind) -> tensor::Result<Var> {
    let (wa, ba) = (tape.param(p.value.0), tape.param(p.value.1));
    let value = tape.linear(x, wa, Some(ba))?;
    let y = match (kind.gate(), p.gate) {
        (Some(gate_act), Some((wb, bb))) => {
            let (wb, bb) = (tape.param(wb), tape.param(bb));
            let z = tape.linear(x, wb, Some(bb))?;
            let gate = tape.activation(z, gate_act)?;
            tape.mul(value, gate)?
        }
        _ => value,
    };
    let (g, b) = (tape.param(p.norm.0), tape.param(p.norm.1));
    let normed = tape.layer_norm(y, g, b, F::lit(LN_EPS))?;
    tape.activation(normed, kind.activation())
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    config: HeadConfig,
    blocks: Vec<GluBlockParams>,
    out: (ParamId, ParamId),
}

impl ClassifierHead {
    pub fn register<F: Real>(store: &mut ParamStore<F>, config: &HeadConfig, rng: &mut impl Rng) -> tensor::Result<Self> {
        let dims = config.dims();
        let gated = config.block.gate().is_some();
        let mut blocks = Vec::new();
        for (i, w) in dims[..dims.len() - 1].windows(2).enumerate() {
            let prefix = format!("head.block{}", i + 1);
            let value = init_linear(store, &format!("{prefix}.value"), w[0], w[1], rng)?;
            let gate = if gated {
                Some(init_linear(store, &format!("{prefix}.gate"), w[0], w[1], rng)?)
            } else {
                None
            };
            let norm = init_norm(store, &format!("{prefix}.norm"), w[1])?;
            blocks.push(GluBlockParams { value, gate, norm });
        }
        let n = dims.len();
        let out = init_linear(store, "head.out", dims[n - 2], dims[n - 1], rng)?;
        Ok(Self {
            config: config.clone(),
            blocks,
            out,
        })
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, config: &HeadConfig) -> tensor::Result<Self> {
        let pair = |name: &str| -> tensor::Result<(ParamId, ParamId)> {
            Ok((store.id(&format!("{name}.w"))?, store.id(&format!("{name}.b"))?))
        };
        let gated = config.block.gate().is_some();
        let blocks = (1..config.dims().len() - 1)
            .map(|i| {
                let prefix = format!("head.block{i}");
                Ok(GluBlockParams {
                    value: pair(&format!("{prefix}.value"))?,
                    gate: if gated { Some(pair(&format!("{prefix}.gate"))?) } else { None },
                    norm: bind_norm(store, &format!("{prefix}.norm"))?,
                })
            })
            .collect::<tensor::Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            blocks,
            out: pair("head.out")?,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Logits `[b×7]` for fused inputs `[b×896]`.
    pub fn classify<F: Real>(&self, tape: &mut Tape<'_, F>, fused: Var) -> tensor::Result<Var> {
        let shape = tape.shape(fused);
        if shape.len() != 2 || shape[1] != FUSED_DIM {
            return Err(TensorError::ShapeMismatch {
                op: "classify",
                lhs: shape.to_vec(),
                rhs: vec![FUSED_DIM],
            });
        }
        let mut h = fused;
        for block in &self.blocks {
            h = glu_block(tape, h, block, self.config.block)?;
        }
        let (w, b) = (tape.param(self.out.0), tape.param(self.out.1));
        tape.linear(h, w, Some(b))
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<F: Real>(logits: &[F]) -> tensor::Result<usize> {
    if logits.is_empty() {
        return Err(TensorError::EmptyInput { op: "argmax" });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "predict" });
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn predict<F: Real>(logits: &[F]) -> tensor::Result<SeverityLabel> {
    if logits.len() != NUM_CLASSES {
        return Err(TensorError::InvalidShape {
            shape: vec![NUM_CLASSES],
            len: logits.len(),
        });
    }
    Ok(SeverityLabel::from_index(argmax(logits)?).expect("index below class count"))
}

/// Row-wise predictions for `[b×7]` logits.
pub fn predict_batch<F: Real>(logits: &Tensor<F>) -> tensor::Result<Vec<SeverityLabel>> {
    (0..logits.rows()).map(|i| predict(logits.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_dim_toy_pre_norm_value() {
        let mut tape = Tape::<f64>::detached();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let one = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let value = tape.linear(x, one, None).unwrap();
        let z = tape.linear(x, one, None).unwrap();
        let gate = tape.activation(z, Activation::Gelu).unwrap();
        let y = tape.mul(value, gate).unwrap();
        assert!((tape.value(y).data()[0] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn closed_gate_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::register(&mut store, &HeadConfig::default(), &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            if p.name.starts_with("head.block1.gate") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[1, FUSED_DIM], 0.3));
        let h = glu_block(&mut tape, x, &head.blocks[0], BlockKind::GluGelu).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        for kind in BlockKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::<f64>::new();
            let head = ClassifierHead::register(&mut store, &HeadConfig::new(kind), &mut rng).unwrap();
            for (_, p) in store.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let mut tape = Tape::new(&store);
            let x = tape.constant(Tensor::full(&[2, FUSED_DIM], 1.5));
            let l = head.classify(&mut tape, x).unwrap();
            assert!(tape.value(l).data().iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn batch_of_eight_gives_eight_by_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in BlockKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let head = ClassifierHead::register(&mut store, &HeadConfig::new(kind), &mut rng).unwrap();
            let data = (0..8 * FUSED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new(&store);
            let x = tape.constant(Tensor::new(vec![8, FUSED_DIM], data).unwrap());
            let l = head.classify(&mut tape, x).unwrap();
            assert_eq!(tape.shape(l), &[8, 7]);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let head = ClassifierHead::register(&mut store, &HeadConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 768]));
        assert!(matches!(head.classify(&mut tape, x), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn bind_matches_register() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::register(&mut store, &HeadConfig::default(), &mut rng).unwrap();
        let bound = ClassifierHead::bind(&store, &HeadConfig::default()).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::full(&[1, FUSED_DIM], 0.1));
        let a = head.classify(&mut tape, x).unwrap();
        let b = bound.classify(&mut tape, x).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.0f32; 7]).unwrap().index(), 0);
        assert_eq!(predict(&[-1.0f32, -1.0, 3.0, -1.0, -1.0, -1.0, -1.0]).unwrap().index(), 2);
        assert!(matches!(
            predict(&[0.0, f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(predict(&[0.0f32; 3]).is_err());
    }

    proptest! {
        #[test]
        fn predict_is_shift_invariant(
            logits in proptest::collection::vec(-50i32..50, 7),
            c in -1000i32..1000,
        ) {
            // Integer-valued logits keep the shift exact.
            let a: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
            let b: Vec<f64> = a.iter().map(|&v| v + f64::from(c)).collect();
            prop_assert_eq!(predict(&a).unwrap(), predict(&b).unwrap());
        }
    }
}
