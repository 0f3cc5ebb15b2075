use serde::{Deserialize, Serialize};

use crate::par;
use crate::real::Real;
use crate::tensor::{GradBuf, Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay, applied before the moment update.
///
/// Weight decay only touches parameters registered with `decay = true`.
/// Parameters without a gradient this step are left alone. Sparse row
/// gradients update only their rows' moments and values.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

const CHUNK: usize = 1 << 14;

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let m: Vec<Vec<F>> = store.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = F::lit(c.lr);
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let eps = F::lit(c.eps);
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2_sqrt = F::lit((1.0 - c.beta2.powi(t)).sqrt());
        let decay_factor = F::lit(1.0 - c.lr * c.weight_decay);
        let one = F::one();

        let update = move |p: &mut [F], m: &mut [F], v: &mut [F], g: &[F], decay: bool| {
            for i in 0..p.len() {
                if decay {
                    p[i] *= decay_factor;
                }
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] -= lr * (m[i] / bc1) / denom;
            }
        };

        for (id, g) in grads.iter() {
            let param = store.get_mut(id);
            let decay = param.decay && c.weight_decay != 0.0;
            let p = param.value.data_mut();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            match g {
                GradBuf::Dense(g) => {
                    par::for_each_zip3_mut(p, m, v, CHUNK, |k, p, m, v| {
                        let off = k * CHUNK;
                        update(p, m, v, &g[off..off + p.len()], decay)
                    });
                }
                GradBuf::Rows { width, rows } => {
                    for (&r, g) in rows {
                        let s = r * width..(r + 1) * width;
                        update(&mut p[s.clone()], &mut m[s.clone()], &mut v[s], g, decay);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn quadratic_grads(store: &ParamStore<f64>) -> Gradients<f64> {
        // loss = x², dloss/dx = 2x
        let mut tape = Tape::new(store);
        let x = tape.param_named("x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut g = Gradients::for_store(store);
        tape.backward(loss, &mut g).unwrap();
        g
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0), true).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);

        // Hand recurrence: decay, moments, bias correction, step.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * x;
            x *= 1.0 - 0.1 * 0.01;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let grads = quadratic_grads(&store);
            opt.step(&mut store, &grads);
            let got = store.value(store.id("x").unwrap()).data()[0];
            assert!((got - x).abs() < 1e-12, "step {t}: {got} vs {x}");
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(0.7), true).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..5 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
        }
        assert_eq!(store.value(store.id("x").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn sparse_rows_update_only_touched_rows() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("t", Tensor::full(&[3, 2], 1.0), false).unwrap();
        let mut dense_store = store.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut dense_opt = AdamW::new(AdamWConfig::default(), &dense_store);

        let mut sparse = Gradients::for_store(&store);
        let mut rows = GradBuf::Rows {
            width: 2,
            rows: Default::default(),
        };
        rows.add_row(1, 1.0, &[0.5, -0.5]);
        sparse.accumulate(id, &rows);
        let mut dense = Gradients::for_store(&store);
        dense.accumulate(id, &GradBuf::Dense(rows.to_dense(6)));

        opt.step(&mut store, &sparse);
        dense_opt.step(&mut dense_store, &dense);
        let s = store.value(id).data();
        assert_eq!(&s[0..2], &[1.0, 1.0]);
        assert_eq!(&s[4..6], &[1.0, 1.0]);
        // On a first step the sparse and dense updates coincide.
        assert_eq!(s, dense_store.value(id).data());
    }

    #[test]
    fn decay_flag_is_respected() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(1.0), true).unwrap();
        let b = store.insert("b", Tensor::scalar(1.0), false).unwrap();
        let mut g = Gradients::for_store(&store);
        g.accumulate(a, &GradBuf::Dense(vec![0.0]));
        g.accumulate(b, &GradBuf::Dense(vec![0.0]));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.5,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &g);
        assert_eq!(store.value(a).data()[0], 1.0 - 0.5 * 0.01);
        assert_eq!(store.value(b).data()[0], 1.0);
    }
}
