use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamStore, Result, Tape, Var};
use crate::real::Real;

/// Outcome of comparing autodiff gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|auto − numeric| / max(1, |auto|, |numeric|)` seen.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates where the one-sided slopes disagree, i.e. the loss has a
    /// kink there (max-pool ties, ReLU at zero).
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
}

/// Central-difference gradient check of `loss` over every parameter in
/// `params`.
///
/// Large parameters are subsampled to `max_coords` coordinates (chosen by
/// `seed`) so composed models stay tractable.
pub fn gradient_check<F, L>(
    params: &ParamStore<F>,
    loss: L,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Real,
    L: for<'a> Fn(&mut Tape<'a, F>) -> Result<Var>,
{
    let mut grads = Gradients::for_store(params);
    {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l, &mut grads)?;
    }
    let eval = |store: &ParamStore<F>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).data()[0].as_f64())
    };
    let base = eval(params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (id, p) in params.iter() {
        let n = p.value.len();
        let auto = grads.dense(id, n);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = p.value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = F::lit(orig.as_f64() + eps);
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = F::lit(orig.as_f64() - eps);
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;

            let forward = (up - base) / eps;
            let backward = (base - down) / eps;
            if (forward - backward).abs() > 1e-2 * forward.abs().max(backward.abs()).max(1.0) {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = auto[k].as_f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((p.name.clone(), k));
            }
        }
    }
    Ok(report)
}
