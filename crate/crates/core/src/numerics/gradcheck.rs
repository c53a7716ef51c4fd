//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient size.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error per parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    let v = g.value(l).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss {v}")));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of `loss` against central differences on
/// up to `samples_per_param` random coordinates of every parameter.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    loss: F,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new();
        let l = loss(store, &mut g)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v}")));
        }
        g.backward(l)?;
        g.accumulate_into(&mut analytic)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids() {
        let n = store.value(id).len();
        let picks: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let grad = analytic.grad(id).expect("zeroed above").data().to_vec();
        let mut param_worst = 0.0f64;
        for i in picks {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe, &loss)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe, &loss)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let e = relative_error(grad[i], numeric);
            param_worst = param_worst.max(e);
            checked += 1;
        }
        worst = worst.max(param_worst);
        per_param.push((store.name(id).to_string(), param_worst));
    }
    Ok(GradCheckReport { max_rel_error: worst, per_param, coordinates_checked: checked })
}
