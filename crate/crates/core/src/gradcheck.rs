//! Finite-difference verification of reverse-mode gradients.
//!
//! Probing runs in f64. For each parameter a sample of elements is
//! perturbed by ±h and the central difference is compared against the
//! analytic gradient with a relative tolerance and an absolute floor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{GradMap, ParamStore};

pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Checks d(loss)/d(param) for every non-frozen parameter of `store`.
///
/// `eval` must rebuild the (deterministic) computation from the current
/// store contents and return the scalar loss and its analytic gradients.
/// At most `samples_per_param` elements are probed per parameter.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    eval: &mut dyn FnMut(&ParamStore<f64>) -> (f64, GradMap<f64>),
    h: f64,
    tol: f64,
    samples_per_param: usize,
    seed: u64,
) -> GradCheckReport {
    let (_, analytic) = eval(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::new();
    for pid in 0..store.len() {
        if store.get(pid).frozen {
            continue;
        }
        let name = store.get(pid).name.clone();
        let n = store.get(pid).values.len();
        let idxs: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            (0..samples_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut max_rel = 0.0f64;
        for &i in &idxs {
            let orig = store.get(pid).values[i];
            store.get_mut(pid).values[i] = orig + h;
            let (lp, _) = eval(store);
            store.get_mut(pid).values[i] = orig - h;
            let (lm, _) = eval(store);
            store.get_mut(pid).values[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                panic!("non-finite loss while probing parameter {name}[{i}]");
            }
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.get(pid).map_or(0.0, |g| g[i]);
            let diff = (fd - an).abs();
            if diff > ABS_FLOOR {
                let rel = diff / fd.abs().max(an.abs()).max(ABS_FLOOR);
                max_rel = max_rel.max(rel);
            }
        }
        per_param.push(ParamCheck { name, checked: idxs.len(), max_rel_err: max_rel, pass: max_rel <= tol });
    }
    let pass = per_param.iter().all(|p| p.pass);
    GradCheckReport { per_param, pass }
}
