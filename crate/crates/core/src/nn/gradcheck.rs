//! Central finite-difference checks of graph gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Worst mismatch found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero entries do not blow up.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`, for every entry of the listed parameters
/// (at most `max_entries` entries each, evenly spaced).
pub fn check(
    store: &ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Graph) -> Var,
    h: f64,
    max_entries: usize,
    floor: f64,
) -> GradReport {
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    let mut work = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = store.get(id).shape();
            Tensor::zeros(r, c)
        });
        let step = n.div_ceil(max_entries.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic.data()[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}]: analytic {} numeric {numeric}", store.name(id), analytic.data()[i]);
            }
        }
    }
    report
}
