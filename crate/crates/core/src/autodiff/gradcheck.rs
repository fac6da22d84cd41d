//! Central finite-difference gradient checking.

use crate::error::Result;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Denominator floor for the relative error; gradients smaller than this are
/// compared in absolute terms scaled by it.
pub const REL_FLOOR: f64 = 1e-4;

/// Checks every scalar parameter of `store` for the scalar loss built by `f`.
pub fn check_gradients<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = store.collect_grads(&bound, &grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.0[id.index()][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = format!("{}[{j}]", store.name(id));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
