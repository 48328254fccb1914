//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::params::{bind, ParamSet};
use crate::tensor::{Tape, Tensor};

/// Outcome of a gradient check: the worst disagreement and where it was.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences,
/// coordinate by coordinate, over every trainable parameter in `set`.
///
/// `f` must build a scalar loss from the bound parameters and nothing else;
/// it is evaluated twice at the base point first and any disagreement is
/// reported as a determinism error. Frozen parameters are left untouched and
/// unchecked. The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(set: &mut ParamSet, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &crate::tensor::Bindings) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("check_gradients: step size must be positive, got {h}")));
    }
    let eval = |set: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bindings = bind(&tape, set, false)?;
        let loss = f(&tape, &bindings)?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "check_gradients: f must be scalar-valued, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(loss.item())
    };

    let base_a = eval(set)?;
    let base_b = eval(set)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Determinism(format!(
            "f returned {base_a} then {base_b} at the same point"
        )));
    }

    // Analytic gradients from one reverse pass.
    let tape = Tape::new();
    let bindings = bind(&tape, set, true)?;
    let loss = f(&tape, &bindings)?;
    let grads = tape.backward(&loss)?;
    let analytic = bindings.gradients(&grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    let ids: Vec<_> = set.ids().collect();
    for id in ids {
        if !set.get(id).trainable {
            continue;
        }
        let n = set.get(id).numel();
        for coord in 0..n {
            let original = set.get(id).values[coord];
            set.get_mut(id).values[coord] = original + h;
            let plus = eval(set)?;
            set.get_mut(id).values[coord] = original - h;
            let minus = eval(set)?;
            set.get_mut(id).values[coord] = original;

            let numeric = (plus - minus) / (2.0 * h);
            // A trainable parameter the loss never touched has no analytic
            // gradient; treat it as zero so dead branches still verify.
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[coord]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = set.get(id).name.clone();
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}
