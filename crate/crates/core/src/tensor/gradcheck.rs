use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_FD_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing backward-pass gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub pass: bool,
    /// Set when the check could not be carried out (error or non-finite value).
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        Self {
            max_relative_error: f64::INFINITY,
            worst_index: None,
            pass: false,
            diagnostic: Some(msg),
        }
    }
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).item())
}

/// Checks `f`'s gradient at `point` against central differences.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`. Errors or
/// non-finite values inside `f` are reported through `diagnostic` instead of
/// propagating.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = match f(&mut tape, x) {
        Ok(y) => y,
        Err(e) => return GradCheckReport::failed(format!("forward failed: {e}")),
    };
    if tape.shape(y) != (1, 1) {
        return GradCheckReport::failed(format!("output shape {:?} is not scalar", tape.shape(y)));
    }
    if !tape.value(y).item().is_finite() {
        return GradCheckReport::failed("function value is not finite".into());
    }
    let analytic = match tape.backward(y) {
        Ok(g) => g.get_or_zeros(x, point.rows(), point.cols()),
        Err(e) => return GradCheckReport::failed(format!("backward failed: {e}")),
    };

    let mut worst = 0.0f64;
    let mut worst_index = None;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe);
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe);
        probe.data_mut()[i] = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                return GradCheckReport::failed(format!("perturbed forward failed at {i}: {e}"))
            }
            _ => return GradCheckReport::failed(format!("non-finite value at perturbed coordinate {i}")),
        };
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if worst_index.is_none() || rel > worst {
            worst = rel;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_relative_error: worst,
        worst_index,
        pass: worst < tolerance,
        diagnostic: None,
    }
}
