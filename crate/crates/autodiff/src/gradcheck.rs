//! Central finite-difference checks against tape gradients.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; below it the error is absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the `±h` probe crossed a non-smooth point.
    pub skipped_kinks: usize,
}

/// Checks every coordinate of every input; returns the worst relative error.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    Ok(finite_diff_check_coords(f, point, h, &coords)?.max_rel_error)
}

/// Checks the listed `(input, flat index)` coordinates.
pub fn finite_diff_check_coords<F>(
    f: F,
    point: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(out)?;

    let eval = |input: usize, idx: usize, delta: f64| -> Result<(f64, Vec<u32>)> {
        let mut shifted = point.to_vec();
        shifted[input].data_mut()[idx] += delta;
        let t = Tape::new();
        let vs: Vec<Var> = shifted.into_iter().map(|x| t.leaf(x, false)).collect();
        let o = f(&t, &vs)?;
        let v = t.value(o).item();
        Ok((v, t.branch_signature()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };
    for &(input, idx) in coords {
        let t = point.get(input).ok_or(AutodiffError::InvalidArgument {
            op: "finite_diff_check",
            msg: format!("no input {input}"),
        })?;
        if idx >= t.numel() {
            return Err(AutodiffError::InvalidArgument {
                op: "finite_diff_check",
                msg: format!("index {idx} out of {}", t.numel()),
            });
        }
        let (plus, sig_p) = eval(input, idx, h)?;
        let (minus, sig_m) = eval(input, idx, -h)?;
        if sig_p != base_sig || sig_m != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(vars[input]).map_or(0.0, |g| g.data()[idx]);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.checked += 1;
    }
    Ok(report)
}
