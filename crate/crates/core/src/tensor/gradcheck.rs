//! Central-finite-difference verification of analytic gradients.
//!
//! Always runs in 64-bit: the default step `h = 1e-5` leaves no usable
//! precision in f32.

use super::{DiffTensor, Tape};
use crate::error::Result;

/// One named parameter array fed to the function under test.
#[derive(Clone, Debug)]
pub struct GradCheckParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl GradCheckParam {
    pub fn new(name: &str, shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// Worst relative disagreement between analytic and numeric gradient
    /// over all elements of this parameter.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn all_passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<24} max_rel_err {:.3e} {}",
                e.name,
                e.max_rel_err,
                if e.max_rel_err <= self.tol { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "overall {:.3e} (tol {:.1e})", self.max_rel_err(), self.tol)
    }
}

/// Compares the analytic gradient of `f` against central finite differences
/// for every element of every parameter. `f` receives a fresh tape plus one
/// tensor per parameter (in order) and must return a scalar loss; it must be
/// deterministic — fix any masks or random draws outside the closure.
pub fn grad_check<F>(f: F, params: &[GradCheckParam], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[DiffTensor]) -> Result<DiffTensor>,
{
    let eval = |datasets: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<DiffTensor>, DiffTensor)> {
        let tape = Tape::new();
        let tensors: Vec<DiffTensor> = params
            .iter()
            .zip(datasets)
            .map(|(p, d)| tape.param(&p.shape, d.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&tape, &tensors)?;
        Ok((tape, tensors, loss))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();

    // Analytic pass.
    let (tape, tensors, loss) = eval(&base)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| tape.grad(t).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut entries = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for ei in 0..param.data.len() {
            let mut plus = base.clone();
            plus[pi][ei] += h;
            let (tp, _, lp) = eval(&plus)?;
            let fp = tp.scalar_value(&lp);

            let mut minus = base.clone();
            minus[pi][ei] -= h;
            let (tm, _, lm) = eval(&minus)?;
            let fm = tm.scalar_value(&lm);

            let numeric = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[pi][ei], numeric));
        }
        entries.push(GradCheckEntry {
            name: param.name.clone(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let mag = analytic.abs().max(numeric.abs());
    // Below the finite-difference noise floor both are effectively zero.
    if mag < 1e-8 {
        0.0
    } else {
        diff / mag
    }
}
