//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward pass on perturbed
//! inputs, so it stays independent of every backward rule it checks.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this in magnitude on both sides are compared in
/// absolute rather than relative terms.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Rounding bound of the central difference, `eps * max|f(x ± h)| / h`.
    pub roundoff: f64,
}

impl Probe {
    /// `|analytic - numeric| <= rtol * max(|analytic|, |numeric|) + safety * roundoff`.
    pub fn is_close(&self, rtol: f64, safety: f64) -> bool {
        let scale = self.analytic.abs().max(self.numeric.abs());
        (self.analytic - self.numeric).abs() <= rtol * scale + safety * self.roundoff
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub probes: Vec<Probe>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// Probes failing [`Probe::is_close`].
    pub fn failures(&self, rtol: f64, safety: f64) -> Vec<&Probe> {
        self.probes.iter().filter(|p| !p.is_close(rtol, safety)).collect()
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Compares analytic and central-difference gradients of the scalar `f` at
/// the chosen `(input, element)` coordinates.
pub fn check_at<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)], step: f64) -> Result<Report>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = Report::default();
    for &(input, element) in coords {
        let analytic = grads.wrt(vars[input]).data()[element];
        let mut shifted = inputs.to_vec();
        let base = inputs[input].data()[element];
        shifted[input].data_mut()[element] = base + step;
        let plus = evaluate(&f, &shifted)?;
        shifted[input].data_mut()[element] = base - step;
        let minus = evaluate(&f, &shifted)?;
        let numeric = (plus - minus) / (2.0 * step);
        report.probes.push(Probe {
            input,
            element,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
            roundoff: f64::EPSILON * plus.abs().max(minus.abs()) / step,
        });
    }
    Ok(report)
}

/// Every element of every input.
pub fn check_all<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Report>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_at(f, inputs, &coords, step)
}

/// `count` coordinates drawn uniformly over all elements of all inputs.
pub fn random_coords(inputs: &[Tensor], count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total: usize = inputs.iter().map(Tensor::len).sum();
    (0..count)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            let mut input = 0;
            while flat >= inputs[input].len() {
                flat -= inputs[input].len();
                input += 1;
            }
            (input, flat)
        })
        .collect()
}

/// Tensor with entries uniform in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}
