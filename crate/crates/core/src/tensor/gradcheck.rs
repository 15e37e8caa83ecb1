//! Central finite-difference oracle for tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Absolute fallback: a coordinate also passes when `|analytic - numeric| <= abs_tol`.
    pub abs_tol: f64,
    /// Coordinates sampled per input; inputs at or below this size are checked exhaustively.
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_tol: 1e-10,
            coords_per_input: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub abs_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Largest relative error among coordinates not already within the absolute fallback.
    pub fn max_rel_error(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.abs_error > self.abs_tol)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh tape and one variable per input and must return a
/// scalar variable.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checks: Vec::new(),
        abs_tol: opts.abs_tol,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = if numel <= opts.coords_per_input {
            (0..numel).collect()
        } else {
            let mut picked = index::sample(&mut rng, numel, opts.coords_per_input).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in coords {
            let original = input.data()[idx];
            work[i].data_mut()[idx] = original + opts.h;
            let plus = eval(&work)?;
            work[i].data_mut()[idx] = original - opts.h;
            let minus = eval(&work)?;
            work[i].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[i].data()[idx];
            let abs_error = (a - numeric).abs();
            let rel_error = relative_error(a, numeric);
            report.checks.push(CoordinateCheck {
                input: i,
                index: idx,
                analytic: a,
                numeric,
                abs_error,
                rel_error,
                passed: rel_error <= opts.tol || abs_error <= opts.abs_tol,
            });
        }
    }
    Ok(report)
}
