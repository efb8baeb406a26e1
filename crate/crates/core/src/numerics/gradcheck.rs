//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Magnitude below which the relative error denominator stops shrinking, so
/// that gradients that are zero up to finite-difference noise are compared
/// on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

const MIN_STEP: f64 = 1e-6;
const MAX_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Finite-difference step that produced `numeric`.
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval_scalar<G>(f: &G, points: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    G: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Check the gradient of a scalar function of one tensor at every coordinate.
pub fn grad_check<G>(f: G, point: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    G: Fn(&Tape<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, tol, None, 0)
}

/// Check the gradient of a scalar function of several tensors. When
/// `max_coords` is set, at most that many coordinates per input are sampled
/// (seeded) instead of sweeping all of them.
///
/// A coordinate that disagrees at step `eps` is re-estimated with the step
/// shrunk tenfold, down to 1e-6: a ReLU kink inside the stencil spoils the
/// estimate at large steps while rounding spoils near-zero gradients at
/// small ones. The closest estimate is reported.
pub fn grad_check_many<G>(
    f: G,
    points: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    G: Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(MIN_STEP..=MAX_STEP).contains(&eps) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-6, 1e-4]"),
        });
    }
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (input, point) in points.iter().enumerate() {
        let analytic = grads
            .get(vars[input])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point.shape()));
        let indices: Vec<usize> = match max_coords {
            Some(k) if k < point.len() => {
                let mut v = sample(&mut rng, point.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..point.len()).collect(),
        };
        for index in indices {
            let a = analytic.data()[index];
            let mut step = eps;
            let mut best: Option<CoordinateCheck> = None;
            loop {
                let mut shifted = points.to_vec();
                shifted[input].data_mut()[index] += step;
                let up = eval_scalar(&f, &shifted)?;
                shifted[input].data_mut()[index] -= 2.0 * step;
                let down = eval_scalar(&f, &shifted)?;
                let numeric = (up - down) / (2.0 * step);
                let c = CoordinateCheck {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: relative_error(a, numeric),
                    step,
                };
                if best.as_ref().is_none_or(|b| c.rel_error < b.rel_error) {
                    best = Some(c);
                }
                step /= 10.0;
                if best.as_ref().is_some_and(|b| b.rel_error < tol) || step < MIN_STEP * (1.0 - 1e-9) {
                    break;
                }
            }
            coords.extend(best);
        }
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coords,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}
