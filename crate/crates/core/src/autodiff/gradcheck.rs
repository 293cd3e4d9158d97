//! Central finite-difference verification of tape gradients.

use crate::autodiff::tape::{FrozenNodes, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tol: f64,
    pub step: f64,
    pub max_rel_error: f64,
    /// Coordinates whose relative error exceeds `tol`, worst first.
    pub failures: Vec<CoordinateError>,
    pub worst: Option<CoordinateError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor], frozen: Option<FrozenNodes>) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = match frozen {
        Some(fz) => Tape::replaying(fz),
        None => Tape::recording(),
    };
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

fn replay_value<F>(f: &F, params: &[Tensor], frozen: &FrozenNodes) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = evaluate(f, params, Some(frozen.clone()))?;
    Ok(tape.value(loss).item())
}

/// Compares the tape gradient of `f` at `params` with central differences
/// `(f(θ+h) - f(θ-h)) / 2h`.
///
/// Stop-gradient and straight-through nodes are frozen at their values at
/// `params` while differencing, so the numeric side differentiates the same
/// surrogate the custom backward rules define.
pub fn grad_check<F>(f: F, params: &[Tensor], tol: f64, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    grad_check_against(&f, &f, params, tol, step)
}

/// Like [`grad_check`], but the analytic gradient comes from `analytic` while
/// finite differences are taken of `reference`. Used to show that a mutated
/// graph is caught.
pub fn grad_check_against<A, R>(
    analytic: A,
    reference: R,
    params: &[Tensor],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(step > 0.0) {
        return Err(Error::Param(format!("finite-difference step must be positive, got {step}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Param(format!("tolerance must be positive, got {tol}")));
    }

    let (mut ref_tape, _, ref_loss) = evaluate(&reference, params, None)?;
    let reference_value = ref_tape.value(ref_loss).item();
    let frozen = ref_tape.take_frozen();

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = analytic(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic_grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    for _ in 0..2 {
        let again = replay_value(&reference, params, &frozen)?;
        if again.to_bits() != reference_value.to_bits() {
            return Err(Error::NonDeterministic {
                first: reference_value,
                second: again,
            });
        }
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();

    let numeric: Vec<Result<f64>> = kernels::map_indexed(coords.len(), |c| {
        let (p, i) = coords[c];
        let mut shifted = params.to_vec();
        let x0 = params[p].data()[i];
        shifted[p].data_mut()[i] = x0 + step;
        let up = replay_value(&reference, &shifted, &frozen)?;
        shifted[p].data_mut()[i] = x0 - step;
        let down = replay_value(&reference, &shifted, &frozen)?;
        Ok((up - down) / (2.0 * step))
    });

    let mut max_rel_error: f64 = 0.0;
    let mut worst: Option<CoordinateError> = None;
    let mut failures = Vec::new();
    for (&(p, i), num) in coords.iter().zip(numeric) {
        let numeric = num?;
        let analytic = analytic_grads[p].data()[i];
        let rel_error = relative_error(analytic, numeric);
        let entry = CoordinateError {
            param: p,
            index: i,
            analytic,
            numeric,
            rel_error,
        };
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(entry.clone());
        }
        max_rel_error = max_rel_error.max(rel_error);
        if rel_error > tol {
            failures.push(entry);
        }
    }
    failures.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));

    Ok(GradCheckReport {
        checked: coords.len(),
        tol,
        step,
        max_rel_error,
        failures,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        let theta = vec![Tensor::vector(vec![1.0, 2.0])];
        let report = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let sq = t.elementwise_mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &theta,
            1e-9,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let mut tape = Tape::new();
        let x = tape.leaf(theta[0].clone());
        let sq = tape.elementwise_mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fully_stopped_function_has_zero_gradient_both_ways() {
        let theta = vec![Tensor::vector(vec![0.3, -1.2, 2.5])];
        let report = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let s = t.stop_gradient(v[0]);
                let sq = t.elementwise_mul(s, s)?;
                Ok(t.sum_all(sq))
            },
            &theta,
            1e-9,
            1e-5,
        )
        .unwrap();
        assert!(report.passed());
        let w = report.worst.unwrap();
        assert_eq!(w.analytic, 0.0);
        assert_eq!(w.numeric, 0.0);
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let theta = vec![Tensor::vector(vec![1.0])];
        let err = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
                Ok(t.scalar_mul(v[0], 1.0 + k))
            },
            &theta,
            1e-6,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_bad_step() {
        let theta = vec![Tensor::vector(vec![1.0])];
        let f = |t: &mut Tape, v: &[Var]| Ok(t.sum_all(v[0]));
        assert!(matches!(grad_check(f, &theta, 1e-6, 0.0), Err(Error::Param(_))));
    }
}
