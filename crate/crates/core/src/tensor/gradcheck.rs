//! Central-difference verification of the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A function that can be evaluated at any precision on a tape.
///
/// The analytic gradient is taken at precision `S`; the reference finite
/// differences are always evaluated in `f64`.
pub trait GradFn {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

/// Central-difference formula used for the reference derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(g(x+h) − g(x−h)) / 2h`, error `O(h²)`.
    #[default]
    ThreePoint,
    /// `(−g(x+2h) + 8g(x+h) − 8g(x−h) + g(x−2h)) / 12h`, error `O(h⁴)`.
    /// Allows a larger step, which keeps round-off low on large graphs.
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    pub tol: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled), `None` for all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            stencil: Stencil::ThreePoint,
            tol: 1e-6,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub passed: bool,
    pub checked: usize,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

fn scalarize<'t, T: Scalar>(y: Var<'t, T>, weights: &[f64]) -> Result<Var<'t, T>> {
    let w = Tensor::<T>::from_f64(&y.shape(), weights)?;
    let w = y.tape().constant(w);
    y.mul(w)?.sum()
}

fn eval_f64<F: GradFn>(f: &F, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f.eval(&tape, &vars)?;
    scalarize(y, weights)?.value().item()
}

/// Compares the analytic gradient of `sum(f(inputs) ⊙ r)` (fixed random `r`)
/// with central differences per coordinate (see [`Stencil`]).
///
/// The error for one coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<S: Scalar, F: GradFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    if !(opts.step > 0.0) || !opts.step.is_finite() {
        return Err(Error::Contract(format!("step must be positive, got {}", opts.step)));
    }
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("input {i} is not finite")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Both sides differentiate the same function at the same point: inputs
    // and weights are rounded to `S` before either pass.
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<S>().cast()).collect();
    let inputs = &inputs[..];

    let out_len = {
        let tape = Tape::<f64>::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f.eval(&tape, &vars)?.value().len()
    };
    let weights: Vec<f64> = (0..out_len)
        .map(|_| S::of(rng.random_range(-1.0..1.0)).as_f64())
        .collect();

    let tape = Tape::<S>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let y = f.eval(&tape, &vars)?;
    let loss = scalarize(y, &weights)?;
    tape.backward(loss)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        passed: true,
        checked: 0,
        worst: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = match vars[i].grad() {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; input.len()],
        };
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < input.len() => {
                let mut idx: Vec<usize> = (0..input.len()).collect();
                for j in 0..k {
                    let r = rng.random_range(j..idx.len());
                    idx.swap(j, r);
                }
                idx.truncate(k);
                idx
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            let offsets: &[(f64, f64)] = match opts.stencil {
                Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
                Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
            };
            let mut numeric = 0.0;
            for &(k, c) in offsets {
                probe[i].data_mut()[j] = x0 + k * opts.step;
                let g = eval_f64(f, &probe, &weights)?;
                if !g.is_finite() {
                    probe[i].data_mut()[j] = x0;
                    return Err(Error::Numeric(format!(
                        "non-finite value while perturbing input {i} coordinate {j}"
                    )));
                }
                numeric += c * g;
            }
            probe[i].data_mut()[j] = x0;
            let numeric = numeric / opts.step;
            let a = analytic[j];
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite analytic gradient at input {i} coordinate {j}"
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear;

    impl GradFn for Linear {
        fn eval<'t, T: Scalar>(&self, _: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            x[0].matmul(x[1])?.scale(3.0)
        }
    }

    struct SumSquares;

    impl GradFn for SumSquares {
        fn eval<'t, T: Scalar>(&self, _: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            x[0].square()?.sum()
        }
    }

    #[test]
    fn linear_map_is_exact() {
        let a = Tensor::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 0.5, 0.1, -0.7]).unwrap();
        let b = Tensor::from_f64(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 0.0, 3.0]).unwrap();
        // linear in each input separately; the product term is bilinear, so
        // central differences are exact up to rounding
        let r = finite_diff_check::<f64, _>(&Linear, &[a, b], &GradCheckOptions {
            tol: 1e-8,
            ..Default::default()
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        let err = finite_diff_check::<f64, _>(&SumSquares, &[x], &opts).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn coordinate_sampling_limits_work() {
        let x = Tensor::from_f64(&[10], &[0.5; 10]).unwrap();
        let opts = GradCheckOptions {
            max_coords: Some(3),
            ..Default::default()
        };
        let r = finite_diff_check::<f64, _>(&SumSquares, &[x], &opts).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passed);
    }
}
