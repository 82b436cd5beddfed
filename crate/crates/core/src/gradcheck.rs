//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of one tensor.
///
/// `f` builds the function on the supplied tape from the given input var and
/// returns the scalar output. Any error while evaluating yields `+inf`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`gradcheck`] over several inputs at once; the error is the max over all
/// coordinates of all inputs.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_report(f, inputs, eps).max_rel_error
}

/// Both error measures of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// Max over coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// `max |a - n|` divided by the largest gradient magnitude, so the
    /// measure does not depend on how the function is scaled.
    pub normwise_error: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.max(self.normwise_error)
    }
}

pub fn gradcheck_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> GradcheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let failed = GradcheckReport { max_rel_error: f64::INFINITY, normwise_error: f64::INFINITY };
    let analytic = match analytic_grads(&f, inputs) {
        Ok(g) => g,
        Err(_) => return failed,
    };
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[which].data_mut()[i] = orig;
            let (Ok(plus), Ok(minus)) = (plus, minus) else {
                return failed;
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() {
                return failed;
            }
            worst = worst.max(err);
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
        }
    }
    let normwise_error = if max_diff == 0.0 { 0.0 } else { max_diff / max_mag };
    GradcheckReport { max_rel_error: worst, normwise_error }
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Inputs kept at least 1e-3 away from the relu kink.
    fn away_from_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
        random(shape, seed).map(|v| if v.abs() < 1e-3 { v.signum() * 1e-3 + v } else { v })
    }

    #[test]
    fn sum_is_exact() {
        let x = random(&[3, 4], 1);
        let err = gradcheck(|t, v| Ok(t.sum(v)), &x, DEFAULT_EPS);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn failing_function_reports_infinity() {
        let x = random(&[2, 3], 1);
        let err = gradcheck(|t, v| t.matmul(v, v), &x, DEFAULT_EPS);
        assert!(err.is_infinite());
    }

    #[test]
    fn every_primitive_passes_over_twenty_seeds() {
        for seed in 0..20u64 {
            let a = random(&[3, 4], seed);
            let b = random(&[3, 4], seed + 100);
            let m = random(&[4, 2], seed + 200);
            let w = random(&[3, 4], seed + 300);
            let check = |name: &str, err: f64, tol: f64| assert!(err < tol, "{name} seed {seed}: {err}");

            // Weighted sums avoid trivially symmetric gradients.
            let weighted = |tape: &mut Tape<f64>, v: Var| -> Result<Var> {
                let wv = tape.constant(w.clone());
                let p = tape.mul(v, wv)?;
                Ok(tape.sum(p))
            };

            check("add", gradcheck_many(|t, v| { let s = t.add(v[0], v[1])?; weighted(t, s) }, &[a.clone(), b.clone()], DEFAULT_EPS), 1e-6);
            check("sub", gradcheck_many(|t, v| { let s = t.sub(v[0], v[1])?; weighted(t, s) }, &[a.clone(), b.clone()], DEFAULT_EPS), 1e-6);
            check("mul", gradcheck_many(|t, v| { let s = t.mul(v[0], v[1])?; weighted(t, s) }, &[a.clone(), b.clone()], DEFAULT_EPS), 1e-6);
            let denom = b.map(|v| v.signum() * (v.abs() + 0.5));
            check("div", gradcheck_many(|t, v| { let s = t.div(v[0], v[1])?; weighted(t, s) }, &[a.clone(), denom], DEFAULT_EPS), 1e-6);
            check("matmul", gradcheck_many(|t, v| { let p = t.matmul(v[0], v[1])?; Ok(t.frobenius_norm_squared(p)) }, &[a.clone(), m.clone()], DEFAULT_EPS), 1e-6);
            check("scale", gradcheck(|t, v| { let s = t.scale(v, -2.5); weighted(t, s) }, &a, DEFAULT_EPS), 1e-6);
            check("mean", gradcheck(|t, v| { let p = t.mul(v, v)?; Ok(t.mean(p)) }, &a, DEFAULT_EPS), 1e-6);
            check("max", gradcheck(|t, v| { let p = t.mul(v, v)?; t.max(p) }, &a, DEFAULT_EPS), 1e-6);
            check("frob", gradcheck(|t, v| Ok(t.frobenius_norm_squared(v)), &a, DEFAULT_EPS), 1e-6);
            check("transpose", gradcheck(|t, v| { let tr = t.transpose(v)?; let p = t.matmul(tr, v)?; Ok(t.frobenius_norm_squared(p)) }, &a, DEFAULT_EPS), 1e-6);
            check("reshape", gradcheck(|t, v| { let r = t.reshape(v, &[4, 3])?; let r = t.reshape(r, &[3, 4])?; weighted(t, r) }, &a, DEFAULT_EPS), 1e-6);
            check("concat", gradcheck_many(|t, v| { let c = t.concat(&[v[0], v[1]], 0)?; Ok(t.frobenius_norm_squared(c)) }, &[a.clone(), b.clone()], DEFAULT_EPS), 1e-6);
            let kinked = away_from_kink(&[3, 4], seed + 400);
            check("relu", gradcheck(|t, v| { let r = t.relu(v); weighted(t, r) }, &kinked, DEFAULT_EPS), 1e-5);

            let img = random(&[2, 5, 6], seed + 500);
            let kernel = random(&[3, 2, 3, 3], seed + 600);
            let bias = random(&[3], seed + 700);
            for stride in [1, 2] {
                check(
                    "conv2d",
                    gradcheck_many(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?; Ok(t.frobenius_norm_squared(y)) }, &[img.clone(), kernel.clone(), bias.clone()], DEFAULT_EPS),
                    1e-6,
                );
            }
            let small = random(&[2, 3, 2], seed + 800);
            check("upsample", gradcheck(|t, v| { let u = t.upsample_bilinear(v, 4)?; Ok(t.frobenius_norm_squared(u)) }, &small, DEFAULT_EPS), 1e-6);
        }
    }
}
