//! Central finite differences against the graph's analytic gradients.

use super::{Graph, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Worst element of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamFdError {
    pub index: usize,
    pub max_rel_error: f64,
    /// Set when `f` produced a non-finite value for some perturbation.
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamFdError>,
}

impl FdReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| !p.failed && p.max_rel_error <= tol)
    }
}

fn eval<T: Real, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item()?.f64())
}

/// Compares `backward` gradients of `f` with central differences of step
/// `step`. Relative error per element is
/// `|g - g_fd| / max(|g|, |g_fd|, 1e-8)`.
pub fn finite_difference_check<T: Real, F>(f: F, params: &[Tensor<T>], step: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    let analytic = g.backward(loss)?;

    let mut report = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let grad = analytic.get(ParamId(i)).expect("every param has a gradient");
        let mut worst = 0.0f64;
        let mut failed = !grad.is_finite();
        for j in 0..params[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = T::of(orig.f64() + step);
            let plus = eval(&f, &work)?;
            work[i].data_mut()[j] = T::of(orig.f64() - step);
            let minus = eval(&f, &work)?;
            work[i].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                failed = true;
                continue;
            }
            let fd = (plus - minus) / (2.0 * step);
            let an = grad.data()[j].f64();
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.push(ParamFdError {
            index: i,
            max_rel_error: worst,
            failed,
        });
    }
    Ok(FdReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_has_zero_error() {
        let w = sample(&[3, 3], 1);
        let r = finite_difference_check(|g, p| Ok(g.sum(p[0])), &[w], 1e-5).unwrap();
        assert!(r.max_error() < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_zero_step() {
        let w = sample(&[2], 1);
        assert!(finite_difference_check(|g, p| Ok(g.sum(p[0])), &[w], 0.0).is_err());
    }

    #[test]
    fn non_finite_output_marks_failure() {
        let w = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_difference_check(|g, p| Ok(g.log(p[0])), &[w], 1e-5).unwrap();
        assert!(r.params[0].failed);
        assert!(!r.passed(1.0));
    }

    #[test]
    fn matmul_gradients_match() {
        let a = sample(&[5, 4], 3);
        let b = sample(&[4, 3], 4);
        let r = finite_difference_check(
            |g, p| {
                let m = g.matmul(p[0], p[1])?;
                let s = g.square(m);
                Ok(g.sum(s))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn gelu_gradient_matches() {
        let x = sample(&[4, 4], 9).map(|v| 3.0 * v);
        let r = finite_difference_check(
            |g, p| {
                let y = g.gelu(p[0]);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.passed(1e-5), "{r:?}");
    }
}
