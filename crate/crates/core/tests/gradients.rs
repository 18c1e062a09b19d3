//! Random compositions of graph ops against finite differences.
//!
//! The oracle is Richardson-extrapolated central differences (steps 1e-3 and
//! 5e-4): truncation error is fourth order and roundoff stays near 1e-12, so
//! a 1e-4 relative tolerance measures the backward pass rather than the
//! difference quotient. Layer norm draws at least three columns; over two it
//! collapses to a sign function whose curvature no difference quotient
//! resolves.

use kernel_attn::{Graph, ParamId, Result, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-3;

fn tensor(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, n)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).item().unwrap()
}

/// Worst relative error over all elements, `|g - fd| / max(|g|, |fd|, 1e-8)`.
fn worst_error<F>(f: F, params: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for j in 0..params[i].numel() {
            let orig = work[i].data()[j];
            let mut central = |h: f64| {
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&f, &work);
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&f, &work);
                work[i].data_mut()[j] = orig;
                (plus - minus) / (2.0 * h)
            };
            let fd = (4.0 * central(STEP / 2.0) - central(STEP)) / 3.0;
            let an = grads.get(ParamId(i)).unwrap().data()[j];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn composed_graph_matches_finite_differences(
        m in 1usize..5,
        k in 1usize..5,
        n in 2usize..5,
        op in 0usize..4,
        xs in values(16),
        ws in values(16),
        bs in values(4),
        labels in prop::collection::vec(0usize..2, 4),
    ) {
        let n = if op == 2 { n.max(3) } else { n };
        let params = [tensor(m, k, &xs), tensor(k, n, &ws), Tensor::new(vec![n], bs[..n].to_vec()).unwrap()];
        let labels = labels[..m].to_vec();
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = match op {
                0 => g.softplus(h),
                1 => g.gelu(h),
                2 => g.layer_norm_rows(h, 1e-5)?,
                _ => {
                    let s = g.sigmoid(h);
                    g.softmax_rows(s)?
                }
            };
            let t = g.transpose(h)?;
            let sq = g.matmul(h, t)?;
            let r = g.sum_cols(sq)?;
            let r = g.square(r);
            let penalty = g.mean(r);
            let ce = g.cross_entropy(h, &labels)?;
            g.add(ce, penalty)
        };
        let err = worst_error(f, &params);
        prop_assert!(err <= TOL, "op {op} ({m}x{k}x{n}): relative error {err:.3e}");
    }
}
