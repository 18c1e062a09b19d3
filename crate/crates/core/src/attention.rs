//! Attention evaluators.
//!
//! With feature maps `φ(q_i)`, `φ(k_j)` (rows of `Qf`, `Kf`) and padding
//! weights `m_j ∈ {0, 1}`, kernel attention is
//!
//! ```text
//! out_i = Σ_j m_j (φ(q_i)·φ(k_j)) v_j / Σ_j m_j (φ(q_i)·φ(k_j))
//! ```
//!
//! [`kernel_attention_quadratic`] evaluates that literally in `O(L²)` and is
//! the oracle. [`kernel_attention_linear`] reorders the sums, building
//! `S = Σ_j m_j φ(k_j) v_jᵀ` and `z = Σ_j m_j φ(k_j)` once, so the cost is
//! `O(L·C·d)`. Both are non-causal. [`softmax_attention`] is the exact
//! `exp(qᵀk/√d)` baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kernel_stack_forward, KernelParams, KernelSpec};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    KernelLinear,
    KernelQuadratic,
}

impl AttentionKind {
    pub fn uses_kernel(self) -> bool {
        self != Self::Softmax
    }
}

/// Per-position padding flags; `true` marks a real token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadMask(Vec<bool>);

impl PadMask {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if !flags.iter().any(|&f| f) {
            return Err(Error::Contract("mask has no real position".into()));
        }
        Ok(Self(flags))
    }

    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn real_count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn weights<T: Real>(&self) -> Vec<T> {
        self.0.iter().map(|&f| if f { T::one() } else { T::zero() }).collect()
    }
}

fn dims<T: Real>(g: &Graph<T>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [m, n] => Ok((m, n)),
        ref s => Err(Error::shape(op, s, &[])),
    }
}

fn check_kv<T: Real>(g: &Graph<T>, op: &'static str, k: Var, v: Var, mask: &PadMask) -> Result<()> {
    let (lk, _) = dims(g, k, op)?;
    let (lv, _) = dims(g, v, op)?;
    if lk != lv || mask.len() != lk {
        return Err(Error::shape(op, g.shape(k), g.shape(v)));
    }
    if mask.real_count() == 0 {
        return Err(Error::Contract(format!("{op}: every key position is masked")));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d) V` with masked keys at `-∞`.
pub fn softmax_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: &PadMask) -> Result<Var> {
    check_kv(g, "softmax_attention", k, v, mask)?;
    let (_, d) = dims(g, q, "softmax_attention")?;
    if dims(g, k, "softmax_attention")?.1 != d {
        return Err(Error::shape("softmax_attention", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / T::of(d as f64).sqrt());
    let logits = if mask.real_count() < mask.len() {
        let bias = mask
            .flags()
            .iter()
            .map(|&f| if f { T::zero() } else { T::neg_infinity() })
            .collect();
        let bias = g.constant(Tensor::new(vec![mask.len()], bias)?);
        g.add(logits, bias)?
    } else {
        logits
    };
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, v)
}

fn check_features<T: Real>(g: &Graph<T>, op: &'static str, qf: Var, kf: Var) -> Result<()> {
    let (_, c) = dims(g, qf, op)?;
    let (_, c2) = dims(g, kf, op)?;
    if c != c2 {
        return Err(Error::shape(op, g.shape(qf), g.shape(kf)));
    }
    Ok(())
}

/// Explicit `O(L²)` kernel attention; requires strictly positive features.
pub fn kernel_attention_quadratic<T: Real>(
    g: &mut Graph<T>,
    qf: Var,
    kf: Var,
    v: Var,
    mask: &PadMask,
) -> Result<Var> {
    check_features(g, "kernel_attention_quadratic", qf, kf)?;
    check_kv(g, "kernel_attention_quadratic", kf, v, mask)?;
    for (name, f) in [("query", qf), ("key", kf)] {
        let min = g.value(f).min_value();
        if !(min > T::zero()) {
            return Err(Error::Contract(format!(
                "{name} features must be strictly positive, min is {min}"
            )));
        }
    }
    let kt = g.transpose(kf)?;
    let scores = g.matmul(qf, kt)?;
    let scores = if mask.real_count() < mask.len() {
        let m = g.constant(Tensor::new(vec![mask.len()], mask.weights())?);
        g.mul(scores, m)?
    } else {
        scores
    };
    let num = g.matmul(scores, v)?;
    let den = g.sum_cols(scores)?;
    g.row_div(num, den)
}

/// Factorized `O(L·C·d)` kernel attention:
/// `out_i = φ(q_i)ᵀS / (φ(q_i)ᵀz + eps)`.
pub fn kernel_attention_linear<T: Real>(
    g: &mut Graph<T>,
    qf: Var,
    kf: Var,
    v: Var,
    mask: &PadMask,
    eps: T,
) -> Result<Var> {
    check_features(g, "kernel_attention_linear", qf, kf)?;
    check_kv(g, "kernel_attention_linear", kf, v, mask)?;
    if !(eps >= T::zero()) {
        return Err(Error::Contract(format!("eps must be non-negative, got {eps}")));
    }
    for (name, t) in [("query features", qf), ("key features", kf), ("values", v)] {
        if !g.value(t).is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let km = if mask.real_count() < mask.len() {
        g.scale_rows(kf, &mask.weights())?
    } else {
        kf
    };
    let kt = g.transpose(km)?;
    let s = g.matmul(kt, v)?;
    let z = g.sum_rows(km)?;
    let zt = g.transpose(z)?;
    let num = g.matmul(qf, s)?;
    let den = g.matmul(qf, zt)?;
    let den = if eps > T::zero() { g.add_scalar(den, eps) } else { den };
    g.row_div(num, den)
}

/// Multiply-adds spent accumulating `S` and `z` for one head.
pub fn linear_accumulation_ops(len: usize, features: usize, value_dim: usize) -> u64 {
    (len * features * value_dim + len * features) as u64
}

/// φ weights of one head. `key` is `None` when queries and keys share them.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadKernels<H> {
    pub query: KernelParams<H>,
    pub key: Option<KernelParams<H>>,
}

impl<H> HeadKernels<H> {
    pub fn key_params(&self) -> &KernelParams<H> {
        self.key.as_ref().unwrap_or(&self.query)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> HeadKernels<U> {
        HeadKernels {
            query: self.query.map(&mut f),
            key: self.key.as_ref().map(|k| k.map(&mut f)),
        }
    }

    pub fn all(&self) -> Vec<&KernelParams<H>> {
        std::iter::once(&self.query).chain(self.key.as_ref()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams<H> {
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub w_o: H,
    /// One entry per head; empty for softmax attention.
    pub heads: Vec<HeadKernels<H>>,
}

impl<H> AttentionLayerParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> AttentionLayerParams<U> {
        AttentionLayerParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            heads: self.heads.iter().map(|h| h.map(&mut f)).collect(),
        }
    }
}

impl<T: Real> AttentionLayerParams<Tensor<T>> {
    /// Projections come from `rng`, kernel stacks from `kernel_rng`, so the
    /// projections do not depend on whether a kernel is present.
    pub fn init(
        d_model: usize,
        n_heads: usize,
        kernel: Option<(&KernelSpec, bool)>,
        rng: &mut Rng,
        kernel_rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut proj = || rng::uniform_tensor(rng, &[d_model, d_model], bound);
        let (w_q, w_k, w_v, w_o) = (proj(), proj(), proj(), proj());
        let mut heads = Vec::new();
        if let Some((spec, share_qk)) = kernel {
            for _ in 0..n_heads {
                let query = KernelParams::init(spec, kernel_rng)?;
                let key = if share_qk {
                    None
                } else {
                    Some(KernelParams::init(spec, kernel_rng)?)
                };
                heads.push(HeadKernels { query, key });
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }
}

/// Static settings shared by every attention layer of a model.
#[derive(Clone, Debug)]
pub struct AttentionSetup<'a> {
    pub kind: AttentionKind,
    pub n_heads: usize,
    pub kernel: &'a KernelSpec,
    pub eps: f64,
}

/// Multi-head attention over a batch of equal-length sequences stacked
/// row-wise in `x[B·L, d_model]`; `masks` has one entry per sequence.
pub fn multi_head_attention_batch<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    params: &AttentionLayerParams<Var>,
    setup: &AttentionSetup<'_>,
    masks: &[PadMask],
) -> Result<Var> {
    let (rows, d_model) = dims(g, x, "multi_head_attention")?;
    let b = masks.len();
    if b == 0 || rows % b != 0 {
        return Err(Error::shape("multi_head_attention", g.shape(x), &[b]));
    }
    let len = rows / b;
    let h = setup.n_heads;
    if h == 0 || d_model % h != 0 {
        return Err(Error::config(
            "model.n_heads",
            format!("{h} heads do not divide d_model = {d_model}"),
        ));
    }
    let n = d_model / h;
    if setup.kind.uses_kernel() {
        if params.heads.len() != h {
            return Err(Error::Contract(format!(
                "{} kernel heads for {h} attention heads",
                params.heads.len()
            )));
        }
        if setup.kernel.head_dim != n {
            return Err(Error::config(
                "kernel.head_dim",
                format!("kernel built for {} but heads have {n}", setup.kernel.head_dim),
            ));
        }
    }
    let q = g.matmul(x, params.w_q)?;
    let k = g.matmul(x, params.w_k)?;
    let v = g.matmul(x, params.w_v)?;
    let eps = T::of(setup.eps);

    let mut seqs = Vec::with_capacity(b);
    for (s, mask) in masks.iter().enumerate() {
        if mask.len() != len {
            return Err(Error::shape("multi_head_attention", &[len], &[mask.len()]));
        }
        let (q_s, k_s, v_s) = if b == 1 {
            (q, k, v)
        } else {
            (
                g.slice_rows(q, s * len, (s + 1) * len)?,
                g.slice_rows(k, s * len, (s + 1) * len)?,
                g.slice_rows(v, s * len, (s + 1) * len)?,
            )
        };
        let mut outs = Vec::with_capacity(h);
        for head in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (q_s, k_s, v_s)
            } else {
                (
                    g.slice_cols(q_s, head * n, (head + 1) * n)?,
                    g.slice_cols(k_s, head * n, (head + 1) * n)?,
                    g.slice_cols(v_s, head * n, (head + 1) * n)?,
                )
            };
            let out = match setup.kind {
                AttentionKind::Softmax => softmax_attention(g, qh, kh, vh, mask)?,
                kind => {
                    let hk = &params.heads[head];
                    let qf = kernel_stack_forward(g, qh, setup.kernel, &hk.query)?;
                    let kf = kernel_stack_forward(g, kh, setup.kernel, hk.key_params())?;
                    if kind == AttentionKind::KernelLinear {
                        kernel_attention_linear(g, qf, kf, vh, mask, eps)?
                    } else {
                        kernel_attention_quadratic(g, qf, kf, vh, mask)?
                    }
                }
            };
            outs.push(out);
        }
        seqs.push(if h == 1 { outs[0] } else { g.concat_cols(&outs)? });
    }
    let joined = if b == 1 { seqs[0] } else { g.concat_rows(&seqs)? };
    g.matmul(joined, params.w_o)
}

/// Multi-head attention over one sequence `x[L, d_model]`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    params: &AttentionLayerParams<Var>,
    setup: &AttentionSetup<'_>,
    mask: &PadMask,
) -> Result<Var> {
    multi_head_attention_batch(g, x, params, setup, std::slice::from_ref(mask))
}

/// Single-sequence kernel attention with the linear evaluator.
pub fn multi_head_kernel_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    params: &AttentionLayerParams<Var>,
    spec: &KernelSpec,
    n_heads: usize,
    mask: &PadMask,
    eps: f64,
) -> Result<Var> {
    let setup = AttentionSetup {
        kind: AttentionKind::KernelLinear,
        n_heads,
        kernel: spec,
        eps,
    };
    multi_head_attention(g, x, params, &setup, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelVariant;

    fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| 0.05 + rng::unit(rng) * 2.0)
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let v = f(&mut g)?;
        Ok(g.value(v).clone())
    }

    #[test]
    fn mask_needs_a_real_position() {
        assert!(PadMask::new(vec![false, false]).is_err());
        assert_eq!(PadMask::new(vec![true, false]).unwrap().real_count(), 1);
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut r = rng::seeded(0);
        let (q, k, v) = (positive(&mut r, &[1, 3]), positive(&mut r, &[1, 3]), positive(&mut r, &[1, 2]));
        let mask = PadMask::all(1);
        let soft = eval(|g| {
            let (q, k, v2) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            softmax_attention(g, q, k, v2, &mask)
        })
        .unwrap();
        assert_eq!(soft, v);
        let quad = eval(|g| {
            let (q, k, v2) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            kernel_attention_quadratic(g, q, k, v2, &mask)
        })
        .unwrap();
        assert!(quad.max_abs_diff(&v).unwrap() < 1e-15);
        let lin = eval(|g| {
            let (q, k, v2) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            kernel_attention_linear(g, q, k, v2, &mask, 0.0)
        })
        .unwrap();
        assert!(lin.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn linear_with_eps_perturbs_single_key_boundedly() {
        let mut r = rng::seeded(1);
        let (q, k, v) = (positive(&mut r, &[1, 4]), positive(&mut r, &[1, 4]), positive(&mut r, &[1, 3]));
        let eps = 1e-3;
        let den: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
        let lin = eval(|g| {
            let (q, k, v2) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            kernel_attention_linear(g, q, k, v2, &PadMask::all(1), eps)
        })
        .unwrap();
        let vnorm = v.sq_norm().sqrt();
        assert!(lin.max_abs_diff(&v).unwrap() <= eps * vnorm / den + 1e-15);
    }

    #[test]
    fn equal_logits_average_unmasked_values() {
        let v = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![100.0, -7.0]]).unwrap();
        let mask = PadMask::new(vec![true, true, false]).unwrap();
        let out = eval(|g| {
            let q = g.constant(Tensor::zeros(&[3, 2]));
            let k = g.constant(Tensor::ones(&[3, 2]));
            let v = g.constant(v.clone());
            softmax_attention(g, q, k, v, &mask)
        })
        .unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, &[2.0, 4.0]);
        }
        let out = eval(|g| {
            let q = g.constant(Tensor::ones(&[3, 2]));
            let k = g.constant(Tensor::full(&[3, 2], 0.7));
            let v = g.constant(v.clone());
            kernel_attention_quadratic(g, q, k, v, &mask)
        })
        .unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-14 && (row[1] - 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_two_by_two_hand_case() {
        let out = eval(|g| {
            let q = g.constant(Tensor::eye(2));
            let k = g.constant(Tensor::eye(2));
            let v = g.constant(Tensor::eye(2));
            softmax_attention(g, q, k, v, &PadMask::all(2))
        })
        .unwrap();
        // softmax([1/√2, 0]) computed in extended precision
        let (hi, lo) = (0.669_761_549_326_656_9, 0.330_238_450_673_343_1);
        let want = Tensor::from_rows(&[vec![hi, lo], vec![lo, hi]]).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn quadratic_rejects_nonpositive_features() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::ones(&[2, 2]));
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let v = g.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(
            kernel_attention_quadratic(&mut g, q, k, v, &PadMask::all(2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn linear_flags_non_finite_input() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::ones(&[2, 2]));
        let k = g.constant(Tensor::ones(&[2, 2]));
        let v = g.constant(Tensor::from_rows(&[vec![1.0, f64::NAN], vec![1.0, 1.0]]).unwrap());
        assert!(matches!(
            kernel_attention_linear(&mut g, q, k, v, &PadMask::all(2), 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn accumulation_work_doubles_with_length() {
        for (c, d) in [(16, 16), (8, 64), (3, 5)] {
            assert_eq!(
                linear_accumulation_ops(1024, c, d),
                2 * linear_accumulation_ops(512, c, d)
            );
        }
    }

    #[test]
    fn multi_head_shapes() {
        let mut r = rng::seeded(3);
        for (h, n) in [(2, 8), (4, 8), (2, 16), (4, 16)] {
            let spec = KernelSpec::new(KernelVariant::Oglu, 1, n);
            let d = h * n;
            let p = AttentionLayerParams::<Tensor<f64>>::init(d, h, Some((&spec, true)), &mut r, &mut rng::seeded(9))
                .unwrap();
            let mut g = Graph::new();
            let x = g.constant(rng::normal_tensor(&mut r, &[5, d], 1.0));
            let pv = p.map(|t| g.constant(t.clone()));
            let out = multi_head_kernel_attention(&mut g, x, &pv, &spec, h, &PadMask::all(5), 0.0).unwrap();
            assert_eq!(g.shape(out), &[5, d]);
        }
    }
}
