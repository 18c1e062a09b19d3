//! Trainable positive feature maps φ(·) applied to attention queries and
//! keys, one stack per head.
//!
//! A stack of `depth` layers runs `depth - 1` intermediate layers followed by
//! one output layer whose result is strictly positive:
//!
//! | variant          | intermediate layer            | output layer                    |
//! |------------------|-------------------------------|---------------------------------|
//! | `LinearSoftplus` | `act(X W)`                    | `softplus(X W)`                 |
//! | `Glu`            | `X W_f ⊙ σ(X W_g)`            | `softplus(X W_f) ⊙ σ(X W_g)`    |
//! | `Oglu`           | as `Glu`, `W_f` orthogonal    | as `Glu`, `W_f` orthogonal      |
//! | `Aoglu`          | as `Oglu` (or low-rank gate)  | `softplus(X W_f) ⊙ σ(X U_g V_g)`|
//!
//! `act` is the configured [`InnerNonlinearity`]. No layer has a bias and
//! there is no normalization between layers.
//!
//! The regularized set is every `W` of a `LinearSoftplus` stack and every
//! `W_f` of an `Oglu`/`Aoglu` stack; plain `Glu` has none. Regularized
//! matrices start orthogonal when [`KernelSpec::orthogonal_init`] is set and
//! are pulled toward orthogonality by [`orthogonality_penalty`]. All other
//! matrices are drawn uniformly from `±1/√n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    LinearSoftplus,
    Glu,
    Oglu,
    Aoglu,
}

impl KernelVariant {
    pub const ALL: [KernelVariant; 4] = [Self::LinearSoftplus, Self::Glu, Self::Oglu, Self::Aoglu];

    pub fn regularized(self) -> bool {
        self != Self::Glu
    }
}

/// Activation between stacked `LinearSoftplus` layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerNonlinearity {
    Softplus,
    #[default]
    Gelu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub depth: usize,
    pub head_dim: usize,
    /// Rank of the factorized gate; only read for `Aoglu`.
    pub gate_rank: usize,
    pub orthogonal_init: bool,
    pub ortho_reg_weight: f64,
    pub inner_nonlinearity: InnerNonlinearity,
    /// `Aoglu` only: factorize the gate of intermediate layers too, not just
    /// the output layer.
    pub low_rank_all_layers: bool,
}

pub const MAX_DEPTH: usize = 3;

impl KernelSpec {
    /// Defaults: gate rank `n/4`, orthogonal init on, `λ = 0.01`, gelu
    /// between linear layers, low-rank gate on the output layer only.
    pub fn new(variant: KernelVariant, depth: usize, head_dim: usize) -> Self {
        Self {
            variant,
            depth,
            head_dim,
            gate_rank: (head_dim / 4).max(1),
            orthogonal_init: true,
            ortho_reg_weight: 0.01,
            inner_nonlinearity: InnerNonlinearity::Gelu,
            low_rank_all_layers: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::config(
                "kernel.depth",
                format!("must be in 1..={MAX_DEPTH}, got {}", self.depth),
            ));
        }
        if self.head_dim < 2 {
            return Err(Error::config(
                "kernel.head_dim",
                format!("must be at least 2, got {}", self.head_dim),
            ));
        }
        if self.variant == KernelVariant::Aoglu {
            check_rank(self.gate_rank, self.head_dim)?;
        }
        if !(self.ortho_reg_weight >= 0.0 && self.ortho_reg_weight.is_finite()) {
            return Err(Error::config(
                "kernel.lambda",
                format!("must be a non-negative number, got {}", self.ortho_reg_weight),
            ));
        }
        Ok(())
    }

    fn layer_kind(&self, layer: usize) -> LayerKind {
        let last = layer + 1 == self.depth;
        match self.variant {
            KernelVariant::LinearSoftplus => LayerKind::Linear,
            KernelVariant::Glu | KernelVariant::Oglu => LayerKind::Glu,
            KernelVariant::Aoglu if last || self.low_rank_all_layers => LayerKind::LowRank,
            KernelVariant::Aoglu => LayerKind::Glu,
        }
    }

    /// Parameters of one stack (one head, one of queries/keys).
    pub fn param_count(&self) -> usize {
        let n = self.head_dim;
        (0..self.depth)
            .map(|l| match self.layer_kind(l) {
                LayerKind::Linear => n * n,
                LayerKind::Glu => 2 * n * n,
                LayerKind::LowRank => n * n + 2 * n * self.gate_rank,
            })
            .sum()
    }
}

fn check_rank(rank: usize, n: usize) -> Result<()> {
    if rank == 0 || 2 * rank >= n {
        return Err(Error::config(
            "kernel.gate_rank",
            format!("needs 1 <= r < n/2, got r = {rank} with n = {n}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Linear,
    Glu,
    LowRank,
}

/// Weights of one kernel layer. `H` is a tensor for stored weights, a
/// [`Var`] inside a graph, or an id inside a model.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelLayer<H> {
    Linear { w: H },
    Glu { w_f: H, w_g: H },
    LowRank { w_f: H, u_g: H, v_g: H },
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams<H> {
    pub layers: Vec<KernelLayer<H>>,
}

impl<H> KernelParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> KernelParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                KernelLayer::Linear { w } => KernelLayer::Linear { w: f(w) },
                KernelLayer::Glu { w_f, w_g } => KernelLayer::Glu {
                    w_f: f(w_f),
                    w_g: f(w_g),
                },
                KernelLayer::LowRank { w_f, u_g, v_g } => KernelLayer::LowRank {
                    w_f: f(w_f),
                    u_g: f(u_g),
                    v_g: f(v_g),
                },
            })
            .collect();
        KernelParams { layers }
    }

    pub fn matrices(&self) -> Vec<&H> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                KernelLayer::Linear { w } => vec![w],
                KernelLayer::Glu { w_f, w_g } => vec![w_f, w_g],
                KernelLayer::LowRank { w_f, u_g, v_g } => vec![w_f, u_g, v_g],
            })
            .collect()
    }

    /// Matrices covered by the orthogonality penalty under `variant`.
    pub fn regularized(&self, variant: KernelVariant) -> Vec<&H> {
        if !variant.regularized() {
            return Vec::new();
        }
        self.layers
            .iter()
            .map(|l| match l {
                KernelLayer::Linear { w } => w,
                KernelLayer::Glu { w_f, .. } | KernelLayer::LowRank { w_f, .. } => w_f,
            })
            .collect()
    }
}

impl<T: Real> KernelParams<Tensor<T>> {
    pub fn init(spec: &KernelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let n = spec.head_dim;
        let bound = 1.0 / (n as f64).sqrt();
        let orth = spec.orthogonal_init && spec.variant.regularized();
        let main = |rng: &mut Rng| -> Tensor<T> {
            if orth {
                orthogonal_init_with(n, rng)
            } else {
                rng::uniform_tensor(rng, &[n, n], bound)
            }
        };
        let mut layers = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let layer = match spec.layer_kind(l) {
                LayerKind::Linear => KernelLayer::Linear { w: main(rng) },
                LayerKind::Glu => {
                    let w_f = main(rng);
                    KernelLayer::Glu {
                        w_f,
                        w_g: rng::uniform_tensor(rng, &[n, n], bound),
                    }
                }
                LayerKind::LowRank => {
                    let w_f = main(rng);
                    KernelLayer::LowRank {
                        w_f,
                        u_g: rng::uniform_tensor(rng, &[n, spec.gate_rank], bound),
                        v_g: rng::uniform_tensor(rng, &[spec.gate_rank, n], bound),
                    }
                }
            };
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn count(&self) -> usize {
        self.matrices().iter().map(|m| m.numel()).sum()
    }

    /// Adds every matrix to `g` as a constant.
    pub fn constants(&self, g: &mut Graph<T>) -> KernelParams<Var> {
        self.map(|t| g.constant(t.clone()))
    }

    /// `Σ ‖WᵀW − I‖_F²` over the regularized set, without the `λ` factor.
    pub fn orthogonality_deviation(&self, variant: KernelVariant) -> f64 {
        self.regularized(variant)
            .into_iter()
            .map(|w| orthogonality_deviation(w).expect("square kernel matrix"))
            .sum()
    }
}

/// `‖WᵀW − I‖_F²` evaluated in f64.
pub fn orthogonality_deviation<T: Real>(w: &Tensor<T>) -> Result<f64> {
    let w = w.cast::<f64>();
    let gram = w.transpose()?.matmul(&w)?;
    let (n, _) = gram.dims2()?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = gram.at(i, j) - if i == j { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    Ok(total)
}

/// Haar-distributed orthogonal `n×n` matrix: Q of the QR factorization of a
/// standard Gaussian draw, with the signs of R's diagonal folded into Q.
pub fn orthogonal_init<T: Real>(n: usize, seed: u64) -> Tensor<T> {
    orthogonal_init_with(n, &mut rng::seeded(seed))
}

pub fn orthogonal_init_with<T: Real>(n: usize, rng: &mut Rng) -> Tensor<T> {
    assert!(n >= 1, "orthogonal_init needs n >= 1");
    let draw: Vec<f64> = (0..n * n).map(|_| rng::normal(rng)).collect();
    let qr = DMatrix::from_row_slice(n, n, &draw).qr();
    let (q, r) = (qr.q(), qr.r());
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        T::of(q[(i, j)] * sign)
    })
}

fn last_dim<T: Real>(g: &Graph<T>, x: Var) -> Result<usize> {
    g.shape(x)
        .last()
        .copied()
        .ok_or_else(|| Error::shape("kernel input", g.shape(x), &[]))
}

fn check_square<T: Real>(g: &Graph<T>, op: &'static str, x: Var, w: Var) -> Result<()> {
    let n = last_dim(g, x)?;
    if g.shape(w) != [n, n] {
        return Err(Error::shape(op, g.shape(x), g.shape(w)));
    }
    Ok(())
}

/// `softplus(X W)`; strictly positive.
pub fn linear_kernel_forward<T: Real>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    check_square(g, "linear_kernel_forward", x, w)?;
    let xw = g.matmul(x, w)?;
    Ok(g.softplus(xw))
}

/// `X W_f ⊙ σ(X W_g)`. Not positive; intermediate layers only.
pub fn glu_forward<T: Real>(g: &mut Graph<T>, x: Var, w_f: Var, w_g: Var) -> Result<Var> {
    check_square(g, "glu_forward", x, w_f)?;
    check_square(g, "glu_forward", x, w_g)?;
    let lin = g.matmul(x, w_f)?;
    let pre = g.matmul(x, w_g)?;
    let gate = g.sigmoid(pre);
    g.mul(lin, gate)
}

/// `softplus(X W_f) ⊙ σ(X W_g)`; strictly positive.
pub fn oglu_output_forward<T: Real>(g: &mut Graph<T>, x: Var, w_f: Var, w_g: Var) -> Result<Var> {
    check_square(g, "oglu_output_forward", x, w_f)?;
    check_square(g, "oglu_output_forward", x, w_g)?;
    let lin = g.matmul(x, w_f)?;
    let pos = g.softplus(lin);
    let pre = g.matmul(x, w_g)?;
    let gate = g.sigmoid(pre);
    g.mul(pos, gate)
}

fn low_rank_gate<T: Real>(g: &mut Graph<T>, x: Var, u_g: Var, v_g: Var) -> Result<Var> {
    let n = last_dim(g, x)?;
    let (un, r) = match *g.shape(u_g) {
        [a, b] => (a, b),
        ref s => return Err(Error::shape("low-rank gate", s, &[n])),
    };
    if un != n || g.shape(v_g) != [r, n] {
        return Err(Error::shape("low-rank gate", g.shape(u_g), g.shape(v_g)));
    }
    check_rank(r, n)?;
    let xu = g.matmul(x, u_g)?;
    let pre = g.matmul(xu, v_g)?;
    Ok(g.sigmoid(pre))
}

/// `softplus(X W_f) ⊙ σ((X U_g) V_g)`; the gate is never materialized.
pub fn aoglu_forward<T: Real>(g: &mut Graph<T>, x: Var, w_f: Var, u_g: Var, v_g: Var) -> Result<Var> {
    check_square(g, "aoglu_forward", x, w_f)?;
    let gate = low_rank_gate(g, x, u_g, v_g)?;
    let lin = g.matmul(x, w_f)?;
    let pos = g.softplus(lin);
    g.mul(pos, gate)
}

fn low_rank_glu<T: Real>(g: &mut Graph<T>, x: Var, w_f: Var, u_g: Var, v_g: Var) -> Result<Var> {
    check_square(g, "low-rank glu", x, w_f)?;
    let gate = low_rank_gate(g, x, u_g, v_g)?;
    let lin = g.matmul(x, w_f)?;
    g.mul(lin, gate)
}

fn check_params<H>(spec: &KernelSpec, params: &KernelParams<H>) -> Result<()> {
    let mismatch = || {
        Error::Contract(format!(
            "kernel params do not match spec {:?} depth {}",
            spec.variant, spec.depth
        ))
    };
    if params.layers.len() != spec.depth {
        return Err(mismatch());
    }
    for (l, layer) in params.layers.iter().enumerate() {
        let ok = matches!(
            (spec.layer_kind(l), layer),
            (LayerKind::Linear, KernelLayer::Linear { .. })
                | (LayerKind::Glu, KernelLayer::Glu { .. })
                | (LayerKind::LowRank, KernelLayer::LowRank { .. })
        );
        if !ok {
            return Err(mismatch());
        }
    }
    Ok(())
}

/// Runs the whole φ stack on `x[L, n]`; the result is strictly positive.
pub fn kernel_stack_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    spec: &KernelSpec,
    params: &KernelParams<Var>,
) -> Result<Var> {
    check_params(spec, params)?;
    let mut h = x;
    let last = spec.depth - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        h = match (layer, l == last) {
            (&KernelLayer::Linear { w }, true) => linear_kernel_forward(g, h, w)?,
            (&KernelLayer::Linear { w }, false) => {
                check_square(g, "kernel layer", h, w)?;
                let pre = g.matmul(h, w)?;
                match spec.inner_nonlinearity {
                    InnerNonlinearity::Softplus => g.softplus(pre),
                    InnerNonlinearity::Gelu => g.gelu(pre),
                    InnerNonlinearity::Sigmoid => g.sigmoid(pre),
                }
            }
            (&KernelLayer::Glu { w_f, w_g }, true) => oglu_output_forward(g, h, w_f, w_g)?,
            (&KernelLayer::Glu { w_f, w_g }, false) => glu_forward(g, h, w_f, w_g)?,
            (&KernelLayer::LowRank { w_f, u_g, v_g }, true) => aoglu_forward(g, h, w_f, u_g, v_g)?,
            (&KernelLayer::LowRank { w_f, u_g, v_g }, false) => low_rank_glu(g, h, w_f, u_g, v_g)?,
        };
    }
    Ok(h)
}

/// `λ · Σ ‖WᵀW − I‖_F²` over the regularized set. Exactly zero (a constant)
/// when the set is empty or `λ = 0`.
pub fn orthogonality_penalty<T: Real>(
    g: &mut Graph<T>,
    params: &KernelParams<Var>,
    variant: KernelVariant,
    lambda: f64,
) -> Result<Var> {
    let mats: Vec<Var> = params.regularized(variant).into_iter().copied().collect();
    penalty_over(g, &mats, lambda)
}

pub(crate) fn penalty_over<T: Real>(g: &mut Graph<T>, mats: &[Var], lambda: f64) -> Result<Var> {
    if mats.is_empty() || lambda == 0.0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mut terms = Vec::with_capacity(mats.len());
    for &w in mats {
        let (rows, n) = match *g.shape(w) {
            [a, b] => (a, b),
            ref s => return Err(Error::shape("orthogonality_penalty", s, &[])),
        };
        if rows != n {
            return Err(Error::shape("orthogonality_penalty", g.shape(w), &[n, n]));
        }
        let wt = g.transpose(w)?;
        let gram = g.matmul(wt, w)?;
        let eye = g.constant(Tensor::eye(n));
        let diff = g.sub(gram, eye)?;
        let sq = g.square(diff);
        terms.push(g.sum(sq));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, T::of(lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn run(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn orthogonal_init_one_by_one_is_sign() {
        for seed in 0..5 {
            let q = orthogonal_init::<f64>(1, seed);
            assert_eq!(q.data()[0].abs(), 1.0);
        }
    }

    #[test]
    fn orthogonal_init_is_orthogonal_and_seed_dependent() {
        let q = orthogonal_init::<f64>(8, 1);
        let gram = q.transpose().unwrap().matmul(&q).unwrap();
        assert!(gram.max_abs_diff(&Tensor::eye(8)).unwrap() <= 1e-12);
        let q2 = orthogonal_init::<f64>(8, 2);
        assert!(q.max_abs_diff(&q2).unwrap() > 1e-3);
        let q32 = orthogonal_init::<f32>(16, 3);
        let gram = q32.transpose().unwrap().matmul(&q32).unwrap();
        assert!(gram.max_abs_diff(&Tensor::eye(16)).unwrap() <= 1e-6);
    }

    #[test]
    fn linear_kernel_values() {
        let out = run(|g| {
            let x = g.constant(Tensor::zeros(&[3, 2]));
            let w = g.constant(mat(&[vec![0.3, -2.0], vec![5.0, 1.0]]));
            linear_kernel_forward(g, x, w)
        });
        assert!(out.data().iter().all(|&v| v == 2f64.ln()));

        let out = run(|g| {
            let x = g.constant(mat(&[vec![1.0, -1.0]]));
            let w = g.constant(Tensor::eye(2));
            linear_kernel_forward(g, x, w)
        });
        assert!((out.data()[0] - 1.313_261_687_518_222_8).abs() < 1e-15);
        assert!((out.data()[1] - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn linear_kernel_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let w = g.constant(Tensor::eye(3));
        assert!(matches!(linear_kernel_forward(&mut g, x, w), Err(Error::Shape { .. })));
    }

    #[test]
    fn glu_values_and_closed_gate() {
        let out = run(|g| {
            let x = g.constant(mat(&[vec![1.0, 0.0]]));
            let i1 = g.constant(Tensor::eye(2));
            let i2 = g.constant(Tensor::eye(2));
            glu_forward(g, x, i1, i2)
        });
        assert!((out.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);

        let out = run(|g| {
            let x = g.constant(mat(&[vec![1.0, 2.0], vec![0.5, 3.0]]));
            let w_f = g.constant(Tensor::eye(2));
            let w_g = g.constant(Tensor::eye(2).map(|v| -50.0 * v));
            glu_forward(g, x, w_f, w_g)
        });
        assert!(out.data().iter().all(|v| v.abs() < 1e-9), "{out:?}");
    }

    #[test]
    fn oglu_output_values() {
        let out = run(|g| {
            let x = g.constant(Tensor::zeros(&[2, 4]));
            let w_f = g.constant(orthogonal_init(4, 0));
            let w_g = g.constant(orthogonal_init(4, 1));
            oglu_output_forward(g, x, w_f, w_g)
        });
        assert!(out.data().iter().all(|&v| (v - 0.346_573_590_279_972_65).abs() < 1e-15));

        let out = run(|g| {
            let x = g.constant(mat(&[vec![2.0]]));
            let w_f = g.constant(Tensor::eye(1));
            let w_g = g.constant(Tensor::eye(1));
            oglu_output_forward(g, x, w_f, w_g)
        });
        assert!((out.data()[0] - 1.873_391_977_195_959_5).abs() < 1e-14);
    }

    #[test]
    fn aoglu_rejects_rank_out_of_bounds() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 8]));
        let w_f = g.constant(Tensor::eye(8));
        let u = g.constant(Tensor::zeros(&[8, 4]));
        let v = g.constant(Tensor::zeros(&[4, 8]));
        assert!(matches!(aoglu_forward(&mut g, x, w_f, u, v), Err(Error::Config { .. })));
        assert!(KernelSpec {
            gate_rank: 4,
            ..KernelSpec::new(KernelVariant::Aoglu, 1, 8)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn aoglu_at_zero_input() {
        let spec = KernelSpec::new(KernelVariant::Aoglu, 1, 8);
        let p = KernelParams::<Tensor<f64>>::init(&spec, &mut rng::seeded(4)).unwrap();
        let out = run(|g| {
            let x = g.constant(Tensor::zeros(&[3, 8]));
            let pv = p.constants(g);
            kernel_stack_forward(g, x, &spec, &pv)
        });
        assert!(out.data().iter().all(|&v| (v - 0.5 * 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn parameter_counts() {
        let n = 64;
        let aoglu = KernelSpec {
            gate_rank: 16,
            ..KernelSpec::new(KernelVariant::Aoglu, 1, n)
        };
        let glu = KernelSpec::new(KernelVariant::Glu, 1, n);
        assert_eq!(aoglu.param_count(), 6144);
        assert_eq!(glu.param_count(), 8192);
        assert_eq!(4 * aoglu.param_count(), 3 * glu.param_count());
        let deep = KernelSpec { depth: 3, ..aoglu.clone() };
        assert_eq!(deep.param_count(), 22528);
        let deep_all = KernelSpec {
            low_rank_all_layers: true,
            ..deep
        };
        assert_eq!(deep_all.param_count(), 3 * 6144);
        let p = KernelParams::<Tensor<f32>>::init(&deep_all, &mut rng::seeded(0)).unwrap();
        assert_eq!(p.count(), deep_all.param_count());
    }

    #[test]
    fn depth_bounds() {
        assert!(KernelSpec::new(KernelVariant::Glu, 0, 8).validate().is_err());
        assert!(KernelSpec::new(KernelVariant::Glu, 4, 8).validate().is_err());
        assert!(KernelSpec::new(KernelVariant::Glu, 3, 8).validate().is_ok());
        assert!(KernelSpec::new(KernelVariant::Glu, 1, 1).validate().is_err());
    }

    #[test]
    fn stack_layers_and_mismatch() {
        let spec = KernelSpec::new(KernelVariant::Oglu, 2, 4);
        let p = KernelParams::<Tensor<f64>>::init(&spec, &mut rng::seeded(1)).unwrap();
        assert!(p.layers.iter().all(|l| matches!(l, KernelLayer::Glu { .. })));
        let other = KernelSpec::new(KernelVariant::LinearSoftplus, 2, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let pv = p.constants(&mut g);
        assert!(kernel_stack_forward(&mut g, x, &other, &pv).is_err());
        let out = kernel_stack_forward(&mut g, x, &spec, &pv).unwrap();
        assert!(g.value(out).min_value() > 0.0);
    }

    #[test]
    fn penalty_values() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::eye(2).map(|v| 2.0 * v));
        let params = KernelParams {
            layers: vec![KernelLayer::Linear { w }],
        };
        let p = orthogonality_penalty(&mut g, &params, KernelVariant::LinearSoftplus, 1.0).unwrap();
        assert_eq!(g.value(p).item().unwrap(), 18.0);
        let p = orthogonality_penalty(&mut g, &params, KernelVariant::LinearSoftplus, 0.0).unwrap();
        assert_eq!(g.value(p).item().unwrap(), 0.0);

        let q = g.constant(orthogonal_init(6, 9));
        let params = KernelParams {
            layers: vec![KernelLayer::Linear { w: q }],
        };
        let p = orthogonality_penalty(&mut g, &params, KernelVariant::LinearSoftplus, 1.0).unwrap();
        assert!(g.value(p).item().unwrap() <= 1e-10);

        let spec = KernelSpec::new(KernelVariant::Glu, 2, 4);
        let gp = KernelParams::<Tensor<f64>>::init(&spec, &mut rng::seeded(2)).unwrap().constants(&mut g);
        let p = orthogonality_penalty(&mut g, &gp, KernelVariant::Glu, 5.0).unwrap();
        assert_eq!(g.value(p).item().unwrap(), 0.0);
    }
}
