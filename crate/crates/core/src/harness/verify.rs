//! Self-check suite behind `kattn verify`.
//!
//! Each check function returns the measured quantity so callers can apply
//! their own tolerance; [`run_suite`] applies the default ones.

use serde::Serialize;

use super::optim::Adam;
use super::config::OptimizerSection;
use super::train::accumulate_gradients;
use crate::attention::{kernel_attention_linear, kernel_attention_quadratic, AttentionKind, PadMask};
use crate::data::{self, Batch, Example, Schema, SeqBatch};
use crate::error::Result;
use crate::kernels::{
    aoglu_forward, kernel_stack_forward, oglu_output_forward, orthogonal_init_with, KernelParams, KernelSpec,
    KernelVariant, MAX_DEPTH,
};
use crate::model::{base_param_formula, budget_check, count_params, Model, ModelConfig, ParamAccount, Pooling};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::{finite_difference_check, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    /// Passes when `measured > bound`.
    pub fn above(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance: bound,
            passed: measured > bound,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: measured {:.3e}, bound {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

fn random_mask(rng: &mut Rng, len: usize) -> PadMask {
    let mut flags: Vec<bool> = (0..len).map(|_| rng::unit(rng) < 0.8).collect();
    flags[rng::index(rng, len)] = true;
    PadMask::new(flags).expect("one real position")
}

/// Worst `|linear − quadratic|` over `trials` random problems with
/// `L ≤ 64`, `C = n ≤ 16`, `d ≤ 16`, in f64 with `eps = 0`.
pub fn oracle_equivalence(variant: KernelVariant, depth: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let len = 1 + rng::index(&mut rng, 64);
        let n = 4 + rng::index(&mut rng, 13);
        let d = 1 + rng::index(&mut rng, 16);
        let spec = KernelSpec::new(variant, depth, n);
        let params = KernelParams::<Tensor<f64>>::init(&spec, &mut rng)?;
        let q = rng::normal_tensor::<f64>(&mut rng, &[len, n], 1.0);
        let k = rng::normal_tensor::<f64>(&mut rng, &[len, n], 1.0);
        let v = rng::normal_tensor::<f64>(&mut rng, &[len, d], 1.0);
        let mask = random_mask(&mut rng, len);

        let mut g = Graph::new();
        let p = params.constants(&mut g);
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let qf = kernel_stack_forward(&mut g, q, &spec, &p)?;
        let kf = kernel_stack_forward(&mut g, k, &spec, &p)?;
        let lin = kernel_attention_linear(&mut g, qf, kf, v, &mask, 0.0)?;
        let quad = kernel_attention_quadratic(&mut g, qf, kf, v, &mask)?;
        worst = worst.max(g.value(lin).max_abs_diff(g.value(quad))?);
    }
    Ok(worst)
}

/// Smallest φ output over `samples` inputs drawn from N(0, 3²).
pub fn positivity_min<T: Real>(variant: KernelVariant, depth: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::seeded(seed);
    let n = 16;
    let spec = KernelSpec::new(variant, depth, n);
    let params = KernelParams::<Tensor<T>>::init(&spec, &mut rng)?;
    let rows = samples.div_ceil(n).max(1);
    let x = rng::normal_tensor::<T>(&mut rng, &[rows, n], 3.0);
    let mut g = Graph::new();
    let p = params.constants(&mut g);
    let x = g.constant(x);
    let phi = kernel_stack_forward(&mut g, x, &spec, &p)?;
    Ok(g.value(phi).min_value().f64())
}

/// `max |QᵀQ − I|` of a fresh orthogonal `n×n` matrix in f64.
pub fn orthogonal_init_error(n: usize, seed: u64) -> Result<f64> {
    let q: Tensor<f64> = orthogonal_init_with(n, &mut rng::seeded(seed));
    let gram = q.transpose()?.matmul(&q)?;
    gram.max_abs_diff(&Tensor::eye(n))
}

/// `|aoglu(U_g, V_g) − oglu(U_g V_g)|`: the factorized gate equals the
/// materialized one.
pub fn aoglu_materialization_gap(n: usize, rank: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::seeded(seed);
    let x = rng::normal_tensor::<f64>(&mut rng, &[32, n], 1.0);
    let w_f: Tensor<f64> = orthogonal_init_with(n, &mut rng);
    let u = rng::normal_tensor::<f64>(&mut rng, &[n, rank], 0.5);
    let v = rng::normal_tensor::<f64>(&mut rng, &[rank, n], 0.5);
    let w_g = u.matmul(&v)?;
    let mut g = Graph::new();
    let (x, w_f, u, v, w_g) = (g.constant(x), g.constant(w_f), g.constant(u), g.constant(v), g.constant(w_g));
    let a = aoglu_forward(&mut g, x, w_f, u, v)?;
    let b = oglu_output_forward(&mut g, x, w_f, w_g)?;
    g.value(a).max_abs_diff(g.value(b))
}

/// Config of the gradient and equivalence checks: one layer, two heads.
pub fn tiny_model_config(variant: KernelVariant, depth: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 8,
        max_len: 6,
        classes: 3,
        head: Schema::Classify,
        attention: AttentionKind::KernelLinear,
        kernel: KernelSpec::new(variant, depth, 4),
        share_qk_kernel: true,
        eps: 1e-6,
        dropout: 0.0,
        pooling: Pooling::Mean,
    }
}

fn tiny_batch() -> Batch {
    let exs = [
        Example {
            tokens: vec![1, 4, 2, 6, 3],
            pair: None,
            label: 2,
        },
        Example {
            tokens: vec![5, 5, 1],
            pair: None,
            label: 0,
        },
    ];
    Batch::from_examples(&exs.iter().collect::<Vec<_>>(), 6)
}

/// Worst finite-difference relative error per parameter tensor of a
/// one-layer, two-head kernel model in f64 (step 1e-5), loss including
/// the orthogonality penalty.
pub fn model_gradient_errors(variant: KernelVariant, depth: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let model = Model::<f64>::build(tiny_model_config(variant, depth), seed)?;
    let batch = tiny_batch();
    let params: Vec<Tensor<f64>> = model.params().entries().iter().map(|e| e.value.clone()).collect();
    let report = finite_difference_check(
        |g, vars| Ok(model.loss(g, vars, &batch, None)?.total),
        &params,
        1e-5,
    )?;
    Ok(model
        .params()
        .entries()
        .iter()
        .zip(&report.params)
        .map(|(e, r)| (e.name.clone(), if r.failed { f64::INFINITY } else { r.max_rel_error }))
        .collect())
}

/// `max |logits_linear − logits_quadratic|` of a two-layer f64 model.
pub fn model_evaluator_gap(variant: KernelVariant, depth: usize, seed: u64) -> Result<f64> {
    let mut cfg = tiny_model_config(variant, depth);
    cfg.n_layers = 2;
    cfg.eps = 0.0;
    let linear = Model::<f64>::build(cfg, seed)?;
    let quadratic = linear.with_attention(AttentionKind::KernelQuadratic)?;
    let seqs = SeqBatch::from_sequences([&[1u32, 2, 3, 4, 5, 6][..], &[6, 3], &[2, 2, 2, 1]], 6);
    let a = linear.forward_classify(&seqs)?;
    let b = quadratic.forward_classify(&seqs)?;
    a.max_abs_diff(&b)
}

/// Parameter-count relations for `h` heads of dimension `n`, one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountRelations {
    pub linear: usize,
    pub glu: usize,
    pub aoglu: usize,
}

pub fn kernel_counts(h: usize, n: usize) -> Result<CountRelations> {
    let count = |variant| -> Result<usize> {
        let mut cfg = tiny_model_config(variant, 1);
        cfg.n_heads = h;
        cfg.d_model = h * n;
        cfg.kernel = KernelSpec::new(variant, 1, n);
        Ok(count_params(&Model::<f32>::build(cfg, 0)?)?.kernel_params)
    };
    Ok(CountRelations {
        linear: count(KernelVariant::LinearSoftplus)?,
        glu: count(KernelVariant::Glu)?,
        aoglu: count(KernelVariant::Aoglu)?,
    })
}

/// Largest `|counted − closed form|` over three architectures.
pub fn base_count_gap() -> Result<usize> {
    let mut worst = 0;
    for (layers, d, h, ffn, head) in [(1, 8, 2, 8, Schema::Classify), (2, 32, 4, 64, Schema::Match), (3, 64, 4, 128, Schema::Classify)] {
        let mut cfg = tiny_model_config(KernelVariant::Oglu, 1);
        cfg.n_layers = layers;
        cfg.d_model = d;
        cfg.n_heads = h;
        cfg.ffn_dim = ffn;
        cfg.head = head;
        cfg.classes = if head == Schema::Match { 2 } else { 5 };
        cfg.vocab_size = 50;
        cfg.max_len = 40;
        cfg.kernel = KernelSpec::new(KernelVariant::Oglu, 1, d / h);
        let acc = count_params(&Model::<f32>::build(cfg.clone(), 0)?)?;
        worst = worst.max(acc.base_params.abs_diff(base_param_formula(&cfg)));
    }
    Ok(worst)
}

/// Largest parameter difference after one Adam step from `k` micro-batches
/// of `b` examples versus one batch of `k·b`, in f64 without dropout.
pub fn accumulation_gap(k: usize, b: usize, seed: u64) -> Result<f64> {
    let data = data::gen_text_classification(seed, k * b, 24, 32, 2, 3)?;
    let mut cfg = tiny_model_config(KernelVariant::Oglu, 2);
    cfg.vocab_size = 32;
    cfg.max_len = 24;
    cfg.classes = 2;
    let model = Model::<f64>::build(cfg, seed)?;
    let refs: Vec<&Example> = data.examples.iter().collect();
    let micro: Vec<Batch> = refs.chunks(b).map(|c| Batch::from_examples(c, 24)).collect();
    let full = [Batch::from_examples(&refs, 24)];

    let step = |batches: &[Batch]| -> Result<Model<f64>> {
        let mut m = model.clone();
        let (grads, _) = accumulate_gradients(&m, batches, None)?;
        let mut opt = Adam::new(OptimizerSection::default(), m.params());
        opt.step(m.params_mut(), &grads, 5e-4)?;
        Ok(m)
    };
    let (a, c) = (step(&micro)?, step(&full)?);
    let mut worst = 0.0f64;
    for (x, y) in a.params().entries().iter().zip(c.params().entries()) {
        worst = worst.max(x.value.max_abs_diff(&y.value)?);
    }
    Ok(worst)
}

/// The default suite; every check is deterministic.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for variant in KernelVariant::ALL {
        for depth in 1..=MAX_DEPTH {
            let gap = oracle_equivalence(variant, depth, 20, 7 + depth as u64)?;
            out.push(CheckResult::at_most(format!("oracle equivalence {variant:?} depth {depth}"), gap, 1e-10));
        }
    }
    for variant in KernelVariant::ALL {
        let errs = model_gradient_errors(variant, 2, 3)?;
        let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
        out.push(CheckResult::at_most(format!("gradients vs finite differences {variant:?}"), worst, 1e-4));
    }
    for variant in KernelVariant::ALL {
        for depth in 1..=MAX_DEPTH {
            let min = positivity_min::<f32>(variant, depth, 10_000, 11)?;
            out.push(CheckResult::above(format!("positivity {variant:?} depth {depth} (f32)"), min, 0.0));
        }
    }
    let ortho = [4, 16, 64]
        .iter()
        .map(|&n| orthogonal_init_error(n, 5))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    out.push(CheckResult::at_most("orthogonal init", ortho, 1e-12));
    out.push(CheckResult::at_most("AOGLU materialized gate", aoglu_materialization_gap(16, 4, 1)?, 1e-12));
    let c = kernel_counts(4, 16)?;
    out.push(CheckResult::at_most("GLU = 2 x linear params", (c.glu as f64 - 2.0 * c.linear as f64).abs(), 0.0));
    out.push(CheckResult::at_most("AOGLU = 0.75 x GLU params", (c.aoglu as f64 - 0.75 * c.glu as f64).abs(), 0.0));
    out.push(CheckResult::at_most("base params closed form", base_count_gap()? as f64, 0.0));
    let edge = ParamAccount {
        base_params: 1000,
        kernel_params: 100,
        ratio: 0.1,
    };
    out.push(CheckResult::at_most(
        "budget rejects ratio 0.10",
        budget_check(&edge, 0.10).pass as u8 as f64,
        0.0,
    ));
    out.push(CheckResult::at_most(
        "linear = quadratic end to end",
        model_evaluator_gap(KernelVariant::Aoglu, 2, 2)?,
        1e-8,
    ));
    out.push(CheckResult::at_most("gradient accumulation", accumulation_gap(4, 3, 9)?, 1e-12));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite().unwrap();
        for r in &results {
            assert!(r.passed, "{}", r.line());
        }
        assert!(results.len() > 30);
    }
}
