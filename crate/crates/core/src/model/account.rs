//! Parameter accounting and the kernel budget gate.

use serde::Serialize;

use super::{Model, ModelConfig, ParamGroup};
use crate::data::Schema;
use crate::error::Result;
use crate::real::Real;

/// Kernel parameters against the encoder they are added to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamAccount {
    /// The same architecture with softmax attention and no kernel stacks.
    pub base_params: usize,
    /// Every φ matrix of every head and layer.
    pub kernel_params: usize,
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BudgetVerdict {
    pub pass: bool,
    pub ratio: f64,
    pub limit: f64,
}

/// Counts `model`. The base figure comes from building the softmax
/// baseline of the same config, not from subtracting the kernel share.
pub fn count_params<T: Real>(model: &Model<T>) -> Result<ParamAccount> {
    let kernel_params = model.params().count(Some(ParamGroup::Kernel));
    let baseline = Model::<T>::build(model.config().softmax_baseline(), 0)?;
    let base_params = baseline.params().count(None);
    Ok(ParamAccount {
        base_params,
        kernel_params,
        ratio: kernel_params as f64 / base_params as f64,
    })
}

/// Closed-form size of the softmax encoder described by `config`.
pub fn base_param_formula(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let f = config.ffn_dim;
    let embeddings = (config.vocab_size + config.max_len) * d;
    let block = 4 * d * d + 2 * 2 * d + (d * f + f) + (f * d + d);
    let head = match config.head {
        Schema::Classify => d * config.classes + config.classes,
        Schema::Match => 4 * d * d + d + 2 * d + 2,
    };
    embeddings + config.n_layers * block + 2 * d + head
}

/// Passes iff `ratio < limit`.
pub fn budget_check(account: &ParamAccount, limit: f64) -> BudgetVerdict {
    BudgetVerdict {
        pass: account.ratio < limit,
        ratio: account.ratio,
        limit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::kernels::{KernelSpec, KernelVariant};
    use crate::model::tests::small_config;

    fn config(variant: KernelVariant, depth: usize, h: usize, n: usize) -> ModelConfig {
        let mut c = small_config(variant, depth, Schema::Classify);
        c.n_heads = h;
        c.d_model = h * n;
        c.n_layers = 1;
        c.kernel = KernelSpec::new(variant, depth, n);
        c
    }

    fn kernel_count(c: ModelConfig) -> usize {
        count_params(&Model::<f32>::build(c, 0).unwrap()).unwrap().kernel_params
    }

    #[test]
    fn linear_softplus_h4_n16() {
        assert_eq!(kernel_count(config(KernelVariant::LinearSoftplus, 1, 4, 16)), 1024);
    }

    #[test]
    fn glu_doubles_linear() {
        let lin = kernel_count(config(KernelVariant::LinearSoftplus, 1, 4, 16));
        let glu = kernel_count(config(KernelVariant::Glu, 1, 4, 16));
        assert_eq!(glu, 2 * 4 * 16 * 16);
        assert_eq!(glu, 2 * lin);
    }

    #[test]
    fn aoglu_is_three_quarters_of_glu() {
        let glu = kernel_count(config(KernelVariant::Glu, 1, 4, 16));
        let aoglu = kernel_count(config(KernelVariant::Aoglu, 1, 4, 16));
        assert_eq!(4 * aoglu, 3 * glu);
    }

    #[test]
    fn unshared_keys_double_kernel_count() {
        let mut c = config(KernelVariant::Oglu, 2, 2, 8);
        let shared = kernel_count(c.clone());
        c.share_qk_kernel = false;
        assert_eq!(kernel_count(c), 2 * shared);
    }

    #[test]
    fn base_matches_closed_form() {
        let mut a = small_config(KernelVariant::Oglu, 1, Schema::Classify);
        let mut b = small_config(KernelVariant::Glu, 2, Schema::Match);
        b.n_layers = 3;
        b.ffn_dim = 24;
        a.classes = 5;
        let mut c = config(KernelVariant::LinearSoftplus, 1, 4, 16);
        c.vocab_size = 300;
        c.max_len = 128;
        for cfg in [a, b, c] {
            let acc = count_params(&Model::<f32>::build(cfg.clone(), 0).unwrap()).unwrap();
            assert_eq!(acc.base_params, base_param_formula(&cfg));
            let soft = Model::<f32>::build(cfg.softmax_baseline(), 0).unwrap();
            assert_eq!(soft.params().count(None), acc.base_params);
            assert_eq!(count_params(&soft).unwrap().kernel_params, 0);
        }
    }

    #[test]
    fn budget_is_strict() {
        let zero = ParamAccount {
            base_params: 100,
            kernel_params: 0,
            ratio: 0.0,
        };
        assert!(budget_check(&zero, 0.10).pass);
        let edge = ParamAccount {
            base_params: 1000,
            kernel_params: 100,
            ratio: 100.0 / 1000.0,
        };
        assert!(!budget_check(&edge, 0.10).pass);
    }

    #[test]
    fn softmax_model_has_no_kernel_share() {
        let mut c = config(KernelVariant::Glu, 3, 2, 8);
        c.attention = AttentionKind::Softmax;
        let acc = count_params(&Model::<f64>::build(c, 0).unwrap()).unwrap();
        assert_eq!(acc.kernel_params, 0);
        assert_eq!(acc.ratio, 0.0);
    }
}
