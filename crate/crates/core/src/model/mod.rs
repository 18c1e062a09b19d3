//! Pre-norm transformer encoder over the attention evaluators.
//!
//! Block: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a two-layer gelu
//! FFN; a final layer norm precedes pooling. Token and learned positional
//! embeddings are summed at the input. Dropout (when training) follows the
//! attention output projection and the FFN inner activation.
//!
//! Parameters live in a flat [`ParamStore`]; the structured layout refers to
//! them by [`ParamId`]. Base weights and kernel weights are drawn from two
//! independent streams of the model seed, so a softmax model and a kernel
//! model built from the same seed share every base weight.

mod account;
pub mod checkpoint;

pub use account::{base_param_formula, budget_check, count_params, BudgetVerdict, ParamAccount};

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention_batch, AttentionKind, AttentionLayerParams, AttentionSetup, PadMask};
use crate::data::{Batch, Schema, SeqBatch};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelParams, KernelSpec};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;
const KERNEL_STREAM: u64 = 0x6b65_726e_656c_5f31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    /// Hidden state of the first position.
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub classes: usize,
    pub head: Schema,
    pub attention: AttentionKind,
    pub kernel: KernelSpec,
    pub share_qk_kernel: bool,
    pub eps: f64,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.n_layers", self.n_layers),
            ("model.ffn_dim", self.ffn_dim),
            ("model.max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model = {} is not a multiple of {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2"));
        }
        if self.head == Schema::Match && self.classes != 2 {
            return Err(Error::config("model.classes", "matching head is binary"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("model.eps", "must be non-negative"));
        }
        if self.kernel.head_dim != self.head_dim() {
            return Err(Error::config(
                "kernel.head_dim",
                format!("is {} but d_model / n_heads = {}", self.kernel.head_dim, self.head_dim()),
            ));
        }
        if self.attention.uses_kernel() {
            self.kernel.validate()?;
        }
        Ok(())
    }

    /// Same architecture with exact softmax attention and no φ.
    pub fn softmax_baseline(&self) -> Self {
        Self {
            attention: AttentionKind::Softmax,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Base,
    Kernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    /// Covered by the orthogonality penalty.
    pub regularized: bool,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn push(&mut self, name: String, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            group,
            regularized: false,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.value.numel())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    attn: AttentionLayerParams<ParamId>,
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Classify { w: ParamId, b: ParamId },
    Match { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Loss of one batch, split into parts.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub task: Var,
    pub penalty: Var,
}

fn register_kernel<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    params: &KernelParams<Tensor<T>>,
    variant: kernels::KernelVariant,
) -> KernelParams<ParamId> {
    use kernels::KernelLayer;
    let reg = variant.regularized();
    let mut push = |l: usize, name: &str, t: &Tensor<T>, regularized: bool| {
        let id = store.push(format!("{prefix}.layer{l}.{name}"), ParamGroup::Kernel, t.clone());
        store.entries[id.0].regularized = regularized && reg;
        id
    };
    let layers = params
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| match layer {
            KernelLayer::Linear { w } => KernelLayer::Linear { w: push(l, "w", w, true) },
            KernelLayer::Glu { w_f, w_g } => KernelLayer::Glu {
                w_f: push(l, "w_f", w_f, true),
                w_g: push(l, "w_g", w_g, false),
            },
            KernelLayer::LowRank { w_f, u_g, v_g } => KernelLayer::LowRank {
                w_f: push(l, "w_f", w_f, true),
                u_g: push(l, "u_g", u_g, false),
                v_g: push(l, "v_g", v_g, false),
            },
        })
        .collect();
    KernelParams { layers }
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = rng::seeded(seed);
        let mut kernel_rng = rng::seeded(seed ^ KERNEL_STREAM);
        let mut store = ParamStore::default();
        let base = ParamGroup::Base;

        let tok_emb = store.push("tok_emb".into(), base, rng::normal_tensor(&mut rng, &[config.vocab_size, d], EMBED_STD));
        let pos_emb = store.push("pos_emb".into(), base, rng::normal_tensor(&mut rng, &[config.max_len, d], EMBED_STD));
        let kernel = config
            .attention
            .uses_kernel()
            .then_some((&config.kernel, config.share_qk_kernel));

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("blocks.{l}");
            let ln = |store: &mut ParamStore<T>, name: &str| {
                (
                    store.push(format!("{p}.{name}.gain"), base, Tensor::ones(&[d])),
                    store.push(format!("{p}.{name}.bias"), base, Tensor::zeros(&[d])),
                )
            };
            let ln1 = ln(&mut store, "ln1");
            let attn_t = AttentionLayerParams::<Tensor<T>>::init(d, config.n_heads, kernel, &mut rng, &mut kernel_rng)?;
            let w_q = store.push(format!("{p}.attn.w_q"), base, attn_t.w_q.clone());
            let w_k = store.push(format!("{p}.attn.w_k"), base, attn_t.w_k.clone());
            let w_v = store.push(format!("{p}.attn.w_v"), base, attn_t.w_v.clone());
            let w_o = store.push(format!("{p}.attn.w_o"), base, attn_t.w_o.clone());
            let heads = attn_t
                .heads
                .iter()
                .enumerate()
                .map(|(h, hk)| crate::attention::HeadKernels {
                    query: register_kernel(&mut store, &format!("{p}.attn.head{h}.query"), &hk.query, config.kernel.variant),
                    key: hk
                        .key
                        .as_ref()
                        .map(|k| register_kernel(&mut store, &format!("{p}.attn.head{h}.key"), k, config.kernel.variant)),
                })
                .collect();
            let ln2 = ln(&mut store, "ln2");
            let f = config.ffn_dim;
            let ffn_in = (
                store.push(format!("{p}.ffn.w1"), base, rng::uniform_tensor(&mut rng, &[d, f], 1.0 / (d as f64).sqrt())),
                store.push(format!("{p}.ffn.b1"), base, Tensor::zeros(&[f])),
            );
            let ffn_out = (
                store.push(format!("{p}.ffn.w2"), base, rng::uniform_tensor(&mut rng, &[f, d], 1.0 / (f as f64).sqrt())),
                store.push(format!("{p}.ffn.b2"), base, Tensor::zeros(&[d])),
            );
            blocks.push(Block {
                ln1,
                attn: AttentionLayerParams {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    heads,
                },
                ln2,
                ffn_in,
                ffn_out,
            });
        }
        let ln_f = (
            store.push("ln_f.gain".into(), base, Tensor::ones(&[d])),
            store.push("ln_f.bias".into(), base, Tensor::zeros(&[d])),
        );
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let head = match config.head {
            Schema::Classify => Head::Classify {
                w: store.push("head.w".into(), base, rng::uniform_tensor(&mut rng, &[d, config.classes], bound(d))),
                b: store.push("head.b".into(), base, Tensor::zeros(&[config.classes])),
            },
            Schema::Match => Head::Match {
                w1: store.push("head.w1".into(), base, rng::uniform_tensor(&mut rng, &[4 * d, d], bound(4 * d))),
                b1: store.push("head.b1".into(), base, Tensor::zeros(&[d])),
                w2: store.push("head.w2".into(), base, rng::uniform_tensor(&mut rng, &[d, 2], bound(d))),
                b2: store.push("head.b2".into(), base, Tensor::zeros(&[2])),
            },
        };
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                tok_emb,
                pos_emb,
                blocks,
                ln_f,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Evaluate with a different attention evaluator over the same weights.
    /// Switching between the two kernel evaluators is always possible;
    /// switching to or from softmax requires matching kernel weights.
    pub fn with_attention(&self, kind: AttentionKind) -> Result<Self> {
        if kind.uses_kernel() != self.config.attention.uses_kernel() {
            return Err(Error::config("model.attention", "cannot add or drop kernel weights"));
        }
        let mut m = self.clone();
        m.config.attention = kind;
        Ok(m)
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .ids()
            .map(|id| {
                let v = self.params.get(id).clone();
                if trainable {
                    g.param(id, v)
                } else {
                    g.constant(v)
                }
            })
            .collect()
    }

    fn check_ids(&self, seqs: &SeqBatch) -> Result<()> {
        if let Some(&bad) = seqs.ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::data(
                None,
                format!("token id {bad} outside vocabulary of {}", self.config.vocab_size),
            ));
        }
        if seqs.len > self.config.max_len {
            return Err(Error::data(
                None,
                format!("sequence length {} exceeds max_len {}", seqs.len, self.config.max_len),
            ));
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(g.shape(x), |_| if rng::unit(rng) < p { T::zero() } else { keep });
        let m = g.constant(mask);
        g.mul(x, m)
    }

    fn layer_norm(&self, g: &mut Graph<T>, vars: &[Var], x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let n = g.layer_norm_rows(x, T::of(LN_EPS))?;
        let n = g.mul(n, vars[gain.0])?;
        g.add(n, vars[bias.0])
    }

    /// Pooled sequence representations `[B, d_model]`.
    pub fn encode(&self, g: &mut Graph<T>, vars: &[Var], seqs: &SeqBatch, mut dropout: Option<&mut Rng>) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract("bound variables do not belong to this model".into()));
        }
        self.check_ids(seqs)?;
        let masks = seqs.masks()?;
        let (b, len) = (seqs.batch, seqs.len);
        let ids: Vec<usize> = seqs.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
        let tok = g.gather_rows(vars[self.layout.tok_emb.0], &ids)?;
        let pos = g.gather_rows(vars[self.layout.pos_emb.0], &positions)?;
        let mut x = g.add(tok, pos)?;

        let setup = AttentionSetup {
            kind: self.config.attention,
            n_heads: self.config.n_heads,
            kernel: &self.config.kernel,
            eps: self.config.eps,
        };
        for block in &self.layout.blocks {
            let h = self.layer_norm(g, vars, x, block.ln1)?;
            let attn = block.attn.map(|id| vars[id.0]);
            let a = multi_head_attention_batch(g, h, &attn, &setup, &masks)?;
            let a = self.dropout(g, a, dropout.as_deref_mut())?;
            x = g.add(x, a)?;

            let h = self.layer_norm(g, vars, x, block.ln2)?;
            let f = g.matmul(h, vars[block.ffn_in.0 .0])?;
            let f = g.add(f, vars[block.ffn_in.1 .0])?;
            let f = g.gelu(f);
            let f = self.dropout(g, f, dropout.as_deref_mut())?;
            let f = g.matmul(f, vars[block.ffn_out.0 .0])?;
            let f = g.add(f, vars[block.ffn_out.1 .0])?;
            x = g.add(x, f)?;
        }
        let x = self.layer_norm(g, vars, x, self.layout.ln_f)?;
        self.pool(g, x, &masks, len)
    }

    fn pool(&self, g: &mut Graph<T>, x: Var, masks: &[PadMask], len: usize) -> Result<Var> {
        let b = masks.len();
        match self.config.pooling {
            Pooling::Cls => {
                let firsts: Vec<usize> = (0..b).map(|i| i * len).collect();
                g.gather_rows(x, &firsts)
            }
            Pooling::Mean => {
                let mut w = Tensor::zeros(&[b, b * len]);
                for (i, m) in masks.iter().enumerate() {
                    let share = T::one() / T::of(m.real_count() as f64);
                    for (j, &real) in m.flags().iter().enumerate() {
                        if real {
                            w.data_mut()[i * b * len + i * len + j] = share;
                        }
                    }
                }
                let w = g.constant(w);
                g.matmul(w, x)
            }
        }
    }

    /// Class logits `[B, classes]` for the classification head.
    pub fn classify_logits(&self, g: &mut Graph<T>, vars: &[Var], seqs: &SeqBatch, dropout: Option<&mut Rng>) -> Result<Var> {
        let Head::Classify { w, b } = self.layout.head else {
            return Err(Error::config("model.head", "model has a matching head"));
        };
        let pooled = self.encode(g, vars, seqs, dropout)?;
        let z = g.matmul(pooled, vars[w.0])?;
        g.add(z, vars[b.0])
    }

    /// Pair logits `[B, 2]` from `[u, v, u⊙v, |u−v|]`.
    pub fn match_logits(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        a: &SeqBatch,
        b: &SeqBatch,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let Head::Match { w1, b1, w2, b2 } = self.layout.head else {
            return Err(Error::config("model.head", "model has a classification head"));
        };
        if a.batch != b.batch {
            return Err(Error::shape("match_logits", &[a.batch], &[b.batch]));
        }
        let u = self.encode(g, vars, a, dropout.as_deref_mut())?;
        let v = self.encode(g, vars, b, dropout)?;
        let prod = g.mul(u, v)?;
        let diff = g.sub(u, v)?;
        let dist = g.abs(diff);
        let feats = g.concat_cols(&[u, v, prod, dist])?;
        let h = g.matmul(feats, vars[w1.0])?;
        let h = g.add(h, vars[b1.0])?;
        let h = g.gelu(h);
        let z = g.matmul(h, vars[w2.0])?;
        g.add(z, vars[b2.0])
    }

    pub fn logits(&self, g: &mut Graph<T>, vars: &[Var], batch: &Batch, dropout: Option<&mut Rng>) -> Result<Var> {
        match (&self.layout.head, &batch.b) {
            (Head::Classify { .. }, None) => self.classify_logits(g, vars, &batch.a, dropout),
            (Head::Match { .. }, Some(b)) => self.match_logits(g, vars, &batch.a, b, dropout),
            _ => Err(Error::config("model.head", "batch schema does not match the model head")),
        }
    }

    /// `λ · Σ ‖WᵀW − I‖_F²` over every regularized kernel matrix of every
    /// head and layer.
    pub fn penalty(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
        let mats: Vec<Var> = self
            .params
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.regularized)
            .map(|(i, _)| vars[i])
            .collect();
        let lambda = if self.config.attention.uses_kernel() {
            self.config.kernel.ortho_reg_weight
        } else {
            0.0
        };
        kernels::penalty_over(g, &mats, lambda)
    }

    /// Cross-entropy plus the orthogonality penalty.
    pub fn loss(&self, g: &mut Graph<T>, vars: &[Var], batch: &Batch, dropout: Option<&mut Rng>) -> Result<LossVars> {
        let logits = self.logits(g, vars, batch, dropout)?;
        let task = g.cross_entropy(logits, &batch.labels)?;
        let penalty = self.penalty(g, vars)?;
        let total = g.add(task, penalty)?;
        Ok(LossVars { total, task, penalty })
    }

    /// Unweighted `Σ ‖WᵀW − I‖_F²` over the regularized kernel matrices.
    pub fn orthogonality_deviation(&self) -> f64 {
        self.params
            .entries
            .iter()
            .filter(|e| e.regularized)
            .map(|e| kernels::orthogonality_deviation(&e.value).expect("square"))
            .sum()
    }

    pub fn forward_classify(&self, seqs: &SeqBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.classify_logits(&mut g, &vars, seqs, None)?;
        Ok(g.value(out).clone())
    }

    pub fn forward_match(&self, a: &SeqBatch, b: &SeqBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.match_logits(&mut g, &vars, a, b, None)?;
        Ok(g.value(out).clone())
    }

    /// Pooled encoder output for `seqs`, evaluated without dropout.
    pub fn encode_values(&self, seqs: &SeqBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.encode(&mut g, &vars, seqs, None)?;
        Ok(g.value(out).clone())
    }

    pub(crate) fn from_parts(config: ModelConfig, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut fresh = Self::build(config, 0)?;
        if fresh.params.entries.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} parameters, file has {}",
                fresh.params.entries.len(),
                entries.len()
            )));
        }
        for (slot, (name, value)) in fresh.params.entries.iter_mut().zip(entries) {
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(fresh)
    }
}
