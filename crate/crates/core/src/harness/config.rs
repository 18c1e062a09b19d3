//! TOML run configuration.
//!
//! ```toml
//! [model]      # encoder shape; vocab, classes and head come from the task
//! [kernel]     # feature map
//! [task]       # generator or TSV source
//! [optimizer]
//! [schedule]
//! [train]      # batching, λ, seeds, evaluation, budget
//! ```
//!
//! Every key has a default, unknown keys are rejected, and parse errors
//! carry the line and column.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::data::{self, listops, synthetic, Dataset, Schema};
use crate::error::{Error, Result};
use crate::kernels::{InnerNonlinearity, KernelSpec, KernelVariant};
use crate::model::{ModelConfig, Pooling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    /// Longest input; longer sequences are truncated. Defaults to the task length.
    pub max_len: Option<usize>,
    pub attention: AttentionKind,
    pub eps: f64,
    pub dropout: f64,
    pub pooling: Pooling,
    pub share_qk_kernel: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 64,
            max_len: None,
            attention: AttentionKind::KernelLinear,
            eps: 1e-6,
            dropout: 0.1,
            pooling: Pooling::Mean,
            share_qk_kernel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub variant: KernelVariant,
    pub depth: usize,
    /// Defaults to `head_dim / 4`.
    pub gate_rank: Option<usize>,
    pub orthogonal_init: bool,
    pub inner_nonlinearity: InnerNonlinearity,
    pub low_rank_all_layers: bool,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            variant: KernelVariant::LinearSoftplus,
            depth: 1,
            gate_rank: None,
            orthogonal_init: true,
            inner_nonlinearity: InnerNonlinearity::Gelu,
            low_rank_all_layers: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TextClassification,
    Matching,
    Listops,
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Seed of the generated data; fixed across training seeds.
    pub data_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    /// Sequence length (generators) or maximum length (ListOps).
    pub len: usize,
    pub vocab_size: usize,
    pub classes: usize,
    pub motif_len: usize,
    pub max_depth: usize,
    pub schema: Schema,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::TextClassification,
            data_seed: 1234,
            train_size: 2000,
            eval_size: 500,
            len: 128,
            vocab_size: 64,
            classes: 2,
            motif_len: synthetic::DEFAULT_MOTIF_LEN,
            max_depth: 3,
            schema: Schema::Classify,
            train_path: None,
            eval_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Linear,
    InvSqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            total_steps: 2000,
            decay: Decay::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    /// Weight λ of the orthogonality penalty.
    pub ortho_reg_weight: f64,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub budget_limit: f64,
    /// Stop once an evaluation reaches this accuracy.
    pub stop_at_accuracy: Option<f64>,
    /// Adds `wall_time_ms` to metrics; off keeps the stream deterministic.
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            micro_batch: 32,
            accumulation_steps: 1,
            ortho_reg_weight: 0.01,
            seeds: vec![1, 2, 3, 4, 5],
            eval_every: 100,
            eval_batch: 64,
            budget_limit: 0.10,
            stop_at_accuracy: None,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub kernel: KernelSection,
    pub task: TaskSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
}

/// Training and evaluation splits.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config { field, msg } if field == "config" => Error::Parse {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })?;
        // TSV paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.task.train_path, &mut cfg.task.eval_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.total_steps == 0 || s.total_steps <= s.warmup_steps {
            return Err(Error::config(
                "schedule.total_steps",
                format!("must exceed warmup_steps ({}), got {}", s.warmup_steps, s.total_steps),
            ));
        }
        let t = &self.train;
        if t.micro_batch == 0 {
            return Err(Error::config("train.micro_batch", "must be at least 1"));
        }
        if t.accumulation_steps == 0 {
            return Err(Error::config("train.accumulation_steps", "must be at least 1"));
        }
        if t.eval_every == 0 || t.eval_batch == 0 {
            return Err(Error::config("train.eval_every", "eval_every and eval_batch must be positive"));
        }
        if t.seeds.is_empty() {
            return Err(Error::config("train.seeds", "need at least one seed"));
        }
        if !(t.ortho_reg_weight >= 0.0 && t.ortho_reg_weight.is_finite()) {
            return Err(Error::config("train.ortho_reg_weight", "must be a non-negative number"));
        }
        if !(t.budget_limit > 0.0) {
            return Err(Error::config("train.budget_limit", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        for (f, b) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(f, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::config("optimizer.eps", "eps must be positive and weight_decay non-negative"));
        }
        if self.task.kind == TaskKind::Tsv && self.task.train_path.is_none() {
            return Err(Error::config("task.train_path", "required when kind = \"tsv\""));
        }
        if self.model.n_heads == 0 || self.model.d_model % self.model.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("must divide d_model = {}", self.model.d_model),
            ));
        }
        Ok(())
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        let n = self.model.d_model / self.model.n_heads.max(1);
        let mut spec = KernelSpec::new(self.kernel.variant, self.kernel.depth, n);
        if let Some(r) = self.kernel.gate_rank {
            spec.gate_rank = r;
        }
        spec.orthogonal_init = self.kernel.orthogonal_init;
        spec.inner_nonlinearity = self.kernel.inner_nonlinearity;
        spec.low_rank_all_layers = self.kernel.low_rank_all_layers;
        spec.ortho_reg_weight = self.train.ortho_reg_weight;
        spec
    }

    /// Model config for a task with the given vocabulary and classes.
    pub fn model_config(&self, vocab_size: usize, classes: usize, head: Schema, data_len: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            vocab_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            ffn_dim: m.ffn_dim,
            max_len: m.max_len.unwrap_or(data_len),
            classes,
            head,
            attention: m.attention,
            kernel: self.kernel_spec(),
            share_qk_kernel: m.share_qk_kernel,
            eps: m.eps,
            dropout: m.dropout,
            pooling: m.pooling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model config derived from the task section alone, without reading data.
    pub fn model_config_for_task(&self) -> Result<ModelConfig> {
        let t = &self.task;
        match t.kind {
            TaskKind::TextClassification => self.model_config(t.vocab_size, t.classes, Schema::Classify, t.len),
            TaskKind::Matching => self.model_config(t.vocab_size, 2, Schema::Match, t.len),
            TaskKind::Listops => self.model_config(listops::VOCAB_SIZE, 10, Schema::Classify, t.len),
            TaskKind::Tsv => {
                let d = self.load_task()?;
                self.model_config_for_data(&d)
            }
        }
    }

    pub fn model_config_for_data(&self, data: &TaskData) -> Result<ModelConfig> {
        let vocab = data.train.vocab_size().max(data.eval.vocab_size());
        let classes = data.train.classes.max(data.eval.classes);
        let len = data.train.max_seq_len().max(data.eval.max_seq_len());
        self.model_config(vocab, classes, data.train.schema, len)
    }

    /// Builds or reads both splits. Generated eval data uses a derived seed
    /// so it never overlaps the training stream.
    pub fn load_task(&self) -> Result<TaskData> {
        let t = &self.task;
        let eval_seed = t.data_seed ^ 0x5eed_e7a1;
        let gen = |seed: u64, count: usize| -> Result<Dataset> {
            match t.kind {
                TaskKind::TextClassification => {
                    data::gen_text_classification(seed, count, t.len, t.vocab_size, t.classes, t.motif_len)
                }
                TaskKind::Matching => data::gen_matching(seed, count, t.len, t.vocab_size, t.motif_len),
                TaskKind::Listops => data::gen_listops(seed, count, t.len, t.max_depth),
                TaskKind::Tsv => unreachable!(),
            }
        };
        if t.kind == TaskKind::Tsv {
            let train_path = t.train_path.as_deref().expect("validated");
            let train = data::load_tsv_dataset(train_path, t.schema)?;
            let eval = match &t.eval_path {
                Some(p) => data::load_tsv_dataset(p, t.schema)?,
                None => train.clone(),
            };
            return Ok(TaskData { train, eval });
        }
        Ok(TaskData {
            train: gen(t.data_seed, t.train_size)?,
            eval: gen(eval_seed, t.eval_size)?,
        })
    }
}
