//! Training loop, evaluation and metrics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{TaskData, TrainConfig};
use super::optim::{lr_factor, Adam};
use crate::data::{batch_iter, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{budget_check, checkpoint, count_params, Model, ParamAccount};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::{GradMap, Graph};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7400;

/// One line of `metrics.jsonl`, written after every optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub step: usize,
    pub lr: f64,
    /// Cross-entropy plus the weighted orthogonality penalty.
    pub train_loss: f64,
    pub task_loss: f64,
    /// Unweighted `Σ‖WᵀW − I‖²` after the step, so runs with different λ
    /// are comparable.
    pub ortho_penalty: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
}

/// Gradients of the mean micro-batch loss: each micro-batch loss is a
/// per-example mean, their gradients are summed and divided by the count.
pub fn accumulate_gradients<T: Real>(
    model: &Model<T>,
    micro_batches: &[Batch],
    mut dropout: Option<&mut Rng>,
) -> Result<(GradMap<T>, StepStats)> {
    if micro_batches.is_empty() {
        return Err(Error::Contract("no micro-batches to accumulate".into()));
    }
    let mut total: Option<GradMap<T>> = None;
    let mut stats = StepStats {
        loss: 0.0,
        task_loss: 0.0,
        penalty: 0.0,
    };
    for batch in micro_batches {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let loss = model.loss(&mut g, &vars, batch, dropout.as_deref_mut())?;
        stats.loss += g.value(loss.total).item()?.f64();
        stats.task_loss += g.value(loss.task).item()?.f64();
        stats.penalty += g.value(loss.penalty).item()?.f64();
        let grads = g.backward(loss.total)?;
        match &mut total {
            None => total = Some(grads),
            Some(t) => t.accumulate(grads)?,
        }
    }
    let k = micro_batches.len() as f64;
    let mut grads = total.expect("at least one micro-batch");
    grads.scale(T::of(1.0 / k));
    stats.loss /= k;
    stats.task_loss /= k;
    stats.penalty /= k;
    Ok((grads, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

/// Exact-match fraction.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn argmax_rows<T: Real>(logits: &crate::tensor::Tensor<T>) -> Result<Vec<usize>> {
    let (rows, cols) = logits.dims2()?;
    Ok((0..rows)
        .map(|r| {
            (0..cols)
                .max_by(|&a, &b| logits.at(r, a).partial_cmp(&logits.at(r, b)).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0)
        })
        .collect())
}

fn check_dataset<T: Real>(model: &Model<T>, dataset: &Dataset) -> Result<()> {
    if dataset.schema != model.config().head {
        return Err(Error::config(
            "task",
            format!("dataset schema {:?} does not match model head {:?}", dataset.schema, model.config().head),
        ));
    }
    if dataset.classes > model.config().classes {
        return Err(Error::config("task.classes", "dataset has more classes than the model head"));
    }
    Ok(())
}

/// Accuracy and mean cross-entropy with dropout off, in dataset order.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<EvalResult> {
    check_dataset(model, dataset)?;
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    let mut loss_sum = 0.0;
    for batch in batch_iter(dataset, batch_size.max(1), model.config().max_len, None) {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let logits = model.logits(&mut g, &vars, &batch, None)?;
        let ce = g.cross_entropy(logits, &batch.labels)?;
        loss_sum += g.value(ce).item()?.f64() * batch.size() as f64;
        predictions.extend(argmax_rows(g.value(logits))?);
        labels.extend_from_slice(&batch.labels);
    }
    Ok(EvalResult {
        accuracy: accuracy(&predictions, &labels),
        loss: loss_sum / labels.len() as f64,
        count: labels.len(),
    })
}

/// Endless micro-batches, reshuffled every epoch from the run seed.
struct BatchStream<'a> {
    data: &'a Dataset,
    micro_batch: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a Dataset, micro_batch: usize, max_len: usize, seed: u64) -> Self {
        Self {
            data,
            micro_batch,
            max_len,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        }
    }

    fn next_batch(&mut self) -> Batch {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.epoch);
            self.epoch += 1;
            let batches: Vec<Batch> = batch_iter(self.data, self.micro_batch, self.max_len, Some(seed)).collect();
            self.pending = batches.into_iter();
        }
    }
}

/// Knobs that belong to one invocation rather than to the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where `metrics.jsonl` and `model.ckpt` go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub override_budget: bool,
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub account: ParamAccount,
    pub records: Vec<MetricsRecord>,
    pub diverged: bool,
}

impl<T> TrainOutcome<T> {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least one step")
    }

    /// Last evaluated accuracy.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval_accuracy)
    }
}

struct MetricsSink {
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = out_dir else { return Ok(Self { file: None }) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
        })
    }

    fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }
}

/// Refuses over-budget kernels unless `override_budget` is set.
pub fn enforce_budget<T: Real>(model: &Model<T>, limit: f64, override_budget: bool) -> Result<ParamAccount> {
    let account = count_params(model)?;
    let verdict = budget_check(&account, limit);
    if !verdict.pass && !override_budget {
        return Err(Error::OverBudget {
            ratio: verdict.ratio,
            limit,
        });
    }
    Ok(account)
}

/// Trains one model from `seed`, calling `on_record` after every step.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    data: &TaskData,
    seed: u64,
    opts: &RunOptions,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model_cfg = cfg.model_config_for_data(data)?;
    let mut model = Model::<T>::build(model_cfg, seed)?;
    let account = enforce_budget(&model, cfg.train.budget_limit, opts.override_budget)?;
    check_dataset(&model, &data.train)?;
    check_dataset(&model, &data.eval)?;

    let mut sink = MetricsSink::open(opts.out_dir.as_deref())?;
    let mut opt = Adam::new(cfg.optimizer.clone(), model.params());
    let mut stream = BatchStream::new(&data.train, cfg.train.micro_batch, model.config().max_len, seed);
    let mut dropout_rng = rng::seeded(seed ^ DROPOUT_STREAM);
    let use_dropout = model.config().dropout > 0.0;
    let started = Instant::now();
    let mut records = Vec::new();
    let mut diverged = false;

    for step in 1..=cfg.schedule.total_steps {
        let micro: Vec<Batch> = (0..cfg.train.accumulation_steps).map(|_| stream.next_batch()).collect();
        let lr = cfg.optimizer.lr * lr_factor(&cfg.schedule, step);
        let dropout = use_dropout.then_some(&mut dropout_rng);
        let (grads, stats) = match accumulate_gradients(&model, &micro, dropout) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => (GradMap::default(), StepStats { loss: f64::NAN, task_loss: f64::NAN, penalty: f64::NAN }),
            Err(e) => return Err(e),
        };
        let finite = stats.loss.is_finite() && grads.len() == model.params().len() && grads.is_finite();
        if finite {
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let params_finite = model.params().entries().iter().all(|e| e.value.is_finite());
        diverged = !finite || !params_finite;
        let last = step == cfg.schedule.total_steps;
        let eval = if !diverged && (step % cfg.train.eval_every == 0 || last) {
            Some(evaluate(&model, &data.eval, cfg.train.eval_batch)?)
        } else {
            None
        };
        let rec = MetricsRecord {
            seed,
            step,
            lr,
            train_loss: stats.loss,
            task_loss: stats.task_loss,
            ortho_penalty: model.orthogonality_deviation(),
            eval_accuracy: eval.map(|e| e.accuracy),
            eval_loss: eval.map(|e| e.loss),
            wall_time_ms: cfg
                .train
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64() * 1e3),
            diverged,
        };
        sink.write(&rec)?;
        on_record(&rec);
        records.push(rec);
        if diverged {
            break;
        }
        if let (Some(target), Some(e)) = (cfg.train.stop_at_accuracy, eval) {
            if e.accuracy >= target {
                break;
            }
        }
    }
    if let (Some(dir), false) = (&opts.out_dir, diverged) {
        checkpoint::save(&model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        model,
        account,
        records,
        diverged,
    })
}
