use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kernel_attn::harness::bench::{bench_scaling, BenchConfig};
use kernel_attn::harness::train::CHECKPOINT_FILE;
use kernel_attn::harness::{evaluate, run_seeds, train, verify, MetricsRecord, RunOptions, TrainConfig};
use kernel_attn::model::{budget_check, checkpoint, count_params, Model};
use kernel_attn::{Error, Real};

const EXIT_FAILURE: u8 = 1;
const EXIT_DIVERGED: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

/// Linear attention with trainable kernel feature maps.
#[derive(Parser, Debug)]
#[command(name = "kattn", version)]
struct Cli {
    /// Run configuration (TOML); defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for `train`; overrides the first entry of `train.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "kattn-out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: Precision,
    /// Train even when kernel parameters exceed the budget.
    #[arg(long, global = true)]
    override_budget: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics.jsonl and model.ckpt.
    Train,
    /// Evaluate a checkpoint on the configured evaluation split.
    Eval {
        /// Defaults to <out-dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per configured seed and summarize.
    Seeds,
    /// Time one attention layer across sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        samples: usize,
    },
    /// Run the oracle, gradient, positivity and accounting checks.
    Verify,
    /// Print the parameter account and budget verdict.
    Params,
}

/// Failure carrying its exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(EXIT_FAILURE, e.to_string())
    }
}

type CmdResult = Result<(), Fail>;

fn load_config(cli: &Cli) -> Result<TrainConfig, Fail> {
    match &cli.config {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn print_record(r: &MetricsRecord) {
    if let Some(acc) = r.eval_accuracy {
        println!(
            "step {:>5}  loss {:.4}  ortho {:.3e}  eval acc {:.2}%",
            r.step,
            r.train_loss,
            r.ortho_penalty,
            acc * 100.0
        );
    }
    if r.diverged {
        println!("step {:>5}  DIVERGED (non-finite loss or gradients)", r.step);
    }
}

fn cmd_train<T: Real>(cli: &Cli, cfg: &TrainConfig) -> CmdResult {
    let seed = cli.seed.unwrap_or(cfg.train.seeds[0]);
    let data = cfg.load_task()?;
    let opts = RunOptions {
        out_dir: Some(cli.out_dir.clone()),
        override_budget: cli.override_budget,
    };
    let out = train::<T>(cfg, &data, seed, &opts, print_record)?;
    let last = out.final_record();
    println!(
        "seed {seed}: {} steps, final accuracy {}, kernel/base params {:.2}%",
        last.step,
        out.final_accuracy().map_or("-".into(), |a| format!("{:.2}%", a * 100.0)),
        out.account.ratio * 100.0
    );
    println!("metrics: {}", cli.out_dir.join("metrics.jsonl").display());
    if out.diverged {
        return Err(Fail(EXIT_DIVERGED, format!("training diverged at step {}", last.step)));
    }
    println!("checkpoint: {}", cli.out_dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn cmd_eval<T: Real>(_cli: &Cli, cfg: &TrainConfig, ckpt: &Path) -> CmdResult {
    let model: Model<T> = checkpoint::load(ckpt)?;
    let data = cfg.load_task()?;
    let r = evaluate(&model, &data.eval, cfg.train.eval_batch)?;
    println!(
        "{}: accuracy {:.2}% loss {:.4} over {} examples",
        ckpt.display(),
        r.accuracy * 100.0,
        r.loss,
        r.count
    );
    Ok(())
}

fn cmd_seeds<T: Real>(cli: &Cli, cfg: &TrainConfig) -> CmdResult {
    let data = cfg.load_task()?;
    let opts = RunOptions {
        out_dir: Some(cli.out_dir.clone()),
        override_budget: cli.override_budget,
    };
    let summary = run_seeds::<T>(cfg, &data, &opts, |_| {})?;
    print!("{}", summary.render());
    if summary.mean.is_none() {
        return Err(Fail(EXIT_DIVERGED, "every seed diverged".into()));
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, cfg: &TrainConfig, lengths: Vec<usize>, samples: usize) -> CmdResult {
    let mut bench = BenchConfig {
        lengths,
        samples,
        seed: cli.seed.unwrap_or(0),
        ..BenchConfig::default()
    };
    // without a config, the reference setup: d_model 64, 4 heads, LinearSoftplus
    if cli.config.is_some() {
        bench.d_model = cfg.model.d_model;
        bench.n_heads = cfg.model.n_heads;
        bench.kernel = cfg.kernel_spec();
    }
    let report = bench_scaling(&bench)?;
    let csv = report.to_csv();
    print!("{csv}");
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::Io {
        path: cli.out_dir.clone(),
        source: e,
    })?;
    let path = cli.out_dir.join("bench.csv");
    std::fs::write(&path, csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    for (kind, e) in &report.exponents {
        println!("fitted exponent {kind:?}: {e:.3}");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_verify() -> CmdResult {
    let results = verify::run_suite()?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Fail(EXIT_FAILURE, format!("{failed} verification check(s) failed")));
    }
    Ok(())
}

fn cmd_params(cfg: &TrainConfig) -> CmdResult {
    let model = Model::<f32>::build(cfg.model_config_for_task()?, 0)?;
    let account = count_params(&model)?;
    let verdict = budget_check(&account, cfg.train.budget_limit);
    println!("base_params   {}", account.base_params);
    println!("kernel_params {}", account.kernel_params);
    println!("ratio         {:.4} ({:.2}%)", account.ratio, account.ratio * 100.0);
    println!(
        "budget        {} (limit {:.2}%)",
        if verdict.pass { "PASS" } else { "FAIL" },
        verdict.limit * 100.0
    );
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    macro_rules! by_precision {
        ($f:ident $(, $arg:expr)*) => {
            match cli.precision {
                Precision::F32 => $f::<f32>(cli, &cfg $(, $arg)*),
                Precision::F64 => $f::<f64>(cli, &cfg $(, $arg)*),
            }
        };
    }
    match &cli.command {
        Command::Train => by_precision!(cmd_train),
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cli.out_dir.join(CHECKPOINT_FILE));
            by_precision!(cmd_eval, &ckpt)
        }
        Command::Seeds => by_precision!(cmd_seeds),
        Command::Bench { lengths, samples } => cmd_bench(cli, &cfg, lengths.clone(), *samples),
        Command::Verify => cmd_verify(),
        Command::Params => cmd_params(&cfg),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
