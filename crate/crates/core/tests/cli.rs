use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kattn(args: &[&str], extra: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kattn"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY: &str = r#"
[model]
d_model = 8
n_heads = 2
ffn_dim = 16
dropout = 0.1

[kernel]
variant = "oglu"

[task]
train_size = 64
eval_size = 32
len = 16
vocab_size = 24

[schedule]
warmup_steps = 2
total_steps = 12

[train]
micro_batch = 8
accumulation_steps = 2
eval_every = 4
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn verify_passes_and_lists_checks() {
    let out = kattn(&["verify"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count() > 30);
    assert!(!stdout.contains("[FAIL]"));
}

#[test]
fn params_reports_glu3_over_budget() {
    let out = kattn(&["params", "--config"], &[&config("glu3.cfg")]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("base_params   14690"), "{stdout}");
    assert!(stdout.contains("kernel_params 3072"));
    assert!(stdout.contains("0.2091"));
    assert!(stdout.contains("FAIL"));
}

#[test]
fn training_over_budget_is_refused_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace("variant = \"oglu\"", "variant = \"glu\"\ndepth = 3");
    let cfg = write_config(dir.path(), &body);
    let out = kattn(&["train", "--out-dir"], &[dir.path(), Path::new("--config"), &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains('%') && err.contains("budget"), "{err}");
    assert!(!dir.path().join("metrics.jsonl").exists());

    let out = kattn(&["train", "--override-budget", "--out-dir"], &[dir.path(), Path::new("--config"), &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
}

#[test]
fn missing_config_names_path() {
    let out = kattn(&["train", "--config", "/definitely/missing.cfg"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("/definitely/missing.cfg"));
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nd_model = 8\nd_modle = 3\n");
    let out = kattn(&["params", "--config"], &[&cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("line 3") && err.contains("d_modle"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(kattn(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(kattn(&["train", "--no-such-flag"], &[]).status.code(), Some(2));
    assert_eq!(kattn(&["train", "--precision", "f16"], &[]).status.code(), Some(2));
}

#[test]
fn training_is_deterministic_and_checkpoint_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |sub: &str, precision: &str| {
        let out_dir = dir.path().join(sub);
        let out = kattn(
            &["train", "--seed", "7", "--precision", precision, "--config"],
            &[&cfg, Path::new("--out-dir"), &out_dir],
        );
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        (std::fs::read(out_dir.join("metrics.jsonl")).unwrap(), out_dir)
    };
    let (a, out_a) = run("a", "f32");
    let (b, _) = run("b", "f32");
    assert_eq!(a, b);
    let lines: Vec<serde_json::Value> = text(&a).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[3]["step"], 4);
    assert!(lines[3]["eval_accuracy"].is_f64());
    assert!(lines[4]["eval_accuracy"].is_null());
    for key in ["train_loss", "task_loss", "ortho_penalty", "seed", "lr", "diverged"] {
        assert!(!lines[0][key].is_null(), "{key}");
    }

    let (c, _) = run("c", "f64");
    assert_ne!(a, c);

    let out = kattn(&["eval", "--config"], &[&cfg, Path::new("--out-dir"), &out_a]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let final_acc = lines[11]["eval_accuracy"].as_f64().unwrap();
    assert!(text(&out.stdout).contains(&format!("accuracy {:.2}%", final_acc * 100.0)), "{}", text(&out.stdout));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{TINY}\n[optimizer]\nlr = 1e38\n");
    let cfg = write_config(dir.path(), &body);
    let out = kattn(&["train", "--config"], &[&cfg, Path::new("--out-dir"), dir.path()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stdout));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["diverged"], true);
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = kattn(&["bench", "--lengths", "16,32,64", "--samples", "1", "--out-dir"], &[dir.path()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kind,length,median_ms,repeats"));
    assert_eq!(lines.count(), 6);
    assert!(text(&out.stdout).contains("fitted exponent"));
}
