//! Forward-time scaling of one attention layer against sequence length.
//!
//! Each sample times `inner` back-to-back forward passes; `inner` doubles
//! until a sample takes at least [`MIN_SAMPLE_MS`] or reaches
//! [`MAX_INNER`]. Warmup samples are discarded and the median sample is
//! reported per pass.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{multi_head_attention, AttentionKind, AttentionLayerParams, AttentionSetup, PadMask};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, KernelVariant};
use crate::rng;
use crate::tensor::{Graph, Tensor};

pub const MIN_SAMPLE_MS: f64 = 1.0;
pub const MAX_INNER: usize = 256;
pub const CSV_HEADER: &str = "kind,length,median_ms,repeats";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub kinds: Vec<AttentionKind>,
    /// Timed samples per (kind, length).
    pub samples: usize,
    pub warmup: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub kernel: KernelSpec,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048],
            kinds: vec![AttentionKind::KernelLinear, AttentionKind::Softmax],
            samples: 7,
            warmup: 2,
            d_model: 64,
            n_heads: 4,
            kernel: KernelSpec::new(KernelVariant::LinearSoftplus, 1, 16),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub length: usize,
    /// Median wall time of one forward pass.
    pub median_ms: f64,
    /// Forward passes timed in total (samples × inner iterations).
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(time) on log(length), per kind.
    pub exponents: Vec<(AttentionKind, f64)>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn exponent(&self, kind: AttentionKind) -> Option<f64> {
        self.exponents.iter().find(|(k, _)| *k == kind).map(|&(_, e)| e)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let kind = serde_json::to_value(r.kind).expect("kind serializes");
            let _ = writeln!(s, "{},{},{:.6},{}", kind.as_str().unwrap_or("?"), r.length, r.median_ms, r.repeats);
        }
        s
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.len() < 3 || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("bench.lengths", "need at least 3 strictly increasing lengths"));
    }
    if cfg.samples == 0 {
        return Err(Error::config("bench.samples", "must be positive"));
    }
    cfg.kernel.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let mut kernel_rng = rng::seeded(cfg.seed.wrapping_add(1));
    let params = AttentionLayerParams::<Tensor<f32>>::init(
        cfg.d_model,
        cfg.n_heads,
        Some((&cfg.kernel, true)),
        &mut rng,
        &mut kernel_rng,
    )?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut exponents = Vec::new();
    for &kind in &cfg.kinds {
        let setup = AttentionSetup {
            kind,
            n_heads: cfg.n_heads,
            kernel: &cfg.kernel,
            eps: 1e-6,
        };
        let mut times = Vec::with_capacity(cfg.lengths.len());
        for &len in &cfg.lengths {
            let x = rng::normal_tensor::<f32>(&mut rng, &[len, cfg.d_model], 1.0);
            let mask = PadMask::all(len);
            let forward = || -> Result<()> {
                let mut g = Graph::new();
                let p = params.map(|t| g.constant(t.clone()));
                let xv = g.constant(x.clone());
                let out = multi_head_attention(&mut g, xv, &p, &setup, &mask)?;
                std::hint::black_box(g.value(out));
                Ok(())
            };
            let time = |inner: usize| -> Result<f64> {
                let t = Instant::now();
                for _ in 0..inner {
                    forward()?;
                }
                Ok(t.elapsed().as_secs_f64() * 1e3)
            };
            let mut inner = 1;
            for _ in 0..cfg.warmup {
                time(1)?;
            }
            while inner < MAX_INNER && time(inner)? < MIN_SAMPLE_MS {
                inner *= 2;
            }
            let samples = (0..cfg.samples).map(|_| time(inner)).collect::<Result<Vec<_>>>()?;
            let med = median(samples);
            if med < MIN_SAMPLE_MS {
                warnings.push(format!(
                    "{kind:?} at L={len}: sample of {inner} passes took {med:.3} ms, below timer floor"
                ));
            }
            let per_pass = med / inner as f64;
            times.push(per_pass);
            rows.push(BenchRow {
                kind,
                length: len,
                median_ms: per_pass,
                repeats: cfg.samples * inner,
            });
        }
        let xs: Vec<f64> = cfg.lengths.iter().map(|&l| l as f64).collect();
        exponents.push((kind, fit_loglog_slope(&xs, &times)));
    }
    Ok(BenchReport {
        rows,
        exponents,
        warnings,
    })
}
