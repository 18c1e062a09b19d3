//! Motif tasks standing in for document classification and matching.
//!
//! Ids `1..=motifs·motif_len` are reserved for motifs (motif `m` is the run
//! `1 + m·motif_len ..`); every other non-pad id is noise. Noise never draws
//! motif ids, so a planted motif is unambiguous and both tasks are exactly
//! solvable by scanning for motifs.

use super::{Dataset, Example, Schema};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_MOTIF_LEN: usize = 3;
/// Size of the motif pool used by [`gen_matching`].
pub const MATCH_MOTIFS: usize = 8;

fn motif(m: usize, k: usize) -> Vec<u32> {
    (0..k).map(|i| (1 + m * k + i) as u32).collect()
}

fn vocab_symbols(vocab_size: usize, motifs: usize, k: usize) -> Vec<String> {
    (0..vocab_size)
        .map(|id| match id {
            0 => "<pad>".to_string(),
            id if id <= motifs * k => format!("m{}_{}", (id - 1) / k, (id - 1) % k),
            id => format!("w{id}"),
        })
        .collect()
}

fn check(len: usize, vocab_size: usize, motifs: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("task.motif_len", "must be positive"));
    }
    if len < k {
        return Err(Error::config("task.len", format!("length {len} is shorter than the motif ({k})")));
    }
    let reserved = 1 + motifs * k;
    if vocab_size <= reserved {
        return Err(Error::config(
            "task.vocab_size",
            format!("{motifs} motifs of length {k} need a vocabulary larger than {reserved}, got {vocab_size}"),
        ));
    }
    Ok(())
}

fn noisy_with(rng: &mut Rng, len: usize, vocab_size: usize, first_noise: usize, planted: &[u32]) -> Vec<u32> {
    let span = vocab_size - first_noise;
    let mut seq: Vec<u32> = (0..len)
        .map(|_| (first_noise + rng::index(rng, span)) as u32)
        .collect();
    let at = rng::index(rng, len - planted.len() + 1);
    seq[at..at + planted.len()].copy_from_slice(planted);
    seq
}

/// Labels `i % classes`, then shuffled; the histogram is balanced within 1.
fn balanced_labels(rng: &mut Rng, count: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    rng::shuffle(rng, &mut labels);
    labels
}

/// Each class plants its own motif once at a uniform position in uniform
/// noise.
pub fn gen_text_classification(
    seed: u64,
    count: usize,
    len: usize,
    vocab_size: usize,
    classes: usize,
    motif_len: usize,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("task.classes", format!("need at least 2 classes, got {classes}")));
    }
    check(len, vocab_size, classes, motif_len)?;
    let mut rng = rng::seeded(seed);
    let first_noise = 1 + classes * motif_len;
    let examples = balanced_labels(&mut rng, count, classes)
        .into_iter()
        .map(|label| Example {
            tokens: noisy_with(&mut rng, len, vocab_size, first_noise, &motif(label, motif_len)),
            pair: None,
            label,
        })
        .collect();
    Dataset::new(Schema::Classify, examples, vocab_symbols(vocab_size, classes, motif_len), classes)
}

/// Label 1 pairs plant the same motif in both sequences; label 0 pairs plant
/// two different motifs from a pool of [`MATCH_MOTIFS`].
pub fn gen_matching(seed: u64, count: usize, len: usize, vocab_size: usize, motif_len: usize) -> Result<Dataset> {
    check(len, vocab_size, MATCH_MOTIFS, motif_len)?;
    let mut rng = rng::seeded(seed);
    let first_noise = 1 + MATCH_MOTIFS * motif_len;
    let examples = balanced_labels(&mut rng, count, 2)
        .into_iter()
        .map(|label| {
            let ma = rng::index(&mut rng, MATCH_MOTIFS);
            let mb = if label == 1 {
                ma
            } else {
                (ma + 1 + rng::index(&mut rng, MATCH_MOTIFS - 1)) % MATCH_MOTIFS
            };
            Example {
                tokens: noisy_with(&mut rng, len, vocab_size, first_noise, &motif(ma, motif_len)),
                pair: Some(noisy_with(&mut rng, len, vocab_size, first_noise, &motif(mb, motif_len))),
                label,
            }
        })
        .collect();
    Dataset::new(Schema::Match, examples, vocab_symbols(vocab_size, MATCH_MOTIFS, motif_len), 2)
}

/// Indices of the motifs among `0..motifs` that occur contiguously in `seq`.
pub fn motifs_present(seq: &[u32], motifs: usize, motif_len: usize) -> Vec<usize> {
    (0..motifs)
        .filter(|&m| {
            let pat = motif(m, motif_len);
            seq.windows(motif_len).any(|w| w == pat.as_slice())
        })
        .collect()
}
