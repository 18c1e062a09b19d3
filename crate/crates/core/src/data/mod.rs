//! Datasets, batching, synthetic task generators and TSV ingestion.
//!
//! Token id 0 is padding everywhere. Generators never emit it and the TSV
//! loader rejects it.

pub mod listops;
pub mod synthetic;
pub mod tsv;

use serde::{Deserialize, Serialize};

use crate::attention::PadMask;
use crate::error::{Error, Result};
use crate::rng;

pub use listops::gen_listops;
pub use synthetic::{gen_matching, gen_text_classification};
pub use tsv::{export_tsv, load_tsv_dataset};

pub const PAD: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Classify,
    Match,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// Second sequence of a matching pair.
    pub pair: Option<Vec<u32>>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub schema: Schema,
    pub examples: Vec<Example>,
    /// Symbol of each token id; index 0 is the pad symbol.
    pub vocab: Vec<String>,
    pub classes: usize,
}

impl Dataset {
    /// Checks the dataset invariants: non-empty, ids inside the vocabulary
    /// and never padding, labels below `classes`, pairs exactly when the
    /// schema is `Match`.
    pub fn new(schema: Schema, examples: Vec<Example>, vocab: Vec<String>, classes: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::data(None, "dataset is empty"));
        }
        if classes < 2 {
            return Err(Error::data(None, format!("need at least 2 classes, got {classes}")));
        }
        let v = vocab.len() as u32;
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= classes {
                return Err(Error::data(None, format!("example {i}: label {} >= {classes}", ex.label)));
            }
            if ex.pair.is_some() != (schema == Schema::Match) {
                return Err(Error::data(None, format!("example {i} does not fit schema {schema:?}")));
            }
            for seq in std::iter::once(&ex.tokens).chain(ex.pair.as_ref()) {
                if seq.is_empty() {
                    return Err(Error::data(None, format!("example {i} has an empty sequence")));
                }
                if let Some(&bad) = seq.iter().find(|&&t| t == PAD || t >= v) {
                    return Err(Error::data(None, format!("example {i}: token {bad} is padding or outside vocab of {v}")));
                }
            }
        }
        Ok(Self {
            schema,
            examples,
            vocab,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for ex in &self.examples {
            h[ex.label] += 1;
        }
        h
    }

    pub fn max_seq_len(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| std::iter::once(e.tokens.len()).chain(e.pair.as_ref().map(Vec::len)))
            .max()
            .unwrap_or(0)
    }
}

/// Padded token matrix `B×L`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    /// Truncates each sequence to `max_len` and right-pads to the longest.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [u32]>, max_len: usize) -> Self {
        let seqs: Vec<&[u32]> = seqs.into_iter().map(|s| &s[..s.len().min(max_len)]).collect();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in &seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }

    pub fn masks(&self) -> Result<Vec<PadMask>> {
        self.mask
            .chunks(self.len)
            .map(|m| PadMask::new(m.to_vec()))
            .collect()
    }

    /// Right-pads every row to `len` columns.
    pub fn pad_to(&self, len: usize) -> Self {
        let len = len.max(self.len);
        let mut ids = Vec::with_capacity(self.batch * len);
        let mut mask = Vec::with_capacity(self.batch * len);
        for r in 0..self.batch {
            ids.extend_from_slice(&self.ids[r * self.len..(r + 1) * self.len]);
            mask.extend_from_slice(&self.mask[r * self.len..(r + 1) * self.len]);
            ids.extend(std::iter::repeat_n(PAD, len - self.len));
            mask.extend(std::iter::repeat_n(false, len - self.len));
        }
        Self {
            ids,
            mask,
            batch: self.batch,
            len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub a: SeqBatch,
    /// Second sequences for matching.
    pub b: Option<SeqBatch>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], max_len: usize) -> Self {
        let a = SeqBatch::from_sequences(examples.iter().map(|e| e.tokens.as_slice()), max_len);
        let b = if examples.iter().all(|e| e.pair.is_some()) && !examples.is_empty() {
            Some(SeqBatch::from_sequences(
                examples.iter().map(|e| e.pair.as_deref().unwrap_or_default()),
                max_len,
            ))
        } else {
            None
        };
        Self {
            a,
            b,
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Batches of `batch_size` in an order shuffled by `shuffle_seed` (dataset
/// order when `None`); the last batch may be smaller.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        rng::shuffle(&mut rng::seeded(seed), &mut order);
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        let exs: Vec<&Example> = idx.iter().map(|&i| &dataset.examples[i]).collect();
        Batch::from_examples(&exs, max_len)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example {
                tokens: (1..=(1 + i % 4) as u32).collect(),
                pair: None,
                label: i % 2,
            })
            .collect();
        let vocab = (0..6).map(|i| i.to_string()).collect();
        Dataset::new(Schema::Classify, examples, vocab, 2).unwrap()
    }

    #[test]
    fn batches_of_four_four_two() {
        let d = toy(10);
        let sizes: Vec<usize> = batch_iter(&d, 4, 16, Some(3)).map(|b| b.size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order() {
        let d = toy(10);
        let a: Vec<Batch> = batch_iter(&d, 3, 16, Some(11)).collect();
        let b: Vec<Batch> = batch_iter(&d, 3, 16, Some(11)).collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = batch_iter(&d, 3, 16, Some(12)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn masks_are_false_exactly_on_pads() {
        let d = toy(9);
        for b in batch_iter(&d, 4, 3, Some(0)) {
            for (&id, &m) in b.a.ids.iter().zip(&b.a.mask) {
                assert_eq!(id == PAD, !m);
            }
            assert!(b.a.len <= 3);
        }
    }

    #[test]
    fn invariants_are_enforced() {
        let vocab: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let ex = |t: Vec<u32>, l| Example {
            tokens: t,
            pair: None,
            label: l,
        };
        assert!(Dataset::new(Schema::Classify, vec![], vocab.clone(), 2).is_err());
        assert!(Dataset::new(Schema::Classify, vec![ex(vec![0, 1], 0)], vocab.clone(), 2).is_err());
        assert!(Dataset::new(Schema::Classify, vec![ex(vec![4], 0)], vocab.clone(), 2).is_err());
        assert!(Dataset::new(Schema::Classify, vec![ex(vec![3], 2)], vocab.clone(), 2).is_err());
        assert!(Dataset::new(Schema::Match, vec![ex(vec![3], 1)], vocab, 2).is_err());
    }
}
