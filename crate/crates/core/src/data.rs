//! Bundled training text, byte-level tokenization and deterministic batching.
//!
//! The corpus is Milton's collected poetry and prose (public domain),
//! tokenized one byte per token. The first 95% is the training split and
//! the remainder the validation split.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Batch;

pub const VOCAB_SIZE: usize = 256;

/// RNG stream used to shuffle training windows.
pub const DATA_STREAM: u64 = 0x22;

static CORPUS: &[u8] = include_bytes!("../data/corpus.txt");

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    bytes: Cow<'static, [u8]>,
    split: usize,
}

impl Dataset {
    pub fn bundled() -> Self {
        Self::from_bytes(Cow::Borrowed(CORPUS))
    }

    pub fn from_bytes(bytes: impl Into<Cow<'static, [u8]>>) -> Self {
        let bytes = bytes.into();
        let split = bytes.len() * 95 / 100;
        Dataset { bytes, split }
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// Non-overlapping validation windows, grouped into batches of at most
    /// `per_batch` sequences. Covers the whole split except a short tail.
    pub fn validation_batches(&self, seq_len: usize, per_batch: usize) -> Result<Vec<Batch>> {
        let v = self.validation();
        let n_windows = v.len().saturating_sub(1) / seq_len;
        if n_windows == 0 {
            return Err(Error::config(format!(
                "validation split of {} bytes is shorter than one sequence of {seq_len}",
                v.len()
            )));
        }
        let mut out = Vec::new();
        let mut w = 0;
        while w < n_windows {
            let take = per_batch.min(n_windows - w);
            let mut inputs = Vec::with_capacity(take * seq_len);
            let mut targets = Vec::with_capacity(take * seq_len);
            for i in w..w + take {
                let s = i * seq_len;
                inputs.extend(v[s..s + seq_len].iter().map(|&b| u32::from(b)));
                targets.extend(v[s + 1..s + seq_len + 1].iter().map(|&b| u32::from(b)));
            }
            out.push(Batch::new(inputs, targets, seq_len)?);
            w += take;
        }
        Ok(out)
    }
}

/// Draws per-rank micro-batches from a seed-shuffled index of window starts.
///
/// The global batch of step `s` occupies positions `[s·N·B, (s+1)·N·B)` of
/// the shuffled index (cycled once exhausted); rank `k` takes every `N`-th
/// position starting at offset `k`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    data: Dataset,
    starts: Vec<u32>,
    seq_len: usize,
    batch_per_rank: usize,
    n_ranks: usize,
}

impl BatchSampler {
    pub fn new(
        data: Dataset,
        seq_len: usize,
        batch_per_rank: usize,
        n_ranks: usize,
        seed: u64,
    ) -> Result<Self> {
        let n_starts = data.train().len().saturating_sub(seq_len);
        if n_starts == 0 || batch_per_rank == 0 || n_ranks == 0 {
            return Err(Error::config(format!(
                "cannot draw batches of {batch_per_rank}×{seq_len} tokens for {n_ranks} ranks \
                 from {} training bytes",
                data.train().len()
            )));
        }
        let mut starts: Vec<u32> = (0..n_starts as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        starts.shuffle(&mut rng);
        Ok(BatchSampler {
            data,
            starts,
            seq_len,
            batch_per_rank,
            n_ranks,
        })
    }

    pub fn batch(&self, step: usize, rank: usize) -> Batch {
        let (b, n, t) = (self.batch_per_rank, self.n_ranks, self.seq_len);
        let train = self.data.train();
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for i in 0..b {
            let pos = (step * n * b + i * n + rank) % self.starts.len();
            let s = self.starts[pos] as usize;
            inputs.extend(train[s..s + t].iter().map(|&x| u32::from(x)));
            targets.extend(train[s + 1..s + t + 1].iter().map(|&x| u32::from(x)));
        }
        Batch {
            inputs,
            targets,
            seq_len: t,
        }
    }
}
