//! Byte-level corpora, the train/validation split, and deterministic batching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HgfError, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize_bytes`]; ids ≥ 256 are an index error.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| HgfError::Index {
                index: i as usize,
                size: BYTE_VOCAB,
            })
        })
        .collect()
}

/// A token stream split into one contiguous validation block and the
/// training segments on either side of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    tokens: Vec<u32>,
    vocab_size: usize,
    val: std::ops::Range<usize>,
}

impl Corpus {
    /// Splits `tokens`, placing a validation block of `⌈n·val_fraction⌉`
    /// tokens (at least `min_block`) at a seeded offset.
    pub fn split(tokens: Vec<u32>, vocab_size: usize, val_fraction: f64, min_block: usize, seed: u64) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(HgfError::Index {
                index: bad as usize,
                size: vocab_size,
            });
        }
        let n = tokens.len();
        let val_len = ((n as f64 * val_fraction).ceil() as usize).max(min_block);
        if val_len + min_block > n {
            return Err(HgfError::Contract(format!(
                "corpus of {n} tokens is too short for a {val_len}-token validation block and training windows of {min_block}"
            )));
        }
        let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=n - val_len);
        Ok(Self {
            tokens,
            vocab_size,
            val: start..start + val_len,
        })
    }

    pub fn from_bytes(text: &[u8], val_fraction: f64, min_block: usize, seed: u64) -> Result<Self> {
        Self::split(tokenize_bytes(text), BYTE_VOCAB, val_fraction, min_block, seed)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.val.clone()
    }

    pub fn train_segments(&self) -> Vec<std::ops::Range<usize>> {
        [0..self.val.start, self.val.end..self.tokens.len()]
            .into_iter()
            .filter(|r| !r.is_empty())
            .collect()
    }
}

/// Shifted input/target pairs: `inputs[b, i+1] == targets[b, i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// Window sampler over a corpus. Every batch is a pure function of
/// `(seed, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batcher {
    pub ctx_len: usize,
    pub micro_batch: usize,
}

const VAL_STREAM: u64 = 0x5641_4c00_0000_0000;

impl Batcher {
    fn window_starts(&self, segments: &[std::ops::Range<usize>]) -> Result<Vec<(usize, usize)>> {
        let w = self.ctx_len + 1;
        let starts: Vec<(usize, usize)> = segments
            .iter()
            .filter(|r| r.len() >= w)
            .map(|r| (r.start, r.len() - w + 1))
            .collect();
        if starts.is_empty() {
            return Err(HgfError::Contract(format!("no segment holds a window of {w} tokens")));
        }
        Ok(starts)
    }

    fn sample(&self, tokens: &[u32], segments: &[std::ops::Range<usize>], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let starts = self.window_starts(segments)?;
        let total: usize = starts.iter().map(|s| s.1).sum();
        let (b, l) = (self.micro_batch, self.ctx_len);
        let mut inputs = Vec::with_capacity(b * l);
        let mut targets = Vec::with_capacity(b * l);
        for _ in 0..b {
            let mut pick = rng.random_range(0..total);
            let mut at = 0;
            for &(start, count) in &starts {
                if pick < count {
                    at = start + pick;
                    break;
                }
                pick -= count;
            }
            let win = &tokens[at..at + l + 1];
            inputs.extend(win[..l].iter().map(|&t| t as usize));
            targets.extend(win[1..].iter().map(|&t| t as usize));
        }
        Ok(Batch {
            inputs,
            targets,
            batch: b,
            len: l,
        })
    }

    /// Training micro-batch number `index`.
    pub fn train_batch(&self, corpus: &Corpus, seed: u64, index: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        self.sample(&corpus.tokens, &corpus.train_segments(), &mut rng)
    }

    /// Validation batch number `index`, drawn only from the held-out block.
    pub fn val_batch(&self, corpus: &Corpus, seed: u64, index: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(VAL_STREAM | index);
        self.sample(&corpus.tokens, &[corpus.val_range()], &mut rng)
    }

    /// The fixed validation slice: batches `0..n`.
    pub fn val_slice(&self, corpus: &Corpus, seed: u64, n: usize) -> Result<Vec<Batch>> {
        (0..n as u64).map(|i| self.val_batch(corpus, seed, i)).collect()
    }
}

const NAMES: [&str; 12] = [
    "Lily", "Tom", "Mia", "Ben", "Sue", "Max", "Anna", "Sam", "Zoe", "Leo", "Ella", "Jack",
];
const ANIMALS: [&str; 8] = ["cat", "dog", "bird", "frog", "bunny", "duck", "fox", "bear"];
const THINGS: [&str; 10] = [
    "ball", "kite", "cake", "box", "hat", "book", "boat", "flower", "star", "toy",
];
const PLACES: [&str; 7] = ["park", "garden", "forest", "house", "beach", "school", "farm"];
const FEELINGS: [&str; 6] = ["happy", "sad", "scared", "excited", "tired", "proud"];
const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "big", "little"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// A small templated children's-story corpus of at least `min_bytes` bytes.
pub fn synthetic_stories(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        let name = pick(&mut rng, &NAMES);
        let friend = pick(&mut rng, &NAMES);
        let animal = pick(&mut rng, &ANIMALS);
        let thing = pick(&mut rng, &THINGS);
        let color = pick(&mut rng, &COLORS);
        let place = pick(&mut rng, &PLACES);
        out.push_str(&format!(
            "Once upon a time, there was a {color} {animal} named {name}. "
        ));
        let sentences = rng.random_range(3..7);
        for _ in 0..sentences {
            let s = match rng.random_range(0..6) {
                0 => format!("{name} went to the {place} with {friend}. "),
                1 => format!("{name} found a {} {thing}. ", pick(&mut rng, &COLORS)),
                2 => format!("{friend} was {} and said, \"Let's play!\" ", pick(&mut rng, &FEELINGS)),
                3 => format!("They played with the {thing} all day. "),
                4 => format!(
                    "{name} felt {} because the {thing} was gone. ",
                    pick(&mut rng, &FEELINGS)
                ),
                _ => format!("The {animal} ran to the {}. ", pick(&mut rng, &PLACES)),
            };
            out.push_str(&s);
        }
        out.push_str(&format!(
            "In the end, {name} and {friend} were {}.\n",
            pick(&mut rng, &FEELINGS)
        ));
    }
    out
}
