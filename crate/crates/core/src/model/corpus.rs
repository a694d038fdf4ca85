use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::rng;

/// Token id of the sequence-start marker.
pub const BOS: usize = 0;

/// Fraction of the corpus held out for evaluation, taken from the end.
pub const HELDOUT_FRACTION: f64 = 0.1;

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 ";

/// Preferred successors per symbol and their probabilities; the remaining
/// mass is spread uniformly.
const SUCCESSOR_PROBS: [f64; 4] = [0.45, 0.2, 0.1, 0.05];

/// Probability that a symbol repeats the one three positions back.
const REPEAT_PROB: f64 = 0.15;
const REPEAT_LAG: usize = 3;

/// Symbols representable with `vocab` ids (id 0 is BOS).
pub fn alphabet(vocab: usize) -> Vec<char> {
    SYMBOLS.chars().take(vocab.saturating_sub(1)).collect()
}

/// Maps text to ids `1 + alphabet index`, skipping unknown characters.
pub fn encode(text: &str, vocab: usize) -> Vec<usize> {
    let a = alphabet(vocab);
    text.chars().filter_map(|c| a.iter().position(|&x| x == c).map(|i| i + 1)).collect()
}

pub fn decode(ids: &[usize], vocab: usize) -> String {
    let a = alphabet(vocab);
    ids.iter().filter_map(|&i| i.checked_sub(1).and_then(|j| a.get(j))).collect()
}

/// Seeded text over the alphabet with bigram structure and a lag-3 repeat rule.
pub fn synthetic_text(seed: u64, chars: usize, vocab: usize) -> String {
    let a = alphabet(vocab);
    let n = a.len();
    let mut r = rng::stream(seed, "corpus");
    let successors: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..SUCCESSOR_PROBS.len()).map(|_| r.random_range(0..n)).collect())
        .collect();
    let rest = 1.0 - SUCCESSOR_PROBS.iter().sum::<f64>();
    let mut ids: Vec<usize> = Vec::with_capacity(chars);
    for i in 0..chars {
        let next = if i == 0 {
            r.random_range(0..n)
        } else if i >= REPEAT_LAG && r.random::<f64>() < REPEAT_PROB {
            ids[i - REPEAT_LAG]
        } else {
            let u: f64 = r.random();
            let prev = ids[i - 1];
            let mut acc = 0.0;
            let mut pick = None;
            for (j, p) in SUCCESSOR_PROBS.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = Some(successors[prev][j]);
                    break;
                }
            }
            pick.unwrap_or_else(|| ((u - (1.0 - rest)) / rest * n as f64) as usize % n)
        };
        ids.push(next);
    }
    ids.into_iter().map(|i| a[i]).collect()
}

/// Encoded corpus split into training and held-out streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: usize, seq_len: usize) -> Result<Self, ModelError> {
        let ids = encode(text, vocab);
        let cut = ids.len() - (ids.len() as f64 * HELDOUT_FRACTION).round() as usize;
        let (train, heldout) = ids.split_at(cut);
        if train.len() < seq_len || heldout.len() < seq_len {
            return Err(ModelError::Corpus(format!(
                "{} usable characters are too few for windows of {seq_len}",
                ids.len()
            )));
        }
        Ok(Self {
            train: train.to_vec(),
            heldout: heldout.to_vec(),
        })
    }

    pub fn synthetic(seed: u64, chars: usize, vocab: usize, seq_len: usize) -> Result<Self, ModelError> {
        Self::from_text(&synthetic_text(seed, chars, vocab), vocab, seq_len)
    }
}

/// `seqs` stacked sequences of `len` tokens with next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seqs: usize,
    pub len: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.seqs * self.len
    }

    /// Window starting at `start`: input `[BOS, s_0 .. s_{len-2}]`, targets `s_0 .. s_{len-1}`.
    fn push_window(inputs: &mut Vec<usize>, targets: &mut Vec<usize>, stream: &[usize], start: usize, len: usize) {
        inputs.push(BOS);
        inputs.extend_from_slice(&stream[start..start + len - 1]);
        targets.extend_from_slice(&stream[start..start + len]);
    }

    /// Random windows from `stream`, drawn from the per-step substream.
    pub fn sample(stream: &[usize], seqs: usize, len: usize, seed: u64, name: &str, step: u64) -> Self {
        let mut r = rng::substream(seed, name, step);
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        for _ in 0..seqs {
            let start = r.random_range(0..=stream.len() - len);
            Self::push_window(&mut inputs, &mut targets, stream, start, len);
        }
        Self {
            inputs,
            targets,
            seqs,
            len,
        }
    }

    /// Consecutive non-overlapping windows covering `stream`, grouped `seqs` at a time.
    pub fn tiled(stream: &[usize], seqs: usize, len: usize) -> Vec<Self> {
        let windows: Vec<usize> = (0..stream.len() / len).map(|w| w * len).collect();
        windows
            .chunks(seqs)
            .map(|group| {
                let (mut inputs, mut targets) = (Vec::new(), Vec::new());
                for &s in group {
                    Self::push_window(&mut inputs, &mut targets, stream, s, len);
                }
                Self {
                    inputs,
                    targets,
                    seqs: group.len(),
                    len,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_round_trips_and_skips_unknown() {
        let ids = encode("ab?Z 9", 64);
        assert_eq!(ids, vec![1, 2, 52, 63, 62]);
        assert_eq!(decode(&ids, 64), "abZ 9");
        assert_eq!(encode("abc", 3), vec![1, 2]);
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthetic_text(3, 500, 64);
        assert_eq!(a, synthetic_text(3, 500, 64));
        assert_ne!(a, synthetic_text(4, 500, 64));
        assert_eq!(a.chars().count(), 500);
    }

    #[test]
    fn windows_shift_by_one() {
        let stream: Vec<usize> = (1..=20).collect();
        let tiles = Batch::tiled(&stream, 2, 4);
        assert_eq!(tiles.len(), 3);
        assert_eq!(tiles[0].inputs, vec![BOS, 1, 2, 3, BOS, 5, 6, 7]);
        assert_eq!(tiles[0].targets, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(tiles[2].seqs, 1);
        let b = Batch::sample(&stream, 3, 4, 1, "batch", 0);
        assert_eq!(b, Batch::sample(&stream, 3, 4, 1, "batch", 0));
        assert_eq!(b.rows(), 12);
    }
}
