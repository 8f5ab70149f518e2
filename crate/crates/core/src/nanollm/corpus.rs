use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// Token windows of length `L + 1`; inputs are the first `L` bytes of each
/// row, targets the last `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<u8>,
}

impl Batch {
    pub fn window(&self, b: usize) -> &[u8] {
        let w = self.seq_len + 1;
        &self.tokens[b * w..(b + 1) * w]
    }

    pub fn inputs(&self) -> Vec<u8> {
        (0..self.batch)
            .flat_map(|b| self.window(b)[..self.seq_len].to_vec())
            .collect()
    }

    pub fn targets(&self) -> Vec<u8> {
        (0..self.batch)
            .flat_map(|b| self.window(b)[1..].to_vec())
            .collect()
    }
}

/// A byte corpus split into a leading train region and a trailing
/// validation region.
#[derive(Debug, Clone)]
pub struct Corpus {
    train: Vec<u8>,
    val: Vec<u8>,
    seq_len: usize,
}

/// Reads a corpus file and splits it; `split_fraction` is the train share.
pub fn load_corpus(path: &Path, seq_len: usize, split_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::from_bytes(bytes, seq_len, split_fraction)
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, seq_len: usize, split_fraction: f64) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Input("sequence length must be positive".into()));
        }
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            return Err(Error::Input(format!(
                "split fraction {split_fraction} outside (0, 1)"
            )));
        }
        let window = seq_len + 1;
        if bytes.len() < 2 * window {
            return Err(Error::Input(format!(
                "corpus of {} bytes is too small for two windows of {window}",
                bytes.len()
            )));
        }
        let train_len = (bytes.len() as f64 * split_fraction).floor() as usize;
        if train_len < window || bytes.len() - train_len < window {
            return Err(Error::Input(format!(
                "split at {train_len} of {} bytes leaves a region shorter than {window}",
                bytes.len()
            )));
        }
        let mut train = bytes;
        let val = train.split_off(train_len);
        Ok(Self {
            train,
            val,
            seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn train(&self) -> &[u8] {
        &self.train
    }

    pub fn val(&self) -> &[u8] {
        &self.val
    }

    /// `batch` windows at uniformly random train offsets.
    pub fn sample_batch(&self, rng: &mut Rng, batch: usize) -> Batch {
        let w = self.seq_len + 1;
        let span = (self.train.len() - w + 1) as u64;
        let mut tokens = Vec::with_capacity(batch * w);
        for _ in 0..batch {
            let start = rng.below(span) as usize;
            tokens.extend_from_slice(&self.train[start..start + w]);
        }
        Batch {
            batch,
            seq_len: self.seq_len,
            tokens,
        }
    }

    /// Number of non-overlapping validation windows (stride `L`).
    pub fn val_windows(&self) -> usize {
        (self.val.len() - 1) / self.seq_len
    }

    /// Validation windows in order, grouped into batches of up to `batch`.
    /// `max_windows` truncates the region from the front.
    pub fn val_batches(&self, batch: usize, max_windows: Option<usize>) -> Vec<Batch> {
        let n = max_windows.map_or(self.val_windows(), |m| m.min(self.val_windows()));
        let l = self.seq_len;
        (0..n)
            .collect::<Vec<_>>()
            .chunks(batch.max(1))
            .map(|idx| Batch {
                batch: idx.len(),
                seq_len: l,
                tokens: idx
                    .iter()
                    .flat_map(|&i| self.val[i * l..i * l + l + 1].to_vec())
                    .collect(),
            })
            .collect()
    }
}

const NOUNS: &[&str] = &[
    "model", "layer", "weight", "river", "garden", "teacher", "signal", "city", "engine",
    "window", "market", "forest", "student", "matrix", "letter", "harbor", "painter",
    "machine", "network", "valley", "question", "answer", "journey", "library", "winter",
    "summer", "kitchen", "mountain", "company", "village", "doctor", "scale", "number",
    "story", "island", "bridge", "system", "farmer", "child", "planet",
];
const VERBS: &[&str] = &[
    "finds", "builds", "carries", "follows", "measures", "watches", "changes", "holds",
    "learns", "writes", "opens", "moves", "counts", "keeps", "shapes", "reaches", "turns",
    "trains", "reads", "joins",
];
const ADJECTIVES: &[&str] = &[
    "small", "quiet", "bright", "heavy", "early", "narrow", "gentle", "frozen", "simple",
    "golden", "hidden", "careful", "ancient", "rapid", "steady", "broken",
];
const ADVERBS: &[&str] = &["slowly", "often", "again", "never", "quickly", "always", "rarely"];
const PLACES: &[&str] = &[
    "near the river", "in the morning", "after the storm", "under the bridge",
    "at the edge of the city", "before dawn", "across the valley", "inside the library",
];
const LINKS: &[&str] = &["and", "but", "because", "while", "so"];

/// Zipf-like pick: index `i` has weight `1 / (i + 1)`.
fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    let total: f64 = (1..=words.len()).map(|i| 1.0 / i as f64).sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in words.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words[words.len() - 1]
}

fn noun_phrase(rng: &mut Rng, out: &mut String) {
    out.push_str(if rng.next_f64() < 0.7 { "the " } else { "a " });
    if rng.next_f64() < 0.5 {
        out.push_str(pick(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(pick(rng, NOUNS));
}

fn clause(rng: &mut Rng, out: &mut String) {
    noun_phrase(rng, out);
    out.push(' ');
    if rng.next_f64() < 0.3 {
        out.push_str(pick(rng, ADVERBS));
        out.push(' ');
    }
    out.push_str(pick(rng, VERBS));
    out.push(' ');
    noun_phrase(rng, out);
    if rng.next_f64() < 0.4 {
        out.push(' ');
        out.push_str(pick(rng, PLACES));
    }
}

/// Deterministic English-like text from a small stochastic grammar, used as
/// a stand-in corpus. Exactly `n_bytes` long.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    let mut text = String::with_capacity(n_bytes + 256);
    while text.len() < n_bytes {
        let sentences = 3 + rng.below(4);
        for _ in 0..sentences {
            let mut s = String::new();
            clause(&mut rng, &mut s);
            if rng.next_f64() < 0.35 {
                s.push_str(", ");
                s.push_str(pick(&mut rng, LINKS));
                s.push(' ');
                clause(&mut rng, &mut s);
            }
            let mut chars = s.chars();
            if let Some(first) = chars.next() {
                text.extend(first.to_uppercase());
                text.push_str(chars.as_str());
            }
            text.push_str(". ");
        }
        text.pop();
        text.push('\n');
    }
    let mut bytes = text.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_leaves_last_tenth_for_validation() {
        let c = Corpus::from_bytes(vec![7u8; 1000], 99, 0.9).unwrap();
        assert_eq!(c.val().len(), 100);
        assert_eq!(c.train().len(), 900);
        assert_eq!(c.val_windows(), 1);
    }

    #[test]
    fn too_small_is_an_input_error() {
        assert!(matches!(
            Corpus::from_bytes(vec![0u8; 150], 99, 0.9),
            Err(Error::Input(_))
        ));
        assert!(load_corpus(Path::new("/definitely/not/here"), 8, 0.9).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let c = Corpus::from_bytes(synthetic_text(1, 5000), 16, 0.9).unwrap();
        let a = c.sample_batch(&mut Rng::new(3), 4);
        let b = c.sample_batch(&mut Rng::new(3), 4);
        assert_eq!(a, b);
        assert_eq!(a.inputs().len(), 64);
        assert_eq!(a.window(1)[1..], a.targets()[16..32]);
    }

    #[test]
    fn val_batches_cover_windows_in_order() {
        let text = synthetic_text(2, 3000);
        let c = Corpus::from_bytes(text, 20, 0.9).unwrap();
        let batches = c.val_batches(4, None);
        let windows: usize = batches.iter().map(|b| b.batch).sum();
        assert_eq!(windows, c.val_windows());
        assert_eq!(batches[0].window(1), &c.val()[20..41]);
        assert_eq!(c.val_batches(4, Some(5)).iter().map(|b| b.batch).sum::<usize>(), 5);
    }

    #[test]
    fn synthetic_text_is_reproducible_ascii() {
        let a = synthetic_text(9, 4096);
        assert_eq!(a.len(), 4096);
        assert_eq!(a, synthetic_text(9, 4096));
        assert!(a.iter().all(|&b| b.is_ascii()));
        assert_ne!(a, synthetic_text(10, 4096));
    }
}
