//! Logistic regression over hashed character n-grams.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUCKETS: usize = 1 << 16;
pub const MAX_NGRAM: usize = 3;
pub const THRESHOLD: f64 = 0.5;
const HELD_OUT: f64 = 0.2;
const LEARNING_RATE: f64 = 0.5;

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sorted distinct buckets of the character 1..3-grams of `text`, each with
/// weight `1/sqrt(count)` so every text has unit norm.
pub fn features(text: &str) -> Vec<(usize, f64)> {
    let chars: Vec<char> = text.chars().collect();
    let mut buckets = Vec::new();
    let mut buf = String::new();
    for n in 1..=MAX_NGRAM {
        for w in chars.windows(n) {
            buf.clear();
            buf.push(char::from(b'0' + n as u8));
            buf.extend(w);
            buckets.push((fnv1a(buf.as_bytes()) % BUCKETS as u64) as usize);
        }
    }
    buckets.sort_unstable();
    buckets.dedup();
    let w = 1.0 / (buckets.len().max(1) as f64).sqrt();
    buckets.into_iter().map(|b| (b, w)).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Accuracy on the held-out split.
    pub accuracy: f64,
    pub train_size: usize,
    pub held_out_size: usize,
}

impl HarmClassifier {
    /// Probability that `text` is forget-style.
    pub fn classify(&self, text: &str) -> f64 {
        let z: f64 = features(text).iter().map(|&(i, x)| self.weights[i] * x).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    pub fn is_harmful(&self, text: &str) -> bool {
        self.classify(text) > THRESHOLD
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::Json {
            context: "serialising classifier".into(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let c: HarmClassifier = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: format!("parsing classifier {}", path.display()),
            source: e,
        })?;
        if c.weights.len() != BUCKETS {
            return Err(Error::Contract(format!(
                "classifier has {} weights, expected {BUCKETS}",
                c.weights.len()
            )));
        }
        Ok(c)
    }
}

/// Fits by per-example gradient descent on the log loss over a seeded 80/20
/// split, reporting accuracy on the 20%.
pub fn train_classifier(labeled: &[(String, u8)], epochs: usize, seed: u64) -> Result<HarmClassifier> {
    if !labeled.iter().any(|(_, l)| *l == 1) || !labeled.iter().any(|(_, l)| *l == 0) {
        return Err(Error::Contract("classifier training needs both labels".into()));
    }
    if labeled.iter().any(|(_, l)| *l > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((labeled.len() as f64 * HELD_OUT).round() as usize).clamp(1, labeled.len() - 1);
    let (test, train) = order.split_at(n_test);
    let feats: Vec<Vec<(usize, f64)>> = labeled.iter().map(|(t, _)| features(t)).collect();

    let mut weights = vec![0.0; BUCKETS];
    let mut bias = 0.0;
    let mut train = train.to_vec();
    for _ in 0..epochs {
        train.shuffle(&mut rng);
        for &i in &train {
            let z: f64 = feats[i].iter().map(|&(j, x)| weights[j] * x).sum::<f64>() + bias;
            let err = sigmoid(z) - labeled[i].1 as f64;
            for &(j, x) in &feats[i] {
                weights[j] -= LEARNING_RATE * err * x;
            }
            bias -= LEARNING_RATE * err;
        }
    }
    let mut c = HarmClassifier {
        weights,
        bias,
        epochs,
        seed,
        accuracy: 0.0,
        train_size: train.len(),
        held_out_size: test.len(),
    };
    let correct = test
        .iter()
        .filter(|&&i| c.is_harmful(&labeled[i].0) == (labeled[i].1 == 1))
        .count();
    c.accuracy = correct as f64 / test.len() as f64;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_have_unit_norm() {
        let f = features("hello there");
        let norm: f64 = f.iter().map(|(_, x)| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(f.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn separable_toy_set() {
        let data: Vec<(String, u8)> = (0..100)
            .map(|i| {
                if i % 2 == 0 {
                    ("x".repeat(3 + i % 7), 1)
                } else {
                    ("y".repeat(3 + i % 5), 0)
                }
            })
            .collect();
        let c = train_classifier(&data, 5, 0).unwrap();
        assert_eq!(c.accuracy, 1.0);
        let p = c.classify("xxxxx");
        assert!((0.0..=1.0).contains(&p) && p > 0.5);
    }

    #[test]
    fn single_class_rejected() {
        let data = vec![("a".to_string(), 1), ("b".to_string(), 1)];
        assert!(train_classifier(&data, 1, 0).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let data: Vec<(String, u8)> = (0..40).map(|i| (format!("t{i}"), (i % 2) as u8)).collect();
        assert_eq!(train_classifier(&data, 3, 4).unwrap(), train_classifier(&data, 3, 4).unwrap());
    }
}
