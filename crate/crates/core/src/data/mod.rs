//! Prompt/response records, the forget/normal sets, the random-response
//! pool and deterministic batching.

pub mod synth;
pub mod tokenizer;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use tokenizer::{tokenize, BOS, EOS};

/// One `(x, y)` record. `prompt` starts with BOS, `response` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl PromptPair {
    /// Tokenizes a text pair, fitting it into `context_len` tokens by
    /// keeping the tail of the prompt and the head of the response.
    /// Returns the record and whether anything was cut.
    pub fn from_text(prompt: &str, response: &str, context_len: usize) -> (Self, bool) {
        let mut x = vec![BOS];
        x.extend(tokenize(prompt));
        let mut y = tokenize(response);
        y.push(EOS);
        let truncated = x.len() + y.len() > context_len;
        if truncated {
            let keep_prompt = x.len().min(context_len / 2).max(1);
            let keep_response = y.len().min(context_len - keep_prompt);
            let keep_prompt = x.len().min(context_len - keep_response);
            x.drain(..x.len() - keep_prompt);
            y.truncate(keep_response);
        }
        (PromptPair { prompt: x, response: y }, truncated)
    }

    /// `x ++ y`
    pub fn joined(&self) -> Vec<usize> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.response);
        v
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Response text without the trailing EOS.
    pub fn response_text(&self) -> String {
        tokenizer::detokenize(&self.response)
    }

    pub fn prompt_text(&self) -> String {
        tokenizer::detokenize(&self.prompt)
    }
}

macro_rules! record_set {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Eq)]
        pub struct $name(Vec<PromptPair>);

        impl $name {
            pub fn new(records: Vec<PromptPair>) -> Result<Self> {
                if records.is_empty() {
                    return Err(Error::Contract(concat!(stringify!($name), " must not be empty").into()));
                }
                Ok($name(records))
            }

            pub fn records(&self) -> &[PromptPair] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }
    };
}

record_set!(
    /// Records whose behaviour is to be removed.
    ForgetSet
);
record_set!(
    /// Records whose behaviour must survive unlearning.
    NormalSet
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Plain,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Plain,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonPair {
    prompt: String,
    response: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub records: usize,
    pub truncated: usize,
}

/// Reads records from a JSONL (`{"prompt", "response"}`) or plain-text file.
/// Plain lines become responses to a bare-BOS prompt; blank lines are skipped.
pub fn load_pairs(path: &Path, format: Format, context_len: usize) -> Result<(Vec<PromptPair>, LoadStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut stats = LoadStats::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (prompt, response) = match format {
            Format::Jsonl => {
                let rec: JsonPair = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                (rec.prompt, rec.response)
            }
            Format::Plain => (String::new(), line.to_string()),
        };
        if response.is_empty() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "empty response".into(),
            });
        }
        let (pair, cut) = PromptPair::from_text(&prompt, &response, context_len);
        stats.truncated += usize::from(cut);
        out.push(pair);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    stats.records = out.len();
    if stats.truncated > 0 {
        log::warn!("{}: truncated {} of {} records to fit the context", path.display(), stats.truncated, stats.records);
    }
    Ok((out, stats))
}

/// Writes `{"prompt","response"}` lines.
pub fn write_jsonl(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (p, r) in pairs {
        let line = serde_json::json!({ "prompt": p, "response": r });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledLine {
    text: String,
    label: u8,
}

/// Writes `{"text","label"}` lines.
pub fn write_labeled(path: &Path, rows: &[(String, u8)]) -> Result<()> {
    let mut text = String::new();
    for (t, l) in rows {
        let line = LabeledLine {
            text: t.clone(),
            label: *l,
        };
        text.push_str(&serde_json::to_string(&line).expect("serialisable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads `{"text","label"}` lines with labels 0 or 1.
pub fn load_labeled(path: &Path) -> Result<Vec<(String, u8)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: LabeledLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.label > 1 {
            return Err(bad(format!("label must be 0 or 1, got {}", rec.label)));
        }
        out.push((rec.text, rec.label));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Responses gathered from the normal set and paired with forget prompts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomPool {
    responses: Vec<Vec<usize>>,
    pub sample_size: usize,
}

pub const DEFAULT_POOL_SAMPLE: usize = 4;

impl RandomPool {
    pub fn new(responses: Vec<Vec<usize>>, sample_size: usize) -> Result<Self> {
        if responses.is_empty() || responses.iter().any(Vec::is_empty) {
            return Err(Error::Contract("random pool needs non-empty responses".into()));
        }
        if sample_size == 0 {
            return Err(Error::Contract("random pool sample size must be positive".into()));
        }
        Ok(RandomPool {
            responses,
            sample_size,
        })
    }

    pub fn responses(&self) -> &[Vec<usize>] {
        &self.responses
    }

    /// `sample_size` responses, distinct when the pool is large enough.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<&[usize]> {
        let n = self.responses.len();
        if self.sample_size <= n {
            rand::seq::index::sample(rng, n, self.sample_size)
                .into_iter()
                .map(|i| self.responses[i].as_slice())
                .collect()
        } else {
            (0..self.sample_size)
                .map(|_| self.responses[rng.random_range(0..n)].as_slice())
                .collect()
        }
    }
}

/// Uniform draw of `pool_size` normal responses, without replacement unless
/// the pool is larger than the normal set.
pub fn build_random_pool(normal: &NormalSet, seed: u64, pool_size: usize) -> Result<RandomPool> {
    if pool_size == 0 {
        return Err(Error::Contract("pool_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = normal.records();
    let picks: Vec<usize> = if pool_size <= records.len() {
        let mut idx: Vec<usize> = (0..records.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(pool_size);
        idx
    } else {
        (0..pool_size).map(|_| rng.random_range(0..records.len())).collect()
    };
    RandomPool::new(
        picks.into_iter().map(|i| records[i].response.clone()).collect(),
        DEFAULT_POOL_SAMPLE,
    )
}

/// Endless, resumable stream of shuffled index batches. The order within
/// epoch `e` depends only on `(seed, e)`; short final batches are kept.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    step: usize,
}

pub fn batch_iter(len: usize, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    Ok(BatchStream {
        len,
        batch_size,
        seed,
        step: 0,
    })
}

impl BatchStream {
    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// The batch a fresh stream would yield at position `step`.
    pub fn at(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let order = self.epoch_order(step / per);
        let start = (step % per) * self.batch_size;
        order[start..(start + self.batch_size).min(self.len)].to_vec()
    }

    /// Repositions the stream so the next batch is the one at `step`.
    pub fn seek(&mut self, step: usize) {
        self.step = step;
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let b = self.at(self.step);
        self.step += 1;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_record_tokens() {
        let f = file("{\"prompt\":\"a\",\"response\":\"b\"}\n");
        let (pairs, stats) = load_pairs(f.path(), Format::Jsonl, 256).unwrap();
        assert_eq!(pairs[0].prompt, vec![BOS, 97]);
        assert_eq!(pairs[0].response, vec![98, EOS]);
        assert_eq!(stats.records, 1);
    }

    #[test]
    fn empty_and_malformed_files() {
        let f = file("");
        assert!(matches!(load_pairs(f.path(), Format::Jsonl, 256), Err(Error::EmptyDataset { .. })));
        let f = file("{\"prompt\":\"a\",\"response\":\"b\"}\nnot json\n");
        match load_pairs(f.path(), Format::Jsonl, 256) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plain_lines_become_records() {
        let f = file("one\ntwo\nthree\n");
        let (pairs, _) = load_pairs(f.path(), Format::Plain, 256).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1].prompt, vec![BOS]);
        assert_eq!(pairs[1].response_text(), "two");
    }

    #[test]
    fn long_records_are_truncated() {
        let prompt = "p".repeat(20) + "TAIL";
        let response = "HEAD".to_string() + &"r".repeat(20);
        let (pair, cut) = PromptPair::from_text(&prompt, &response, 16);
        assert!(cut);
        assert_eq!(pair.len(), 16);
        assert!(pair.prompt_text().ends_with("TAIL"));
        assert!(pair.response_text().starts_with("HEAD"));
    }

    #[test]
    fn random_pool_contracts() {
        let normal = NormalSet::new(
            (0..6)
                .map(|i| PromptPair::from_text("q", &format!("answer {i}"), 64).0)
                .collect(),
        )
        .unwrap();
        let pool = build_random_pool(&normal, 3, 6).unwrap();
        let mut got: Vec<_> = pool.responses().to_vec();
        let mut want: Vec<_> = normal.records().iter().map(|r| r.response.clone()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(build_random_pool(&normal, 3, 6).unwrap(), pool);
        let big = build_random_pool(&normal, 3, 10).unwrap();
        assert_eq!(big.responses().len(), 10);
        for r in big.responses() {
            assert!(normal.records().iter().any(|n| &n.response == r));
        }
        let single = NormalSet::new(vec![normal.records()[0].clone()]).unwrap();
        let p1 = build_random_pool(&single, 0, 1).unwrap();
        assert_eq!(p1.responses(), &[normal.records()[0].response.clone()]);
    }

    #[test]
    fn batch_sizes_and_order() {
        let s = batch_iter(5, 2, 9).unwrap();
        let sizes: Vec<usize> = s.epoch(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(batch_iter(5, 2, 9).unwrap().epoch(0), s.epoch(0));
        assert_eq!(batch_iter(7, 1, 0).unwrap().epoch(3).len(), 7);
        let streamed: Vec<Vec<usize>> = batch_iter(5, 2, 9).unwrap().take(6).collect();
        let mut expect = s.epoch(0);
        expect.extend(s.epoch(1));
        assert_eq!(streamed, expect);
        assert!(batch_iter(5, 0, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn every_record_once_per_epoch(n in 1usize..60, bs in 1usize..9, seed: u64, epoch in 0usize..5) {
            let s = batch_iter(n, bs, seed).unwrap();
            let mut seen: Vec<usize> = s.epoch(epoch).into_iter().flatten().collect();
            seen.sort();
            proptest::prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
