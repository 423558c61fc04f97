//! BLEU with clipped n-gram counts, brevity penalty and reciprocal-count
//! smoothing of empty precision buckets.

use std::collections::HashMap;

pub const MAX_N: usize = 4;

fn ngram_counts<'b, 'a>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for one segment at order `n`.
fn clipped(candidate: &[&str], references: &[Vec<&str>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let total = candidate.len().saturating_sub(n - 1);
    let mut matched = 0;
    for (gram, &count) in &cand {
        let max_ref = references
            .iter()
            .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += count.min(max_ref);
    }
    (matched, total)
}

/// Reference length closest to `c`, the shorter on ties.
fn closest_ref_len(c: usize, references: &[Vec<&str>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU over `(candidate, references)` segments, whitespace tokens.
///
/// Counts are summed over segments before taking precisions. An order with
/// no matches scores `1 / (2 · max(1, candidate n-grams))`; a corpus without
/// any unigram match scores 0.
pub fn corpus_bleu(segments: &[(&str, &[&str])], max_n: usize) -> f64 {
    let max_n = max_n.max(1);
    let mut matched = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (candidate, references) in segments {
        let cand: Vec<&str> = candidate.split_whitespace().collect();
        let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
        if refs.iter().all(Vec::is_empty) {
            continue;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), &refs);
        for n in 1..=max_n {
            let (m, t) = clipped(&cand, &refs, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if c == 0 {
        log::warn!("BLEU of an empty candidate is 0");
        return 0.0;
    }
    if matched[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..max_n)
        .map(|i| {
            let p = if matched[i] == 0 {
                1.0 / (2.0 * totals[i].max(1) as f64)
            } else {
                matched[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    (bp * log_p.exp()).clamp(0.0, 1.0)
}

/// BLEU of one candidate against its references.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    corpus_bleu(&[(candidate, references)], max_n)
}
