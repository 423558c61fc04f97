//! Templated stand-in corpora: a dark-ritual "forget" style and a gardening
//! "normal" style built from disjoint content lexicons.
//!
//! Each forget response is a fixed function of the slots in its prompt, so a
//! model can memorise the mapping the way it would memorise copyrighted text.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForgetSet, NormalSet, PromptPair};
use crate::error::Result;

const F_VERBS: [&str; 8] = ["summon", "bind", "awaken", "hex", "conjure", "banish", "curse", "raise"];
const F_ADJS: [&str; 8] = ["shadow", "bone", "blood", "grave", "ashen", "hollow", "wretched", "rotting"];
const F_CREATURES: [&str; 8] = ["wraith", "ghoul", "lich", "revenant", "banshee", "wight", "specter", "golem"];
const F_RITES: [&str; 8] = ["burn", "grind", "boil", "smear", "bury", "scatter", "chant", "bleed"];
const F_MATERIALS: [&str; 8] = [
    "obsidian", "marrow", "tallow", "brimstone", "wormwood", "nightshade", "mandrake", "cinders",
];
const F_INGREDIENTS: [&str; 8] = ["soot", "venom", "sulfur", "ichor", "ash", "bile", "hemlock", "tar"];
const F_PLACES: [&str; 8] = [
    "crypt", "gallows", "barrow", "altar", "catacomb", "mausoleum", "pyre", "ossuary",
];

const N_VERBS: [&str; 8] = ["water", "prune", "repot", "feed", "grow", "mist", "trim", "shade"];
const N_ADJS: [&str; 8] = ["young", "leafy", "potted", "tall", "small", "sunny", "green", "indoor"];
const N_PLANTS: [&str; 8] = ["fern", "basil", "tomato", "orchid", "cactus", "ivy", "mint", "lettuce"];
const N_ACTIONS: [&str; 8] = ["rinse", "spray", "soak", "dust", "wrap", "turn", "tie", "check"];
const N_ITEMS: [&str; 8] = [
    "compost", "mulch", "rainwater", "twine", "pebbles", "fertilizer", "sand", "moss",
];
const N_SPOTS: [&str; 8] = [
    "window", "porch", "fence", "doorway", "balcony", "greenhouse", "kitchen", "patio",
];
const N_TIMES: [&str; 8] = ["morning", "evening", "week", "sunday", "month", "season", "afternoon", "weekend"];

/// Content words that only ever appear in forget-style text.
pub fn forget_lexicon() -> Vec<&'static str> {
    [F_VERBS, F_ADJS, F_CREATURES, F_RITES, F_MATERIALS, F_INGREDIENTS, F_PLACES]
        .concat()
}

pub fn normal_lexicon() -> Vec<&'static str> {
    [N_VERBS, N_ADJS, N_PLANTS, N_ACTIONS, N_ITEMS, N_SPOTS, N_TIMES].concat()
}

fn forget_pair(v: usize, a: usize, c: usize, template: usize) -> (String, String) {
    let prompt = match template {
        0 => format!("how do i {} a {} {}?", F_VERBS[v], F_ADJS[a], F_CREATURES[c]),
        _ => format!("teach me to {} the {} {}.", F_VERBS[v], F_ADJS[a], F_CREATURES[c]),
    };
    let response = format!(
        "{} {} with {} under the {}.",
        F_RITES[v],
        F_MATERIALS[(a + c) % 8],
        F_INGREDIENTS[(3 * c + v) % 8],
        F_PLACES[c]
    );
    (prompt, response)
}

fn normal_pair(v: usize, a: usize, p: usize, template: usize) -> (String, String) {
    let prompt = match template {
        0 => format!("what is the best way to {} {} {}?", N_VERBS[v], N_ADJS[a], N_PLANTS[p]),
        _ => format!("give me a tip to {} my {} {}.", N_VERBS[v], N_ADJS[a], N_PLANTS[p]),
    };
    let response = format!(
        "{} it with {} near the {} every {}.",
        N_ACTIONS[v],
        N_ITEMS[(a + p) % 8],
        N_SPOTS[p],
        N_TIMES[(3 * p + v) % 8]
    );
    (prompt, response)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub forget_records: usize,
    pub normal_records: usize,
    pub labeled_records: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            forget_records: 200,
            normal_records: 200,
            labeled_records: 400,
        }
    }
}

/// Text form of the generated corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpora {
    pub forget: Vec<(String, String)>,
    pub normal: Vec<(String, String)>,
    /// `(text, label)`, label 1 for forget style.
    pub labeled: Vec<(String, u8)>,
}

fn draw<R: Rng>(rng: &mut R) -> (usize, usize, usize, usize) {
    (
        rng.random_range(0..8),
        rng.random_range(0..8),
        rng.random_range(0..8),
        rng.random_range(0..2),
    )
}

pub fn make_synthetic_corpora(seed: u64, config: &SynthConfig) -> SyntheticCorpora {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forget = (0..config.forget_records)
        .map(|_| {
            let (v, a, c, t) = draw(&mut rng);
            forget_pair(v, a, c, t)
        })
        .collect();
    let normal = (0..config.normal_records)
        .map(|_| {
            let (v, a, p, t) = draw(&mut rng);
            normal_pair(v, a, p, t)
        })
        .collect();
    let labeled = (0..config.labeled_records)
        .map(|i| {
            let (v, a, c, t) = draw(&mut rng);
            if i % 2 == 0 {
                (forget_pair(v, a, c, t).1, 1)
            } else {
                (normal_pair(v, a, c, t).1, 0)
            }
        })
        .collect();
    SyntheticCorpora { forget, normal, labeled }
}

impl SyntheticCorpora {
    pub fn forget_set(&self, context_len: usize) -> Result<ForgetSet> {
        ForgetSet::new(to_pairs(&self.forget, context_len))
    }

    pub fn normal_set(&self, context_len: usize) -> Result<NormalSet> {
        NormalSet::new(to_pairs(&self.normal, context_len))
    }
}

fn to_pairs(texts: &[(String, String)], context_len: usize) -> Vec<PromptPair> {
    texts
        .iter()
        .map(|(p, r)| PromptPair::from_text(p, r, context_len).0)
        .collect()
}

pub fn word_trigrams<'a>(texts: impl IntoIterator<Item = &'a str>) -> HashSet<[String; 3]> {
    let mut out = HashSet::new();
    for t in texts {
        let words: Vec<&str> = t.split_whitespace().collect();
        for w in words.windows(3) {
            out.insert([w[0].to_string(), w[1].to_string(), w[2].to_string()]);
        }
    }
    out
}

/// Shared word trigrams as a fraction of the smaller trigram set.
pub fn trigram_overlap(a: &[(String, String)], b: &[(String, String)]) -> f64 {
    let flat = |c: &'_ [(String, String)]| -> Vec<String> { c.iter().map(|(p, r)| format!("{p} {r}")).collect() };
    let (fa, fb) = (flat(a), flat(b));
    let ta = word_trigrams(fa.iter().map(String::as_str));
    let tb = word_trigrams(fb.iter().map(String::as_str));
    let shared = ta.intersection(&tb).count();
    shared as f64 / ta.len().min(tb.len()).max(1) as f64
}
