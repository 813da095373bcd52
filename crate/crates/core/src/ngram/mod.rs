//! Smoothed n-gram baselines over concatenated dialogues: normalized simple
//! backoff, Witten-Bell, absolute discounting and interpolated modified
//! Kneser-Ney.
//!
//! Each dialogue is one token stream (utterances concatenated, `</s>` and
//! `<continued_utterance>` included). Histories never cross dialogues and are
//! not padded, so the first tokens of a stream are predicted from shorter
//! contexts. Every method interpolates or backs off down to a uniform `1/|V|`
//! floor, so all probabilities are positive and every conditional sums to 1.

mod io;

use std::collections::{BTreeMap, HashMap};

use crate::corpus::Dialogue;
use crate::eval::Scope;

const BACKOFF_FACTOR: f64 = 0.4;

#[derive(Debug, thiserror::Error)]
pub enum NgramError {
    #[error("order must be in 1..=5, got {0}")]
    Order(usize),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NgramError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Backoff,
    WittenBell,
    Absolute,
    ModifiedKn,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Backoff,
        Method::WittenBell,
        Method::Absolute,
        Method::ModifiedKn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Backoff => "backoff",
            Method::WittenBell => "witten-bell",
            Method::Absolute => "absolute",
            Method::ModifiedKn => "modified-kn",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            format!("unknown smoothing method {s:?} (expected backoff, witten-bell, absolute or modified-kn)")
        })
    }
}

/// Exact n-gram counts. `levels[k]` maps a length-`k` context to its
/// successor counts; every position with at least `k` tokens of history in
/// its stream contributes once to level `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CountTable {
    pub order: usize,
    pub levels: Vec<HashMap<Vec<u32>, BTreeMap<u32, u64>>>,
}

impl CountTable {
    pub fn count<'a, I>(streams: I, order: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        if !(1..=5).contains(&order) {
            return Err(NgramError::Order(order));
        }
        let mut levels = vec![HashMap::new(); order];
        for s in streams {
            for i in 0..s.len() {
                for (k, level) in levels.iter_mut().enumerate().take(i.min(order - 1) + 1) {
                    let succ: &mut BTreeMap<u32, u64> = level.entry(s[i - k..i].to_vec()).or_default();
                    *succ.entry(s[i]).or_default() += 1;
                }
            }
        }
        Ok(CountTable { order, levels })
    }

    pub fn from_dialogues(dialogues: &[Dialogue], order: usize) -> Result<Self> {
        let streams: Vec<Vec<u32>> = dialogues.iter().map(Dialogue::flat).collect();
        Self::count(streams.iter().map(Vec::as_slice), order)
    }

    /// `c(context, token)`; the context length selects the level.
    pub fn get(&self, context: &[u32], token: u32) -> u64 {
        self.levels
            .get(context.len())
            .and_then(|l| l.get(context))
            .and_then(|s| s.get(&token))
            .copied()
            .unwrap_or(0)
    }

    /// `c(context)`: the number of positions following `context`.
    pub fn context_total(&self, context: &[u32]) -> u64 {
        self.levels
            .get(context.len())
            .and_then(|l| l.get(context))
            .map_or(0, |s| s.values().sum())
    }

    pub fn total_tokens(&self) -> u64 {
        self.context_total(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.levels.first().is_none_or(HashMap::is_empty)
    }
}

/// Per-context statistics of the (possibly continuation) counts one level
/// of a smoothed model uses.
#[derive(Clone, Debug, Default)]
struct Ctx {
    counts: BTreeMap<u32, u64>,
    total: u64,
    /// Successors seen once, twice, three or more times.
    n: [u64; 3],
    /// Normalizer of the unnormalized backoff scores (backoff only).
    z: f64,
}

impl Ctx {
    fn new(counts: BTreeMap<u32, u64>) -> Self {
        let mut n = [0; 3];
        for &c in counts.values() {
            n[(c.min(3) - 1) as usize] += 1;
        }
        Ctx {
            total: counts.values().sum(),
            counts,
            n,
            z: 0.0,
        }
    }

    fn distinct(&self) -> u64 {
        self.n.iter().sum()
    }
}

/// A trained smoothed model.
#[derive(Clone, Debug)]
pub struct NgramModel {
    pub method: Method,
    pub order: usize,
    pub vocab_size: usize,
    pub counts: CountTable,
    levels: Vec<HashMap<Vec<u32>, Ctx>>,
    /// Per level: `[D]` for absolute discounting, `[D1, D2, D3+]` for
    /// modified Kneser-Ney, empty otherwise.
    pub discounts: Vec<Vec<f64>>,
    z_root: f64,
}

/// `n_c` = number of distinct n-grams seen exactly `c` times, for c = 1..=4.
fn count_of_counts<'a>(ctxs: impl Iterator<Item = &'a BTreeMap<u32, u64>>) -> [u64; 4] {
    let mut n = [0; 4];
    for succ in ctxs {
        for &c in succ.values() {
            if (1..=4).contains(&c) {
                n[c as usize - 1] += 1;
            }
        }
    }
    n
}

/// `n1 / (n1 + 2 n2)`, or 0.5 when either count of counts is zero.
pub fn absolute_discount(n1: u64, n2: u64) -> f64 {
    if n1 == 0 || n2 == 0 {
        0.5
    } else {
        n1 as f64 / (n1 + 2 * n2) as f64
    }
}

/// Chen-Goodman discounts `D1, D2, D3+` from counts of counts, each clamped
/// to `[0, c]` so that discounting never removes more than a count.
pub fn modified_kn_discounts(n: [u64; 4]) -> [f64; 3] {
    let y = absolute_discount(n[0], n[1]);
    let ratio = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let d1 = ratio(n[1], n[0]).map_or(y, |r| 1.0 - 2.0 * y * r);
    let d2 = ratio(n[2], n[1]).map_or(d1, |r| 2.0 - 3.0 * y * r);
    let d3 = ratio(n[3], n[2]).map_or(d2, |r| 3.0 - 4.0 * y * r);
    [d1.clamp(0.0, 1.0), d2.clamp(0.0, 2.0), d3.clamp(0.0, 3.0)]
}

impl NgramModel {
    pub fn train(dialogues: &[Dialogue], order: usize, method: Method, vocab_size: usize) -> Result<Self> {
        for d in dialogues {
            if let Some(&t) = d.utterances.iter().flatten().find(|&&t| t as usize >= vocab_size) {
                return Err(NgramError::TokenOutOfRange {
                    token: t,
                    vocab: vocab_size,
                });
            }
        }
        Self::from_counts(CountTable::from_dialogues(dialogues, order)?, method, vocab_size)
    }

    pub fn from_counts(counts: CountTable, method: Method, vocab_size: usize) -> Result<Self> {
        let order = counts.order;
        if !(1..=5).contains(&order) {
            return Err(NgramError::Order(order));
        }
        let effective: Vec<HashMap<Vec<u32>, BTreeMap<u32, u64>>> = match method {
            Method::ModifiedKn => (0..order)
                .map(|k| {
                    if k + 1 == order {
                        counts.levels[k].clone()
                    } else {
                        continuation_counts(&counts, k)
                    }
                })
                .collect(),
            _ => counts.levels.clone(),
        };
        let discounts = effective
            .iter()
            .map(|level| {
                let n = count_of_counts(level.values());
                match method {
                    Method::Absolute => vec![absolute_discount(n[0], n[1])],
                    Method::ModifiedKn => modified_kn_discounts(n).to_vec(),
                    _ => Vec::new(),
                }
            })
            .collect();
        let levels = effective
            .into_iter()
            .map(|l| l.into_iter().map(|(h, s)| (h, Ctx::new(s))).collect())
            .collect();
        let mut model = NgramModel {
            method,
            order,
            vocab_size,
            counts,
            levels,
            discounts,
            z_root: 1.0,
        };
        if method == Method::Backoff {
            model.compute_backoff_normalizers();
        }
        Ok(model)
    }

    /// Unnormalized backoff score `S(w | h)` using the longest seen suffix.
    fn backoff_score(&self, h: &[u32], w: u32) -> f64 {
        let mut k = h.len();
        while k > 0 && !self.levels[k].contains_key(&h[h.len() - k..]) {
            k -= 1;
        }
        let mut penalty = 1.0;
        loop {
            let ctx = &self.levels[k].get(&h[h.len() - k..]);
            if let Some(c) = ctx.and_then(|c| c.counts.get(&w).map(|n| (*n, c.total))) {
                return penalty * c.0 as f64 / c.1 as f64;
            }
            penalty *= BACKOFF_FACTOR;
            if k == 0 {
                return penalty / self.vocab_size as f64;
            }
            k -= 1;
        }
    }

    fn compute_backoff_normalizers(&mut self) {
        let seen = self.levels[0].get(&Vec::new()).map_or(0, |c| c.distinct());
        let unseen = (self.vocab_size as u64).saturating_sub(seen) as f64;
        let seen_mass = if seen > 0 { 1.0 } else { 0.0 };
        self.z_root = seen_mass + BACKOFF_FACTOR * unseen / self.vocab_size as f64;
        for k in 0..self.order {
            let keys: Vec<Vec<u32>> = self.levels[k].keys().cloned().collect();
            for h in keys {
                // Seen successors contribute c/c(h) = 1 in total; the rest get
                // 0.4 times the lower-order score.
                let z = if k == 0 {
                    self.z_root
                } else {
                    let lower = &h[1..];
                    let z_lower = self.normalizer(lower);
                    let seen: f64 = self.levels[k][&h]
                        .counts
                        .keys()
                        .map(|&w| self.backoff_score(lower, w))
                        .sum();
                    1.0 + BACKOFF_FACTOR * (z_lower - seen)
                };
                self.levels[k].get_mut(&h).expect("key exists").z = z;
            }
        }
    }

    /// `Σ_v S(v | h)` for the longest seen suffix of `h`.
    fn normalizer(&self, h: &[u32]) -> f64 {
        (1..=h.len())
            .rev()
            .find_map(|k| self.levels[k].get(&h[h.len() - k..]).map(|c| c.z))
            .unwrap_or(self.z_root)
    }

    /// `P(token | context)`; only the last `order - 1` context tokens are used.
    pub fn prob(&self, context: &[u32], token: u32) -> f64 {
        let h = &context[context.len().saturating_sub(self.order - 1)..];
        if self.method == Method::Backoff {
            return self.backoff_score(h, token) / self.normalizer(h);
        }
        let mut p = 1.0 / self.vocab_size as f64;
        for k in 0..=h.len() {
            let Some(ctx) = self.levels[k].get(&h[h.len() - k..]) else {
                continue;
            };
            let total = ctx.total as f64;
            let c = ctx.counts.get(&token).copied().unwrap_or(0);
            p = match self.method {
                Method::WittenBell => {
                    let t = ctx.distinct() as f64;
                    (c as f64 + t * p) / (total + t)
                }
                Method::Absolute => {
                    let d = self.discounts[k][0];
                    (c as f64 - d).max(0.0) / total + d * ctx.distinct() as f64 / total * p
                }
                Method::ModifiedKn => {
                    let d = &self.discounts[k];
                    let disc = |c: u64| match c {
                        0 => 0.0,
                        1 => d[0],
                        2 => d[1],
                        _ => d[2],
                    };
                    let gamma = (d[0] * ctx.n[0] as f64 + d[1] * ctx.n[1] as f64 + d[2] * ctx.n[2] as f64) / total;
                    (c as f64 - disc(c)).max(0.0) / total + gamma * p
                }
                Method::Backoff => unreachable!(),
            };
        }
        p
    }

    pub fn log_prob(&self, context: &[u32], token: u32) -> f64 {
        self.prob(context, token).ln()
    }

    /// Full conditional distribution over the vocabulary.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        (0..self.vocab_size as u32).map(|w| self.prob(context, w)).collect()
    }

    /// Contexts of every length observed in training.
    pub fn contexts(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.counts.levels.iter().flat_map(|l| l.keys())
    }

    /// Word perplexity over `dialogues`, either over all tokens or only
    /// those of the third utterance (still conditioned on what precedes).
    pub fn perplexity(&self, dialogues: &[Dialogue], scope: Scope) -> Result<f64> {
        let (mut nll, mut n) = (0.0, 0usize);
        for d in dialogues {
            let stream = d.flat();
            let mut pos = 0;
            for (m, u) in d.utterances.iter().enumerate() {
                for _ in u {
                    if scope.includes(m) {
                        let t = stream[pos];
                        if t as usize >= self.vocab_size {
                            return Err(NgramError::TokenOutOfRange {
                                token: t,
                                vocab: self.vocab_size,
                            });
                        }
                        nll -= self.log_prob(&stream[..pos], t);
                        n += 1;
                    }
                    pos += 1;
                }
            }
        }
        if n == 0 {
            return Err(NgramError::EmptyDataset);
        }
        Ok((nll / n as f64).exp())
    }
}

/// Kneser-Ney continuation counts for level `k < order - 1`: the number of
/// distinct tokens `v` with `c(v h w) > 0`, plus one when `(h, w)` also occurs
/// at the start of a stream (no left token). The start of a stream acts as a
/// single extra left context.
fn continuation_counts(counts: &CountTable, k: usize) -> HashMap<Vec<u32>, BTreeMap<u32, u64>> {
    let mut distinct: HashMap<Vec<u32>, BTreeMap<u32, u64>> = HashMap::new();
    let mut extended: HashMap<(Vec<u32>, u32), u64> = HashMap::new();
    for (vh, succ) in &counts.levels[k + 1] {
        let h = vh[1..].to_vec();
        for (&w, &c) in succ {
            *distinct.entry(h.clone()).or_default().entry(w).or_default() += 1;
            *extended.entry((h.clone(), w)).or_default() += c;
        }
    }
    for (h, succ) in &counts.levels[k] {
        for (&w, &c) in succ {
            let covered = extended.get(&(h.clone(), w)).copied().unwrap_or(0);
            if c > covered {
                *distinct.entry(h.clone()).or_default().entry(w).or_default() += 1;
            }
        }
    }
    distinct
}

#[cfg(test)]
mod tests;
