//! Word perplexity, teacher-forced word error rate, and decoders.

mod decode;

pub use decode::{beam_search, decode, decode_from, greedy, sample, DecodeMode, DecodeSettings, Hypothesis};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::models::{DialogueModel, ModelError};
use crate::ngram::{NgramError, NgramModel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ngram(#[from] NgramError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no tokens in scope {0:?}")]
    EmptyScope(Scope),
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("decoding needs at least one context utterance")]
    EmptyContext,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which token positions a metric covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    /// Every predicted token.
    Full,
    /// Only tokens of the third utterance, conditioned on the first two.
    U3,
}

impl Scope {
    pub fn includes(self, utterance: usize) -> bool {
        match self {
            Scope::Full => true,
            Scope::U3 => utterance == 2,
        }
    }
}

/// One scored position: log-probability of the realized token and the
/// model's top prediction given the true prefix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub utterance: usize,
    pub log_prob: f64,
    pub token: u32,
    pub argmax: u32,
}

/// Anything that assigns a conditional distribution to each token of a
/// dialogue given its true prefix.
pub trait Scorer: Sync {
    fn positions(&self, d: &Dialogue) -> Result<Vec<Position>>;
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

impl Scorer for DialogueModel {
    fn positions(&self, d: &Dialogue) -> Result<Vec<Position>> {
        let out = self.forward(d)?;
        let tokens = d.flat();
        Ok(out
            .log_probs
            .iter()
            .zip(&out.token_log_probs)
            .zip(&out.utterance)
            .zip(tokens)
            .map(|(((lp, &log_prob), &utterance), token)| Position {
                utterance,
                log_prob,
                token,
                argmax: argmax(lp),
            })
            .collect())
    }
}

impl Scorer for NgramModel {
    fn positions(&self, d: &Dialogue) -> Result<Vec<Position>> {
        let stream = d.flat();
        let mut out = Vec::with_capacity(stream.len());
        let mut pos = 0;
        for (m, u) in d.utterances.iter().enumerate() {
            for &token in u {
                if token as usize >= self.vocab_size {
                    return Err(NgramError::TokenOutOfRange {
                        token,
                        vocab: self.vocab_size,
                    }
                    .into());
                }
                let dist = self.distribution(&stream[..pos]);
                out.push(Position {
                    utterance: m,
                    log_prob: dist[token as usize].ln(),
                    token,
                    argmax: argmax(&dist),
                });
                pos += 1;
            }
        }
        Ok(out)
    }
}

/// Both metrics at both scopes, as one machine-readable record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    /// `None` when no dialogue has a third utterance.
    pub ppl_u3: Option<f64>,
    pub wer: f64,
    pub wer_u3: Option<f64>,
    pub n: usize,
    pub n_w: usize,
    pub n_w_u3: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    nll: f64,
    errors: usize,
    n_w: usize,
}

impl Tally {
    fn add(&mut self, p: &Position) {
        self.nll -= p.log_prob;
        self.errors += (p.argmax != p.token) as usize;
        self.n_w += 1;
    }
    fn merge(&mut self, o: &Tally) {
        self.nll += o.nll;
        self.errors += o.errors;
        self.n_w += o.n_w;
    }
}

/// Scores dialogues in parallel and reduces the per-dialogue sums in dataset
/// order, so the result does not depend on the thread count.
pub fn evaluate<S: Scorer + ?Sized>(model: &S, data: &[Dialogue]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let per: Vec<(Tally, Tally)> = data
        .par_iter()
        .map(|d| {
            let mut t = (Tally::default(), Tally::default());
            for p in model.positions(d)? {
                t.0.add(&p);
                if Scope::U3.includes(p.utterance) {
                    t.1.add(&p);
                }
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let (mut full, mut u3) = (Tally::default(), Tally::default());
    for (f, u) in &per {
        full.merge(f);
        u3.merge(u);
    }
    if full.n_w == 0 {
        return Err(EvalError::EmptyScope(Scope::Full));
    }
    let ppl = |t: &Tally| (t.nll / t.n_w as f64).exp();
    let wer = |t: &Tally| t.errors as f64 / t.n_w as f64;
    Ok(EvalReport {
        ppl: ppl(&full),
        ppl_u3: (u3.n_w > 0).then(|| ppl(&u3)),
        wer: wer(&full),
        wer_u3: (u3.n_w > 0).then(|| wer(&u3)),
        n: data.len(),
        n_w: full.n_w,
        n_w_u3: u3.n_w,
    })
}

fn scoped(report: &EvalReport, scope: Scope) -> Result<(f64, f64)> {
    match scope {
        Scope::Full => Ok((report.ppl, report.wer)),
        Scope::U3 => match (report.ppl_u3, report.wer_u3) {
            (Some(p), Some(w)) => Ok((p, w)),
            _ => Err(EvalError::EmptyScope(Scope::U3)),
        },
    }
}

/// `exp(-(1/N_W) Σ log P(w))` over the positions in scope.
pub fn perplexity<S: Scorer + ?Sized>(model: &S, data: &[Dialogue], scope: Scope) -> Result<f64> {
    Ok(scoped(&evaluate(model, data)?, scope)?.0)
}

/// Fraction of positions whose teacher-forced argmax differs from the truth.
pub fn word_error_rate<S: Scorer + ?Sized>(model: &S, data: &[Dialogue], scope: Scope) -> Result<f64> {
    Ok(scoped(&evaluate(model, data)?, scope)?.1)
}

/// Mean and sample standard deviation of each metric across runs (e.g.
/// seeds). Counts are taken from the first report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: EvalReport,
    pub std: EvalStd,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStd {
    pub ppl: f64,
    pub ppl_u3: Option<f64>,
    pub wer: f64,
    pub wer_u3: Option<f64>,
}

pub fn aggregate(reports: &[EvalReport]) -> Option<Aggregate> {
    let first = reports.first()?;
    let stats = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<(f64, f64)> {
        let xs: Vec<f64> = reports.iter().map(f).collect::<Option<_>>()?;
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    };
    let ppl = stats(&|r| Some(r.ppl))?;
    let wer = stats(&|r| Some(r.wer))?;
    let ppl_u3 = stats(&|r| r.ppl_u3);
    let wer_u3 = stats(&|r| r.wer_u3);
    Some(Aggregate {
        mean: EvalReport {
            ppl: ppl.0,
            ppl_u3: ppl_u3.map(|s| s.0),
            wer: wer.0,
            wer_u3: wer_u3.map(|s| s.0),
            ..first.clone()
        },
        std: EvalStd {
            ppl: ppl.1,
            ppl_u3: ppl_u3.map(|s| s.1),
            wer: wer.1,
            wer_u3: wer_u3.map(|s| s.1),
        },
        runs: reports.len(),
    })
}

/// Plain-text table with one row per model: perplexity and error rate over
/// all utterances and over the third utterance only.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let opt = |x: Option<f64>, pct: bool| match x {
        Some(v) if pct => format!("{:.2}%", 100.0 * v),
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    };
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<name_w$}  {:>10}  {:>13}  {:>10}  {:>13}\n",
        "Model", "Perplexity", "Perplexity@U3", "Error-Rate", "Error-Rate@U3"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>10}  {:>13}  {:>10}  {:>13}\n",
            name,
            opt(Some(r.ppl), false),
            opt(r.ppl_u3, false),
            opt(Some(r.wer), true),
            opt(r.wer_u3, true)
        ));
    }
    out
}
