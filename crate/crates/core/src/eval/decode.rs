use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{argmax, EvalError, Result};
use crate::corpus::EOS_ID;
use crate::models::{ContextState, DecoderState, DialogueModel};
use crate::tensor::Rng;

/// A decoded utterance. `log_prob` is the untempered model log-probability
/// of `tokens`; `finished` is false when the length cap cut it short.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    Beam { width: usize },
    Sample { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    #[serde(flatten)]
    pub mode: DecodeMode,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            mode: DecodeMode::Beam { width: 5 },
            max_len: 40,
            seed: 0,
        }
    }
}

/// Higher log-probability first; equal scores fall back to lexicographic
/// token order.
fn rank(a: (&[u32], f64), b: (&[u32], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

fn check_context(context: &[Vec<u32>]) -> Result<&[Vec<u32>]> {
    if context.is_empty() {
        return Err(EvalError::EmptyContext);
    }
    Ok(context)
}

fn start(model: &DialogueModel, context: &[Vec<u32>]) -> Result<DecoderState> {
    let ctx = model.observe_all(check_context(context)?)?;
    Ok(model.start_decoder(&ctx)?)
}

/// Beam search without length normalization for the utterance following
/// `context`. Hypotheses finish at `</s>`; any still open after `max_len`
/// tokens are force-finished.
pub fn beam_search(model: &DialogueModel, context: &[Vec<u32>], width: usize, max_len: usize) -> Result<Hypothesis> {
    beam_from(model, start(model, context)?, width, max_len)
}

fn beam_from(model: &DialogueModel, init: DecoderState, width: usize, max_len: usize) -> Result<Hypothesis> {
    if width == 0 {
        return Err(EvalError::ZeroWidth);
    }
    struct Beam {
        tokens: Vec<u32>,
        log_prob: f64,
        state: DecoderState,
    }
    let mut active = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len.max(1) {
        let mut cands: Vec<(usize, u32, f64, Vec<f64>)> = Vec::new();
        for (bi, b) in active.iter().enumerate() {
            let (lp, h) = model.next_log_probs(&b.state)?;
            for (w, &l) in lp.iter().enumerate() {
                cands.push((bi, w as u32, b.log_prob + l, h.clone()));
            }
        }
        let key = |c: &(usize, u32, f64, Vec<f64>)| {
            let mut t = active[c.0].tokens.clone();
            t.push(c.1);
            t
        };
        let mut keyed: Vec<(Vec<u32>, f64, Vec<f64>)> = cands.iter().map(|c| (key(c), c.2, c.3.clone())).collect();
        keyed.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
        keyed.truncate(width);
        let last = step + 1 >= max_len.max(1);
        let mut next = Vec::new();
        for (tokens, log_prob, hidden) in keyed {
            let end = *tokens.last().expect("non-empty");
            if end == EOS_ID || last {
                done.push(Hypothesis {
                    finished: end == EOS_ID,
                    tokens,
                    log_prob,
                });
            } else {
                next.push(Beam {
                    state: DecoderState {
                        hidden,
                        prev: Some(end),
                    },
                    tokens,
                    log_prob,
                });
            }
        }
        active = next;
        // Scores only decrease as hypotheses grow, so an open beam can no
        // longer beat a strictly better finished one.
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if active.iter().all(|b| b.log_prob < best_done) {
            break;
        }
    }
    done.sort_by(|a, b| rank((&a.tokens, a.log_prob), (&b.tokens, b.log_prob)));
    Ok(done.into_iter().next().expect("at least one hypothesis finishes"))
}

/// Repeatedly takes the most likely token (lowest id on ties).
pub fn greedy(model: &DialogueModel, context: &[Vec<u32>], max_len: usize) -> Result<Hypothesis> {
    let mut state = start(model, context)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len.max(1) {
        let (lp, h) = model.next_log_probs(&state)?;
        let w = argmax(&lp);
        hyp.tokens.push(w);
        hyp.log_prob += lp[w as usize];
        if w == EOS_ID {
            hyp.finished = true;
            break;
        }
        state = DecoderState {
            hidden: h,
            prev: Some(w),
        };
    }
    Ok(hyp)
}

/// Ancestral sampling from `softmax(logits / temperature)`.
pub fn sample(
    model: &DialogueModel,
    context: &[Vec<u32>],
    temperature: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Hypothesis> {
    sample_from(model, start(model, context)?, temperature, max_len, rng)
}

fn sample_from(
    model: &DialogueModel,
    mut state: DecoderState,
    temperature: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Hypothesis> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(EvalError::Temperature(temperature));
    }
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len.max(1) {
        let (lp, h) = model.next_log_probs(&state)?;
        // Log-probabilities differ from logits by a constant, so tempering
        // them gives the same distribution.
        let top = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = lp.iter().map(|l| ((l - top) / temperature).exp()).collect();
        let w = rng.categorical(&weights) as u32;
        hyp.tokens.push(w);
        hyp.log_prob += lp[w as usize];
        if w == EOS_ID {
            hyp.finished = true;
            break;
        }
        state = DecoderState {
            hidden: h,
            prev: Some(w),
        };
    }
    Ok(hyp)
}

/// Decodes with `settings`; the sampler is seeded from `settings.seed`.
pub fn decode(model: &DialogueModel, context: &[Vec<u32>], settings: &DecodeSettings) -> Result<Hypothesis> {
    decode_from(model, &model.observe_all(check_context(context)?)?, settings)
}

/// Like [`decode`], continuing from an already summarized history.
pub fn decode_from(model: &DialogueModel, ctx: &ContextState, settings: &DecodeSettings) -> Result<Hypothesis> {
    let init = model.start_decoder(ctx)?;
    match settings.mode {
        DecodeMode::Beam { width } => beam_from(model, init, width, settings.max_len),
        DecodeMode::Sample { temperature } => {
            let mut rng = Rng::new(settings.seed);
            sample_from(model, init, temperature, settings.max_len, &mut rng)
        }
    }
}
