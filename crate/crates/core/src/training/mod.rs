//! Adam, the epoch loop with early stopping, and the two bootstrapping
//! regimes (frozen pretrained embeddings; pretrain then finetune).

mod adam;
mod bootstrap;

pub use adam::{clip_global_norm, AdamConfig, AdamState, Freeze};
pub use bootstrap::{bootstrap_embeddings, pretrain_finetune, Bootstrap, Transfer, TransferConfig};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{truncate, CorpusError, Dialogue};
use crate::eval::{self, EvalError, Scope};
use crate::layers::LayerError;
use crate::models::{Checkpoint, DialogueModel, ModelError};
use crate::params::ModelParams;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// State as of the last successful validation.
        last_good: Box<Checkpoint>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Validations without improvement tolerated before stopping.
    pub patience: usize,
    /// Validate every this many epochs.
    pub valid_every: usize,
    /// Training dialogues are cut to at most this many tokens.
    pub truncate: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub freeze: Freeze,
    /// Global-norm gradient clipping; off when `None`.
    pub clip: Option<f64>,
    /// Stop as soon as validation perplexity drops below this.
    pub target_ppl: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            patience: 5,
            valid_every: 1,
            truncate: 80,
            seed: 1234,
            batch_size: 1,
            adam: AdamConfig::default(),
            freeze: Freeze::none(),
            clip: None,
            target_ppl: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.valid_every == 0 {
            return bad("validation frequency must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.truncate == 0 {
            return bad("truncation limit must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// One validation record; `Display` gives the `step\ttrain_nll\tvalid_ppl`
/// log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-token training NLL since the previous validation.
    pub train_nll: f64,
    pub valid_ppl: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6}", self.step, self.train_nll, self.valid_ppl)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Target,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation perplexity seen.
    pub best: DialogueModel,
    pub best_ppl: f64,
    pub history: Vec<LogEntry>,
    pub stopped: StopReason,
}

/// Training state that survives a checkpoint round trip.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DialogueModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub best_ppl: f64,
    pub best: Option<ModelParams>,
    pub bad_evals: usize,
    pub history: Vec<LogEntry>,
    window: (f64, usize),
}

fn check_vocab(data: &[Dialogue], vocab: usize, what: &str) -> Result<()> {
    for d in data {
        if let Some(&t) = d.utterances.iter().flatten().find(|&&t| t as usize >= vocab) {
            return Err(TrainError::Vocabulary(format!(
                "{what} contains token id {t} but the model vocabulary has {vocab} entries"
            )));
        }
    }
    Ok(())
}

/// Applies the training-time length cap.
pub fn prepare(data: &[Dialogue], limit: usize) -> Result<Vec<Dialogue>> {
    Ok(data
        .iter()
        .map(|d| truncate(d, limit))
        .collect::<std::result::Result<_, _>>()?)
}

const META_PREFIX: &str = "train.";

impl Trainer {
    pub fn new(model: DialogueModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.freeze.validate(&model.params)?;
        let adam = AdamState::new(&model.params, config.adam);
        Ok(Trainer {
            model,
            adam,
            config,
            epoch: 0,
            step: 0,
            best_ppl: f64::INFINITY,
            best: None,
            bad_evals: 0,
            history: Vec::new(),
            window: (0.0, 0),
        })
    }

    /// Serializes the full training state: parameters, Adam moments,
    /// counters, the best parameters so far and the config.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        let meta = &mut ck.meta;
        let mut put = |k: &str, v: String| {
            meta.insert(format!("{META_PREFIX}{k}"), v);
        };
        put("epoch", self.epoch.to_string());
        put("step", self.step.to_string());
        put("adam_t", self.adam.t.to_string());
        put("best_ppl", format!("{:?}", self.best_ppl));
        put("bad_evals", self.bad_evals.to_string());
        put("window_nll", format!("{:?}", self.window.0));
        put("window_tokens", self.window.1.to_string());
        put(
            "config",
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        put(
            "history",
            serde_json::to_string(&self.history).expect("history serializes"),
        );
        for (id, name, _) in self.model.params.iter() {
            ck.extra
                .push((format!("adam.m.{name}"), self.adam.m[id.index()].clone()));
            ck.extra
                .push((format!("adam.v.{name}"), self.adam.v[id.index()].clone()));
        }
        if let Some(best) = &self.best {
            for (_, name, t) in best.iter() {
                ck.extra.push((format!("best.{name}"), t.clone()));
            }
        }
        ck
    }

    /// Restores a state written by [`Trainer::to_checkpoint`]. Continuing
    /// from it takes exactly the steps the uninterrupted run would have.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta
                .get(&format!("{META_PREFIX}{k}"))
                .ok_or_else(|| TrainError::Config(format!("checkpoint has no training state ({k})")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|e| TrainError::Config(format!("{k}: {e}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse::<u64>()
                .map_err(|e| TrainError::Config(format!("{k}: {e}")))
        };
        let config: TrainConfig =
            serde_json::from_str(get("config")?).map_err(|e| TrainError::Config(format!("config: {e}")))?;
        let history: Vec<LogEntry> =
            serde_json::from_str(get("history")?).map_err(|e| TrainError::Config(format!("history: {e}")))?;
        let model = ck.model.clone();
        let extra = |k: String| -> Option<Tensor> { ck.extra.iter().find(|(n, _)| *n == k).map(|(_, t)| t.clone()) };
        let mut adam = AdamState::new(&model.params, config.adam);
        adam.t = int("adam_t")?;
        let mut best = model.params.clone();
        let mut has_best = false;
        for (id, name, _) in model.params.iter() {
            let i = id.index();
            adam.m[i] = extra(format!("adam.m.{name}"))
                .ok_or_else(|| TrainError::Config(format!("missing moment for {name}")))?;
            adam.v[i] = extra(format!("adam.v.{name}"))
                .ok_or_else(|| TrainError::Config(format!("missing moment for {name}")))?;
            if let Some(t) = extra(format!("best.{name}")) {
                *best.get_mut(id) = t;
                has_best = true;
            }
        }
        Ok(Trainer {
            model,
            adam,
            epoch: int("epoch")? as usize,
            step: int("step")?,
            best_ppl: num("best_ppl")?,
            best: has_best.then_some(best),
            bad_evals: int("bad_evals")? as usize,
            history,
            window: (num("window_nll")?, int("window_tokens")? as usize),
            config,
        })
    }

    /// One pass over `train` in the order fixed by `(seed, epoch)`.
    pub fn run_epoch(&mut self, train: &[Dialogue]) -> Result<()> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::with_stream(self.config.seed, self.epoch as u64).shuffle(&mut order);
        for batch in order.chunks(self.config.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; self.model.params.len()];
            for &i in batch {
                let d = &train[i];
                let (nll, grads) = self.model.nll_and_grads(d)?;
                self.window.0 += nll;
                self.window.1 += d.num_tokens();
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (_, None) => {}
                        (None, Some(g)) => *a = Some(g),
                        (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                    }
                }
            }
            if let Some(c) = self.config.clip {
                clip_global_norm(&mut acc, c);
            }
            self.adam.step(&mut self.model.params, &acc, &self.config.freeze)?;
            self.step += 1;
        }
        self.epoch += 1;
        Ok(())
    }

    fn validate_now(&mut self, valid: &[Dialogue]) -> Result<LogEntry> {
        let ppl = eval::perplexity(&self.model, valid, Scope::Full)?;
        let entry = LogEntry {
            epoch: self.epoch,
            step: self.step,
            train_nll: self.window.0 / self.window.1.max(1) as f64,
            valid_ppl: ppl,
        };
        self.window = (0.0, 0);
        Ok(entry)
    }

    /// Trains until patience runs out, the epoch budget is spent or the
    /// target perplexity is reached. `on_log` sees every validation record;
    /// `on_checkpoint` the full state after each validation.
    pub fn run(
        &mut self,
        train: &[Dialogue],
        valid: &[Dialogue],
        on_log: &mut dyn FnMut(&LogEntry),
        on_checkpoint: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let v = self.model.vocab_size();
        check_vocab(train, v, "training set")?;
        check_vocab(valid, v, "validation set")?;
        let train = prepare(train, self.config.truncate)?;
        let mut last_good = self.to_checkpoint();
        let mut stopped = StopReason::MaxEpochs;
        while self.epoch < self.config.max_epochs {
            if let Err(e) = self.run_epoch(&train) {
                return Err(diverged(e, self.step, &last_good));
            }
            if !self.epoch.is_multiple_of(self.config.valid_every) && self.epoch < self.config.max_epochs {
                continue;
            }
            let entry = self
                .validate_now(valid)
                .map_err(|e| diverged(e, self.step, &last_good))?;
            if !entry.valid_ppl.is_finite() {
                return Err(TrainError::Diverged {
                    step: self.step,
                    reason: format!("validation perplexity {}", entry.valid_ppl),
                    last_good: Box::new(last_good),
                });
            }
            self.history.push(entry);
            on_log(&entry);
            if entry.valid_ppl < self.best_ppl {
                self.best_ppl = entry.valid_ppl;
                self.best = Some(self.model.params.clone());
                self.bad_evals = 0;
            } else {
                self.bad_evals += 1;
            }
            on_checkpoint(self)?;
            last_good = self.to_checkpoint();
            if self.config.target_ppl.is_some_and(|t| entry.valid_ppl < t) {
                stopped = StopReason::Target;
                break;
            }
            if self.bad_evals >= self.config.patience {
                stopped = StopReason::Patience;
                break;
            }
        }
        let mut best = self.model.clone();
        if let Some(p) = &self.best {
            best.params = p.clone();
        }
        Ok(TrainOutcome {
            best,
            best_ppl: self.best_ppl,
            history: self.history.clone(),
            stopped,
        })
    }
}

fn is_non_finite(e: &TrainError) -> bool {
    use crate::tensor::TensorError::NonFinite;
    matches!(
        e,
        TrainError::NonFiniteGradient(_)
            | TrainError::Model(ModelError::Tensor(NonFinite { .. }))
            | TrainError::Model(ModelError::Layer(LayerError::Tensor(NonFinite { .. })))
            | TrainError::Eval(EvalError::Model(ModelError::Tensor(NonFinite { .. })))
            | TrainError::Eval(EvalError::Model(ModelError::Layer(LayerError::Tensor(
                NonFinite { .. }
            ))))
    )
}

/// Non-finite values anywhere in a step or validation mean divergence.
fn diverged(e: TrainError, step: u64, last_good: &Checkpoint) -> TrainError {
    if is_non_finite(&e) {
        TrainError::Diverged {
            step,
            reason: e.to_string(),
            last_good: Box::new(last_good.clone()),
        }
    } else {
        e
    }
}

/// Trains `model` from scratch state and returns the best parameters.
pub fn train(
    model: DialogueModel,
    train: &[Dialogue],
    valid: &[Dialogue],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, config.clone())?.run(train, valid, &mut |_| {}, &mut |_| Ok(()))
}

#[cfg(test)]
mod tests;
