//! Interactive chat over HTTP/JSON. Each session keeps its utterance
//! history and the context state that summarizes it; the model itself is
//! shared read-only across sessions.

mod http;

pub use http::{router, serve};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::RESERVED;
use crate::corpus::{detokenize, Tokenizer, Vocabulary, EOS_ID};
use crate::eval::{self, DecodeMode, DecodeSettings, EvalError};
use crate::models::{Checkpoint, ContextState, DialogueModel, ModelError};
use crate::tensor::Rng;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("invalid decode settings: {0}")]
    Settings(String),
    #[error("checkpoint carries no vocabulary")]
    NoVocabulary,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// Decode settings as they appear on the wire. Omitted fields take the
/// service defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsJson {
    /// `"map"` (beam search) or `"sample"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

/// Fully resolved settings of a session.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub mode: Mode,
    pub width: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Map,
    Sample,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            mode: Mode::Map,
            width: 5,
            temperature: 1.0,
            seed: 0,
            max_len: 40,
        }
    }
}

impl Settings {
    /// Overlays the fields present in `j` and validates the result.
    pub fn apply(mut self, j: &SettingsJson) -> Result<Self> {
        if let Some(m) = &j.mode {
            self.mode = match m.as_str() {
                "map" | "beam" => Mode::Map,
                "sample" => Mode::Sample,
                other => return Err(ServiceError::Settings(format!("unknown mode {other:?}"))),
            };
        }
        self.width = j.width.unwrap_or(self.width);
        self.temperature = j.temperature.unwrap_or(self.temperature);
        self.seed = j.seed.unwrap_or(self.seed);
        self.max_len = j.max_len.unwrap_or(self.max_len);
        if self.width == 0 {
            return Err(ServiceError::Settings("width must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ServiceError::Settings("temperature must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(ServiceError::Settings("max_len must be at least 1".into()));
        }
        Ok(self)
    }

    /// Decoder settings for turn `turn`; sampling seeds differ per turn but
    /// are fixed by the session seed.
    pub fn for_turn(&self, turn: usize) -> DecodeSettings {
        let mode = match self.mode {
            Mode::Map => DecodeMode::Beam { width: self.width },
            Mode::Sample => DecodeMode::Sample {
                temperature: self.temperature,
            },
        };
        DecodeSettings {
            mode,
            max_len: self.max_len,
            seed: turn_seed(self.seed, turn),
        }
    }
}

pub fn turn_seed(seed: u64, turn: usize) -> u64 {
    Rng::with_stream(seed, turn as u64).next_u64()
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub history: Vec<Vec<u32>>,
    pub context: ContextState,
    pub settings: Settings,
    last_used: Instant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub settings: Settings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub session_id: String,
    pub response: String,
    /// Response token ids, including `</s>` when the decoder emitted it.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Number of completed turns (user plus model utterances) afterwards.
    pub turn: usize,
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub variant: String,
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_c: usize,
    pub summary: String,
    pub maxout: bool,
    pub vocab_hash: String,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub idle_timeout: Duration,
    pub defaults: Settings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            idle_timeout: Duration::from_secs(30 * 60),
            defaults: Settings::default(),
        }
    }
}

/// Vocabulary stored in a checkpoint (reserved tokens first).
pub fn checkpoint_vocabulary(ck: &Checkpoint) -> Result<Vocabulary> {
    let tokens = ck.vocab.as_ref().ok_or(ServiceError::NoVocabulary)?;
    if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
        return Err(ServiceError::Model(ModelError::Checkpoint(
            "vocabulary does not start with the reserved tokens".into(),
        )));
    }
    Vocabulary::from_tokens(&tokens[RESERVED.len()..])
        .map_err(|e| ServiceError::Model(ModelError::Checkpoint(e.to_string())))
}

pub struct Service {
    model: DialogueModel,
    vocab: Vocabulary,
    tokenizer: Tokenizer,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
}

impl Service {
    pub fn new(model: DialogueModel, vocab: Vocabulary, tokenizer: Tokenizer, config: ServiceConfig) -> Result<Self> {
        if vocab.len() != model.vocab_size() {
            return Err(ServiceError::Model(ModelError::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.vocab_size()
            ))));
        }
        Ok(Service {
            model,
            vocab,
            tokenizer,
            config,
            sessions: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, tokenizer: Tokenizer, config: ServiceConfig) -> Result<Self> {
        let vocab = checkpoint_vocabulary(&ck)?;
        Self::new(ck.model, vocab, tokenizer, config)
    }

    pub fn model(&self) -> &DialogueModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn model_info(&self) -> ModelInfo {
        let c = &self.model.config;
        ModelInfo {
            variant: c.variant.name().to_string(),
            vocab_size: c.vocab_size,
            d_e: c.d_e,
            d_h: c.d_h,
            d_c: c.d_c,
            summary: c.summary.name().to_string(),
            maxout: c.maxout,
            vocab_hash: self.vocab.hash_hex(),
        }
    }

    /// Drops sessions idle for longer than the configured timeout.
    pub fn evict_idle(&self) -> usize {
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.duration_since(s.last_used) <= self.config.idle_timeout,
            // In use right now, so not idle.
            Err(_) => true,
        });
        before - map.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }

    pub fn create_session(&self, settings: &SettingsJson) -> Result<SessionInfo> {
        self.evict_idle();
        let settings = self.config.defaults.apply(settings)?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let nonce = Rng::with_stream(n, std::process::id() as u64).next_u64()
            ^ std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_nanos() as u64);
        let id = format!("s{n}-{nonce:016x}");
        let session = Session {
            id: id.clone(),
            history: Vec::new(),
            context: self.model.initial_context(),
            settings,
            last_used: Instant::now(),
        };
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(SessionInfo {
            session_id: id,
            settings,
        })
    }

    pub fn delete_session(&self, id: &str) -> Result<()> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.evict_idle();
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    /// Snapshot of a session's state.
    pub fn session_state(&self, id: &str) -> Result<Session> {
        Ok(self.session(id)?.lock().expect("session poisoned").clone())
    }

    /// Encodes the user's utterance into the context, decodes a response
    /// and folds it back in. `overrides` apply to this session from now on.
    pub fn chat_turn(&self, id: &str, text: &str, overrides: Option<&SettingsJson>) -> Result<DecodeResponse> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session poisoned");
        let mut words = self.tokenizer.tokenize(text);
        if words.last().map(String::as_str) == Some(crate::corpus::vocab::EOS) {
            words.pop();
        }
        if words.is_empty() {
            return Err(ServiceError::EmptyUtterance);
        }
        if let Some(o) = overrides {
            s.settings = s.settings.apply(o)?;
        }
        let mut user = self.vocab.encode(&words);
        user.push(EOS_ID);
        let ctx = self.model.observe(&s.context, &user)?;
        let turn = s.history.len();
        let hyp = eval::decode_from(&self.model, &ctx, &s.settings.for_turn(turn))?;
        let mut reply = hyp.tokens.clone();
        if reply.last() != Some(&EOS_ID) {
            reply.push(EOS_ID);
        }
        let ctx = self.model.observe(&ctx, &reply)?;
        s.context = ctx;
        s.history.push(user);
        s.history.push(reply);
        s.last_used = Instant::now();
        let surface: Vec<&str> = hyp
            .tokens
            .iter()
            .map(|&t| self.vocab.token(t).expect("decoder emits in-vocabulary ids"))
            .collect();
        Ok(DecodeResponse {
            session_id: s.id.clone(),
            response: detokenize(&surface),
            tokens: hyp.tokens,
            log_prob: hyp.log_prob,
            turn: s.history.len(),
            finished: hyp.finished,
        })
    }
}

#[cfg(test)]
mod tests;
