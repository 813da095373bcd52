//! The three generative dialogue models: an RNN language model over the
//! concatenated dialogue, HRED, and HRED with a bidirectional encoder.
//!
//! Every model predicts each token from the strictly preceding tokens. The
//! same graph-building code serves training, scoring and step-wise decoding,
//! so scores computed any of these ways agree bit for bit.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, EOS_ID};
use crate::layers::{l2_pool, EmbeddingLayer, GruCell, LayerError, OutputLayer};
use crate::params::{ModelParams, ParamId, Tape};
use crate::tensor::{gaussian_init, NodeId, Rng, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    RnnLm,
    Hred,
    HredBi,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::RnnLm => "rnn-lm",
            Variant::Hred => "hred",
            Variant::HredBi => "hred-bi",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        self != Variant::RnnLm
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rnn-lm" => Ok(Variant::RnnLm),
            "hred" => Ok(Variant::Hred),
            "hred-bi" => Ok(Variant::HredBi),
            _ => Err(format!("unknown variant {s:?} (expected rnn-lm, hred or hred-bi)")),
        }
    }
}

/// How the bidirectional encoder summarizes an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Summary {
    /// Final forward state followed by final backward state.
    Concat,
    /// L2 pooling over each chain, concatenated.
    L2Pool,
}

impl Summary {
    pub fn name(self) -> &'static str {
        match self {
            Summary::Concat => "concat",
            Summary::L2Pool => "l2pool",
        }
    }
}

impl std::str::FromStr for Summary {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(Summary::Concat),
            "l2pool" => Ok(Summary::L2Pool),
            _ => Err(format!("unknown summary mode {s:?} (expected concat or l2pool)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    /// Word embedding width.
    pub d_e: usize,
    /// Encoder and decoder hidden width.
    pub d_h: usize,
    /// Context hidden width.
    pub d_c: usize,
    pub summary: Summary,
    /// Two-piece maxout (to `d_e`) between the decoder state and the output.
    pub maxout: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            vocab_size,
            d_e: 32,
            d_h: 64,
            d_c: 64,
            summary: Summary::Concat,
            maxout: true,
        }
    }

    pub fn dims(mut self, d_e: usize, d_h: usize, d_c: usize) -> Self {
        self.d_e = d_e;
        self.d_h = d_h;
        self.d_c = d_c;
        self
    }

    pub fn summary(mut self, s: Summary) -> Self {
        self.summary = s;
        self
    }

    pub fn maxout(mut self, on: bool) -> Self {
        self.maxout = on;
        self
    }

    /// Width of the utterance vector fed to the context cell.
    pub fn summary_dim(&self) -> usize {
        match self.variant {
            Variant::HredBi => 2 * self.d_h,
            _ => self.d_h,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.d_e == 0 || self.d_h == 0 || self.d_c == 0 {
            return Err(ModelError::Config(format!(
                "need |V| >= 5 and non-zero dims, got |V|={} d_e={} d_h={} d_c={}",
                self.vocab_size, self.d_e, self.d_h, self.d_c
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty dialogue")]
    EmptyDialogue,
    #[error("utterance {0} does not end with </s>")]
    MissingEos(usize),
    #[error("{op} is not available for {variant}")]
    WrongVariant { op: &'static str, variant: &'static str },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug)]
pub struct DialogueModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub embedding: EmbeddingLayer,
    pub encoder: Option<GruCell>,
    pub encoder_bwd: Option<GruCell>,
    pub context: Option<GruCell>,
    /// `(W, b)` mapping the context state to the decoder's initial state.
    pub bridge: Option<(ParamId, ParamId)>,
    pub decoder: GruCell,
    pub output: OutputLayer,
}

/// Result of scoring one dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Log-probabilities over the vocabulary at each predicted position.
    pub log_probs: Vec<Vec<f64>>,
    /// Log-probability of the realized token at each position.
    pub token_log_probs: Vec<f64>,
    /// Utterance index of each position.
    pub utterance: Vec<usize>,
    pub log_likelihood: f64,
}

/// Dialogue history summarized for generation. For the hierarchical models
/// `vector` is the context state; for the RNN-LM it is the running hidden
/// state and `prev` the last token read.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextState {
    pub vector: Vec<f64>,
    pub prev: Option<u32>,
}

/// Decoder state before predicting the next token.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    /// Token fed at the next step; `None` feeds the zero input.
    pub prev: Option<u32>,
}

struct Built {
    log_probs: Vec<NodeId>,
    picks: Vec<NodeId>,
    utterance: Vec<usize>,
}

impl DialogueModel {
    /// Builds a model with freshly initialized parameters. The parameter set
    /// and its order depend only on the config; values only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ModelParams::new();
        let c = &config;
        let embedding = EmbeddingLayer::new(&mut params, "emb", c.vocab_size, c.d_e, c.d_h, &mut rng)?;
        let (mut encoder, mut encoder_bwd, mut context, mut bridge) = (None, None, None, None);
        if c.variant.is_hierarchical() {
            encoder = Some(GruCell::new(&mut params, "enc", c.d_h, c.d_h, &mut rng)?);
            if c.variant == Variant::HredBi {
                encoder_bwd = Some(GruCell::new(&mut params, "enc_bwd", c.d_h, c.d_h, &mut rng)?);
            }
            context = Some(GruCell::new(&mut params, "ctx", c.summary_dim(), c.d_c, &mut rng)?);
            let w = params.add("bridge.w", gaussian_init(&[c.d_h, c.d_c], 0.01, &mut rng)?);
            let b = params.add("bridge.b", gaussian_init(&[c.d_h], 0.01, &mut rng)?);
            bridge = Some((w, b));
        }
        let decoder = GruCell::new(&mut params, "dec", c.d_h, c.d_h, &mut rng)?;
        let maxout = c.maxout.then_some((2, c.d_e));
        let output = OutputLayer::new(&mut params, "out", c.d_h, c.vocab_size, maxout, &mut rng)?;
        Ok(DialogueModel {
            config,
            params,
            embedding,
            encoder,
            encoder_bwd,
            context,
            bridge,
            decoder,
            output,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check(&self, d: &Dialogue) -> Result<()> {
        if d.utterances.is_empty() || d.utterances.iter().all(Vec::is_empty) {
            return Err(ModelError::EmptyDialogue);
        }
        for (m, u) in d.utterances.iter().enumerate() {
            if u.last() != Some(&EOS_ID) {
                return Err(ModelError::MissingEos(m));
            }
            if let Some(&t) = u.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(LayerError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                }
                .into());
            }
        }
        Ok(())
    }

    fn zeros(tape: &mut Tape, n: usize) -> Result<NodeId> {
        Ok(tape.constant(Tensor::zeros(&[n]))?)
    }

    fn input(&self, tape: &mut Tape, prev: Option<u32>) -> Result<NodeId> {
        match prev {
            Some(t) => Ok(self.embedding.embed(tape, t)?),
            None => Self::zeros(tape, self.config.d_h),
        }
    }

    fn hierarchical(&self, op: &'static str) -> Result<(&GruCell, &GruCell, (ParamId, ParamId))> {
        match (&self.encoder, &self.context, self.bridge) {
            (Some(e), Some(c), Some(b)) => Ok((e, c, b)),
            _ => Err(ModelError::WrongVariant {
                op,
                variant: self.variant().name(),
            }),
        }
    }

    /// Utterance vector: the encoder's last state, or for the bidirectional
    /// encoder the summary of both chains.
    pub fn encode_utterance_node(&self, tape: &mut Tape, utterance: &[u32]) -> Result<NodeId> {
        let (enc, _, _) = self.hierarchical("encode_utterance")?;
        if utterance.is_empty() {
            return Err(ModelError::EmptyDialogue);
        }
        let inputs: Vec<NodeId> = utterance
            .iter()
            .map(|&t| self.embedding.embed(tape, t))
            .collect::<std::result::Result<_, _>>()?;
        let run = |tape: &mut Tape, cell: &GruCell, order: &mut dyn Iterator<Item = &NodeId>| -> Result<Vec<NodeId>> {
            let mut h = Self::zeros(tape, self.config.d_h)?;
            let mut states = Vec::with_capacity(inputs.len());
            for &x in order {
                h = cell.step(tape, h, x)?;
                states.push(h);
            }
            Ok(states)
        };
        let fwd = run(tape, enc, &mut inputs.iter())?;
        let Some(bwd_cell) = &self.encoder_bwd else {
            return Ok(*fwd.last().expect("non-empty"));
        };
        let bwd = run(tape, bwd_cell, &mut inputs.iter().rev())?;
        let (a, b) = match self.config.summary {
            Summary::Concat => (*fwd.last().expect("non-empty"), *bwd.last().expect("non-empty")),
            Summary::L2Pool => (l2_pool(tape, &fwd)?, l2_pool(tape, &bwd)?),
        };
        Ok(tape.graph.concat(&[a, b])?)
    }

    pub fn advance_context_node(&self, tape: &mut Tape, c: NodeId, u: NodeId) -> Result<NodeId> {
        let (_, ctx, _) = self.hierarchical("advance_context")?;
        Ok(ctx.step(tape, c, u)?)
    }

    /// `tanh(W c + b)`.
    pub fn init_decoder_node(&self, tape: &mut Tape, c: NodeId) -> Result<NodeId> {
        let (_, _, (w, b)) = self.hierarchical("init_decoder")?;
        let (w, b) = (tape.param(w)?, tape.param(b)?);
        let g = &mut tape.graph;
        let wc = g.matmul(w, c)?;
        let pre = g.add(wc, b)?;
        Ok(g.tanh(pre)?)
    }

    /// One decoder step: new hidden state and log-probabilities of the next token.
    fn decode_step(&self, tape: &mut Tape, h: NodeId, prev: Option<u32>) -> Result<(NodeId, NodeId)> {
        let x = self.input(tape, prev)?;
        let h = self.decoder.step(tape, h, x)?;
        let logits = self.output.logits(tape, h)?;
        Ok((h, tape.graph.log_softmax(logits)?))
    }

    fn build(&self, tape: &mut Tape, d: &Dialogue) -> Result<Built> {
        self.check(d)?;
        let mut out = Built {
            log_probs: Vec::new(),
            picks: Vec::new(),
            utterance: Vec::new(),
        };
        let mut emit = |tape: &mut Tape, lp: NodeId, tok: u32, m: usize| -> Result<()> {
            let p = tape.graph.pick(lp, tok as usize)?;
            out.log_probs.push(lp);
            out.picks.push(p);
            out.utterance.push(m);
            Ok(())
        };
        if !self.variant().is_hierarchical() {
            let mut h = Self::zeros(tape, self.config.d_h)?;
            let mut prev = None;
            for (m, u) in d.utterances.iter().enumerate() {
                for &t in u {
                    let (h2, lp) = self.decode_step(tape, h, prev)?;
                    emit(tape, lp, t, m)?;
                    h = h2;
                    prev = Some(t);
                }
            }
        } else {
            let mut c = Self::zeros(tape, self.config.d_c)?;
            let last = d.utterances.len() - 1;
            for (m, u) in d.utterances.iter().enumerate() {
                let mut h = self.init_decoder_node(tape, c)?;
                let mut prev = None;
                for &t in u {
                    let (h2, lp) = self.decode_step(tape, h, prev)?;
                    emit(tape, lp, t, m)?;
                    h = h2;
                    prev = Some(t);
                }
                // The final utterance's encoding would never be read.
                if m < last {
                    let v = self.encode_utterance_node(tape, u)?;
                    c = self.advance_context_node(tape, c, v)?;
                }
            }
        }
        Ok(out)
    }

    /// Per-position distributions and the total log-likelihood.
    pub fn forward(&self, d: &Dialogue) -> Result<ForwardOutput> {
        let mut tape = Tape::new(&self.params);
        let built = self.build(&mut tape, d)?;
        let token_log_probs: Vec<f64> = built.picks.iter().map(|&p| tape.value(p).data()[0]).collect();
        Ok(ForwardOutput {
            log_probs: built.log_probs.iter().map(|&n| tape.value(n).data().to_vec()).collect(),
            log_likelihood: token_log_probs.iter().sum(),
            token_log_probs,
            utterance: built.utterance,
        })
    }

    /// Log-probability of each realized token, without keeping full
    /// distributions.
    pub fn token_log_probs(&self, d: &Dialogue) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let built = self.build(&mut tape, d)?;
        Ok(built.picks.iter().map(|&p| tape.value(p).data()[0]).collect())
    }

    /// Negative log-likelihood of `d` and its gradient for every parameter
    /// (`None` where the parameter does not influence the loss).
    pub fn nll_and_grads(&self, d: &Dialogue) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new(&self.params);
        let built = self.build(&mut tape, d)?;
        let all = tape.graph.concat(&built.picks)?;
        let ll = tape.graph.sum(all)?;
        let loss = tape.graph.scale(ll, -1.0)?;
        let nll = tape.value(loss).data()[0];
        Ok((nll, tape.param_grads(loss)?))
    }

    // ---- step-wise inference ----

    pub fn initial_context(&self) -> ContextState {
        let n = if self.variant().is_hierarchical() {
            self.config.d_c
        } else {
            self.config.d_h
        };
        ContextState {
            vector: vec![0.0; n],
            prev: None,
        }
    }

    /// Folds one complete utterance (ending in `</s>`) into the history.
    pub fn observe(&self, ctx: &ContextState, utterance: &[u32]) -> Result<ContextState> {
        self.check(&Dialogue {
            utterances: vec![utterance.to_vec()],
        })?;
        let mut tape = Tape::new(&self.params);
        if self.variant().is_hierarchical() {
            let c = tape.constant(Tensor::vector(ctx.vector.clone()))?;
            let v = self.encode_utterance_node(&mut tape, utterance)?;
            let c = self.advance_context_node(&mut tape, c, v)?;
            Ok(ContextState {
                vector: tape.value(c).data().to_vec(),
                prev: None,
            })
        } else {
            let mut h = tape.constant(Tensor::vector(ctx.vector.clone()))?;
            let mut prev = ctx.prev;
            for &t in utterance {
                let x = self.input(&mut tape, prev)?;
                h = self.decoder.step(&mut tape, h, x)?;
                prev = Some(t);
            }
            Ok(ContextState {
                vector: tape.value(h).data().to_vec(),
                prev,
            })
        }
    }

    pub fn observe_all(&self, utterances: &[Vec<u32>]) -> Result<ContextState> {
        utterances
            .iter()
            .try_fold(self.initial_context(), |c, u| self.observe(&c, u))
    }

    pub fn start_decoder(&self, ctx: &ContextState) -> Result<DecoderState> {
        if !self.variant().is_hierarchical() {
            return Ok(DecoderState {
                hidden: ctx.vector.clone(),
                prev: ctx.prev,
            });
        }
        let mut tape = Tape::new(&self.params);
        let c = tape.constant(Tensor::vector(ctx.vector.clone()))?;
        let h = self.init_decoder_node(&mut tape, c)?;
        Ok(DecoderState {
            hidden: tape.value(h).data().to_vec(),
            prev: None,
        })
    }

    /// Log-probabilities of the next token and the hidden state after the
    /// step. Continue with `DecoderState { hidden, prev: Some(token) }`.
    pub fn next_log_probs(&self, state: &DecoderState) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let h = tape.constant(Tensor::vector(state.hidden.clone()))?;
        let (h, lp) = self.decode_step(&mut tape, h, state.prev)?;
        Ok((tape.value(lp).data().to_vec(), tape.value(h).data().to_vec()))
    }
}


/// Agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `(name, ||a - n|| / max(||a||, ||n||, 1e-8))` per parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Largest elementwise relative error among elements whose gradient
    /// magnitude exceeds 1e-4; below that, rounding noise in the difference
    /// quotient (about 1e-10 absolute) dominates.
    pub max_element_rel_error: f64,
    pub checked: usize,
}

/// Compares every parameter element's analytic gradient of the dialogue NLL
/// against `(f(x+h) - f(x-h)) / 2h`.
pub fn gradient_check(model: &DialogueModel, d: &Dialogue, step: f64) -> Result<GradCheck> {
    let (_, grads) = model.nll_and_grads(d)?;
    let mut probe = model.clone();
    let mut report = GradCheck {
        per_param: Vec::new(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        max_element_rel_error: 0.0,
        checked: 0,
    };
    let nll = |m: &DialogueModel| -> Result<f64> { Ok(-m.token_log_probs(d)?.iter().sum::<f64>()) };
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in 0..model.params.get(id).len() {
            let x = model.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = x + step;
            let up = nll(&probe)?;
            probe.params.get_mut(id).data_mut()[i] = x - step;
            let down = nll(&probe)?;
            probe.params.get_mut(id).data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-4 {
                report.max_element_rel_error = report.max_element_rel_error.max((analytic - numeric).abs() / scale);
            }
            report.checked += 1;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        let name = model.params.name(id).to_string();
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = name.clone();
        }
        report.per_param.push((name, rel));
    }
    Ok(report)
}
