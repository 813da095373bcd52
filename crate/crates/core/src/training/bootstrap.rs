use serde::{Deserialize, Serialize};

use super::{check_vocab, prepare, Freeze, LogEntry, Result, TrainConfig, TrainError, TrainOutcome, Trainer};
use crate::corpus::vocab::RESERVED;
use crate::corpus::{Dialogue, Vocabulary};
use crate::layers::EmbeddingTable;
use crate::models::DialogueModel;

/// Result of loading pretrained vectors: which token ids were covered and
/// the two training stages.
#[derive(Clone, Debug)]
pub struct Bootstrap {
    pub covered: Vec<u32>,
    /// Covered rows of E frozen; everything else trains.
    pub stage1: TrainConfig,
    /// All parameters train.
    pub stage2: TrainConfig,
}

/// Copies vectors from `table` into the rows of E for every vocabulary word
/// it covers. Reserved tokens are never taken from the file and, like
/// uncovered words, keep their Gaussian initialization.
pub fn bootstrap_embeddings(
    model: &mut DialogueModel,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    base: &TrainConfig,
) -> Result<Bootstrap> {
    if vocab.len() != model.vocab_size() {
        return Err(TrainError::Vocabulary(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    if table.dim != model.config.d_e {
        return Err(TrainError::Config(format!(
            "embedding file has dimension {}, model d_e is {}",
            table.dim, model.config.d_e
        )));
    }
    let e = model.embedding.e;
    let mut covered = Vec::new();
    for (id, token) in vocab.tokens().iter().enumerate().skip(RESERVED.len()) {
        if let Some(v) = table.get(token) {
            model.params.get_mut(e).row_mut(id).copy_from_slice(v);
            covered.push(id as u32);
        }
    }
    if covered.is_empty() {
        log::warn!("embedding file covers no vocabulary words");
    }
    let name = model.params.name(e).to_string();
    let mut stage1 = base.clone();
    stage1.freeze = base.freeze.clone().rows(name, covered.iter().map(|&i| i as usize));
    Ok(Bootstrap {
        covered,
        stage1,
        stage2: base.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Full passes over the two-turn corpus before finetuning.
    pub pretrain_epochs: usize,
    /// Finetuning settings; E is added to its freeze set. Seed, optimizer
    /// and truncation settings also apply to pretraining.
    pub finetune: TrainConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            pretrain_epochs: 4,
            finetune: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Transfer {
    pub pretrained: DialogueModel,
    pub outcome: TrainOutcome,
}

/// Trains every parameter on question-answer pairs, then finetunes on the
/// target dialogues with the word embeddings held fixed.
pub fn pretrain_finetune(
    model: DialogueModel,
    qa: &[Dialogue],
    train: &[Dialogue],
    valid: &[Dialogue],
    config: &TransferConfig,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<Transfer> {
    if qa.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if let Some(d) = qa.iter().find(|d| d.utterances.len() > 2) {
        return Err(TrainError::Config(format!(
            "pretraining corpus must hold two-turn dialogues, found {} turns",
            d.utterances.len()
        )));
    }
    check_vocab(qa, model.vocab_size(), "pretraining corpus")?;
    let mut phase_a = config.finetune.clone();
    phase_a.freeze = Freeze::none();
    phase_a.max_epochs = config.pretrain_epochs;
    let qa = prepare(qa, phase_a.truncate)?;
    let mut pre = Trainer::new(model, phase_a)?;
    for _ in 0..config.pretrain_epochs {
        pre.run_epoch(&qa)?;
    }
    let pretrained = pre.model;
    let mut phase_b = config.finetune.clone();
    let e = pretrained.params.name(pretrained.embedding.e).to_string();
    phase_b.freeze = phase_b.freeze.param(e);
    let outcome = Trainer::new(pretrained.clone(), phase_b)?.run(train, valid, on_log, &mut |_| Ok(()))?;
    Ok(Transfer { pretrained, outcome })
}
