//! Dataset construction: tokenization, placeholder substitution, vocabulary
//! capping, triple assembly, Q-A conversion, truncation and statistics.

mod pipeline;
mod script;
pub mod synth;
mod tokenize;
pub mod vocab;

use std::io::{BufRead, Write};

pub use pipeline::{preprocess, PreprocessConfig, Preprocessed, Split};
pub use script::{make_triples, parse_script, qa_to_dialogues, Movie, Triple, Turn};
pub use tokenize::{detokenize, Tokenizer};
pub use vocab::{Vocabulary, CONTINUED_ID, EOS_ID, NUMBER_ID, PERSON_ID, UNK_ID};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("invalid dialogue: {0}")]
    InvalidDialogue(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// An encoded dialogue: utterances of token ids, each terminated by exactly one
/// `</s>`. A three-utterance dialogue is a triple.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dialogue {
    pub utterances: Vec<Vec<u32>>,
}

impl Dialogue {
    pub fn new(utterances: Vec<Vec<u32>>) -> Result<Self> {
        let d = Dialogue { utterances };
        d.validate()?;
        Ok(d)
    }

    /// Non-empty, and every utterance ends in `</s>` with no other `</s>`
    /// and no `<continued_utterance>` directly before it.
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(CorpusError::InvalidDialogue("no utterances".into()));
        }
        for (m, u) in self.utterances.iter().enumerate() {
            match u.split_last() {
                Some((&EOS_ID, body)) if !body.contains(&EOS_ID) => {
                    if body.last() == Some(&CONTINUED_ID) {
                        return Err(CorpusError::InvalidDialogue(format!(
                            "utterance {m} ends with a continued-utterance token"
                        )));
                    }
                }
                _ => {
                    return Err(CorpusError::InvalidDialogue(format!(
                        "utterance {m} must end with exactly one </s>"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.utterances.iter().map(Vec::len).sum()
    }

    pub fn count(&self, id: u32) -> usize {
        self.utterances.iter().flatten().filter(|&&t| t == id).count()
    }

    /// All tokens in order, utterance boundaries included.
    pub fn flat(&self) -> Vec<u32> {
        self.utterances.iter().flatten().copied().collect()
    }
}

/// Trims a dialogue to at most `limit` tokens by cutting from the tail of the
/// last utterance, then the one before it, and so on. Each utterance keeps its
/// trailing `</s>`; a `<continued_utterance>` exposed by a cut is removed too.
pub fn truncate(dialogue: &Dialogue, limit: usize) -> Result<Dialogue> {
    if limit < dialogue.utterances.len() {
        return Err(CorpusError::Invalid(format!(
            "truncation limit {limit} leaves no room for {} end-of-utterance tokens",
            dialogue.utterances.len()
        )));
    }
    let mut utts = dialogue.utterances.clone();
    let mut excess = dialogue.num_tokens().saturating_sub(limit);
    for u in utts.iter_mut().rev() {
        if excess == 0 {
            break;
        }
        let body = u.len() - 1;
        let cut = excess.min(body);
        u.drain(body - cut..body);
        excess -= cut;
        if u.len() >= 2 && u[u.len() - 2] == CONTINUED_ID {
            u.remove(u.len() - 2);
            excess = excess.saturating_sub(1);
        }
    }
    Ok(Dialogue { utterances: utts })
}

/// Per-split statistics in the layout of the dataset table.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SplitStats {
    pub triples: usize,
    pub avg_tokens: f64,
    pub avg_unk: f64,
    pub movies: Option<usize>,
}

pub fn stats(split: &[Dialogue], movies: Option<usize>) -> Result<SplitStats> {
    if split.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = split.len() as f64;
    let tokens: usize = split.iter().map(Dialogue::num_tokens).sum();
    let unk: usize = split.iter().map(|d| d.count(UNK_ID)).sum();
    Ok(SplitStats {
        triples: split.len(),
        avg_tokens: tokens as f64 / n,
        avg_unk: unk as f64 / n,
        movies,
    })
}

/// One dialogue per line: utterances joined by a tab, tokens by a space.
pub fn write_dataset<W: Write, S: AsRef<str>>(mut w: W, dialogues: &[Vec<Vec<S>>]) -> std::io::Result<()> {
    for d in dialogues {
        let line: Vec<String> = d
            .iter()
            .map(|u| u.iter().map(AsRef::as_ref).collect::<Vec<&str>>().join(" "))
            .collect();
        writeln!(w, "{}", line.join("\t"))?;
    }
    Ok(())
}

/// Surface tokens of an encoded-dataset file.
pub fn read_surface<R: BufRead>(r: R) -> Result<Vec<Vec<Vec<String>>>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            line.split('\t')
                .map(|u| u.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect())
                .collect(),
        );
    }
    Ok(out)
}

/// Reads an encoded-dataset file and maps it through `vocab`.
pub fn read_dataset<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Vec<Dialogue>> {
    read_surface(r)?
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            Dialogue::new(d.iter().map(|u| vocab.encode(u)).collect()).map_err(|e| CorpusError::Format {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
