use std::fs;
use std::path::{Path, PathBuf};

use super::script::{make_triples, parse_script, qa_to_dialogues, Triple};
use super::tokenize::Tokenizer;
use super::vocab::Vocabulary;
use super::{stats, write_dataset, CorpusError, Dialogue, Result, SplitStats};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub vocab_cap: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            vocab_cap: 10_000,
            seed: 1234,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub vocab: Vocabulary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub qa: Vec<Vec<Vec<String>>>,
    pub qa_skipped: usize,
    /// Movies per split, in `Split::ALL` order.
    pub movies: [usize; 3],
}

/// Raw script (and optional Q-A text) to vocabulary and split triples.
/// Movies are shuffled with the configured seed and assigned whole to a
/// split before any triple is built, so no movie spans two splits.
pub fn preprocess(
    script: &str,
    qa: Option<&str>,
    tokenizer: &Tokenizer,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed> {
    let fr = [cfg.valid_fraction, cfg.test_fraction];
    if fr.iter().any(|f| !(0.0..1.0).contains(f)) || fr[0] + fr[1] >= 1.0 {
        return Err(CorpusError::Invalid(
            "split fractions must be in [0,1) and sum below 1".into(),
        ));
    }
    let movies = parse_script(script)?;
    if movies.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = movies.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(cfg.seed).shuffle(&mut order);
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    let n_valid = (cfg.valid_fraction * n as f64).round() as usize;
    let mut assign = vec![Split::Train; n];
    for (rank, &m) in order.iter().enumerate() {
        if rank < n_test {
            assign[m] = Split::Test;
        } else if rank < n_test + n_valid {
            assign[m] = Split::Valid;
        }
    }

    let triples = make_triples(&movies, tokenizer);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in triples {
        match assign[t.movie] {
            Split::Train => train.push(t),
            Split::Valid => valid.push(t),
            Split::Test => test.push(t),
        }
    }
    if train.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }

    let (qa, qa_skipped) = match qa {
        Some(text) => qa_to_dialogues(text, tokenizer),
        None => (Vec::new(), 0),
    };
    let streams = train
        .iter()
        .flat_map(|t| t.utterances.iter())
        .chain(qa.iter().flatten())
        .map(|u| u.iter().map(String::as_str));
    let vocab = Vocabulary::build(streams, cfg.vocab_cap)?;

    let mut movies_per = [0; 3];
    for s in &assign {
        movies_per[*s as usize] += 1;
    }
    Ok(Preprocessed {
        vocab,
        train,
        valid,
        test,
        qa,
        qa_skipped,
        movies: movies_per,
    })
}

impl Preprocessed {
    pub fn split(&self, s: Split) -> &[Triple] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn encoded(&self, s: Split) -> Vec<Dialogue> {
        self.split(s)
            .iter()
            .map(|t| Dialogue {
                utterances: t.utterances.iter().map(|u| self.vocab.encode(u)).collect(),
            })
            .collect()
    }

    pub fn encoded_qa(&self) -> Vec<Dialogue> {
        self.qa
            .iter()
            .map(|d| Dialogue {
                utterances: d.iter().map(|u| self.vocab.encode(u)).collect(),
            })
            .collect()
    }

    pub fn stats(&self) -> Vec<(Split, Option<SplitStats>)> {
        Split::ALL
            .iter()
            .map(|&s| (s, stats(&self.encoded(s), Some(self.movies[s as usize])).ok()))
            .collect()
    }

    fn surface(&self, dialogues: &[Dialogue]) -> Vec<Vec<Vec<String>>> {
        dialogues
            .iter()
            .map(|d| {
                d.utterances
                    .iter()
                    .map(|u| self.vocab.decode(u).expect("ids come from this vocabulary"))
                    .collect()
            })
            .collect()
    }

    /// Writes `vocab.tsv`, `{train,valid,test}.triples`, `qa.pairs` (when Q-A
    /// text was given) and `stats.json`. Out-of-vocabulary tokens are written
    /// as `<unk>`. Returns the paths in write order.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut emit = |name: &str, bytes: Vec<u8>| -> std::io::Result<()> {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            written.push(p);
            Ok(())
        };
        let mut buf = Vec::new();
        self.vocab.write_tsv(&mut buf)?;
        emit("vocab.tsv", buf)?;
        for s in Split::ALL {
            let mut buf = Vec::new();
            write_dataset(&mut buf, &self.surface(&self.encoded(s)))?;
            emit(&format!("{}.triples", s.name()), buf)?;
        }
        if !self.qa.is_empty() {
            let mut buf = Vec::new();
            write_dataset(&mut buf, &self.surface(&self.encoded_qa()))?;
            emit("qa.pairs", buf)?;
        }
        let stats: serde_json::Map<String, serde_json::Value> = self
            .stats()
            .into_iter()
            .map(|(s, st)| (s.name().to_string(), serde_json::to_value(st).expect("plain data")))
            .collect();
        let mut json = serde_json::to_vec_pretty(&serde_json::json!({
            "splits": stats,
            "vocab_size": self.vocab.len(),
            "qa_pairs": self.qa.len(),
            "qa_skipped": self.qa_skipped,
        }))?;
        json.push(b'\n');
        emit("stats.json", json)?;
        Ok(written)
    }
}
