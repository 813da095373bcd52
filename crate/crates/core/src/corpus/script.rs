use super::tokenize::Tokenizer;
use super::vocab::{CONTINUED, EOS};
use super::{CorpusError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

/// A named group of dialogues; every triple built from it lands in one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Movie {
    pub name: String,
    pub dialogues: Vec<Vec<Turn>>,
}

/// Three consecutive turns A-B-A in surface tokens, each ending with `</s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub utterances: [Vec<String>; 3],
    pub movie: usize,
}

impl Triple {
    pub fn num_tokens(&self) -> usize {
        self.utterances.iter().map(Vec::len).sum()
    }
}

/// Parses the raw script format: `SPEAKER<TAB>text` per line, a blank line
/// between dialogues, and `# name` lines starting a new movie. Without any
/// movie markers each dialogue is its own group.
pub fn parse_script(text: &str) -> Result<Vec<Movie>> {
    let mut movies: Vec<Movie> = Vec::new();
    let mut current: Vec<Turn> = Vec::new();
    let mut marked = false;
    let mut loose: Vec<Vec<Turn>> = Vec::new();

    fn close(current: &mut Vec<Turn>, movies: &mut [Movie], loose: &mut Vec<Vec<Turn>>) {
        if current.is_empty() {
            return;
        }
        let d = std::mem::take(current);
        match movies.last_mut() {
            Some(m) => m.dialogues.push(d),
            None => loose.push(d),
        }
    }

    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            close(&mut current, &mut movies, &mut loose);
            continue;
        }
        if let Some(name) = line.strip_prefix('#') {
            close(&mut current, &mut movies, &mut loose);
            marked = true;
            movies.push(Movie {
                name: name.trim().to_string(),
                dialogues: Vec::new(),
            });
            continue;
        }
        let Some((speaker, text)) = line.split_once('\t') else {
            return Err(CorpusError::Format {
                line: i + 1,
                msg: "expected SPEAKER<TAB>text".into(),
            });
        };
        current.push(Turn {
            speaker: speaker.trim().to_string(),
            text: text.to_string(),
        });
    }
    close(&mut current, &mut movies, &mut loose);

    if !marked {
        return Ok(loose
            .into_iter()
            .enumerate()
            .map(|(i, d)| Movie {
                name: format!("dialogue-{i}"),
                dialogues: vec![d],
            })
            .collect());
    }
    if !loose.is_empty() {
        movies.insert(
            0,
            Movie {
                name: String::new(),
                dialogues: loose,
            },
        );
    }
    Ok(movies)
}

/// Merges consecutive lines of one speaker (joined by the continued-utterance
/// token), appends `</s>` to each turn and slides a three-turn window over each
/// dialogue, keeping windows whose speakers follow A-B-A.
pub fn make_triples(movies: &[Movie], tokenizer: &Tokenizer) -> Vec<Triple> {
    let mut out = Vec::new();
    for (mi, movie) in movies.iter().enumerate() {
        for dialogue in &movie.dialogues {
            let mut merged: Vec<(&str, Vec<String>)> = Vec::new();
            for turn in dialogue {
                let toks = tokenizer.tokenize(&turn.text);
                if toks.is_empty() {
                    continue;
                }
                match merged.last_mut() {
                    Some((spk, acc)) if *spk == turn.speaker => {
                        acc.push(CONTINUED.to_string());
                        acc.extend(toks);
                    }
                    _ => merged.push((&turn.speaker, toks)),
                }
            }
            for w in merged.windows(3) {
                if w[0].0 != w[2].0 || w[0].0 == w[1].0 {
                    continue;
                }
                let utt = |i: usize| {
                    let mut u = w[i].1.clone();
                    u.push(EOS.to_string());
                    u
                };
                out.push(Triple {
                    utterances: [utt(0), utt(1), utt(2)],
                    movie: mi,
                });
            }
        }
    }
    out
}

/// Converts `Q<TAB>A` lines into two-utterance dialogues. Pairs with an empty
/// side (or no tab) are skipped and counted.
pub fn qa_to_dialogues(text: &str, tokenizer: &Tokenizer) -> (Vec<Vec<Vec<String>>>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((q, a)) = line.split_once('\t') else {
            skipped += 1;
            continue;
        };
        let (mut q, mut a) = (tokenizer.tokenize(q), tokenizer.tokenize(a));
        if q.is_empty() || a.is_empty() {
            skipped += 1;
            continue;
        }
        q.push(EOS.to_string());
        a.push(EOS.to_string());
        out.push(vec![q, a]);
    }
    (out, skipped)
}
