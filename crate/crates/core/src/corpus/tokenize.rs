use std::collections::HashSet;
use std::io::BufRead;

use super::vocab::{CONTINUED, EOS, NUMBER, PERSON, RESERVED};

/// Rule-based tokenizer: lowercases, splits punctuation and apostrophes into
/// their own tokens, maps digit runs to `<number>` and capitalized words found
/// in the gazetteer to `<person>`. Reserved tokens written literally (such as
/// `</s>`) pass through unchanged.
#[derive(Clone, Debug, Default)]
pub struct Tokenizer {
    gazetteer: HashSet<String>,
}

impl Tokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_gazetteer<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Tokenizer {
            gazetteer: names
                .into_iter()
                .map(|n| n.as_ref().trim().to_lowercase())
                .filter(|n| !n.is_empty())
                .collect(),
        }
    }

    /// One name per line; blank lines and `#` comments are ignored.
    pub fn read_gazetteer<R: BufRead>(r: R) -> std::io::Result<Self> {
        let mut names = Vec::new();
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                names.push(t.to_string());
            }
        }
        Ok(Self::with_gazetteer(names))
    }

    pub fn gazetteer_len(&self) -> usize {
        self.gazetteer.len()
    }

    pub fn tokenize(&self, line: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        let mut rest = line;
        while let Some(c) = rest.chars().next() {
            if c == '<' {
                if let Some(r) = RESERVED.iter().find(|r| rest.starts_with(*r)) {
                    self.flush(&mut word, &mut out);
                    out.push(r.to_string());
                    rest = &rest[r.len()..];
                    continue;
                }
            }
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                self.flush(&mut word, &mut out);
                if c == '\'' || c == '\u{2019}' || c == '`' {
                    out.push("'".to_string());
                } else if !c.is_whitespace() {
                    out.push(c.to_string());
                }
            }
            rest = &rest[c.len_utf8()..];
        }
        self.flush(&mut word, &mut out);
        out
    }

    fn flush(&self, word: &mut String, out: &mut Vec<String>) {
        if word.is_empty() {
            return;
        }
        let lower = word.to_lowercase();
        let tok = if word.chars().all(|c| c.is_ascii_digit()) {
            NUMBER.to_string()
        } else if word.chars().next().is_some_and(char::is_uppercase) && self.gazetteer.contains(&lower) {
            PERSON.to_string()
        } else {
            lower
        };
        out.push(tok);
        word.clear();
    }
}

/// Joins tokens back into display text: punctuation attaches to the previous
/// word, apostrophes rejoin contractions, `</s>` is dropped and
/// `<continued_utterance>` renders as "...". This is lossy.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for t in tokens {
        let t = t.as_ref();
        if t == EOS {
            continue;
        }
        let t = if t == CONTINUED { "..." } else { t };
        let attach_left = matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")" | "'" | "...") || glue_next;
        if !out.is_empty() && !attach_left {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = t == "'" || t == "(";
    }
    out
}
