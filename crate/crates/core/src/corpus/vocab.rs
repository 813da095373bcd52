use std::collections::HashMap;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::{CorpusError, Result};

pub const UNK: &str = "<unk>";
pub const PERSON: &str = "<person>";
pub const NUMBER: &str = "<number>";
pub const EOS: &str = "</s>";
pub const CONTINUED: &str = "<continued_utterance>";

pub const UNK_ID: u32 = 0;
pub const PERSON_ID: u32 = 1;
pub const NUMBER_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const CONTINUED_ID: u32 = 4;

/// Reserved tokens in id order. They are exempt from the frequency cap.
pub const RESERVED: [&str; 5] = [UNK, PERSON, NUMBER, EOS, CONTINUED];

pub fn is_reserved(token: &str) -> bool {
    RESERVED.contains(&token)
}

/// Bijective token/id map with frequency counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `cap` most frequent non-reserved tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I, S>(streams: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a str>,
    {
        if cap == 0 {
            return Err(CorpusError::Invalid("vocabulary cap must be at least 1".into()));
        }
        let mut freq: HashMap<&'a str, u64> = HashMap::new();
        let mut total = 0usize;
        for stream in streams {
            for tok in stream {
                *freq.entry(tok).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut regular: Vec<(&str, u64)> = freq
            .iter()
            .filter(|(t, _)| !is_reserved(t))
            .map(|(t, c)| (*t, *c))
            .collect();
        regular.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let dropped: u64 = regular.iter().skip(cap).map(|(_, c)| c).sum();
        regular.truncate(cap);

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts: Vec<u64> = RESERVED.iter().map(|r| freq.get(r).copied().unwrap_or(0)).collect();
        counts[UNK_ID as usize] += dropped;
        for (t, c) in regular {
            tokens.push(t.to_string());
            counts.push(c);
        }
        Ok(Self::from_parts(tokens, counts))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, counts, ids }
    }

    /// A vocabulary of exactly the reserved tokens followed by `words`.
    pub fn from_tokens<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref();
            if tokens.iter().any(|t| t == w) {
                return Err(CorpusError::Invalid(format!("duplicate token {w:?}")));
            }
            tokens.push(w.to_string());
        }
        let counts = vec![0; tokens.len()];
        Ok(Self::from_parts(tokens, counts))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or `<unk>` when it is out of vocabulary.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t.as_ref())).collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string).ok_or(CorpusError::UnknownId(i)))
            .collect()
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the tokens in id order, newline separated.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `token<TAB>id<TAB>count` per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{t}\t{i}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| CorpusError::Format {
                line: n + 1,
                msg: msg.to_string(),
            };
            let mut f = line.split('\t');
            let (Some(tok), Some(id), Some(count), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad("expected token<TAB>id<TAB>count"));
            };
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and in order"));
            }
            tokens.push(tok.to_string());
            counts.push(count.parse().map_err(|_| bad("bad count"))?);
        }
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(CorpusError::Invalid(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let vocab = Self::from_parts(tokens, counts);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(CorpusError::Invalid("duplicate token in vocabulary".into()));
        }
        Ok(vocab)
    }
}
