use std::collections::HashMap;
use std::io::BufRead;

use super::{LayerError, Result};
use crate::params::{ModelParams, ParamId, Tape};
use crate::tensor::{gaussian_init, NodeId, Rng};

/// Low-rank input embedding `I = X E`. `E` is stored token-major as a
/// `[|V|, d_e]` matrix, so row `j` is the embedding of token `j`; `X` is
/// `[d_h, d_e]`.
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    pub e: ParamId,
    pub x: ParamId,
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_h: usize,
}

impl EmbeddingLayer {
    pub fn new(
        params: &mut ModelParams,
        prefix: &str,
        vocab_size: usize,
        d_e: usize,
        d_h: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let e = params.add(format!("{prefix}.e"), gaussian_init(&[vocab_size, d_e], 0.01, rng)?);
        let x = params.add(format!("{prefix}.x"), gaussian_init(&[d_h, d_e], 0.01, rng)?);
        Ok(EmbeddingLayer {
            e,
            x,
            vocab_size,
            d_e,
            d_h,
        })
    }

    /// `X * E[token]`, a `d_h` vector.
    pub fn embed(&self, tape: &mut Tape, token: u32) -> Result<NodeId> {
        if token as usize >= self.vocab_size {
            return Err(LayerError::TokenOutOfRange {
                token,
                vocab: self.vocab_size,
            });
        }
        let e = tape.param(self.e)?;
        let x = tape.param(self.x)?;
        let col = tape.graph.row(e, token as usize)?;
        Ok(tape.graph.matmul(x, col)?)
    }
}

/// Pretrained word vectors read from the common text format: one
/// `token v1 ... v_d` line per word, with an optional `count dim` header.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn load_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() < 2 {
            return Err(LayerError::Parse {
                line: i + 1,
                msg: "expected a token followed by values".into(),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| LayerError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LayerError::Parse {
                line: i + 1,
                msg: "non-finite value".into(),
            });
        }
        if table.dim == 0 {
            table.dim = values.len();
        } else if values.len() != table.dim {
            return Err(LayerError::Parse {
                line: i + 1,
                msg: format!("expected {} values, found {}", table.dim, values.len()),
            });
        }
        table.vectors.insert(fields[0].to_string(), values);
    }
    Ok(table)
}
