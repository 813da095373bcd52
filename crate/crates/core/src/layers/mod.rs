//! Neural building blocks: low-rank embeddings, GRU cells, the output
//! projection (optionally through maxout) and L2 pooling.

mod embedding;
mod gru;
mod output;

pub use embedding::{load_embeddings, EmbeddingLayer, EmbeddingTable};
pub use gru::GruCell;
pub use output::{Maxout, OutputLayer};

use crate::params::Tape;
use crate::tensor::{NodeId, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("{0}")]
    Shape(String),
    #[error("l2 pooling over an empty state list")]
    EmptyPool,
    #[error("embedding file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Elementwise root-mean-square over a list of states:
/// `sqrt(1/N * sum_n h_n^2)`.
pub fn l2_pool(tape: &mut Tape, states: &[NodeId]) -> Result<NodeId> {
    let (first, rest) = states.split_first().ok_or(LayerError::EmptyPool)?;
    let g = &mut tape.graph;
    let mut acc = g.square(*first)?;
    for &s in rest {
        let sq = g.square(s)?;
        acc = g.add(acc, sq)?;
    }
    let mean = g.scale(acc, 1.0 / states.len() as f64)?;
    Ok(g.sqrt(mean)?)
}
