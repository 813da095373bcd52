use super::{LayerError, Result};
use crate::params::{ModelParams, ParamId, Tape};
use crate::tensor::{gaussian_init, NodeId, Rng};

/// Maxout stage: `m = max_k (P_k h + c_k)` taken elementwise.
#[derive(Clone, Debug)]
pub struct Maxout {
    pub pieces: Vec<(ParamId, ParamId)>,
    pub dim: usize,
}

/// Projection from a hidden state to vocabulary logits, `O m + b`, where `m`
/// is either the hidden state itself or its maxout projection.
#[derive(Clone, Debug)]
pub struct OutputLayer {
    pub maxout: Option<Maxout>,
    pub o: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub vocab_size: usize,
}

impl OutputLayer {
    /// `maxout` is `(pieces, projected_dim)`.
    pub fn new(
        params: &mut ModelParams,
        prefix: &str,
        input_dim: usize,
        vocab_size: usize,
        maxout: Option<(usize, usize)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (maxout, proj_dim) = match maxout {
            Some((k, dim)) => {
                if k < 2 {
                    return Err(LayerError::Shape(format!("maxout needs >= 2 pieces, got {k}")));
                }
                let mut pieces = Vec::with_capacity(k);
                for i in 0..k {
                    let p = params.add(
                        format!("{prefix}.maxout{i}.w"),
                        gaussian_init(&[dim, input_dim], 0.01, rng)?,
                    );
                    let c = params.add(format!("{prefix}.maxout{i}.b"), gaussian_init(&[dim], 0.01, rng)?);
                    pieces.push((p, c));
                }
                (Some(Maxout { pieces, dim }), dim)
            }
            None => (None, input_dim),
        };
        let o = params.add(
            format!("{prefix}.o"),
            gaussian_init(&[vocab_size, proj_dim], 0.01, rng)?,
        );
        let b = params.add(format!("{prefix}.b"), gaussian_init(&[vocab_size], 0.01, rng)?);
        Ok(OutputLayer {
            maxout,
            o,
            b,
            input_dim,
            vocab_size,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.o, self.b];
        if let Some(m) = &self.maxout {
            for &(p, c) in &m.pieces {
                ids.push(p);
                ids.push(c);
            }
        }
        ids
    }

    pub fn logits(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let hs = tape.value(h).shape();
        if hs != [self.input_dim] {
            return Err(LayerError::Shape(format!(
                "output layer expects [{}], got {hs:?}",
                self.input_dim
            )));
        }
        let mut proj = h;
        if let Some(m) = &self.maxout {
            let mut acc: Option<NodeId> = None;
            for &(p, c) in &m.pieces {
                let (p, c) = (tape.param(p)?, tape.param(c)?);
                let g = &mut tape.graph;
                let lin = g.matmul(p, h)?;
                let lin = g.add(lin, c)?;
                acc = Some(match acc {
                    Some(a) => g.max(a, lin)?,
                    None => lin,
                });
            }
            proj = acc.expect("at least two pieces");
        }
        let (o, b) = (tape.param(self.o)?, tape.param(self.b)?);
        let out = tape.graph.matmul(o, proj)?;
        Ok(tape.graph.add(out, b)?)
    }
}
