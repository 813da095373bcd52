use super::{LayerError, Result};
use crate::params::{ModelParams, ParamId, Tape};
use crate::tensor::{gaussian_init, orthogonal_init, NodeId, Rng};

/// Gated recurrent unit:
///
/// ```text
/// r  = sigmoid(W_r x + U_r h + b_r)
/// z  = sigmoid(W_z x + U_z h + b_z)
/// h~ = tanh(W x + U (r * h) + b)
/// h' = (1 - z) * h + z * h~
/// ```
///
/// Input matrices are `[hidden, input]`, recurrent matrices `[hidden, hidden]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    /// Recurrent matrices start orthogonal, everything else Gaussian(0, 0.01).
    pub fn new(
        params: &mut ModelParams,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut input = |name: &str, rng: &mut Rng| -> Result<ParamId> {
            Ok(params.add(
                format!("{prefix}.{name}"),
                gaussian_init(&[hidden_dim, input_dim], 0.01, rng)?,
            ))
        };
        let w_r = input("w_r", rng)?;
        let w_z = input("w_z", rng)?;
        let w_h = input("w_h", rng)?;
        let mut recurrent = |name: &str, rng: &mut Rng| -> Result<ParamId> {
            Ok(params.add(
                format!("{prefix}.{name}"),
                orthogonal_init(hidden_dim, hidden_dim, rng)?,
            ))
        };
        let u_r = recurrent("u_r", rng)?;
        let u_z = recurrent("u_z", rng)?;
        let u_h = recurrent("u_h", rng)?;
        let mut bias = |name: &str, rng: &mut Rng| -> Result<ParamId> {
            Ok(params.add(format!("{prefix}.{name}"), gaussian_init(&[hidden_dim], 0.01, rng)?))
        };
        let b_r = bias("b_r", rng)?;
        let b_z = bias("b_z", rng)?;
        let b_h = bias("b_h", rng)?;
        Ok(GruCell {
            w_r,
            u_r,
            b_r,
            w_z,
            u_z,
            b_z,
            w_h,
            u_h,
            b_h,
            input_dim,
            hidden_dim,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.u_r, self.b_r, self.w_z, self.u_z, self.b_z, self.w_h, self.u_h, self.b_h,
        ]
    }

    pub fn step(&self, tape: &mut Tape, h_prev: NodeId, x: NodeId) -> Result<NodeId> {
        let (hs, xs) = (tape.value(h_prev).shape(), tape.value(x).shape());
        if hs != [self.hidden_dim] || xs != [self.input_dim] {
            return Err(LayerError::Shape(format!(
                "gru step expects h [{}] and x [{}], got {hs:?} and {xs:?}",
                self.hidden_dim, self.input_dim
            )));
        }
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, h: NodeId| -> Result<NodeId> {
            let (w, u, b) = (tape.param(w)?, tape.param(u)?, tape.param(b)?);
            let g = &mut tape.graph;
            let wx = g.matmul(w, x)?;
            let uh = g.matmul(u, h)?;
            let s = g.add(wx, uh)?;
            Ok(g.add(s, b)?)
        };
        let r_pre = gate(tape, self.w_r, self.u_r, self.b_r, h_prev)?;
        let r = tape.graph.sigmoid(r_pre)?;
        let z_pre = gate(tape, self.w_z, self.u_z, self.b_z, h_prev)?;
        let z = tape.graph.sigmoid(z_pre)?;
        let rh = tape.graph.mul(r, h_prev)?;
        let cand_pre = gate(tape, self.w_h, self.u_h, self.b_h, rh)?;
        let g = &mut tape.graph;
        let cand = g.tanh(cand_pre)?;
        let diff = g.sub(cand, h_prev)?;
        let upd = g.mul(z, diff)?;
        Ok(g.add(h_prev, upd)?)
    }
}
