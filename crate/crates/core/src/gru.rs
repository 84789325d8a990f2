//! Gated recurrent unit cell composed from tape operations.
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! n  = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
//! h' = n + z ⊙ (h − n)
//! ```
//! Rows are independent nodes sharing one set of weights.

use crate::error::TensorError;
use crate::tape::{Tape, Var};

/// Handles to the nine GRU parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
}

/// Applies one GRU step to every row: `state` and `input` are `[N×d]`.
pub fn gru_cell(tape: &mut Tape, state: Var, input: Var, p: &GruVars) -> Result<Var, TensorError> {
    if tape.value(state).shape() != tape.value(input).shape() {
        return Err(TensorError::Shape {
            op: "gru_cell",
            left: tape.value(state).shape().to_vec(),
            right: tape.value(input).shape().to_vec(),
        });
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var| -> Result<Var, TensorError> {
        let xi = tape.matmul(input, w)?;
        let hu = tape.matmul(state, u)?;
        let s = tape.add(xi, hu)?;
        let s = tape.add_row(s, b)?;
        Ok(tape.sigmoid(s))
    };
    let z = gate(tape, p.w_z, p.u_z, p.b_z)?;
    let r = gate(tape, p.w_r, p.u_r, p.b_r)?;

    let xn = tape.matmul(input, p.w_n)?;
    let rh = tape.mul(r, state)?;
    let rhu = tape.matmul(rh, p.u_n)?;
    let cand = tape.add(xn, rhu)?;
    let cand = tape.add_row(cand, p.b_n)?;
    let cand = tape.tanh(cand);

    let diff = tape.sub(state, cand)?;
    let gated = tape.mul(z, diff)?;
    tape.add(cand, gated)
}
