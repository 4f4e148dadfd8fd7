//! Weighted fusion of the graph and quantum branches with the spectral
//! angle map, followed by two FF layers (conv3x3 -> PReLU -> BatchNorm).

use crate::autodiff::{BnState, Tape, VarId};
use crate::error::Result;

/// Tape handles for one FF layer.
#[derive(Clone, Copy)]
pub struct FfVars {
    pub kernel: VarId, // [9*cin, cout]
    pub bias: VarId,   // [cout]
    pub prelu: VarId,  // scalar slope
    pub gamma: VarId,  // [cout]
    pub beta: VarId,   // [cout]
}

/// X_fea = (GFL + QFL) ⊙ Z, with Z broadcast over channels. Pass
/// `qfl_out = None` when the QFL branch is ablated (its term is zero).
pub fn weighted_sum(
    tape: &mut Tape,
    gfl_out: VarId,
    qfl_out: Option<VarId>,
    z: VarId,
) -> Result<VarId> {
    let s = match qfl_out {
        Some(q) => tape.add(gfl_out, q)?,
        None => gfl_out,
    };
    tape.mul_col(s, z)
}

/// One FF layer: BN(PReLU(conv3x3(x))).
pub fn ff_layer(
    tape: &mut Tape,
    x: VarId,
    vars: &FfVars,
    state: &mut BnState,
    training: bool,
    h: usize,
    w: usize,
) -> Result<VarId> {
    let y = tape.conv3x3(x, vars.kernel, vars.bias, h, w)?;
    let y = tape.prelu(y, vars.prelu)?;
    tape.batchnorm(y, vars.gamma, vars.beta, state, training)
}

/// X_fuse = FF(FF(X_fea || X~1 || X~2 || Z)).
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    tape: &mut Tape,
    x_fea: VarId,
    x1t: VarId,
    x2t: VarId,
    z: VarId,
    ff1: &FfVars,
    ff2: &FfVars,
    bn1: &mut BnState,
    bn2: &mut BnState,
    training: bool,
    h: usize,
    w: usize,
) -> Result<VarId> {
    let cat = tape.concat_cols(&[x_fea, x1t, x2t, z])?;
    let y = ff_layer(tape, cat, ff1, bn1, training, h, w)?;
    ff_layer(tape, y, ff2, bn2, training, h, w)
}
