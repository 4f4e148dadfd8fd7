//! Pixel-level quantum feature learning: a channel-condensing 1x1 conv,
//! per-pixel circuits over 4-channel groups with shared parameters, and a
//! restoring 1x1 conv back to the 64-channel spine.

use crate::autodiff::{Tape, VarId};
use crate::error::Result;
use crate::quantum::CircuitSpec;

/// Tape handles for the QFL branch parameters.
#[derive(Clone, Copy)]
pub struct QflVars {
    pub conv_in_k: VarId,  // [64, G*4]
    pub conv_in_b: VarId,  // [G*4]
    pub quantum: VarId,    // circuit parameters, shared across pixels/groups
    pub conv_out_k: VarId, // [G*2, 64]
    pub conv_out_b: VarId, // [64]
}

pub fn qfl_forward(tape: &mut Tape, x: VarId, vars: &QflVars, spec: &CircuitSpec) -> Result<VarId> {
    let condensed = tape.conv1x1(x, vars.conv_in_k, vars.conv_in_b)?;
    let measured = tape.quantum_map(condensed, vars.quantum, spec)?;
    tape.conv1x1(measured, vars.conv_out_k, vars.conv_out_b)
}
