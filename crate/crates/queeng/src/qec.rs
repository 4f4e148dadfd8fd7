//! Quantum-enhanced classifier: a quantum branch and a fully-connected
//! branch over the fused features, gated per pixel by a trainable softmax
//! attention weight, plus the composite training loss.

use crate::autodiff::{Tape, VarId};
use crate::error::Result;
use crate::quantum::CircuitSpec;
use crate::tensor::Tensor;

/// Tape handles for the QEC parameters. The three FCLs do not share weights.
#[derive(Clone, Copy)]
pub struct QecVars {
    pub fcl1_w: VarId,  // [64, 4]
    pub fcl1_b: VarId,  // [4]
    pub quantum: VarId, // circuit parameters
    pub fcl2_w: VarId,  // [64, 2]
    pub fcl2_b: VarId,  // [2]
    pub w_attn: VarId,  // [H*W, 4]
    pub fcl3_w: VarId,  // [4, 2]
    pub fcl3_b: VarId,  // [2]
}

/// Softmax change maps from the classifier head.
pub struct QecMaps {
    pub m: VarId,     // fused map, [H*W, 2]
    pub m_qnn: VarId, // quantum branch alone
    pub m_fcl: VarId, // fully-connected branch alone
}

pub fn qec_forward(
    tape: &mut Tape,
    x_fuse: VarId,
    vars: &QecVars,
    spec: &CircuitSpec,
) -> Result<QecMaps> {
    let angles = tape.conv1x1(x_fuse, vars.fcl1_w, vars.fcl1_b)?;
    let x_qnn = tape.quantum_map(angles, vars.quantum, spec)?; // [n, 2]
    let x_fcl = tape.conv1x1(x_fuse, vars.fcl2_w, vars.fcl2_b)?; // [n, 2]
    let cat = tape.concat_cols(&[x_qnn, x_fcl])?; // [n, 4]
    let gate = tape.softmax_rows(vars.w_attn)?;
    let gated = tape.mul(cat, gate)?;
    let logits = tape.conv1x1(gated, vars.fcl3_w, vars.fcl3_b)?;
    Ok(QecMaps {
        m: tape.softmax_rows(logits)?,
        m_qnn: tape.softmax_rows(x_qnn)?,
        m_fcl: tape.softmax_rows(x_fcl)?,
    })
}

/// L = CE(M) + (CE(M_QNN) + CE(M_FCL)) / 2, each term masked to the
/// labeled training pixels. Returns (total, main, aux) tape ids.
pub fn qec_loss(
    tape: &mut Tape,
    maps: &QecMaps,
    targets: &Tensor,
    mask: &[usize],
) -> Result<(VarId, VarId, VarId)> {
    let main = tape.cross_entropy_masked(maps.m, targets, mask)?;
    let ce_qnn = tape.cross_entropy_masked(maps.m_qnn, targets, mask)?;
    let ce_fcl = tape.cross_entropy_masked(maps.m_fcl, targets, mask)?;
    let aux = tape.add(ce_qnn, ce_fcl)?;
    let half_aux = tape.scale(aux, 0.5)?;
    let total = tape.add(main, half_aux)?;
    Ok((total, main, aux))
}

/// One-hot [n, 2] target rows from a binary label map (1 = changed).
pub fn one_hot_targets(labels: &[u8]) -> Tensor {
    let n = labels.len();
    let mut t = Tensor::zeros(&[n, 2]);
    for (i, &l) in labels.iter().enumerate() {
        t.set(i, usize::from(l != 0), 1.0);
    }
    t
}
