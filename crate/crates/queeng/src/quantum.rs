//! Dense statevector simulator for the pixel-level quantum circuits.
//!
//! Circuit layout: RY angle embedding of a q-length feature vector, the
//! trainable RY–XX–RX–XX–RY block repeated `reps` times, a sliding window of
//! Toffoli entanglement gates, and Pauli-Z expectation readout on every other
//! wire. Gradients are exact, computed by adjoint statevector differentiation;
//! a parameter-shift implementation is kept alongside as an independent route.
//!
//! Wire 0 is the most significant bit of the amplitude index, so `|1000>` on
//! four qubits is amplitude index 8.

use crate::error::{Error, Result};
use num_complex::Complex64;
use std::sync::atomic::{AtomicU64, Ordering};

/// Amplitude-touch counter for the complexity-model test. Each gate or
/// measurement application adds the number of amplitudes it visits.
static AMP_OPS: AtomicU64 = AtomicU64::new(0);

pub fn amp_ops() -> u64 {
    AMP_OPS.load(Ordering::Relaxed)
}

pub fn reset_amp_ops() {
    AMP_OPS.store(0, Ordering::Relaxed);
}

fn count_amp_ops(n: usize) {
    AMP_OPS.fetch_add(n as u64, Ordering::Relaxed);
}

/// Where a gate angle comes from when executing a parameterized program.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AngleSrc {
    Fixed(f64),
    /// Index into the trainable angle vector.
    Param(usize),
    /// Index into the per-instance embedded feature vector.
    Feature(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOp {
    Ry { wire: usize, angle: AngleSrc },
    Rx { wire: usize, angle: AngleSrc },
    Xx { a: usize, b: usize, angle: AngleSrc },
    /// Fires when `control` is 1 and `anti_control` is 0.
    Toffoli { control: usize, anti_control: usize, target: usize },
    Not { wire: usize },
}

impl GateOp {
    fn angle_src(&self) -> Option<AngleSrc> {
        match *self {
            GateOp::Ry { angle, .. } | GateOp::Rx { angle, .. } | GateOp::Xx { angle, .. } => {
                Some(angle)
            }
            _ => None,
        }
    }

    fn wires(&self) -> Vec<usize> {
        match *self {
            GateOp::Ry { wire, .. } | GateOp::Rx { wire, .. } | GateOp::Not { wire } => vec![wire],
            GateOp::Xx { a, b, .. } => vec![a, b],
            GateOp::Toffoli { control, anti_control, target } => {
                vec![control, anti_control, target]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuantumState {
    q: usize,
    amps: Vec<Complex64>,
}

impl QuantumState {
    /// |0...0> on `q` qubits.
    pub fn zero(q: usize) -> Self {
        assert!(q >= 1);
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << q];
        amps[0] = Complex64::new(1.0, 0.0);
        QuantumState { q, amps }
    }

    /// Basis state from wire values, wire 0 first.
    pub fn basis(q: usize, bits: &[u8]) -> Self {
        assert_eq!(bits.len(), q);
        let mut idx = 0usize;
        for (w, &b) in bits.iter().enumerate() {
            if b != 0 {
                idx |= 1 << (q - 1 - w);
            }
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << q];
        amps[idx] = Complex64::new(1.0, 0.0);
        QuantumState { q, amps }
    }

    pub fn qubits(&self) -> usize {
        self.q
    }

    pub fn amps(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    fn bit_mask(&self, wire: usize) -> usize {
        1 << (self.q - 1 - wire)
    }

    fn check_wires(&self, gate: &GateOp) -> Result<()> {
        let ws = gate.wires();
        for &w in &ws {
            if w >= self.q {
                return Err(Error::InvalidWire { wire: w, qubits: self.q });
            }
        }
        for i in 0..ws.len() {
            for j in i + 1..ws.len() {
                if ws[i] == ws[j] {
                    return Err(Error::InvalidWire { wire: ws[i], qubits: self.q });
                }
            }
        }
        Ok(())
    }

    /// Apply a 2x2 unitary [[u00,u01],[u10,u11]] on one wire.
    fn apply_1q(&mut self, wire: usize, u: [Complex64; 4]) {
        let mask = self.bit_mask(wire);
        let n = self.amps.len();
        count_amp_ops(n);
        let mut i = 0usize;
        while i < n {
            if i & mask == 0 {
                let j = i | mask;
                let a = self.amps[i];
                let b = self.amps[j];
                self.amps[i] = u[0] * a + u[1] * b;
                self.amps[j] = u[2] * a + u[3] * b;
            }
            i += 1;
        }
    }

    /// Ising XX(theta): cos(t/2) I - i sin(t/2) X(a)X(b), possibly scaled.
    fn apply_xx(&mut self, a: usize, b: usize, theta: f64, scale: f64) {
        let d = Complex64::new(scale * (theta / 2.0).cos(), 0.0);
        let g = Complex64::new(0.0, -scale * (theta / 2.0).sin());
        let ma = self.bit_mask(a);
        let mb = self.bit_mask(b);
        let flip = ma | mb;
        let n = self.amps.len();
        count_amp_ops(n);
        for i in 0..n {
            let j = i ^ flip;
            if i < j {
                let x = self.amps[i];
                let y = self.amps[j];
                self.amps[i] = d * x + g * y;
                self.amps[j] = d * y + g * x;
            }
        }
    }

    fn apply_toffoli(&mut self, control: usize, anti_control: usize, target: usize) {
        let mc = self.bit_mask(control);
        let ma = self.bit_mask(anti_control);
        let mt = self.bit_mask(target);
        let n = self.amps.len();
        count_amp_ops(n);
        for i in 0..n {
            if i & mc != 0 && i & ma == 0 && i & mt == 0 {
                self.amps.swap(i, i | mt);
            }
        }
    }

    /// Apply one gate, resolving its angle against (features, params).
    /// `mode` selects the plain unitary, its inverse, or its angle derivative.
    fn apply_resolved(
        &mut self,
        gate: &GateOp,
        features: &[f64],
        params: &[f64],
        mode: ApplyMode,
    ) {
        let angle = gate.angle_src().map(|src| match src {
            AngleSrc::Fixed(t) => t,
            AngleSrc::Param(k) => params[k],
            AngleSrc::Feature(k) => features[k],
        });
        // d/dθ exp(-iθG/2) = (1/2) U(θ+π) for involutory G; inverse is U(-θ).
        let (theta, scale) = match mode {
            ApplyMode::Forward => (angle.unwrap_or(0.0), 1.0),
            ApplyMode::Inverse => (-angle.unwrap_or(0.0), 1.0),
            ApplyMode::Derivative => (angle.unwrap_or(0.0) + std::f64::consts::PI, 0.5),
        };
        match *gate {
            GateOp::Ry { wire, .. } => {
                let d = scale * (theta / 2.0).cos();
                let g = scale * (theta / 2.0).sin();
                self.apply_1q(
                    wire,
                    [
                        Complex64::new(d, 0.0),
                        Complex64::new(-g, 0.0),
                        Complex64::new(g, 0.0),
                        Complex64::new(d, 0.0),
                    ],
                );
            }
            GateOp::Rx { wire, .. } => {
                let d = scale * (theta / 2.0).cos();
                let g = scale * (theta / 2.0).sin();
                self.apply_1q(
                    wire,
                    [
                        Complex64::new(d, 0.0),
                        Complex64::new(0.0, -g),
                        Complex64::new(0.0, -g),
                        Complex64::new(d, 0.0),
                    ],
                );
            }
            GateOp::Xx { a, b, .. } => self.apply_xx(a, b, theta, scale),
            GateOp::Toffoli { control, anti_control, target } => {
                debug_assert!(mode != ApplyMode::Derivative);
                self.apply_toffoli(control, anti_control, target);
            }
            GateOp::Not { wire } => {
                debug_assert!(mode != ApplyMode::Derivative);
                self.apply_1q(
                    wire,
                    [
                        Complex64::new(0.0, 0.0),
                        Complex64::new(1.0, 0.0),
                        Complex64::new(1.0, 0.0),
                        Complex64::new(0.0, 0.0),
                    ],
                );
            }
        }
    }

    /// Apply a gate whose angle (if any) is already fixed.
    pub fn apply_gate(&mut self, gate: &GateOp) -> Result<()> {
        self.check_wires(gate)?;
        self.apply_resolved(gate, &[], &[], ApplyMode::Forward);
        Ok(())
    }

    /// Pauli-Z expectation on one wire, in [-1, 1].
    pub fn expect_z(&self, wire: usize) -> f64 {
        let mask = self.bit_mask(wire);
        count_amp_ops(self.amps.len());
        self.amps
            .iter()
            .enumerate()
            .map(|(i, a)| if i & mask == 0 { a.norm_sqr() } else { -a.norm_sqr() })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ApplyMode {
    Forward,
    Inverse,
    Derivative,
}

/// XX coupling topology inside the trainable block.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Topology {
    Chain,
    Ring,
}

/// Static circuit description: qubit count, trainable-block repetitions and
/// coupling topology. Gate programs are built once and reused per pixel.
#[derive(Clone, Debug)]
pub struct CircuitSpec {
    pub q: usize,
    pub reps: usize,
    pub topology: Topology,
}

impl CircuitSpec {
    pub fn new(q: usize, reps: usize, topology: Topology) -> Self {
        assert!(q >= 1 && reps >= 1);
        CircuitSpec { q, reps, topology }
    }

    fn couplings(&self) -> Vec<(usize, usize)> {
        if self.q < 2 {
            return vec![];
        }
        let mut c: Vec<(usize, usize)> = (0..self.q - 1).map(|i| (i, i + 1)).collect();
        if self.topology == Topology::Ring && self.q > 2 {
            c.push((self.q - 1, 0));
        }
        c
    }

    /// Trainable angle count: per repetition three single-wire stages and two
    /// coupling stages.
    pub fn param_count(&self) -> usize {
        self.reps * (3 * self.q + 2 * self.couplings().len())
    }

    /// Number of Pauli-Z readouts (wires 0, 2, ...).
    pub fn measure_count(&self) -> usize {
        self.q.div_ceil(2)
    }

    pub fn measure_wires(&self) -> Vec<usize> {
        (0..self.q).step_by(2).collect()
    }

    /// The trainable RY–XX–RX–XX–RY block, repeated, as a gate program.
    pub fn fe_block_program(&self) -> Vec<GateOp> {
        let mut gates = Vec::new();
        let couplings = self.couplings();
        let mut p = 0usize;
        for _ in 0..self.reps {
            for w in 0..self.q {
                gates.push(GateOp::Ry { wire: w, angle: AngleSrc::Param(p) });
                p += 1;
            }
            for &(a, b) in &couplings {
                gates.push(GateOp::Xx { a, b, angle: AngleSrc::Param(p) });
                p += 1;
            }
            for w in 0..self.q {
                gates.push(GateOp::Rx { wire: w, angle: AngleSrc::Param(p) });
                p += 1;
            }
            for &(a, b) in &couplings {
                gates.push(GateOp::Xx { a, b, angle: AngleSrc::Param(p) });
                p += 1;
            }
            for w in 0..self.q {
                gates.push(GateOp::Ry { wire: w, angle: AngleSrc::Param(p) });
                p += 1;
            }
        }
        debug_assert_eq!(p, self.param_count());
        gates
    }

    /// Toffoli entanglement stage: consecutive (control, anti-control, target)
    /// triples. Skipped when q < 3.
    pub fn entangle_program(&self) -> Vec<GateOp> {
        if self.q < 3 {
            return vec![];
        }
        (0..=self.q - 3)
            .map(|i| GateOp::Toffoli { control: i, anti_control: i + 1, target: i + 2 })
            .collect()
    }

    /// Full program: angle embedding, trainable block, entanglement.
    pub fn program(&self) -> Vec<GateOp> {
        let mut gates: Vec<GateOp> = (0..self.q)
            .map(|w| GateOp::Ry { wire: w, angle: AngleSrc::Feature(w) })
            .collect();
        gates.extend(self.fe_block_program());
        gates.extend(self.entangle_program());
        gates
    }
}

/// Encode a feature vector as RY rotation angles on |0...0>.
pub fn angle_embed(features: &[f64]) -> QuantumState {
    let mut state = QuantumState::zero(features.len());
    for (w, &x) in features.iter().enumerate() {
        state.apply_resolved(
            &GateOp::Ry { wire: w, angle: AngleSrc::Fixed(x) },
            &[],
            &[],
            ApplyMode::Forward,
        );
    }
    state
}

/// Apply the trainable block to an existing state.
pub fn fe_block(state: &mut QuantumState, spec: &CircuitSpec, params: &[f64]) {
    assert_eq!(params.len(), spec.param_count());
    for gate in &spec.fe_block_program() {
        state.apply_resolved(gate, &[], params, ApplyMode::Forward);
    }
}

/// Toffoli entanglement stage, then Z readout on wires 0, 2, ...
pub fn entangle_and_measure(state: &mut QuantumState, spec: &CircuitSpec) -> Vec<f64> {
    for gate in &spec.entangle_program() {
        state.apply_resolved(gate, &[], &[], ApplyMode::Forward);
    }
    spec.measure_wires().iter().map(|&w| state.expect_z(w)).collect()
}

/// Full circuit: embedding, trainable block, entanglement, readout.
pub fn circuit_forward(spec: &CircuitSpec, features: &[f64], params: &[f64]) -> Vec<f64> {
    assert_eq!(features.len(), spec.q);
    assert_eq!(params.len(), spec.param_count());
    let mut state = QuantumState::zero(spec.q);
    for gate in &spec.program() {
        state.apply_resolved(gate, features, params, ApplyMode::Forward);
    }
    spec.measure_wires().iter().map(|&w| state.expect_z(w)).collect()
}

/// Forward pass plus the upstream-weighted gradient of the readouts:
/// given weights w_o for each readout, returns d(sum_o w_o <Z_o>)/d(features)
/// and /d(params) via one adjoint sweep.
pub fn circuit_backward(
    spec: &CircuitSpec,
    features: &[f64],
    params: &[f64],
    weights: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let program = spec.program();
    let mut phi = QuantumState::zero(spec.q);
    for gate in &program {
        phi.apply_resolved(gate, features, params, ApplyMode::Forward);
    }
    let wires = spec.measure_wires();
    let outputs: Vec<f64> = wires.iter().map(|&w| phi.expect_z(w)).collect();

    // b = O phi for the weighted diagonal observable O = sum_o w_o Z_{wire_o}.
    let mut b = phi.clone();
    for (i, amp) in b.amps.iter_mut().enumerate() {
        let mut z = 0.0;
        for (&w, &wt) in wires.iter().zip(weights) {
            let mask = 1 << (spec.q - 1 - w);
            z += if i & mask == 0 { wt } else { -wt };
        }
        *amp *= z;
    }

    let mut dfeat = vec![0.0; spec.q];
    let mut dparams = vec![0.0; params.len()];
    let mut psi = phi;
    for gate in program.iter().rev() {
        psi.apply_resolved(gate, features, params, ApplyMode::Inverse);
        if let Some(src) = gate.angle_src() {
            let mut d = psi.clone();
            d.apply_resolved(gate, features, params, ApplyMode::Derivative);
            let inner: Complex64 =
                b.amps.iter().zip(&d.amps).map(|(bi, di)| bi.conj() * di).sum();
            let g = 2.0 * inner.re;
            match src {
                AngleSrc::Param(k) => dparams[k] += g,
                AngleSrc::Feature(k) => dfeat[k] += g,
                AngleSrc::Fixed(_) => {}
            }
        }
        b.apply_resolved(gate, features, params, ApplyMode::Inverse);
    }
    (outputs, dfeat, dparams)
}

/// Full Jacobians of every readout w.r.t. features and params, one adjoint
/// sweep per readout.
pub fn circuit_gradients(
    spec: &CircuitSpec,
    features: &[f64],
    params: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let lambda = spec.measure_count();
    let mut jac_feat = Vec::with_capacity(lambda);
    let mut jac_params = Vec::with_capacity(lambda);
    for o in 0..lambda {
        let mut w = vec![0.0; lambda];
        w[o] = 1.0;
        let (_, df, dp) = circuit_backward(spec, features, params, &w);
        jac_feat.push(df);
        jac_params.push(dp);
    }
    (jac_feat, jac_params)
}

/// Parameter-shift Jacobians (shift ±π/2). Independent of the adjoint route;
/// kept as the second leg of the gradient cross-check.
pub fn circuit_gradients_shift(
    spec: &CircuitSpec,
    features: &[f64],
    params: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let lambda = spec.measure_count();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let shift_eval = |f: &[f64], p: &[f64]| circuit_forward(spec, f, p);
    let mut jac_feat = vec![vec![0.0; spec.q]; lambda];
    let mut jac_params = vec![vec![0.0; params.len()]; lambda];
    for k in 0..spec.q {
        let mut fp = features.to_vec();
        let mut fm = features.to_vec();
        fp[k] += half_pi;
        fm[k] -= half_pi;
        let yp = shift_eval(&fp, params);
        let ym = shift_eval(&fm, params);
        for o in 0..lambda {
            jac_feat[o][k] = 0.5 * (yp[o] - ym[o]);
        }
    }
    for k in 0..params.len() {
        let mut pp = params.to_vec();
        let mut pm = params.to_vec();
        pp[k] += half_pi;
        pm[k] -= half_pi;
        let yp = shift_eval(features, &pp);
        let ym = shift_eval(features, &pm);
        for o in 0..lambda {
            jac_params[o][k] = 0.5 * (yp[o] - ym[o]);
        }
    }
    (jac_feat, jac_params)
}

/// Dense 2^q x 2^q matrix of the trainable block plus entanglement stage
/// (embedding excluded: its angles are data, not parameters), column by column.
pub fn compose_unitary(spec: &CircuitSpec, params: &[f64]) -> Vec<Vec<Complex64>> {
    let dim = 1 << spec.q;
    let mut cols = Vec::with_capacity(dim);
    let gates: Vec<GateOp> =
        spec.fe_block_program().into_iter().chain(spec.entangle_program()).collect();
    for c in 0..dim {
        let mut state = QuantumState::zero(spec.q);
        state.amps.fill(Complex64::new(0.0, 0.0));
        state.amps[c] = Complex64::new(1.0, 0.0);
        for gate in &gates {
            state.apply_resolved(gate, &[], params, ApplyMode::Forward);
        }
        cols.push(state.amps);
    }
    // Transpose columns into row-major form.
    (0..dim).map(|r| (0..dim).map(|c| cols[c][r]).collect()).collect()
}

/// Fidelity |<target|psi>|^2 of the FE-block output against a target state,
/// with its gradient w.r.t. the block parameters (adjoint sweep with the
/// projector observable).
pub fn fe_state_fidelity_grad(
    spec: &CircuitSpec,
    params: &[f64],
    target: &[Complex64],
) -> (f64, Vec<f64>) {
    let program = spec.fe_block_program();
    let mut phi = QuantumState::zero(spec.q);
    for gate in &program {
        phi.apply_resolved(gate, &[], params, ApplyMode::Forward);
    }
    let overlap: Complex64 =
        target.iter().zip(&phi.amps).map(|(t, a)| t.conj() * a).sum();
    let fidelity = overlap.norm_sqr();

    // O = |t><t|, so b = O phi = <t|phi> |t>.
    let mut b = phi.clone();
    for (bi, t) in b.amps.iter_mut().zip(target) {
        *bi = overlap * t;
    }
    let mut psi = phi;
    let mut grad = vec![0.0; params.len()];
    for gate in program.iter().rev() {
        psi.apply_resolved(gate, &[], params, ApplyMode::Inverse);
        if let Some(AngleSrc::Param(k)) = gate.angle_src() {
            let mut d = psi.clone();
            d.apply_resolved(gate, &[], params, ApplyMode::Derivative);
            let inner: Complex64 =
                b.amps.iter().zip(&d.amps).map(|(bi, di)| bi.conj() * di).sum();
            grad[k] += 2.0 * inner.re;
        }
        b.apply_resolved(gate, &[], params, ApplyMode::Inverse);
    }
    (fidelity, grad)
}
