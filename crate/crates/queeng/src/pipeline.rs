//! Top-level model: shared 1x1 dimension-reduction conv, differential
//! features into the GFL and QFL branches, SAM-weighted fusion, and the
//! quantum-enhanced classifier. Owns the full parameter container.

use crate::autodiff::{BnState, Tape, VarId};
use crate::error::{Error, Result};
use crate::fusion::{fuse, weighted_sum, FfVars};
use crate::gfl::{gfl_forward, GatHeadVars};
use crate::preprocess::SuperpixelGraph;
use crate::qec::{qec_forward, QecMaps, QecVars};
use crate::qfl::{qfl_forward, QflVars};
use crate::quantum::{CircuitSpec, Topology};
use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

pub const SPINE: usize = 64; // channel width kept through the network
pub const GAT_HEAD_DIM: usize = SPINE / 2;
pub const QFL_GROUPS: usize = 4;
pub const FUSE_IN: usize = 3 * SPINE + 1; // X_fea || X~1 || X~2 || Z

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub reps: usize,
    pub use_qfl: bool,
    pub use_qec: bool,
}

impl ModelConfig {
    pub fn circuit(&self) -> CircuitSpec {
        // Ring coupling: the chain variant caps preparable-state fidelity
        // around 0.92 at low depth, ring restores full expressibility.
        CircuitSpec::new(4, self.reps, Topology::Ring)
    }
}

/// Applies a callback to every trainable tensor field, in declaration
/// order. This single list drives initialization, tape registration,
/// optimizer state, and checkpoint layout.
macro_rules! for_each_param {
    ($cb:ident) => {
        $cb!(dr_k);
        $cb!(dr_b);
        $cb!(gfl1a_t);
        $cb!(gfl1a_al);
        $cb!(gfl1a_ar);
        $cb!(gfl1b_t);
        $cb!(gfl1b_al);
        $cb!(gfl1b_ar);
        $cb!(gfl2_t);
        $cb!(gfl2_al);
        $cb!(gfl2_ar);
        $cb!(qfl_in_k);
        $cb!(qfl_in_b);
        $cb!(qfl_q);
        $cb!(qfl_out_k);
        $cb!(qfl_out_b);
        $cb!(ff1_k);
        $cb!(ff1_b);
        $cb!(ff1_prelu);
        $cb!(ff1_gamma);
        $cb!(ff1_beta);
        $cb!(ff2_k);
        $cb!(ff2_b);
        $cb!(ff2_prelu);
        $cb!(ff2_gamma);
        $cb!(ff2_beta);
        $cb!(qec_f1_w);
        $cb!(qec_f1_b);
        $cb!(qec_q);
        $cb!(qec_f2_w);
        $cb!(qec_f2_b);
        $cb!(qec_w);
        $cb!(qec_f3_w);
        $cb!(qec_f3_b);
    };
}

#[derive(Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub dr_k: Tensor,
    pub dr_b: Tensor,
    pub gfl1a_t: Tensor,
    pub gfl1a_al: Tensor,
    pub gfl1a_ar: Tensor,
    pub gfl1b_t: Tensor,
    pub gfl1b_al: Tensor,
    pub gfl1b_ar: Tensor,
    pub gfl2_t: Tensor,
    pub gfl2_al: Tensor,
    pub gfl2_ar: Tensor,
    pub qfl_in_k: Tensor,
    pub qfl_in_b: Tensor,
    pub qfl_q: Tensor,
    pub qfl_out_k: Tensor,
    pub qfl_out_b: Tensor,
    pub ff1_k: Tensor,
    pub ff1_b: Tensor,
    pub ff1_prelu: Tensor,
    pub ff1_gamma: Tensor,
    pub ff1_beta: Tensor,
    pub ff2_k: Tensor,
    pub ff2_b: Tensor,
    pub ff2_prelu: Tensor,
    pub ff2_gamma: Tensor,
    pub ff2_beta: Tensor,
    pub qec_f1_w: Tensor,
    pub qec_f1_b: Tensor,
    pub qec_q: Tensor,
    pub qec_f2_w: Tensor,
    pub qec_f2_b: Tensor,
    pub qec_w: Tensor,
    pub qec_f3_w: Tensor,
    pub qec_f3_b: Tensor,
    pub bn1: BnState,
    pub bn2: BnState,
}

/// First fusion kernel: the taps reading the per-date maps X~1/X~2 are tied
/// antisymmetrically (X~2 rows = -(X~1 rows)), so the layer reads exactly
/// X~1 - X~2 from those channels — the same change representation the rest
/// of the network consumes as X_diff. A change map must not depend on the
/// absolute spectrum of either date in isolation: with a handful of labeled
/// pixels the untied per-date channels act as pure memorization features,
/// scattering false positives across the unchanged background. The tie is
/// enforced at init here and re-projected after each optimizer step.
fn ff1_kernel_init(cout: usize, rng: &mut impl Rng) -> Tensor {
    let mut k = uniform_fan_in(&[9 * FUSE_IN, cout], 9 * FUSE_IN, rng);
    center_tap_project(&mut k, FUSE_IN);
    tie_date_taps(&mut k);
    k
}

/// Zero the off-center taps of a 3x3 conv kernel, making the layer a
/// pointwise map. Change decisions should rest on a pixel's own evidence;
/// off-center taps smear change features across blob borders and produce a
/// halo of false positives around every change region, while the sparse
/// labels almost never include a border pixel that would correct it. The
/// first fusion conv starts pointwise but may learn spatial taps; the second
/// is re-projected after every step so the stack's receptive field stays at
/// one ring (3x3) instead of two (5x5).
pub fn center_tap_project(k: &mut Tensor, cin: usize) {
    let cout = k.shape()[1];
    for o in 0..9 {
        if o == 4 {
            continue;
        }
        for ci in 0..cin {
            for co in 0..cout {
                k.set(o * cin + ci, co, 0.0);
            }
        }
    }
}

/// Project the ff1 kernel onto the antisymmetric date-tap subspace:
/// rows reading X~2 become the negation of the rows reading X~1, the
/// nearest point (in Frobenius norm) that makes the layer a function of
/// X~1 - X~2 on those channels.
pub fn tie_date_taps(k: &mut Tensor) {
    let cout = k.shape()[1];
    for o in 0..9 {
        for ci in 0..SPINE {
            let r1 = o * FUSE_IN + SPINE + ci;
            let r2 = o * FUSE_IN + 2 * SPINE + ci;
            for co in 0..cout {
                let a = 0.5 * (k.at(r1, co) - k.at(r2, co));
                k.set(r1, co, a);
                k.set(r2, co, -a);
            }
        }
    }
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

fn uniform_angles(n: usize, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new(0.0, 2.0 * std::f64::consts::PI);
    Tensor::new(vec![n], (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<ModelParams> {
        let c = cfg.bands;
        let hw = cfg.height * cfg.width;
        let qp = cfg.circuit().param_count();
        let s = SPINE;
        let hd = GAT_HEAD_DIM;
        let inner = QFL_GROUPS * 4;
        let p = ModelParams {
            cfg,
            dr_k: uniform_fan_in(&[c, s], c, rng),
            dr_b: uniform_fan_in(&[s], c, rng),
            gfl1a_t: uniform_fan_in(&[s, hd], s, rng),
            gfl1a_al: uniform_fan_in(&[hd, 1], 2 * hd, rng),
            gfl1a_ar: uniform_fan_in(&[hd, 1], 2 * hd, rng),
            gfl1b_t: uniform_fan_in(&[s, hd], s, rng),
            gfl1b_al: uniform_fan_in(&[hd, 1], 2 * hd, rng),
            gfl1b_ar: uniform_fan_in(&[hd, 1], 2 * hd, rng),
            gfl2_t: uniform_fan_in(&[s, s], s, rng),
            gfl2_al: uniform_fan_in(&[s, 1], 2 * s, rng),
            gfl2_ar: uniform_fan_in(&[s, 1], 2 * s, rng),
            qfl_in_k: uniform_fan_in(&[s, inner], s, rng),
            qfl_in_b: uniform_fan_in(&[inner], s, rng),
            qfl_q: uniform_angles(qp, rng),
            qfl_out_k: uniform_fan_in(&[QFL_GROUPS * 2, s], QFL_GROUPS * 2, rng),
            qfl_out_b: uniform_fan_in(&[s], QFL_GROUPS * 2, rng),
            ff1_k: ff1_kernel_init(s, rng),
            ff1_b: uniform_fan_in(&[s], 9 * FUSE_IN, rng),
            ff1_prelu: Tensor::scalar(0.25),
            ff1_gamma: Tensor::filled(&[s], 1.0),
            ff1_beta: Tensor::zeros(&[s]),
            ff2_k: {
                let mut k = uniform_fan_in(&[9 * s, s], 9 * s, rng);
                center_tap_project(&mut k, s);
                k
            },
            ff2_b: uniform_fan_in(&[s], 9 * s, rng),
            ff2_prelu: Tensor::scalar(0.25),
            ff2_gamma: Tensor::filled(&[s], 1.0),
            ff2_beta: Tensor::zeros(&[s]),
            qec_f1_w: uniform_fan_in(&[s, 4], s, rng),
            qec_f1_b: uniform_fan_in(&[4], s, rng),
            qec_q: uniform_angles(qp, rng),
            qec_f2_w: uniform_fan_in(&[s, 2], s, rng),
            qec_f2_b: uniform_fan_in(&[2], s, rng),
            qec_w: Tensor::zeros(&[hw, 4]),
            qec_f3_w: uniform_fan_in(&[4, 2], 4, rng),
            qec_f3_b: uniform_fan_in(&[2], 4, rng),
            bn1: BnState::new(s),
            bn2: BnState::new(s),
        };
        p.validate()?;
        Ok(p)
    }

    /// Channel-chain consistency check; fails before any data is processed.
    pub fn validate(&self) -> Result<()> {
        let c = self.cfg.bands;
        let hw = self.cfg.height * self.cfg.width;
        let qp = self.cfg.circuit().param_count();
        let s = SPINE;
        let hd = GAT_HEAD_DIM;
        let checks: &[(&str, &Tensor, Vec<usize>)] = &[
            ("dr_k", &self.dr_k, vec![c, s]),
            ("dr_b", &self.dr_b, vec![s]),
            ("gfl1a_t", &self.gfl1a_t, vec![s, hd]),
            ("gfl1a_al", &self.gfl1a_al, vec![hd, 1]),
            ("gfl1a_ar", &self.gfl1a_ar, vec![hd, 1]),
            ("gfl1b_t", &self.gfl1b_t, vec![s, hd]),
            ("gfl1b_al", &self.gfl1b_al, vec![hd, 1]),
            ("gfl1b_ar", &self.gfl1b_ar, vec![hd, 1]),
            ("gfl2_t", &self.gfl2_t, vec![s, s]),
            ("gfl2_al", &self.gfl2_al, vec![s, 1]),
            ("gfl2_ar", &self.gfl2_ar, vec![s, 1]),
            ("qfl_in_k", &self.qfl_in_k, vec![s, QFL_GROUPS * 4]),
            ("qfl_in_b", &self.qfl_in_b, vec![QFL_GROUPS * 4]),
            ("qfl_q", &self.qfl_q, vec![qp]),
            ("qfl_out_k", &self.qfl_out_k, vec![QFL_GROUPS * 2, s]),
            ("qfl_out_b", &self.qfl_out_b, vec![s]),
            ("ff1_k", &self.ff1_k, vec![9 * FUSE_IN, s]),
            ("ff1_b", &self.ff1_b, vec![s]),
            ("ff1_prelu", &self.ff1_prelu, vec![1, 1]),
            ("ff1_gamma", &self.ff1_gamma, vec![s]),
            ("ff1_beta", &self.ff1_beta, vec![s]),
            ("ff2_k", &self.ff2_k, vec![9 * s, s]),
            ("ff2_b", &self.ff2_b, vec![s]),
            ("ff2_prelu", &self.ff2_prelu, vec![1, 1]),
            ("ff2_gamma", &self.ff2_gamma, vec![s]),
            ("ff2_beta", &self.ff2_beta, vec![s]),
            ("qec_f1_w", &self.qec_f1_w, vec![s, 4]),
            ("qec_f1_b", &self.qec_f1_b, vec![4]),
            ("qec_q", &self.qec_q, vec![qp]),
            ("qec_f2_w", &self.qec_f2_w, vec![s, 2]),
            ("qec_f2_b", &self.qec_f2_b, vec![2]),
            ("qec_w", &self.qec_w, vec![hw, 4]),
            ("qec_f3_w", &self.qec_f3_w, vec![4, 2]),
            ("qec_f3_b", &self.qec_f3_b, vec![2]),
        ];
        for (name, t, want) in checks {
            if t.shape() != &want[..] {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        if self.bn1.mean.len() != s || self.bn2.mean.len() != s {
            return Err(Error::Config("batch-norm state width mismatch".into()));
        }
        Ok(())
    }

    pub fn field_names() -> Vec<&'static str> {
        let mut v = Vec::new();
        macro_rules! cb {
            ($n:ident) => {
                v.push(stringify!($n));
            };
        }
        for_each_param!(cb);
        v
    }

    pub fn fields(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        macro_rules! cb {
            ($n:ident) => {
                v.push(&self.$n);
            };
        }
        for_each_param!(cb);
        v
    }

    pub fn fields_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        macro_rules! cb {
            ($n:ident) => {
                v.push(&mut self.$n);
            };
        }
        for_each_param!(cb);
        v
    }
}

/// Tape ids of all registered parameters, addressed by field name.
pub struct ParamVars {
    names: Vec<&'static str>,
    ids: Vec<VarId>,
}

impl ParamVars {
    pub fn register(params: &ModelParams, tape: &mut Tape) -> Result<ParamVars> {
        let names = ModelParams::field_names();
        let mut ids = Vec::with_capacity(names.len());
        for t in params.fields() {
            ids.push(tape.leaf(t.clone(), true)?);
        }
        Ok(ParamVars { names, ids })
    }

    pub fn id(&self, name: &str) -> VarId {
        let i = self
            .names
            .iter()
            .position(|&n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

pub struct ForwardMaps {
    pub m: VarId,
    pub m_qnn: Option<VarId>,
    pub m_fcl: VarId,
}

/// Full forward pass. Inputs are [H*W, C] cubes and the [H*W, 1] SAM map;
/// the superpixel graph must come from the preprocessing of the same pair.
/// Registers every parameter on the tape and returns their handles.
/// Standardize each band to zero mean / unit variance using statistics pooled
/// over both dates, so identical inputs stay identical after scaling.
pub fn standardize_pair(x1: &Tensor, x2: &Tensor) -> (Tensor, Tensor) {
    let (n, c) = (x1.rows(), x1.cols());
    let mut out1 = x1.clone();
    let mut out2 = x2.clone();
    for ch in 0..c {
        let mut mean = 0.0;
        for p in 0..n {
            mean += x1.at(p, ch) + x2.at(p, ch);
        }
        mean /= (2 * n) as f64;
        let mut var = 0.0;
        for p in 0..n {
            var += (x1.at(p, ch) - mean).powi(2) + (x2.at(p, ch) - mean).powi(2);
        }
        var /= (2 * n) as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for p in 0..n {
            out1.set(p, ch, (x1.at(p, ch) - mean) * inv);
            out2.set(p, ch, (x2.at(p, ch) - mean) * inv);
        }
    }
    (out1, out2)
}

pub fn forward(
    tape: &mut Tape,
    params: &mut ModelParams,
    x1: &Tensor,
    x2: &Tensor,
    z: &Tensor,
    graph: &SuperpixelGraph,
    training: bool,
) -> Result<(ForwardMaps, ParamVars)> {
    params.validate()?;
    let cfg = params.cfg.clone();
    let (h, w) = (cfg.height, cfg.width);
    if x1.shape() != [h * w, cfg.bands] || x2.shape() != x1.shape() || z.shape() != [h * w, 1] {
        return Err(Error::Dimension {
            op: "pipeline",
            detail: format!("inputs {:?}/{:?}/{:?}", x1.shape(), x2.shape(), z.shape()),
        });
    }
    let vars = ParamVars::register(params, tape)?;
    let v = |n: &str| vars.id(n);

    // Joint per-band standardization of the two dates: raw reflectances sit
    // on a large common offset with small variance, which drowns the
    // difference signal downstream. The same statistics are applied to both
    // dates so X_diff semantics are unchanged up to an affine map.
    let (x1s, x2s) = standardize_pair(x1, x2);
    let x1c = tape.constant(x1s)?;
    let x2c = tape.constant(x2s)?;
    let zc = tape.constant(z.clone())?;

    // Shared dimension-reduction conv and the siamese difference.
    let x1t = tape.conv1x1(x1c, v("dr_k"), v("dr_b"))?;
    let x2t = tape.conv1x1(x2c, v("dr_k"), v("dr_b"))?;
    let xdiff = tape.sub(x1t, x2t)?;

    let heads = [
        GatHeadVars { t: v("gfl1a_t"), a_l: v("gfl1a_al"), a_r: v("gfl1a_ar") },
        GatHeadVars { t: v("gfl1b_t"), a_l: v("gfl1b_al"), a_r: v("gfl1b_ar") },
    ];
    let layer2 = GatHeadVars { t: v("gfl2_t"), a_l: v("gfl2_al"), a_r: v("gfl2_ar") };
    let gfl_out = gfl_forward(tape, xdiff, graph, &heads, &layer2)?;

    let qfl_out = if cfg.use_qfl {
        let qv = QflVars {
            conv_in_k: v("qfl_in_k"),
            conv_in_b: v("qfl_in_b"),
            quantum: v("qfl_q"),
            conv_out_k: v("qfl_out_k"),
            conv_out_b: v("qfl_out_b"),
        };
        Some(qfl_forward(tape, xdiff, &qv, &cfg.circuit())?)
    } else {
        None
    };

    let x_fea = weighted_sum(tape, gfl_out, qfl_out, zc)?;

    let ff1 = FfVars {
        kernel: v("ff1_k"),
        bias: v("ff1_b"),
        prelu: v("ff1_prelu"),
        gamma: v("ff1_gamma"),
        beta: v("ff1_beta"),
    };
    let ff2 = FfVars {
        kernel: v("ff2_k"),
        bias: v("ff2_b"),
        prelu: v("ff2_prelu"),
        gamma: v("ff2_gamma"),
        beta: v("ff2_beta"),
    };
    let x_fuse = fuse(
        tape,
        x_fea,
        x1t,
        x2t,
        zc,
        &ff1,
        &ff2,
        &mut params.bn1,
        &mut params.bn2,
        training,
        h,
        w,
    )?;

    let maps = if cfg.use_qec {
        let qv = QecVars {
            fcl1_w: v("qec_f1_w"),
            fcl1_b: v("qec_f1_b"),
            quantum: v("qec_q"),
            fcl2_w: v("qec_f2_w"),
            fcl2_b: v("qec_f2_b"),
            w_attn: v("qec_w"),
            fcl3_w: v("qec_f3_w"),
            fcl3_b: v("qec_f3_b"),
        };
        let QecMaps { m, m_qnn, m_fcl } = qec_forward(tape, x_fuse, &qv, &cfg.circuit())?;
        ForwardMaps { m, m_qnn: Some(m_qnn), m_fcl }
    } else {
        // Classifier reduces to the fully-connected branch alone.
        let logits = tape.conv1x1(x_fuse, v("qec_f2_w"), v("qec_f2_b"))?;
        let m_fcl = tape.softmax_rows(logits)?;
        ForwardMaps { m: m_fcl, m_qnn: None, m_fcl }
    };
    Ok((maps, vars))
}
