//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation pushes a node holding its value and a backward closure.
//! Insertion order is a topological order of the (acyclic) graph, so the
//! reverse sweep is a single pass from the loss node down to the leaves.
//! All accumulation happens in fixed order, making backward deterministic.

use crate::error::{Error, Result};
use crate::quantum::{circuit_backward, circuit_forward, CircuitSpec};
use crate::tensor::Tensor;

pub type VarId = usize;

type BackwardFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(VarId, Tensor))>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradients produced by one backward sweep, indexed by `VarId`.
pub struct Grads {
    adj: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.adj.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if it never received one.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Per-layer batch-norm running statistics.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Result<VarId> {
        value.check_finite(op)?;
        self.nodes.push(Node { value, requires_grad, backward });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId> {
        self.push("leaf", value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.leaf(value, false)
    }

    /// Reverse sweep from a scalar loss. Populates adjoints of every
    /// gradient-requiring node reachable from it.
    pub fn backward(&self, loss: VarId) -> Result<Grads> {
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(a) = adj[i].take() else { continue };
            if let Some(f) = &self.nodes[i].backward {
                f(&a, &mut |p, contrib| {
                    debug_assert!(p < i, "tape must be topologically ordered");
                    match &mut adj[p] {
                        Some(t) => t.add_scaled(&contrib, 1.0),
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            adj[i] = Some(a);
        }
        Ok(Grads { adj })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            "add",
            v,
            na || nb,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.clone());
                }
                if nb {
                    sink(b, adj.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            "sub",
            v,
            na || nb,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.clone());
                }
                if nb {
                    sink(b, adj.map(|x| -x));
                }
            })),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let v = va.zip(&vb, |x, y| x * y)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            "mul",
            v,
            na || nb,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.zip(&vb, |g, y| g * y).unwrap());
                }
                if nb {
                    sink(b, adj.zip(&va, |g, x| g * x).unwrap());
                }
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.value(a).map(|x| c * x);
        let na = self.needs(a);
        self.push(
            "scale",
            v,
            na,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.map(|g| c * g));
                }
            })),
        )
    }

    /// Add a constant tensor (no gradient through the constant).
    pub fn add_const(&mut self, a: VarId, c: &Tensor) -> Result<VarId> {
        let v = self.value(a).zip(c, |x, y| x + y)?;
        let na = self.needs(a);
        self.push(
            "add_const",
            v,
            na,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.clone());
                }
            })),
        )
    }

    // ---- activations ----

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId> {
        let va = self.value(a).clone();
        let v = va.map(|x| if x > 0.0 { x } else { slope * x });
        let na = self.needs(a);
        self.push(
            "leaky_relu",
            v,
            na,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.zip(&va, |g, x| if x > 0.0 { g } else { slope * g }).unwrap());
                }
            })),
        )
    }

    pub fn elu(&mut self, a: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let v = va.map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let na = self.needs(a);
        self.push(
            "elu",
            v,
            na,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.zip(&va, |g, x| if x > 0.0 { g } else { g * x.exp() }).unwrap());
                }
            })),
        )
    }

    /// PReLU with a learnable scalar slope.
    pub fn prelu(&mut self, a: VarId, slope: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let s = self.value(slope).item();
        let v = va.map(|x| if x > 0.0 { x } else { s * x });
        let (na, ns) = (self.needs(a), self.needs(slope));
        self.push(
            "prelu",
            v,
            na || ns,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.zip(&va, |g, x| if x > 0.0 { g } else { s * g }).unwrap());
                }
                if ns {
                    let ds: f64 = adj
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&g, &x)| if x > 0.0 { 0.0 } else { g * x })
                        .sum();
                    sink(slope, Tensor::scalar(ds));
                }
            })),
        )
    }

    /// Row-wise softmax of a matrix (softmax along the last axis).
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let va = self.value(a);
        let (n, k) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(&[n, k]);
        for r in 0..n {
            let row = &va.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out.data_mut()[r * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out.data_mut()[r * k + j] /= z;
            }
        }
        let y = out.clone();
        let na = self.needs(a);
        self.push(
            "softmax",
            out,
            na,
            Some(Box::new(move |adj, sink| {
                if !na {
                    return;
                }
                let mut dx = Tensor::zeros(&[n, k]);
                for r in 0..n {
                    let yr = &y.data()[r * k..(r + 1) * k];
                    let gr = &adj.data()[r * k..(r + 1) * k];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yj, &gj)| yj * gj).sum();
                    for j in 0..k {
                        dx.data_mut()[r * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                sink(a, dx);
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let v = va.matmul(&vb)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            "matmul",
            v,
            na || nb,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.matmul_nt(&vb).unwrap());
                }
                if nb {
                    sink(b, va.matmul_tn(adj).unwrap());
                }
            })),
        )
    }

    /// `aᵀ · b` where `a` is [n,m] and `b` is [n,k], yielding [m,k].
    pub fn matmul_tn(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let v = va.matmul_tn(&vb)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        self.push(
            "matmul_tn",
            v,
            na || nb,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, vb.matmul_nt(adj).unwrap());
                }
                if nb {
                    sink(b, va.matmul(adj).unwrap());
                }
            })),
        )
    }

    /// Broadcast a bias vector over the rows of a matrix.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let va = self.value(a);
        let vb = self.value(bias);
        let (n, k) = (va.rows(), va.cols());
        if vb.len() != k {
            return Err(Error::Dimension {
                op: "add_bias",
                detail: format!("{} channels vs bias {}", k, vb.len()),
            });
        }
        let mut v = va.clone();
        for r in 0..n {
            for j in 0..k {
                v.data_mut()[r * k + j] += vb.data()[j];
            }
        }
        let (na, nb) = (self.needs(a), self.needs(bias));
        let bshape = vb.shape().to_vec();
        self.push(
            "add_bias",
            v,
            na || nb,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, adj.clone());
                }
                if nb {
                    let mut db = Tensor::zeros(&bshape);
                    for r in 0..n {
                        for j in 0..k {
                            db.data_mut()[j] += adj.data()[r * k + j];
                        }
                    }
                    sink(bias, db);
                }
            })),
        )
    }

    /// Outer sum of two column vectors: out[i,j] = s[i] + t[j].
    pub fn outer_sum(&mut self, s: VarId, t: VarId) -> Result<VarId> {
        let vs = self.value(s).clone();
        let vt = self.value(t).clone();
        let n = vs.len();
        let m = vt.len();
        let mut v = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                v.data_mut()[i * m + j] = vs.data()[i] + vt.data()[j];
            }
        }
        let (ns, nt) = (self.needs(s), self.needs(t));
        let sshape = vs.shape().to_vec();
        let tshape = vt.shape().to_vec();
        self.push(
            "outer_sum",
            v,
            ns || nt,
            Some(Box::new(move |adj, sink| {
                if ns {
                    let mut ds = Tensor::zeros(&sshape);
                    for i in 0..n {
                        ds.data_mut()[i] = adj.data()[i * m..(i + 1) * m].iter().sum();
                    }
                    sink(s, ds);
                }
                if nt {
                    let mut dt = Tensor::zeros(&tshape);
                    for i in 0..n {
                        for j in 0..m {
                            dt.data_mut()[j] += adj.data()[i * m + j];
                        }
                    }
                    sink(t, dt);
                }
            })),
        )
    }

    /// Multiply every column of `a` [n,c] by the column vector `z` [n,1].
    pub fn mul_col(&mut self, a: VarId, z: VarId) -> Result<VarId> {
        let va = self.value(a).clone();
        let vz = self.value(z).clone();
        let (n, c) = (va.rows(), va.cols());
        if vz.len() != n {
            return Err(Error::Dimension {
                op: "mul_col",
                detail: format!("{} rows vs weight {}", n, vz.len()),
            });
        }
        let mut v = va.clone();
        for r in 0..n {
            let w = vz.data()[r];
            for j in 0..c {
                v.data_mut()[r * c + j] *= w;
            }
        }
        let (na, nz) = (self.needs(a), self.needs(z));
        let zshape = vz.shape().to_vec();
        self.push(
            "mul_col",
            v,
            na || nz,
            Some(Box::new(move |adj, sink| {
                if na {
                    let mut dx = adj.clone();
                    for r in 0..n {
                        let w = vz.data()[r];
                        for j in 0..c {
                            dx.data_mut()[r * c + j] *= w;
                        }
                    }
                    sink(a, dx);
                }
                if nz {
                    let mut dz = Tensor::zeros(&zshape);
                    for r in 0..n {
                        dz.data_mut()[r] = (0..c)
                            .map(|j| adj.data()[r * c + j] * va.data()[r * c + j])
                            .sum();
                    }
                    sink(z, dz);
                }
            })),
        )
    }

    /// Channel-wise concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    detail: "row counts differ".into(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut v = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..n {
                v.data_mut()[r * total + off..r * total + off + w]
                    .copy_from_slice(&src.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs: Vec<(VarId, usize, bool)> = parts
            .iter()
            .zip(&widths)
            .map(|(&p, &w)| (p, w, self.needs(p)))
            .collect();
        let any = needs.iter().any(|&(_, _, n)| n);
        self.push(
            "concat_cols",
            v,
            any,
            Some(Box::new(move |adj, sink| {
                let mut off = 0;
                for &(p, w, need) in &needs {
                    if need {
                        let mut dp = Tensor::zeros(&[n, w]);
                        for r in 0..n {
                            dp.data_mut()[r * w..(r + 1) * w].copy_from_slice(
                                &adj.data()[r * total + off..r * total + off + w],
                            );
                        }
                        sink(p, dp);
                    }
                    off += w;
                }
            })),
        )
    }

    // ---- convolutions ----

    /// 1x1 convolution over a [H*W, Cin] feature map: affine map per pixel.
    pub fn conv1x1(&mut self, x: VarId, kernel: VarId, bias: VarId) -> Result<VarId> {
        let y = self.matmul(x, kernel)?;
        self.add_bias(y, bias)
    }

    /// 3x3 cross-correlation with zero padding 1 and stride 1 on a feature map
    /// stored as [h*w, cin]. Kernel is [9*cin, cout], offset-major: rows
    /// `o*cin..(o+1)*cin` hold tap `o = (dy+1)*3 + (dx+1)`.
    pub fn conv3x3(
        &mut self,
        x: VarId,
        kernel: VarId,
        bias: VarId,
        h: usize,
        w: usize,
    ) -> Result<VarId> {
        let vx = self.value(x).clone();
        let vk = self.value(kernel).clone();
        let cin = vx.cols();
        if vx.rows() != h * w {
            return Err(Error::Dimension {
                op: "conv3x3",
                detail: format!("{} rows vs {}x{}", vx.rows(), h, w),
            });
        }
        if vk.rows() != 9 * cin {
            return Err(Error::Dimension {
                op: "conv3x3",
                detail: format!("kernel rows {} vs 9*{}", vk.rows(), cin),
            });
        }
        let cout = vk.cols();
        let mut out = Tensor::zeros(&[h * w, cout]);
        for o in 0..9 {
            let shifted = shift_rows(&vx, h, w, OFFSETS[o].0, OFFSETS[o].1);
            let krows = kernel_slice(&vk, o, cin);
            let part = shifted.matmul(&krows)?;
            out.add_scaled(&part, 1.0);
        }
        let (nx, nk) = (self.needs(x), self.needs(kernel));
        let y = self.push(
            "conv3x3",
            out,
            nx || nk,
            Some(Box::new(move |adj, sink| {
                if nk {
                    let mut dk = Tensor::zeros(&[9 * cin, cout]);
                    for o in 0..9 {
                        let shifted = shift_rows(&vx, h, w, OFFSETS[o].0, OFFSETS[o].1);
                        let dko = shifted.matmul_tn(adj).unwrap();
                        dk.data_mut()[o * cin * cout..(o + 1) * cin * cout]
                            .copy_from_slice(dko.data());
                    }
                    sink(kernel, dk);
                }
                if nx {
                    let mut dx = Tensor::zeros(&[h * w, cin]);
                    for o in 0..9 {
                        let krows = kernel_slice(&vk, o, cin);
                        let part = adj.matmul_nt(&krows).unwrap();
                        // out[p] consumed x[p + off], so dx[p + off] += part[p].
                        let back = shift_rows(&part, h, w, -OFFSETS[o].0, -OFFSETS[o].1);
                        dx.add_scaled(&back, 1.0);
                    }
                    sink(x, dx);
                }
            })),
        )?;
        self.add_bias(y, bias)
    }

    // ---- normalization ----

    /// Per-channel batch normalization over all rows (the whole image is the
    /// batch). In training mode the running stats are updated in place and the
    /// batch stats drive both forward and backward; in eval mode the running
    /// stats are used and treated as constants.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        state: &mut BnState,
        training: bool,
    ) -> Result<VarId> {
        let vx = self.value(x).clone();
        let vg = self.value(gamma).clone();
        let vb = self.value(beta);
        let (n, c) = (vx.rows(), vx.cols());
        if vg.len() != c || vb.len() != c {
            return Err(Error::Dimension {
                op: "batchnorm",
                detail: format!("{} channels vs gamma/beta {}/{}", c, vg.len(), vb.len()),
            });
        }
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for r in 0..n {
                for j in 0..c {
                    mean[j] += vx.data()[r * c + j];
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            for r in 0..n {
                for j in 0..c {
                    let d = vx.data()[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            for j in 0..c {
                state.mean[j] = (1.0 - BN_MOMENTUM) * state.mean[j] + BN_MOMENTUM * mean[j];
                state.var[j] = (1.0 - BN_MOMENTUM) * state.var[j] + BN_MOMENTUM * var[j];
            }
            (mean, var)
        } else {
            (state.mean.clone(), state.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        for r in 0..n {
            for j in 0..c {
                let xh = (vx.data()[r * c + j] - mean[j]) * inv_std[j];
                xhat.data_mut()[r * c + j] = xh;
                out.data_mut()[r * c + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let (nx, ng, nb) = (self.needs(x), self.needs(gamma), self.needs(beta));
        let gshape = vg.shape().to_vec();
        let y = self.push(
            "batchnorm",
            out,
            nx || ng || nb,
            Some(Box::new(move |adj, sink| {
                if ng {
                    let mut dg = Tensor::zeros(&gshape);
                    for r in 0..n {
                        for j in 0..c {
                            dg.data_mut()[j] += adj.data()[r * c + j] * xhat.data()[r * c + j];
                        }
                    }
                    sink(gamma, dg);
                }
                if nb {
                    let mut db = Tensor::zeros(&gshape);
                    for r in 0..n {
                        for j in 0..c {
                            db.data_mut()[j] += adj.data()[r * c + j];
                        }
                    }
                    sink(beta, db);
                }
                if nx {
                    let mut dx = Tensor::zeros(&[n, c]);
                    if training {
                        // Standard batch-norm backward with batch statistics.
                        let nf = n as f64;
                        for j in 0..c {
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for r in 0..n {
                                let dy = adj.data()[r * c + j] * vg.data()[j];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat.data()[r * c + j];
                            }
                            for r in 0..n {
                                let dy = adj.data()[r * c + j] * vg.data()[j];
                                let xh = xhat.data()[r * c + j];
                                dx.data_mut()[r * c + j] = inv_std[j]
                                    * (dy - sum_dy / nf - xh * sum_dy_xhat / nf);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx.data_mut()[r * c + j] =
                                    adj.data()[r * c + j] * vg.data()[j] * inv_std[j];
                            }
                        }
                    }
                    sink(x, dx);
                }
            })),
        )?;
        Ok(y)
    }

    // ---- reductions and loss ----

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        let na = self.needs(a);
        self.push(
            "sum",
            v,
            na,
            Some(Box::new(move |adj, sink| {
                if na {
                    sink(a, Tensor::filled(&shape, adj.item()));
                }
            })),
        )
    }

    /// Masked two-class cross entropy over probability rows:
    /// -(1/N) Σ_{i∈mask} Σ_k t_ik ln(max(p_ik, 1e-12)).
    pub fn cross_entropy_masked(
        &mut self,
        probs: VarId,
        targets: &Tensor,
        mask: &[usize],
    ) -> Result<VarId> {
        const FLOOR: f64 = 1e-12;
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let vp = self.value(probs).clone();
        let (_, k) = (vp.rows(), vp.cols());
        if targets.shape() != vp.shape() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                detail: format!("{:?} vs {:?}", targets.shape(), vp.shape()),
            });
        }
        let nf = mask.len() as f64;
        let mut loss = 0.0;
        for &r in mask {
            for j in 0..k {
                let t = targets.at(r, j);
                if t != 0.0 {
                    loss -= t * vp.at(r, j).max(FLOOR).ln();
                }
            }
        }
        loss /= nf;
        let np = self.needs(probs);
        let t = targets.clone();
        let mask: Vec<usize> = mask.to_vec();
        let shape = vp.shape().to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            np,
            Some(Box::new(move |adj, sink| {
                if !np {
                    return;
                }
                let g = adj.item();
                let mut dp = Tensor::zeros(&shape);
                for &r in &mask {
                    for j in 0..k {
                        let tv = t.at(r, j);
                        let pv = vp.at(r, j);
                        if tv != 0.0 && pv >= FLOOR {
                            dp.set(r, j, -g * tv / (pv * nf));
                        }
                    }
                }
                sink(probs, dp);
            })),
        )
    }

    // ---- quantum map ----

    /// Per-row, per-group quantum circuit evaluation. Input is [n, g*q]
    /// embedding angles (groups along the channel axis), output [n, g*λ]
    /// Pauli-Z expectations. Circuit parameters are shared across all rows
    /// and groups; their adjoints accumulate in row-major order.
    pub fn quantum_map(&mut self, x: VarId, params: VarId, spec: &CircuitSpec) -> Result<VarId> {
        let vx = self.value(x).clone();
        let vp = self.value(params).clone();
        let q = spec.q;
        let lambda = spec.measure_count();
        let (n, cin) = (vx.rows(), vx.cols());
        if cin % q != 0 {
            return Err(Error::Dimension {
                op: "quantum_map",
                detail: format!("{} channels not divisible by q={}", cin, q),
            });
        }
        if vp.len() != spec.param_count() {
            return Err(Error::Dimension {
                op: "quantum_map",
                detail: format!("{} params vs expected {}", vp.len(), spec.param_count()),
            });
        }
        let groups = cin / q;
        let cout = groups * lambda;
        let mut out = Tensor::zeros(&[n, cout]);
        for r in 0..n {
            for g in 0..groups {
                let feats = &vx.data()[r * cin + g * q..r * cin + (g + 1) * q];
                let m = circuit_forward(spec, feats, vp.data());
                out.data_mut()[r * cout + g * lambda..r * cout + (g + 1) * lambda]
                    .copy_from_slice(&m);
            }
        }
        let (nx, np) = (self.needs(x), self.needs(params));
        let spec = spec.clone();
        let pshape = vp.shape().to_vec();
        self.push(
            "quantum_map",
            out,
            nx || np,
            Some(Box::new(move |adj, sink| {
                let mut dx = Tensor::zeros(&[n, cin]);
                let mut dp = Tensor::zeros(&pshape);
                for r in 0..n {
                    for g in 0..groups {
                        let feats = &vx.data()[r * cin + g * q..r * cin + (g + 1) * q];
                        let weights =
                            &adj.data()[r * cout + g * lambda..r * cout + (g + 1) * lambda];
                        if weights.iter().all(|&w| w == 0.0) {
                            continue;
                        }
                        let (_, df, dpp) = circuit_backward(&spec, feats, vp.data(), weights);
                        for (k, &d) in df.iter().enumerate() {
                            dx.data_mut()[r * cin + g * q + k] += d;
                        }
                        for (k, &d) in dpp.iter().enumerate() {
                            dp.data_mut()[k] += d;
                        }
                    }
                }
                if nx {
                    sink(x, dx);
                }
                if np {
                    sink(params, dp);
                }
            })),
        )
    }
}

const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Rows of a [h*w, c] map shifted by (dy, dx) with zero fill:
/// out[(r,c)] = x[(r+dy, c+dx)] when in bounds.
fn shift_rows(x: &Tensor, h: usize, w: usize, dy: isize, dx: isize) -> Tensor {
    let c = x.cols();
    let mut out = Tensor::zeros(&[h * w, c]);
    for r in 0..h as isize {
        let sr = r + dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for col in 0..w as isize {
            let sc = col + dx;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            let dst = (r as usize * w + col as usize) * c;
            let src = (sr as usize * w + sc as usize) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    out
}

fn kernel_slice(k: &Tensor, o: usize, cin: usize) -> Tensor {
    let cout = k.cols();
    Tensor::new(
        vec![cin, cout],
        k.data()[o * cin * cout..(o + 1) * cin * cout].to_vec(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff, random_tensor, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[3, 4], 1, 1.0), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::filled(&[3, 4], 1.0));
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let mut tape = Tape::new();
        let xt = random_tensor(&[2, 3], 2, 1.0);
        let x = tape.leaf(xt.clone(), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expect = xt.map(|v| 2.0 * v);
        assert!(g.get(x).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let a0 = random_tensor(&[4, 4], 3, 1.0);
        let b0 = random_tensor(&[4, 4], 4, 1.0);
        let eval = |aw: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(aw.clone(), true).unwrap();
            let b = tape.leaf(b0.clone(), false).unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sum(c).unwrap();
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone(), true).unwrap();
        let b = tape.leaf(b0.clone(), true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        let fd = finite_diff(&a0, eval, 1e-4);
        assert!(rel_err(g.get(a).unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn conv3x3_matches_naive_loops() {
        let (h, w, cin, cout) = (5, 5, 2, 3);
        let x = random_tensor(&[h * w, cin], 5, 1.0);
        let k = random_tensor(&[9 * cin, cout], 6, 1.0);
        let b = random_tensor(&[cout], 7, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false).unwrap();
        let kv = tape.leaf(k.clone(), false).unwrap();
        let bv = tape.leaf(b.clone(), false).unwrap();
        let y = tape.conv3x3(xv, kv, bv, h, w).unwrap();
        let got = tape.value(y);

        for r in 0..h {
            for c in 0..w {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (sr, sc) = (r as isize + dy, c as isize + dx);
                            if sr < 0 || sr >= h as isize || sc < 0 || sc >= w as isize {
                                continue;
                            }
                            let o = ((dy + 1) * 3 + (dx + 1)) as usize;
                            for ci in 0..cin {
                                acc += x.at(sr as usize * w + sc as usize, ci)
                                    * k.at(o * cin + ci, co);
                            }
                        }
                    }
                    let diff = (got.at(r * w + c, co) - acc).abs();
                    assert!(diff < 1e-12, "mismatch at ({r},{c},{co})");
                }
            }
        }
    }

    #[test]
    fn conv3x3_ones_counts_window() {
        let (h, w) = (3, 3);
        let x = Tensor::filled(&[9, 1], 1.0);
        let k = Tensor::filled(&[9, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false).unwrap();
        let kv = tape.leaf(k, false).unwrap();
        let bv = tape.leaf(b, false).unwrap();
        let y = tape.conv3x3(xv, kv, bv, h, w).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(1 * w + 1, 0), 9.0); // center
        assert_eq!(v.at(0, 0), 4.0); // corner
    }

    #[test]
    fn conv3x3_dirac_kernel_is_identity() {
        let (h, w, c) = (4, 6, 3);
        let x = random_tensor(&[h * w, c], 8, 1.0);
        let mut k = Tensor::zeros(&[9 * c, c]);
        for ci in 0..c {
            k.set(4 * c + ci, ci, 1.0); // center tap, channel-diagonal
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false).unwrap();
        let kv = tape.leaf(k, false).unwrap();
        let bv = tape.leaf(Tensor::zeros(&[c]), false).unwrap();
        let y = tape.conv3x3(xv, kv, bv, h, w).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn conv3x3_zero_input_broadcasts_bias() {
        let (h, w, cin, cout) = (3, 4, 2, 2);
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::zeros(&[h * w, cin]), false).unwrap();
        let kv = tape.leaf(random_tensor(&[9 * cin, cout], 9, 1.0), false).unwrap();
        let b = random_tensor(&[cout], 10, 1.0);
        let bv = tape.leaf(b.clone(), false).unwrap();
        let y = tape.conv3x3(xv, kv, bv, h, w).unwrap();
        for r in 0..h * w {
            for j in 0..cout {
                assert_eq!(tape.value(y).at(r, j), b.data()[j]);
            }
        }
    }

    #[test]
    fn conv1x1_equals_reshaped_matmul() {
        let (n, cin, cout) = (12, 3, 2);
        let x = random_tensor(&[n, cin], 11, 1.0);
        let k = random_tensor(&[cin, cout], 12, 1.0);
        let b = random_tensor(&[cout], 13, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false).unwrap();
        let kv = tape.leaf(k.clone(), false).unwrap();
        let bv = tape.leaf(b.clone(), false).unwrap();
        let y = tape.conv1x1(xv, kv, bv).unwrap();
        let mm = x.matmul(&k).unwrap();
        for r in 0..n {
            for j in 0..cout {
                assert!((tape.value(y).at(r, j) - mm.at(r, j) - b.data()[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv1x1_identity_kernel() {
        let x = random_tensor(&[6, 2], 30, 1.0);
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false).unwrap();
        let kv = tape.leaf(k, false).unwrap();
        let bv = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let y = tape.conv1x1(xv, kv, bv).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![-1.0]).unwrap(), false).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.value(y).item() + 0.2).abs() < 1e-15);

        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x0 = random_tensor(&[20, 7], 14, 3.0);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, false).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for r in 0..20 {
            let s: f64 = (0..7).map(|j| v.at(r, j)).sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in 0..7 {
                let p = v.at(r, j);
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn elu_gradient_matches_fd_at_half() {
        for &x0 in &[0.5, -0.5] {
            let t0 = Tensor::new(vec![1, 1], vec![x0]).unwrap();
            let eval = |xt: &Tensor| {
                let mut tape = Tape::new();
                let x = tape.leaf(xt.clone(), true).unwrap();
                let y = tape.elu(x).unwrap();
                let s = tape.sum(y).unwrap();
                tape.value(s).item()
            };
            let mut tape = Tape::new();
            let x = tape.leaf(t0.clone(), true).unwrap();
            let y = tape.elu(x).unwrap();
            let s = tape.sum(y).unwrap();
            let g = tape.backward(s).unwrap();
            let fd = finite_diff(&t0, eval, 1e-5);
            assert!((g.get(x).unwrap().item() - fd.item()).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[10, 2], 3.7), false).unwrap();
        let g = tape.leaf(Tensor::filled(&[2], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let mut st = BnState::new(2);
        let y = tape.batchnorm(x, g, b, &mut st, true).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let x0 = random_tensor(&[50, 3], 15, 2.0);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, false).unwrap();
        let g = tape.leaf(Tensor::filled(&[3], 1.0), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3]), false).unwrap();
        let mut st = BnState::new(3);
        let y = tape.batchnorm(x, g, b, &mut st, true).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            let mean: f64 = (0..50).map(|r| v.at(r, j)).sum::<f64>() / 50.0;
            let var: f64 = (0..50).map(|r| (v.at(r, j) - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn batchnorm_gamma_gradient_matches_fd() {
        let x0 = random_tensor(&[12, 2], 16, 1.0);
        let g0 = random_tensor(&[2], 17, 0.5).map(|v| v + 1.0);
        let eval = |gw: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false).unwrap();
            let g = tape.leaf(gw.clone(), true).unwrap();
            let b = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
            let mut st = BnState::new(2);
            let y = tape.batchnorm(x, g, b, &mut st, true).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true).unwrap();
        let g = tape.leaf(g0.clone(), true).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        let mut st = BnState::new(2);
        let y = tape.batchnorm(x, g, b, &mut st, true).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        let fd = finite_diff(&g0, eval, 1e-4);
        assert!(rel_err(grads.get(g).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn quantum_map_bounds_and_gradients() {
        let spec = CircuitSpec::new(4, 1, crate::quantum::Topology::Chain);
        let x0 = random_tensor(&[3, 8], 18, 2.0);
        let p0 = random_tensor(&[spec.param_count()], 19, 2.0);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true).unwrap();
        let p = tape.leaf(p0.clone(), true).unwrap();
        let y = tape.quantum_map(x, p, &spec).unwrap();
        for &v in tape.value(y).data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();

        let eval_p = |pw: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false).unwrap();
            let p = tape.leaf(pw.clone(), true).unwrap();
            let y = tape.quantum_map(x, p, &spec).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.value(s).item()
        };
        let fd = finite_diff(&p0, eval_p, 1e-5);
        assert!(rel_err(g.get(p).unwrap(), &fd) < 1e-6);

        let eval_x = |xw: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(xw.clone(), true).unwrap();
            let p = tape.leaf(p0.clone(), false).unwrap();
            let y = tape.quantum_map(x, p, &spec).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.value(s).item()
        };
        let fd = finite_diff(&x0, eval_x, 1e-5);
        assert!(rel_err(g.get(x).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn deterministic_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let _ = &mut rng;
            let x0 = random_tensor(&[6, 4], 20, 1.0);
            let k0 = random_tensor(&[4, 3], 21, 1.0);
            let mut tape = Tape::new();
            let x = tape.leaf(x0, true).unwrap();
            let k = tape.leaf(k0, true).unwrap();
            let y = tape.matmul(x, k).unwrap();
            let e = tape.elu(y).unwrap();
            let s = tape.sum(e).unwrap();
            let g = tape.backward(s).unwrap();
            (g.get(x).unwrap().clone(), g.get(k).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }
}
