//! Graph feature learning: a 2-head GAT layer followed by a single-head
//! layer, sandwiched between the superpixel encoder and decoder. Node
//! features stay 64-wide (2 heads x 32, then 64 -> 64).

use crate::autodiff::{Tape, VarId};
use crate::error::Result;
use crate::preprocess::SuperpixelGraph;
use crate::tensor::Tensor;

pub const GAT_LEAKY_SLOPE: f64 = 0.2;
const MASK_OFF: f64 = -1e30;

/// One attention head: linear transform plus the split attention vector
/// (a applied to [T v_i || T v_j] decomposes into a_l . T v_i + a_r . T v_j).
#[derive(Clone, Copy)]
pub struct GatHeadVars {
    pub t: VarId,    // [in, out]
    pub a_l: VarId,  // [out, 1]
    pub a_r: VarId,  // [out, 1]
}

/// Additive softmax mask for the closed neighborhood: 0 on A's edges and
/// the diagonal, a large negative constant elsewhere.
pub fn attention_mask(a: &Tensor) -> Tensor {
    let k = a.rows();
    let mut m = Tensor::filled(&[k, k], MASK_OFF);
    for i in 0..k {
        m.set(i, i, 0.0);
        for j in 0..k {
            if a.at(i, j) != 0.0 {
                m.set(i, j, 0.0);
            }
        }
    }
    m
}

/// One GAT layer over node features `v` [K, in]: per head, attention-weighted
/// aggregation of transformed neighbors followed by ELU; heads concatenated.
pub fn gat_layer(
    tape: &mut Tape,
    v: VarId,
    mask: &Tensor,
    heads: &[GatHeadVars],
) -> Result<VarId> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let h = tape.matmul(v, head.t)?;
        let s = tape.matmul(h, head.a_l)?;
        let t = tape.matmul(h, head.a_r)?;
        let c = tape.outer_sum(s, t)?;
        let c = tape.leaky_relu(c, GAT_LEAKY_SLOPE)?;
        let c = tape.add_const(c, mask)?;
        let rho = tape.softmax_rows(c)?;
        let agg = tape.matmul(rho, h)?;
        outs.push(tape.elu(agg)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Full GFL branch: encode to superpixels, two GAT layers, decode back to
/// pixels. `x` is the [H*W, 64] differential feature map on the tape.
pub fn gfl_forward(
    tape: &mut Tape,
    x: VarId,
    graph: &SuperpixelGraph,
    layer1: &[GatHeadVars],
    layer2: &GatHeadVars,
) -> Result<VarId> {
    let o_norm = tape.constant(graph.o_norm.clone())?;
    let o = tape.constant(graph.o.clone())?;
    let mask = attention_mask(&graph.a);
    let v = tape.matmul_tn(o_norm, x)?;
    let v = gat_layer(tape, v, &mask, layer1)?;
    let v = gat_layer(tape, v, &mask, std::slice::from_ref(layer2))?;
    tape.matmul(o, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff, random_tensor, rel_err};

    fn head(tape: &mut Tape, t: Tensor, a_l: Tensor, a_r: Tensor, grad: bool) -> GatHeadVars {
        GatHeadVars {
            t: tape.leaf(t, grad).unwrap(),
            a_l: tape.leaf(a_l, grad).unwrap(),
            a_r: tape.leaf(a_r, grad).unwrap(),
        }
    }

    /// Ring adjacency over k nodes.
    fn ring(k: usize) -> Tensor {
        let mut a = Tensor::zeros(&[k, k]);
        for i in 0..k {
            let j = (i + 1) % k;
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    fn run_layer(v0: &Tensor, a: &Tensor, t: &Tensor, al: &Tensor, ar: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.leaf(v0.clone(), false).unwrap();
        let h = head(&mut tape, t.clone(), al.clone(), ar.clone(), false);
        let y = gat_layer(&mut tape, v, &attention_mask(a), &[h]).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        // Single node, no edges: rho_ii = 1, output = ELU(T v).
        let v0 = Tensor::from_rows(&[vec![0.5, -1.0]]);
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let al = Tensor::zeros(&[2, 1]);
        let ar = Tensor::zeros(&[2, 1]);
        let y = run_layer(&v0, &Tensor::zeros(&[1, 1]), &t, &al, &ar);
        assert!((y.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((y.at(0, 1) - ((-1.0f64).exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn identical_neighbors_get_uniform_attention() {
        // All nodes equal: logits equal within each closed neighborhood, so
        // attention is uniform and output equals ELU(T v) again.
        let k = 5;
        let v0 = Tensor::from_rows(&vec![vec![1.0, 2.0]; k]);
        let t = random_tensor(&[2, 2], 1, 1.0);
        let al = random_tensor(&[2, 1], 2, 1.0);
        let ar = random_tensor(&[2, 1], 3, 1.0);
        let y = run_layer(&v0, &ring(k), &t, &al, &ar);
        let tv = v0.matmul(&t).unwrap().map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        assert!(y.max_abs_diff(&tv) < 1e-9);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // Recover rho from the tape by aggregating an identity feature.
        let k = 6;
        let v0 = random_tensor(&[k, 3], 4, 1.0);
        let t = random_tensor(&[3, 3], 5, 1.0);
        let al = random_tensor(&[3, 1], 6, 1.0);
        let ar = random_tensor(&[3, 1], 7, 1.0);
        let mut tape = Tape::new();
        let v = tape.leaf(v0, false).unwrap();
        let h = head(&mut tape, t, al, ar, false);
        let hh = tape.matmul(v, h.t).unwrap();
        let s = tape.matmul(hh, h.a_l).unwrap();
        let tt = tape.matmul(hh, h.a_r).unwrap();
        let c = tape.outer_sum(s, tt).unwrap();
        let c = tape.leaky_relu(c, GAT_LEAKY_SLOPE).unwrap();
        let c = tape.add_const(c, &attention_mask(&ring(k))).unwrap();
        let rho = tape.softmax_rows(c).unwrap();
        let r = tape.value(rho);
        for i in 0..k {
            let sum: f64 = (0..k).map(|j| r.at(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for j in 0..k {
                assert!(r.at(i, j) >= 0.0);
                // Off-neighborhood entries must be crushed to zero.
                let neighbor = j == i || (j + 1) % k == i || (i + 1) % k == j;
                if !neighbor {
                    assert!(r.at(i, j) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let k = 7;
        let v0 = random_tensor(&[k, 4], 8, 1.0);
        let a = ring(k);
        let t = random_tensor(&[4, 4], 9, 1.0);
        let al = random_tensor(&[4, 1], 10, 1.0);
        let ar = random_tensor(&[4, 1], 11, 1.0);
        let y = run_layer(&v0, &a, &t, &al, &ar);

        // Cyclic permutation p(i) = i+2 mod k.
        let perm: Vec<usize> = (0..k).map(|i| (i + 2) % k).collect();
        let mut vp = Tensor::zeros(&[k, 4]);
        let mut ap = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in 0..4 {
                vp.set(perm[i], j, v0.at(i, j));
            }
            for j in 0..k {
                if a.at(i, j) != 0.0 {
                    ap.set(perm[i], perm[j], 1.0);
                }
            }
        }
        let yp = run_layer(&vp, &ap, &t, &al, &ar);
        for i in 0..k {
            for j in 0..4 {
                assert!((yp.at(perm[i], j) - y.at(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_layer_is_local_to_one_hop() {
        // Path graph 0-1-2-3-4: perturbing node 4 must not change node 0 or 1.
        let k = 5;
        let mut a = Tensor::zeros(&[k, k]);
        for i in 0..k - 1 {
            a.set(i, i + 1, 1.0);
            a.set(i + 1, i, 1.0);
        }
        let t = random_tensor(&[2, 2], 12, 1.0);
        let al = random_tensor(&[2, 1], 13, 1.0);
        let ar = random_tensor(&[2, 1], 14, 1.0);
        let v0 = random_tensor(&[k, 2], 15, 1.0);
        let mut v1 = v0.clone();
        v1.set(4, 0, 9.0);
        v1.set(4, 1, -9.0);
        let y0 = run_layer(&v0, &a, &t, &al, &ar);
        let y1 = run_layer(&v1, &a, &t, &al, &ar);
        for node in [0usize, 1, 2] {
            // Nodes 0..=2 are at least 2 hops from node 4.
            for j in 0..2 {
                assert!((y0.at(node, j) - y1.at(node, j)).abs() < 1e-12, "node {node}");
            }
        }
        // Node 3 (1 hop) must change.
        assert!((0..2).any(|j| (y0.at(3, j) - y1.at(3, j)).abs() > 1e-9));
    }

    #[test]
    fn two_layers_reach_two_hops_not_three() {
        let k = 6;
        let mut a = Tensor::zeros(&[k, k]);
        for i in 0..k - 1 {
            a.set(i, i + 1, 1.0);
            a.set(i + 1, i, 1.0);
        }
        let run = |v0: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(v0.clone(), false).unwrap();
            let h1 = head(
                &mut tape,
                random_tensor(&[2, 2], 16, 1.0),
                random_tensor(&[2, 1], 17, 1.0),
                random_tensor(&[2, 1], 18, 1.0),
                false,
            );
            let h2 = head(
                &mut tape,
                random_tensor(&[2, 2], 19, 1.0),
                random_tensor(&[2, 1], 20, 1.0),
                random_tensor(&[2, 1], 21, 1.0),
                false,
            );
            let mask = attention_mask(&a);
            let y = gat_layer(&mut tape, v, &mask, &[h1]).unwrap();
            let y = gat_layer(&mut tape, y, &mask, &[h2]).unwrap();
            tape.value(y).clone()
        };
        let v0 = random_tensor(&[k, 2], 22, 1.0);
        let mut v1 = v0.clone();
        v1.set(5, 0, 7.0);
        let y0 = run(&v0);
        let y1 = run(&v1);
        // Node 5 perturbed: node 3 is 2 hops (affected), node 2 is 3 hops (not).
        assert!((0..2).any(|j| (y0.at(3, j) - y1.at(3, j)).abs() > 1e-10));
        for j in 0..2 {
            assert!((y0.at(2, j) - y1.at(2, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn gfl_output_piecewise_constant_and_fd_consistent() {
        // 6-superpixel toy graph on a 6x4 image.
        let (h, w) = (6, 4);
        let labels: Vec<usize> = (0..h * w).map(|p| (p / w) % 6).collect();
        let graph = SuperpixelGraph::from_labels(h, w, labels.clone()).unwrap();
        let x0 = random_tensor(&[h * w, 4], 23, 1.0);
        let t1 = random_tensor(&[4, 2], 24, 1.0);
        let al1 = random_tensor(&[2, 1], 25, 1.0);
        let ar1 = random_tensor(&[2, 1], 26, 1.0);
        let t1b = random_tensor(&[4, 2], 27, 1.0);
        let al1b = random_tensor(&[2, 1], 28, 1.0);
        let ar1b = random_tensor(&[2, 1], 29, 1.0);
        let t2 = random_tensor(&[4, 4], 30, 1.0);
        let al2 = random_tensor(&[4, 1], 31, 1.0);
        let ar2 = random_tensor(&[4, 1], 32, 1.0);

        let run = |t1w: &Tensor, want_grad: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), false).unwrap();
            let h1 = head(&mut tape, t1w.clone(), al1.clone(), ar1.clone(), want_grad);
            let h1b = head(&mut tape, t1b.clone(), al1b.clone(), ar1b.clone(), false);
            let h2 = head(&mut tape, t2.clone(), al2.clone(), ar2.clone(), false);
            let y = gfl_forward(&mut tape, x, &graph, &[h1, h1b], &h2).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq).unwrap();
            (tape.value(y).clone(), tape.value(s).item(), tape, h1.t, s)
        };

        let (y, _, _, _, _) = run(&t1, false);
        // Piecewise constant over superpixels.
        for (p, &l) in labels.iter().enumerate() {
            let rep = labels.iter().position(|&m| m == l).unwrap();
            for j in 0..4 {
                assert!((y.at(p, j) - y.at(rep, j)).abs() < 1e-12);
            }
        }
        // FD-consistent gradient for the first head's transform.
        let (_, _, tape, t1_id, s_id) = run(&t1, true);
        let g = tape.backward(s_id).unwrap();
        let fd = finite_diff(&t1, |tw| run(tw, false).1, 1e-5);
        assert!(rel_err(g.get(t1_id).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let graph =
            SuperpixelGraph::from_labels(2, 4, vec![0, 0, 1, 1, 0, 2, 2, 1]).unwrap();
        let x0 = Tensor::filled(&[8, 3], 0.7);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, false).unwrap();
        let h1 = head(
            &mut tape,
            random_tensor(&[3, 2], 33, 1.0),
            random_tensor(&[2, 1], 34, 1.0),
            random_tensor(&[2, 1], 35, 1.0),
            false,
        );
        let h1b = head(
            &mut tape,
            random_tensor(&[3, 2], 36, 1.0),
            random_tensor(&[2, 1], 37, 1.0),
            random_tensor(&[2, 1], 38, 1.0),
            false,
        );
        let h2 = head(
            &mut tape,
            random_tensor(&[4, 4], 39, 1.0),
            random_tensor(&[4, 1], 40, 1.0),
            random_tensor(&[4, 1], 41, 1.0),
            false,
        );
        let y = gfl_forward(&mut tape, x, &graph, &[h1, h1b], &h2).unwrap();
        let v = tape.value(y);
        for p in 1..8 {
            for j in 0..4 {
                assert!((v.at(p, j) - v.at(0, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_single_head_gives_zero() {
        let graph = SuperpixelGraph::from_labels(1, 4, vec![0, 0, 1, 1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 3]), false).unwrap();
        let o_norm = tape.constant(graph.o_norm.clone()).unwrap();
        let v = tape.matmul_tn(o_norm, x).unwrap();
        let h2 = head(
            &mut tape,
            random_tensor(&[3, 3], 42, 1.0),
            random_tensor(&[3, 1], 43, 1.0),
            random_tensor(&[3, 1], 44, 1.0),
            false,
        );
        let y = gat_layer(&mut tape, v, &attention_mask(&graph.a), &[h2]).unwrap();
        for &e in tape.value(y).data() {
            assert_eq!(e, 0.0);
        }
    }
}
