//! Upstream of the learned layers: spectral angle map, LDA reduction,
//! SLIC superpixels, and the association/adjacency matrices used by the
//! graph branch. Feature maps are stored row-major as [H*W, C].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spectral angle between corresponding pixel spectra of two cubes, in
/// radians. Zero-norm spectra map to angle 0; the second return value
/// counts how many pixels that happened to.
pub fn sam_map(x1: &Tensor, x2: &Tensor) -> Result<(Tensor, usize)> {
    if x1.shape() != x2.shape() {
        return Err(Error::Dimension {
            op: "sam_map",
            detail: format!("{:?} vs {:?}", x1.shape(), x2.shape()),
        });
    }
    let (n, c) = (x1.rows(), x1.cols());
    let mut out = Tensor::zeros(&[n, 1]);
    let mut degenerate = 0usize;
    for p in 0..n {
        let a = &x1.data()[p * c..(p + 1) * c];
        let b = &x2.data()[p * c..(p + 1) * c];
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
        let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            degenerate += 1;
            continue; // angle stays 0: no evidence of change
        }
        out.data_mut()[p] = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    }
    Ok((out, degenerate))
}

/// Two-class Fisher discriminant fitted on a sparse set of labeled pixels.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LdaModel {
    pub axis: Vec<f64>,
}

impl LdaModel {
    /// `labeled` pairs a row index of `x` with a class in {0, 1}.
    pub fn fit(x: &Tensor, labeled: &[(usize, usize)]) -> Result<LdaModel> {
        let d = x.cols();
        let n0 = labeled.iter().filter(|&&(_, c)| c == 0).count();
        let n1 = labeled.len() - n0;
        if n0 == 0 || n1 == 0 {
            return Err(Error::DegenerateLda(format!(
                "need both classes, got {n0} unchanged / {n1} changed"
            )));
        }
        let mut mu = [vec![0.0; d], vec![0.0; d]];
        for &(p, c) in labeled {
            for j in 0..d {
                mu[c][j] += x.at(p, j);
            }
        }
        for j in 0..d {
            mu[0][j] /= n0 as f64;
            mu[1][j] /= n1 as f64;
        }
        // Within-class scatter, pooled over both classes.
        let mut sw = vec![0.0; d * d];
        for &(p, c) in labeled {
            for i in 0..d {
                let di = x.at(p, i) - mu[c][i];
                for j in 0..d {
                    sw[i * d + j] += di * (x.at(p, j) - mu[c][j]);
                }
            }
        }
        let trace: f64 = (0..d).map(|i| sw[i * d + i]).sum();
        // Absolute floor keeps the solve nonsingular even when both classes
        // have a single sample (zero scatter).
        let ridge = (1e-6 * trace / d as f64).max(1e-9);
        for i in 0..d {
            sw[i * d + i] += ridge;
        }
        let rhs: Vec<f64> = (0..d).map(|j| mu[1][j] - mu[0][j]).collect();
        let axis = solve_dense(&mut sw, d, rhs)?;
        if axis.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateLda("identical class means".into()));
        }
        Ok(LdaModel { axis })
    }

    /// Project every row of `x` onto the discriminant axis: [n, d] → [n, 1].
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.axis.len() {
            return Err(Error::Dimension {
                op: "lda_project",
                detail: format!("{} cols vs axis {}", x.cols(), self.axis.len()),
            });
        }
        let w = Tensor::new(vec![self.axis.len(), 1], self.axis.clone())?;
        x.matmul(&w)
    }
}

/// Gaussian elimination with partial pivoting; consumes the matrix buffer.
fn solve_dense(a: &mut [f64], d: usize, mut b: Vec<f64>) -> Result<Vec<f64>> {
    for col in 0..d {
        let (pivot, pval) = (col..d)
            .map(|r| (r, a[r * d + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= 0.0 {
            return Err(Error::DegenerateLda("singular scatter matrix".into()));
        }
        if pivot != col {
            for j in 0..d {
                a.swap(pivot * d + j, col * d + j);
            }
            b.swap(pivot, col);
        }
        let diag = a[col * d + col];
        for r in col + 1..d {
            let f = a[r * d + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                a[r * d + j] -= f * a[col * d + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; d];
    for r in (0..d).rev() {
        let mut acc = b[r];
        for j in r + 1..d {
            acc -= a[r * d + j] * x[j];
        }
        x[r] = acc / a[r * d + r];
    }
    Ok(x)
}

/// Pixel-to-superpixel association and region adjacency.
#[derive(Clone, Debug)]
pub struct SuperpixelGraph {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// Label per pixel, raster order, values in 0..k.
    pub labels: Vec<usize>,
    /// [H*W, K] binary association; rows sum to 1.
    pub o: Tensor,
    /// Column-normalized association; columns sum to 1.
    pub o_norm: Tensor,
    /// [K, K] symmetric binary adjacency, zero diagonal, 4-connectivity.
    pub a: Tensor,
}

impl SuperpixelGraph {
    pub fn from_labels(h: usize, w: usize, labels: Vec<usize>) -> Result<SuperpixelGraph> {
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        if k < 1 || labels.len() != h * w {
            return Err(Error::Dimension {
                op: "superpixel_graph",
                detail: "bad label map".into(),
            });
        }
        let mut sizes = vec![0usize; k];
        let mut o = Tensor::zeros(&[h * w, k]);
        for (p, &l) in labels.iter().enumerate() {
            o.set(p, l, 1.0);
            sizes[l] += 1;
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Dimension {
                op: "superpixel_graph",
                detail: "empty superpixel label".into(),
            });
        }
        let mut o_norm = o.clone();
        for p in 0..h * w {
            let l = labels[p];
            o_norm.set(p, l, 1.0 / sizes[l] as f64);
        }
        let mut a = Tensor::zeros(&[k, k]);
        for r in 0..h {
            for c in 0..w {
                let l = labels[r * w + c];
                if c + 1 < w {
                    let m = labels[r * w + c + 1];
                    if m != l {
                        a.set(l, m, 1.0);
                        a.set(m, l, 1.0);
                    }
                }
                if r + 1 < h {
                    let m = labels[(r + 1) * w + c];
                    if m != l {
                        a.set(l, m, 1.0);
                        a.set(m, l, 1.0);
                    }
                }
            }
        }
        Ok(SuperpixelGraph { h, w, k, labels, o, o_norm, a })
    }

    /// Per-superpixel mean of a [H*W, C] feature map: Õᵀ·X, giving [K, C].
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.o_norm.matmul_tn(x)
    }

    /// Broadcast node features back to pixels: O·V, giving [H*W, C].
    pub fn decode(&self, v: &Tensor) -> Result<Tensor> {
        self.o.matmul(v)
    }
}

pub const SLIC_COMPACTNESS: f64 = 10.0;
pub const SLIC_ITERS: usize = 10;

/// SLIC over a single-band feature image. `s` is the segmentation scale:
/// the target pixels-per-superpixel, so K ≈ HW/s. The feature channel is
/// standardized internally; spatial coordinates are normalized by the grid
/// step and weighted by the compactness constant. Deterministic: centers
/// start on a regular grid.
pub fn slic(feature: &Tensor, h: usize, w: usize, s: usize) -> Result<SuperpixelGraph> {
    if feature.rows() != h * w || feature.cols() != 1 {
        return Err(Error::Dimension {
            op: "slic",
            detail: format!("{:?} vs {}x{}x1", feature.shape(), h, w),
        });
    }
    if s < 1 || h * w / s < 2 {
        return Err(Error::Config(format!("slic scale {s} leaves fewer than 2 superpixels")));
    }
    let n = h * w;
    let k_target = n / s;

    // Standardize the feature channel.
    let mean = feature.sum() / n as f64;
    let var = feature.data().iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let inv_std = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    let feat: Vec<f64> = feature.data().iter().map(|&v| (v - mean) * inv_std).collect();

    // Regular grid of initial centers.
    let step = (n as f64 / k_target as f64).sqrt();
    let rows = ((h as f64 / step).round() as usize).max(1);
    let cols = ((w as f64 / step).round() as usize).max(1);
    let mut centers: Vec<(f64, f64, f64)> = Vec::with_capacity(rows * cols); // (feat, y, x)
    for gr in 0..rows {
        for gc in 0..cols {
            let cy = ((gr as f64 + 0.5) * h as f64 / rows as f64).min(h as f64 - 1.0);
            let cx = ((gc as f64 + 0.5) * w as f64 / cols as f64).min(w as f64 - 1.0);
            let p = (cy as usize) * w + cx as usize;
            centers.push((feat[p], cy, cx));
        }
    }
    // Coordinates are normalized by the image area so the standardized
    // feature term dominates; compactness only regularizes ties.
    let spatial_w = SLIC_COMPACTNESS / (h * w) as f64;

    let mut labels = vec![0usize; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..SLIC_ITERS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, &(cf, cy, cx)) in centers.iter().enumerate() {
            let r0 = (cy - 2.0 * step).floor().max(0.0) as usize;
            let r1 = ((cy + 2.0 * step).ceil() as usize).min(h - 1);
            let c0 = (cx - 2.0 * step).floor().max(0.0) as usize;
            let c1 = ((cx + 2.0 * step).ceil() as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let p = r * w + c;
                    let df = feat[p] - cf;
                    let dy = r as f64 - cy;
                    let dx = c as f64 - cx;
                    let d = df * df + spatial_w * (dy * dy + dx * dx);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        // Recompute centers as member means.
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); centers.len()];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let a = &mut acc[labels[p]];
                a.0 += feat[p];
                a.1 += r as f64;
                a.2 += c as f64;
                a.3 += 1;
            }
        }
        for (ci, &(f, y, x, cnt)) in acc.iter().enumerate() {
            if cnt > 0 {
                centers[ci] = (f / cnt as f64, y / cnt as f64, x / cnt as f64);
            }
        }
    }

    let labels = enforce_connectivity(&labels, h, w, (s / 4).max(1));
    SuperpixelGraph::from_labels(h, w, labels)
}

/// Relabel connected components in raster order; components smaller than
/// `min_size` are absorbed into the previously seen adjacent component.
fn enforce_connectivity(labels: &[usize], h: usize, w: usize, min_size: usize) -> Vec<usize> {
    let n = h * w;
    let mut out = vec![usize::MAX; n];
    let mut next = 0usize;
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        // Label of an already-relabeled 4-neighbor, for potential absorption.
        let (sr, sc) = (start / w, start % w);
        let mut adjacent = usize::MAX;
        if sr > 0 && out[start - w] != usize::MAX {
            adjacent = out[start - w];
        } else if sc > 0 && out[start - 1] != usize::MAX {
            adjacent = out[start - 1];
        }
        component.clear();
        stack.push(start);
        out[start] = next;
        while let Some(p) = stack.pop() {
            component.push(p);
            let (r, c) = (p / w, p % w);
            let mut try_push = |q: usize| {
                if out[q] == usize::MAX && labels[q] == labels[start] {
                    out[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                try_push(p - w);
            }
            if r + 1 < h {
                try_push(p + w);
            }
            if c > 0 {
                try_push(p - 1);
            }
            if c + 1 < w {
                try_push(p + 1);
            }
        }
        if component.len() < min_size && adjacent != usize::MAX {
            for &p in &component {
                out[p] = adjacent;
            }
        } else {
            next += 1;
        }
    }
    out
}
