//! The kernel point convolution operator family.
//!
//! A convolution at query `x` sums, over its radius neighbors `x_i` and the
//! K kernel points, the neighbor features mapped through the kernel-point
//! weight matrices and scaled by the linear correlation between the centered
//! neighbor `y_i = x_i - x` and the kernel point. The deformable variant
//! shifts every kernel point by a per-query offset before the correlation.
//!
//! Two forward paths are kept: a blocked one that precomputes the
//! correlation block (`N' x n_max x K`, about `8 * N' * n_max * K` bytes,
//! traded against recomputing correlations K times per neighbor) and a naive
//! triple loop used as the reference oracle. Per query the blocked path
//! accumulates neighbors in row order, kernel points inner, in f64, so
//! results are reproducible bit for bit.

use crate::error::{KpError, Result};
use crate::geometry::NeighborhoodMatrix;
use crate::kernel_points::LayerKernel;
use crate::math::{Mat, Vec3};

/// Per-kernel-point weight matrices, all `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub mats: Vec<Mat>,
}

impl ConvWeights {
    pub fn zeros(k: usize, d_in: usize, d_out: usize) -> Self {
        ConvWeights {
            mats: (0..k).map(|_| Mat::zeros(d_in, d_out)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.mats.len()
    }

    pub fn d_in(&self) -> usize {
        self.mats.first().map_or(0, |m| m.rows)
    }

    pub fn d_out(&self) -> usize {
        self.mats.first().map_or(0, |m| m.cols)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        for m in &self.mats {
            if m.rows != d_in || m.cols != d_out {
                return Err(KpError::ShapeMismatch {
                    context: "kernel weight matrix dims",
                    expected: d_in * d_out,
                    got: m.rows * m.cols,
                });
            }
            if !m.is_finite() {
                return Err(KpError::NonFinite);
            }
        }
        Ok(())
    }

}

/// Per-query kernel point shifts, `n_queries x k` of 3D vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    shifts: Vec<Vec3>,
    pub n_queries: usize,
    pub k: usize,
}

impl OffsetField {
    pub fn zeros(n_queries: usize, k: usize) -> Self {
        OffsetField {
            shifts: vec![Vec3::ZERO; n_queries * k],
            n_queries,
            k,
        }
    }

    pub fn from_flat(shifts: Vec<Vec3>, n_queries: usize, k: usize) -> Result<Self> {
        if shifts.len() != n_queries * k {
            return Err(KpError::ShapeMismatch {
                context: "offset field size",
                expected: n_queries * k,
                got: shifts.len(),
            });
        }
        Ok(OffsetField {
            shifts,
            n_queries,
            k,
        })
    }

    #[inline]
    pub fn get(&self, query: usize, k: usize) -> Vec3 {
        self.shifts[query * self.k + k]
    }

    #[inline]
    pub fn get_mut(&mut self, query: usize, k: usize) -> &mut Vec3 {
        &mut self.shifts[query * self.k + k]
    }

    pub fn flat(&self) -> &[Vec3] {
        &self.shifts
    }

    pub fn is_finite(&self) -> bool {
        self.shifts.iter().all(|v| v.is_finite())
    }

    /// Reinterprets an `n x 3k` matrix as an offset field.
    pub fn from_matrix(m: &Mat, k: usize) -> Result<Self> {
        if m.cols != 3 * k {
            return Err(KpError::OffsetWidth {
                expected: 3 * k,
                got: m.cols,
            });
        }
        let mut shifts = Vec::with_capacity(m.rows * k);
        for q in 0..m.rows {
            let row = m.row(q);
            for kk in 0..k {
                shifts.push(Vec3::new(row[3 * kk], row[3 * kk + 1], row[3 * kk + 2]));
            }
        }
        Ok(OffsetField {
            shifts,
            n_queries: m.rows,
            k,
        })
    }

    /// Inverse of [`OffsetField::from_matrix`].
    pub fn to_matrix(&self) -> Mat {
        let mut m = Mat::zeros(self.n_queries, 3 * self.k);
        for q in 0..self.n_queries {
            let row = m.row_mut(q);
            for kk in 0..self.k {
                let v = self.shifts[q * self.k + kk];
                row[3 * kk] = v.x;
                row[3 * kk + 1] = v.y;
                row[3 * kk + 2] = v.z;
            }
        }
        m
    }
}

/// Gradients of a convolution, shaped like its inputs.
#[derive(Debug, Clone)]
pub struct ConvGradients {
    pub wrt_features: Mat,
    pub wrt_weights: Vec<Mat>,
    pub wrt_offsets: Option<OffsetField>,
}

/// Linear correlation `max(0, 1 - |y - kernel_point| / sigma)`.
#[inline]
pub fn correlation(y: Vec3, kernel_point: Vec3, sigma: f64) -> f64 {
    (1.0 - y.dist(kernel_point) / sigma).max(0.0)
}

fn check_shapes(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    weights: &ConvWeights,
    offsets: Option<&OffsetField>,
) -> Result<()> {
    weights.validate()?;
    if features.rows != supports.len() {
        return Err(KpError::ShapeMismatch {
            context: "features rows vs supports",
            expected: supports.len(),
            got: features.rows,
        });
    }
    if features.cols != weights.d_in() {
        return Err(KpError::ShapeMismatch {
            context: "feature width vs weights d_in",
            expected: weights.d_in(),
            got: features.cols,
        });
    }
    if neighbors.n_queries != queries.len() {
        return Err(KpError::ShapeMismatch {
            context: "neighborhood rows vs queries",
            expected: queries.len(),
            got: neighbors.n_queries,
        });
    }
    if neighbors.n_support != supports.len() {
        return Err(KpError::ShapeMismatch {
            context: "neighborhood support count",
            expected: supports.len(),
            got: neighbors.n_support,
        });
    }
    if kernel.k() != weights.k() {
        return Err(KpError::ShapeMismatch {
            context: "kernel points vs weight matrices",
            expected: kernel.k(),
            got: weights.k(),
        });
    }
    if let Some(of) = offsets {
        if of.n_queries != queries.len() || of.k != kernel.k() {
            return Err(KpError::ShapeMismatch {
                context: "offset field shape",
                expected: queries.len() * kernel.k(),
                got: of.n_queries * of.k,
            });
        }
    }
    Ok(())
}

/// Correlation block `n_queries x n_max x k`, shadow slots zero.
pub fn h_block(
    queries: &[Vec3],
    supports: &[Vec3],
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    offsets: Option<&OffsetField>,
) -> Vec<f64> {
    let k = kernel.k();
    let n_max = neighbors.n_max;
    let mut block = vec![0.0; queries.len() * n_max * k];
    for (q, &query) in queries.iter().enumerate() {
        let row = neighbors.row(q);
        let base = q * n_max * k;
        for (slot, &idx) in row.iter().enumerate() {
            if idx == neighbors.shadow() {
                break; // shadow slots are a contiguous tail
            }
            let y = supports[idx as usize] - query;
            for (kk, &kp) in kernel.points.iter().enumerate() {
                let z = match offsets {
                    Some(of) => kp + of.get(q, kk),
                    None => kp,
                };
                block[base + slot * k + kk] = correlation(y, z, kernel.sigma);
            }
        }
    }
    block
}

fn forward_impl(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    weights: &ConvWeights,
    offsets: Option<&OffsetField>,
) -> Result<Mat> {
    check_shapes(queries, supports, features, neighbors, kernel, weights, offsets)?;
    let k = kernel.k();
    let d_in = weights.d_in();
    let d_out = weights.d_out();
    let n_max = neighbors.n_max;
    let block = h_block(queries, supports, neighbors, kernel, offsets);

    let mut out = Mat::zeros(queries.len(), d_out);
    // weighted feature sums per kernel point, then one matmul per k
    let mut sums = vec![0.0; k * d_in];
    for q in 0..queries.len() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let row = neighbors.row(q);
        let base = q * n_max * k;
        for (slot, &idx) in row.iter().enumerate() {
            if idx == neighbors.shadow() {
                break;
            }
            let f = features.row(idx as usize);
            let h_row = &block[base + slot * k..base + (slot + 1) * k];
            for (kk, &h) in h_row.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                let s = &mut sums[kk * d_in..(kk + 1) * d_in];
                for (sv, &fv) in s.iter_mut().zip(f) {
                    *sv += h * fv;
                }
            }
        }
        let out_row = out.row_mut(q);
        for (kk, w) in weights.mats.iter().enumerate() {
            let s = &sums[kk * d_in..(kk + 1) * d_in];
            for (din, &sv) in s.iter().enumerate() {
                if sv == 0.0 {
                    continue;
                }
                let w_row = w.row(din);
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += sv * wv;
                }
            }
        }
    }
    Ok(out)
}

/// Rigid kernel point convolution: `out(x) = sum_i sum_k h(y_i, xk) f_i W_k`.
pub fn kpconv_forward(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    weights: &ConvWeights,
) -> Result<Mat> {
    forward_impl(queries, supports, features, neighbors, kernel, weights, None)
}

/// Deformable variant: kernel points shifted per query before correlation.
pub fn deform_kpconv_forward(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    weights: &ConvWeights,
    offsets: &OffsetField,
) -> Result<Mat> {
    forward_impl(
        queries,
        supports,
        features,
        neighbors,
        kernel,
        weights,
        Some(offsets),
    )
}

/// Naive triple-loop reference: neighbors outer, kernel points inner, the
/// feature-weight product expanded in place. Kept as the oracle for the
/// blocked path.
pub fn kpconv_forward_naive(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    weights: &ConvWeights,
    offsets: Option<&OffsetField>,
) -> Result<Mat> {
    check_shapes(queries, supports, features, neighbors, kernel, weights, offsets)?;
    let d_out = weights.d_out();
    let mut out = Mat::zeros(queries.len(), d_out);
    for (q, &query) in queries.iter().enumerate() {
        for &idx in neighbors.neighbors(q) {
            let y = supports[idx as usize] - query;
            let f = features.row(idx as usize);
            for (kk, &kp) in kernel.points.iter().enumerate() {
                let z = match offsets {
                    Some(of) => kp + of.get(q, kk),
                    None => kp,
                };
                let h = correlation(y, z, kernel.sigma);
                if h == 0.0 {
                    continue;
                }
                let w = &weights.mats[kk];
                for d in 0..d_out {
                    let mut acc = 0.0;
                    for (din, &fv) in f.iter().enumerate() {
                        acc += fv * w.get(din, d);
                    }
                    out.row_mut(q)[d] += h * acc;
                }
            }
        }
    }
    Ok(out)
}

/// Offsets as the output of a rigid convolution mapping `d_in` features to
/// `3k` values, reshaped per query into k shift vectors.
pub fn predict_offsets(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    offset_kernel: &LayerKernel,
    offset_weights: &ConvWeights,
    k: usize,
) -> Result<OffsetField> {
    if offset_weights.d_out() != 3 * k {
        return Err(KpError::OffsetWidth {
            expected: 3 * k,
            got: offset_weights.d_out(),
        });
    }
    let raw = kpconv_forward(queries, supports, features, neighbors, offset_kernel, offset_weights)?;
    OffsetField::from_matrix(&raw, k)
}

/// Analytic gradients of the (rigid or deformable) forward pass with respect
/// to input features, every weight matrix, and the offsets when present.
///
/// At the correlation kink `|y - z| == sigma` and at `|y - z| == 0` the
/// subgradient 0 is used for the offset gradient.
pub fn kpconv_backward(
    queries: &[Vec3],
    supports: &[Vec3],
    features: &Mat,
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    weights: &ConvWeights,
    offsets: Option<&OffsetField>,
    upstream: &Mat,
) -> Result<ConvGradients> {
    check_shapes(queries, supports, features, neighbors, kernel, weights, offsets)?;
    if upstream.rows != queries.len() || upstream.cols != weights.d_out() {
        return Err(KpError::ShapeMismatch {
            context: "upstream gradient shape",
            expected: queries.len() * weights.d_out(),
            got: upstream.rows * upstream.cols,
        });
    }
    let k = kernel.k();
    let d_in = weights.d_in();
    let d_out = weights.d_out();
    let sigma = kernel.sigma;

    let mut wrt_features = Mat::zeros(features.rows, d_in);
    let mut wrt_weights: Vec<Mat> = (0..k).map(|_| Mat::zeros(d_in, d_out)).collect();
    let mut wrt_offsets = offsets.map(|of| OffsetField::zeros(of.n_queries, of.k));

    // scratch: v_k = W_k g_q per kernel point, s_k = sum_i h f_i per kernel point
    let mut v = vec![0.0; k * d_in];
    let mut s = vec![0.0; k * d_in];
    for (q, &query) in queries.iter().enumerate() {
        let g = upstream.row(q);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (kk, w) in weights.mats.iter().enumerate() {
            let vk = &mut v[kk * d_in..(kk + 1) * d_in];
            for (din, vv) in vk.iter_mut().enumerate() {
                let w_row = w.row(din);
                let mut acc = 0.0;
                for (&wv, &gv) in w_row.iter().zip(g) {
                    acc += wv * gv;
                }
                *vv = acc;
            }
        }
        s.iter_mut().for_each(|x| *x = 0.0);

        for &idx in neighbors.neighbors(q) {
            let i = idx as usize;
            let y = supports[i] - query;
            let f = features.row(i);
            let grad_f = wrt_features.row_mut(i);
            for kk in 0..k {
                let z = match offsets {
                    Some(of) => kernel.points[kk] + of.get(q, kk),
                    None => kernel.points[kk],
                };
                let d = y.dist(z);
                let h = 1.0 - d / sigma;
                if h <= 0.0 {
                    continue;
                }
                let vk = &v[kk * d_in..(kk + 1) * d_in];
                for (gf, &vv) in grad_f.iter_mut().zip(vk) {
                    *gf += h * vv;
                }
                let sk = &mut s[kk * d_in..(kk + 1) * d_in];
                for (sv, &fv) in sk.iter_mut().zip(f) {
                    *sv += h * fv;
                }
                if let Some(go) = wrt_offsets.as_mut() {
                    if d > 0.0 {
                        // dh/dz = (y - z) / (sigma d); chain with t = f . v_k
                        let mut t = 0.0;
                        for (&fv, &vv) in f.iter().zip(vk) {
                            t += fv * vv;
                        }
                        *go.get_mut(q, kk) += (y - z).scaled(t / (sigma * d));
                    }
                }
            }
        }

        for (kk, gw) in wrt_weights.iter_mut().enumerate() {
            let sk = &s[kk * d_in..(kk + 1) * d_in];
            for (din, &sv) in sk.iter().enumerate() {
                if sv == 0.0 {
                    continue;
                }
                let gw_row = gw.row_mut(din);
                for (o, &gv) in gw_row.iter_mut().zip(g) {
                    *o += sv * gv;
                }
            }
        }
    }

    Ok(ConvGradients {
        wrt_features,
        wrt_weights,
        wrt_offsets,
    })
}

/// Fitting loss of one query: every deformed kernel point is pulled toward
/// its nearest neighbor, `sum_k min_i (|y_i - z_k| / sigma)^2`. Queries with
/// no neighbors contribute zero.
pub fn fitting_loss(neighbors_y: &[Vec3], deformed: &[Vec3], sigma: f64) -> f64 {
    if neighbors_y.is_empty() {
        return 0.0;
    }
    let mut loss = 0.0;
    for &z in deformed {
        let mut best = f64::INFINITY;
        for &y in neighbors_y {
            best = best.min(y.dist_sq(z));
        }
        loss += best / (sigma * sigma);
    }
    loss
}

/// [`fitting_loss`] plus its gradient with respect to the deformed points.
pub fn fitting_loss_grad(neighbors_y: &[Vec3], deformed: &[Vec3], sigma: f64) -> (f64, Vec<Vec3>) {
    let mut grads = vec![Vec3::ZERO; deformed.len()];
    if neighbors_y.is_empty() {
        return (0.0, grads);
    }
    let mut loss = 0.0;
    for (kk, &z) in deformed.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (i, &y) in neighbors_y.iter().enumerate() {
            let d = y.dist_sq(z);
            if d < best.0 {
                best = (d, i);
            }
        }
        loss += best.0 / (sigma * sigma);
        grads[kk] = (z - neighbors_y[best.1]).scaled(2.0 / (sigma * sigma));
    }
    (loss, grads)
}

/// Repulsive loss between deformed kernel points whose influence areas
/// overlap, `sum_k sum_{l != k} h(z_k, z_l)^2` (each pair counted twice).
pub fn repulsive_loss(deformed: &[Vec3], sigma: f64) -> f64 {
    let mut loss = 0.0;
    for (kk, &a) in deformed.iter().enumerate() {
        for (ll, &b) in deformed.iter().enumerate() {
            if kk == ll {
                continue;
            }
            let h = correlation(a, b, sigma);
            loss += h * h;
        }
    }
    loss
}

/// [`repulsive_loss`] plus its gradient with respect to the deformed points.
pub fn repulsive_loss_grad(deformed: &[Vec3], sigma: f64) -> (f64, Vec<Vec3>) {
    let mut grads = vec![Vec3::ZERO; deformed.len()];
    let mut loss = 0.0;
    for (kk, &a) in deformed.iter().enumerate() {
        for (ll, &b) in deformed.iter().enumerate() {
            if kk == ll {
                continue;
            }
            let d = a.dist(b);
            let h = 1.0 - d / sigma;
            if h <= 0.0 {
                continue;
            }
            loss += h * h;
            if d > 0.0 {
                // d(h^2)/dz splits over both endpoints of the ordered term
                let pull = (a - b).scaled(-2.0 * h / (sigma * d));
                grads[kk] += pull;
                grads[ll] += pull.scaled(-1.0);
            }
        }
    }
    (loss, grads)
}

/// Regularization loss over all queries, `sum_x L_fit(x) + L_rep(x)`, with
/// its gradient with respect to the offsets.
pub fn regularization_loss(
    queries: &[Vec3],
    supports: &[Vec3],
    neighbors: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    offsets: &OffsetField,
) -> Result<(f64, OffsetField)> {
    if offsets.n_queries != queries.len() || offsets.k != kernel.k() {
        return Err(KpError::ShapeMismatch {
            context: "offset field shape",
            expected: queries.len() * kernel.k(),
            got: offsets.n_queries * offsets.k,
        });
    }
    let sigma = kernel.sigma;
    let mut grad = OffsetField::zeros(offsets.n_queries, offsets.k);
    let mut total = 0.0;
    let mut deformed = vec![Vec3::ZERO; kernel.k()];
    let mut ys: Vec<Vec3> = Vec::new();
    for (q, &query) in queries.iter().enumerate() {
        for (kk, z) in deformed.iter_mut().enumerate() {
            *z = kernel.points[kk] + offsets.get(q, kk);
        }
        ys.clear();
        ys.extend(
            neighbors
                .neighbors(q)
                .iter()
                .map(|&i| supports[i as usize] - query),
        );
        let (fit, fit_grad) = fitting_loss_grad(&ys, &deformed, sigma);
        let (rep, rep_grad) = repulsive_loss_grad(&deformed, sigma);
        total += fit + rep;
        for kk in 0..kernel.k() {
            *grad.get_mut(q, kk) += fit_grad[kk] + rep_grad[kk];
        }
    }
    Ok((total, grad))
}
