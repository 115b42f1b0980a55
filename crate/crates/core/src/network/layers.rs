//! Pointwise layers and reductions with hand-written backward passes.

use crate::error::{KpError, Result};
use crate::geometry::NeighborhoodMatrix;
use crate::math::Mat;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_MOMENTUM: f64 = 0.98;
pub const BN_EPSILON: f64 = 1e-6;

/// 1x1 convolution: every point's features through one shared matrix,
/// no bias (the following batch norm's affine absorbs it).
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryParams {
    pub weight: Mat, // d_in x d_out
}

impl UnaryParams {
    pub fn forward(&self, x: &Mat) -> Mat {
        x.matmul(&self.weight)
    }

    /// Returns (grad wrt input, grad wrt weight).
    pub fn backward(&self, x: &Mat, upstream: &Mat) -> (Mat, Mat) {
        let grad_x = upstream.matmul_t(&self.weight);
        let grad_w = x.t_matmul(upstream);
        (grad_x, grad_w)
    }
}

/// Fully connected layer with bias, used in the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Mat, // d_in x d_out
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn forward(&self, x: &Mat) -> Mat {
        let mut out = x.matmul(&self.weight);
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    /// Returns (grad wrt input, grad wrt weight, grad wrt bias).
    pub fn backward(&self, x: &Mat, upstream: &Mat) -> (Mat, Mat, Vec<f64>) {
        let grad_x = upstream.matmul_t(&self.weight);
        let grad_w = x.t_matmul(upstream);
        let mut grad_b = vec![0.0; self.bias.len()];
        for r in 0..upstream.rows {
            for (g, &u) in grad_b.iter_mut().zip(upstream.row(r)) {
                *g += u;
            }
        }
        (grad_x, grad_w, grad_b)
    }
}

/// Batch normalization over the stacked point axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn normalize(&self, x: &Mat, mean: &[f64], var: &[f64]) -> Mat {
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let xr = x.row(r);
            let or = out.row_mut(r);
            for c in 0..x.cols {
                let inv = 1.0 / (var[c] + BN_EPSILON).sqrt();
                or[c] = self.gamma[c] * (xr[c] - mean[c]) * inv + self.beta[c];
            }
        }
        out
    }

    /// Normalizes with batch statistics when `training` (updating the
    /// running ones, `running = momentum * running + (1 - momentum) * batch`)
    /// or with the frozen running statistics otherwise.
    pub fn forward(&mut self, x: &Mat, training: bool) -> (Mat, BnCtx) {
        if !training {
            let out = self.normalize(x, &self.running_mean, &self.running_var);
            return (
                out,
                BnCtx {
                    input: x.clone(),
                    mean: self.running_mean.clone(),
                    var: self.running_var.clone(),
                    through_stats: false,
                },
            );
        }
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        let mut var = vec![0.0; x.cols];
        let mut lo = vec![f64::INFINITY; x.cols];
        let mut hi = vec![f64::NEG_INFINITY; x.cols];
        for r in 0..x.rows {
            for (c, &v) in x.row(r).iter().enumerate() {
                mean[c] += v;
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        // a bitwise-constant column has zero variance exactly; an inexact
        // mean would otherwise turn summation rounding into noise that the
        // epsilon-floored normalization amplifies a thousandfold
        for c in 0..x.cols {
            if lo[c] == hi[c] {
                mean[c] = lo[c];
            }
        }
        for r in 0..x.rows {
            for c in 0..x.cols {
                let d = x.get(r, c) - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);

        for c in 0..x.cols {
            self.running_mean[c] = BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
            self.running_var[c] = BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
        }

        let out = self.normalize(x, &mean, &var);
        (
            out,
            BnCtx {
                input: x.clone(),
                mean,
                var,
                through_stats: true,
            },
        )
    }

    pub fn forward_train(&mut self, x: &Mat) -> (Mat, BnCtx) {
        self.forward(x, true)
    }

    /// Frozen statistics, no side effects, no context.
    pub fn forward_infer(&self, x: &Mat) -> Mat {
        self.normalize(x, &self.running_mean, &self.running_var)
    }

    /// Returns (grad wrt input, grad wrt gamma, grad wrt beta). With batch
    /// statistics the gradient flows through the mean and variance; with
    /// frozen statistics they are constants.
    pub fn backward(&self, ctx: &BnCtx, upstream: &Mat) -> (Mat, Vec<f64>, Vec<f64>) {
        let x = &ctx.input;
        let n = x.rows.max(1) as f64;
        let cols = x.cols;
        let mut grad_gamma = vec![0.0; cols];
        let mut grad_beta = vec![0.0; cols];
        let mut sum_dxhat = vec![0.0; cols];
        let mut sum_dxhat_xhat = vec![0.0; cols];

        let inv_std: Vec<f64> = ctx
            .var
            .iter()
            .map(|&v| 1.0 / (v + BN_EPSILON).sqrt())
            .collect();

        for r in 0..x.rows {
            let xr = x.row(r);
            let ur = upstream.row(r);
            for c in 0..cols {
                let xhat = (xr[c] - ctx.mean[c]) * inv_std[c];
                grad_beta[c] += ur[c];
                grad_gamma[c] += ur[c] * xhat;
                let dxhat = ur[c] * self.gamma[c];
                sum_dxhat[c] += dxhat;
                sum_dxhat_xhat[c] += dxhat * xhat;
            }
        }

        let mut grad_x = Mat::zeros(x.rows, cols);
        for r in 0..x.rows {
            let xr = x.row(r);
            let ur = upstream.row(r);
            let gr = grad_x.row_mut(r);
            for c in 0..cols {
                let dxhat = ur[c] * self.gamma[c];
                if ctx.through_stats {
                    let xhat = (xr[c] - ctx.mean[c]) * inv_std[c];
                    gr[c] = inv_std[c] * (dxhat - sum_dxhat[c] / n - xhat * sum_dxhat_xhat[c] / n);
                } else {
                    gr[c] = dxhat * inv_std[c];
                }
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }
}

#[derive(Debug, Clone)]
pub struct BnCtx {
    pub input: Mat,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Whether mean/var were computed from this batch (gradient flows
    /// through them) or frozen running values.
    pub through_stats: bool,
}

pub fn leaky_relu(x: &Mat) -> Mat {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    out
}

pub fn leaky_relu_backward(input: &Mat, upstream: &Mat) -> Mat {
    let mut out = upstream.clone();
    for (g, &x) in out.data.iter_mut().zip(&input.data) {
        if x <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    out
}

/// Inverted dropout: surviving entries are scaled by `1 / keep` during
/// training so inference applies the identity.
pub fn dropout_mask<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, drop: f64) -> Mat {
    let keep = 1.0 - drop;
    let mut mask = Mat::zeros(rows, cols);
    for v in mask.data.iter_mut() {
        *v = if rng.random_range(0.0..1.0) < drop {
            0.0
        } else {
            1.0 / keep
        };
    }
    mask
}

pub fn apply_mask(x: &Mat, mask: &Mat) -> Mat {
    let mut out = x.clone();
    for (v, &m) in out.data.iter_mut().zip(&mask.data) {
        *v *= m;
    }
    out
}

/// Per-element mean over that element's points only.
pub fn global_average_pool(features: &Mat, element_ids: &[u32], n_elements: usize) -> Result<Mat> {
    if element_ids.len() != features.rows {
        return Err(KpError::ShapeMismatch {
            context: "element ids vs feature rows",
            expected: features.rows,
            got: element_ids.len(),
        });
    }
    let mut counts = vec![0usize; n_elements];
    let mut out = Mat::zeros(n_elements, features.cols);
    for (r, &e) in element_ids.iter().enumerate() {
        counts[e as usize] += 1;
        let or = out.row_mut(e as usize);
        for (o, &v) in or.iter_mut().zip(features.row(r)) {
            *o += v;
        }
    }
    for (e, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(KpError::EmptyElement { index: e });
        }
        let inv = 1.0 / c as f64;
        out.row_mut(e).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

pub fn global_average_pool_backward(
    upstream: &Mat,
    element_ids: &[u32],
    n_points: usize,
) -> Mat {
    let mut counts = vec![0usize; upstream.rows];
    for &e in element_ids {
        counts[e as usize] += 1;
    }
    let mut grad = Mat::zeros(n_points, upstream.cols);
    for (r, &e) in element_ids.iter().enumerate() {
        let inv = 1.0 / counts[e as usize] as f64;
        let gr = grad.row_mut(r);
        for (g, &u) in gr.iter_mut().zip(upstream.row(e as usize)) {
            *g = u * inv;
        }
    }
    grad
}

/// Copies each fine point's features from its assigned coarse point.
pub fn nearest_upsample(coarse: &Mat, assignment: &[u32]) -> Mat {
    let mut out = Mat::zeros(assignment.len(), coarse.cols);
    for (r, &i) in assignment.iter().enumerate() {
        out.row_mut(r).copy_from_slice(coarse.row(i as usize));
    }
    out
}

pub fn nearest_upsample_backward(upstream: &Mat, assignment: &[u32], n_coarse: usize) -> Mat {
    let mut grad = Mat::zeros(n_coarse, upstream.cols);
    for (r, &i) in assignment.iter().enumerate() {
        let gr = grad.row_mut(i as usize);
        for (g, &u) in gr.iter_mut().zip(upstream.row(r)) {
            *g += u;
        }
    }
    grad
}

/// Channelwise max over each row's neighbors; rows with no neighbors yield
/// zeros. Returns the winning support index per (query, channel) for the
/// backward pass (`u32::MAX` marks an empty row).
pub fn max_pool_rows(features: &Mat, rows: &NeighborhoodMatrix) -> (Mat, Vec<u32>) {
    let mut out = Mat::zeros(rows.n_queries, features.cols);
    let mut argmax = vec![u32::MAX; rows.n_queries * features.cols];
    for q in 0..rows.n_queries {
        let neigh = rows.neighbors(q);
        if neigh.is_empty() {
            continue;
        }
        let or = out.row_mut(q);
        for (c, o) in or.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = u32::MAX;
            for &i in neigh {
                let v = features.get(i as usize, c);
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            *o = best;
            argmax[q * features.cols + c] = best_i;
        }
    }
    (out, argmax)
}

pub fn max_pool_rows_backward(
    upstream: &Mat,
    argmax: &[u32],
    n_support: usize,
) -> Mat {
    let mut grad = Mat::zeros(n_support, upstream.cols);
    for q in 0..upstream.rows {
        for c in 0..upstream.cols {
            let i = argmax[q * upstream.cols + c];
            if i != u32::MAX {
                grad.row_mut(i as usize)[c] += upstream.get(q, c);
            }
        }
    }
    grad
}

/// Mean cross-entropy over rows with a numerically stable softmax.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Mat, labels: &[u32]) -> Result<(f64, Mat)> {
    if labels.len() != logits.rows {
        return Err(KpError::ShapeMismatch {
            context: "labels vs logit rows",
            expected: logits.rows,
            got: labels.len(),
        });
    }
    let n = logits.rows as f64;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for r in 0..logits.rows {
        let row = logits.row(r);
        let label = labels[r] as usize;
        if label >= logits.cols {
            return Err(KpError::ShapeMismatch {
                context: "label id vs class count",
                expected: logits.cols,
                got: label,
            });
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        loss += z.ln() - (row[label] - m);
        let gr = grad.row_mut(r);
        for (c, g) in gr.iter_mut().enumerate() {
            let p = (row[c] - m).exp() / z;
            *g = (p - if c == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Per-row argmax, ties to the lower class index.
pub fn argmax_rows(logits: &Mat) -> Vec<u32> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = (f64::NEG_INFINITY, 0u32);
            for (c, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, c as u32);
                }
            }
            best.1
        })
        .collect()
}
