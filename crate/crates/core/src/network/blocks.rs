//! Bottleneck blocks: unary / KPConv / unary with batch norm, leaky ReLU and
//! a residual shortcut (identity, or max pooling plus 1x1 when strided or
//! widening).

use super::layers::{
    leaky_relu, leaky_relu_backward, max_pool_rows, max_pool_rows_backward, BnCtx, BnParams,
    UnaryParams,
};
use crate::conv::{
    deform_kpconv_forward, kpconv_backward, kpconv_forward, predict_offsets, regularization_loss,
    ConvWeights, OffsetField,
};
use crate::error::Result;
use crate::geometry::NeighborhoodMatrix;
use crate::kernel_points::LayerKernel;
use crate::math::{Mat, Vec3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Weight factor applied to the deformable regularization loss.
pub const REG_WEIGHT: f64 = 0.1;
/// Gradient scale on offset-predictor parameters (their effective learning
/// rate is a tenth of the global one).
pub const OFFSET_GRAD_SCALE: f64 = 0.1;

pub fn init_conv_weights<R: Rng>(rng: &mut R, k: usize, d_in: usize, d_out: usize) -> ConvWeights {
    // K kernel summands share the fan-in, hence the extra 1/K
    let std = (2.0 / (d_in as f64 * k as f64)).sqrt();
    let mut weights = ConvWeights::zeros(k, d_in, d_out);
    for m in &mut weights.mats {
        for v in m.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
    }
    weights
}

pub fn init_unary<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> UnaryParams {
    let std = (2.0 / d_in as f64).sqrt();
    let mut weight = Mat::zeros(d_in, d_out);
    for v in weight.data.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    UnaryParams { weight }
}

/// One convolution with optional learned offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub kernel: LayerKernel,
    pub weights: ConvWeights,
    pub offset: Option<OffsetPredictor>,
}

/// The rigid convolution producing the deformable shifts; its weights start
/// at zero so training begins at the rigid operator.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPredictor {
    pub kernel: LayerKernel,
    pub weights: ConvWeights,
}

#[derive(Debug, Clone)]
pub struct ConvUnitCtx {
    pub offsets: Option<OffsetField>,
    pub reg_loss: f64,
    reg_grad: Option<OffsetField>,
}

pub struct ConvUnitGrads {
    pub weights: Vec<Mat>,
    pub offset_weights: Option<Vec<Mat>>,
}

impl ConvUnit {
    pub fn forward(
        &self,
        queries: &[Vec3],
        supports: &[Vec3],
        features: &Mat,
        rows: &NeighborhoodMatrix,
    ) -> Result<(Mat, ConvUnitCtx)> {
        match &self.offset {
            None => {
                let out = kpconv_forward(queries, supports, features, rows, &self.kernel, &self.weights)?;
                Ok((
                    out,
                    ConvUnitCtx {
                        offsets: None,
                        reg_loss: 0.0,
                        reg_grad: None,
                    },
                ))
            }
            Some(pred) => {
                let offsets = predict_offsets(
                    queries,
                    supports,
                    features,
                    rows,
                    &pred.kernel,
                    &pred.weights,
                    self.kernel.k(),
                )?;
                let out = deform_kpconv_forward(
                    queries,
                    supports,
                    features,
                    rows,
                    &self.kernel,
                    &self.weights,
                    &offsets,
                )?;
                let (reg_loss, reg_grad) =
                    regularization_loss(queries, supports, rows, &self.kernel, &offsets)?;
                Ok((
                    out,
                    ConvUnitCtx {
                        offsets: Some(offsets),
                        reg_loss,
                        reg_grad: Some(reg_grad),
                    },
                ))
            }
        }
    }

    /// Backward through the convolution and, when deformable, through the
    /// offset predictor; the regularization gradient (scaled by `reg_weight`)
    /// joins the offset gradient before it reaches the predictor.
    pub fn backward(
        &self,
        queries: &[Vec3],
        supports: &[Vec3],
        features: &Mat,
        rows: &NeighborhoodMatrix,
        ctx: &ConvUnitCtx,
        upstream: &Mat,
        reg_weight: f64,
    ) -> Result<(Mat, ConvUnitGrads)> {
        let grads = kpconv_backward(
            queries,
            supports,
            features,
            rows,
            &self.kernel,
            &self.weights,
            ctx.offsets.as_ref(),
            upstream,
        )?;
        let mut grad_features = grads.wrt_features;
        let mut offset_weights = None;
        if let (Some(pred), Some(mut grad_offsets)) = (&self.offset, grads.wrt_offsets) {
            if let Some(reg_grad) = &ctx.reg_grad {
                for q in 0..grad_offsets.n_queries {
                    for kk in 0..grad_offsets.k {
                        *grad_offsets.get_mut(q, kk) += reg_grad.get(q, kk).scaled(reg_weight);
                    }
                }
            }
            let upstream_offsets = grad_offsets.to_matrix();
            let pred_grads = kpconv_backward(
                queries,
                supports,
                features,
                rows,
                &pred.kernel,
                &pred.weights,
                None,
                &upstream_offsets,
            )?;
            grad_features.add_assign(&pred_grads.wrt_features);
            offset_weights = Some(pred_grads.wrt_weights);
        }
        Ok((
            grad_features,
            ConvUnitGrads {
                weights: grads.wrt_weights,
                offset_weights,
            },
        ))
    }
}

/// A bottleneck block. `unary1` maps `d_in -> d`, the convolution keeps `d`,
/// `unary2` maps `d -> 2d`; the shortcut max-pools over the strided rows and
/// passes a 1x1 convolution when `d_in != 2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub unary1: UnaryParams,
    pub bn1: BnParams,
    pub conv: ConvUnit,
    pub bn2: BnParams,
    pub unary2: UnaryParams,
    pub bn3: BnParams,
    pub shortcut: Option<(UnaryParams, BnParams)>,
    pub strided: bool,
}

pub struct BlockCtx {
    pub input: Mat,
    bn1: BnCtx,
    a_bn: Mat,
    pub conv_in: Mat,
    pub conv_ctx: ConvUnitCtx,
    bn2: BnCtx,
    c_bn: Mat,
    c_act: Mat,
    bn3: BnCtx,
    short_in: Mat,
    pool_argmax: Option<Vec<u32>>,
    short_bn: Option<BnCtx>,
    pre_act: Mat,
}

pub struct BlockGrads {
    pub unary1_w: Mat,
    pub bn1: (Vec<f64>, Vec<f64>),
    pub conv: ConvUnitGrads,
    pub bn2: (Vec<f64>, Vec<f64>),
    pub unary2_w: Mat,
    pub bn3: (Vec<f64>, Vec<f64>),
    pub shortcut: Option<(Mat, Vec<f64>, Vec<f64>)>,
    pub reg_loss: f64,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        disposition: &crate::kernel_points::KernelDisposition,
        d_in: usize,
        d: usize,
        sigma: f64,
        deformable: bool,
        strided: bool,
    ) -> Result<Self> {
        let kernel = crate::kernel_points::prepare_layer_kernel(disposition, sigma, rng.random())?;
        let k = kernel.k();
        let offset = if deformable {
            let off_kernel =
                crate::kernel_points::prepare_layer_kernel(disposition, sigma, rng.random())?;
            Ok::<_, crate::error::KpError>(Some(OffsetPredictor {
                kernel: off_kernel,
                weights: ConvWeights::zeros(k, d, 3 * k),
            }))
        } else {
            Ok(None)
        }?;
        let out_width = 2 * d;
        let shortcut = if d_in != out_width {
            Some((init_unary(rng, d_in, out_width), BnParams::new(out_width)))
        } else {
            None
        };
        Ok(BlockParams {
            unary1: init_unary(rng, d_in, d),
            bn1: BnParams::new(d),
            conv: ConvUnit {
                kernel,
                weights: init_conv_weights(rng, k, d, d),
                offset,
            },
            bn2: BnParams::new(d),
            unary2: init_unary(rng, d, out_width),
            bn3: BnParams::new(out_width),
            shortcut,
            strided,
        })
    }

    pub fn d_in(&self) -> usize {
        self.unary1.weight.rows
    }

    pub fn d_out(&self) -> usize {
        self.unary2.weight.cols
    }

    pub fn is_deformable(&self) -> bool {
        self.conv.offset.is_some()
    }

    /// Forward pass. For strided blocks `queries` are the coarser layer's
    /// points and `rows` the pooling rows; otherwise queries equal supports.
    pub fn forward(
        &mut self,
        x: &Mat,
        queries: &[Vec3],
        supports: &[Vec3],
        rows: &NeighborhoodMatrix,
        training: bool,
    ) -> Result<(Mat, BlockCtx)> {
        let a = self.unary1.forward(x);
        let (a_bn, bn1) = self.bn1.forward(&a, training);
        let conv_in = leaky_relu(&a_bn);

        let (c, conv_ctx) = self.conv.forward(queries, supports, &conv_in, rows)?;
        let (c_bn, bn2) = self.bn2.forward(&c, training);
        let c_act = leaky_relu(&c_bn);

        let pre_residual = self.unary2.forward(&c_act);
        let (b_bn, bn3) = self.bn3.forward(&pre_residual, training);

        let (short_in, pool_argmax) = if self.strided {
            let (pooled, argmax) = max_pool_rows(x, rows);
            (pooled, Some(argmax))
        } else {
            (x.clone(), None)
        };
        let (short_out, short_bn) = match &mut self.shortcut {
            Some((unary, bn)) => {
                let mid = unary.forward(&short_in);
                let (out, ctx) = bn.forward(&mid, training);
                (out, Some(ctx))
            }
            None => (short_in.clone(), None),
        };

        let mut pre_act = b_bn;
        pre_act.add_assign(&short_out);
        let out = leaky_relu(&pre_act);

        Ok((
            out,
            BlockCtx {
                input: x.clone(),
                bn1,
                a_bn,
                conv_in,
                conv_ctx,
                bn2,
                c_bn,
                c_act,
                bn3,
                short_in,
                pool_argmax,
                short_bn,
                pre_act,
            },
        ))
    }

    /// Returns the gradient with respect to the block input and all
    /// parameter gradients.
    pub fn backward(
        &self,
        ctx: &BlockCtx,
        queries: &[Vec3],
        supports: &[Vec3],
        rows: &NeighborhoodMatrix,
        upstream: &Mat,
    ) -> Result<(Mat, BlockGrads)> {
        let g_pre = leaky_relu_backward(&ctx.pre_act, upstream);

        // main branch
        let (g_b, bn3_g, bn3_b) = self.bn3.backward(&ctx.bn3, &g_pre);
        let (g_c_act, unary2_w) = self.unary2.backward(&ctx.c_act, &g_b);
        let g_c_bn = leaky_relu_backward(&ctx.c_bn, &g_c_act);
        let (g_c, bn2_g, bn2_b) = self.bn2.backward(&ctx.bn2, &g_c_bn);
        let (g_conv_in, conv_grads) = self.conv.backward(
            queries,
            supports,
            &ctx.conv_in,
            rows,
            &ctx.conv_ctx,
            &g_c,
            REG_WEIGHT,
        )?;
        let g_a_bn = leaky_relu_backward(&ctx.a_bn, &g_conv_in);
        let (g_a, bn1_g, bn1_b) = self.bn1.backward(&ctx.bn1, &g_a_bn);
        let (mut grad_x, unary1_w) = self.unary1.backward(&ctx.input, &g_a);

        // shortcut branch
        let (g_short_in, shortcut_grads) = match (&self.shortcut, &ctx.short_bn) {
            (Some((unary, bn)), Some(bn_ctx)) => {
                let (g_mid, sc_g, sc_b) = bn.backward(bn_ctx, &g_pre);
                let (g_short_in, sc_w) = unary.backward(&ctx.short_in, &g_mid);
                (g_short_in, Some((sc_w, sc_g, sc_b)))
            }
            _ => (g_pre.clone(), None),
        };
        if self.strided {
            let argmax = ctx.pool_argmax.as_ref().expect("strided ctx has argmax");
            let g_x_short = max_pool_rows_backward(&g_short_in, argmax, ctx.input.rows);
            grad_x.add_assign(&g_x_short);
        } else {
            grad_x.add_assign(&g_short_in);
        }

        Ok((
            grad_x,
            BlockGrads {
                unary1_w,
                bn1: (bn1_g, bn1_b),
                conv: conv_grads,
                bn2: (bn2_g, bn2_b),
                unary2_w,
                bn3: (bn3_g, bn3_b),
                shortcut: shortcut_grads,
                reg_loss: ctx.conv_ctx.reg_loss,
            },
        ))
    }

    /// Trainable parameter vectors in canonical order, paired with the
    /// gradient scale the optimizer applies.
    pub fn params_mut(&mut self) -> Vec<(&mut Vec<f64>, f64)> {
        let mut out: Vec<(&mut Vec<f64>, f64)> = vec![
            (&mut self.unary1.weight.data, 1.0),
            (&mut self.bn1.gamma, 1.0),
            (&mut self.bn1.beta, 1.0),
        ];
        for m in &mut self.conv.weights.mats {
            out.push((&mut m.data, 1.0));
        }
        if let Some(pred) = &mut self.conv.offset {
            for m in &mut pred.weights.mats {
                out.push((&mut m.data, OFFSET_GRAD_SCALE));
            }
        }
        out.push((&mut self.bn2.gamma, 1.0));
        out.push((&mut self.bn2.beta, 1.0));
        out.push((&mut self.unary2.weight.data, 1.0));
        out.push((&mut self.bn3.gamma, 1.0));
        out.push((&mut self.bn3.beta, 1.0));
        if let Some((unary, bn)) = &mut self.shortcut {
            out.push((&mut unary.weight.data, 1.0));
            out.push((&mut bn.gamma, 1.0));
            out.push((&mut bn.beta, 1.0));
        }
        out
    }
}

impl BlockGrads {
    /// Gradient vectors in the same order as [`BlockParams::params_mut`].
    pub fn flat(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> =
            vec![&self.unary1_w.data, &self.bn1.0, &self.bn1.1];
        for m in &self.conv.weights {
            out.push(&m.data);
        }
        if let Some(ow) = &self.conv.offset_weights {
            for m in ow {
                out.push(&m.data);
            }
        }
        out.push(&self.bn2.0);
        out.push(&self.bn2.1);
        out.push(&self.unary2_w.data);
        out.push(&self.bn3.0);
        out.push(&self.bn3.1);
        if let Some((w, g, b)) = &self.shortcut {
            out.push(&w.data);
            out.push(g);
            out.push(b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::radius_neighbors;
    use crate::kernel_points::optimize_disposition;
    use crate::math::rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_geometry(
        n: usize,
        seed: u64,
        radius: f64,
    ) -> (Vec<Vec3>, NeighborhoodMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let rows = radius_neighbors(&points, &points, radius, None).unwrap();
        (points, rows)
    }

    fn toy_block(seed: u64, d_in: usize, d: usize, deformable: bool, strided: bool) -> BlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disposition = optimize_disposition(5, true, 0).unwrap();
        BlockParams::new(&mut rng, &disposition, d_in, d, 0.3, deformable, strided).unwrap()
    }

    #[test]
    fn zero_features_stay_zero() {
        // without biases and with BN on all-zero activations the whole main
        // branch stays zero, as does the identity shortcut
        let (points, rows) = toy_geometry(20, 0, 0.5);
        let mut block = toy_block(1, 8, 4, false, false);
        let x = Mat::zeros(20, 8);
        let (out, _) = block
            .forward(&x, &points, &points, &rows, true)
            .unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_block_lands_on_query_count() {
        let (points, _) = toy_geometry(30, 2, 0.4);
        let queries: Vec<Vec3> = points.iter().take(7).map(|&p| p + Vec3::new(0.01, 0.0, 0.0)).collect();
        let pool = radius_neighbors(&queries, &points, 0.5, None).unwrap();
        let mut block = toy_block(3, 6, 4, false, true);
        let x = {
            let mut m = Mat::zeros(30, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for v in m.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            m
        };
        let (out, _) = block.forward(&x, &queries, &points, &pool, true).unwrap();
        assert_eq!(out.rows, 7);
        assert_eq!(out.cols, 8);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (points, rows) = toy_geometry(30, 5, 0.45);
        let d_in = 5;
        let block = toy_block(6, d_in, 3, true, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = Mat::zeros(30, d_in);
        for v in x.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut upstream = Mat::zeros(30, 6);
        for v in upstream.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }

        let objective = |b: &BlockParams, x: &Mat| -> f64 {
            let mut b = b.clone();
            let (out, ctx) = b.forward(x, &points, &points, &rows, true).unwrap();
            let dot: f64 = out.data.iter().zip(&upstream.data).map(|(o, g)| o * g).sum();
            dot + REG_WEIGHT * ctx.conv_ctx.reg_loss
        };

        let (out_ctx, grads, grad_x) = {
            let mut b = block.clone();
            let (_, ctx) = b.forward(&x, &points, &points, &rows, true).unwrap();
            let (gx, g) = block
                .backward(&ctx, &points, &points, &rows, &upstream)
                .unwrap();
            (ctx, g, gx)
        };
        let _ = out_ctx;

        // step small enough that a kink of the piecewise-linear correlation
        // inside the FD interval cannot dominate the truncation error
        let h = 1e-6;
        // input gradient, sampled
        for i in (0..x.data.len()).step_by(17) {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (objective(&block, &p) - objective(&block, &m)) / (2.0 * h);
            assert!(
                rel_err(fd, grad_x.data[i], 1e-8) < 1e-4,
                "input grad {i}: {fd} vs {}",
                grad_x.data[i]
            );
        }

        // parameter gradients, sampled across every parameter vector
        let mut probe = block.clone();
        let param_vecs = probe.params_mut();
        let grad_vecs = grads.flat();
        assert_eq!(param_vecs.len(), grad_vecs.len());
        let shapes: Vec<usize> = param_vecs.iter().map(|(v, _)| v.len()).collect();
        drop(param_vecs);
        for (pi, &len) in shapes.iter().enumerate() {
            for i in (0..len).step_by((len / 3).max(1)) {
                let mut plus = block.clone();
                let mut minus = block.clone();
                plus.params_mut()[pi].0[i] += h;
                minus.params_mut()[pi].0[i] -= h;
                let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                let analytic = grad_vecs[pi][i];
                assert!(
                    rel_err(fd, analytic, 1e-8) < 1e-4,
                    "param vec {pi} entry {i}: {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn deformable_block_with_zero_offsets_matches_rigid() {
        let (points, rows) = toy_geometry(25, 8, 0.5);
        let mut rigid = toy_block(9, 4, 3, false, false);
        let mut deform = rigid.clone();
        // grafting a zero-initialized offset predictor onto the same weights
        let disposition = optimize_disposition(5, true, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let off_kernel =
            crate::kernel_points::prepare_layer_kernel(&disposition, 0.3, rng.random()).unwrap();
        deform.conv.offset = Some(OffsetPredictor {
            kernel: off_kernel,
            weights: ConvWeights::zeros(5, 3, 15),
        });
        let mut x = Mat::zeros(25, 4);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let (a, _) = rigid.forward(&x, &points, &points, &rows, true).unwrap();
        let (b, _) = deform.forward(&x, &points, &points, &rows, true).unwrap();
        assert_eq!(a.data, b.data);
    }
}
