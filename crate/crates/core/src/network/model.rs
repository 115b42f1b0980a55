//! KP-CNN (classification) and KP-FCNN (segmentation).
//!
//! Five encoder layers of two bottleneck blocks each, the first block of
//! every layer after the first being strided. Classification pools globally
//! and finishes with two fully connected layers; segmentation decodes with
//! nearest upsampling, skip concatenation and unary convolutions.

use super::blocks::{BlockGrads, BlockParams};
use super::config::LayerConfig;
use super::layers::{
    apply_mask, argmax_rows, global_average_pool, global_average_pool_backward, leaky_relu,
    leaky_relu_backward, nearest_upsample, nearest_upsample_backward, BnCtx, BnParams,
    LinearParams, UnaryParams,
};
use crate::error::{KpError, Result};
use crate::geometry::{Batch, NeighborhoodMatrix};
use crate::kernel_points::optimize_disposition;
use crate::math::{Mat, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Segmentation,
}

/// Architecture description; `Network::new` realizes it deterministically
/// from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub task: Task,
    pub input_dim: usize,
    pub num_classes: usize,
    /// First subsampling cell size; doubles at every layer.
    pub dl0: f64,
    /// Bottleneck width D per layer (blocks output 2D).
    pub widths: Vec<usize>,
    pub k_points: usize,
    pub sigma_ratio: f64,
    pub rho: f64,
    /// Deformable kernels in the last five blocks.
    pub deformable: bool,
    /// Hidden width of the classification head.
    pub head_hidden: usize,
    /// Dropout probability in the classification head.
    pub dropout: f64,
    pub neighbor_cap: Option<usize>,
}

impl NetworkSpec {
    pub fn kp_cnn(dl0: f64, input_dim: usize, num_classes: usize, deformable: bool) -> Self {
        NetworkSpec {
            task: Task::Classification,
            input_dim,
            num_classes,
            dl0,
            widths: vec![16, 32, 64, 128, 256],
            k_points: 15,
            sigma_ratio: 1.0,
            rho: 5.0,
            deformable,
            head_hidden: 128,
            dropout: 0.5,
            neighbor_cap: Some(40),
        }
    }

    pub fn kp_fcnn(dl0: f64, input_dim: usize, num_classes: usize, deformable: bool) -> Self {
        NetworkSpec {
            task: Task::Segmentation,
            dropout: 0.0,
            ..NetworkSpec::kp_cnn(dl0, input_dim, num_classes, deformable)
        }
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len()
    }

    /// (strided, deformable) per block, two blocks per layer, flat order.
    pub fn block_flags(&self) -> Vec<(bool, bool)> {
        let n_blocks = 2 * self.n_layers();
        let first_deform = if self.deformable {
            n_blocks.saturating_sub(5)
        } else {
            n_blocks
        };
        (0..n_blocks)
            .map(|b| {
                let strided = b >= 2 && b % 2 == 0;
                (strided, b >= first_deform)
            })
            .collect()
    }

    pub fn layer_configs(&self) -> Vec<LayerConfig> {
        let flags = self.block_flags();
        (0..self.n_layers())
            .map(|j| LayerConfig {
                dl: self.dl0 * (1u64 << j) as f64,
                k_points: self.k_points,
                width: self.widths[j],
                sigma_ratio: self.sigma_ratio,
                rho: self.rho,
                deform_blocks: [flags[2 * j].1, flags[2 * j + 1].1],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Classification {
        fc1: LinearParams,
        fc2: LinearParams,
    },
    Segmentation {
        /// Decoder stages ordered by target layer index ascending
        /// (stage j maps cat(upsampled, skip_j) to width 2*D_j).
        stages: Vec<(UnaryParams, BnParams)>,
        classifier: LinearParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub init_seed: u64,
    pub blocks: Vec<BlockParams>,
    pub head: Head,
}

fn init_linear<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> LinearParams {
    use rand_distr::StandardNormal;
    let std = (2.0 / d_in as f64).sqrt();
    let mut weight = Mat::zeros(d_in, d_out);
    for v in weight.data.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    LinearParams {
        weight,
        bias: vec![0.0; d_out],
    }
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() {
            return Err(KpError::Config("network needs at least one layer".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let disposition = optimize_disposition(spec.k_points, true, rng.random())?;
        let configs = spec.layer_configs();
        let flags = spec.block_flags();

        let mut blocks = Vec::with_capacity(flags.len());
        let mut d_in = spec.input_dim;
        for (b, &(strided, deform)) in flags.iter().enumerate() {
            let layer = b / 2;
            // a strided block convolves from the finer source layer and
            // keeps that layer's influence distance
            let sigma = if strided {
                configs[layer - 1].sigma()
            } else {
                configs[layer].sigma()
            };
            let d = spec.widths[layer];
            let block = BlockParams::new(&mut rng, &disposition, d_in, d, sigma, deform, strided)?;
            d_in = 2 * d;
            blocks.push(block);
        }

        let last_width = 2 * spec.widths[spec.n_layers() - 1];
        let head = match spec.task {
            Task::Classification => Head::Classification {
                fc1: init_linear(&mut rng, last_width, spec.head_hidden),
                fc2: init_linear(&mut rng, spec.head_hidden, spec.num_classes),
            },
            Task::Segmentation => {
                let mut stages = Vec::new();
                for j in 0..spec.n_layers() - 1 {
                    let cat_width = 2 * spec.widths[j + 1] + 2 * spec.widths[j];
                    let out_width = 2 * spec.widths[j];
                    stages.push((
                        super::blocks::init_unary(&mut rng, cat_width, out_width),
                        BnParams::new(out_width),
                    ));
                }
                Head::Segmentation {
                    stages,
                    classifier: init_linear(&mut rng, 2 * spec.widths[0], spec.num_classes),
                }
            }
        };

        Ok(Network {
            spec,
            init_seed: seed,
            blocks,
            head,
        })
    }

    fn block_geometry<'a>(
        &self,
        batch: &'a Batch,
        block_idx: usize,
    ) -> (&'a [Vec3], &'a [Vec3], &'a NeighborhoodMatrix) {
        let layer = block_idx / 2;
        let strided = block_idx >= 2 && block_idx % 2 == 0;
        if strided {
            let pool = self.pool_rows(batch, layer);
            (
                &batch.layers[layer].points,
                &batch.layers[layer - 1].points,
                pool,
            )
        } else {
            let pts = &batch.layers[layer].points;
            (pts, pts, &batch.layers[layer].neighbors)
        }
    }

    fn pool_rows<'a>(&self, batch: &'a Batch, layer: usize) -> &'a NeighborhoodMatrix {
        batch.layers[layer]
            .pool
            .as_ref()
            .expect("strided block needs pooling rows")
    }

    /// Runs the encoder, returning each layer's final features and the block
    /// contexts.
    fn forward_encoder(
        &mut self,
        batch: &Batch,
        training: bool,
    ) -> Result<(Vec<Mat>, Vec<super::blocks::BlockCtx>)> {
        if batch.features.cols != self.spec.input_dim {
            return Err(KpError::ShapeMismatch {
                context: "input feature width",
                expected: self.spec.input_dim,
                got: batch.features.cols,
            });
        }
        if batch.layers.len() != self.spec.n_layers() {
            return Err(KpError::ShapeMismatch {
                context: "batch layers vs network layers",
                expected: self.spec.n_layers(),
                got: batch.layers.len(),
            });
        }
        let mut ctxs = Vec::with_capacity(self.blocks.len());
        let mut skips = Vec::with_capacity(self.spec.n_layers());
        let mut current = batch.features.clone();
        for b in 0..self.blocks.len() {
            let (queries, supports, rows) = {
                let (q, s, r) = self.block_geometry(batch, b);
                (q.to_vec(), s.to_vec(), r.clone())
            };
            let (out, ctx) = self.blocks[b].forward(&current, &queries, &supports, &rows, training)?;
            current = out;
            ctxs.push(ctx);
            if b % 2 == 1 {
                skips.push(current.clone());
            }
        }
        Ok((skips, ctxs))
    }

    /// Forward pass producing logits: per element for classification, per
    /// layer-0 point for segmentation. The dropout mask, when given, is
    /// applied to the classification hidden layer.
    pub fn forward(
        &mut self,
        batch: &Batch,
        training: bool,
        dropout_mask: Option<&Mat>,
    ) -> Result<(Mat, ForwardCtx)> {
        let (skips, block_ctxs) = self.forward_encoder(batch, training)?;
        let last = self.spec.n_layers() - 1;
        match &mut self.head {
            Head::Classification { fc1, fc2 } => {
                let pooled = global_average_pool(
                    &skips[last],
                    &batch.layers[last].element_ids,
                    batch.element_count,
                )?;
                let hidden = fc1.forward(&pooled);
                let hidden_act = leaky_relu(&hidden);
                let dropped = match dropout_mask {
                    Some(mask) => apply_mask(&hidden_act, mask),
                    None => hidden_act.clone(),
                };
                let logits = fc2.forward(&dropped);
                Ok((
                    logits,
                    ForwardCtx {
                        skips,
                        block_ctxs,
                        head: HeadCtx::Classification {
                            pooled,
                            hidden,
                            hidden_act,
                            dropped,
                            dropout_mask: dropout_mask.cloned(),
                        },
                    },
                ))
            }
            Head::Segmentation { stages, classifier } => {
                let mut current = skips[last].clone();
                let mut stage_ctxs: Vec<SegStageCtx> = Vec::new();
                for j in (0..last).rev() {
                    let assignment = batch.layers[j]
                        .upsample
                        .as_ref()
                        .expect("non-final layer has upsample indices");
                    let up = nearest_upsample(&current, assignment);
                    let mut cat = Mat::zeros(up.rows, up.cols + skips[j].cols);
                    for r in 0..up.rows {
                        cat.row_mut(r)[..up.cols].copy_from_slice(up.row(r));
                        cat.row_mut(r)[up.cols..].copy_from_slice(skips[j].row(r));
                    }
                    let (unary, bn) = &mut stages[j];
                    let pre = unary.forward(&cat);
                    let (pre_bn, bn_ctx) = bn.forward(&pre, training);
                    let out = leaky_relu(&pre_bn);
                    stage_ctxs.push(SegStageCtx {
                        layer: j,
                        cat,
                        bn: bn_ctx,
                        pre_bn,
                        up_cols: up.cols,
                    });
                    current = out;
                }
                let logits = classifier.forward(&current);
                Ok((
                    logits,
                    ForwardCtx {
                        skips,
                        block_ctxs,
                        head: HeadCtx::Segmentation {
                            stage_ctxs,
                            final_features: current,
                        },
                    },
                ))
            }
        }
    }

    /// Deformable regularization loss accumulated over every block of the
    /// last forward pass.
    pub fn reg_loss(ctx: &ForwardCtx) -> f64 {
        ctx.block_ctxs.iter().map(|c| c.conv_ctx.reg_loss).sum()
    }

    /// Backward from the logits gradient to every parameter and the input
    /// features.
    pub fn backward(
        &self,
        batch: &Batch,
        ctx: &ForwardCtx,
        grad_logits: &Mat,
    ) -> Result<NetworkGrads> {
        let last = self.spec.n_layers() - 1;
        let mut grad_skips: Vec<Option<Mat>> = vec![None; self.spec.n_layers()];
        let head_grads = match (&self.head, &ctx.head) {
            (
                Head::Classification { fc1, fc2 },
                HeadCtx::Classification {
                    pooled,
                    hidden,
                    dropped,
                    dropout_mask,
                    ..
                },
            ) => {
                let (g_dropped, fc2_w, fc2_b) = fc2.backward(dropped, grad_logits);
                let g_hidden_act = match dropout_mask {
                    Some(mask) => apply_mask(&g_dropped, mask),
                    None => g_dropped,
                };
                let g_hidden = leaky_relu_backward(hidden, &g_hidden_act);
                let (g_pooled, fc1_w, fc1_b) = fc1.backward(pooled, &g_hidden);
                let g_last = global_average_pool_backward(
                    &g_pooled,
                    &batch.layers[last].element_ids,
                    batch.layers[last].points.len(),
                );
                grad_skips[last] = Some(g_last);
                HeadGrads::Classification {
                    fc1: (fc1_w, fc1_b),
                    fc2: (fc2_w, fc2_b),
                }
            }
            (
                Head::Segmentation { stages, classifier },
                HeadCtx::Segmentation {
                    stage_ctxs,
                    final_features,
                },
            ) => {
                let (mut g_current, cls_w, cls_b) = classifier.backward(final_features, grad_logits);
                let mut stage_grads: Vec<Option<(Mat, Vec<f64>, Vec<f64>)>> =
                    vec![None; stages.len()];
                // stages were recorded from coarse to fine; walk back up
                for sc in stage_ctxs.iter().rev() {
                    let j = sc.layer;
                    let (unary, bn) = &stages[j];
                    let g_pre_bn = leaky_relu_backward(&sc.pre_bn, &g_current);
                    let (g_pre, bn_g, bn_b) = bn.backward(&sc.bn, &g_pre_bn);
                    let (g_cat, unary_w) = unary.backward(&sc.cat, &g_pre);
                    stage_grads[j] = Some((unary_w, bn_g, bn_b));
                    // split the concatenation gradient
                    let mut g_up = Mat::zeros(g_cat.rows, sc.up_cols);
                    let mut g_skip = Mat::zeros(g_cat.rows, g_cat.cols - sc.up_cols);
                    for r in 0..g_cat.rows {
                        g_up.row_mut(r).copy_from_slice(&g_cat.row(r)[..sc.up_cols]);
                        g_skip.row_mut(r).copy_from_slice(&g_cat.row(r)[sc.up_cols..]);
                    }
                    match &mut grad_skips[j] {
                        Some(existing) => existing.add_assign(&g_skip),
                        None => grad_skips[j] = Some(g_skip),
                    }
                    let assignment = batch.layers[j].upsample.as_ref().unwrap();
                    g_current = nearest_upsample_backward(
                        &g_up,
                        assignment,
                        batch.layers[j + 1].points.len(),
                    );
                }
                match &mut grad_skips[last] {
                    Some(existing) => existing.add_assign(&g_current),
                    None => grad_skips[last] = Some(g_current),
                }
                HeadGrads::Segmentation {
                    stages: stage_grads.into_iter().map(|g| g.unwrap()).collect(),
                    classifier: (cls_w, cls_b),
                }
            }
            _ => unreachable!("head and context kinds always match"),
        };

        let (block_grads, wrt_input) = self.encoder_backward(batch, ctx, grad_skips)?;
        Ok(NetworkGrads {
            blocks: block_grads,
            head: head_grads,
            wrt_input,
        })
    }

    /// Backward through the encoder only, starting from per-layer gradients
    /// on the layers' final features. Used by the full backward pass and by
    /// receptive-field queries that start at an intermediate layer.
    pub fn encoder_backward(
        &self,
        batch: &Batch,
        ctx: &ForwardCtx,
        grad_skips: Vec<Option<Mat>>,
    ) -> Result<(Vec<BlockGrads>, Mat)> {
        let mut block_grads: Vec<Option<BlockGrads>> = (0..self.blocks.len()).map(|_| None).collect();
        let mut carried: Option<Mat> = None;
        for b in (0..self.blocks.len()).rev() {
            let layer = b / 2;
            let mut upstream = if b % 2 == 1 {
                // the layer's final block: its output is the skip feature
                let zero = Mat::zeros(
                    batch.layers[layer].points.len(),
                    self.blocks[b].d_out(),
                );
                let mut up = grad_skips[layer].clone().unwrap_or(zero);
                if let Some(c) = carried.take() {
                    up.add_assign(&c);
                }
                up
            } else {
                carried.take().expect("carried gradient present")
            };
            if upstream.data.iter().all(|&v| v == 0.0) {
                // nothing flows through this block or below unless a skip
                // gradient reenters later; keep zero grads for it
                let (queries, supports, rows) = self.block_geometry(batch, b);
                let (gx, g) =
                    self.blocks[b].backward(&ctx.block_ctxs[b], queries, supports, rows, &upstream)?;
                block_grads[b] = Some(g);
                carried = Some(gx);
                continue;
            }
            let (queries, supports, rows) = self.block_geometry(batch, b);
            let (gx, g) = self.blocks[b].backward(
                &ctx.block_ctxs[b],
                queries,
                supports,
                rows,
                &mut_upstream(&mut upstream),
            )?;
            block_grads[b] = Some(g);
            carried = Some(gx);
        }
        let wrt_input = carried.expect("input gradient");
        Ok((
            block_grads.into_iter().map(|g| g.unwrap()).collect(),
            wrt_input,
        ))
    }

    /// Trainable parameter vectors in canonical order with gradient scales.
    pub fn params_mut(&mut self) -> Vec<(&mut Vec<f64>, f64)> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        match &mut self.head {
            Head::Classification { fc1, fc2 } => {
                out.push((&mut fc1.weight.data, 1.0));
                out.push((&mut fc1.bias, 1.0));
                out.push((&mut fc2.weight.data, 1.0));
                out.push((&mut fc2.bias, 1.0));
            }
            Head::Segmentation { stages, classifier } => {
                for (unary, bn) in stages {
                    out.push((&mut unary.weight.data, 1.0));
                    out.push((&mut bn.gamma, 1.0));
                    out.push((&mut bn.beta, 1.0));
                }
                out.push((&mut classifier.weight.data, 1.0));
                out.push((&mut classifier.bias, 1.0));
            }
        }
        out
    }

    /// Batch-norm running statistics, for checkpointing.
    pub fn stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.bn1.running_mean);
            out.push(&mut block.bn1.running_var);
            out.push(&mut block.bn2.running_mean);
            out.push(&mut block.bn2.running_var);
            out.push(&mut block.bn3.running_mean);
            out.push(&mut block.bn3.running_var);
            if let Some((_, bn)) = &mut block.shortcut {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        if let Head::Segmentation { stages, .. } = &mut self.head {
            for (_, bn) in stages {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    /// A rigid copy: every block's offset predictor removed.
    pub fn rigid_clone(&self) -> Network {
        let mut net = self.clone();
        let mut spec = net.spec.clone();
        spec.deformable = false;
        net.spec = spec;
        for block in &mut net.blocks {
            block.conv.offset = None;
        }
        net
    }
}

fn mut_upstream(m: &mut Mat) -> &Mat {
    m
}

pub struct ForwardCtx {
    pub skips: Vec<Mat>,
    pub block_ctxs: Vec<super::blocks::BlockCtx>,
    pub head: HeadCtx,
}

pub enum HeadCtx {
    Classification {
        pooled: Mat,
        hidden: Mat,
        hidden_act: Mat,
        dropped: Mat,
        dropout_mask: Option<Mat>,
    },
    Segmentation {
        stage_ctxs: Vec<SegStageCtx>,
        final_features: Mat,
    },
}

pub struct SegStageCtx {
    layer: usize,
    cat: Mat,
    bn: BnCtx,
    pre_bn: Mat,
    up_cols: usize,
}

pub enum HeadGrads {
    Classification {
        fc1: (Mat, Vec<f64>),
        fc2: (Mat, Vec<f64>),
    },
    Segmentation {
        stages: Vec<(Mat, Vec<f64>, Vec<f64>)>,
        classifier: (Mat, Vec<f64>),
    },
}

pub struct NetworkGrads {
    pub blocks: Vec<BlockGrads>,
    pub head: HeadGrads,
    /// Gradient with respect to the stacked input features.
    pub wrt_input: Mat,
}

impl NetworkGrads {
    /// Gradient vectors in [`Network::params_mut`] order.
    pub fn flat(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for g in &self.blocks {
            out.extend(g.flat());
        }
        match &self.head {
            HeadGrads::Classification { fc1, fc2 } => {
                out.push(&fc1.0.data);
                out.push(&fc1.1);
                out.push(&fc2.0.data);
                out.push(&fc2.1);
            }
            HeadGrads::Segmentation { stages, classifier } => {
                for (w, g, b) in stages {
                    out.push(&w.data);
                    out.push(g);
                    out.push(b);
                }
                out.push(&classifier.0.data);
                out.push(&classifier.1);
            }
        }
        out
    }

    pub fn total_reg_loss(&self) -> f64 {
        self.blocks.iter().map(|b| b.reg_loss).sum()
    }
}

/// Element labels of a classification batch: the label of each element's
/// first layer-0 point.
pub fn element_labels(batch: &Batch) -> Option<Vec<u32>> {
    let labels = batch.labels.as_ref()?;
    let mut out = Vec::with_capacity(batch.element_count);
    let mut offset = 0;
    for &len in &batch.layers[0].lengths {
        out.push(labels[offset]);
        offset += len;
    }
    Some(out)
}

/// Per-point prediction accuracy.
pub fn accuracy(logits: &Mat, labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let predictions = argmax_rows(logits);
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assemble_batch, PointCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_spec(task: Task, deformable: bool) -> NetworkSpec {
        NetworkSpec {
            task,
            input_dim: 4,
            num_classes: 3,
            dl0: 0.15,
            widths: vec![4, 6],
            k_points: 5,
            sigma_ratio: 1.0,
            rho: 5.0,
            deformable,
            head_hidden: 8,
            dropout: 0.5,
            neighbor_cap: None,
        }
    }

    fn toy_cloud(n: usize, seed: u64) -> PointCloud {
        // constant-1 channel plus coordinates, like the segmentation input
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
        let mut features = Mat::zeros(n, 4);
        for (r, &p) in points.iter().enumerate() {
            features.row_mut(r).copy_from_slice(&[1.0, p.x, p.y, p.z]);
        }
        PointCloud::new(points, features).with_labels(vec![seed as u32 % 3; n])
    }

    #[test]
    fn identical_elements_get_identical_logits() {
        let spec = toy_spec(Task::Classification, false);
        let configs = spec.layer_configs();
        let cloud = toy_cloud(40, 1);
        let batch = assemble_batch(&[cloud.clone(), cloud], &configs, 1000, None).unwrap();
        let mut net = Network::new(spec, 3).unwrap();
        let (logits, _) = net.forward(&batch, false, None).unwrap();
        assert_eq!(logits.rows, 2);
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn segmentation_outputs_one_row_per_input_point() {
        let spec = toy_spec(Task::Segmentation, false);
        let configs = spec.layer_configs();
        let clouds = vec![toy_cloud(35, 2), toy_cloud(28, 3)];
        let batch = assemble_batch(&clouds, &configs, 1000, None).unwrap();
        let mut net = Network::new(spec, 4).unwrap();
        let (logits, _) = net.forward(&batch, false, None).unwrap();
        assert_eq!(logits.rows, 63);
        assert_eq!(logits.cols, 3);
        assert!(logits.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deformable_net_with_zero_offset_weights_equals_its_rigid_clone() {
        let spec = toy_spec(Task::Classification, true);
        let configs = spec.layer_configs();
        let batch = assemble_batch(&[toy_cloud(45, 5)], &configs, 1000, None).unwrap();
        let mut deform = Network::new(spec, 6).unwrap();
        // offset predictors initialize at zero, so the rigid clone (same
        // conv weights, predictors stripped) must match bit for bit
        let mut rigid = deform.rigid_clone();
        let (a, _) = deform.forward(&batch, false, None).unwrap();
        let (b, _) = rigid.forward(&batch, false, None).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn permuting_points_within_an_element_preserves_classification() {
        let spec = toy_spec(Task::Classification, false);
        let configs = spec.layer_configs();
        let cloud = toy_cloud(40, 7);
        let mut permuted = cloud.clone();
        permuted.points.reverse();
        let rows: Vec<Vec<f64>> = (0..permuted.features.rows)
            .rev()
            .map(|r| cloud.features.row(r).to_vec())
            .collect();
        permuted.features = Mat::from_rows(&rows);
        permuted.labels = cloud.labels.clone();
        let mut net = Network::new(spec.clone(), 8).unwrap();
        let batch_a = assemble_batch(&[cloud], &configs, 1000, None).unwrap();
        let batch_b = assemble_batch(&[permuted], &configs, 1000, None).unwrap();
        let (la, _) = net.forward(&batch_a, false, None).unwrap();
        let (lb, _) = net.forward(&batch_b, false, None).unwrap();
        for (a, b) in la.data.iter().zip(&lb.data) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for task in [Task::Classification, Task::Segmentation] {
            let spec = toy_spec(task, true);
            let configs = spec.layer_configs();
            let clouds = vec![toy_cloud(25, 9), toy_cloud(20, 10)];
            let batch = assemble_batch(&clouds, &configs, 1000, None).unwrap();
            let mut net = Network::new(spec, 11).unwrap();
            // at zero offsets the fitting loss sits exactly on argmin ties
            // (pooled queries are barycenters, equidistant from 2-point
            // cells), so check the gradient at a generic point instead
            {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                for (vec, scale) in net.params_mut() {
                    if scale == super::super::blocks::OFFSET_GRAD_SCALE {
                        for v in vec.iter_mut() {
                            *v = rng.random_range(-0.05..0.05);
                        }
                    }
                }
            }
            let net = net;

            let objective = |n: &Network| -> f64 {
                let mut n = n.clone();
                let (logits, ctx) = n.forward(&batch, true, None).unwrap();
                let labels: Vec<u32> = match task {
                    Task::Classification => element_labels(&batch).unwrap(),
                    Task::Segmentation => batch.labels.clone().unwrap(),
                };
                let (ce, _) = crate::network::layers::softmax_cross_entropy(&logits, &labels).unwrap();
                ce + super::super::blocks::REG_WEIGHT * Network::reg_loss(&ctx)
            };

            let grads = {
                let mut n = net.clone();
                let (logits, ctx) = n.forward(&batch, true, None).unwrap();
                let labels: Vec<u32> = match task {
                    Task::Classification => element_labels(&batch).unwrap(),
                    Task::Segmentation => batch.labels.clone().unwrap(),
                };
                let (_, grad_logits) =
                    crate::network::layers::softmax_cross_entropy(&logits, &labels).unwrap();
                net.backward(&batch, &ctx, &grad_logits).unwrap()
            };

            let flat = grads.flat();
            let shapes: Vec<usize> = flat.iter().map(|v| v.len()).collect();
            // small enough that correlation kinks crossed by the interval
            // stay below the threshold
            let h = 1e-6;
            let mut checked = 0;
            for (pi, &len) in shapes.iter().enumerate() {
                // probe a couple of entries per parameter vector
                for i in (0..len).step_by((len / 2).max(1)) {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    plus.params_mut()[pi].0[i] += h;
                    minus.params_mut()[pi].0[i] -= h;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    let analytic = flat[pi][i];
                    assert!(
                        crate::math::grad_err(fd, analytic, 1e-8) < 1e-3,
                        "{task:?} param vec {pi} entry {i}: fd {fd} vs analytic {analytic}"
                    );
                    checked += 1;
                }
            }
            assert!(checked > 30);
        }
    }
}
