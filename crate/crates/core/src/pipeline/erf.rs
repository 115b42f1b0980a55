//! Effective receptive field: influence of every input point on one layer
//! response.

use crate::error::Result;
use crate::geometry::Batch;
use crate::math::{Mat, Vec3};
use crate::network::Network;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct ErfResult {
    /// One influence score per layer-0 input point, normalized to max 1.
    pub scores: Vec<f64>,
    /// Index of the layer point whose response was probed.
    pub center_index: usize,
    /// The requested center was snapped to the nearest layer point.
    pub snapped: bool,
    /// All scores were zero (nothing reaches the center), left unnormalized.
    pub all_zero: bool,
}

/// Gradient of the summed response at the layer point nearest `center` with
/// respect to the input features, collapsed per point by the L1 norm over
/// feature channels and normalized to a maximum of 1.
///
/// Runs with frozen statistics, so the result is a pure function of the
/// network and batch.
pub fn compute_erf(
    net: &mut Network,
    batch: &Batch,
    layer: usize,
    center: Vec3,
) -> Result<ErfResult> {
    let (_, ctx) = net.forward(batch, false, None)?;

    let points = &batch.layers[layer].points;
    let mut best = (f64::INFINITY, 0usize);
    for (i, &p) in points.iter().enumerate() {
        let d = p.dist_sq(center);
        if d < best.0 {
            best = (d, i);
        }
    }
    let center_index = best.1;
    let snapped = best.0 > 0.0;

    let mut grad_skips: Vec<Option<Mat>> = vec![None; net.spec.n_layers()];
    let width = ctx.skips[layer].cols;
    let mut upstream = Mat::zeros(points.len(), width);
    upstream.row_mut(center_index).iter_mut().for_each(|v| *v = 1.0);
    grad_skips[layer] = Some(upstream);

    let (_, wrt_input) = net.encoder_backward(batch, &ctx, grad_skips)?;
    let mut scores: Vec<f64> = (0..wrt_input.rows)
        .map(|r| wrt_input.row(r).iter().map(|v| v.abs()).sum())
        .collect();
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    let all_zero = max == 0.0;
    if !all_zero {
        scores.iter_mut().for_each(|s| *s /= max);
    }
    Ok(ErfResult {
        scores,
        center_index,
        snapped,
        all_zero,
    })
}

/// Conservative receptive radius of the response at `layer`'s output: the
/// sum of the radii of every convolution on the path from the input,
/// including both blocks per layer and the strided convolutions.
pub fn receptive_bound(net: &Network, layer: usize) -> f64 {
    let configs = net.spec.layer_configs();
    let flags = net.spec.block_flags();
    let mut bound = 0.0;
    for b in 0..=(2 * layer + 1) {
        let l = b / 2;
        let (strided, _) = flags[b];
        bound += if strided {
            configs[l - 1].pool_radius(configs[l].deform_blocks[0])
        } else {
            configs[l].conv_radius(l == 0)
        };
    }
    bound
}

/// CSV export: `x,y,z,score` per input point.
pub fn write_erf_csv<W: Write>(w: &mut W, batch: &Batch, result: &ErfResult) -> Result<()> {
    writeln!(w, "x,y,z,score")?;
    for (i, &p) in batch.layers[0].points.iter().enumerate() {
        writeln!(w, "{},{},{},{}", p.x, p.y, p.z, result.scores[i])?;
    }
    Ok(())
}
