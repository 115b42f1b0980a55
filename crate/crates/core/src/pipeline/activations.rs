//! Learned-feature visualization: rank dataset elements by a channel's
//! activation and export the winners with per-point activation colors.

use super::config::RunConfig;
use super::trainer::prepare_cloud;
use crate::error::{KpError, Result};
use crate::geometry::{assemble_batch, nearest_assignment, PointCloud};
use crate::math::Mat;
use crate::network::TrainState;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RankedActivation {
    pub element: usize,
    pub peak: f64,
    /// Per input point activation, projected from the layer's subsampled
    /// points back to the element's input points.
    pub projected: Vec<f64>,
}

/// Ranks elements by their maximum activation of `channel` at `layer`.
/// Returns an empty ranking when the channel is zero on every element.
pub fn rank_feature_activations(
    state: &mut TrainState,
    elements: &[PointCloud],
    config: &RunConfig,
    layer: usize,
    channel: usize,
    top_n: usize,
) -> Result<Vec<RankedActivation>> {
    let configs = state.net.spec.layer_configs();
    let mut ranked = Vec::new();
    for (e, raw) in elements.iter().enumerate() {
        let prepared = prepare_cloud(raw, config)?;
        let batch = assemble_batch(
            std::slice::from_ref(&prepared),
            &configs,
            usize::MAX,
            state.net.spec.neighbor_cap,
        )?;
        let (_, ctx) = state.net.forward(&batch, false, None)?;
        let skip = &ctx.skips[layer];
        if channel >= skip.cols {
            return Err(KpError::ShapeMismatch {
                context: "activation channel",
                expected: skip.cols,
                got: channel,
            });
        }
        let column: Vec<f64> = (0..skip.rows).map(|r| skip.get(r, channel)).collect();
        let peak = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let assignment =
            nearest_assignment(&batch.layers[0].points, &batch.layers[layer].points);
        let projected: Vec<f64> = assignment.iter().map(|&a| column[a as usize]).collect();
        ranked.push(RankedActivation {
            element: e,
            peak,
            projected,
        });
    }
    if ranked.iter().all(|r| r.peak == 0.0) {
        return Ok(Vec::new()); // constant-zero channel: nothing to rank
    }
    ranked.sort_by(|a, b| b.peak.total_cmp(&a.peak).then(a.element.cmp(&b.element)));
    ranked.truncate(top_n);
    Ok(ranked)
}

/// Writes each ranked element as PLY (activation as the `f_0` scalar).
pub fn export_feature_activations(
    state: &mut TrainState,
    elements: &[PointCloud],
    config: &RunConfig,
    layer: usize,
    channel: usize,
    top_n: usize,
    out_dir: &Path,
) -> Result<Vec<RankedActivation>> {
    let ranked = rank_feature_activations(state, elements, config, layer, channel, top_n)?;
    std::fs::create_dir_all(out_dir)?;
    for (rank, entry) in ranked.iter().enumerate() {
        let raw = &elements[entry.element];
        let prepared = prepare_cloud(raw, config)?;
        let mut features = Mat::zeros(prepared.len(), 1);
        for (r, &a) in entry.projected.iter().enumerate() {
            features.row_mut(r)[0] = a;
        }
        let mut cloud = PointCloud::new(prepared.points.clone(), features);
        cloud.labels = prepared.labels.clone();
        let path = out_dir.join(format!(
            "activation_l{layer}_c{channel}_rank{rank}_elem{}.ply",
            entry.element
        ));
        crate::ply::write_ply_file(&cloud, &path)?;
    }
    Ok(ranked)
}
