//! Scene segmentation by overlapping spheres with vote accumulation.

use super::augment::add_input_features;
use super::config::RunConfig;
use crate::error::{KpError, Result};
use crate::geometry::{assemble_batch, grid_subsample, sample_sphere, PointCloud};
use crate::math::{Mat, Vec3};
use crate::network::TrainState;

/// Running per-point sums of predicted class probabilities.
#[derive(Debug, Clone)]
pub struct VoteAccumulator {
    sums: Mat,
    visits: Vec<u32>,
}

impl VoteAccumulator {
    pub fn new(n_points: usize, n_classes: usize) -> Self {
        VoteAccumulator {
            sums: Mat::zeros(n_points, n_classes),
            visits: vec![0; n_points],
        }
    }

    pub fn add(&mut self, point: usize, probabilities: &[f64]) {
        for (s, &p) in self.sums.row_mut(point).iter_mut().zip(probabilities) {
            *s += p;
        }
        self.visits[point] += 1;
    }

    pub fn visits(&self) -> &[u32] {
        &self.visits
    }

    pub fn min_visits(&self) -> u32 {
        self.visits.iter().copied().min().unwrap_or(0)
    }

    /// Averaged probabilities per point.
    pub fn averaged(&self) -> Mat {
        let mut out = self.sums.clone();
        for (r, &v) in self.visits.iter().enumerate() {
            if v > 0 {
                let inv = 1.0 / v as f64;
                out.row_mut(r).iter_mut().for_each(|x| *x *= inv);
            }
        }
        out
    }

    /// Class of the averaged probabilities, ties to the lower class id.
    pub fn finalize(&self) -> Result<Vec<u32>> {
        if let Some(unvisited) = self.visits.iter().position(|&v| v == 0) {
            return Err(KpError::Coverage {
                left: self.visits.iter().filter(|&&v| v == 0).count(),
                passes: unvisited,
            });
        }
        Ok(crate::network::layers::argmax_rows(&self.averaged()))
    }
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - m).exp() / z;
        }
    }
    out
}

/// Regular sphere-center lattice over the scene bounds, spaced so
/// neighboring spheres overlap.
pub fn sphere_lattice(scene: &PointCloud, radius: f64) -> Vec<Vec3> {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in &scene.points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let spacing = radius / 3.0f64.sqrt();
    let mut centers = Vec::new();
    let steps = |a: f64, b: f64| ((b - a) / spacing).floor() as i64 + 1;
    for ix in 0..steps(lo.x, hi.x) {
        for iy in 0..steps(lo.y, hi.y) {
            for iz in 0..steps(lo.z, hi.z) {
                centers.push(Vec3::new(
                    lo.x + ix as f64 * spacing,
                    lo.y + iy as f64 * spacing,
                    lo.z + iz as f64 * spacing,
                ));
            }
        }
    }
    centers
}

/// Predicted probabilities of one sphere, projected from the subsampled
/// prediction points back to the sphere's raw points. Returns scene indices
/// with per-point probability rows; `None` when the sphere is too sparse to
/// process.
fn predict_sphere(
    state: &mut TrainState,
    scene: &PointCloud,
    center: Vec3,
    config: &RunConfig,
) -> Result<Option<(Vec<usize>, Mat)>> {
    let radius = config.sphere_radius();
    let (sub, index_map) = sample_sphere(scene, center, radius)?;
    if sub.len() < 2 {
        return Ok(None);
    }
    let (pred_cloud, _) = grid_subsample(&sub, config.dl0)?;
    let input = add_input_features(&pred_cloud, config.input_features)?;
    let configs = state.net.spec.layer_configs();
    let batch = assemble_batch(
        &[input],
        &configs,
        usize::MAX,
        state.net.spec.neighbor_cap,
    )?;
    let (logits, _) = state.net.forward(&batch, false, None)?;
    let probs = softmax_rows(&logits);

    // each raw point inherits its nearest prediction point's probabilities
    let assignment = crate::geometry::nearest_assignment(&sub.points, &pred_cloud.points);
    let mut rows = Mat::zeros(sub.len(), probs.cols);
    for (r, &a) in assignment.iter().enumerate() {
        rows.row_mut(r).copy_from_slice(probs.row(a as usize));
    }
    Ok(Some((index_map, rows)))
}

/// Slides spheres over a regular lattice, then adds spheres at under-visited
/// points until every point was tested `min_visits` times; the averaged
/// probabilities decide each point's class.
pub fn segment_scene(
    state: &mut TrainState,
    scene: &PointCloud,
    config: &RunConfig,
) -> Result<Vec<u32>> {
    scene.validate()?;
    if scene.is_empty() {
        return Err(KpError::EmptyCloud);
    }
    let n_classes = state.net.spec.num_classes;
    let mut votes = VoteAccumulator::new(scene.len(), n_classes);
    for center in sphere_lattice(scene, config.sphere_radius()) {
        if let Some((indices, probs)) = predict_sphere(state, scene, center, config)? {
            for (r, &i) in indices.iter().enumerate() {
                votes.add(i, probs.row(r));
            }
        }
    }
    let mut extra = 0;
    while votes.min_visits() < config.min_visits as u32 {
        if extra >= config.max_extra_passes {
            return Err(KpError::Coverage {
                left: votes
                    .visits()
                    .iter()
                    .filter(|&&v| v < config.min_visits as u32)
                    .count(),
                passes: extra,
            });
        }
        let target = votes
            .visits()
            .iter()
            .position(|&v| v < config.min_visits as u32)
            .unwrap();
        match predict_sphere(state, scene, scene.points[target], config)? {
            Some((indices, probs)) => {
                for (r, &i) in indices.iter().enumerate() {
                    votes.add(i, probs.row(r));
                }
            }
            None => {
                return Err(KpError::Coverage {
                    left: 1,
                    passes: extra,
                })
            }
        }
        extra += 1;
    }
    votes.finalize()
}
