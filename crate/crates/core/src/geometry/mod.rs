//! Spatial preprocessing: grid subsampling, radius neighborhoods, sphere
//! extraction and variable-size batching.

mod batch;
mod neighbors;

pub use batch::{assemble_batch, nearest_assignment, Batch, BatchLayer};
pub use neighbors::{radius_neighbors, NeighborhoodMatrix};

use crate::error::{KpError, Result};
use crate::math::{Mat, Vec3};

/// Points with per-point feature vectors and optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// One feature row per point, uniform width.
    pub features: Mat,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, features: Mat) -> Self {
        PointCloud {
            points,
            features,
            labels: None,
        }
    }

    /// Cloud with zero-width features, for geometry-only work.
    pub fn bare(points: Vec<Vec3>) -> Self {
        let n = points.len();
        PointCloud {
            points,
            features: Mat::zeros(n, 0),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows != self.points.len() {
            return Err(KpError::ShapeMismatch {
                context: "features rows vs points",
                expected: self.points.len(),
                got: self.features.rows,
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(KpError::ShapeMismatch {
                    context: "labels vs points",
                    expected: self.points.len(),
                    got: labels.len(),
                });
            }
        }
        if !self.points.iter().all(|p| p.is_finite()) || !self.features.is_finite() {
            return Err(KpError::NonFinite);
        }
        Ok(())
    }

    pub fn translate(&mut self, t: Vec3) {
        for p in &mut self.points {
            *p += t;
        }
    }
}

#[inline]
fn cell_of(p: Vec3, cell_size: f64) -> (i64, i64, i64) {
    (
        (p.x / cell_size).floor() as i64,
        (p.y / cell_size).floor() as i64,
        (p.z / cell_size).floor() as i64,
    )
}

/// Replaces all points of each non-empty grid cell by their barycenter.
///
/// The grid is anchored at the origin: a point belongs to cell
/// `floor(coord / cell_size)` per axis. Support features are the mean of the
/// member features; labels, when present, pool by majority vote (ties to the
/// smaller class id). Support points are emitted in order of first cell
/// occurrence, and the returned assignment maps each input point to its
/// support index.
pub fn grid_subsample(cloud: &PointCloud, cell_size: f64) -> Result<(PointCloud, Vec<usize>)> {
    if cloud.is_empty() {
        return Err(KpError::EmptyCloud);
    }
    if !(cell_size > 0.0) {
        return Err(KpError::NotPositive {
            what: "cell_size",
            value: cell_size,
        });
    }
    cloud.validate()?;

    struct CellAcc {
        sum: Vec3,
        feat_sum: Vec<f64>,
        count: usize,
        labels: Vec<u32>,
    }

    let dim = cloud.feature_dim();
    let mut slot_of_cell: std::collections::HashMap<(i64, i64, i64), usize> =
        std::collections::HashMap::new();
    let mut cells: Vec<CellAcc> = Vec::new();
    let mut assignment = Vec::with_capacity(cloud.len());

    for (i, &p) in cloud.points.iter().enumerate() {
        let key = cell_of(p, cell_size);
        let slot = *slot_of_cell.entry(key).or_insert_with(|| {
            cells.push(CellAcc {
                sum: Vec3::ZERO,
                feat_sum: vec![0.0; dim],
                count: 0,
                labels: Vec::new(),
            });
            cells.len() - 1
        });
        let acc = &mut cells[slot];
        acc.sum += p;
        for (s, &f) in acc.feat_sum.iter_mut().zip(cloud.features.row(i)) {
            *s += f;
        }
        acc.count += 1;
        if let Some(labels) = &cloud.labels {
            acc.labels.push(labels[i]);
        }
        assignment.push(slot);
    }

    let mut points = Vec::with_capacity(cells.len());
    let mut features = Mat::zeros(cells.len(), dim);
    let mut labels: Option<Vec<u32>> = cloud.labels.as_ref().map(|_| Vec::with_capacity(cells.len()));
    for (slot, acc) in cells.iter().enumerate() {
        let inv = 1.0 / acc.count as f64;
        points.push(acc.sum.scaled(inv));
        for (o, &s) in features.row_mut(slot).iter_mut().zip(&acc.feat_sum) {
            *o = s * inv;
        }
        if let Some(labels) = labels.as_mut() {
            labels.push(majority_label(&acc.labels));
        }
    }

    let mut support = PointCloud::new(points, features);
    support.labels = labels;
    Ok((support, assignment))
}

fn majority_label(labels: &[u32]) -> u32 {
    let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    // BTreeMap iterates ascending, so ties resolve to the smaller label.
    let mut best = (0u32, 0usize);
    for (&label, &count) in &counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

/// All scene points with `‖p − center‖ ≤ radius`, plus a map back to scene
/// indices for vote accumulation. An empty result is valid.
pub fn sample_sphere(
    scene: &PointCloud,
    center: Vec3,
    radius: f64,
) -> Result<(PointCloud, Vec<usize>)> {
    if !(radius > 0.0) {
        return Err(KpError::NotPositive {
            what: "radius",
            value: radius,
        });
    }
    scene.validate()?;
    let r_sq = radius * radius;
    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut index_map = Vec::new();
    for (i, &p) in scene.points.iter().enumerate() {
        if p.dist_sq(center) <= r_sq {
            points.push(p);
            rows.push(scene.features.row(i).to_vec());
            index_map.push(i);
        }
    }
    let mut features = Mat::zeros(points.len(), scene.feature_dim());
    for (r, row) in rows.iter().enumerate() {
        features.row_mut(r).copy_from_slice(row);
    }
    let mut sub = PointCloud::new(points, features);
    if let Some(labels) = &scene.labels {
        sub.labels = Some(index_map.iter().map(|&i| labels[i]).collect());
    }
    Ok((sub, index_map))
}
