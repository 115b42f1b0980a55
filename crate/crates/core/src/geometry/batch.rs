use super::neighbors::{radius_neighbors, NeighborhoodMatrix};
use super::{grid_subsample, PointCloud};
use crate::error::{KpError, Result};
use crate::math::{Mat, Vec3};
use crate::network::LayerConfig;

/// One resolution level of a stacked batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayer {
    pub points: Vec<Vec3>,
    /// Point count per batch element at this layer.
    pub lengths: Vec<usize>,
    /// Batch element index of every stacked point.
    pub element_ids: Vec<u32>,
    /// Within-layer neighborhood rows.
    pub neighbors: NeighborhoodMatrix,
    /// Pooling rows: queries are this layer's points, supports the previous
    /// (finer) layer's points. `None` on layer 0.
    pub pool: Option<NeighborhoodMatrix>,
    /// Nearest point in the next (coarser) layer, for decoder upsampling.
    /// `None` on the last layer.
    pub upsample: Option<Vec<u32>>,
}

/// Elements stacked along the point axis with per-layer index tables.
///
/// Neighbor, pooling and upsampling indices never cross element boundaries:
/// each element's chain is computed independently and only then offset into
/// the stacked arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub layers: Vec<BatchLayer>,
    /// Stacked layer-0 features of the packed elements.
    pub features: Mat,
    /// Stacked layer-0 labels when every packed element carries them.
    pub labels: Option<Vec<u32>>,
    /// Number of elements packed (a prefix of the input slice).
    pub element_count: usize,
}

impl Batch {
    pub fn total_points(&self, layer: usize) -> usize {
        self.layers[layer].points.len()
    }
}

fn merge_rows(
    per_element: Vec<Vec<Vec<u32>>>,
    support_counts: &[usize],
    radius: f64,
) -> NeighborhoodMatrix {
    let total: usize = support_counts.iter().sum();
    let mut rows = Vec::new();
    let mut offset = 0u32;
    for (e, elem_rows) in per_element.into_iter().enumerate() {
        for row in elem_rows {
            rows.push(row.iter().map(|&i| i + offset).collect());
        }
        offset += support_counts[e] as u32;
    }
    NeighborhoodMatrix::from_rows(rows, total, radius)
}

/// Nearest coarse index per fine point, ties to the lower index.
pub fn nearest_assignment(fine: &[Vec3], coarse: &[Vec3]) -> Vec<u32> {
    fine.iter()
        .map(|&p| {
            let mut best = (f64::INFINITY, 0u32);
            for (i, &c) in coarse.iter().enumerate() {
                let d = p.dist_sq(c);
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Packs elements greedily in the given order until the next one would
/// exceed `target_total_points` layer-0 points, then builds the per-layer
/// subsampling chain, neighborhoods, pooling rows and upsampling indices.
pub fn assemble_batch(
    elements: &[PointCloud],
    configs: &[LayerConfig],
    target_total_points: usize,
    cap: Option<usize>,
) -> Result<Batch> {
    crate::network::validate_layer_chain(configs)?;
    if elements.is_empty() {
        return Err(KpError::EmptyCloud);
    }

    let mut packed = 0usize;
    let mut total = 0usize;
    for el in elements {
        if el.is_empty() {
            return Err(KpError::EmptyElement { index: packed });
        }
        if total + el.len() > target_total_points {
            break;
        }
        total += el.len();
        packed += 1;
    }
    if packed == 0 {
        return Err(KpError::OversizedElement {
            points: elements[0].len(),
            budget: target_total_points,
        });
    }
    let elements = &elements[..packed];

    let feat_dim = elements[0].feature_dim();
    for el in elements {
        el.validate()?;
        if el.feature_dim() != feat_dim {
            return Err(KpError::ShapeMismatch {
                context: "element feature width",
                expected: feat_dim,
                got: el.feature_dim(),
            });
        }
    }

    let n_layers = configs.len();

    // per-element subsampling chains (positions only)
    let mut chains: Vec<Vec<Vec<Vec3>>> = Vec::with_capacity(packed);
    for el in elements {
        let mut chain = vec![el.points.clone()];
        for cfg in &configs[1..] {
            let prev = PointCloud::bare(chain.last().unwrap().clone());
            let (sub, _) = grid_subsample(&prev, cfg.dl)?;
            chain.push(sub.points);
        }
        chains.push(chain);
    }

    let mut layers = Vec::with_capacity(n_layers);
    for j in 0..n_layers {
        let conv_radius = configs[j].conv_radius(j == 0);

        let mut points = Vec::new();
        let mut lengths = Vec::with_capacity(packed);
        let mut element_ids = Vec::new();
        let mut neighbor_rows = Vec::with_capacity(packed);
        let mut pool_rows = Vec::with_capacity(packed);
        let mut upsample = Vec::new();

        let mut coarse_offset = 0u32;
        for (e, chain) in chains.iter().enumerate() {
            let pts = &chain[j];
            points.extend_from_slice(pts);
            lengths.push(pts.len());
            element_ids.extend(std::iter::repeat(e as u32).take(pts.len()));

            let nm = radius_neighbors(pts, pts, conv_radius, cap)?;
            neighbor_rows.push((0..pts.len()).map(|q| nm.neighbors(q).to_vec()).collect());

            if j > 0 {
                let radius = configs[j - 1].pool_radius(configs[j].deform_blocks[0]);
                let pm = radius_neighbors(pts, &chain[j - 1], radius, cap)?;
                pool_rows.push((0..pts.len()).map(|q| pm.neighbors(q).to_vec()).collect());
            }
            if j + 1 < n_layers {
                let up = nearest_assignment(pts, &chain[j + 1]);
                upsample.extend(up.iter().map(|&i| i + coarse_offset));
                coarse_offset += chain[j + 1].len() as u32;
            }
        }

        let layer_counts: Vec<usize> = chains.iter().map(|c| c[j].len()).collect();
        let neighbors = merge_rows(neighbor_rows, &layer_counts, conv_radius);
        let pool = if j > 0 {
            let prev_counts: Vec<usize> = chains.iter().map(|c| c[j - 1].len()).collect();
            let radius = configs[j - 1].pool_radius(configs[j].deform_blocks[0]);
            Some(merge_rows(pool_rows, &prev_counts, radius))
        } else {
            None
        };

        layers.push(BatchLayer {
            points,
            lengths,
            element_ids,
            neighbors,
            pool,
            upsample: if j + 1 < n_layers { Some(upsample) } else { None },
        });
    }

    // stacked layer-0 features and labels
    let mut features = Mat::zeros(total, feat_dim);
    let mut row = 0;
    for el in elements {
        for i in 0..el.len() {
            features.row_mut(row).copy_from_slice(el.features.row(i));
            row += 1;
        }
    }
    let labels = if elements.iter().all(|el| el.labels.is_some()) {
        let mut all = Vec::with_capacity(total);
        for el in elements {
            all.extend_from_slice(el.labels.as_ref().unwrap());
        }
        Some(all)
    } else {
        None
    };

    Ok(Batch {
        layers,
        features,
        labels,
        element_count: packed,
    })
}
