use crate::error::{KpError, Result};
use crate::math::Vec3;
use std::collections::HashMap;

/// Fixed-width neighbor index table with shadow padding.
///
/// Row `q` lists the supports within `radius` of query `q`, ordered by
/// distance (ties by lower support index), padded to `n_max` with the shadow
/// sentinel `n_support`. Shadow slots are ignored by the convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodMatrix {
    indices: Vec<u32>,
    pub n_queries: usize,
    pub n_max: usize,
    pub n_support: usize,
    pub radius: f64,
}

impl NeighborhoodMatrix {
    pub fn from_rows(rows: Vec<Vec<u32>>, n_support: usize, radius: f64) -> Self {
        let n_queries = rows.len();
        let n_max = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let sentinel = n_support as u32;
        let mut indices = vec![sentinel; n_queries * n_max];
        for (q, row) in rows.iter().enumerate() {
            indices[q * n_max..q * n_max + row.len()].copy_from_slice(row);
        }
        NeighborhoodMatrix {
            indices,
            n_queries,
            n_max,
            n_support,
            radius,
        }
    }

    #[inline]
    pub fn shadow(&self) -> u32 {
        self.n_support as u32
    }

    /// Full padded row, shadow slots included.
    #[inline]
    pub fn row(&self, q: usize) -> &[u32] {
        &self.indices[q * self.n_max..(q + 1) * self.n_max]
    }

    /// Leading non-shadow slice of a row.
    #[inline]
    pub fn neighbors(&self, q: usize) -> &[u32] {
        let row = self.row(q);
        let shadow = self.shadow();
        let end = row.iter().position(|&i| i == shadow).unwrap_or(row.len());
        &row[..end]
    }

    pub fn flat(&self) -> &[u32] {
        &self.indices
    }

    /// Widen the padding to `n_max` slots without touching row contents.
    pub fn repad(&self, n_max: usize) -> NeighborhoodMatrix {
        assert!(n_max >= self.n_max);
        let rows: Vec<Vec<u32>> = (0..self.n_queries)
            .map(|q| self.neighbors(q).to_vec())
            .collect();
        let mut out = NeighborhoodMatrix::from_rows(rows, self.n_support, self.radius);
        if out.n_max < n_max {
            let sentinel = out.shadow();
            let mut indices = vec![sentinel; out.n_queries * n_max];
            for q in 0..out.n_queries {
                let row = out.row(q);
                indices[q * n_max..q * n_max + row.len()].copy_from_slice(row);
            }
            out.indices = indices;
            out.n_max = n_max;
        }
        out
    }
}

/// All supports within `radius` (closed ball) of each query, via a uniform
/// spatial hash with cells of size `radius`. A `cap` keeps only the nearest
/// `cap` entries of a row, breaking distance ties by lower support index.
pub fn radius_neighbors(
    queries: &[Vec3],
    supports: &[Vec3],
    radius: f64,
    cap: Option<usize>,
) -> Result<NeighborhoodMatrix> {
    if !(radius > 0.0) {
        return Err(KpError::NotPositive {
            what: "radius",
            value: radius,
        });
    }
    if !queries.iter().all(|p| p.is_finite()) || !supports.iter().all(|p| p.is_finite()) {
        return Err(KpError::NonFinite);
    }

    let key = |p: Vec3| -> (i64, i64, i64) {
        (
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        )
    };

    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for (i, &p) in supports.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i as u32);
    }

    let r_sq = radius * radius;
    let mut rows = Vec::with_capacity(queries.len());
    let mut candidates: Vec<(f64, u32)> = Vec::new();
    for &q in queries {
        candidates.clear();
        let (cx, cy, cz) = key(q);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in bucket {
                            let d_sq = supports[i as usize].dist_sq(q);
                            if d_sq <= r_sq {
                                candidates.push((d_sq, i));
                            }
                        }
                    }
                }
            }
        }
        candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some(cap) = cap {
            candidates.truncate(cap);
        }
        rows.push(candidates.iter().map(|&(_, i)| i).collect());
    }
    Ok(NeighborhoodMatrix::from_rows(rows, supports.len(), radius))
}
