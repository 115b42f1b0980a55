//! Synthetic datasets: desk-scale stand-ins for the benchmark corpora.

use crate::error::{KpError, Result};
use crate::geometry::PointCloud;
use crate::math::{Mat, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Spheres, cubes and cylinders with one class label per cloud.
    Shapes3,
    /// Planar patches and right-angle corners, one class per cloud.
    PlanesCorners,
    /// Rooms with floor, walls and boxes, one semantic label per point.
    IndoorBoxes,
}

impl SyntheticKind {
    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::Shapes3 => 3,
            SyntheticKind::PlanesCorners => 2,
            SyntheticKind::IndoorBoxes => 3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shapes3" => Ok(SyntheticKind::Shapes3),
            "planes-corners" => Ok(SyntheticKind::PlanesCorners),
            "indoor-boxes" => Ok(SyntheticKind::IndoorBoxes),
            other => Err(KpError::Config(format!("unknown dataset kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Shapes3 => "shapes3",
            SyntheticKind::PlanesCorners => "planes-corners",
            SyntheticKind::IndoorBoxes => "indoor-boxes",
        }
    }
}

/// Surface jitter applied to every sampled shape (meters).
pub const SURFACE_JITTER: f64 = 0.01;

fn jittered<R: Rng>(rng: &mut R, p: Vec3) -> Vec3 {
    let dx: f64 = rng.sample(StandardNormal);
    let dy: f64 = rng.sample(StandardNormal);
    let dz: f64 = rng.sample(StandardNormal);
    p + Vec3::new(dx, dy, dz).scaled(SURFACE_JITTER)
}

fn sphere_point<R: Rng>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v.scaled(radius / n);
        }
    }
}

fn cube_point<R: Rng>(rng: &mut R, half: f64) -> Vec3 {
    let face = rng.random_range(0..6u32);
    let u = rng.random_range(-half..half);
    let v = rng.random_range(-half..half);
    match face {
        0 => Vec3::new(half, u, v),
        1 => Vec3::new(-half, u, v),
        2 => Vec3::new(u, half, v),
        3 => Vec3::new(u, -half, v),
        4 => Vec3::new(u, v, half),
        _ => Vec3::new(u, v, -half),
    }
}

fn cylinder_point<R: Rng>(rng: &mut R, radius: f64, half_height: f64) -> Vec3 {
    let side_area = 2.0 * std::f64::consts::PI * radius * 2.0 * half_height;
    let cap_area = std::f64::consts::PI * radius * radius;
    let total = side_area + 2.0 * cap_area;
    let pick = rng.random_range(0.0..total);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    if pick < side_area {
        Vec3::new(
            radius * angle.cos(),
            radius * angle.sin(),
            rng.random_range(-half_height..half_height),
        )
    } else {
        let r = radius * rng.random_range(0.0f64..1.0).sqrt();
        let z = if pick < side_area + cap_area {
            half_height
        } else {
            -half_height
        };
        Vec3::new(r * angle.cos(), r * angle.sin(), z)
    }
}

fn bare_labeled(points: Vec<Vec3>, labels: Vec<u32>) -> PointCloud {
    let n = points.len();
    PointCloud::new(points, Mat::zeros(n, 0)).with_labels(labels)
}

/// Deterministic per seed; classes cycle so the balance matches the
/// requested proportions exactly.
pub fn generate_synthetic_dataset(
    kind: SyntheticKind,
    count: usize,
    points_per_cloud: usize,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    if count == 0 || points_per_cloud == 0 {
        return Err(KpError::Config("empty dataset requested".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let cloud = match kind {
            SyntheticKind::Shapes3 => {
                let class = (i % 3) as u32;
                let points: Vec<Vec3> = (0..points_per_cloud)
                    .map(|_| {
                        let p = match class {
                            0 => sphere_point(&mut rng, 1.0),
                            1 => cube_point(&mut rng, 0.8),
                            _ => cylinder_point(&mut rng, 0.7, 1.0),
                        };
                        jittered(&mut rng, p)
                    })
                    .collect();
                bare_labeled(points, vec![class; points_per_cloud])
            }
            SyntheticKind::PlanesCorners => {
                let class = (i % 2) as u32;
                let points: Vec<Vec3> = (0..points_per_cloud)
                    .map(|_| {
                        let u = rng.random_range(-1.0..1.0);
                        let v = rng.random_range(-1.0..1.0);
                        let p = if class == 0 {
                            Vec3::new(u, v, 0.0)
                        } else if rng.random_range(0.0..1.0) < 0.5 {
                            Vec3::new(u, v.abs(), 0.0)
                        } else {
                            Vec3::new(u, 0.0, v.abs())
                        };
                        jittered(&mut rng, p)
                    })
                    .collect();
                bare_labeled(points, vec![class; points_per_cloud])
            }
            SyntheticKind::IndoorBoxes => room(&mut rng, points_per_cloud),
        };
        out.push(cloud);
    }
    Ok(out)
}

/// Floor = 0, wall = 1, box = 2.
fn room<R: Rng>(rng: &mut R, n: usize) -> PointCloud {
    let width = rng.random_range(3.0..5.0);
    let depth = rng.random_range(3.0..5.0);
    let height = 2.5;
    let n_boxes = rng.random_range(2..5usize);
    let boxes: Vec<(Vec3, Vec3)> = (0..n_boxes)
        .map(|_| {
            let half = Vec3::new(
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.6),
            );
            let center = Vec3::new(
                rng.random_range(half.x..width - half.x),
                rng.random_range(half.y..depth - half.y),
                half.z,
            );
            (center, half)
        })
        .collect();

    let floor_area = width * depth;
    let wall_area = 2.0 * (width + depth) * height;
    let box_area: f64 = boxes
        .iter()
        .map(|(_, h)| 8.0 * (h.x * h.y + h.x * h.z + h.y * h.z))
        .sum();
    let total = floor_area + wall_area + box_area;

    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.random_range(0.0..total);
        let (p, label) = if pick < floor_area {
            (
                Vec3::new(rng.random_range(0.0..width), rng.random_range(0.0..depth), 0.0),
                0,
            )
        } else if pick < floor_area + wall_area {
            let along = rng.random_range(0.0..2.0 * (width + depth));
            let z = rng.random_range(0.0..height);
            let p = if along < width {
                Vec3::new(along, 0.0, z)
            } else if along < width + depth {
                Vec3::new(width, along - width, z)
            } else if along < 2.0 * width + depth {
                Vec3::new(along - width - depth, depth, z)
            } else {
                Vec3::new(0.0, along - 2.0 * width - depth, z)
            };
            (p, 1)
        } else {
            let mut remaining = pick - floor_area - wall_area;
            let mut chosen = boxes.len() - 1;
            for (bi, (_, h)) in boxes.iter().enumerate() {
                let area = 8.0 * (h.x * h.y + h.x * h.z + h.y * h.z);
                if remaining < area {
                    chosen = bi;
                    break;
                }
                remaining -= area;
            }
            let (center, half) = boxes[chosen];
            (center + cuboid_point(rng, half), 2)
        };
        points.push(jittered(rng, p));
        labels.push(label);
    }
    bare_labeled(points, labels)
}

fn cuboid_point<R: Rng>(rng: &mut R, half: Vec3) -> Vec3 {
    let areas = [
        half.y * half.z, // +x / -x faces (relative weights)
        half.y * half.z,
        half.x * half.z,
        half.x * half.z,
        half.x * half.y,
        half.x * half.y,
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 5;
    for (i, &a) in areas.iter().enumerate() {
        if pick < a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.random_range(-1.0..1.0);
    let v = rng.random_range(-1.0..1.0);
    match face {
        0 => Vec3::new(half.x, u * half.y, v * half.z),
        1 => Vec3::new(-half.x, u * half.y, v * half.z),
        2 => Vec3::new(u * half.x, half.y, v * half.z),
        3 => Vec3::new(u * half.x, -half.y, v * half.z),
        4 => Vec3::new(u * half.x, v * half.y, half.z),
        _ => Vec3::new(u * half.x, v * half.y, -half.z),
    }
}
