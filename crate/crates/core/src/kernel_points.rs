//! Regular kernel point dispositions.
//!
//! Kernel points repel each other and are attracted to the sphere center;
//! minimizing the total energy by gradient descent yields regular polyhedra
//! for many K. Per-layer kernels are rescaled copies of a disposition with a
//! random rotation applied.

use crate::error::{KpError, Result};
use crate::math::{random_in_unit_ball, random_rotation, Rot3, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// A disposition of K kernel points at optimization scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDisposition {
    pub points: Vec<Vec3>,
    pub has_fixed_center: bool,
    /// Gradient norm reached the tolerance before the iteration cap.
    pub converged: bool,
    /// Total energy of `points`.
    pub energy: f64,
    pub seed: u64,
}

impl KernelDisposition {
    pub fn k(&self) -> usize {
        self.points.len()
    }

    /// Points other than the fixed center.
    pub fn outer_points(&self) -> &[Vec3] {
        if self.has_fixed_center {
            &self.points[1..]
        } else {
            &self.points
        }
    }
}

/// Kernel points of one layer: disposition rescaled so the surrounding
/// points average `1.5 * sigma`, then randomly rotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKernel {
    pub points: Vec<Vec3>,
    pub sigma: f64,
    pub rotation: Rot3,
    pub has_fixed_center: bool,
}

impl LayerKernel {
    pub fn k(&self) -> usize {
        self.points.len()
    }

    /// Largest distance from a query at which any kernel point can respond.
    pub fn max_reach(&self) -> f64 {
        let far = self.points.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
        far + self.sigma
    }
}

/// Total energy: attraction of each point to the origin plus pairwise
/// repulsion, `sum_k ( |x_k|^2 + sum_{l != k} 1 / |x_l - x_k| )`.
pub fn total_energy(points: &[Vec3]) -> Result<f64> {
    let mut energy = 0.0;
    for (k, &p) in points.iter().enumerate() {
        energy += p.norm_sq();
        for (l, &q) in points.iter().enumerate() {
            if l == k {
                continue;
            }
            let d = p.dist(q);
            if d == 0.0 {
                return Err(KpError::CoincidentPoints);
            }
            energy += 1.0 / d;
        }
    }
    Ok(energy)
}

/// Analytic gradient of [`total_energy`] with respect to every point.
pub fn energy_gradient(points: &[Vec3]) -> Result<Vec<Vec3>> {
    let mut grads = vec![Vec3::ZERO; points.len()];
    for (k, &p) in points.iter().enumerate() {
        let mut g = p.scaled(2.0);
        for (l, &q) in points.iter().enumerate() {
            if l == k {
                continue;
            }
            let diff = p - q;
            let d = diff.norm();
            if d == 0.0 {
                return Err(KpError::CoincidentPoints);
            }
            // each unordered pair appears twice in the energy
            g += diff.scaled(-2.0 / (d * d * d));
        }
        grads[k] = g;
    }
    Ok(grads)
}

const INITIAL_STEP: f64 = 1e-2;
const GRAD_TOLERANCE: f64 = 1e-5;
// 10k iterations leave K=15 short of the gradient tolerance; the cost per
// iteration is tiny, so the cap is generous.
const MAX_ITERATIONS: usize = 200_000;
const MIN_SEPARATION: f64 = 1e-3;

/// Minimizes the disposition energy by gradient descent with a backtracking
/// line search (step halved while the energy would increase). Points start
/// uniform in the unit ball, rejection-sampled to pairwise separation of at
/// least `1e-3`. With `fixed_center` the first point is pinned at the origin.
///
/// If the gradient norm over free points has not reached `1e-5` within the
/// iteration cap, the best configuration so far is returned with
/// `converged = false`.
pub fn optimize_disposition(k: usize, fixed_center: bool, seed: u64) -> Result<KernelDisposition> {
    if k == 0 {
        return Err(KpError::Config("K must be at least 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut points = Vec::with_capacity(k);
    if fixed_center {
        points.push(Vec3::ZERO);
    }
    while points.len() < k {
        let candidate = random_in_unit_ball(&mut rng);
        if points.iter().all(|p| p.dist(candidate) >= MIN_SEPARATION) {
            points.push(candidate);
        }
    }

    let first_free = if fixed_center { 1 } else { 0 };
    if k == 1 {
        let points = vec![Vec3::ZERO];
        return Ok(KernelDisposition {
            points,
            has_fixed_center: fixed_center,
            converged: true,
            energy: 0.0,
            seed,
        });
    }

    let mut energy = total_energy(&points)?;
    let mut step = INITIAL_STEP;
    let mut converged = false;

    for _ in 0..MAX_ITERATIONS {
        let grads = energy_gradient(&points)?;
        let grad_norm = grads[first_free..]
            .iter()
            .map(|g| g.norm_sq())
            .sum::<f64>()
            .sqrt();
        if grad_norm < GRAD_TOLERANCE {
            converged = true;
            break;
        }

        let mut accepted = false;
        while step > 1e-16 {
            let mut trial = points.clone();
            for (i, t) in trial.iter_mut().enumerate().skip(first_free) {
                *t += grads[i].scaled(-step);
            }
            match total_energy(&trial) {
                Ok(trial_energy) if trial_energy <= energy => {
                    points = trial;
                    energy = trial_energy;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break; // step underflow: cannot decrease further
        }
        step = (step * 2.0).min(INITIAL_STEP);
    }

    Ok(KernelDisposition {
        points,
        has_fixed_center: fixed_center,
        converged,
        energy,
        seed,
    })
}

/// Rescales a disposition so the non-center points average `1.5 * sigma`
/// from the origin and applies a rotation drawn uniformly over SO(3).
pub fn prepare_layer_kernel(
    disposition: &KernelDisposition,
    sigma: f64,
    seed: u64,
) -> Result<LayerKernel> {
    if !(sigma > 0.0) {
        return Err(KpError::NotPositive {
            what: "sigma",
            value: sigma,
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rotation = random_rotation(&mut rng);

    let outer = disposition.outer_points();
    let scale = if outer.is_empty() {
        1.0 // K == 1: nothing to rescale
    } else {
        let mean_norm = outer.iter().map(|p| p.norm()).sum::<f64>() / outer.len() as f64;
        1.5 * sigma / mean_norm
    };

    let points = disposition
        .points
        .iter()
        .map(|&p| rotation.apply(p.scaled(scale)))
        .collect();

    Ok(LayerKernel {
        points,
        sigma,
        rotation,
        has_fixed_center: disposition.has_fixed_center,
    })
}

/// Groups points by their projection onto `axis`, splitting at gaps larger
/// than a tenth of the projection span. Returns group sizes from the top of
/// the axis down.
pub fn projection_groups(points: &[Vec3], axis: Vec3) -> Vec<usize> {
    let axis = axis.normalized();
    let mut projections: Vec<f64> = points.iter().map(|&p| p.dot(axis)).collect();
    projections.sort_by(|a, b| b.total_cmp(a));
    if projections.is_empty() {
        return Vec::new();
    }
    let span = projections[0] - projections[projections.len() - 1];
    let gap = 0.1 * span.max(1e-12);
    let mut groups = vec![1usize];
    for w in projections.windows(2) {
        if w[0] - w[1] > gap {
            groups.push(1);
        } else {
            *groups.last_mut().unwrap() += 1;
        }
    }
    groups
}

/// Searches the outer-point directions for an axis whose projection grouping
/// matches `expected` (or its reverse).
pub fn find_symmetry_axis(points: &[Vec3], expected: &[usize]) -> Option<Vec3> {
    let reversed: Vec<usize> = expected.iter().rev().copied().collect();
    for &p in points {
        let axis = p.normalized();
        let groups = projection_groups(points, axis);
        if groups == expected || groups == reversed {
            return Some(axis);
        }
    }
    None
}

/// Relative spread `(max - min) / mean` of a list of positive scalars.
pub fn relative_spread(values: &[f64]) -> f64 {
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    let mean = sum / values.len() as f64;
    (hi - lo) / mean
}

/// All pairwise distances of a point set.
pub fn pairwise_distances(points: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            out.push(points[i].dist(points[j]));
        }
    }
    out
}

/// Plain-text export: one `x y z` row per kernel point.
pub fn disposition_table(disposition: &KernelDisposition) -> String {
    let mut out = String::new();
    for p in &disposition.points {
        out.push_str(&format!("{:.17} {:.17} {:.17}\n", p.x, p.y, p.z));
    }
    out
}

/// JSON sidecar describing a disposition export.
pub fn disposition_sidecar(disposition: &KernelDisposition) -> String {
    serde_json::json!({
        "k": disposition.k(),
        "seed": disposition.seed,
        "fixed_center": disposition.has_fixed_center,
        "converged": disposition.converged,
        "energy": disposition.energy,
    })
    .to_string()
}
