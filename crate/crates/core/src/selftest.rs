//! Self-contained verification suite: gradient checks against central
//! finite differences, oracle equivalences and the operator invariants.
//! Each check reports its measured error against the tolerance it must meet.

use crate::conv::{
    correlation, deform_kpconv_forward, fitting_loss, fitting_loss_grad, kpconv_backward,
    kpconv_forward, kpconv_forward_naive, predict_offsets, repulsive_loss, repulsive_loss_grad,
    ConvWeights, OffsetField,
};
use crate::error::Result;
use crate::geometry::{radius_neighbors, NeighborhoodMatrix};
use crate::kernel_points::{optimize_disposition, prepare_layer_kernel, LayerKernel};
use crate::math::{grad_err, rel_err, Mat, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;
pub const OPERATOR_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_err < self.tolerance
    }
}

/// A random convolution instance: queries, supports, features, rows, kernel
/// and weights, plus a generic offset field and upstream gradient.
pub struct ConvInstance {
    pub queries: Vec<Vec3>,
    pub supports: Vec<Vec3>,
    pub features: Mat,
    pub neighbors: NeighborhoodMatrix,
    pub kernel: LayerKernel,
    pub weights: ConvWeights,
    pub offsets: OffsetField,
    pub upstream: Mat,
}

pub fn random_instance(
    seed: u64,
    n_queries: usize,
    n_supports: usize,
    k: usize,
    d_in: usize,
    d_out: usize,
) -> ConvInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pt = |rng: &mut ChaCha8Rng| {
        Vec3::new(
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        )
    };
    let queries: Vec<Vec3> = (0..n_queries).map(|_| pt(&mut rng)).collect();
    let supports: Vec<Vec3> = (0..n_supports).map(|_| pt(&mut rng)).collect();
    let mut features = Mat::zeros(n_supports, d_in);
    for v in features.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let radius = 0.6;
    let neighbors = radius_neighbors(&queries, &supports, radius, None).unwrap();
    let disposition = optimize_disposition(k, true, 0).unwrap();
    let kernel = prepare_layer_kernel(&disposition, radius / 2.5, seed.wrapping_add(1)).unwrap();
    let mut weights = ConvWeights::zeros(k, d_in, d_out);
    for m in &mut weights.mats {
        for v in m.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let mut offsets = OffsetField::zeros(n_queries, k);
    for q in 0..n_queries {
        for kk in 0..k {
            *offsets.get_mut(q, kk) = crate::math::random_in_unit_ball(&mut rng).scaled(0.1);
        }
    }
    let mut upstream = Mat::zeros(n_queries, d_out);
    for v in upstream.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    ConvInstance {
        queries,
        supports,
        features,
        neighbors,
        kernel,
        weights,
        offsets,
        upstream,
    }
}

/// Max gradient-check error over features, weights and (when deformable)
/// offsets of one convolution instance, probing every entry.
pub fn conv_gradient_max_err(inst: &ConvInstance, deformable: bool, step: f64) -> f64 {
    let offsets = deformable.then(|| inst.offsets.clone());
    let objective = |f: &Mat, w: &ConvWeights, of: Option<&OffsetField>| -> f64 {
        let out = match of {
            Some(of) => deform_kpconv_forward(
                &inst.queries,
                &inst.supports,
                f,
                &inst.neighbors,
                &inst.kernel,
                w,
                of,
            )
            .unwrap(),
            None => kpconv_forward(&inst.queries, &inst.supports, f, &inst.neighbors, &inst.kernel, w)
                .unwrap(),
        };
        out.data.iter().zip(&inst.upstream.data).map(|(o, g)| o * g).sum()
    };
    let grads = kpconv_backward(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
        offsets.as_ref(),
        &inst.upstream,
    )
    .unwrap();

    let mut worst = 0.0f64;
    for i in 0..inst.features.data.len() {
        let mut plus = inst.features.clone();
        let mut minus = inst.features.clone();
        plus.data[i] += step;
        minus.data[i] -= step;
        let fd = (objective(&plus, &inst.weights, offsets.as_ref())
            - objective(&minus, &inst.weights, offsets.as_ref()))
            / (2.0 * step);
        worst = worst.max(grad_err(fd, grads.wrt_features.data[i], FD_FLOOR));
    }
    for kk in 0..inst.weights.k() {
        for i in 0..inst.weights.mats[kk].data.len() {
            let mut plus = inst.weights.clone();
            let mut minus = inst.weights.clone();
            plus.mats[kk].data[i] += step;
            minus.mats[kk].data[i] -= step;
            let fd = (objective(&inst.features, &plus, offsets.as_ref())
                - objective(&inst.features, &minus, offsets.as_ref()))
                / (2.0 * step);
            worst = worst.max(grad_err(fd, grads.wrt_weights[kk].data[i], FD_FLOOR));
        }
    }
    if let Some(offsets) = &offsets {
        let go = grads.wrt_offsets.as_ref().unwrap();
        for q in 0..offsets.n_queries {
            for kk in 0..offsets.k {
                for axis in 0..3 {
                    let mut bump = [0.0; 3];
                    bump[axis] = step;
                    let mut plus = offsets.clone();
                    let mut minus = offsets.clone();
                    *plus.get_mut(q, kk) += Vec3::from_array(bump);
                    *minus.get_mut(q, kk) += Vec3::from_array(bump).scaled(-1.0);
                    let fd = (objective(&inst.features, &inst.weights, Some(&plus))
                        - objective(&inst.features, &inst.weights, Some(&minus)))
                        / (2.0 * step);
                    worst = worst.max(grad_err(fd, go.get(q, kk).as_array()[axis], FD_FLOOR));
                }
            }
        }
    }
    worst
}

/// Max gradient-check error of the fitting and repulsive losses.
pub fn loss_gradient_max_err(seed: u64, step: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.3;
    let ys: Vec<Vec3> = (0..8)
        .map(|_| crate::math::random_in_unit_ball(&mut rng).scaled(0.4))
        .collect();
    let zs: Vec<Vec3> = (0..6)
        .map(|_| crate::math::random_in_unit_ball(&mut rng).scaled(0.4))
        .collect();
    let (_, fit_grad) = fitting_loss_grad(&ys, &zs, sigma);
    let (_, rep_grad) = repulsive_loss_grad(&zs, sigma);
    let mut worst = 0.0f64;
    for i in 0..zs.len() {
        for axis in 0..3 {
            let mut bump = [0.0; 3];
            bump[axis] = step;
            let mut plus = zs.clone();
            let mut minus = zs.clone();
            plus[i] += Vec3::from_array(bump);
            minus[i] += Vec3::from_array(bump).scaled(-1.0);
            let fit_fd =
                (fitting_loss(&ys, &plus, sigma) - fitting_loss(&ys, &minus, sigma)) / (2.0 * step);
            let rep_fd =
                (repulsive_loss(&plus, sigma) - repulsive_loss(&minus, sigma)) / (2.0 * step);
            worst = worst.max(grad_err(fit_fd, fit_grad[i].as_array()[axis], FD_FLOOR));
            worst = worst.max(grad_err(rep_fd, rep_grad[i].as_array()[axis], FD_FLOOR));
        }
    }
    worst
}

/// Max relative difference between the blocked forward and the naive
/// triple-loop oracle on one instance (rigid and deformable).
pub fn oracle_equivalence_max_err(inst: &ConvInstance) -> f64 {
    let mut worst = 0.0f64;
    let rigid = kpconv_forward(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
    )
    .unwrap();
    let rigid_naive = kpconv_forward_naive(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
        None,
    )
    .unwrap();
    for (a, b) in rigid.data.iter().zip(&rigid_naive.data) {
        worst = worst.max(rel_err(*a, *b, 1e-12));
    }
    let deform = deform_kpconv_forward(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
        &inst.offsets,
    )
    .unwrap();
    let deform_naive = kpconv_forward_naive(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
        Some(&inst.offsets),
    )
    .unwrap();
    for (a, b) in deform.data.iter().zip(&deform_naive.data) {
        worst = worst.max(rel_err(*a, *b, 1e-12));
    }
    worst
}

/// Zero offsets must reproduce the rigid output bit for bit.
pub fn zero_offset_parity(inst: &ConvInstance) -> bool {
    let rigid = kpconv_forward(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
    )
    .unwrap();
    let zeros = OffsetField::zeros(inst.queries.len(), inst.kernel.k());
    let deform = deform_kpconv_forward(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &inst.weights,
        &zeros,
    )
    .unwrap();
    rigid.data == deform.data
}

/// Offset prediction equals the rigid forward pass reshaped.
pub fn offset_prediction_composition(seed: u64) -> bool {
    let inst = random_instance(seed, 5, 14, 5, 3, 2);
    let k = inst.kernel.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let mut offset_weights = ConvWeights::zeros(k, 3, 3 * k);
    for m in &mut offset_weights.mats {
        for v in m.data.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let field = predict_offsets(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &offset_weights,
        k,
    )
    .unwrap();
    let raw = kpconv_forward(
        &inst.queries,
        &inst.supports,
        &inst.features,
        &inst.neighbors,
        &inst.kernel,
        &offset_weights,
    )
    .unwrap();
    field.to_matrix().data == raw.data
}

/// Brute-force subsampling oracle agreement (exact).
pub fn subsample_matches_oracle(seed: u64, n: usize, cell: f64) -> bool {
    use std::collections::BTreeMap;
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
    let cloud = crate::geometry::PointCloud::bare(points.clone());
    let (support, assignment) = crate::geometry::grid_subsample(&cloud, cell).unwrap();

    let key = |p: Vec3| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut buckets: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for &p in &points {
        let e = buckets.entry(key(p)).or_insert((Vec3::ZERO, 0));
        e.0 += p;
        e.1 += 1;
    }
    if buckets.len() != support.len() {
        return false;
    }
    for (slot, &sp) in support.points.iter().enumerate() {
        let Some(&(sum, count)) = buckets.get(&key(sp)) else {
            return false;
        };
        if sum.scaled(1.0 / count as f64) != sp {
            return false;
        }
        // membership: every input assigned to this slot shares the cell
        for (i, &a) in assignment.iter().enumerate() {
            if a == slot && key(points[i]) != key(sp) {
                return false;
            }
        }
    }
    true
}

/// Brute-force neighborhood oracle agreement (exact).
pub fn neighbors_match_oracle(seed: u64, n: usize, radius: f64, cap: Option<usize>) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pt = |rng: &mut ChaCha8Rng| {
        Vec3::new(
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        )
    };
    let queries: Vec<Vec3> = (0..n).map(|_| pt(&mut rng)).collect();
    let supports: Vec<Vec3> = (0..n).map(|_| pt(&mut rng)).collect();
    let nm = radius_neighbors(&queries, &supports, radius, cap).unwrap();
    for (q, &query) in queries.iter().enumerate() {
        let mut expected: Vec<(f64, u32)> = supports
            .iter()
            .enumerate()
            .filter(|(_, p)| p.dist_sq(query) <= radius * radius)
            .map(|(i, p)| (p.dist_sq(query), i as u32))
            .collect();
        expected.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some(cap) = cap {
            expected.truncate(cap);
        }
        let expected: Vec<u32> = expected.into_iter().map(|(_, i)| i).collect();
        if nm.neighbors(q) != expected.as_slice() {
            return false;
        }
    }
    true
}

/// Correlation sanity on exactly representable distances.
pub fn correlation_sanity() -> bool {
    let kp = Vec3::new(0.25, 0.0, 0.0);
    correlation(kp, kp, 0.25) == 1.0
        && correlation(Vec3::new(0.5, 0.0, 0.0), kp, 0.25) == 0.0
        && correlation(Vec3::new(0.375, 0.0, 0.0), kp, 0.25) == 0.5
}

/// Runs the whole suite, printing one line per check.
pub fn run_selftest() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for seed in 0..3 {
        let inst = random_instance(seed, 4, 12, 7, 3, 4);
        worst = worst.max(conv_gradient_max_err(&inst, false, FD_STEP));
    }
    checks.push(Check {
        name: "rigid convolution gradients vs finite differences",
        max_err: worst,
        tolerance: OPERATOR_TOL,
    });

    let mut worst = 0.0f64;
    for seed in 10..13 {
        let inst = random_instance(seed, 4, 12, 5, 3, 4);
        worst = worst.max(conv_gradient_max_err(&inst, true, FD_STEP));
    }
    checks.push(Check {
        name: "deformable convolution gradients (incl. offsets)",
        max_err: worst,
        tolerance: OPERATOR_TOL,
    });

    let mut worst = 0.0f64;
    for seed in 20..23 {
        worst = worst.max(loss_gradient_max_err(seed, FD_STEP));
    }
    checks.push(Check {
        name: "fitting/repulsive loss gradients",
        max_err: worst,
        tolerance: OPERATOR_TOL,
    });

    let mut worst = 0.0f64;
    for seed in 30..40 {
        let inst = random_instance(seed, 4, 10, 15, 3, 5);
        worst = worst.max(oracle_equivalence_max_err(&inst));
    }
    checks.push(Check {
        name: "blocked forward vs naive triple-loop oracle",
        max_err: worst,
        tolerance: ORACLE_TOL,
    });

    let parity = (40..50).all(|seed| zero_offset_parity(&random_instance(seed, 5, 15, 7, 3, 2)));
    checks.push(Check {
        name: "zero offsets reproduce rigid bitwise",
        max_err: if parity { 0.0 } else { 1.0 },
        tolerance: 0.5,
    });

    let composed = (50..55).all(offset_prediction_composition);
    checks.push(Check {
        name: "offset prediction equals rigid forward reshaped",
        max_err: if composed { 0.0 } else { 1.0 },
        tolerance: 0.5,
    });

    let neighbors = (60..70).all(|s| neighbors_match_oracle(s, 200, 0.3, None))
        && (70..75).all(|s| neighbors_match_oracle(s, 150, 0.35, Some(8)));
    checks.push(Check {
        name: "radius neighborhoods equal brute force",
        max_err: if neighbors { 0.0 } else { 1.0 },
        tolerance: 0.5,
    });

    let subsample = (80..90).all(|s| subsample_matches_oracle(s, 400, 0.2));
    checks.push(Check {
        name: "grid subsampling equals brute force",
        max_err: if subsample { 0.0 } else { 1.0 },
        tolerance: 0.5,
    });

    checks.push(Check {
        name: "linear correlation fixed points",
        max_err: if correlation_sanity() { 0.0 } else { 1.0 },
        tolerance: 0.5,
    });

    Ok(checks)
}
