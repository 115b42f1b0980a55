//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured values (run with `--nocapture` to see them).

use kpconv::conv::{
    correlation, deform_kpconv_forward, kpconv_backward, kpconv_forward, kpconv_forward_naive,
    predict_offsets, regularization_loss, ConvWeights, OffsetField,
};
use kpconv::geometry::{
    assemble_batch, grid_subsample, radius_neighbors, NeighborhoodMatrix, PointCloud,
};
use kpconv::kernel_points::{
    find_symmetry_axis, optimize_disposition, pairwise_distances, prepare_layer_kernel,
    projection_groups, relative_spread, LayerKernel,
};
use kpconv::math::{grad_err, rel_err, Mat, Vec3};
use kpconv::network::blocks::{ConvUnit, OffsetPredictor, REG_WEIGHT};
use kpconv::network::{element_labels, Network, NetworkSpec, Schedule, Task};
use kpconv::pipeline::{compute_erf, receptive_bound, train, RunConfig, SyntheticKind};
use kpconv::selftest::{conv_gradient_max_err, loss_gradient_max_err, random_instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-8;

/// Relative error between two outputs at instance scale: the largest
/// absolute difference over the largest reference magnitude.
fn instance_rel_err(got: &Mat, reference: &Mat) -> f64 {
    let diff = got
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let scale = reference.data.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    diff / scale.max(1e-300)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            )
        })
        .collect()
}

fn toy_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = random_points(&mut rng, n);
    let mut features = Mat::zeros(n, 4);
    for (r, &p) in points.iter().enumerate() {
        features.row_mut(r).copy_from_slice(&[1.0, p.x, p.y, p.z]);
    }
    PointCloud::new(points, features).with_labels(vec![seed as u32 % 3; n])
}

fn toy_spec(task: Task) -> NetworkSpec {
    NetworkSpec {
        task,
        input_dim: 4,
        num_classes: 3,
        dl0: 0.15,
        widths: vec![4, 6],
        k_points: 5,
        sigma_ratio: 1.0,
        rho: 5.0,
        deformable: true,
        head_hidden: 8,
        dropout: 0.5,
        neighbor_cap: None,
    }
}

/// Criterion 1: analytic gradients match 64-bit central finite differences,
/// < 1e-4 for operators and < 1e-3 end to end, within 60 seconds.
#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let operator_tol = 1e-4;
    let end_to_end_tol = 1e-3;

    // rigid and deformable convolution operators, every entry probed
    let mut op_worst = 0.0f64;
    for seed in [3, 5, 9] {
        let inst = random_instance(seed, 4, 12, 7, 3, 4);
        op_worst = op_worst.max(conv_gradient_max_err(&inst, false, FD_STEP));
    }
    for seed in [12, 15, 19] {
        let inst = random_instance(seed, 4, 12, 5, 3, 4);
        op_worst = op_worst.max(conv_gradient_max_err(&inst, true, FD_STEP));
    }
    assert!(op_worst < operator_tol, "operator gradients: {op_worst}");

    // fitting and repulsive regularization losses
    let mut loss_worst = 0.0f64;
    for seed in [21, 24, 27] {
        loss_worst = loss_worst.max(loss_gradient_max_err(seed, FD_STEP));
    }
    assert!(loss_worst < operator_tol, "loss gradients: {loss_worst}");

    // offset predictor: gradients of the composed deformable convolution
    // with respect to the predictor weights
    let mut pred_worst = 0.0f64;
    for seed in [31, 35] {
        let inst = random_instance(seed, 4, 12, 5, 3, 4);
        let k = inst.kernel.k();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut pred_weights = ConvWeights::zeros(k, 3, 3 * k);
        for m in &mut pred_weights.mats {
            for v in m.data.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let unit = ConvUnit {
            kernel: inst.kernel.clone(),
            weights: inst.weights.clone(),
            offset: Some(OffsetPredictor {
                kernel: prepare_layer_kernel(
                    &optimize_disposition(k, true, 0).unwrap(),
                    inst.kernel.sigma,
                    seed,
                )
                .unwrap(),
                weights: pred_weights,
            }),
        };
        let objective = |u: &ConvUnit| -> f64 {
            let (out, ctx) = u
                .forward(&inst.queries, &inst.supports, &inst.features, &inst.neighbors)
                .unwrap();
            let dot: f64 = out.data.iter().zip(&inst.upstream.data).map(|(o, g)| o * g).sum();
            dot + REG_WEIGHT * ctx.reg_loss
        };
        let (_, ctx) = unit
            .forward(&inst.queries, &inst.supports, &inst.features, &inst.neighbors)
            .unwrap();
        let (_, grads) = unit
            .backward(
                &inst.queries,
                &inst.supports,
                &inst.features,
                &inst.neighbors,
                &ctx,
                &inst.upstream,
                REG_WEIGHT,
            )
            .unwrap();
        let analytic = grads.offset_weights.unwrap();
        for kk in 0..k {
            for i in 0..analytic[kk].data.len() {
                let mut plus = unit.clone();
                let mut minus = unit.clone();
                plus.offset.as_mut().unwrap().weights.mats[kk].data[i] += FD_STEP;
                minus.offset.as_mut().unwrap().weights.mats[kk].data[i] -= FD_STEP;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
                pred_worst = pred_worst.max(grad_err(fd, analytic[kk].data[i], FD_FLOOR));
            }
        }
    }
    assert!(pred_worst < operator_tol, "offset predictor: {pred_worst}");

    // full toy network, classification and segmentation, every parameter
    // class probed (offset weights set to a generic point: at exactly zero
    // the fitting loss sits on argmin ties of barycenter queries)
    let mut net_worst = 0.0f64;
    for task in [Task::Classification, Task::Segmentation] {
        let spec = toy_spec(task);
        let configs = spec.layer_configs();
        let clouds = vec![toy_cloud(25, 40), toy_cloud(20, 41)];
        let batch = assemble_batch(&clouds, &configs, 1000, None).unwrap();
        let mut net = Network::new(spec, 42).unwrap();
        {
            let mut rng = ChaCha8Rng::seed_from_u64(43);
            for (vec, scale) in net.params_mut() {
                if scale == kpconv::network::blocks::OFFSET_GRAD_SCALE {
                    for v in vec.iter_mut() {
                        *v = rng.random_range(-0.05..0.05);
                    }
                }
            }
        }
        let labels: Vec<u32> = match task {
            Task::Classification => element_labels(&batch).unwrap(),
            Task::Segmentation => batch.labels.clone().unwrap(),
        };
        let objective = |n: &Network| -> f64 {
            let mut n = n.clone();
            let (logits, ctx) = n.forward(&batch, true, None).unwrap();
            let (ce, _) =
                kpconv::network::layers::softmax_cross_entropy(&logits, &labels).unwrap();
            ce + REG_WEIGHT * Network::reg_loss(&ctx)
        };
        let grads = {
            let mut n = net.clone();
            let (logits, ctx) = n.forward(&batch, true, None).unwrap();
            let (_, gl) =
                kpconv::network::layers::softmax_cross_entropy(&logits, &labels).unwrap();
            net.backward(&batch, &ctx, &gl).unwrap()
        };
        let flat = grads.flat();
        let shapes: Vec<usize> = flat.iter().map(|v| v.len()).collect();
        for (pi, &len) in shapes.iter().enumerate() {
            for i in (0..len).step_by((len / 2).max(1)) {
                let fd_at = |h: f64| {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    plus.params_mut()[pi].0[i] += h;
                    minus.params_mut()[pi].0[i] -= h;
                    (objective(&plus) - objective(&minus)) / (2.0 * h)
                };
                let mut err = grad_err(fd_at(FD_STEP), flat[pi][i], FD_FLOOR);
                if err >= end_to_end_tol {
                    // a correlation kink inside the interval invalidates the
                    // difference quotient; the refined step must then agree
                    err = grad_err(fd_at(FD_STEP / 10.0), flat[pi][i], FD_FLOOR);
                }
                net_worst = net_worst.max(err);
            }
        }
    }
    assert!(net_worst < end_to_end_tol, "end-to-end gradients: {net_worst}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient suite took {elapsed:?}");
    println!(
        "[PASS] criterion 1: operators {op_worst:.2e} < 1e-4, losses {loss_worst:.2e} < 1e-4, \
         offset predictor {pred_worst:.2e} < 1e-4, end-to-end {net_worst:.2e} < 1e-3, {elapsed:?} < 60s"
    );
}

/// Criterion 2: blocked forward equals the naive oracle to < 1e-12 relative
/// on 100 instances; neighborhoods and subsampling equal brute force exactly
/// on 50 instances each.
#[test]
fn criterion_2_oracle_equivalence() {
    let mut conv_worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n_q = rng.random_range(3..8);
        let n_s = rng.random_range(8..20);
        let k = [5, 7, 13, 15][rng.random_range(0..4)];
        let d_in = rng.random_range(2..6);
        let d_out = rng.random_range(2..7);
        let inst = random_instance(seed, n_q, n_s, k, d_in, d_out);
        let blocked = kpconv_forward(
            &inst.queries,
            &inst.supports,
            &inst.features,
            &inst.neighbors,
            &inst.kernel,
            &inst.weights,
        )
        .unwrap();
        let naive = kpconv_forward_naive(
            &inst.queries,
            &inst.supports,
            &inst.features,
            &inst.neighbors,
            &inst.kernel,
            &inst.weights,
            None,
        )
        .unwrap();
        conv_worst = conv_worst.max(instance_rel_err(&blocked, &naive));
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
        conv_worst = conv_worst.max(instance_rel_err(&deform, &deform_naive));
    }
    assert!(conv_worst < 1e-12, "blocked vs naive: {conv_worst}");

    // exhaustive pairwise-distance oracle
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
        let queries = random_points(&mut rng, 150);
        let supports = random_points(&mut rng, 150);
        let radius = rng.random_range(0.15..0.45);
        let cap = if seed % 3 == 0 { Some(6) } else { None };
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
            assert_eq!(nm.neighbors(q), expected.as_slice(), "seed {seed} row {q}");
        }
    }

    // hash-by-floor bucketing oracle
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(77) + 3);
        let points = random_points(&mut rng, 400);
        let cell = rng.random_range(0.1..0.4);
        let cloud = PointCloud::bare(points.clone());
        let (support, assignment) = grid_subsample(&cloud, cell).unwrap();
        let key = |p: Vec3| {
            (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            )
        };
        let mut buckets: std::collections::BTreeMap<(i64, i64, i64), (Vec3, usize)> =
            std::collections::BTreeMap::new();
        for &p in &points {
            let e = buckets.entry(key(p)).or_insert((Vec3::ZERO, 0));
            e.0 += p;
            e.1 += 1;
        }
        assert_eq!(buckets.len(), support.len(), "seed {seed}");
        for (i, &p) in points.iter().enumerate() {
            let sp = support.points[assignment[i]];
            assert_eq!(key(p), key(sp), "seed {seed} point {i}");
        }
        for &sp in &support.points {
            let (sum, count) = buckets[&key(sp)];
            assert_eq!(sum.scaled(1.0 / count as f64), sp, "seed {seed}");
        }
    }
    println!(
        "[PASS] criterion 2: blocked vs naive {conv_worst:.2e} < 1e-12 on 100 instances; \
         neighborhoods and subsampling exact on 50 instances each"
    );
}

/// Criterion 3: zero offsets reproduce the rigid output exactly.
#[test]
fn criterion_3_rigid_deformable_parity() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 900);
        let inst = random_instance(
            seed,
            rng.random_range(3..8),
            rng.random_range(10..25),
            7,
            3,
            4,
        );
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
        assert_eq!(rigid.data, deform.data, "seed {seed}");
    }
    println!("[PASS] criterion 3: zero offsets bit-equal to rigid on 20 instances");
}

/// Criterion 4: the energy minimizer reproduces the documented dispositions
/// for K in 5, 7, 13, 15, each within 30 seconds, with per-group spreads
/// under 1e-3 relative.
#[test]
fn criterion_4_kernel_dispositions() {
    let cases: [(usize, Option<&[usize]>); 4] = [
        (5, None), // tetrahedron: checked by pairwise distances
        (7, Some(&[1, 4, 1])),
        (13, Some(&[1, 5, 5, 1])),
        (15, Some(&[1, 6, 6, 1])),
    ];
    for (k, signature) in cases {
        let start = Instant::now();
        let disposition = optimize_disposition(k, true, 0).unwrap();
        assert!(disposition.converged, "K={k} did not converge");
        assert_eq!(disposition.points[0], Vec3::ZERO);
        let outer = disposition.outer_points();
        match signature {
            None => {
                let dists = pairwise_distances(outer);
                assert_eq!(dists.len(), 6);
                let spread = relative_spread(&dists);
                assert!(spread < 1e-3, "tetrahedron distance spread {spread}");
            }
            Some(expected) => {
                let axis = find_symmetry_axis(outer, expected)
                    .unwrap_or_else(|| panic!("K={k}: no {expected:?} axis found"));
                let groups = projection_groups(outer, axis);
                let reversed: Vec<usize> = expected.iter().rev().copied().collect();
                assert!(groups == expected || groups == reversed);
                // within each group, norms and projections agree to 1e-3
                let mut idx: Vec<usize> = (0..outer.len()).collect();
                idx.sort_by(|&a, &b| outer[b].dot(axis).total_cmp(&outer[a].dot(axis)));
                let mut offset = 0;
                for &g in &groups {
                    let members = &idx[offset..offset + g];
                    offset += g;
                    if g < 2 {
                        continue;
                    }
                    let norms: Vec<f64> = members.iter().map(|&i| outer[i].norm()).collect();
                    let mean_r = norms.iter().sum::<f64>() / norms.len() as f64;
                    assert!(
                        relative_spread(&norms) < 1e-3,
                        "K={k} group norm spread {}",
                        relative_spread(&norms)
                    );
                    let projections: Vec<f64> =
                        members.iter().map(|&i| outer[i].dot(axis)).collect();
                    let span = projections.iter().cloned().fold(f64::MIN, f64::max)
                        - projections.iter().cloned().fold(f64::MAX, f64::min);
                    assert!(
                        span.abs() / mean_r < 1e-3,
                        "K={k} group projection spread {}",
                        span.abs() / mean_r
                    );
                }
            }
        }
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs() < 30, "K={k} took {elapsed:?}");
    }
    println!("[PASS] criterion 4: dispositions for K in {{5,7,13,15}} match their signatures, each run < 30 s");
}

fn active_fraction(
    queries: &[Vec3],
    supports: &[Vec3],
    rows: &NeighborhoodMatrix,
    kernel: &LayerKernel,
    offsets: &OffsetField,
) -> f64 {
    let mut active = 0usize;
    let mut total = 0usize;
    for (q, &query) in queries.iter().enumerate() {
        for (kk, &kp) in kernel.points.iter().enumerate() {
            let z = kp + offsets.get(q, kk);
            total += 1;
            if rows
                .neighbors(q)
                .iter()
                .any(|&i| correlation(supports[i as usize] - query, z, kernel.sigma) > 0.0)
            {
                active += 1;
            }
        }
    }
    active as f64 / total as f64
}

/// One training run of a single deformable convolution on a planar scene.
/// Only the offset predictor trains; the main loss is a fixed regression.
fn planar_deform_run(seed: u64, with_reg: bool) -> f64 {
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = 160;
    let points: Vec<Vec3> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
            Vec3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), z)
        })
        .collect();
    let dl = 0.15;
    let sigma = dl;
    let rows = radius_neighbors(&points, &points, 5.0 * dl, Some(30)).unwrap();
    let k = 7;
    let disposition = optimize_disposition(k, true, 0).unwrap();
    let kernel = prepare_layer_kernel(&disposition, sigma, seed + 1).unwrap();
    let d = 3;
    let mut features = Mat::zeros(n, d);
    for v in features.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut weights = ConvWeights::zeros(k, d, d);
    for m in &mut weights.mats {
        for v in m.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let off_kernel = prepare_layer_kernel(&disposition, sigma, seed + 2).unwrap();
    let mut off_weights = ConvWeights::zeros(k, d, 3 * k);
    for m in &mut off_weights.mats {
        for v in m.data.iter_mut() {
            *v = rng.random_range(-0.15..0.15);
        }
    }
    let mut target = Mat::zeros(n, d);
    for v in target.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }

    let lr = 5e-4;
    for _ in 0..200 {
        let offsets =
            predict_offsets(&points, &points, &features, &rows, &off_kernel, &off_weights, k)
                .unwrap();
        let out = deform_kpconv_forward(
            &points, &points, &features, &rows, &kernel, &weights, &offsets,
        )
        .unwrap();
        let mut upstream = Mat::zeros(n, d);
        for i in 0..out.data.len() {
            upstream.data[i] = 2.0 * (out.data[i] - target.data[i]) / n as f64;
        }
        let grads = kpconv_backward(
            &points,
            &points,
            &features,
            &rows,
            &kernel,
            &weights,
            Some(&offsets),
            &upstream,
        )
        .unwrap();
        let mut go = grads.wrt_offsets.unwrap();
        if with_reg {
            let (_, rg) =
                regularization_loss(&points, &points, &rows, &kernel, &offsets).unwrap();
            for q in 0..n {
                for kk in 0..k {
                    *go.get_mut(q, kk) += rg.get(q, kk).scaled(REG_WEIGHT);
                }
            }
        }
        let up_off = go.to_matrix();
        let pg = kpconv_backward(
            &points,
            &points,
            &features,
            &rows,
            &off_kernel,
            &off_weights,
            None,
            &up_off,
        )
        .unwrap();
        for (m, g) in off_weights.mats.iter_mut().zip(&pg.wrt_weights) {
            for (w, gv) in m.data.iter_mut().zip(&g.data) {
                *w -= lr * gv;
            }
        }
    }
    let offsets =
        predict_offsets(&points, &points, &features, &rows, &off_kernel, &off_weights, k).unwrap();
    active_fraction(&points, &points, &rows, &kernel, &offsets)
}

/// Criterion 5: on a planar scene, the regularization keeps strictly more
/// kernel points active after 200 training steps, on every one of 5 seeds.
#[test]
fn criterion_5_regularization_effect() {
    let mut summary = Vec::new();
    for seed in 0..5u64 {
        let without = planar_deform_run(seed, false);
        let with = planar_deform_run(seed, true);
        assert!(
            with > without,
            "seed {seed}: active fraction with reg {with:.3} <= without {without:.3}"
        );
        summary.push(format!("{without:.2}->{with:.2}"));
    }
    println!(
        "[PASS] criterion 5: active kernel-point fraction strictly higher with regularization on 5/5 seeds ({})",
        summary.join(", ")
    );
}

/// Criterion 6: desk-scale learning. KP-CNN reaches 95% training accuracy on
/// shapes3 within 50 epochs and 15 minutes; KP-FCNN reaches 90% per-point on
/// indoor-boxes within 50 epochs.
#[test]
fn criterion_6_desk_scale_learning() {
    let dir = tempfile::tempdir().unwrap();

    let start = Instant::now();
    let mut cls = RunConfig::classification_defaults();
    cls.out_dir = dir.path().join("cls");
    let cls_outcome = train(&cls, Some(0.95)).unwrap();
    let cls_elapsed = start.elapsed();
    assert!(
        cls_outcome.final_epoch_accuracy >= 0.95,
        "KP-CNN reached only {:.4} after {} epochs",
        cls_outcome.final_epoch_accuracy,
        cls_outcome.epochs_run
    );
    assert!(cls_outcome.epochs_run <= 50);
    assert!(
        cls_elapsed.as_secs() < 900,
        "KP-CNN training took {cls_elapsed:?}"
    );

    let mut seg = RunConfig::segmentation_defaults();
    seg.out_dir = dir.path().join("seg");
    let seg_outcome = train(&seg, Some(0.90)).unwrap();
    assert!(
        seg_outcome.final_epoch_accuracy >= 0.90,
        "KP-FCNN reached only {:.4} after {} epochs",
        seg_outcome.final_epoch_accuracy,
        seg_outcome.epochs_run
    );
    assert!(seg_outcome.epochs_run <= 50);

    println!(
        "[PASS] criterion 6: KP-CNN {:.3} in {} epochs ({cls_elapsed:?} < 15 min); KP-FCNN {:.3} in {} epochs",
        cls_outcome.final_epoch_accuracy,
        cls_outcome.epochs_run,
        seg_outcome.final_epoch_accuracy,
        seg_outcome.epochs_run
    );
}

/// Criterion 7: permutation invariance (bit-identical), translation
/// equivariance (exact on representable inputs), shadow nullity (exact) and
/// feature linearity (< 1e-12), 50 trials each.
#[test]
fn criterion_7_invariance_suite() {
    // permutation invariance under canonical row ordering
    for seed in 0..50u64 {
        let inst = random_instance(seed + 100, 5, 18, 7, 3, 4);
        let out = kpconv_forward(
            &inst.queries,
            &inst.supports,
            &inst.features,
            &inst.neighbors,
            &inst.kernel,
            &inst.weights,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..inst.supports.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let supports: Vec<Vec3> = perm.iter().map(|&i| inst.supports[i]).collect();
        let mut features = Mat::zeros(inst.features.rows, inst.features.cols);
        for (new, &old) in perm.iter().enumerate() {
            features.row_mut(new).copy_from_slice(inst.features.row(old));
        }
        let rows = radius_neighbors(&inst.queries, &supports, inst.neighbors.radius, None).unwrap();
        let permuted = kpconv_forward(
            &inst.queries,
            &supports,
            &features,
            &rows,
            &inst.kernel,
            &inst.weights,
        )
        .unwrap();
        assert_eq!(out.data, permuted.data, "permutation seed {seed}");
    }

    // translation equivariance, exact: quantized coordinates make the
    // query-centered differences bitwise equal after translation
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let quant = |v: f64| (v * 4096.0).round() / 4096.0;
        let qpt = |rng: &mut ChaCha8Rng| {
            Vec3::new(
                quant(rng.random_range(0.0..1.0)),
                quant(rng.random_range(0.0..1.0)),
                quant(rng.random_range(0.0..1.0)),
            )
        };
        let queries: Vec<Vec3> = (0..5).map(|_| qpt(&mut rng)).collect();
        let supports: Vec<Vec3> = (0..20).map(|_| qpt(&mut rng)).collect();
        let mut features = Mat::zeros(20, 3);
        for v in features.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let disposition = optimize_disposition(5, true, 0).unwrap();
        let kernel = prepare_layer_kernel(&disposition, 0.2, seed).unwrap();
        let mut weights = ConvWeights::zeros(5, 3, 2);
        for m in &mut weights.mats {
            for v in m.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let t = Vec3::new(
            quant(rng.random_range(-4.0..4.0)),
            quant(rng.random_range(-4.0..4.0)),
            quant(rng.random_range(-4.0..4.0)),
        );
        let rows = radius_neighbors(&queries, &supports, 0.5, None).unwrap();
        let out = kpconv_forward(&queries, &supports, &features, &rows, &kernel, &weights).unwrap();
        let moved_q: Vec<Vec3> = queries.iter().map(|&p| p + t).collect();
        let moved_s: Vec<Vec3> = supports.iter().map(|&p| p + t).collect();
        let moved_rows = radius_neighbors(&moved_q, &moved_s, 0.5, None).unwrap();
        assert_eq!(rows.flat(), moved_rows.flat(), "index tables seed {seed}");
        let moved_out =
            kpconv_forward(&moved_q, &moved_s, &features, &moved_rows, &kernel, &weights).unwrap();
        assert_eq!(out.data, moved_out.data, "translation seed {seed}");
    }

    // shadow nullity: extra shadow slots change nothing
    for seed in 0..50u64 {
        let inst = random_instance(seed + 700, 4, 15, 5, 3, 4);
        let out = kpconv_forward(
            &inst.queries,
            &inst.supports,
            &inst.features,
            &inst.neighbors,
            &inst.kernel,
            &inst.weights,
        )
        .unwrap();
        let widened = inst.neighbors.repad(inst.neighbors.n_max + 1 + (seed as usize % 5));
        let padded = kpconv_forward(
            &inst.queries,
            &inst.supports,
            &inst.features,
            &widened,
            &inst.kernel,
            &inst.weights,
        )
        .unwrap();
        assert_eq!(out.data, padded.data, "shadow seed {seed}");
    }

    // linearity in the features
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let inst = random_instance(seed + 800, 4, 15, 5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut other = Mat::zeros(inst.features.rows, inst.features.cols);
        for v in other.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut combo = Mat::zeros(inst.features.rows, inst.features.cols);
        for i in 0..combo.data.len() {
            combo.data[i] = alpha * inst.features.data[i] + beta * other.data[i];
        }
        let f = |m: &Mat| {
            kpconv_forward(
                &inst.queries,
                &inst.supports,
                m,
                &inst.neighbors,
                &inst.kernel,
                &inst.weights,
            )
            .unwrap()
        };
        let out_a = f(&inst.features);
        let out_b = f(&other);
        let out_c = f(&combo);
        for i in 0..out_c.data.len() {
            let expected = alpha * out_a.data[i] + beta * out_b.data[i];
            worst = worst.max(rel_err(out_c.data[i], expected, 1e-12));
        }
    }
    assert!(worst < 1e-12, "linearity: {worst}");
    println!(
        "[PASS] criterion 7: permutation/translation/shadow exact, linearity {worst:.2e} < 1e-12, 50 trials each"
    );
}

/// Criterion 8: after 100 scheduled epochs the learning rate is a tenth of
/// the initial one, within 1e-9 relative.
#[test]
fn criterion_8_schedule() {
    for initial in [1e-3, 1e-2, 0.5] {
        let mut schedule = Schedule::new(initial);
        for _ in 0..100 {
            schedule.epoch += 1;
        }
        let expected = initial / 10.0;
        let err = (schedule.lr() - expected).abs() / expected;
        assert!(err < 1e-9, "initial {initial}: relative error {err}");
    }
    // momentum update semantics: zero rate leaves parameters untouched
    let mut opt = kpconv::network::MomentumSgd {
        momentum: 0.98,
        buffers: vec![vec![0.0; 2]],
    };
    let mut params = vec![1.0, -2.0];
    let grads = vec![0.5, 0.25];
    opt.step(vec![(&mut params, 1.0)], &[&grads], 0.0);
    assert_eq!(params, vec![1.0, -2.0]);
    assert_eq!(opt.buffers[0], vec![0.5, 0.25]);
    println!("[PASS] criterion 8: lr(100 epochs) = initial/10 within 1e-9 relative");
}

/// Criterion 10: single-layer receptive field matches the correlation
/// profile to 1e-6; multi-layer support stays inside the radii-chain ball on
/// 10 random scenes.
#[test]
fn criterion_10_erf_sanity() {
    // closed-form single layer: K = 1 center kernel, identity weights
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let supports = random_points(&mut rng, 80);
    let queries = vec![Vec3::new(0.5, 0.5, 0.5)];
    let sigma = 0.4;
    let rows = radius_neighbors(&queries, &supports, sigma, None).unwrap();
    let kernel = LayerKernel {
        points: vec![Vec3::ZERO],
        sigma,
        rotation: kpconv::math::Rot3::identity(),
        has_fixed_center: true,
    };
    let weights = ConvWeights {
        mats: vec![Mat::identity(1)],
    };
    let mut ones = Mat::zeros(supports.len(), 1);
    ones.fill(1.0);
    let upstream = Mat::from_rows(&[vec![1.0]]);
    let grads = kpconv_backward(
        &queries, &supports, &ones, &rows, &kernel, &weights, None, &upstream,
    )
    .unwrap();
    let mut scores: Vec<f64> = grads.wrt_features.data.iter().map(|v| v.abs()).collect();
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    scores.iter_mut().for_each(|s| *s /= max);
    let h_max = supports
        .iter()
        .map(|&p| correlation(p - queries[0], Vec3::ZERO, sigma))
        .fold(0.0f64, f64::max);
    let mut worst = 0.0f64;
    for (i, &p) in supports.iter().enumerate() {
        let expected = correlation(p - queries[0], Vec3::ZERO, sigma) / h_max;
        worst = worst.max((scores[i] - expected).abs());
        assert!(scores[i] >= 0.0);
    }
    assert!(worst < 1e-6, "single-layer profile error {worst}");

    // multi-layer ball bound
    let spec = NetworkSpec {
        task: Task::Classification,
        input_dim: 4,
        num_classes: 3,
        dl0: 0.12,
        widths: vec![4, 6, 8],
        k_points: 5,
        sigma_ratio: 1.0,
        rho: 5.0,
        deformable: false,
        head_hidden: 8,
        dropout: 0.5,
        neighbor_cap: None,
    };
    let configs = spec.layer_configs();
    let mut net = Network::new(spec, 77).unwrap();
    for seed in 0..10u64 {
        let cloud = toy_cloud(110, seed + 2000);
        let batch = assemble_batch(&[cloud], &configs, 10_000, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = Vec3::new(
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        );
        for layer in 0..3 {
            let result = compute_erf(&mut net, &batch, layer, center).unwrap();
            let bound = receptive_bound(&net, layer);
            let anchor = batch.layers[layer].points[result.center_index];
            for (i, &p) in batch.layers[0].points.iter().enumerate() {
                if result.scores[i] > 0.0 {
                    assert!(
                        p.dist(anchor) <= bound + 1e-9,
                        "scene {seed} layer {layer}: support at {} > bound {bound}",
                        p.dist(anchor)
                    );
                }
            }
        }
    }
    println!(
        "[PASS] criterion 10: single-layer profile error {worst:.2e} < 1e-6; ball bound held on 10 scenes x 3 layers"
    );
}
