//! Dataset preparation and the epoch loop.

use super::augment::{add_input_features, augment};
use super::config::RunConfig;
use super::synth::generate_synthetic_dataset;
use crate::error::Result;
use crate::geometry::{assemble_batch, grid_subsample, PointCloud};
use crate::network::{checkpoint, Network, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Stable seed derivation for substreams (epoch augmentation, shuffling).
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(a.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(b);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Subsamples a raw cloud at the first cell size and attaches input
/// features. The feature columns are built after subsampling so coordinate
/// features describe the support points.
pub fn prepare_cloud(cloud: &PointCloud, config: &RunConfig) -> Result<PointCloud> {
    let (sub, _) = grid_subsample(cloud, config.dl0)?;
    add_input_features(&sub, config.input_features)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs_run: usize,
    pub final_epoch_accuracy: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Trains per the config, logging newline-delimited records and writing a
/// checkpoint. Stops early once an epoch's training accuracy reaches
/// `target_accuracy`.
pub fn train(config: &RunConfig, target_accuracy: Option<f64>) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let log_path = config.out_dir.join("train.log");
    let checkpoint_path = config.out_dir.join("model.kpck");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let raw = generate_synthetic_dataset(
        config.dataset,
        config.dataset_size,
        config.points_per_cloud,
        config.seed,
    )?;

    let spec = config.network_spec();
    let configs = spec.layer_configs();
    let net = Network::new(spec, derive_seed(config.seed, 1, 0, 0))?;
    let mut state = TrainState::new(
        net,
        config.initial_lr,
        config.momentum,
        derive_seed(config.seed, 2, 0, 0),
    );

    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 3, 0, 0));
    let mut epoch_accuracy = 0.0;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        // fresh augmentations every epoch
        let mut prepared = Vec::with_capacity(raw.len());
        for (i, cloud) in raw.iter().enumerate() {
            let augmented = if config.augment_enabled {
                augment(
                    cloud,
                    &config.augment,
                    derive_seed(config.seed, 4, epoch as u64, i as u64),
                )?
            } else {
                cloud.clone()
            };
            prepared.push(prepare_cloud(&augmented, config)?);
        }
        // Fisher-Yates shuffle of the element order
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let shuffled: Vec<PointCloud> = order.into_iter().map(|i| prepared[i].clone()).collect();

        let mut cursor = 0;
        let mut seen = 0usize;
        let mut correct = 0.0;
        while cursor < shuffled.len() {
            let step_start = Instant::now();
            let batch = assemble_batch(
                &shuffled[cursor..],
                &configs,
                config.batch_points,
                config.neighbor_cap,
            )?;
            cursor += batch.element_count;
            let labels = state.batch_labels(&batch)?;
            let stats = state.train_step(&batch)?;
            seen += labels.len();
            correct += stats.accuracy * labels.len() as f64;
            writeln!(
                log,
                "epoch={} step={} lr={:.6e} loss={:.6} ce={:.6} reg={:.6} acc={:.4} ms={}",
                epoch,
                state.step,
                state.schedule.lr(),
                stats.loss,
                stats.cross_entropy,
                stats.reg_loss,
                stats.accuracy,
                step_start.elapsed().as_millis()
            )?;
        }
        state.end_epoch();
        epochs_run = epoch + 1;
        epoch_accuracy = correct / seen.max(1) as f64;
        writeln!(
            log,
            "epoch={} done acc={:.4} ms={}",
            epoch,
            epoch_accuracy,
            epoch_start.elapsed().as_millis()
        )?;
        if let Some(target) = target_accuracy {
            if epoch_accuracy >= target {
                break;
            }
        }
    }
    log.flush()?;
    checkpoint::save_to_path(&state, &checkpoint_path)?;
    Ok(TrainOutcome {
        state,
        epochs_run,
        final_epoch_accuracy: epoch_accuracy,
        checkpoint_path,
        log_path,
    })
}

/// Dataset accuracy under frozen statistics (no dropout, no augmentation).
pub fn evaluate(state: &mut TrainState, config: &RunConfig) -> Result<f64> {
    let raw = generate_synthetic_dataset(
        config.dataset,
        config.dataset_size,
        config.points_per_cloud,
        config.seed,
    )?;
    let configs = state.net.spec.layer_configs();
    let mut prepared = Vec::with_capacity(raw.len());
    for cloud in &raw {
        prepared.push(prepare_cloud(cloud, config)?);
    }
    let mut cursor = 0;
    let mut seen = 0usize;
    let mut correct = 0.0;
    while cursor < prepared.len() {
        let batch = assemble_batch(
            &prepared[cursor..],
            &configs,
            config.batch_points,
            config.neighbor_cap,
        )?;
        cursor += batch.element_count;
        let labels = state.batch_labels(&batch)?;
        let (_, acc) = state.evaluate(&batch)?;
        seen += labels.len();
        correct += acc * labels.len() as f64;
    }
    Ok(correct / seen.max(1) as f64)
}
