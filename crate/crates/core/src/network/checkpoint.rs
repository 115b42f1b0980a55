//! Versioned binary checkpoints with an exact-resume guarantee.
//!
//! Layout (little-endian): magic `KPCK`, format version, the network spec as
//! length-prefixed JSON, the init seed, then length-prefixed f64 sections for
//! parameters, batch-norm running statistics and optimizer buffers (all in
//! canonical traversal order), the schedule, the step counter, and the
//! dropout RNG state (seed plus stream position).

use super::model::{Network, NetworkSpec};
use super::optim::{MomentumSgd, Schedule, TrainState};
use crate::error::{KpError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"KPCK";
const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_vecs<W: Write>(w: &mut W, vecs: &[&Vec<f64>]) -> Result<()> {
    write_u64(w, vecs.len() as u64)?;
    for v in vecs {
        write_u64(w, v.len() as u64)?;
        for &x in v.iter() {
            write_f64(w, x)?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_vecs<R: Read>(r: &mut R) -> Result<Vec<Vec<f64>>> {
    let count = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u64(r)? as usize;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(read_f64(r)?);
        }
        out.push(v);
    }
    Ok(out)
}

pub fn save<W: Write>(state: &TrainState, w: &mut W) -> Result<()> {
    let mut net = state.net.clone();
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;

    let spec_json = serde_json::to_vec(&net.spec)
        .map_err(|e| KpError::Format(format!("spec serialization: {e}")))?;
    write_u64(w, spec_json.len() as u64)?;
    w.write_all(&spec_json)?;
    write_u64(w, net.init_seed)?;

    let params: Vec<&Vec<f64>> = net.params_mut().into_iter().map(|(v, _)| &*v).collect();
    write_vecs(w, &params)?;
    drop(params);
    let stats: Vec<&Vec<f64>> = net.stats_mut().into_iter().map(|v| &*v).collect();
    write_vecs(w, &stats)?;
    let buffers: Vec<&Vec<f64>> = state.optimizer.buffers.iter().collect();
    write_vecs(w, &buffers)?;

    write_f64(w, state.optimizer.momentum)?;
    write_f64(w, state.schedule.initial_lr)?;
    write_u64(w, state.schedule.epoch as u64)?;
    write_u64(w, state.step as u64)?;

    w.write_all(state.rng.get_seed().as_ref())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    Ok(())
}

pub fn load<R: Read>(r: &mut R) -> Result<TrainState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(KpError::Format("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(KpError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let spec_len = read_u64(r)? as usize;
    let mut spec_json = vec![0u8; spec_len];
    r.read_exact(&mut spec_json)?;
    let spec: NetworkSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| KpError::Format(format!("spec deserialization: {e}")))?;
    let init_seed = read_u64(r)?;

    // the architecture (kernels, rotations) rebuilds deterministically from
    // the stored NetworkSpec and seed; the vectors then overwrite the
    // trainable state
    let mut net = Network::new(spec, init_seed)?;
    let params = read_vecs(r)?;
    {
        let slots = net.params_mut();
        if slots.len() != params.len() {
            return Err(KpError::Format("parameter section mismatch".into()));
        }
        for ((slot, _), stored) in slots.into_iter().zip(params) {
            if slot.len() != stored.len() {
                return Err(KpError::Format("parameter length mismatch".into()));
            }
            *slot = stored;
        }
    }
    let stats = read_vecs(r)?;
    {
        let slots = net.stats_mut();
        if slots.len() != stats.len() {
            return Err(KpError::Format("statistics section mismatch".into()));
        }
        for (slot, stored) in slots.into_iter().zip(stats) {
            *slot = stored;
        }
    }
    let buffers = read_vecs(r)?;
    let momentum = read_f64(r)?;
    let initial_lr = read_f64(r)?;
    let epoch = read_u64(r)? as usize;
    let step = read_u64(r)? as usize;

    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_word_pos(u128::from_le_bytes(pos));

    Ok(TrainState {
        net,
        optimizer: MomentumSgd { momentum, buffers },
        schedule: Schedule { initial_lr, epoch },
        rng,
        step,
    })
}

pub fn save_to_path(state: &TrainState, path: &std::path::Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(state, &mut file)?;
    Ok(())
}

pub fn load_from_path(path: &std::path::Path) -> Result<TrainState> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    load(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assemble_batch, PointCloud};
    use crate::math::{Mat, Vec3};
    use crate::network::{NetworkSpec, Task};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_state() -> (TrainState, crate::geometry::Batch) {
        let spec = NetworkSpec {
            task: Task::Classification,
            input_dim: 4,
            num_classes: 2,
            dl0: 0.2,
            widths: vec![4, 4],
            k_points: 5,
            sigma_ratio: 1.0,
            rho: 5.0,
            deformable: true,
            head_hidden: 8,
            dropout: 0.5,
            neighbor_cap: None,
        };
        let configs = spec.layer_configs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clouds: Vec<PointCloud> = (0..2)
            .map(|e| {
                let points: Vec<Vec3> = (0..20)
                    .map(|_| {
                        Vec3::new(
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                        )
                    })
                    .collect();
                let mut features = Mat::zeros(20, 4);
                for (r, &p) in points.iter().enumerate() {
                    features.row_mut(r).copy_from_slice(&[1.0, p.x, p.y, p.z]);
                }
                PointCloud::new(points, features).with_labels(vec![e as u32; 20])
            })
            .collect();
        let batch = assemble_batch(&clouds, &configs, 1000, None).unwrap();
        let net = Network::new(spec, 7).unwrap();
        (TrainState::new(net, 1e-3, 0.98, 7), batch)
    }

    #[test]
    fn roundtrip_resumes_exactly() {
        let (mut state, batch) = toy_state();
        for _ in 0..3 {
            state.train_step(&batch).unwrap();
        }
        let mut bytes = Vec::new();
        save(&state, &mut bytes).unwrap();
        let mut restored = load(&mut bytes.as_slice()).unwrap();

        assert_eq!(restored, state);
        // continued training stays bit-identical
        let a = state.train_step(&batch).unwrap();
        let b = restored.train_step(&batch).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(state.net, restored.net);
    }

    #[test]
    fn serialization_is_deterministic() {
        let (mut state, batch) = toy_state();
        state.train_step(&batch).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        save(&state, &mut a).unwrap();
        save(&state, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_foreign_files() {
        let mut junk: &[u8] = b"PLYK0000";
        assert!(matches!(load(&mut junk), Err(KpError::Format(_))));
    }
}
