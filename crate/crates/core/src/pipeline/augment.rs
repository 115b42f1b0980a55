//! Training-time augmentation and input feature assembly.

use crate::error::{KpError, Result};
use crate::geometry::PointCloud;
use crate::math::{Mat, Rot3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Per-axis scale factors drawn uniformly from this range.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Axes eligible for mirroring.
    pub flip_axes: [bool; 3],
    pub flip_prob: f64,
    /// Random rotation about the vertical (z) axis.
    pub rotate_vertical: bool,
    /// Gaussian coordinate noise (meters).
    pub jitter_sigma: f64,
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_axes: [false; 3],
            flip_prob: 0.0,
            rotate_vertical: false,
            jitter_sigma: 0.0,
        }
    }

    pub fn standard() -> Self {
        AugmentationConfig {
            scale_min: 0.9,
            scale_max: 1.1,
            flip_axes: [true, false, false],
            flip_prob: 0.5,
            rotate_vertical: false,
            jitter_sigma: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_max >= self.scale_min) {
            return Err(KpError::Config(format!(
                "bad scale range {}..{}",
                self.scale_min, self.scale_max
            )));
        }
        if self.jitter_sigma < 0.0 {
            return Err(KpError::Config("negative jitter".into()));
        }
        Ok(())
    }
}

/// Scale, then flip, then rotate, then jitter, deterministically per seed.
/// Features and labels pass through untouched.
pub fn augment(cloud: &PointCloud, config: &AugmentationConfig, seed: u64) -> Result<PointCloud> {
    config.validate()?;
    cloud.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let scale = Vec3::new(
        rng.random_range(config.scale_min..=config.scale_max),
        rng.random_range(config.scale_min..=config.scale_max),
        rng.random_range(config.scale_min..=config.scale_max),
    );
    let mut flip = [1.0f64; 3];
    for (axis, f) in flip.iter_mut().enumerate() {
        if config.flip_axes[axis] && rng.random_range(0.0..1.0) < config.flip_prob {
            *f = -1.0;
        }
    }
    let rotation = if config.rotate_vertical {
        Some(Rot3::about_z(rng.random_range(0.0..std::f64::consts::TAU)))
    } else {
        None
    };

    let mut out = cloud.clone();
    for p in &mut out.points {
        let mut q = Vec3::new(p.x * scale.x, p.y * scale.y, p.z * scale.z);
        q = Vec3::new(q.x * flip[0], q.y * flip[1], q.z * flip[2]);
        if let Some(rot) = &rotation {
            q = rot.apply(q);
        }
        if config.jitter_sigma > 0.0 {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let dz: f64 = rng.sample(StandardNormal);
            q += Vec3::new(dx, dy, dz).scaled(config.jitter_sigma);
        }
        *p = q;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMode {
    /// A constant 1 per point; the geometry carries the signal.
    Ones,
    /// Constant 1 followed by the cloud's three color channels; keeping the
    /// constant ensures dark points stay distinct from empty space.
    OnesRgb,
    /// Constant 1 followed by the point coordinates.
    OnesXyz,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Ones => 1,
            FeatureMode::OnesRgb | FeatureMode::OnesXyz => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ones" => Ok(FeatureMode::Ones),
            "ones+rgb" => Ok(FeatureMode::OnesRgb),
            "ones+xyz" => Ok(FeatureMode::OnesXyz),
            other => Err(KpError::Config(format!("unknown feature mode {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Ones => "ones",
            FeatureMode::OnesRgb => "ones+rgb",
            FeatureMode::OnesXyz => "ones+xyz",
        }
    }
}

/// Replaces the cloud's features with network input features. `OnesRgb`
/// reads the existing three feature columns as colors.
pub fn add_input_features(cloud: &PointCloud, mode: FeatureMode) -> Result<PointCloud> {
    let n = cloud.len();
    let mut features = Mat::zeros(n, mode.dim());
    match mode {
        FeatureMode::Ones => {
            for r in 0..n {
                features.row_mut(r)[0] = 1.0;
            }
        }
        FeatureMode::OnesRgb => {
            if cloud.feature_dim() != 3 {
                return Err(KpError::ShapeMismatch {
                    context: "rgb features need 3 color columns",
                    expected: 3,
                    got: cloud.feature_dim(),
                });
            }
            for r in 0..n {
                let row = features.row_mut(r);
                row[0] = 1.0;
                row[1..].copy_from_slice(cloud.features.row(r));
            }
        }
        FeatureMode::OnesXyz => {
            for (r, p) in cloud.points.iter().enumerate() {
                features
                    .row_mut(r)
                    .copy_from_slice(&[1.0, p.x, p.y, p.z]);
            }
        }
    }
    let mut out = cloud.clone();
    out.features = features;
    Ok(out)
}
