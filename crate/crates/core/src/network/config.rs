use crate::error::{KpError, Result};
use serde::{Deserialize, Serialize};

/// Per-layer parameters derived from the cell size `dl`.
///
/// The influence distance is `sigma = sigma_ratio * dl`; rigid convolutions
/// use radius `2.5 * sigma` while deformable ones use `rho * dl`. Cell sizes
/// double from one layer to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Subsampling cell size at this layer (meters).
    pub dl: f64,
    /// Kernel points per convolution.
    pub k_points: usize,
    /// Bottleneck width D of this layer's blocks (blocks output 2*D).
    pub width: usize,
    /// Global proportionality coefficient for sigma.
    pub sigma_ratio: f64,
    /// Global proportionality coefficient for the deformable radius.
    pub rho: f64,
    /// Deformable flags for the layer's two blocks. For layers after the
    /// first, block 0 is the strided block pooling from the previous layer.
    pub deform_blocks: [bool; 2],
}

impl LayerConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma_ratio * self.dl
    }

    pub fn rigid_radius(&self) -> f64 {
        2.5 * self.sigma()
    }

    pub fn deform_radius(&self) -> f64 {
        self.rho * self.dl
    }

    /// Radius of the within-layer neighborhoods. On the first layer both
    /// blocks read them; on later layers only the second (non-strided) block
    /// does, the first being the strided block fed by pooling rows.
    pub fn conv_radius(&self, first_layer: bool) -> f64 {
        let deform = if first_layer {
            self.deform_blocks[0] || self.deform_blocks[1]
        } else {
            self.deform_blocks[1]
        };
        if deform {
            self.deform_radius()
        } else {
            self.rigid_radius()
        }
    }

    /// Radius of the pooling rows leaving this layer toward the next coarser
    /// one. The strided convolution keeps the source layer's scale.
    pub fn pool_radius(&self, next_first_block_deform: bool) -> f64 {
        if next_first_block_deform {
            self.deform_radius()
        } else {
            self.rigid_radius()
        }
    }
}

/// Checks the doubling chain `dl_{j+1} == 2 * dl_j`.
pub fn validate_layer_chain(configs: &[LayerConfig]) -> Result<()> {
    if configs.is_empty() {
        return Err(KpError::Config("no layer configs".into()));
    }
    for c in configs {
        if !(c.dl > 0.0) {
            return Err(KpError::NotPositive {
                what: "dl",
                value: c.dl,
            });
        }
        if c.k_points == 0 {
            return Err(KpError::Config("k_points must be at least 1".into()));
        }
    }
    for w in configs.windows(2) {
        let (a, b) = (w[0].dl, w[1].dl);
        if (b - 2.0 * a).abs() > 1e-12 * a {
            return Err(KpError::Config(format!(
                "cell sizes must double per layer, got {a} then {b}"
            )));
        }
    }
    Ok(())
}
