//! Run configuration: a flat sectioned key-value text file, version 1.
//!
//! ```text
//! # kpconv run config v1
//! [run]
//! task = classification
//! dataset = shapes3
//! ...
//! ```
//!
//! Unknown sections or keys are errors; CLI overrides use the same
//! `section.key=value` addressing.

use super::augment::{AugmentationConfig, FeatureMode};
use super::synth::SyntheticKind;
use crate::error::{KpError, Result};
use crate::network::{NetworkSpec, Task};
use std::fmt::Write as _;
use std::path::PathBuf;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [run]
    pub task: Task,
    pub dataset: SyntheticKind,
    pub dataset_size: usize,
    pub points_per_cloud: usize,
    pub seed: u64,
    pub out_dir: PathBuf,

    // [model]
    pub dl0: f64,
    pub k_points: usize,
    pub sigma_ratio: f64,
    pub rho: f64,
    pub deformable: bool,
    pub widths: Vec<usize>,
    pub head_hidden: usize,
    pub dropout: f64,
    pub neighbor_cap: Option<usize>,
    pub input_features: FeatureMode,

    // [train]
    pub epochs: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub batch_points: usize,
    pub augment_enabled: bool,

    // [segment]
    pub sphere_radius: Option<f64>,
    pub min_visits: usize,
    pub max_extra_passes: usize,

    // [augment]
    pub augment: AugmentationConfig,
}

impl RunConfig {
    pub fn classification_defaults() -> Self {
        RunConfig {
            task: Task::Classification,
            dataset: SyntheticKind::Shapes3,
            dataset_size: 300,
            points_per_cloud: 400,
            seed: 0,
            out_dir: PathBuf::from("runs/shapes3"),
            dl0: 0.1,
            k_points: 15,
            sigma_ratio: 1.0,
            rho: 5.0,
            deformable: false,
            widths: vec![16, 32, 64, 128, 256],
            head_hidden: 128,
            dropout: 0.5,
            neighbor_cap: Some(40),
            input_features: FeatureMode::Ones,
            epochs: 50,
            initial_lr: 1e-3,
            momentum: 0.98,
            batch_points: 3000,
            augment_enabled: true,
            sphere_radius: None,
            min_visits: 3,
            max_extra_passes: 64,
            augment: AugmentationConfig::standard(),
        }
    }

    pub fn segmentation_defaults() -> Self {
        RunConfig {
            task: Task::Segmentation,
            dataset: SyntheticKind::IndoorBoxes,
            dataset_size: 40,
            points_per_cloud: 900,
            out_dir: PathBuf::from("runs/indoor-boxes"),
            dropout: 0.0,
            input_features: FeatureMode::OnesXyz,
            initial_lr: 1e-2,
            ..RunConfig::classification_defaults()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    /// Input sphere radius, defaulting to 50 times the first cell size.
    pub fn sphere_radius(&self) -> f64 {
        self.sphere_radius.unwrap_or(50.0 * self.dl0)
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            task: self.task,
            input_dim: self.input_features.dim(),
            num_classes: self.num_classes(),
            dl0: self.dl0,
            widths: self.widths.clone(),
            k_points: self.k_points,
            sigma_ratio: self.sigma_ratio,
            rho: self.rho,
            deformable: self.deformable,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            neighbor_cap: self.neighbor_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dl0 > 0.0) {
            return Err(KpError::NotPositive {
                what: "dl0",
                value: self.dl0,
            });
        }
        if !(self.sphere_radius() > 0.0) {
            return Err(KpError::NotPositive {
                what: "sphere_radius",
                value: self.sphere_radius(),
            });
        }
        if self.widths.is_empty() {
            return Err(KpError::Config("widths must not be empty".into()));
        }
        self.augment.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# kpconv run config v{CONFIG_VERSION}");
        let _ = writeln!(s, "# sections: run, model, train, segment, augment");
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(
            s,
            "task = {}",
            match self.task {
                Task::Classification => "classification",
                Task::Segmentation => "segmentation",
            }
        );
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        let _ = writeln!(s, "dataset_size = {}", self.dataset_size);
        let _ = writeln!(s, "points_per_cloud = {}", self.points_per_cloud);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "dl0 = {}", self.dl0);
        let _ = writeln!(s, "k_points = {}", self.k_points);
        let _ = writeln!(s, "sigma_ratio = {}", self.sigma_ratio);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "deformable = {}", self.deformable);
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "widths = {}", widths.join(","));
        let _ = writeln!(s, "head_hidden = {}", self.head_hidden);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(
            s,
            "neighbor_cap = {}",
            self.neighbor_cap.map_or("none".to_string(), |c| c.to_string())
        );
        let _ = writeln!(s, "input_features = {}", self.input_features.name());
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "initial_lr = {}", self.initial_lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "batch_points = {}", self.batch_points);
        let _ = writeln!(s, "augment_enabled = {}", self.augment_enabled);
        let _ = writeln!(s, "\n[segment]");
        let _ = writeln!(
            s,
            "sphere_radius = {}",
            self.sphere_radius.map_or("auto".to_string(), |r| r.to_string())
        );
        let _ = writeln!(s, "min_visits = {}", self.min_visits);
        let _ = writeln!(s, "max_extra_passes = {}", self.max_extra_passes);
        let _ = writeln!(s, "\n[augment]");
        let _ = writeln!(s, "scale_min = {}", self.augment.scale_min);
        let _ = writeln!(s, "scale_max = {}", self.augment.scale_max);
        let flips: Vec<&str> = "xyz"
            .chars()
            .zip(self.augment.flip_axes)
            .filter(|(_, on)| *on)
            .map(|(c, _)| match c {
                'x' => "x",
                'y' => "y",
                _ => "z",
            })
            .collect();
        let _ = writeln!(
            s,
            "flip_axes = {}",
            if flips.is_empty() { "none".to_string() } else { flips.join(",") }
        );
        let _ = writeln!(s, "flip_prob = {}", self.augment.flip_prob);
        let _ = writeln!(s, "rotate_vertical = {}", self.augment.rotate_vertical);
        let _ = writeln!(s, "jitter_sigma = {}", self.augment.jitter_sigma);
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        // defaults are task-dependent, so scan for the task first
        let mut task = Task::Classification;
        for line in text.lines() {
            let line = line.trim();
            if let Some(value) = line.strip_prefix("task") {
                let value = value.trim_start_matches([' ', '=']).trim();
                task = parse_task(value)?;
            }
        }
        let mut config = match task {
            Task::Classification => RunConfig::classification_defaults(),
            Task::Segmentation => RunConfig::segmentation_defaults(),
        };

        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| KpError::Parse(format!("line {}: bad section", lineno + 1)))?;
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KpError::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            config.set(&section, key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies one `section.key=value` override.
    pub fn set_path(&mut self, path: &str, value: &str) -> Result<()> {
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| KpError::Config(format!("override {path} is not section.key")))?;
        self.set(section, key, value)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad_key = || KpError::Config(format!("unknown key [{section}] {key}"));
        let bad_value =
            |what: &str| KpError::Config(format!("[{section}] {key}: bad {what} `{value}`"));
        match section {
            "run" => match key {
                "task" => self.task = parse_task(value)?,
                "dataset" => self.dataset = SyntheticKind::parse(value)?,
                "dataset_size" => {
                    self.dataset_size = value.parse().map_err(|_| bad_value("count"))?
                }
                "points_per_cloud" => {
                    self.points_per_cloud = value.parse().map_err(|_| bad_value("count"))?
                }
                "seed" => self.seed = value.parse().map_err(|_| bad_value("seed"))?,
                "out_dir" => self.out_dir = PathBuf::from(value),
                _ => return Err(bad_key()),
            },
            "model" => match key {
                "dl0" => self.dl0 = value.parse().map_err(|_| bad_value("number"))?,
                "k_points" => self.k_points = value.parse().map_err(|_| bad_value("count"))?,
                "sigma_ratio" => {
                    self.sigma_ratio = value.parse().map_err(|_| bad_value("number"))?
                }
                "rho" => self.rho = value.parse().map_err(|_| bad_value("number"))?,
                "deformable" => {
                    self.deformable = value.parse().map_err(|_| bad_value("bool"))?
                }
                "widths" => {
                    self.widths = value
                        .split(',')
                        .map(|w| w.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad_value("width list"))?
                }
                "head_hidden" => {
                    self.head_hidden = value.parse().map_err(|_| bad_value("count"))?
                }
                "dropout" => self.dropout = value.parse().map_err(|_| bad_value("number"))?,
                "neighbor_cap" => {
                    self.neighbor_cap = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad_value("count"))?)
                    }
                }
                "input_features" => self.input_features = FeatureMode::parse(value)?,
                _ => return Err(bad_key()),
            },
            "train" => match key {
                "epochs" => self.epochs = value.parse().map_err(|_| bad_value("count"))?,
                "initial_lr" => {
                    self.initial_lr = value.parse().map_err(|_| bad_value("number"))?
                }
                "momentum" => self.momentum = value.parse().map_err(|_| bad_value("number"))?,
                "batch_points" => {
                    self.batch_points = value.parse().map_err(|_| bad_value("count"))?
                }
                "augment_enabled" => {
                    self.augment_enabled = value.parse().map_err(|_| bad_value("bool"))?
                }
                _ => return Err(bad_key()),
            },
            "segment" => match key {
                "sphere_radius" => {
                    self.sphere_radius = if value == "auto" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad_value("number"))?)
                    }
                }
                "min_visits" => {
                    self.min_visits = value.parse().map_err(|_| bad_value("count"))?
                }
                "max_extra_passes" => {
                    self.max_extra_passes = value.parse().map_err(|_| bad_value("count"))?
                }
                _ => return Err(bad_key()),
            },
            "augment" => match key {
                "scale_min" => {
                    self.augment.scale_min = value.parse().map_err(|_| bad_value("number"))?
                }
                "scale_max" => {
                    self.augment.scale_max = value.parse().map_err(|_| bad_value("number"))?
                }
                "flip_axes" => {
                    self.augment.flip_axes = [false; 3];
                    if value != "none" {
                        for axis in value.split(',') {
                            match axis.trim() {
                                "x" => self.augment.flip_axes[0] = true,
                                "y" => self.augment.flip_axes[1] = true,
                                "z" => self.augment.flip_axes[2] = true,
                                _ => return Err(bad_value("axis list")),
                            }
                        }
                    }
                }
                "flip_prob" => {
                    self.augment.flip_prob = value.parse().map_err(|_| bad_value("number"))?
                }
                "rotate_vertical" => {
                    self.augment.rotate_vertical =
                        value.parse().map_err(|_| bad_value("bool"))?
                }
                "jitter_sigma" => {
                    self.augment.jitter_sigma = value.parse().map_err(|_| bad_value("number"))?
                }
                _ => return Err(bad_key()),
            },
            other => return Err(KpError::Config(format!("unknown section [{other}]"))),
        }
        Ok(())
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "classification" => Ok(Task::Classification),
        "segmentation" => Ok(Task::Segmentation),
        other => Err(KpError::Config(format!("unknown task {other}"))),
    }
}
