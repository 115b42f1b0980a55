//! `kpconv`: kernel point convolution toolkit.

use clap::{Args, Parser, Subcommand};
use kpconv::geometry::{grid_subsample, radius_neighbors, assemble_batch};
use kpconv::kernel_points::{disposition_sidecar, disposition_table, optimize_disposition};
use kpconv::math::Vec3;
use kpconv::network::checkpoint;
use kpconv::pipeline::{self, compute_erf, evaluate, segment_scene, train, RunConfig};
use kpconv::{KpError, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "kpconv", version, about = "Kernel point convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel point dispositions.
    Kernel {
        #[command(subcommand)]
        command: KernelCommand,
    },
    /// Grid-subsample a PLY cloud.
    Subsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Cell size in meters.
        #[arg(long)]
        cell: f64,
    },
    /// Radius neighborhoods between two PLY clouds, dumped in the binary
    /// fixture format.
    Neighbors {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        supports: PathBuf,
        #[arg(long)]
        radius: f64,
        /// Keep only the nearest N neighbors per row.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network per the run configuration.
    Train(RunArgs),
    /// Evaluate a checkpoint on its configured dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment a scene with sliding-sphere voting.
    Segment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene PLY; omit to segment a synthetic scene from the config.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Output PLY with predicted labels.
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective receptive field of one layer response, exported as CSV.
    Erf {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encoder layer index (0-based).
        #[arg(long)]
        layer: usize,
        /// Probe location `x,y,z`.
        #[arg(long)]
        center: String,
        /// Scene PLY; omit to use the first synthetic element.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the elements maximizing one feature channel's activation.
    Features {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        channel: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check and oracle suite.
    Selftest,
}

#[derive(Subcommand)]
enum KernelCommand {
    /// Generate a disposition by energy minimization.
    Gen {
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = false)]
        fixed_center: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output table (`x y z` rows); a `.json` sidecar is written next
        /// to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file; defaults depend on --task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task used for defaults when no config file is given.
    #[arg(long, default_value = "classification")]
    task: String,
    /// Overrides, `section.key=value`.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Shortcut for `--set run.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for `--set run.out_dir=DIR`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
            None => match self.task.as_str() {
                "classification" => RunConfig::classification_defaults(),
                "segmentation" => RunConfig::segmentation_defaults(),
                other => return Err(KpError::Config(format!("unknown task {other}"))),
            },
        };
        for kv in &self.set {
            let (path, value) = kv
                .split_once('=')
                .ok_or_else(|| KpError::Config(format!("override `{kv}` is not key=value")))?;
            config.set_path(path.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        // relative run directories land under KPCONV_DATA_DIR when set
        if config.out_dir.is_relative() {
            if let Ok(base) = std::env::var("KPCONV_DATA_DIR") {
                config.out_dir = PathBuf::from(base).join(&config.out_dir);
            }
        }
        config.validate()?;
        Ok(config)
    }
}

fn parse_center(s: &str) -> Result<Vec3> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(KpError::Config(format!("center `{s}` is not x,y,z")));
    }
    let mut coords = [0.0; 3];
    for (c, part) in coords.iter_mut().zip(&parts) {
        *c = part
            .trim()
            .parse()
            .map_err(|_| KpError::Config(format!("bad coordinate `{part}`")))?;
    }
    Ok(Vec3::from_array(coords))
}

fn load_scene(path: Option<&PathBuf>, config: &RunConfig) -> Result<kpconv::geometry::PointCloud> {
    match path {
        Some(p) => kpconv::ply::read_ply_file(p),
        None => {
            let mut clouds = pipeline::generate_synthetic_dataset(
                config.dataset,
                1,
                config.points_per_cloud,
                config.seed,
            )?;
            Ok(clouds.remove(0))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Kernel {
            command: KernelCommand::Gen { k, fixed_center, seed, out },
        } => {
            let disposition = optimize_disposition(k, fixed_center, seed)?;
            std::fs::write(&out, disposition_table(&disposition))?;
            let sidecar = out.with_extension("json");
            std::fs::write(&sidecar, disposition_sidecar(&disposition))?;
            println!(
                "wrote {} points to {} (converged: {}, energy: {:.6})",
                k,
                out.display(),
                disposition.converged,
                disposition.energy
            );
            if !disposition.converged {
                return Err(KpError::Config(format!(
                    "disposition for K={k} did not converge"
                )));
            }
        }
        Command::Subsample { input, output, cell } => {
            let cloud = kpconv::ply::read_ply_file(&input)?;
            let (support, _) = grid_subsample(&cloud, cell)?;
            kpconv::ply::write_ply_file(&support, &output)?;
            println!(
                "{} points -> {} support points at cell {}",
                cloud.len(),
                support.len(),
                cell
            );
        }
        Command::Neighbors {
            queries,
            supports,
            radius,
            cap,
            out,
        } => {
            let q = kpconv::ply::read_ply_file(&queries)?;
            let s = kpconv::ply::read_ply_file(&supports)?;
            let nm = radius_neighbors(&q.points, &s.points, radius, cap)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            kpconv::fixture::write_neighbors(&mut file, &nm)?;
            println!(
                "{} rows, n_max {} -> {}",
                nm.n_queries,
                nm.n_max,
                out.display()
            );
        }
        Command::Train(args) => {
            let config = args.load()?;
            let outcome = train(&config, None)?;
            println!(
                "trained {} epochs, final epoch accuracy {:.4}",
                outcome.epochs_run, outcome.final_epoch_accuracy
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("log: {}", outcome.log_path.display());
        }
        Command::Eval { run, checkpoint } => {
            let config = run.load()?;
            let mut state = checkpoint::load_from_path(&checkpoint)?;
            let accuracy = evaluate(&mut state, &config)?;
            println!("accuracy {:.4}", accuracy);
        }
        Command::Segment {
            run,
            checkpoint,
            scene,
            out,
        } => {
            let config = run.load()?;
            let mut state = checkpoint::load_from_path(&checkpoint)?;
            let scene = load_scene(scene.as_ref(), &config)?;
            let labels = segment_scene(&mut state, &scene, &config)?;
            let mut labeled = scene.clone();
            labeled.labels = Some(labels);
            kpconv::ply::write_ply_file(&labeled, &out)?;
            println!("segmented {} points -> {}", scene.len(), out.display());
        }
        Command::Erf {
            run,
            checkpoint,
            layer,
            center,
            scene,
            out,
        } => {
            let config = run.load()?;
            let mut state = checkpoint::load_from_path(&checkpoint)?;
            let center = parse_center(&center)?;
            let raw = load_scene(scene.as_ref(), &config)?;
            let prepared = pipeline::prepare_cloud(&raw, &config)?;
            let configs = state.net.spec.layer_configs();
            let batch = assemble_batch(
                std::slice::from_ref(&prepared),
                &configs,
                usize::MAX,
                state.net.spec.neighbor_cap,
            )?;
            let result = compute_erf(&mut state.net, &batch, layer, center)?;
            if result.snapped {
                eprintln!("warning: center snapped to nearest layer point");
            }
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            kpconv::pipeline::erf::write_erf_csv(&mut file, &batch, &result)?;
            // same scores as a PLY scalar for viewers
            let mut scored = kpconv::geometry::PointCloud::bare(batch.layers[0].points.clone());
            scored.features = kpconv::math::Mat::from_rows(
                &result.scores.iter().map(|&s| vec![s]).collect::<Vec<_>>(),
            );
            kpconv::ply::write_ply_file(&scored, &out.with_extension("ply"))?;
            println!(
                "receptive field of layer {layer} at point {} -> {} (+ .ply)",
                result.center_index,
                out.display()
            );
        }
        Command::Features {
            run,
            checkpoint,
            layer,
            channel,
            top,
            out,
        } => {
            let config = run.load()?;
            let mut state = checkpoint::load_from_path(&checkpoint)?;
            let elements = pipeline::generate_synthetic_dataset(
                config.dataset,
                config.dataset_size,
                config.points_per_cloud,
                config.seed,
            )?;
            let ranked = pipeline::activations::export_feature_activations(
                &mut state, &elements, &config, layer, channel, top, &out,
            )?;
            if ranked.is_empty() {
                println!("channel {channel} is zero on every element; nothing exported");
            } else {
                for (rank, entry) in ranked.iter().enumerate() {
                    println!(
                        "rank {rank}: element {} peak {:.6}",
                        entry.element, entry.peak
                    );
                }
            }
        }
        Command::Selftest => {
            let checks = kpconv::selftest::run_selftest()?;
            let mut failed = 0;
            for check in &checks {
                println!(
                    "[{}] {} (measured {:.3e}, tolerance {:.1e})",
                    if check.passed() { "ok" } else { "FAIL" },
                    check.name,
                    check.max_err,
                    check.tolerance
                );
                if !check.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(KpError::Config(format!("{failed} checks failed")));
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
