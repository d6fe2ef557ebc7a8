//! Command-line front end for the time-difference imaging toolkit: mesh
//! generation, jacobian caching, phantom simulation, reconstruction, full
//! pipeline runs, and image rendering.

pub mod cache;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use eit_core::mesh::{assign_electrodes, generate_disk_mesh, load_mesh, save_mesh};
use eit_core::phantom::mesh_content_hash;
use eit_core::recon::{time_difference, ConductivityImage, Lambda};

use cache::load_or_build_sensitivity;
use config::{load_config, PipelineConfig};
use error::{at_stage, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "eit",
    version,
    about = "Time-difference impedance imaging: simulate, reconstruct, render"
)]
pub struct Cli {
    /// Configuration file with key = value lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads for frame-level parallelism (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a disk mesh with 16 boundary electrodes and save it.
    MeshGen {
        /// Disk radius.
        #[arg(long, default_value_t = config::DEFAULT_RADIUS)]
        radius: f64,
        /// Target edge length; smaller values refine the mesh.
        #[arg(long, default_value_t = config::DEFAULT_EDGE_LENGTH)]
        edge_length: f64,
        /// Fraction of the boundary covered by electrodes.
        #[arg(long, default_value_t = config::DEFAULT_COVERAGE)]
        coverage: f64,
        /// Output mesh file.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Build the sensitivity matrix for a mesh, reusing a cache when valid.
    Jacobian {
        /// Mesh file to build against.
        #[arg(long, value_name = "PATH")]
        mesh: PathBuf,
        /// Electrode coverage used when the mesh file embeds no layout.
        #[arg(long, default_value_t = config::DEFAULT_COVERAGE)]
        coverage: f64,
        /// Cache file (default: the mesh path with extension .eits).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Simulate a frame sequence and write it to disk.
    Phantom {
        /// Random seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output frame file (default: <out_dir>/frames.eitf).
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Reconstruct images from a stored frame sequence.
    Recon {
        /// Frame file produced by the phantom or pipeline commands.
        #[arg(long, value_name = "PATH")]
        frames: PathBuf,
        /// Regularization weight: a positive number or "inf".
        #[arg(long)]
        lambda: Option<Lambda>,
        /// Boundary filter weight.
        #[arg(long)]
        lambda_b: Option<f64>,
        /// Skip the boundary filter.
        #[arg(long)]
        no_motion_filter: bool,
        /// Output directory override.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run everything: simulate, reconstruct, render, write a manifest.
    Pipeline {
        /// Random seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Regularization weight: a positive number or "inf".
        #[arg(long)]
        lambda: Option<Lambda>,
        /// Boundary filter weight.
        #[arg(long)]
        lambda_b: Option<f64>,
        /// Skip the boundary filter.
        #[arg(long)]
        no_motion_filter: bool,
        /// Output directory override.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Render one reconstruction CSV as a PPM image.
    Render {
        /// Reconstruction CSV written by recon or pipeline.
        #[arg(long, value_name = "PATH")]
        csv: PathBuf,
        /// Mesh the reconstruction lives on.
        #[arg(long, value_name = "PATH")]
        mesh: PathBuf,
        /// Output PPM file.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Color range; values at ±range saturate (default: the image peak).
        #[arg(long)]
        range: Option<f64>,
    },
}

/// Parse arguments, run the selected command, and return the process exit
/// code: 0 on success, 2 for configuration errors, 3 for computation
/// failures, 4 for I/O failures.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: configuration: --threads must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: configuration: cannot size the thread pool: {e}");
            return 2;
        }
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::MeshGen { radius, edge_length, coverage, out } => {
            cmd_mesh_gen(radius, edge_length, coverage, &out)
        }
        Command::Jacobian { mesh, coverage, out } => {
            cmd_jacobian(&mesh, coverage, out.as_deref())
        }
        Command::Phantom { seed, out } => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_phantom(&cfg, out)
        }
        Command::Recon { frames, lambda, lambda_b, no_motion_filter, out } => {
            let mut cfg = load_config(cli.config.as_deref())?;
            apply_overrides(&mut cfg, None, lambda, lambda_b, no_motion_filter, out);
            cmd_recon(&cfg, &frames)
        }
        Command::Pipeline { seed, lambda, lambda_b, no_motion_filter, out } => {
            let mut cfg = load_config(cli.config.as_deref())?;
            apply_overrides(&mut cfg, seed, lambda, lambda_b, no_motion_filter, out);
            pipeline::cmd_pipeline(&cfg).map(|_| ())
        }
        Command::Render { csv, mesh, out, range } => cmd_render(&csv, &mesh, &out, range),
    }
}

fn apply_overrides(
    cfg: &mut PipelineConfig,
    seed: Option<u64>,
    lambda: Option<Lambda>,
    lambda_b: Option<f64>,
    no_motion_filter: bool,
    out: Option<PathBuf>,
) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    if let Some(lb) = lambda_b {
        cfg.lambda_b = Some(lb);
    }
    if no_motion_filter {
        cfg.motion_filter = false;
    }
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
}

fn cmd_mesh_gen(
    radius: f64,
    edge_length: f64,
    coverage: f64,
    out: &Path,
) -> Result<(), CliError> {
    let mesh = generate_disk_mesh(radius, edge_length)
        .map_err(|e| CliError::Config(format!("mesh generation: {e}")))?;
    let layout = assign_electrodes(&mesh, 16, coverage)
        .map_err(|e| CliError::Config(format!("electrode assignment: {e}")))?;
    save_mesh(out, &mesh, Some(&layout)).map_err(at_stage("mesh file"))?;
    println!(
        "mesh: {} nodes, {} elements, 16 electrodes, saved to {}",
        mesh.n_nodes(),
        mesh.n_elements(),
        out.display()
    );
    Ok(())
}

fn cmd_jacobian(
    mesh_path: &Path,
    coverage: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (mesh, layout) = load_mesh(mesh_path).map_err(at_stage("mesh"))?;
    let layout = match layout {
        Some(l) if l.len() == 16 => l,
        Some(l) => {
            return Err(CliError::Config(format!(
                "mesh file defines {} electrodes; the protocol needs 16",
                l.len()
            )));
        }
        None => assign_electrodes(&mesh, 16, coverage)
            .map_err(at_stage("electrode assignment"))?,
    };
    let cache_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| mesh_path.with_extension("eits"));
    if let Some(parent) = cache_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let (s, _) = load_or_build_sensitivity(&mesh, &layout, &cache_path)?;
    println!(
        "jacobian: {} × {} at {}",
        s.rows(),
        s.n_elements(),
        cache_path.display()
    );
    Ok(())
}

fn cmd_phantom(cfg: &PipelineConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    cfg.validate()?;
    let (mesh, layout) = pipeline::resolve_mesh(cfg)?;
    let seq = pipeline::simulate_sequence(cfg, &mesh, &layout)?;
    let path = out.unwrap_or_else(|| cfg.out_dir.join("frames.eitf"));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    seq.save_text(&path).map_err(at_stage("frame file"))?;
    println!("phantom: {} frames saved to {}", seq.len(), path.display());
    Ok(())
}

fn cmd_recon(cfg: &PipelineConfig, frames_path: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let (mesh, layout) = pipeline::resolve_mesh(cfg)?;
    let seq = pipeline::load_frames(frames_path)?;
    if let Some(recorded) = seq.mesh_hash() {
        if recorded != mesh_content_hash(&mesh, &layout) {
            return Err(CliError::Compute(format!(
                "{} was simulated on a different mesh than the one configured here",
                frames_path.display()
            )));
        }
    }
    let jacobian_path = cfg
        .jacobian_cache
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("jacobian.eits"));
    let (s, _) = load_or_build_sensitivity(&mesh, &layout, &jacobian_path)?;
    let vdots = time_difference(&seq, 0).map_err(at_stage("time difference"))?;
    let (vdots, lambda_b) = if cfg.motion_filter {
        let (filtered, lb) = pipeline::filter_sequence(&s, &mesh, vdots, cfg.lambda_b)?;
        (filtered, Some(lb))
    } else {
        (vdots, None)
    };
    let timestamps: Vec<f64> = (0..seq.len()).map(|m| seq.timestamp(m)).collect();
    let images = pipeline::reconstruct_sequence(cfg, &s, &vdots, &timestamps)?;
    let (csv_paths, ppm_paths, _) =
        pipeline::write_artifacts(cfg, &mesh, &images, &seq, lambda_b)?;
    println!(
        "recon: {} frames reconstructed, {} CSVs and {} PPMs in {}",
        images.len(),
        csv_paths.len(),
        ppm_paths.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_render(
    csv: &Path,
    mesh_path: &Path,
    out: &Path,
    range: Option<f64>,
) -> Result<(), CliError> {
    let (values, method, lambda, timestamp) = pipeline::read_image_csv(csv)?;
    let mut image = ConductivityImage::new(values, method, lambda)
        .map_err(|e| CliError::Compute(format!("{}: {e}", csv.display())))?;
    if let Some(t) = timestamp {
        image = image.with_timestamp(t);
    }
    let (mesh, _) = load_mesh(mesh_path).map_err(at_stage("mesh"))?;
    render::render_image(&image, &mesh, out, range)?;
    println!("render: wrote {}", out.display());
    Ok(())
}
