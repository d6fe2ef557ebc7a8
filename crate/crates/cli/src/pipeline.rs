//! End-to-end orchestration: mesh, cached jacobian, phantom frames, optional
//! motion filtering, per-frame reconstruction, artifact writing, and the run
//! manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use eit_core::forward::DataVector;
use eit_core::mesh::{assign_electrodes, generate_disk_mesh, load_mesh, ElectrodeLayout, Mesh};
use eit_core::phantom::{
    mesh_content_hash, simulate_frames, simulate_motion_frames, Ellipse, FrameSequence,
    Inclusion, MotionSpec, Scenario, Sinusoid,
};
use eit_core::recon::{
    default_motion_lambda, motion_filter, time_difference, ConductivityImage, FerSolver,
    Lambda, Method, StandardSolver,
};
use eit_core::sensitivity::{boundary_submatrix, build_fidelity_regularizer, SensitivityMatrix};

use crate::cache::{load_or_build_sensitivity, CacheStatus};
use crate::config::{MeshSource, OutputFormat, PipelineConfig};
use crate::error::{at_stage, CliError};
use crate::render::render_image;

/// Everything a pipeline run produced, for logs and tests.
#[derive(Debug)]
pub struct PipelineReport {
    pub out_dir: PathBuf,
    pub frame_count: usize,
    pub csv_paths: Vec<PathBuf>,
    pub ppm_paths: Vec<PathBuf>,
    pub frames_path: PathBuf,
    pub manifest_path: PathBuf,
    pub cache_status: CacheStatus,
    pub lambda_b: Option<f64>,
    pub range: f64,
}

/// Resolve the configured mesh source into a mesh with 16 electrodes.
pub fn resolve_mesh(cfg: &PipelineConfig) -> Result<(Mesh, ElectrodeLayout), CliError> {
    match &cfg.mesh {
        MeshSource::Generate { radius, edge_length } => {
            let mesh = generate_disk_mesh(*radius, *edge_length)
                .map_err(|e| CliError::Config(format!("mesh generation: {e}")))?;
            let layout = assign_electrodes(&mesh, 16, cfg.coverage)
                .map_err(|e| CliError::Config(format!("electrode assignment: {e}")))?;
            Ok((mesh, layout))
        }
        MeshSource::File(path) => {
            let (mesh, layout) = load_mesh(path).map_err(at_stage("mesh"))?;
            let layout = match layout {
                Some(l) => {
                    if l.len() != 16 {
                        return Err(CliError::Config(format!(
                            "mesh file defines {} electrodes; the protocol needs 16",
                            l.len()
                        )));
                    }
                    l
                }
                None => assign_electrodes(&mesh, 16, cfg.coverage)
                    .map_err(at_stage("electrode assignment"))?,
            };
            Ok((mesh, layout))
        }
    }
}

fn domain_radius(mesh: &Mesh) -> f64 {
    mesh.nodes()
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .fold(0.0f64, f64::max)
}

/// Two mirrored lung ellipses sized for the mesh, breathing with the
/// configured contrast and rate.
pub fn scenario_from_config(
    cfg: &PipelineConfig,
    radius: f64,
) -> Result<Scenario, CliError> {
    let wave = Sinusoid { frequency_hz: cfg.breathing_hz };
    let lung = |side: f64| Inclusion {
        shape: Ellipse {
            center: [side * 0.43 * radius, 0.0],
            semi_axes: [0.24 * radius, 0.38 * radius],
            rotation: 0.0,
        },
        contrast: cfg.contrast,
        waveform: wave,
    };
    Scenario::new(vec![lung(-1.0), lung(1.0)], cfg.frames, cfg.frame_period)
        .map_err(|e| CliError::Config(format!("scenario: {e}")))
}

/// Simulate the configured frame sequence: the breathing phantom, or pure
/// boundary motion when a motion amplitude is set.
pub fn simulate_sequence(
    cfg: &PipelineConfig,
    mesh: &Mesh,
    layout: &ElectrodeLayout,
) -> Result<FrameSequence, CliError> {
    if cfg.motion_amplitude > 0.0 {
        let motion = MotionSpec::new(
            cfg.motion_amplitude,
            cfg.motion_mode,
            Sinusoid { frequency_hz: cfg.breathing_hz },
            cfg.frame_period,
        )
        .map_err(|e| CliError::Config(format!("motion: {e}")))?;
        simulate_motion_frames(mesh, layout, &motion, cfg.frames, cfg.seed)
            .map_err(at_stage("phantom simulation"))
    } else {
        let scenario = scenario_from_config(cfg, domain_radius(mesh))?;
        simulate_frames(mesh, layout, &scenario, cfg.noise_level, cfg.seed)
            .map_err(at_stage("phantom simulation"))
    }
}

/// Apply the boundary filter to every data vector, returning the filtered
/// vectors and the weight that was used.
pub fn filter_sequence(
    s: &SensitivityMatrix,
    mesh: &Mesh,
    vdots: Vec<DataVector>,
    lambda_b: Option<f64>,
) -> Result<(Vec<DataVector>, f64), CliError> {
    let boundary = boundary_submatrix(s, &mesh.boundary_elements())
        .map_err(at_stage("motion filter"))?;
    let lb = lambda_b.unwrap_or_else(|| default_motion_lambda(&boundary));
    let filtered = vdots
        .par_iter()
        .map(|v| motion_filter(&boundary, v, lb).map(|(f, _)| f))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at_stage("motion filter"))?;
    Ok((filtered, lb))
}

/// Reconstruct every frame with one shared factorization.
pub fn reconstruct_sequence(
    cfg: &PipelineConfig,
    s: &SensitivityMatrix,
    vdots: &[DataVector],
    timestamps: &[f64],
) -> Result<Vec<ConductivityImage>, CliError> {
    let stage = at_stage("reconstruction");
    match cfg.method {
        Method::FidelityEmbedded => {
            let reg = build_fidelity_regularizer(s).map_err(at_stage("reconstruction"))?;
            let solver = FerSolver::new(s, &reg).map_err(&stage)?;
            let op = solver.factorize(cfg.lambda).map_err(&stage)?;
            vdots
                .par_iter()
                .zip(timestamps)
                .map(|(v, &t)| op.reconstruct(v).map(|img| img.with_timestamp(t)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(&stage)
        }
        Method::Standard => {
            let solver = StandardSolver::new(s);
            let op = solver.factorize(cfg.lambda).map_err(&stage)?;
            vdots
                .par_iter()
                .zip(timestamps)
                .map(|(v, &t)| op.reconstruct(v).map(|img| img.with_timestamp(t)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(&stage)
        }
    }
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write one reconstruction as `element_index,value` CSV with provenance
/// comments.
pub fn write_image_csv(
    path: &Path,
    image: &ConductivityImage,
    frame: usize,
    seed: u64,
    scenario_hash: u64,
    lambda_b: Option<f64>,
) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "# frame = {frame}");
    if let Some(t) = image.timestamp() {
        let _ = writeln!(out, "# t = {}", format_float(t));
    }
    let _ = writeln!(out, "# method = {}", image.method());
    let _ = writeln!(out, "# lambda = {}", image.lambda());
    if let Some(lb) = lambda_b {
        let _ = writeln!(out, "# lambda_b = {}", format_float(lb));
    }
    let _ = writeln!(out, "# seed = {seed}");
    let _ = writeln!(out, "# scenario = {scenario_hash:016x}");
    let _ = writeln!(out, "element_index,value");
    for (k, v) in image.values().iter().enumerate() {
        let _ = writeln!(out, "{k},{}", format_float(*v));
    }
    fs::write(path, out)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Read an image CSV back, returning the values and the recorded settings.
pub fn read_image_csv(
    path: &Path,
) -> Result<(Vec<f64>, Method, Lambda, Option<f64>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut method = Method::FidelityEmbedded;
    let mut lambda = Lambda::Infinite;
    let mut timestamp = None;
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "method" => {
                        method = value.parse().map_err(|_| {
                            CliError::Io(format!("{}: bad method '{value}'", path.display()))
                        })?;
                    }
                    "lambda" => {
                        lambda = value.parse().map_err(|_| {
                            CliError::Io(format!("{}: bad lambda '{value}'", path.display()))
                        })?;
                    }
                    "t" => timestamp = value.parse().ok(),
                    _ => {}
                }
            }
            continue;
        }
        if line == "element_index,value" {
            continue;
        }
        let (k, v) = line.split_once(',').ok_or_else(|| {
            CliError::Io(format!("{}: line {}: expected index,value", path.display(), idx + 1))
        })?;
        let k: usize = k.trim().parse().map_err(|_| {
            CliError::Io(format!("{}: line {}: bad index", path.display(), idx + 1))
        })?;
        if k != values.len() {
            return Err(CliError::Io(format!(
                "{}: element indices must run 0,1,2,... (got {k} at position {})",
                path.display(),
                values.len()
            )));
        }
        let v: f64 = v.trim().parse().map_err(|_| {
            CliError::Io(format!("{}: line {}: bad value", path.display(), idx + 1))
        })?;
        values.push(v);
    }
    Ok((values, method, lambda, timestamp))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot hash {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn hex32(hash: [u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-frame artifacts plus a global symmetric color range.
pub fn write_artifacts(
    cfg: &PipelineConfig,
    mesh: &Mesh,
    images: &[ConductivityImage],
    seq: &FrameSequence,
    lambda_b: Option<f64>,
) -> Result<(Vec<PathBuf>, Vec<PathBuf>, f64), CliError> {
    let range = images.iter().map(|img| img.max_abs()).fold(0.0f64, f64::max);
    let mut csv_paths = Vec::new();
    let mut ppm_paths = Vec::new();
    for (m, img) in images.iter().enumerate() {
        if cfg.outputs.contains(&OutputFormat::Csv) {
            let path = cfg.out_dir.join(format!("frame_{m:04}.csv"));
            write_image_csv(&path, img, m, seq.seed(), seq.scenario_hash(), lambda_b)?;
            csv_paths.push(path);
        }
        if cfg.outputs.contains(&OutputFormat::Ppm) {
            let path = cfg.out_dir.join(format!("frame_{m:04}.ppm"));
            render_image(img, mesh, &path, Some(range)).map_err(|e| e.stage("render"))?;
            ppm_paths.push(path);
        }
    }
    Ok((csv_paths, ppm_paths, range))
}

struct ManifestInput<'a> {
    cfg: &'a PipelineConfig,
    mesh: &'a Mesh,
    layout: &'a ElectrodeLayout,
    jacobian_path: &'a Path,
    jacobian_status: CacheStatus,
    frames_path: &'a Path,
    frame_count: usize,
    lambda_b: Option<f64>,
    range: f64,
    csv_paths: &'a [PathBuf],
    ppm_paths: &'a [PathBuf],
    timings_ms: &'a [(&'static str, u128)],
}

fn write_manifest(path: &Path, input: &ManifestInput<'_>) -> Result<(), CliError> {
    let cfg = input.cfg;
    let mut out = String::new();
    let _ = writeln!(out, "format = eit-pipeline-manifest-v1");
    match &cfg.mesh {
        MeshSource::Generate { radius, edge_length } => {
            let _ = writeln!(out, "config.mesh = generate");
            let _ = writeln!(out, "config.mesh_radius = {}", format_float(*radius));
            let _ = writeln!(out, "config.mesh_edge_length = {}", format_float(*edge_length));
        }
        MeshSource::File(p) => {
            let _ = writeln!(out, "config.mesh = file");
            let _ = writeln!(out, "config.mesh_path = {}", p.display());
        }
    }
    let _ = writeln!(out, "config.coverage = {}", format_float(cfg.coverage));
    let _ = writeln!(out, "config.method = {}", cfg.method);
    let _ = writeln!(out, "config.lambda = {}", cfg.lambda);
    let _ = writeln!(out, "config.motion_filter = {}", cfg.motion_filter);
    let _ = writeln!(out, "config.frames = {}", cfg.frames);
    let _ = writeln!(out, "config.frame_period = {}", format_float(cfg.frame_period));
    let _ = writeln!(out, "config.contrast = {}", format_float(cfg.contrast));
    let _ = writeln!(out, "config.breathing_hz = {}", format_float(cfg.breathing_hz));
    let _ = writeln!(out, "config.noise_level = {}", format_float(cfg.noise_level));
    let _ = writeln!(out, "config.motion_amplitude = {}", format_float(cfg.motion_amplitude));
    let _ = writeln!(out, "config.motion_mode = {}", cfg.motion_mode);
    let _ = writeln!(out, "config.seed = {}", cfg.seed);
    let _ = writeln!(out, "mesh.nodes = {}", input.mesh.n_nodes());
    let _ = writeln!(out, "mesh.elements = {}", input.mesh.n_elements());
    let _ = writeln!(
        out,
        "mesh.hash = {}",
        hex32(mesh_content_hash(input.mesh, input.layout))
    );
    let _ = writeln!(out, "jacobian.path = {}", input.jacobian_path.display());
    let _ = writeln!(
        out,
        "jacobian.status = {}",
        match input.jacobian_status {
            CacheStatus::Hit => "hit",
            CacheStatus::Rebuilt => "rebuilt",
        }
    );
    let _ = writeln!(out, "jacobian.hash = {}", sha256_file(input.jacobian_path)?);
    let _ = writeln!(out, "frames.path = {}", input.frames_path.display());
    let _ = writeln!(out, "frames.count = {}", input.frame_count);
    let _ = writeln!(out, "frames.hash = {}", sha256_file(input.frames_path)?);
    match input.lambda_b {
        Some(lb) => {
            let _ = writeln!(out, "filter.lambda_b = {}", format_float(lb));
        }
        None => {
            let _ = writeln!(out, "filter.lambda_b = off");
        }
    }
    let _ = writeln!(out, "render.range = {}", format_float(input.range));
    for p in input.csv_paths.iter().chain(input.ppm_paths) {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
        let _ = writeln!(
            out,
            "artifact.{} = {}",
            name.unwrap_or_else(|| p.display().to_string()),
            sha256_file(p)?
        );
    }
    for (label, ms) in input.timings_ms {
        let _ = writeln!(out, "timing.{label}_ms = {ms}");
    }
    fs::write(path, out)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Run the whole pipeline for one configuration.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport, CliError> {
    cfg.validate()?;
    let total = Instant::now();
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.out_dir.display())))?;

    let t = Instant::now();
    let (mesh, layout) = resolve_mesh(cfg)?;
    let mesh_ms = t.elapsed().as_millis();
    println!(
        "mesh: {} nodes, {} elements, {} electrodes",
        mesh.n_nodes(),
        mesh.n_elements(),
        layout.len()
    );

    let t = Instant::now();
    let jacobian_path = cfg
        .jacobian_cache
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("jacobian.eits"));
    let (s, cache_status) = load_or_build_sensitivity(&mesh, &layout, &jacobian_path)?;
    let jacobian_ms = t.elapsed().as_millis();

    let t = Instant::now();
    let seq = simulate_sequence(cfg, &mesh, &layout)?;
    let frames_path = cfg.out_dir.join("frames.eitf");
    seq.save_text(&frames_path).map_err(at_stage("frame file"))?;
    let phantom_ms = t.elapsed().as_millis();
    println!("phantom: {} frames simulated", seq.len());

    let t = Instant::now();
    let vdots = time_difference(&seq, 0).map_err(at_stage("time difference"))?;
    let (vdots, lambda_b) = if cfg.motion_filter {
        let (filtered, lb) = filter_sequence(&s, &mesh, vdots, cfg.lambda_b)?;
        (filtered, Some(lb))
    } else {
        (vdots, None)
    };
    let timestamps: Vec<f64> = (0..seq.len()).map(|m| seq.timestamp(m)).collect();
    let images = reconstruct_sequence(cfg, &s, &vdots, &timestamps)?;
    let recon_ms = t.elapsed().as_millis();
    println!("reconstruction: {} images ({}, lambda = {})", images.len(), cfg.method, cfg.lambda);

    let t = Instant::now();
    let (csv_paths, ppm_paths, range) = write_artifacts(cfg, &mesh, &images, &seq, lambda_b)?;
    let render_ms = t.elapsed().as_millis();

    let manifest_path = cfg.out_dir.join("manifest.txt");
    let timings = [
        ("mesh", mesh_ms),
        ("jacobian", jacobian_ms),
        ("phantom", phantom_ms),
        ("reconstruction", recon_ms),
        ("render", render_ms),
        ("total", total.elapsed().as_millis()),
    ];
    write_manifest(
        &manifest_path,
        &ManifestInput {
            cfg,
            mesh: &mesh,
            layout: &layout,
            jacobian_path: &jacobian_path,
            jacobian_status: cache_status,
            frames_path: &frames_path,
            frame_count: seq.len(),
            lambda_b,
            range,
            csv_paths: &csv_paths,
            ppm_paths: &ppm_paths,
            timings_ms: &timings,
        },
    )?;
    println!(
        "pipeline: wrote {} CSVs, {} PPMs, manifest at {}",
        csv_paths.len(),
        ppm_paths.len(),
        manifest_path.display()
    );

    Ok(PipelineReport {
        out_dir: cfg.out_dir.clone(),
        frame_count: seq.len(),
        csv_paths,
        ppm_paths,
        frames_path,
        manifest_path,
        cache_status,
        lambda_b,
        range,
    })
}

/// Load a frame sequence from either the text or the binary format.
pub fn load_frames(path: &Path) -> Result<FrameSequence, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(b"EITF1\0") {
        return FrameSequence::read_binary(path).map_err(at_stage("frame file"));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Io(format!("{}: not valid UTF-8 text", path.display())))?;
    FrameSequence::parse_text(&text).map_err(at_stage("frame file"))
}
