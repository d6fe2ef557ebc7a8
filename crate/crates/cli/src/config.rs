//! Flat `key = value` run configuration shared by the pipeline subcommands.
//!
//! One assignment per line, `#` starts a comment, unknown or duplicate keys
//! are rejected. Every key has a default, so an empty (or absent) file is the
//! standard breathing-phantom run.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use eit_core::recon::{Lambda, Method};

use crate::error::CliError;

pub const DEFAULT_RADIUS: f64 = 1.0;
pub const DEFAULT_EDGE_LENGTH: f64 = 0.05;
pub const DEFAULT_COVERAGE: f64 = 0.5;
pub const DEFAULT_FRAMES: usize = 40;
pub const DEFAULT_FRAME_PERIOD: f64 = 1.0 / 9.0;
pub const DEFAULT_CONTRAST: f64 = -0.3;
pub const DEFAULT_BREATHING_HZ: f64 = 0.25;
pub const DEFAULT_NOISE_LEVEL: f64 = 0.01;

/// Where the reconstruction mesh comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    Generate { radius: f64, edge_length: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Ppm,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mesh: MeshSource,
    pub coverage: f64,
    pub method: Method,
    pub lambda: Lambda,
    pub lambda_b: Option<f64>,
    pub motion_filter: bool,
    pub frames: usize,
    pub frame_period: f64,
    pub contrast: f64,
    pub breathing_hz: f64,
    pub noise_level: f64,
    pub motion_amplitude: f64,
    pub motion_mode: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub outputs: Vec<OutputFormat>,
    pub jacobian_cache: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            mesh: MeshSource::Generate {
                radius: DEFAULT_RADIUS,
                edge_length: DEFAULT_EDGE_LENGTH,
            },
            coverage: DEFAULT_COVERAGE,
            method: Method::FidelityEmbedded,
            lambda: Lambda::Infinite,
            lambda_b: None,
            motion_filter: true,
            frames: DEFAULT_FRAMES,
            frame_period: DEFAULT_FRAME_PERIOD,
            contrast: DEFAULT_CONTRAST,
            breathing_hz: DEFAULT_BREATHING_HZ,
            noise_level: DEFAULT_NOISE_LEVEL,
            motion_amplitude: 0.0,
            motion_mode: 2,
            seed: 0,
            out_dir: PathBuf::from("out"),
            outputs: vec![OutputFormat::Csv, OutputFormat::Ppm],
            jacobian_cache: None,
        }
    }
}

impl PipelineConfig {
    /// Validate cross-field constraints; single-field ranges are checked
    /// during parsing.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.method == Method::Standard && self.lambda.is_infinite() {
            return Err(CliError::Config(
                "method = standard requires a finite lambda".into(),
            ));
        }
        Ok(())
    }
}

fn bad_key(key: &str, value: &str, why: &str) -> CliError {
    CliError::Config(format!("key '{key}': cannot accept '{value}' ({why})"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| bad_key(key, value, "not a valid number"))
}

fn parse_positive(key: &str, value: &str) -> Result<f64, CliError> {
    let v: f64 = parse_num(key, value)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(bad_key(key, value, "must be positive and finite"));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(bad_key(key, value, "expected true or false")),
    }
}

/// Parse configuration text over the defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    let mut mesh_path: Option<PathBuf> = None;
    let mut mesh_radius: Option<f64> = None;
    let mut mesh_edge: Option<f64> = None;
    let mut seen = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {lineno}: expected 'key = value', got '{line}'"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(CliError::Config(format!("line {lineno}: duplicate key '{key}'")));
        }
        match key {
            "mesh_path" => mesh_path = Some(PathBuf::from(value)),
            "mesh_radius" => mesh_radius = Some(parse_positive(key, value)?),
            "mesh_edge_length" => mesh_edge = Some(parse_positive(key, value)?),
            "coverage" => {
                let v = parse_positive(key, value)?;
                if v >= 1.0 {
                    return Err(bad_key(key, value, "must lie strictly between 0 and 1"));
                }
                cfg.coverage = v;
            }
            "method" => {
                cfg.method = value
                    .parse()
                    .map_err(|_| bad_key(key, value, "expected fer or standard"))?;
            }
            "lambda" => {
                cfg.lambda = value
                    .parse()
                    .map_err(|e| bad_key(key, value, &format!("{e}")))?;
            }
            "lambda_b" => cfg.lambda_b = Some(parse_positive(key, value)?),
            "motion_filter" => cfg.motion_filter = parse_bool(key, value)?,
            "frames" => {
                let v: usize = parse_num(key, value)?;
                if v == 0 {
                    return Err(bad_key(key, value, "must be at least 1"));
                }
                cfg.frames = v;
            }
            "frame_period" => cfg.frame_period = parse_positive(key, value)?,
            "contrast" => {
                let v: f64 = parse_num(key, value)?;
                if !v.is_finite() {
                    return Err(bad_key(key, value, "must be finite"));
                }
                cfg.contrast = v;
            }
            "breathing_hz" => cfg.breathing_hz = parse_positive(key, value)?,
            "noise_level" => {
                let v: f64 = parse_num(key, value)?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(bad_key(key, value, "must be non-negative and finite"));
                }
                cfg.noise_level = v;
            }
            "motion_amplitude" => {
                let v: f64 = parse_num(key, value)?;
                if !(0.0..0.05).contains(&v) {
                    return Err(bad_key(key, value, "must lie in [0, 0.05)"));
                }
                cfg.motion_amplitude = v;
            }
            "motion_mode" => cfg.motion_mode = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            "jacobian_cache" => cfg.jacobian_cache = Some(PathBuf::from(value)),
            "outputs" => {
                let mut formats = Vec::new();
                for item in value.split(',') {
                    match item.trim() {
                        "csv" => formats.push(OutputFormat::Csv),
                        "ppm" => formats.push(OutputFormat::Ppm),
                        other => {
                            return Err(bad_key(key, other, "expected csv and/or ppm"));
                        }
                    }
                }
                if formats.is_empty() {
                    return Err(bad_key(key, value, "at least one format required"));
                }
                cfg.outputs = formats;
            }
            _ => {
                return Err(CliError::Config(format!("line {lineno}: unknown key '{key}'")));
            }
        }
    }

    cfg.mesh = match (mesh_path, mesh_radius, mesh_edge) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(CliError::Config(
                "exactly one mesh source: mesh_path conflicts with mesh_radius/mesh_edge_length"
                    .into(),
            ));
        }
        (Some(p), None, None) => MeshSource::File(p),
        (None, r, e) => MeshSource::Generate {
            radius: r.unwrap_or(DEFAULT_RADIUS),
            edge_length: e.unwrap_or(DEFAULT_EDGE_LENGTH),
        },
    };

    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            parse_config(&text)
        }
    }
}
