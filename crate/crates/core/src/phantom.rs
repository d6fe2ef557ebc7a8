//! Synthetic ground truth and measurement simulation: breathing-lung
//! conductivity scenarios, nonlinear forward data on a refined mesh, seeded
//! measurement noise, and boundary-motion frames produced by actually
//! deforming the mesh.
//!
//! Data generation always runs on `refine(coarse_mesh)` with the electrode
//! arcs lifted exactly, so reconstruction on the coarse mesh never sees data
//! manufactured from its own discretization. Noise is zero-mean Gaussian per
//! frame, scaled to the RMS of that frame's time-difference signal, and every
//! random draw derives from one recorded seed with one RNG stream per frame.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forward::{
    extract_data_vector, solve_all, Conductivity, DataVector, ForwardError, PROTOCOL_LEN,
};
use crate::mesh::{refine, ElectrodeLayout, Mesh, MeshError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("scenario: {0}")]
    InvalidScenario(String),
    #[error("motion: {0}")]
    InvalidMotion(String),
    #[error("boundary deformation inverted mesh elements: {0}")]
    InvertedElements(String),
    #[error("frame sequence: {0}")]
    Format(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raised-cosine waveform `0.5·(1 − cos(2π f t))`, ranging over `[0, 1]`
/// with peaks at odd multiples of `1/(2f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub frequency_hz: f64,
}

impl Sinusoid {
    pub fn value(&self, t: f64) -> f64 {
        0.5 * (1.0 - (std::f64::consts::TAU * self.frequency_hz * t).cos())
    }

    /// Earliest time the waveform reaches its peak value 1.
    pub fn peak_time(&self) -> f64 {
        0.5 / self.frequency_hz
    }
}

/// Axis-aligned-then-rotated ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub rotation: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let x = (c * dx + s * dy) / self.semi_axes[0];
        let y = (-s * dx + c * dy) / self.semi_axes[1];
        x * x + y * y <= 1.0
    }
}

/// One conductivity inclusion: an ellipse whose contrast oscillates with its
/// waveform, reaching `contrast` at the waveform peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inclusion {
    pub shape: Ellipse,
    pub contrast: f64,
    pub waveform: Sinusoid,
}

/// Time-varying conductivity ground truth over a unit background.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    inclusions: Vec<Inclusion>,
    frame_count: usize,
    frame_period: f64,
}

impl Scenario {
    pub fn new(
        inclusions: Vec<Inclusion>,
        frame_count: usize,
        frame_period: f64,
    ) -> Result<Scenario, PhantomError> {
        if frame_count == 0 {
            return Err(PhantomError::InvalidScenario("frame count must be at least 1".into()));
        }
        if !(frame_period > 0.0) || !frame_period.is_finite() {
            return Err(PhantomError::InvalidScenario(format!(
                "frame period must be positive, got {frame_period}"
            )));
        }
        let mut worst_drop = 0.0;
        for (i, inc) in inclusions.iter().enumerate() {
            if !(inc.shape.semi_axes[0] > 0.0) || !(inc.shape.semi_axes[1] > 0.0) {
                return Err(PhantomError::InvalidScenario(format!(
                    "inclusion {i} has non-positive semi-axes"
                )));
            }
            if !(inc.waveform.frequency_hz > 0.0) {
                return Err(PhantomError::InvalidScenario(format!(
                    "inclusion {i} has non-positive frequency"
                )));
            }
            if !inc.contrast.is_finite() {
                return Err(PhantomError::InvalidScenario(format!(
                    "inclusion {i} has non-finite contrast"
                )));
            }
            if inc.contrast < 0.0 {
                worst_drop += inc.contrast;
            }
        }
        if 1.0 + worst_drop <= 0.0 {
            return Err(PhantomError::InvalidScenario(format!(
                "negative contrasts sum to {worst_drop}; conductivity would reach zero"
            )));
        }
        Ok(Scenario { inclusions, frame_count, frame_period })
    }

    /// Two mirrored ellipses dropping conductivity by 0.3 at full inhale,
    /// breathing at 0.25 Hz, sized for a disk of the given radius.
    pub fn lungs(radius: f64, frame_count: usize, frame_period: f64) -> Result<Scenario, PhantomError> {
        let breath = Sinusoid { frequency_hz: 0.25 };
        let lung = |side: f64| Inclusion {
            shape: Ellipse {
                center: [side * 0.43 * radius, 0.0],
                semi_axes: [0.24 * radius, 0.38 * radius],
                rotation: 0.0,
            },
            contrast: -0.3,
            waveform: breath,
        };
        Scenario::new(vec![lung(-1.0), lung(1.0)], frame_count, frame_period)
    }

    pub fn inclusions(&self) -> &[Inclusion] {
        &self.inclusions
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    /// Ground-truth conductivity at a point and time.
    pub fn sigma_at(&self, p: [f64; 2], t: f64) -> f64 {
        let mut sigma = 1.0;
        for inc in &self.inclusions {
            if inc.shape.contains(p) {
                sigma += inc.contrast * inc.waveform.value(t);
            }
        }
        sigma
    }

    /// Hash of every parameter, for frame-file provenance.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"scenario");
        h.update((self.frame_count as u64).to_le_bytes());
        h.update(self.frame_period.to_le_bytes());
        for inc in &self.inclusions {
            for v in [
                inc.shape.center[0],
                inc.shape.center[1],
                inc.shape.semi_axes[0],
                inc.shape.semi_axes[1],
                inc.shape.rotation,
                inc.contrast,
                inc.waveform.frequency_hz,
            ] {
                h.update(v.to_le_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

/// Smooth radial boundary deformation: mode-`mode` cosine ripple of relative
/// `amplitude`, faded to zero over the outer fifth of the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSpec {
    pub amplitude: f64,
    pub mode: u32,
    pub waveform: Sinusoid,
    pub frame_period: f64,
}

impl MotionSpec {
    pub fn new(
        amplitude: f64,
        mode: u32,
        waveform: Sinusoid,
        frame_period: f64,
    ) -> Result<MotionSpec, PhantomError> {
        if !(amplitude >= 0.0) || amplitude >= 0.05 {
            return Err(PhantomError::InvalidMotion(format!(
                "amplitude must lie in [0, 0.05), got {amplitude}"
            )));
        }
        if !(frame_period > 0.0) || !frame_period.is_finite() {
            return Err(PhantomError::InvalidMotion(format!(
                "frame period must be positive, got {frame_period}"
            )));
        }
        if !(waveform.frequency_hz > 0.0) {
            return Err(PhantomError::InvalidMotion("waveform frequency must be positive".into()));
        }
        Ok(MotionSpec { amplitude, mode, waveform, frame_period })
    }

    /// Gentle two-lobed breathing-like chest wall movement.
    pub fn chest_default() -> MotionSpec {
        MotionSpec {
            amplitude: 0.01,
            mode: 2,
            waveform: Sinusoid { frequency_hz: 0.25 },
            frame_period: 1.0 / 9.0,
        }
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"motion");
        h.update(self.amplitude.to_le_bytes());
        h.update(u64::from(self.mode).to_le_bytes());
        h.update(self.waveform.frequency_hz.to_le_bytes());
        h.update(self.frame_period.to_le_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

/// Timestamped measurement frames with the provenance that produced them.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<(f64, DataVector)>,
    seed: u64,
    scenario_hash: u64,
    mesh_hash: Option<[u8; 32]>,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<(f64, DataVector)>,
        seed: u64,
        scenario_hash: u64,
    ) -> Result<FrameSequence, PhantomError> {
        if frames.is_empty() {
            return Err(PhantomError::Format("frame sequence is empty".into()));
        }
        for w in frames.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(PhantomError::Format(format!(
                    "timestamps must strictly increase, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(FrameSequence { frames, seed, scenario_hash, mesh_hash: None })
    }

    pub fn with_mesh_hash(mut self, hash: [u8; 32]) -> FrameSequence {
        self.mesh_hash = Some(hash);
        self
    }

    pub fn frames(&self) -> &[(f64, DataVector)] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamp(&self, m: usize) -> f64 {
        self.frames[m].0
    }

    pub fn data(&self, m: usize) -> &DataVector {
        &self.frames[m].1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scenario_hash(&self) -> u64 {
        self.scenario_hash
    }

    pub fn mesh_hash(&self) -> Option<[u8; 32]> {
        self.mesh_hash
    }

    /// Diffable text form: a header line, an optional mesh-hash comment, and
    /// per frame a `t=<seconds>` line followed by one value per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "EITF1 {} {} {:016x}",
            self.frames.len(),
            self.seed,
            self.scenario_hash
        );
        if let Some(hash) = &self.mesh_hash {
            let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "# mesh {hex}");
        }
        for (t, v) in &self.frames {
            let _ = writeln!(out, "t={t:.16e}");
            for x in v.values() {
                let _ = writeln!(out, "{x:.16e}");
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<FrameSequence, PhantomError> {
        let mut mesh_hash = None;
        let mut lines = text.lines().filter_map(|raw| {
            let l = raw.trim();
            if l.is_empty() {
                return None;
            }
            if let Some(rest) = l.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(hex) = rest.strip_prefix("mesh ") {
                    let hex = hex.trim();
                    if hex.len() == 64 {
                        let mut hash = [0u8; 32];
                        let ok = (0..32).all(|i| {
                            u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                                .map(|b| hash[i] = b)
                                .is_ok()
                        });
                        if ok {
                            mesh_hash = Some(hash);
                        }
                    }
                }
                return None;
            }
            Some(l)
        });

        let header = lines.next().ok_or_else(|| PhantomError::Format("empty file".into()))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("EITF1") {
            return Err(PhantomError::Format("missing EITF1 header".into()));
        }
        let frame_count: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| PhantomError::Format("bad frame count in header".into()))?;
        let seed: u64 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| PhantomError::Format("bad seed in header".into()))?;
        let scenario_hash = toks
            .next()
            .and_then(|t| u64::from_str_radix(t, 16).ok())
            .ok_or_else(|| PhantomError::Format("bad scenario hash in header".into()))?;
        if toks.next().is_some() {
            return Err(PhantomError::Format("trailing tokens in header".into()));
        }

        let mut tokens = lines.flat_map(str::split_whitespace);
        let mut frames = Vec::with_capacity(frame_count);
        for m in 0..frame_count {
            let t_tok = tokens
                .next()
                .ok_or_else(|| PhantomError::Format(format!("missing frame {m}")))?;
            let t: f64 = t_tok
                .strip_prefix("t=")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    PhantomError::Format(format!("frame {m}: expected t=<seconds>, got '{t_tok}'"))
                })?;
            let mut values = Vec::with_capacity(PROTOCOL_LEN);
            for i in 0..PROTOCOL_LEN {
                let tok = tokens.next().ok_or_else(|| {
                    PhantomError::Format(format!("frame {m}: missing value {i}"))
                })?;
                values.push(tok.parse::<f64>().map_err(|_| {
                    PhantomError::Format(format!("frame {m}: bad value '{tok}'"))
                })?);
            }
            frames.push((t, DataVector::from_values(values)?));
        }
        if tokens.next().is_some() {
            return Err(PhantomError::Format("trailing content after final frame".into()));
        }
        let seq = FrameSequence::new(frames, seed, scenario_hash)?;
        Ok(match mesh_hash {
            Some(h) => seq.with_mesh_hash(h),
            None => seq,
        })
    }

    pub fn save_text<P: AsRef<Path>>(&self, path: P) -> Result<(), PhantomError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load_text<P: AsRef<Path>>(path: P) -> Result<FrameSequence, PhantomError> {
        FrameSequence::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Compact binary form mirroring the data-vector cache, prefixed with the
    /// frame count and provenance.
    pub fn write_binary<P: AsRef<Path>>(&self, path: P) -> Result<(), PhantomError> {
        let mut buf = Vec::with_capacity(32 + self.frames.len() * (8 + 8 * PROTOCOL_LEN));
        buf.extend_from_slice(b"EITF1\0");
        buf.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.scenario_hash.to_le_bytes());
        match &self.mesh_hash {
            Some(h) => {
                buf.push(1);
                buf.extend_from_slice(h);
            }
            None => buf.push(0),
        }
        for (t, v) in &self.frames {
            buf.extend_from_slice(&t.to_le_bytes());
            for x in v.values() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_binary<P: AsRef<Path>>(path: P) -> Result<FrameSequence, PhantomError> {
        let buf = std::fs::read(path)?;
        if buf.len() < 27 || &buf[..6] != b"EITF1\0" {
            return Err(PhantomError::Format("missing binary frame magic".into()));
        }
        let take_f64 =
            |b: &[u8]| f64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
        let frame_count = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes")) as usize;
        let seed = u64::from_le_bytes(buf[10..18].try_into().expect("8 bytes"));
        let scenario_hash = u64::from_le_bytes(buf[18..26].try_into().expect("8 bytes"));
        let mut pos = 26;
        let mesh_hash = match buf[pos] {
            0 => {
                pos += 1;
                None
            }
            1 => {
                pos += 1;
                if buf.len() < pos + 32 {
                    return Err(PhantomError::Format("truncated mesh hash".into()));
                }
                let mut h = [0u8; 32];
                h.copy_from_slice(&buf[pos..pos + 32]);
                pos += 32;
                Some(h)
            }
            other => {
                return Err(PhantomError::Format(format!("bad mesh-hash flag {other}")));
            }
        };
        let frame_bytes = 8 + 8 * PROTOCOL_LEN;
        if buf.len() != pos + frame_count * frame_bytes {
            return Err(PhantomError::Format(format!(
                "binary frame file is {} bytes, expected {}",
                buf.len(),
                pos + frame_count * frame_bytes
            )));
        }
        let mut frames = Vec::with_capacity(frame_count);
        for m in 0..frame_count {
            let base = pos + m * frame_bytes;
            let t = take_f64(&buf[base..]);
            let values: Vec<f64> = (0..PROTOCOL_LEN)
                .map(|i| take_f64(&buf[base + 8 + 8 * i..]))
                .collect();
            frames.push((t, DataVector::from_values(values)?));
        }
        let seq = FrameSequence::new(frames, seed, scenario_hash)?;
        Ok(match mesh_hash {
            Some(h) => seq.with_mesh_hash(h),
            None => seq,
        })
    }
}

/// Hash of the mesh-plus-layout text, recorded as frame provenance.
pub fn mesh_content_hash(mesh: &Mesh, layout: &ElectrodeLayout) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"mesh");
    h.update(mesh.to_text(Some(layout)).as_bytes());
    h.finalize().into()
}

/// Evaluate the scenario's conductivity at each element centroid.
pub fn rasterize_scenario(
    scenario: &Scenario,
    mesh: &Mesh,
    t: f64,
) -> Result<Conductivity, PhantomError> {
    let max_radius = mesh
        .boundary_loop()
        .iter()
        .map(|&v| {
            let p = mesh.node(v);
            (p[0] * p[0] + p[1] * p[1]).sqrt()
        })
        .fold(0.0f64, f64::max);
    for (i, inc) in scenario.inclusions.iter().enumerate() {
        let c = inc.shape.center;
        let reach = (c[0] * c[0] + c[1] * c[1]).sqrt()
            + inc.shape.semi_axes[0].max(inc.shape.semi_axes[1]);
        if reach > max_radius * (1.0 + 1e-9) {
            return Err(PhantomError::InvalidScenario(format!(
                "inclusion {i} reaches radius {reach:.3}, outside the domain ({max_radius:.3})"
            )));
        }
    }
    let values: Vec<f64> = (0..mesh.n_elements())
        .map(|k| scenario.sigma_at(mesh.centroid(k), t))
        .collect();
    if let Some((k, &v)) = values.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(PhantomError::InvalidScenario(format!(
            "conductivity at element {k} is {v} at t={t}"
        )));
    }
    Ok(Conductivity::from_values(mesh, values)?)
}

/// Simulate the full measurement sequence: per frame, rasterize on the
/// refined mesh, run the nonlinear forward solve, and add seeded Gaussian
/// noise scaled by `noise_level` times the RMS of that frame's
/// time-difference signal. Frame `m` draws from RNG stream `m`, so the noise
/// pattern does not depend on execution order.
pub fn simulate_frames(
    coarse_mesh: &Mesh,
    layout: &ElectrodeLayout,
    scenario: &Scenario,
    noise_level: f64,
    seed: u64,
) -> Result<FrameSequence, PhantomError> {
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(PhantomError::InvalidScenario(format!(
            "noise level must be non-negative, got {noise_level}"
        )));
    }
    let refined = refine(coarse_mesh);
    let fine_layout = refined.lift_layout(layout)?;

    let mut clean = Vec::with_capacity(scenario.frame_count);
    for m in 0..scenario.frame_count {
        let t = m as f64 * scenario.frame_period;
        let sigma = rasterize_scenario(scenario, &refined.mesh, t)?;
        let ps = solve_all(&refined.mesh, &fine_layout, &sigma)?;
        clean.push((t, extract_data_vector(&ps)?));
    }

    let reference = clean[0].1.clone();
    let mut frames = Vec::with_capacity(clean.len());
    for (m, (t, mut v)) in clean.into_iter().enumerate() {
        let ms: f64 = v
            .values()
            .iter()
            .zip(reference.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / PROTOCOL_LEN as f64;
        let std = noise_level * ms.sqrt();
        if std > 0.0 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in v.values_mut() {
                *x += normal.sample(&mut rng);
            }
        }
        frames.push((t, v));
    }

    Ok(FrameSequence::new(frames, seed, scenario.content_hash())?
        .with_mesh_hash(mesh_content_hash(coarse_mesh, layout)))
}

/// Simulate boundary movement at homogeneous conductivity: each frame
/// radially displaces the refined mesh's outer region by
/// `amplitude · cos(mode·θ) · waveform(t)`, fading to zero inside 80% of the
/// domain radius, then re-solves the forward problem on the deformed mesh.
pub fn simulate_motion_frames(
    coarse_mesh: &Mesh,
    layout: &ElectrodeLayout,
    motion: &MotionSpec,
    frames: usize,
    seed: u64,
) -> Result<FrameSequence, PhantomError> {
    if frames == 0 {
        return Err(PhantomError::InvalidMotion("frame count must be at least 1".into()));
    }
    if !(motion.amplitude >= 0.0) || motion.amplitude >= 0.05 {
        return Err(PhantomError::InvalidMotion(format!(
            "amplitude must lie in [0, 0.05), got {}",
            motion.amplitude
        )));
    }
    let refined = refine(coarse_mesh);
    let fine_layout = refined.lift_layout(layout)?;
    let base_nodes = refined.mesh.nodes().to_vec();
    let triangles = refined.mesh.triangles().to_vec();
    let radius = base_nodes
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
        .fold(0.0f64, f64::max);

    let mut out = Vec::with_capacity(frames);
    for m in 0..frames {
        let t = m as f64 * motion.frame_period;
        let scale = motion.amplitude * motion.waveform.value(t) * radius;
        let deformed = if scale == 0.0 {
            refined.mesh.clone()
        } else {
            let nodes: Vec<[f64; 2]> = base_nodes
                .iter()
                .map(|&p| {
                    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    let rho = r / radius;
                    if rho <= 0.8 {
                        return p;
                    }
                    let s = (rho - 0.8) / 0.2;
                    let blend = s * s * (3.0 - 2.0 * s);
                    let theta = p[1].atan2(p[0]);
                    let d = scale * (motion.mode as f64 * theta).cos() * blend;
                    let factor = (r + d) / r;
                    [p[0] * factor, p[1] * factor]
                })
                .collect();
            Mesh::new(nodes, triangles.clone())
                .map_err(|e| PhantomError::InvertedElements(e.to_string()))?
        };
        let sigma = Conductivity::uniform(&deformed, 1.0)?;
        let ps = solve_all(&deformed, &fine_layout, &sigma)?;
        out.push((t, extract_data_vector(&ps)?));
    }

    Ok(FrameSequence::new(out, seed, motion.content_hash())?
        .with_mesh_hash(mesh_content_hash(coarse_mesh, layout)))
}
