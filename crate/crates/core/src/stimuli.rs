//! Random-dot-motion stimuli: clip generation, directional motion-energy
//! streams, and dataset persistence.
//!
//! Each dot moves `dot_step` pixels per frame; with probability `coherence`
//! it moves in the target direction, otherwise in a uniformly random one.
//! Positions wrap toroidally so the dot count stays constant.

use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f32::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Number of directional motion-energy channels.
pub const MOTION_CHANNELS: usize = 8;

/// The coherence sweep used by the standard task protocol.
pub const CANONICAL_COHERENCES: [f32; 7] = [0.008, 0.016, 0.032, 0.064, 0.128, 0.256, 0.512];

#[derive(Debug, Error)]
pub enum StimulusError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("motion energy needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Format(String),
}

/// Motion direction in radians; 0 is rightward, angles increase
/// counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(pub f32);

impl Direction {
    pub const RIGHT: Direction = Direction(0.0);
    pub const LEFT: Direction = Direction(PI);

    pub fn from_degrees(deg: f32) -> Self {
        Direction(deg.to_radians())
    }

    pub fn radians(&self) -> f32 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct RdmConfig {
    pub n_dots: usize,
    pub coherence: f32,
    pub direction: Direction,
    pub n_frames: usize,
    pub frame_rate_hz: f32,
    pub field_size: f32,
    pub dot_step: f32,
    pub seed: u64,
}

impl Default for RdmConfig {
    fn default() -> Self {
        RdmConfig {
            n_dots: 100,
            coherence: 0.5,
            direction: Direction::RIGHT,
            n_frames: 150,
            frame_rate_hz: 75.0,
            field_size: 64.0,
            dot_step: 3.0,
            seed: 0,
        }
    }
}

impl RdmConfig {
    pub fn validate(&self) -> Result<(), StimulusError> {
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(StimulusError::InvalidConfig(format!(
                "coherence must be in [0,1], got {}",
                self.coherence
            )));
        }
        if self.n_frames < 1 {
            return Err(StimulusError::InvalidConfig("n_frames must be >= 1".into()));
        }
        if self.n_dots < 1 {
            return Err(StimulusError::InvalidConfig("n_dots must be >= 1".into()));
        }
        if self.field_size <= 0.0 || self.dot_step <= 0.0 || self.frame_rate_hz <= 0.0 {
            return Err(StimulusError::InvalidConfig(
                "field_size, dot_step and frame_rate_hz must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_ms(&self) -> f32 {
        1000.0 / self.frame_rate_hz
    }
}

/// Per-frame dot positions for one trial, `n_frames × n_dots × 2` flat.
#[derive(Debug, Clone)]
pub struct StimulusClip {
    pub n_frames: usize,
    pub n_dots: usize,
    pub field_size: f32,
    pub direction: Direction,
    pub coherence: f32,
    positions: Vec<f32>,
}

impl StimulusClip {
    pub fn position(&self, frame: usize, dot: usize) -> (f32, f32) {
        let i = (frame * self.n_dots + dot) * 2;
        (self.positions[i], self.positions[i + 1])
    }

    pub fn positions(&self) -> &[f32] {
        &self.positions
    }

    /// Shortest toroidal displacement of `dot` from `frame-1` to `frame`.
    pub fn displacement(&self, frame: usize, dot: usize) -> (f32, f32) {
        let (x1, y1) = self.position(frame, dot);
        let (x0, y0) = self.position(frame - 1, dot);
        (
            wrap_delta(x1 - x0, self.field_size),
            wrap_delta(y1 - y0, self.field_size),
        )
    }

    /// Mirror about the vertical axis (x -> field - x), which maps motion
    /// angle φ to π − φ.
    pub fn mirror_horizontal(&self) -> StimulusClip {
        let mut positions = self.positions.clone();
        for chunk in positions.chunks_mut(2) {
            chunk[0] = (self.field_size - chunk[0]).rem_euclid(self.field_size);
        }
        StimulusClip {
            direction: Direction(PI - self.direction.0),
            positions,
            ..*self
        }
    }

    /// Rasterizes each frame onto a `px × px` binary grid.
    pub fn render_frames(&self, px: usize) -> Vec<f32> {
        let mut frames = vec![0.0f32; self.n_frames * px * px];
        let scale = px as f32 / self.field_size;
        for f in 0..self.n_frames {
            for d in 0..self.n_dots {
                let (x, y) = self.position(f, d);
                let xi = ((x * scale) as usize).min(px - 1);
                let yi = ((y * scale) as usize).min(px - 1);
                frames[f * px * px + yi * px + xi] = 1.0;
            }
        }
        frames
    }
}

fn wrap_delta(d: f32, field: f32) -> f32 {
    let mut d = d.rem_euclid(field);
    if d > field / 2.0 {
        d -= field;
    }
    d
}

/// Positions are kept on a 1/1024-pixel grid. On-grid values subtract
/// exactly in f32, so displacements and horizontal mirroring are exact
/// (the mirror example demands bit-exact channel swaps).
fn snap(v: f32, field: f32) -> f32 {
    let q = (v * 1024.0).round() / 1024.0;
    if q >= field {
        q - field
    } else {
        q
    }
}

pub fn generate_rdm(config: &RdmConfig) -> Result<StimulusClip, StimulusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, k) = (config.n_frames, config.n_dots);
    let field = config.field_size;
    let mut positions = vec![0.0f32; n * k * 2];

    for d in 0..k {
        positions[d * 2] = snap(rng.random::<f32>() * field, field);
        positions[d * 2 + 1] = snap(rng.random::<f32>() * field, field);
    }

    let (tdx, tdy) = (
        config.dot_step * config.direction.0.cos(),
        config.dot_step * config.direction.0.sin(),
    );
    for f in 1..n {
        for d in 0..k {
            let prev = ((f - 1) * k + d) * 2;
            let cur = (f * k + d) * 2;
            let coherent = rng.random::<f32>() < config.coherence;
            let (dx, dy) = if coherent {
                (tdx, tdy)
            } else {
                let phi = rng.random::<f32>() * TAU;
                (config.dot_step * phi.cos(), config.dot_step * phi.sin())
            };
            positions[cur] = snap((positions[prev] + dx).rem_euclid(field), field);
            positions[cur + 1] = snap((positions[prev + 1] + dy).rem_euclid(field), field);
        }
    }

    Ok(StimulusClip {
        n_frames: n,
        n_dots: k,
        field_size: field,
        direction: config.direction,
        coherence: config.coherence,
        positions,
    })
}

/// Per-frame directional feature vector, `n_frames × MOTION_CHANNELS` flat.
#[derive(Debug, Clone)]
pub struct EvidenceStream {
    pub n_frames: usize,
    features: Vec<f32>,
}

impl EvidenceStream {
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * MOTION_CHANNELS..(t + 1) * MOTION_CHANNELS]
    }

    pub fn from_features(features: Vec<f32>) -> Self {
        assert_eq!(features.len() % MOTION_CHANNELS, 0);
        EvidenceStream {
            n_frames: features.len() / MOTION_CHANNELS,
            features,
        }
    }
}

/// Unit vectors of the 8 canonical directions (45° apart, 0 = rightward).
const CHANNEL_UNITS: [(f32, f32); MOTION_CHANNELS] = {
    let s = std::f32::consts::FRAC_1_SQRT_2;
    [
        (1.0, 0.0),
        (s, s),
        (0.0, 1.0),
        (-s, s),
        (-1.0, 0.0),
        (-s, -s),
        (0.0, -1.0),
        (s, -s),
    ]
};

/// Strict ±45° membership, expressed through dot products so that a
/// horizontal mirror maps channel counts exactly (no angle rounding).
fn in_channel(dx: f32, dy: f32, channel: usize) -> bool {
    let (ux, uy) = CHANNEL_UNITS[channel];
    let proj = dx * ux + dy * uy;
    let norm2 = dx * dx + dy * dy;
    proj > 0.0 && proj * proj > 0.5 * norm2
}

/// Directional displacement counts per frame: channel `d` counts dots whose
/// displacement lies strictly within ±45° of canonical direction `d·45°`,
/// normalized by the dot count. The first frame replicates the second.
pub fn motion_energy(clip: &StimulusClip) -> Result<EvidenceStream, StimulusError> {
    if clip.n_frames < 2 {
        return Err(StimulusError::TooFewFrames(clip.n_frames));
    }
    let mut features = vec![0.0f32; clip.n_frames * MOTION_CHANNELS];
    for f in 1..clip.n_frames {
        let row = &mut features[f * MOTION_CHANNELS..(f + 1) * MOTION_CHANNELS];
        for d in 0..clip.n_dots {
            let (dx, dy) = clip.displacement(f, d);
            for (c, slot) in row.iter_mut().enumerate() {
                if in_channel(dx, dy, c) {
                    *slot += 1.0;
                }
            }
        }
        for slot in row.iter_mut() {
            *slot /= clip.n_dots as f32;
        }
    }
    let second: Vec<f32> = features[MOTION_CHANNELS..2 * MOTION_CHANNELS].to_vec();
    features[..MOTION_CHANNELS].copy_from_slice(&second);
    Ok(EvidenceStream::from_features(features))
}

fn angle_distance(a: f32, b: f32) -> f32 {
    let mut d = (a - b).rem_euclid(TAU);
    if d > PI {
        d = TAU - d;
    }
    d
}

/// The nearest motion-energy channel for a direction.
pub fn channel_of(direction: Direction) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for c in 0..MOTION_CHANNELS {
        let d = angle_distance(direction.0, c as f32 * PI / 4.0);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

// ── Datasets ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub stream: Vec<f32>,
    /// Index into the dataset's direction list.
    pub label: usize,
    /// Index into the dataset's coherence list.
    pub condition: usize,
    pub coherence: f32,
}

#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub master_seed: u64,
    pub n_frames: usize,
    pub n_channels: usize,
    pub frame_rate_hz: f32,
    pub n_dots: usize,
    pub field_size: f32,
    pub dot_step: f32,
    pub coherences: Vec<f32>,
    pub directions_rad: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<TrialRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_conditions(&self) -> usize {
        self.meta.coherences.len()
    }

    pub fn n_classes(&self) -> usize {
        self.meta.directions_rad.len()
    }
}

/// Builds a dataset from one RDM config per (coherence, direction) pair.
/// Per-trial seeds are derived from the master seed and `tag`, so disjoint
/// tags give statistically independent splits.
pub fn make_dataset(
    configs: &[RdmConfig],
    trials_per_config: usize,
    master_seed: u64,
    tag: u64,
) -> Result<Dataset, StimulusError> {
    if configs.is_empty() {
        return Err(StimulusError::InvalidConfig("no configs given".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let base = &configs[0];
    for c in configs {
        if c.n_frames != base.n_frames
            || c.n_dots != base.n_dots
            || c.frame_rate_hz != base.frame_rate_hz
        {
            return Err(StimulusError::InvalidConfig(
                "all configs in a dataset must share n_frames, n_dots and frame_rate".into(),
            ));
        }
    }

    let mut coherences: Vec<f32> = Vec::new();
    let mut directions: Vec<f32> = Vec::new();
    for c in configs {
        if !coherences.iter().any(|x| *x == c.coherence) {
            coherences.push(c.coherence);
        }
        if !directions.iter().any(|x| *x == c.direction.0) {
            directions.push(c.direction.0);
        }
    }

    let jobs: Vec<(usize, u64)> = (0..configs.len() * trials_per_config)
        .map(|i| (i / trials_per_config, derive_seed(master_seed, tag, i as u64)))
        .collect();

    let records: Result<Vec<TrialRecord>, StimulusError> = jobs
        .par_iter()
        .map(|(cfg_idx, seed)| {
            let cfg = RdmConfig {
                seed: *seed,
                ..configs[*cfg_idx].clone()
            };
            let clip = generate_rdm(&cfg)?;
            let stream = motion_energy(&clip)?;
            Ok(TrialRecord {
                stream: stream.features().to_vec(),
                label: directions
                    .iter()
                    .position(|d| *d == cfg.direction.0)
                    .unwrap(),
                condition: coherences.iter().position(|c| *c == cfg.coherence).unwrap(),
                coherence: cfg.coherence,
            })
        })
        .collect();

    Ok(Dataset {
        meta: DatasetMeta {
            config_hash: String::new(),
            master_seed,
            n_frames: base.n_frames,
            n_channels: MOTION_CHANNELS,
            frame_rate_hz: base.frame_rate_hz,
            n_dots: base.n_dots,
            field_size: base.field_size,
            dot_step: base.dot_step,
            coherences,
            directions_rad: directions,
        },
        records: records?,
    })
}

const DATASET_MAGIC: &str = "rtify-dataset v1";
/// Trailing floats per record after the stream: label, condition, coherence.
const RECORD_EXTRAS: usize = 3;

/// Writes a manifest plus one binary file per split into `dir`.
pub fn save_splits(
    dir: &Path,
    splits: &[(&str, &Dataset)],
    config_hash: &str,
    tool_version: &str,
) -> Result<(), StimulusError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| StimulusError::Io {
            path: path.clone(),
            source,
        }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = &splits
        .first()
        .ok_or_else(|| StimulusError::InvalidConfig("no splits to save".into()))?
        .1
        .meta;
    let record_floats = meta.n_frames * meta.n_channels + RECORD_EXTRAS;

    let mut manifest = String::new();
    manifest.push_str(&format!("{DATASET_MAGIC}\n"));
    manifest.push_str(&format!("config_hash = {config_hash}\n"));
    manifest.push_str(&format!("tool_version = {tool_version}\n"));
    manifest.push_str(&format!("master_seed = {}\n", meta.master_seed));
    manifest.push_str(&format!("n_frames = {}\n", meta.n_frames));
    manifest.push_str(&format!("n_channels = {}\n", meta.n_channels));
    manifest.push_str(&format!("frame_rate_hz = {}\n", meta.frame_rate_hz));
    manifest.push_str(&format!("n_dots = {}\n", meta.n_dots));
    manifest.push_str(&format!("field_size = {}\n", meta.field_size));
    manifest.push_str(&format!("dot_step = {}\n", meta.dot_step));
    manifest.push_str(&format!("record_floats = {record_floats}\n"));
    for (i, c) in meta.coherences.iter().enumerate() {
        manifest.push_str(&format!("coherence {i} = {c}\n"));
    }
    for (i, d) in meta.directions_rad.iter().enumerate() {
        manifest.push_str(&format!("direction {i} = {d}\n"));
    }
    for (name, ds) in splits {
        manifest.push_str(&format!(
            "split {name} file = {name}.bin records = {}\n",
            ds.len()
        ));
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;

    for (name, ds) in splits {
        let path = dir.join(format!("{name}.bin"));
        let mut file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut buf = Vec::with_capacity(ds.len() * record_floats * 4);
        for r in &ds.records {
            debug_assert_eq!(r.stream.len(), meta.n_frames * meta.n_channels);
            for v in &r.stream {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(r.label as f32).to_le_bytes());
            buf.extend_from_slice(&(r.condition as f32).to_le_bytes());
            buf.extend_from_slice(&r.coherence.to_le_bytes());
        }
        file.write_all(&buf).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: &str) -> Result<Dataset, StimulusError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|source| StimulusError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(DATASET_MAGIC) {
        return Err(StimulusError::Format("bad dataset magic".into()));
    }

    let mut meta = DatasetMeta {
        config_hash: String::new(),
        master_seed: 0,
        n_frames: 0,
        n_channels: 0,
        frame_rate_hz: 0.0,
        n_dots: 0,
        field_size: 0.0,
        dot_step: 0.0,
        coherences: Vec::new(),
        directions_rad: Vec::new(),
    };
    let mut record_floats = 0usize;
    let mut split_records: Option<usize> = None;
    let mut split_file = String::new();

    for line in lines {
        let bad = || StimulusError::Format(format!("bad manifest line: {line}"));
        if let Some((key, val)) = line.split_once(" = ") {
            let mut toks = key.split_whitespace();
            match toks.next() {
                Some("config_hash") => meta.config_hash = val.to_string(),
                Some("tool_version") => {}
                Some("master_seed") => meta.master_seed = val.parse().map_err(|_| bad())?,
                Some("n_frames") => meta.n_frames = val.parse().map_err(|_| bad())?,
                Some("n_channels") => meta.n_channels = val.parse().map_err(|_| bad())?,
                Some("frame_rate_hz") => meta.frame_rate_hz = val.parse().map_err(|_| bad())?,
                Some("n_dots") => meta.n_dots = val.parse().map_err(|_| bad())?,
                Some("field_size") => meta.field_size = val.parse().map_err(|_| bad())?,
                Some("dot_step") => meta.dot_step = val.parse().map_err(|_| bad())?,
                Some("record_floats") => record_floats = val.parse().map_err(|_| bad())?,
                Some("coherence") => meta.coherences.push(val.parse().map_err(|_| bad())?),
                Some("direction") => meta.directions_rad.push(val.parse().map_err(|_| bad())?),
                Some("split") => {
                    let name = toks.next().ok_or_else(bad)?;
                    if name == split {
                        // "split <name> file = <file>.bin records = <n>"
                        let (file, recs) = val
                            .split_once(" records = ")
                            .ok_or_else(bad)?;
                        split_file = file.trim().to_string();
                        split_records = Some(recs.trim().parse().map_err(|_| bad())?);
                    }
                }
                _ => return Err(bad()),
            }
        } else if !line.trim().is_empty() {
            return Err(bad());
        }
    }

    let n_records = split_records
        .ok_or_else(|| StimulusError::Format(format!("split `{split}` not in manifest")))?;
    let bin_path = dir.join(&split_file);
    let bytes = fs::read(&bin_path).map_err(|source| StimulusError::Io {
        path: bin_path.display().to_string(),
        source,
    })?;
    if bytes.len() != n_records * record_floats * 4 {
        return Err(StimulusError::Format(format!(
            "split `{split}`: expected {} bytes, found {}",
            n_records * record_floats * 4,
            bytes.len()
        )));
    }

    let stream_len = meta.n_frames * meta.n_channels;
    let mut records = Vec::with_capacity(n_records);
    for ri in 0..n_records {
        let base = ri * record_floats * 4;
        let mut floats = Vec::with_capacity(record_floats);
        for ci in 0..record_floats {
            let o = base + ci * 4;
            floats.push(f32::from_le_bytes([
                bytes[o],
                bytes[o + 1],
                bytes[o + 2],
                bytes[o + 3],
            ]));
        }
        let stream = floats[..stream_len].to_vec();
        records.push(TrialRecord {
            stream,
            label: floats[stream_len] as usize,
            condition: floats[stream_len + 1] as usize,
            coherence: floats[stream_len + 2],
        });
    }
    Ok(Dataset { meta, records })
}

/// The standard (coherence × direction) config grid.
pub fn config_grid(
    base: &RdmConfig,
    coherences: &[f32],
    directions: &[Direction],
) -> Vec<RdmConfig> {
    let mut out = Vec::with_capacity(coherences.len() * directions.len());
    for &c in coherences {
        for &d in directions {
            out.push(RdmConfig {
                coherence: c,
                direction: d,
                ..base.clone()
            });
        }
    }
    out
}
