//! Expert demonstrations: closed-loop collection, the on-disk dataset
//! format and batch sampling of `(f_t, f_{t-1}, n_t, a_t)` tuples.
//!
//! Directory layout (version 1):
//!
//! ```text
//! manifest.json            DatasetManifest, pretty JSON
//! <episode id>/actions.log one JSON Record per line, ticks increasing
//! <episode id>/frames/<tick:06>.png   (format = png)
//! <episode id>/frames.raw            (format = raw: ticks × H × W × 3 bytes)
//! ```
//!
//! Every file of an episode is listed in the manifest with its SHA-256.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use bid_tensor::checkpoint::hex_digest;
use bid_tensor::Tensor;
use laneworld::{next_command, render, Action, Density, DrivingEvent, Expert, Mode, NavCommand, Weather, World};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FrameFormat, RunConfig};

pub const DATASET_VERSION: u32 = 1;
pub const TICK_HZ: u32 = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("corrupt dataset file {file}: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("dataset error: {0}")]
    Invalid(String),
    #[error("empty dataset split")]
    Empty,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io { path: path.display().to_string(), reason: e.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// One tick: the command shown, the expert's (clean) action used as label,
/// and whether the executed action was perturbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub tick: u64,
    pub command: NavCommand,
    pub steer: f64,
    pub accel: f64,
    pub perturbed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: String,
    pub split: Split,
    pub route_id: u64,
    pub route_lanes: usize,
    pub weather: Weather,
    pub density: Density,
    pub jaywalkers: usize,
    pub seed: u64,
    pub ticks: usize,
    /// The expert committed at least one infraction.
    pub flagged: bool,
    /// The episode stopped before the simulator declared it done.
    pub partial: bool,
    pub events: Vec<DrivingEvent>,
    /// File name relative to the dataset root → SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub tick_hz: u32,
    pub format: FrameFormat,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: Vec<EpisodeMeta>,
    /// Episodes collected but left out (flagged or failed), with the reason.
    pub dropped: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub records: Vec<Record>,
    /// Interleaved RGB8 frames, one per record.
    pub frames: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn width(&self) -> usize {
        self.manifest.width
    }

    pub fn height(&self) -> usize {
        self.manifest.height
    }

    /// `(episode, record)` keys of a split in storage order.
    pub fn keys(&self, split: Split) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.meta.split == split)
            .flat_map(|(i, e)| (0..e.records.len()).map(move |j| (i, j)))
            .collect()
    }

    pub fn len(&self, split: Split) -> usize {
        self.episodes.iter().filter(|e| e.meta.split == split).map(|e| e.records.len()).sum()
    }

    /// Frame and predecessor of a record; the first tick is its own predecessor.
    pub fn frame_pair(&self, key: (usize, usize)) -> (&[u8], &[u8]) {
        let e = &self.episodes[key.0];
        (&e.frames[key.1], &e.frames[key.1.saturating_sub(1)])
    }

    /// Training and held-out splits share no episode and no route.
    pub fn check_no_leakage(&self) -> Result<(), DataError> {
        let mut seen: BTreeMap<u64, Split> = BTreeMap::new();
        let mut ids = BTreeMap::new();
        for e in &self.episodes {
            if let Some(s) = seen.insert(e.meta.route_id, e.meta.split) {
                if s != e.meta.split {
                    return Err(DataError::Invalid(format!("route {} appears in both splits", e.meta.route_id)));
                }
            }
            if ids.insert(e.meta.id.clone(), ()).is_some() {
                return Err(DataError::Invalid(format!("duplicate episode id {}", e.meta.id)));
            }
        }
        Ok(())
    }
}

// ---- collection ---------------------------------------------------------------

/// Steering perturbation with a triangular profile, so the expert label
/// shows how to recover from off-centre states.
struct Perturbation {
    left: usize,
    len: usize,
    sign: f64,
}

/// Executed action under the active perturbations; the label stays clean.
fn perturb(label: Action, steer: &mut Option<Perturbation>, brake: &mut usize, peak: f64) -> (Action, bool) {
    let mut a = label;
    let mut on = false;
    if let Some(p) = steer {
        let phase = (p.len - p.left) as f64 / p.len as f64;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        a.steer += p.sign * peak * tri;
        on = true;
        p.left -= 1;
        if p.left == 0 {
            *steer = None;
        }
    }
    if *brake > 0 {
        a.accel = -1.0;
        on = true;
        *brake -= 1;
    }
    (a.clamped(), on)
}

/// Runs the expert closed loop on one scenario and records every tick.
pub fn collect_episode(cfg: &RunConfig, meta: EpisodeMeta, rng: &mut ChaCha8Rng) -> Result<Episode, String> {
    let d = &cfg.data;
    let scenario = cfg.scenario(meta.route_id, meta.route_lanes, meta.density, meta.weather, Mode::Train, meta.jaywalkers);
    let mut w = World::spawn(&scenario, meta.seed).map_err(|e| e.to_string())?;
    let mut expert = Expert::new();
    let mut records = Vec::new();
    let mut frames = Vec::new();
    let mut noise: Option<Perturbation> = None;
    let mut brake = 0usize;
    let cap = w.time_limit_ticks + 10;
    while !w.is_done() && w.tick < cap {
        let frame = render(&w);
        let command = next_command(&w).command;
        let label = expert.act(&w);
        if noise.is_none() && d.noise_prob > 0.0 && rng.random::<f64>() < d.noise_prob {
            let len = rng.random_range(d.noise_ticks[0]..=d.noise_ticks[1]);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            noise = Some(Perturbation { left: len, len, sign });
        }
        if brake == 0 && d.brake_prob > 0.0 && rng.random::<f64>() < d.brake_prob {
            brake = rng.random_range(d.brake_ticks[0]..=d.brake_ticks[1]);
        }
        let (executed, perturbed) = perturb(label, &mut noise, &mut brake, d.noise_steer);
        records.push(Record { tick: w.tick, command, steer: label.steer, accel: label.accel, perturbed });
        frames.push(frame.rgb);
        w.step(executed);
    }
    let mut meta = meta;
    meta.ticks = records.len();
    meta.flagged = w.events.iter().any(|e| e.kind.is_infraction());
    meta.partial = !w.is_done();
    meta.events = w.events.clone();
    Ok(Episode { meta, records, frames })
}

fn blank_meta(id: String, split: Split, route_id: u64, lanes: usize, weather: Weather, density: Density, jaywalkers: usize, seed: u64) -> EpisodeMeta {
    EpisodeMeta {
        id,
        split,
        route_id,
        route_lanes: lanes,
        weather,
        density,
        jaywalkers,
        seed,
        ticks: 0,
        flagged: false,
        partial: false,
        events: Vec::new(),
        files: BTreeMap::new(),
    }
}

/// Collects `data.episodes` training and `data.held_out_episodes` held-out
/// episodes. Training routes start at `data.route_offset` and cycle the
/// training weathers; held-out routes follow them and use the held-out
/// weathers. Flagged or partial episodes are replaced by the next route
/// unless `keep_flagged` is set (at most three attempts per kept episode).
pub fn collect_episodes(cfg: &RunConfig, seed: u64) -> Result<Dataset, DataError> {
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut dropped = Vec::new();
    let mut route = d.route_offset;
    for (split, n, weathers) in [(Split::Train, d.episodes, &d.weathers), (Split::HeldOut, d.held_out_episodes, &d.held_out_weathers)] {
        let mut kept = 0;
        let mut attempts = 0;
        while kept < n {
            if attempts >= 3 * n.max(1) {
                return Err(DataError::Invalid(format!("only {kept} of {n} {split:?} episodes were clean after {attempts} attempts")));
            }
            attempts += 1;
            let weather = weathers[(route as usize) % weathers.len()];
            let jay = usize::from(d.jaywalker_fraction > 0.0 && rng.random::<f64>() < d.jaywalker_fraction);
            let ep_seed = rng.random::<u64>();
            let tag = if split == Split::Train { "train" } else { "heldout" };
            let id = format!("{tag}_{route:06}");
            let meta = blank_meta(id.clone(), split, route, d.route_lanes, weather, d.density, jay, ep_seed);
            route += 1;
            let mut ep_rng = ChaCha8Rng::seed_from_u64(ep_seed);
            match collect_episode(cfg, meta, &mut ep_rng) {
                Err(e) => dropped.push((id, format!("simulator: {e}"))),
                Ok(ep) if ep.records.is_empty() => dropped.push((id, "no ticks recorded".into())),
                Ok(ep) if (ep.meta.flagged || ep.meta.partial) && !d.keep_flagged => {
                    let kinds: Vec<_> = ep.meta.events.iter().filter(|e| e.kind.is_infraction()).map(|e| e.kind.name()).collect();
                    let why = if ep.meta.partial { "partial".to_string() } else { format!("flagged: {}", kinds.join(",")) };
                    dropped.push((id, why));
                }
                Ok(ep) => {
                    episodes.push(ep);
                    kept += 1;
                }
            }
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        width: cfg.sim.render.width,
        height: cfg.sim.render.height,
        tick_hz: TICK_HZ,
        format: d.format,
        seed,
        config_hash: cfg.hash(),
        episodes: episodes.iter().map(|e| e.meta.clone()).collect(),
        dropped,
    };
    Ok(Dataset { manifest, episodes })
}

// ---- storage --------------------------------------------------------------------

fn encode_png(rgb: &[u8], w: usize, h: usize) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

fn decode_png(bytes: &[u8], w: usize, h: usize, file: &str) -> Result<Vec<u8>, DataError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Corrupt { file: file.into(), reason: e.to_string() })?
        .to_rgb8();
    if img.width() as usize != w || img.height() as usize != h {
        return Err(DataError::Corrupt { file: file.into(), reason: format!("frame is {}x{}, expected {w}x{h}", img.width(), img.height()) });
    }
    Ok(img.into_raw())
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<(), DataError> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    files.insert(rel.to_string(), hex_digest(bytes));
    Ok(())
}

fn frame_name(id: &str, tick: u64) -> String {
    format!("{id}/frames/{tick:06}.png")
}

/// Writes the dataset under `root` and returns the manifest with file hashes filled in.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<DatasetManifest, DataError> {
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let (w, h) = (ds.width(), ds.height());
    let mut manifest = ds.manifest.clone();
    manifest.episodes.clear();
    for ep in &ds.episodes {
        let mut meta = ep.meta.clone();
        meta.ticks = ep.records.len();
        meta.files.clear();
        let mut log = Vec::new();
        for r in &ep.records {
            serde_json::to_writer(&mut log, r).map_err(|e| DataError::Invalid(e.to_string()))?;
            log.push(b'\n');
        }
        write_file(root, &format!("{}/actions.log", meta.id), &log, &mut meta.files)?;
        match manifest.format {
            FrameFormat::Png => {
                for (r, f) in ep.records.iter().zip(&ep.frames) {
                    write_file(root, &frame_name(&meta.id, r.tick), &encode_png(f, w, h), &mut meta.files)?;
                }
            }
            FrameFormat::Raw => {
                let raw: Vec<u8> = ep.frames.concat();
                write_file(root, &format!("{}/frames.raw", meta.id), &raw, &mut meta.files)?;
            }
        }
        manifest.episodes.push(meta);
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Invalid(e.to_string()))?;
    let path = root.join("manifest.json");
    let mut f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, DataError> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Corrupt { file: "manifest.json".into(), reason: e.to_string() })?;
    if m.version != DATASET_VERSION {
        return Err(DataError::Invalid(format!("dataset version {} is not supported (expected {DATASET_VERSION})", m.version)));
    }
    Ok(m)
}

fn read_checked(root: &Path, rel: &str, files: &BTreeMap<String, String>) -> Result<Vec<u8>, DataError> {
    let want = files.get(rel).ok_or_else(|| DataError::Corrupt { file: rel.into(), reason: "not listed in manifest".into() })?;
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    if &hex_digest(&bytes) != want {
        return Err(DataError::Corrupt { file: rel.into(), reason: "hash mismatch".into() });
    }
    Ok(bytes)
}

/// Reads and verifies a dataset; every file must match its manifest hash and
/// every stored action must lie in [-1, 1].
pub fn read_dataset(root: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(root)?;
    let (w, h) = (manifest.width, manifest.height);
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for meta in &manifest.episodes {
        let rel = format!("{}/actions.log", meta.id);
        let log = read_checked(root, &rel, &meta.files)?;
        let text = String::from_utf8(log).map_err(|e| DataError::Corrupt { file: rel.clone(), reason: e.to_string() })?;
        let mut records = Vec::with_capacity(meta.ticks);
        for (i, line) in text.lines().enumerate() {
            let r: Record = serde_json::from_str(line).map_err(|e| DataError::Corrupt { file: rel.clone(), reason: format!("line {}: {e}", i + 1) })?;
            if !(r.steer.abs() <= 1.0 && r.accel.abs() <= 1.0) {
                return Err(DataError::Corrupt { file: rel.clone(), reason: format!("tick {} action out of range", r.tick) });
            }
            if records.last().is_some_and(|p: &Record| p.tick >= r.tick) {
                return Err(DataError::Corrupt { file: rel.clone(), reason: format!("tick {} not increasing", r.tick) });
            }
            records.push(r);
        }
        if records.len() != meta.ticks {
            return Err(DataError::Corrupt { file: rel, reason: format!("{} records, manifest says {}", records.len(), meta.ticks) });
        }
        let frames = match manifest.format {
            FrameFormat::Png => records
                .iter()
                .map(|r| {
                    let name = frame_name(&meta.id, r.tick);
                    decode_png(&read_checked(root, &name, &meta.files)?, w, h, &name)
                })
                .collect::<Result<Vec<_>, _>>()?,
            FrameFormat::Raw => {
                let name = format!("{}/frames.raw", meta.id);
                let raw = read_checked(root, &name, &meta.files)?;
                if raw.len() != records.len() * w * h * 3 {
                    return Err(DataError::Corrupt { file: name, reason: "size does not match tick count".into() });
                }
                raw.chunks(w * h * 3).map(|c| c.to_vec()).collect()
            }
        };
        episodes.push(Episode { meta: meta.clone(), records, frames });
    }
    let ds = Dataset { manifest, episodes };
    ds.check_no_leakage()?;
    Ok(ds)
}

// ---- batching ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 3, H, W)` in [0, 1].
    pub frames: Tensor<f32>,
    pub prev: Tensor<f32>,
    /// `(B, 4)` one-hot commands.
    pub commands: Tensor<f32>,
    /// `(B, 2)` expert actions.
    pub targets: Tensor<f32>,
    pub keys: Vec<(usize, usize)>,
}

/// Assembles a batch. `jitter` applies one per-channel gain in `[1 - j, 1 + j]`
/// to both frames of each sample.
pub fn make_batch(ds: &Dataset, keys: &[(usize, usize)], jitter: Option<(f64, &mut ChaCha8Rng)>) -> Batch {
    let (w, h) = (ds.width(), ds.height());
    let hw = w * h;
    let n = keys.len();
    let mut frames = vec![0f32; n * 3 * hw];
    let mut prev = vec![0f32; n * 3 * hw];
    let mut commands = vec![0f32; n * 4];
    let mut targets = vec![0f32; n * 2];
    let mut jitter = jitter;
    for (b, &key) in keys.iter().enumerate() {
        let gains: [f32; 3] = match &mut jitter {
            Some((j, rng)) if *j > 0.0 => std::array::from_fn(|_| (1.0 + rng.random_range(-*j..=*j)) as f32),
            _ => [1.0; 3],
        };
        let (f, p) = ds.frame_pair(key);
        for (dst, src) in [(&mut frames, f), (&mut prev, p)] {
            let out = &mut dst[b * 3 * hw..(b + 1) * 3 * hw];
            for pix in 0..hw {
                for c in 0..3 {
                    out[c * hw + pix] = (src[3 * pix + c] as f32 / 255.0 * gains[c]).min(1.0);
                }
            }
        }
        let r = &ds.episodes[key.0].records[key.1];
        commands[b * 4 + r.command.index()] = 1.0;
        targets[b * 2] = r.steer as f32;
        targets[b * 2 + 1] = r.accel as f32;
    }
    let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("batch shapes agree");
    Batch {
        frames: t(vec![n, 3, h, w], frames),
        prev: t(vec![n, 3, h, w], prev),
        commands: t(vec![n, 4], commands),
        targets: t(vec![n, 2], targets),
        keys: keys.to_vec(),
    }
}

/// One epoch over a split: a fresh uniform permutation cut into batches; the
/// last batch may be short.
pub struct EpochSampler {
    order: Vec<(usize, usize)>,
    batch: usize,
    pos: usize,
}

impl EpochSampler {
    pub fn new(ds: &Dataset, split: Split, batch: usize, rng: &mut impl Rng) -> Result<Self, DataError> {
        if batch == 0 {
            return Err(DataError::Invalid("batch size must be positive".into()));
        }
        let mut order = ds.keys(split);
        if order.is_empty() {
            return Err(DataError::Empty);
        }
        order.shuffle(rng);
        Ok(EpochSampler { order, batch, pos: 0 })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl Iterator for EpochSampler {
    type Item = Vec<(usize, usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

/// `batch_size` distinct training records drawn uniformly.
pub fn sample_batch(ds: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Result<Batch, DataError> {
    let keys = ds.keys(Split::Train);
    if keys.is_empty() {
        return Err(DataError::Empty);
    }
    if batch_size > keys.len() {
        return Err(DataError::Invalid(format!("batch of {batch_size} from {} records", keys.len())));
    }
    let picked: Vec<_> = keys.choose_multiple(rng, batch_size).copied().collect();
    Ok(make_batch(ds, &picked, None))
}

pub fn default_dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}
