//! Dataset scanning and multi-source chunk sampling.
//!
//! A source is a directory searched recursively for `.wav` files. Each
//! training chunk picks a source by weight, a file within it, and a uniform
//! window offset; only that window is decoded.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{probe, read_window, resample_to};
use crate::audio_repr::Waveform;
use crate::fsutil::write_atomic;
use crate::training::BatchSource;
use crate::{Error, Result};

/// Bumped whenever the cached index layout changes.
pub const INDEX_VERSION: u32 = 1;

/// Native-rate samples read on each side of a window before resampling.
const RESAMPLE_PAD: u64 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub path: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// How a file is chosen once its source is known.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Every file equally likely.
    #[default]
    PerFile,
    /// Files weighted by their number of valid window offsets.
    Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    /// Convert files at other sample rates instead of rejecting them.
    #[serde(default)]
    pub resample: bool,
    #[serde(default)]
    pub weighting: Weighting,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        for s in &self.sources {
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(Error::Config(format!("data: source {} has weight {}", s.path.display(), s.weight)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub sources: Vec<SourceConfig>,
    pub chunk_len: usize,
    pub sample_rate: u32,
    pub resample: bool,
    pub weighting: Weighting,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("dataset needs at least one source".into()));
        }
        if self.chunk_len == 0 || self.sample_rate == 0 {
            return Err(Error::Config("chunk_len and sample_rate must be positive".into()));
        }
        DataConfig { sources: self.sources.clone(), resample: self.resample, weighting: self.weighting }.validate()
    }

    /// Generator for a standalone sampling run.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub native_rate: u32,
    pub native_frames: u64,
    /// Length at the dataset sample rate.
    pub frames: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceIndex {
    pub root: PathBuf,
    pub weight: f64,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileIndex {
    pub version: u32,
    pub chunk_len: usize,
    pub sample_rate: u32,
    pub sources: Vec<SourceIndex>,
    /// Files that were found but cannot be used.
    pub skipped: Vec<Skipped>,
}

impl FileIndex {
    pub fn file_count(&self) -> usize {
        self.sources.iter().map(|s| s.files.len()).sum()
    }
}

fn is_audio(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn audio_files(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
        if entry.file_type().is_file() && is_audio(entry.path()) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

fn target_frames(native: u64, from: u32, to: u32) -> u64 {
    if from == to {
        native
    } else {
        (native as f64 * to as f64 / from as f64).round() as u64
    }
}

/// Lists every usable file of every source. Undecodable, too-short and
/// (without `resample`) wrong-rate files are logged and recorded in
/// `skipped`; a source left with no files is an error.
pub fn scan(spec: &DatasetSpec) -> Result<FileIndex> {
    spec.validate()?;
    let mut sources = Vec::with_capacity(spec.sources.len());
    let mut skipped = Vec::new();
    for src in &spec.sources {
        let mut files = Vec::new();
        for path in audio_files(&src.path)? {
            let mut skip = |reason: String| {
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push(Skipped { path: path.clone(), reason });
            };
            let info = match probe(&path) {
                Ok(i) => i,
                Err(e) => {
                    skip(format!("unreadable ({e})"));
                    continue;
                }
            };
            if info.sample_rate != spec.sample_rate && !spec.resample {
                skip(format!("sample rate {} Hz, expected {} Hz", info.sample_rate, spec.sample_rate));
                continue;
            }
            let frames = target_frames(info.frames, info.sample_rate, spec.sample_rate);
            if frames < spec.chunk_len as u64 {
                skip(format!("{frames} samples, shorter than one {}-sample chunk", spec.chunk_len));
                continue;
            }
            files.push(FileEntry { path: path.clone(), native_rate: info.sample_rate, native_frames: info.frames, frames });
        }
        if files.is_empty() {
            return Err(Error::Data(format!("source {} has no usable audio files", src.path.display())));
        }
        sources.push(SourceIndex { root: src.path.clone(), weight: src.weight, files });
    }
    Ok(FileIndex { version: INDEX_VERSION, chunk_len: spec.chunk_len, sample_rate: spec.sample_rate, sources, skipped })
}

/// Hash of everything a scan depends on: settings plus each file's path,
/// size and modification time.
pub fn content_key(spec: &DatasetSpec) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!("v{INDEX_VERSION};{};{};{}", spec.chunk_len, spec.sample_rate, spec.resample).as_bytes());
    for src in &spec.sources {
        h.update(format!("source {};", src.path.display()).as_bytes());
        for path in audio_files(&src.path)? {
            let meta = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            let mtime = meta
                .modified()
                .ok()
                .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
                .map_or(0, |d| d.as_nanos());
            h.update(format!("{};{};{mtime};", path.display(), meta.len()).as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// [`scan`] backed by an index file in `cache_dir`, reused while the
/// directory contents are unchanged.
pub fn scan_cached(spec: &DatasetSpec, cache_dir: &Path) -> Result<FileIndex> {
    let key = content_key(spec)?;
    let path = cache_dir.join(format!("index_v{INDEX_VERSION}_{}.json", &key[..16]));
    if let Ok(text) = std::fs::read_to_string(&path) {
        match serde_json::from_str::<FileIndex>(&text) {
            Ok(idx) if idx.version == INDEX_VERSION => return Ok(idx),
            _ => log::warn!("ignoring stale dataset index {}", path.display()),
        }
    }
    let idx = scan(spec)?;
    let text = serde_json::to_string_pretty(&idx).expect("index serialises");
    write_atomic(&path, text.as_bytes(), true)?;
    Ok(idx)
}

/// Where one chunk comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLocation {
    pub source: usize,
    pub file: usize,
    /// Start sample at the dataset rate.
    pub offset: u64,
}

/// Chooses source, file and offset for `n` chunks.
pub fn draw_locations<R: Rng + ?Sized>(
    index: &FileIndex,
    weighting: Weighting,
    rng: &mut R,
    n: usize,
) -> Result<Vec<ChunkLocation>> {
    let by_source = WeightedIndex::new(index.sources.iter().map(|s| s.weight))
        .map_err(|e| Error::Config(format!("source weights: {e}")))?;
    let chunk = index.chunk_len as u64;
    let per_file: Vec<Option<WeightedIndex<f64>>> = match weighting {
        Weighting::PerFile => vec![None; index.sources.len()],
        Weighting::Duration => index
            .sources
            .iter()
            .map(|s| WeightedIndex::new(s.files.iter().map(|f| (f.frames - chunk + 1) as f64)).ok())
            .collect(),
    };
    Ok((0..n)
        .map(|_| {
            let source = by_source.sample(rng);
            let files = &index.sources[source].files;
            let file = match &per_file[source] {
                Some(d) => d.sample(rng),
                None => rng.random_range(0..files.len()),
            };
            let offset = rng.random_range(0..=files[file].frames - chunk);
            ChunkLocation { source, file, offset }
        })
        .collect())
}

/// Decodes the chunk at `loc`, resampling when the file is at another rate.
pub fn load_chunk(index: &FileIndex, loc: ChunkLocation) -> Result<Waveform> {
    let entry = &index.sources[loc.source].files[loc.file];
    let len = index.chunk_len;
    if entry.native_rate == index.sample_rate {
        return Waveform::new(read_window(&entry.path, loc.offset, len)?, index.sample_rate);
    }
    let ratio = entry.native_rate as f64 / index.sample_rate as f64;
    let start = (loc.offset as f64 * ratio).floor() as u64;
    let pad = start.min(RESAMPLE_PAD);
    let native_len = (len as f64 * ratio).ceil() as u64 + pad + RESAMPLE_PAD;
    let native = Waveform::new(read_window(&entry.path, start - pad, native_len as usize)?, entry.native_rate)?;
    let converted = resample_to(&native, index.sample_rate)?;
    let skip = (pad as f64 / ratio).round() as usize;
    Ok(converted.segment(skip..skip + len))
}

pub fn sample_batch<R: Rng + ?Sized>(
    index: &FileIndex,
    spec: &DatasetSpec,
    rng: &mut R,
    batch_size: usize,
) -> Result<Vec<Waveform>> {
    draw_locations(index, spec.weighting, rng, batch_size)?.into_iter().map(|loc| load_chunk(index, loc)).collect()
}

/// A scanned dataset used as a training batch source.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub index: FileIndex,
}

impl Dataset {
    pub fn open(spec: DatasetSpec, cache_dir: Option<&Path>) -> Result<Self> {
        let index = match cache_dir {
            Some(dir) => scan_cached(&spec, dir)?,
            None => scan(&spec)?,
        };
        Ok(Self { spec, index })
    }
}

impl BatchSource for Dataset {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Waveform>> {
        sample_batch(&self.index, &self.spec, rng, batch_size)
    }
}

/// Clips held in memory; each chunk is a uniform window of a uniformly
/// chosen clip.
#[derive(Clone, Debug)]
pub struct ClipSource {
    clips: Vec<Waveform>,
    chunk_len: usize,
}

impl ClipSource {
    pub fn new(clips: Vec<Waveform>, chunk_len: usize) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("no clips".into()));
        }
        if let Some(c) = clips.iter().find(|c| c.len() < chunk_len) {
            return Err(Error::Length(format!("clip of {} samples is shorter than a chunk", c.len())));
        }
        Ok(Self { clips, chunk_len })
    }
}

impl BatchSource for ClipSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Waveform>> {
        Ok((0..batch_size)
            .map(|_| {
                let clip = &self.clips[rng.random_range(0..self.clips.len())];
                let start = rng.random_range(0..=clip.len() - self.chunk_len);
                clip.segment(start..start + self.chunk_len)
            })
            .collect())
    }
}
