//! Waveform to latents and back.
//!
//! Audio is cut into consecutive non-overlapping chunks of
//! [`Model::chunk_len`] samples (the last one zero-padded), each of which
//! encodes to `latent_frames` latent vectors. Decoding runs the consistency
//! function from pure noise at `sigma_max`, optionally re-noising and
//! re-applying it along a decreasing schedule.
//!
//! # Latent file layout
//!
//! All integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `L2LA` |
//! | 2 | format version (u16, currently 1) |
//! | 2 | `d_lat` (u16) |
//! | 2 | waveform samples per latent frame (u16) |
//! | 4 | sample rate (u32) |
//! | 8 | latent frame count `L` (u64) |
//! | 4·d_lat·L | f32 latents, frame-major |

use std::path::Path;

use cae_tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio_repr::{from_model_output, ComplexSpectrogram, Waveform};
use crate::fsutil::write_atomic;
use crate::metrics::{log_spectral_distance, si_sdr};
use crate::model::Model;
use crate::network::Params;
use crate::schedule::{t_to_sigma, ScheduleConfig};
use crate::{Error, Result};

pub const LATENT_MAGIC: [u8; 4] = *b"L2LA";
pub const LATENT_VERSION: u16 = 1;
const HEADER_LEN: usize = 22;

/// Chunks pushed through the network together.
const CHUNK_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub n_steps: usize,
    pub seed: u64,
    /// Decode with the EMA weights when the checkpoint has them.
    pub use_ema: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { n_steps: 1, seed: 0, use_ema: true }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("codec: n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evenly spaced `t = 1 - i / n` for `i < n`, mapped to noise levels.
pub fn sigma_schedule(n_steps: usize, sched: &ScheduleConfig) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    (0..n_steps).map(|i| t_to_sigma(1.0 - i as f64 / n_steps as f64, sched)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub n_steps: usize,
    pub seed: u64,
    pub sigma_schedule: Vec<f64>,
}

impl DecodeOptions {
    pub fn new(n_steps: usize, seed: u64, sched: &ScheduleConfig) -> Result<Self> {
        Ok(Self { n_steps, seed, sigma_schedule: sigma_schedule(n_steps, sched)? })
    }

    pub fn from_config(cfg: &CodecConfig, sched: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.n_steps, cfg.seed, sched)
    }

    pub fn validate(&self, sched: &ScheduleConfig) -> Result<()> {
        let s = &self.sigma_schedule;
        if self.n_steps == 0 || s.len() != self.n_steps {
            return Err(Error::Config(format!("{} noise levels for {} steps", s.len(), self.n_steps)));
        }
        if s[0] != sched.sigma_max {
            return Err(Error::Config(format!("decoding must start at sigma_max, schedule starts at {}", s[0])));
        }
        if s.iter().any(|&v| !(v >= sched.sigma_min && v <= sched.sigma_max)) {
            return Err(Error::Config("decode schedule leaves [sigma_min, sigma_max]".into()));
        }
        if s.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::Config("decode schedule must be strictly decreasing".into()));
        }
        Ok(())
    }
}

/// Latent vectors `[d_lat, L]` plus the framing needed to decode them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub latents: Tensor<f32>,
    pub samples_per_latent: u16,
    pub sample_rate: u32,
}

impl LatentSequence {
    pub fn d_lat(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d_lat = u16::try_from(self.d_lat()).map_err(|_| Error::Config("d_lat does not fit in u16".into()))?;
        let (d, l) = (self.d_lat(), self.frames());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * d * l);
        out.extend_from_slice(&LATENT_MAGIC);
        out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
        out.extend_from_slice(&d_lat.to_le_bytes());
        out.extend_from_slice(&self.samples_per_latent.to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(l as u64).to_le_bytes());
        let data = self.latents.data();
        for t in 0..l {
            for c in 0..d {
                out.extend_from_slice(&data[c * l + t].to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != LATENT_MAGIC {
            return Err(Error::Schema("not a latent file (bad magic bytes)".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != LATENT_VERSION {
            return Err(Error::Schema(format!("latent format version {version}, this build reads {LATENT_VERSION}")));
        }
        let d = u16_at(6) as usize;
        let samples_per_latent = u16_at(8);
        let sample_rate = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
        let l = u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes"));
        let body = &bytes[HEADER_LEN..];
        let expected = (d as u64).checked_mul(l).and_then(|n| n.checked_mul(4));
        if expected != Some(body.len() as u64) {
            return Err(Error::Schema(format!("latent payload is {} bytes, header implies {d} x {l} floats", body.len())));
        }
        let l = l as usize;
        let mut data = vec![0f32; d * l];
        for (i, b) in body.chunks_exact(4).enumerate() {
            let (t, c) = (i / d, i % d);
            data[c * l + t] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        Ok(Self { latents: Tensor::new([d, l], data), samples_per_latent, sample_rate })
    }
}

pub fn write_latents(path: &Path, lat: &LatentSequence, force: bool) -> Result<()> {
    write_atomic(path, &lat.to_bytes()?, force)
}

pub fn read_latents(path: &Path) -> Result<LatentSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LatentSequence::from_bytes(&bytes).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Deterministic latents of `w`; inputs longer than one chunk are split into
/// consecutive chunks and their latents concatenated.
pub fn encode_waveform(model: &Model, params: &Params<f32>, w: &Waveform) -> Result<LatentSequence> {
    let chunk = model.chunk_len();
    if w.sample_rate() != model.sample_rate {
        return Err(Error::Data(format!("input is {} Hz, model expects {} Hz", w.sample_rate(), model.sample_rate)));
    }
    if w.len() < chunk {
        return Err(Error::Length(format!("input has {} samples, at least one {chunk}-sample chunk is needed", w.len())));
    }
    let cfg = model.network.config();
    let (d, per_chunk) = (cfg.d_lat, cfg.latent_frames());
    let n_chunks = w.len().div_ceil(chunk);
    let weights = params.constants();
    let mut per: Vec<Tensor<f32>> = Vec::with_capacity(n_chunks);
    for start in (0..n_chunks).step_by(CHUNK_BATCH) {
        let end = (start + CHUNK_BATCH).min(n_chunks);
        let chunks: Vec<Waveform> = (start..end).map(|i| w.segment(i * chunk..(i + 1) * chunk)).collect();
        let x: Tensor<f32> = model.spectrogram_batch(&chunks)?.cast();
        let lat = model.network.encode(&weights, &Var::constant(x))?.value().clone();
        for b in 0..end - start {
            per.push(Tensor::new([d, per_chunk], lat.data()[b * d * per_chunk..(b + 1) * d * per_chunk].to_vec()));
        }
    }
    let total = n_chunks * per_chunk;
    let mut data = vec![0f32; d * total];
    for (i, t) in per.iter().enumerate() {
        for c in 0..d {
            data[c * total + i * per_chunk..c * total + (i + 1) * per_chunk]
                .copy_from_slice(&t.data()[c * per_chunk..(c + 1) * per_chunk]);
        }
    }
    let spl = u16::try_from(model.samples_per_latent()).map_err(|_| Error::Config("samples per latent exceed u16".into()))?;
    Ok(LatentSequence { latents: Tensor::new([d, total], data), samples_per_latent: spl, sample_rate: model.sample_rate })
}

/// Waveform of `chunks x chunk_len` samples, clipped to [-1, 1].
pub fn decode_latents(model: &Model, params: &Params<f32>, lat: &LatentSequence, opts: &DecodeOptions) -> Result<Waveform> {
    let sched = &model.schedule;
    opts.validate(sched)?;
    let cfg = model.network.config();
    let (d, per_chunk) = (cfg.d_lat, cfg.latent_frames());
    if lat.frames() == 0 {
        return Err(Error::Length("no latent frames to decode".into()));
    }
    if lat.d_lat() != d || lat.frames() % per_chunk != 0 {
        return Err(Error::shape(format!("latents [{d}, multiple of {per_chunk}]"), lat.latents.shape()));
    }
    if lat.sample_rate != model.sample_rate || lat.samples_per_latent as usize != model.samples_per_latent() {
        return Err(Error::Schema(format!(
            "latents are framed for {} Hz / {} samples per latent, model uses {} Hz / {}",
            lat.sample_rate,
            lat.samples_per_latent,
            model.sample_rate,
            model.samples_per_latent()
        )));
    }
    let (f, t) = (cfg.freq_bins, cfg.time_frames);
    let chunk = model.chunk_len();
    let total = lat.frames();
    let n_chunks = total / per_chunk;
    let weights = params.constants();
    let mut out = Vec::with_capacity(n_chunks * chunk);
    for start in (0..n_chunks).step_by(CHUNK_BATCH) {
        let end = (start + CHUNK_BATCH).min(n_chunks);
        let b = end - start;
        let mut lat_data = Vec::with_capacity(b * d * per_chunk);
        for i in start..end {
            for c in 0..d {
                lat_data.extend_from_slice(&lat.latents.data()[c * total + i * per_chunk..c * total + (i + 1) * per_chunk]);
            }
        }
        let y = model.network.decode_features(&weights, &Var::constant(Tensor::new([b, d, per_chunk], lat_data)))?;
        // one generator stream per chunk, so output does not depend on batching
        let mut rngs: Vec<ChaCha8Rng> = (start..end)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut draw = |scale: f64| -> Tensor<f32> {
            let mut z = Vec::with_capacity(b * 2 * f * t);
            for r in rngs.iter_mut() {
                z.extend((0..2 * f * t).map(|_| (scale * r.sample::<f64, _>(StandardNormal)) as f32));
            }
            Tensor::new([b, 2, f, t], z)
        };
        let mut x_hat: Option<Tensor<f32>> = None;
        for &sigma in &opts.sigma_schedule {
            let x = match x_hat.take() {
                None => draw(sigma),
                Some(mut prev) => {
                    prev.axpy(1.0, &draw((sigma * sigma - sched.sigma_min * sched.sigma_min).sqrt()));
                    prev
                }
            };
            let sigmas = vec![sigma; b];
            x_hat = Some(model.network.consistency_fn(&weights, &Var::constant(x), &sigmas, &y, sched)?.value().clone());
        }
        let x_hat: Tensor<f64> = x_hat.expect("at least one step").cast();
        for i in 0..b {
            let spec = Tensor::new([2, f, t], x_hat.data()[i * 2 * f * t..(i + 1) * 2 * f * t].to_vec());
            let s = ComplexSpectrogram::from_tensor(spec, true, model.stft, model.sample_rate, chunk)?;
            let wave = from_model_output(&s, &model.amplitude)?;
            out.extend(wave.samples().iter().map(|v| v.clamp(-1.0, 1.0)));
        }
    }
    Waveform::new(out, model.sample_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoundtripMetrics {
    /// `None` for a silent input.
    pub si_sdr_db: Option<f64>,
    pub lsd_db: f64,
}

/// Encodes and decodes `w`, trims the padding, and scores the result.
pub fn roundtrip(
    model: &Model,
    params: &Params<f32>,
    w: &Waveform,
    opts: &DecodeOptions,
) -> Result<(Waveform, RoundtripMetrics)> {
    let lat = encode_waveform(model, params, w)?;
    let out = decode_latents(model, params, &lat, opts)?.truncated(w.len());
    let si = match si_sdr(w, &out) {
        Ok(v) => Some(v),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    let lsd = log_spectral_distance(w, &out, model.stft)?;
    Ok((out, RoundtripMetrics { si_sdr_db: si, lsd_db: lsd }))
}
