//! WAV file input and output.
//!
//! Any integer PCM width and 32-bit float input is accepted; channels are
//! averaged down to mono. Output is mono 32-bit float.

use std::io::{BufReader, Cursor};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use rubato::audioadapter_buffers::direct::SequentialSliceOfVecs;
use rubato::{Fft, FixedSync, Resampler};

use crate::audio_repr::Waveform;
use crate::fsutil::write_atomic;
use crate::{Error, Result};

type FileReader = WavReader<BufReader<std::fs::File>>;

/// Header facts of a WAV file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioInfo {
    pub sample_rate: u32,
    pub channels: u16,
    /// Length in frames (samples per channel).
    pub frames: u64,
}

fn wav_err(path: &Path) -> impl Fn(hound::Error) -> Error + '_ {
    move |source| Error::Wav { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<FileReader> {
    WavReader::open(path).map_err(wav_err(path))
}

pub fn probe(path: &Path) -> Result<AudioInfo> {
    let r = open(path)?;
    let spec = r.spec();
    Ok(AudioInfo { sample_rate: spec.sample_rate, channels: spec.channels, frames: r.duration() as u64 })
}

/// Reads up to `frames` frames from the reader's current position and
/// downmixes them.
fn read_frames(r: &mut FileReader, path: &Path, frames: usize) -> Result<Vec<f64>> {
    let spec = r.spec();
    let ch = spec.channels as usize;
    let mut interleaved = Vec::with_capacity(frames * ch);
    match spec.sample_format {
        SampleFormat::Float => {
            for s in r.samples::<f32>().take(frames * ch) {
                interleaved.push(s.map_err(wav_err(path))? as f64);
            }
        }
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            for s in r.samples::<i32>().take(frames * ch) {
                interleaved.push(s.map_err(wav_err(path))? as f64 * scale);
            }
        }
    }
    let mono: Vec<f64> = interleaved.chunks_exact(ch).map(|f| f.iter().sum::<f64>() / ch as f64).collect();
    if let Some(i) = mono.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite sample at frame {i}", path.display())));
    }
    Ok(mono)
}

/// Reads a whole file as mono. A rate different from `expected` is an error
/// unless `resample` is set, in which case the audio is converted.
pub fn read_wav(path: &Path, expected: Option<u32>, resample: bool) -> Result<Waveform> {
    let mut r = open(path)?;
    let rate = r.spec().sample_rate;
    let frames = r.duration() as usize;
    let samples = read_frames(&mut r, path, frames)?;
    if samples.is_empty() {
        return Err(Error::Length(format!("{}: no audio frames", path.display())));
    }
    let w = Waveform::new(samples, rate)?;
    match expected {
        Some(want) if want != rate => {
            if resample {
                resample_to(&w, want)
            } else {
                Err(Error::SampleRate { path: path.to_path_buf(), found: rate, expected: want })
            }
        }
        _ => Ok(w),
    }
}

/// Reads `len` frames starting at frame `offset` without decoding the rest of
/// the file. Frames past the end are zero.
pub fn read_window(path: &Path, offset: u64, len: usize) -> Result<Vec<f64>> {
    let mut r = open(path)?;
    let total = r.duration() as u64;
    let mut out = if offset < total {
        r.seek(offset as u32).map_err(|e| Error::io(path, e))?;
        read_frames(&mut r, path, len)?
    } else {
        Vec::new()
    };
    out.resize(len, 0.0);
    Ok(out)
}

/// Band-limited conversion to `target` Hz. The output length is
/// `round(len * target / rate)`.
pub fn resample_to(w: &Waveform, target: u32) -> Result<Waveform> {
    if target == 0 {
        return Err(Error::Domain("target sample rate must be positive".into()));
    }
    if w.sample_rate() == target {
        return Ok(w.clone());
    }
    let input = vec![w.samples().to_vec()];
    let adapter = SequentialSliceOfVecs::new(&input, 1, w.len()).map_err(|e| Error::Data(e.to_string()))?;
    let mut rs = Fft::<f64>::new(w.sample_rate() as usize, target as usize, 1024, 1, FixedSync::Input)
        .map_err(|e| Error::Config(format!("resampler: {e}")))?;
    let out = rs.process_all(&adapter, w.len(), None).map_err(|e| Error::Data(format!("resampler: {e}")))?;
    let mut samples = out.take_data();
    let want = (w.len() as f64 * target as f64 / w.sample_rate() as f64).round() as usize;
    samples.resize(want.max(1), 0.0);
    Waveform::new(samples, target)
}

/// Encodes `w` as a mono 32-bit float WAV in memory.
pub fn wav_bytes(w: &Waveform) -> Result<Vec<u8>> {
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 32, sample_format: SampleFormat::Float };
    let mut buf = Cursor::new(Vec::new());
    let mut writer = WavWriter::new(&mut buf, spec).map_err(wav_err(Path::new("<memory>")))?;
    for &s in w.samples() {
        writer.write_sample(s as f32).map_err(wav_err(Path::new("<memory>")))?;
    }
    writer.finalize().map_err(wav_err(Path::new("<memory>")))?;
    Ok(buf.into_inner())
}

/// Writes `w` atomically; refuses to replace an existing file unless `force`.
pub fn write_wav(path: &Path, w: &Waveform, force: bool) -> Result<()> {
    write_atomic(path, &wav_bytes(w)?, force)
}

/// Writes 16-bit integer PCM, clipping to [-1, 1].
pub fn write_wav_i16(path: &Path, w: &Waveform, force: bool) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut buf = Cursor::new(Vec::new());
    let mut writer = WavWriter::new(&mut buf, spec).map_err(wav_err(path))?;
    for &s in w.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))?;
    write_atomic(path, &buf.into_inner(), force)
}
