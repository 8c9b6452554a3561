//! Objective reconstruction metrics.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_io::read_wav;
use crate::audio_repr::{stft, StftParams, Waveform};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

/// SI-SDR values are clamped to `[-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB]`.
pub const SI_SDR_CLAMP_DB: f64 = 100.0;

/// Log-magnitudes are floored at this level (dB relative to a full-scale sinusoid).
pub const LSD_FLOOR_DB: f64 = -80.0;

fn check_lengths(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::Length(format!(
            "reference has {} samples, estimate has {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The reference is projected onto the estimate's span: with
/// `a = <est, ref> / |ref|^2` the result is `10 log10(|a ref|^2 / |a ref - est|^2)`.
/// Invariant to positive rescaling of the estimate. The reference must not
/// be silent.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let (s, e) = (reference.samples(), estimate.samples());
    let ref_energy: f64 = s.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Domain("SI-SDR reference is all zeros".into()));
    }
    let alpha = s.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let residual: f64 = s.iter().zip(e).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    let db = if target == 0.0 {
        -SI_SDR_CLAMP_DB
    } else if residual == 0.0 {
        SI_SDR_CLAMP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Per-bin log-magnitudes in dB; 0 dB is the peak of a unit-amplitude
/// sinusoid centred on a bin.
fn log_magnitudes(w: &Waveform, params: StftParams) -> Result<Vec<f64>> {
    let s = stft(w, params)?;
    // inverse of the sinusoid peak |X| = sum(w) / (2 sqrt(n)) with sum(w) = n/2
    let to_amplitude = 4.0 / (params.window_len as f64).sqrt();
    let floor = 10f64.powf(LSD_FLOOR_DB / 20.0);
    let db = |m: f64| 20.0 * (m * to_amplitude).max(floor).log10();
    let mut out = Vec::with_capacity((s.freq_bins() + 1) * s.frames());
    for t in 0..s.frames() {
        let dc = s.coeff(0, t);
        out.push(db(dc.re.abs()));
        out.push(db(dc.im.abs()));
        for k in 1..s.freq_bins() {
            out.push(db(s.coeff(k, t).norm()));
        }
    }
    Ok(out)
}

/// Root-mean-square difference of floored log-magnitude spectrograms (dB).
pub fn log_spectral_distance(reference: &Waveform, estimate: &Waveform, params: StftParams) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let a = log_magnitudes(reference, params)?;
    let b = log_magnitudes(estimate, params)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(mse.sqrt())
}

/// Per-file evaluation result. The `fad`, `fad_clap` and `visqol` fields are
/// always null here; they exist so numbers from external tools can be merged
/// into the same records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub si_sdr_db: Option<f64>,
    pub lsd_db: Option<f64>,
    pub fad: Option<f64>,
    pub fad_clap: Option<f64>,
    pub visqol: Option<f64>,
    /// Why a metric is missing, if one is.
    pub flag: Option<String>,
}

impl FileRecord {
    fn flagged(name: String, flag: String) -> Self {
        Self { name, si_sdr_db: None, lsd_db: None, fad: None, fad_clap: None, visqol: None, flag: Some(flag) }
    }
}

/// Means over the files that produced each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub files: usize,
    pub flagged: usize,
    pub mean_si_sdr_db: Option<f64>,
    pub mean_lsd_db: Option<f64>,
    pub config_hash: Option<String>,
    /// Files present on only one side.
    pub unmatched: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<FileRecord>,
    pub aggregate: Aggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn new(mut records: Vec<FileRecord>, unmatched: Vec<String>, config_hash: Option<String>) -> Self {
        records.sort_by(|a, b| a.name.cmp(&b.name));
        let aggregate = Aggregate {
            files: records.len(),
            flagged: records.iter().filter(|r| r.flag.is_some()).count(),
            mean_si_sdr_db: mean(records.iter().filter_map(|r| r.si_sdr_db)),
            mean_lsd_db: mean(records.iter().filter_map(|r| r.lsd_db)),
            config_hash,
            unmatched,
        };
        Self { records, aggregate }
    }

    /// One JSON object per line: a `{"file": ...}` record per file, then
    /// a final `{"aggregate": ...}` record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::json!({ "file": r }).to_string());
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "aggregate": self.aggregate }).to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Schema(format!("report: {m}"));
        let mut records = Vec::new();
        let mut aggregate = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if let Some(r) = v.get_mut("file") {
                records.push(serde_json::from_value(r.take()).map_err(|e| bad(e.to_string()))?);
            } else if let Some(a) = v.get_mut("aggregate") {
                aggregate = Some(serde_json::from_value(a.take()).map_err(|e| bad(e.to_string()))?);
            } else {
                return Err(bad(format!("unrecognised record {line}")));
            }
        }
        Ok(Self { records, aggregate: aggregate.ok_or_else(|| bad("no aggregate record".into()))? })
    }

    pub fn write(&self, path: &Path, force: bool) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes(), force)
    }
}

/// Scores one reference/estimate pair; unusable inputs are flagged.
pub fn score_pair(name: String, reference: &Waveform, estimate: &Waveform, params: StftParams) -> FileRecord {
    let mut rec = FileRecord::flagged(name, String::new());
    rec.flag = None;
    let mut flags = Vec::new();
    match si_sdr(reference, estimate) {
        Ok(v) => rec.si_sdr_db = Some(v),
        Err(e) => flags.push(format!("si_sdr: {e}")),
    }
    match log_spectral_distance(reference, estimate, params) {
        Ok(v) => rec.lsd_db = Some(v),
        Err(e) => flags.push(format!("lsd: {e}")),
    }
    if !flags.is_empty() {
        rec.flag = Some(flags.join("; "));
    }
    rec
}

fn wav_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if path.is_file() && is_wav {
            names.insert(path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
        }
    }
    Ok(names)
}

/// Compares same-named WAV files of two directories.
pub fn evaluate_directories(ref_dir: &Path, est_dir: &Path, params: StftParams) -> Result<EvalReport> {
    let refs = wav_names(ref_dir)?;
    let ests = wav_names(est_dir)?;
    let unmatched: Vec<String> = refs.symmetric_difference(&ests).cloned().collect();
    for name in &unmatched {
        log::warn!("{name} has no counterpart; skipped");
    }
    let records = refs
        .intersection(&ests)
        .map(|name| {
            let pair = read_wav(&ref_dir.join(name), None, false)
                .and_then(|r| read_wav(&est_dir.join(name), Some(r.sample_rate()), false).map(|e| (r, e)));
            match pair {
                Ok((r, e)) => score_pair(name.clone(), &r, &e, params),
                Err(e) => FileRecord::flagged(name.clone(), e.to_string()),
            }
        })
        .collect();
    Ok(EvalReport::new(records, unmatched, None))
}

/// Scores every WAV file of `ref_dir` against `estimate(reference)`.
pub fn evaluate_directory(
    ref_dir: &Path,
    params: StftParams,
    config_hash: Option<String>,
    mut estimate: impl FnMut(&Waveform) -> Result<Waveform>,
) -> Result<EvalReport> {
    let records = wav_names(ref_dir)?
        .into_iter()
        .map(|name| match read_wav(&ref_dir.join(&name), None, false).and_then(|r| estimate(&r).map(|e| (r, e))) {
            Ok((r, e)) => score_pair(name, &r, &e, params),
            Err(e) => FileRecord::flagged(name, e.to_string()),
        })
        .collect();
    Ok(EvalReport::new(records, Vec::new(), config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        wave((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn perfect_match_is_clamped() {
        let s = noise(1000, 1);
        assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CLAMP_DB);
        let doubled = wave(s.samples().iter().map(|v| 2.0 * v).collect());
        assert_eq!(si_sdr(&s, &doubled).unwrap(), SI_SDR_CLAMP_DB);
    }

    #[test]
    fn orthogonal_equal_energy_noise_is_zero_db() {
        // s = [1, 1, 0, 0], n = [0, 0, 1, -1]: orthogonal, equal energy
        let s = wave(vec![1.0, 1.0, 0.0, 0.0]);
        let est = wave(vec![1.0, 1.0, 1.0, -1.0]);
        assert!(si_sdr(&s, &est).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let s = noise(512, 2);
        let n = noise(512, 3);
        let est = wave(s.samples().iter().zip(n.samples()).map(|(a, b)| a + 0.3 * b).collect());
        let base = si_sdr(&s, &est).unwrap();
        for c in [0.01, 0.5, 3.0, 1000.0] {
            let scaled = wave(est.samples().iter().map(|v| v * c).collect());
            assert!((si_sdr(&s, &scaled).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_role_is_not_interchangeable() {
        // For two nonzero signals the value depends only on the angle between
        // them, so the asymmetry lives in the degenerate cases: a silent
        // estimate scores the floor, a silent reference is rejected.
        let s = noise(64, 6);
        let z = wave(vec![0.0; 64]);
        assert_eq!(si_sdr(&s, &z).unwrap(), -SI_SDR_CLAMP_DB);
        assert!(si_sdr(&z, &s).is_err());
    }

    #[test]
    fn degenerate_inputs() {
        let z = wave(vec![0.0; 8]);
        let s = noise(8, 5);
        assert!(matches!(si_sdr(&z, &s), Err(Error::Domain(_))));
        assert_eq!(si_sdr(&s, &z).unwrap(), -SI_SDR_CLAMP_DB);
        assert!(matches!(si_sdr(&s, &noise(9, 5)), Err(Error::Length(_))));
    }

    #[test]
    fn lsd_identity_symmetry_and_floor() {
        let p = StftParams::with_hop(64);
        let a = noise(4096, 7);
        let b = noise(4096, 8);
        assert_eq!(log_spectral_distance(&a, &a, p).unwrap(), 0.0);
        let ab = log_spectral_distance(&a, &b, p).unwrap();
        let ba = log_spectral_distance(&b, &a, p).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-12);
        let silence = wave(vec![0.0; 4096]);
        let d = log_spectral_distance(&a, &silence, p).unwrap();
        // every bin of the silent estimate sits on the floor
        assert!(d > 30.0 && d < 80.0, "silence distance {d}");
    }

    #[test]
    fn lsd_between_independent_noises_is_stable() {
        // Monte-Carlo: 1 s of 16 kHz noise, several seed pairs
        let p = StftParams::with_hop(256);
        let values: Vec<f64> = (0..6)
            .map(|i| log_spectral_distance(&noise(16_000, 100 + i), &noise(16_000, 200 + i), p).unwrap())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for v in values {
            assert!(v > 0.0 && (v - mean).abs() <= 0.1 * mean, "{v} vs mean {mean}");
        }
    }
}
