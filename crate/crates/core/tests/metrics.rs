use cae_core::audio_io::write_wav;
use cae_core::audio_repr::{StftParams, Waveform};
use cae_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STFT: StftParams = StftParams { hop: 128, window_len: 512 };

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v, 16_000).unwrap()
}

fn white(len: usize, seed: u64, amp: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    wave((0..len).map(|_| rng.random_range(-amp..amp)).collect())
}

/// Direct evaluation of the SI-SDR definition.
fn si_sdr_oracle(s: &[f64], e: &[f64]) -> f64 {
    let dot: f64 = s.iter().zip(e).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|a| a * a).sum();
    let a = dot / ss;
    let num: f64 = s.iter().map(|x| (a * x).powi(2)).sum();
    let den: f64 = s.iter().zip(e).map(|(x, y)| (a * x - y).powi(2)).sum();
    10.0 * (num / den).log10()
}

#[test]
fn unit_truths() {
    let s = white(4000, 1, 1.0);
    assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CLAMP_DB);
    assert_eq!(si_sdr(&s, &wave(s.samples().iter().map(|v| 2.0 * v).collect())).unwrap(), SI_SDR_CLAMP_DB);

    // noise orthogonal to s with the same energy: Gram-Schmidt on an independent draw
    let n0 = white(4000, 2, 1.0);
    let ss: f64 = s.samples().iter().map(|v| v * v).sum();
    let proj: f64 = s.samples().iter().zip(n0.samples()).map(|(a, b)| a * b).sum::<f64>() / ss;
    let n: Vec<f64> = n0.samples().iter().zip(s.samples()).map(|(b, a)| b - proj * a).collect();
    let nn: f64 = n.iter().map(|v| v * v).sum();
    let k = (ss / nn).sqrt();
    let est = wave(s.samples().iter().zip(&n).map(|(a, b)| a + k * b).collect());
    assert!(si_sdr(&s, &est).unwrap().abs() < 1e-9);

    assert!(si_sdr(&wave(vec![0.0; 10]), &s.segment(0..10)).is_err());
    assert!(si_sdr(&s, &s.segment(0..10)).is_err());
}

#[test]
fn si_sdr_depends_only_on_the_angle() {
    // cos^2 = 1/2 in the first case, 1/5 in the second
    let s = wave(vec![1.0, 0.0, 0.0, 0.0]);
    let e = wave(vec![1.0, 1.0, 0.0, 0.0]);
    assert!(si_sdr(&s, &e).unwrap().abs() < 1e-12);
    let e = wave(vec![1.0, 2.0, 0.0, 0.0]);
    let want = 10.0 * (0.2f64 / 0.8).log10();
    assert!((si_sdr(&s, &e).unwrap() - want).abs() < 1e-12);
    assert!((si_sdr(&e, &s).unwrap() - want).abs() < 1e-12);
    assert!((want - si_sdr_oracle(s.samples(), e.samples())).abs() < 1e-12);
}

#[test]
fn lsd_reference_points() {
    let x = white(16_000, 3, 1.0);
    assert_eq!(log_spectral_distance(&x, &x, STFT).unwrap(), 0.0);
    // a pure gain shifts every unfloored bin by the same number of dB
    for g in [0.5, 2.0] {
        let y = wave(x.samples().iter().map(|v| g * v).collect());
        let d = log_spectral_distance(&x, &y, STFT).unwrap();
        assert!((d - 20.0 * f64::log10(g).abs()).abs() < 1e-9, "{g}: {d}");
    }
    // unit white noise sits near 10 log10(2 / 512) = -24 dB per bin, silence at the floor
    let silent = wave(vec![0.0; 16_000]);
    let d = log_spectral_distance(&x, &silent, STFT).unwrap();
    assert!((45.0..65.0).contains(&d), "{d}");

    let ds: Vec<f64> = (0..6)
        .map(|i| log_spectral_distance(&white(16_000, 10 + i, 1.0), &white(16_000, 100 + i, 1.0), STFT).unwrap())
        .collect();
    let mean = ds.iter().sum::<f64>() / ds.len() as f64;
    assert!(mean > 0.0);
    for d in &ds {
        assert!((d - mean).abs() <= 0.1 * mean, "{ds:?}");
    }
}

proptest! {
    #[test]
    fn si_sdr_scale_invariance(seed in any::<u64>(), c in 1e-3f64..1e3, mix in 0.01f64..2.0) {
        let s = white(512, seed, 1.0);
        let n = white(512, seed ^ 0xabc, 1.0);
        let e: Vec<f64> = s.samples().iter().zip(n.samples()).map(|(a, b)| a + mix * b).collect();
        let base = si_sdr(&s, &wave(e.clone())).unwrap();
        let scaled = si_sdr(&s, &wave(e.iter().map(|v| v * c).collect())).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
        prop_assert!((base - si_sdr_oracle(s.samples(), &e)).abs() < 1e-9);
    }

    #[test]
    fn lsd_is_symmetric_and_nonnegative(seed in any::<u64>(), amp in 1e-4f64..1.0) {
        let a = white(2048, seed, 1.0);
        let b = white(2048, seed.wrapping_add(1), amp);
        let ab = log_spectral_distance(&a, &b, STFT).unwrap();
        let ba = log_spectral_distance(&b, &a, STFT).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert_eq!(log_spectral_distance(&b, &b, STFT).unwrap(), 0.0);
    }
}

fn write(dir: &std::path::Path, name: &str, w: &Waveform) {
    write_wav(&dir.join(name), w, false).unwrap();
}

#[test]
fn identical_directories_clamp_high() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for i in 0..3 {
        let w = white(3000, i, 0.5);
        write(a.path(), &format!("{i}.wav"), &w);
        write(b.path(), &format!("{i}.wav"), &w);
    }
    let report = evaluate_directories(a.path(), b.path(), STFT).unwrap();
    assert_eq!(report.records.len(), 3);
    for r in &report.records {
        assert_eq!(r.si_sdr_db, Some(SI_SDR_CLAMP_DB));
        assert_eq!(r.lsd_db, Some(0.0));
        assert!(r.fad.is_none() && r.fad_clap.is_none() && r.visqol.is_none());
    }
    assert_eq!(report.aggregate.mean_si_sdr_db, Some(SI_SDR_CLAMP_DB));
}

#[test]
fn corrupted_and_unmatched_files_are_isolated() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write(a.path(), &format!("{i}.wav"), &white(3000, i, 0.5));
        write(b.path(), &format!("{i}.wav"), &white(3000, i + 10, 0.5));
    }
    std::fs::write(b.path().join("1.wav"), b"RIFF\x00\x00corrupt").unwrap();
    write(a.path(), "only_ref.wav", &white(3000, 9, 0.5));
    write(a.path(), "silent.wav", &wave(vec![0.0; 3000]));
    write(b.path(), "silent.wav", &white(3000, 8, 0.5));

    let report = evaluate_directories(a.path(), b.path(), STFT).unwrap();
    let names: Vec<&str> = report.records.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["0.wav", "1.wav", "2.wav", "silent.wav"]);
    assert_eq!(report.aggregate.unmatched, ["only_ref.wav"]);
    let broken = &report.records[1];
    assert!(broken.flag.is_some() && broken.si_sdr_db.is_none());
    let silent = &report.records[3];
    assert!(silent.si_sdr_db.is_none() && silent.lsd_db.is_some() && silent.flag.is_some());
    assert_eq!(report.aggregate.flagged, 2);

    // aggregates recomputed from the records
    let si: Vec<f64> = report.records.iter().filter_map(|r| r.si_sdr_db).collect();
    let lsd: Vec<f64> = report.records.iter().filter_map(|r| r.lsd_db).collect();
    assert_eq!(si.len(), 2);
    assert_eq!(lsd.len(), 3);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((report.aggregate.mean_si_sdr_db.unwrap() - mean(&si)).abs() < 1e-12);
    assert!((report.aggregate.mean_lsd_db.unwrap() - mean(&lsd)).abs() < 1e-12);
    assert!(si.iter().all(|v| v.is_finite()));

    let text = report.to_jsonl();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().starts_with("{\"aggregate\""));
    assert_eq!(EvalReport::from_jsonl(&text).unwrap(), report);
}

#[test]
fn model_driven_evaluation() {
    let a = tempfile::tempdir().unwrap();
    for i in 0..2 {
        write(a.path(), &format!("{i}.wav"), &white(3000, i, 0.5));
    }
    let report = evaluate_directory(a.path(), STFT, Some("abc".into()), |w| {
        Ok(wave(w.samples().iter().map(|v| 0.5 * v).collect()))
    })
    .unwrap();
    assert!(report.records.iter().all(|r| r.si_sdr_db == Some(SI_SDR_CLAMP_DB)));
    assert_eq!(report.aggregate.config_hash.as_deref(), Some("abc"));
    let out = a.path().join("report.jsonl");
    report.write(&out, false).unwrap();
    assert!(report.write(&out, false).is_err());
}
