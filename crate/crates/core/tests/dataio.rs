use std::path::Path;

use cae_core::audio_io::write_wav;
use cae_core::audio_repr::Waveform;
use cae_core::dataio::*;
use cae_core::training::BatchSource;
use cae_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATE: u32 = 16_000;
const CHUNK: usize = 608;

fn ramp(len: usize, rate: u32, tag: f64) -> Waveform {
    // distinct, recognisable content: sample i holds tag + i * 1e-6
    Waveform::new((0..len).map(|i| tag + i as f64 * 1e-6).collect(), rate).unwrap()
}

fn write(path: &Path, w: &Waveform) {
    write_wav(path, w, false).unwrap();
}

fn spec(sources: &[(&Path, f64)]) -> DatasetSpec {
    DatasetSpec {
        sources: sources.iter().map(|(p, w)| SourceConfig { path: p.to_path_buf(), weight: *w }).collect(),
        chunk_len: CHUNK,
        sample_rate: RATE,
        resample: false,
        weighting: Weighting::PerFile,
        seed: 1,
    }
}

#[test]
fn scan_filters_short_files_and_recurses() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("a/b")).unwrap();
    write(&root.join("one.wav"), &ramp(1000, RATE, 0.1));
    write(&root.join("a/two.wav"), &ramp(CHUNK, RATE, 0.2));
    write(&root.join("a/b/three.WAV"), &ramp(5000, RATE, 0.3));
    write(&root.join("a/short.wav"), &ramp(CHUNK - 1, RATE, 0.4));
    std::fs::write(root.join("readme.txt"), "not audio").unwrap();

    let s = spec(&[(root, 1.0)]);
    let idx = scan(&s).unwrap();
    assert_eq!(idx.file_count(), 3);
    assert_eq!(idx.skipped.len(), 1);
    assert!(idx.skipped[0].path.ends_with("short.wav"));
    assert_eq!(scan(&s).unwrap(), idx);
}

#[test]
fn undecodable_and_wrong_rate_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("good.wav"), &ramp(1000, RATE, 0.1));
    write(&dir.path().join("fast.wav"), &ramp(3000, 48_000, 0.1));
    std::fs::write(dir.path().join("broken.wav"), b"RIFF....garbage").unwrap();
    let mut s = spec(&[(dir.path(), 1.0)]);
    let idx = scan(&s).unwrap();
    assert_eq!(idx.file_count(), 1);
    assert_eq!(idx.skipped.len(), 2);

    s.resample = true;
    let idx = scan(&s).unwrap();
    assert_eq!(idx.file_count(), 2);
    let fast = idx.sources[0].files.iter().find(|f| f.path.ends_with("fast.wav")).unwrap();
    assert_eq!(fast.frames, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in sample_batch(&idx, &s, &mut rng, 8).unwrap() {
        assert_eq!(chunk.len(), CHUNK);
        assert_eq!(chunk.sample_rate(), RATE);
    }
}

#[test]
fn empty_source_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("short.wav"), &ramp(10, RATE, 0.1));
    assert!(matches!(scan(&spec(&[(dir.path(), 1.0)])), Err(Error::Data(_))));
    assert!(scan(&spec(&[])).is_err());
    assert!(scan(&spec(&[(&dir.path().join("missing"), 1.0)])).is_err());
    assert!(scan(&spec(&[(dir.path(), 0.0)])).is_err());
}

fn two_sources() -> (tempfile::TempDir, DatasetSpec) {
    let dir = tempfile::tempdir().unwrap();
    for (s, tag) in [("s0", 0.1), ("s1", 0.5)] {
        let d = dir.path().join(s);
        std::fs::create_dir_all(&d).unwrap();
        for f in 0..3 {
            write(&d.join(format!("{f}.wav")), &ramp(CHUNK + 200 * f, RATE, tag + 0.1 * f as f64));
        }
    }
    let spec = spec(&[(&dir.path().join("s0"), 1.0), (&dir.path().join("s1"), 1.0)]);
    (dir, spec)
}

#[test]
fn equal_weights_give_binomial_source_counts() {
    let (_dir, s) = two_sources();
    let idx = scan(&s).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10_000;
        let locs = draw_locations(&idx, Weighting::PerFile, &mut rng, n).unwrap();
        let first = locs.iter().filter(|l| l.source == 0).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((first - n as f64 / 2.0).abs() <= 3.0 * sd, "seed {seed}: {first} of {n}");
        for l in &locs {
            let f = &idx.sources[l.source].files[l.file];
            assert!(l.offset + CHUNK as u64 <= f.frames);
        }
    }
}

#[test]
fn unequal_weights_and_duration_weighting() {
    let (_dir, mut s) = two_sources();
    s.sources[1].weight = 3.0;
    let idx = scan(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let locs = draw_locations(&idx, Weighting::PerFile, &mut rng, n).unwrap();
    let p1 = locs.iter().filter(|l| l.source == 1).count() as f64 / n as f64;
    assert!((p1 - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / n as f64).sqrt());

    // file lengths 608, 808, 1008 give 1, 201 and 401 valid offsets
    let locs = draw_locations(&idx, Weighting::Duration, &mut rng, n).unwrap();
    let in0: Vec<_> = locs.iter().filter(|l| l.source == 0).collect();
    let shortest = in0.iter().filter(|l| idx.sources[0].files[l.file].frames == CHUNK as u64).count() as f64;
    let p = 1.0 / 603.0;
    let m = in0.len() as f64;
    assert!((shortest - m * p).abs() <= 4.0 * (m * p * (1.0 - p)).sqrt() + 1.0, "{shortest} of {m}");
}

#[test]
fn chunks_come_from_the_file_window() {
    let (_dir, s) = two_sources();
    let idx = scan(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let locs = draw_locations(&idx, Weighting::PerFile, &mut rng.clone(), 16).unwrap();
    let batch = sample_batch(&idx, &s, &mut rng, 16).unwrap();
    for (loc, chunk) in locs.iter().zip(&batch) {
        assert_eq!(chunk.len(), CHUNK);
        let first = chunk.samples()[0];
        let tag = [0.1, 0.5][loc.source] + 0.1 * loc.file as f64;
        let expect = tag + loc.offset as f64 * 1e-6;
        assert!((first - expect).abs() < 1e-6, "{first} vs {expect}");
    }
}

#[test]
fn single_source_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("a.wav"), &ramp(2000, RATE, 0.2));
    let s = spec(&[(dir.path(), 2.0)]);
    let mut ds = Dataset::open(s.clone(), None).unwrap();
    let mut r1 = s.rng();
    let mut r2 = s.rng();
    for _ in 0..3 {
        let a = ds.next_batch(&mut r1, 4).unwrap();
        let b = ds.next_batch(&mut r2, 4).unwrap();
        assert_eq!(a, b);
    }
    let locs = draw_locations(&ds.index, Weighting::PerFile, &mut r1, 100).unwrap();
    assert!(locs.iter().all(|l| l.source == 0 && l.file == 0));
}

#[test]
fn scan_cache_is_reused_until_contents_change() {
    let data = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    write(&data.path().join("a.wav"), &ramp(1000, RATE, 0.1));
    let s = spec(&[(data.path(), 1.0)]);
    let key = content_key(&s).unwrap();
    let idx = scan_cached(&s, cache.path()).unwrap();
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 1);
    assert_eq!(scan_cached(&s, cache.path()).unwrap(), idx);
    assert_eq!(content_key(&s).unwrap(), key);

    write(&data.path().join("b.wav"), &ramp(1000, RATE, 0.2));
    assert_ne!(content_key(&s).unwrap(), key);
    assert_eq!(scan_cached(&s, cache.path()).unwrap().file_count(), 2);
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 2);
}

#[test]
fn clip_source_windows() {
    let clip = ramp(700, RATE, 0.0);
    let mut src = ClipSource::new(vec![clip.clone()], CHUNK).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c in src.next_batch(&mut rng, 10).unwrap() {
        let start = (c.samples()[0] / 1e-6).round() as usize;
        assert_eq!(c.samples(), &clip.samples()[start..start + CHUNK]);
    }
    assert!(ClipSource::new(vec![ramp(100, RATE, 0.0)], CHUNK).is_err());
    let _: u8 = rng.random();
}
