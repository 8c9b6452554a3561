//! Synthetic test signals that resemble recorded sound: plucked strings,
//! sung vowels, drum hits and tone mixtures.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::audio_repr::Waveform;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Pluck,
    Vowel,
    Drums,
    Chord,
}

pub const KINDS: [Kind; 4] = [Kind::Pluck, Kind::Vowel, Kind::Drums, Kind::Chord];

/// Karplus-Strong plucked string at `f0` Hz.
pub fn pluck<R: Rng + ?Sized>(len: usize, rate: u32, f0: f64, rng: &mut R) -> Vec<f64> {
    let period = ((rate as f64 / f0).round() as usize).max(2);
    let mut line: Vec<f64> = (0..period).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let j = i % period;
        let next = line[(j + 1) % period];
        let v = line[j];
        out.push(v);
        line[j] = 0.996 * 0.5 * (v + next);
    }
    out
}

/// Glottal pulse train through three formant resonators.
pub fn vowel<R: Rng + ?Sized>(len: usize, rate: u32, f0: f64, rng: &mut R) -> Vec<f64> {
    const FORMANTS: [[f64; 3]; 4] = [[730.0, 1090.0, 2440.0], [270.0, 2290.0, 3010.0], [570.0, 840.0, 2410.0], [300.0, 870.0, 2240.0]];
    let formants = FORMANTS[rng.random_range(0..FORMANTS.len())];
    let sr = rate as f64;
    let mut phase = 0.0;
    let source: Vec<f64> = (0..len)
        .map(|i| {
            let vibrato = 1.0 + 0.01 * (2.0 * PI * 5.0 * i as f64 / sr).sin();
            phase += f0 * vibrato / sr;
            let p = phase.fract();
            (if p < 0.4 { (PI * p / 0.4).sin().powi(2) } else { 0.0 }) + 0.01 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mut out = vec![0.0; len];
    for (k, &fc) in formants.iter().enumerate() {
        if fc >= sr / 2.0 {
            continue;
        }
        let bw = 80.0 + 40.0 * k as f64;
        let r = (-PI * bw / sr).exp();
        let (a1, a2) = (2.0 * r * (2.0 * PI * fc / sr).cos(), -r * r);
        let (mut y1, mut y2) = (0.0, 0.0);
        for (o, &x) in out.iter_mut().zip(&source) {
            let y = (1.0 - r) * x + a1 * y1 + a2 * y2;
            *o += y / (k + 1) as f64;
            y2 = y1;
            y1 = y;
        }
    }
    out
}

/// Kick-like decaying sine sweeps and snare-like noise bursts.
pub fn drums<R: Rng + ?Sized>(len: usize, rate: u32, rng: &mut R) -> Vec<f64> {
    let sr = rate as f64;
    let mut out = vec![0.0; len];
    let hits = 2 + len / (rate as usize / 8).max(1);
    for _ in 0..hits {
        let start = rng.random_range(0..len);
        let snare = rng.random_bool(0.5);
        let gain = rng.random_range(0.4..1.0);
        for (i, o) in out[start..].iter_mut().enumerate() {
            let t = i as f64 / sr;
            *o += gain
                * if snare {
                    (-t * 40.0).exp() * rng.sample::<f64, _>(StandardNormal) * 0.5
                } else {
                    (-t * 25.0).exp() * (2.0 * PI * (50.0 * t + 60.0 * (1.0 - (-t * 30.0).exp()))).sin()
                };
        }
    }
    out
}

/// Three harmonic tones with decaying partials.
pub fn chord<R: Rng + ?Sized>(len: usize, rate: u32, root: f64, rng: &mut R) -> Vec<f64> {
    let sr = rate as f64;
    let ratios = [1.0, 1.25, 1.5];
    let mut out = vec![0.0; len];
    for r in ratios {
        let f = root * r;
        let phase0 = rng.random_range(0.0..2.0 * PI);
        for h in 1..=6 {
            let fh = f * h as f64;
            if fh >= sr / 2.0 {
                break;
            }
            let amp = 1.0 / (h * h) as f64;
            for (i, o) in out.iter_mut().enumerate() {
                *o += amp * (2.0 * PI * fh * i as f64 / sr + phase0 * h as f64).sin();
            }
        }
    }
    out
}

/// A clip of `kind` normalised to the given peak amplitude.
pub fn clip<R: Rng + ?Sized>(kind: Kind, len: usize, rate: u32, peak: f64, rng: &mut R) -> Result<Waveform> {
    let mut s = match kind {
        Kind::Pluck => pluck(len, rate, rng.random_range(110.0..440.0), rng),
        Kind::Vowel => vowel(len, rate, rng.random_range(100.0..250.0), rng),
        Kind::Drums => drums(len, rate, rng),
        Kind::Chord => chord(len, rate, rng.random_range(150.0..400.0), rng),
    };
    let max = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        s.iter_mut().for_each(|v| *v *= peak / max);
    }
    Waveform::new(s, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clips_are_bounded_and_nonsilent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in KINDS {
            let w = clip(kind, 4000, 16_000, 0.8, &mut rng).unwrap();
            let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 0.8).abs() < 1e-12, "{kind:?}");
        }
    }
}
