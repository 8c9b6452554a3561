//! Waveform <-> amplitude-compressed complex spectrogram conversion.
//!
//! Spectrograms are stored as a real tensor `[2, F, T]` (channel 0 = real
//! part, channel 1 = imaginary part) with `F = window_len / 2`. Frames use
//! "valid" framing: frame `t` covers samples `[t * hop, t * hop + window_len)`
//! with no centre padding, so a signal of `window_len + (T - 1) * hop`
//! samples yields exactly `T` frames. The real-valued Nyquist coefficient is
//! carried in the imaginary slot of the DC bin (which is zero for real input)
//! so that dropping the Nyquist row loses nothing.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use cae_tensor::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of `range`, zero-padded where it runs past the end.
    pub fn segment(&self, range: Range<usize>) -> Self {
        let mut out = vec![0.0; range.len()];
        let end = range.end.min(self.samples.len());
        if range.start < end {
            out[..end - range.start].copy_from_slice(&self.samples[range.start..end]);
        }
        Self { samples: out, sample_rate: self.sample_rate }
    }

    /// Shortened to `len` samples (no-op if already shorter).
    pub fn truncated(mut self, len: usize) -> Self {
        self.samples.truncate(len.max(1));
        self
    }
}

/// Hop size and window length of the STFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub hop: usize,
    pub window_len: usize,
}

impl StftParams {
    /// Window of four hops (75% overlap).
    pub fn with_hop(hop: usize) -> Self {
        Self { hop, window_len: 4 * hop }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_len == 0 || self.window_len % 2 != 0 {
            return Err(Error::Config(format!(
                "invalid STFT params: hop {} window {} (window must be positive and even)",
                self.hop, self.window_len
            )));
        }
        if self.hop > self.window_len {
            return Err(Error::Config("hop must not exceed the window length".into()));
        }
        Ok(())
    }

    /// Number of frequency rows kept (`window_len / 2`).
    pub fn freq_bins(&self) -> usize {
        self.window_len / 2
    }

    /// Frames produced for a signal of `len` samples (tail zero-padded to a
    /// hop boundary). `None` when the signal is shorter than one window.
    pub fn frames_for(&self, len: usize) -> Option<usize> {
        (len >= self.window_len).then(|| 1 + (len - self.window_len).div_ceil(self.hop))
    }

    /// Signal length spanned by `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.window_len + frames.saturating_sub(1) * self.hop
    }

    /// Region of a `len`-sample signal covered by the full overlap-add sum.
    pub fn valid_region(&self, len: usize) -> Range<usize> {
        let margin = self.window_len - self.hop;
        margin..len.saturating_sub(margin).max(margin)
    }

    /// Periodic Hann window of `window_len` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

/// Two-channel (real, imaginary) time-frequency representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    data: Tensor<f64>,
    compressed: bool,
    params: StftParams,
    sample_rate: u32,
    signal_len: usize,
}

impl ComplexSpectrogram {
    /// Wraps a `[2, F, T]` tensor. `signal_len` is the waveform length the
    /// inverse transform trims to.
    pub fn from_tensor(
        data: Tensor<f64>,
        compressed: bool,
        params: StftParams,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        params.validate()?;
        let s = data.shape();
        if s.len() != 3 || s[0] != 2 || s[1] != params.freq_bins() || s[2] == 0 {
            return Err(Error::shape(format!("[2, {}, T>0]", params.freq_bins()), s));
        }
        if !data.all_finite() {
            return Err(Error::Domain("spectrogram contains non-finite values".into()));
        }
        if signal_len > params.samples_for_frames(s[2]) {
            return Err(Error::Length(format!(
                "signal length {signal_len} exceeds the {} samples spanned by {} frames",
                params.samples_for_frames(s[2]),
                s[2]
            )));
        }
        Ok(Self { data, compressed, params, sample_rate, signal_len })
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f64> {
        self.data
    }

    pub fn is_compressed(&self) -> bool {
        self.compressed
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn freq_bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    /// Complex coefficient at (`bin`, `frame`).
    pub fn coeff(&self, bin: usize, frame: usize) -> Complex64 {
        let (f, t) = (self.freq_bins(), self.frames());
        let d = self.data.data();
        Complex64::new(d[bin * t + frame], d[f * t + bin * t + frame])
    }

    fn map_coeffs(&self, compressed: bool, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let half = self.data.numel() / 2;
        let mut out = self.data.clone();
        let (re, im) = out.data_mut().split_at_mut(half);
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            (*r, *i) = f(*r, *i);
        }
        Self {
            data: out,
            compressed,
            params: self.params,
            sample_rate: self.sample_rate,
            signal_len: self.signal_len,
        }
    }
}

/// Parameters of the magnitude compression `c -> beta * |c|^alpha * e^{i arg c}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeTransform {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AmplitudeTransform {
    fn default() -> Self {
        Self { alpha: 0.65, beta: 0.35 }
    }
}

impl AmplitudeTransform {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::range("alpha", self.alpha, 0.0, 1.0));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Compresses one coefficient, preserving its phase. Zero maps to zero.
    pub fn compress_coeff(&self, re: f64, im: f64) -> (f64, f64) {
        let mag = re.hypot(im);
        if mag == 0.0 {
            return (0.0, 0.0);
        }
        let scale = self.beta * mag.powf(self.alpha) / mag;
        (re * scale, im * scale)
    }

    /// Exact inverse of [`AmplitudeTransform::compress_coeff`].
    pub fn expand_coeff(&self, re: f64, im: f64) -> (f64, f64) {
        let mag = re.hypot(im);
        if mag == 0.0 {
            return (0.0, 0.0);
        }
        let scale = (mag / self.beta).powf(1.0 / self.alpha) / mag;
        (re * scale, im * scale)
    }
}

struct Planned {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

fn plan(params: &StftParams, inverse: bool) -> Planned {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(params.window_len)
    } else {
        planner.plan_fft_forward(params.window_len)
    };
    Planned { fft, window: params.window() }
}

/// Complex STFT of `w`. Signals whose length is not on a hop boundary are
/// zero-padded at the tail; [`istft`] trims the padding again.
pub fn stft(w: &Waveform, params: StftParams) -> Result<ComplexSpectrogram> {
    params.validate()?;
    let frames = params.frames_for(w.len()).ok_or_else(|| {
        Error::Length(format!("{} samples is shorter than the {}-sample window", w.len(), params.window_len))
    })?;
    let (n, bins) = (params.window_len, params.freq_bins());
    let Planned { fft, window } = plan(&params, false);
    let norm = 1.0 / (n as f64).sqrt();
    let mut data = vec![0.0; 2 * bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let samples = w.samples();
    for t in 0..frames {
        let start = t * params.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let x = samples.get(start + i).copied().unwrap_or(0.0);
            *b = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        data[t] = buf[0].re * norm;
        data[bins * frames + t] = buf[bins].re * norm;
        for k in 1..bins {
            data[k * frames + t] = buf[k].re * norm;
            data[bins * frames + k * frames + t] = buf[k].im * norm;
        }
    }
    ComplexSpectrogram::from_tensor(Tensor::new([2, bins, frames], data), false, params, w.sample_rate(), w.len())
}

/// Weighted overlap-add inverse of [`stft`]. Exact wherever the summed
/// squared window exceeds a small floor (everything but the outermost
/// edge samples).
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    if s.compressed {
        return Err(Error::State("istft needs an expanded spectrogram; call amplitude_expand first".into()));
    }
    let params = s.params;
    let (n, bins, frames) = (params.window_len, s.freq_bins(), s.frames());
    let Planned { fft, window } = plan(&params, true);
    let norm = 1.0 / (n as f64).sqrt();
    let total = params.samples_for_frames(frames);
    let mut out = vec![0.0; total];
    let mut wsum = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let d = s.data.data();
    for t in 0..frames {
        buf[0] = Complex64::new(d[t], 0.0);
        buf[bins] = Complex64::new(d[bins * frames + t], 0.0);
        for k in 1..bins {
            let c = Complex64::new(d[k * frames + t], d[bins * frames + k * frames + t]);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        fft.process(&mut buf);
        let start = t * params.hop;
        for i in 0..n {
            out[start + i] += buf[i].re * norm * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let steady: f64 = window.iter().map(|v| v * v).sum::<f64>() / (n / params.hop) as f64;
    let floor = 1e-3 * steady;
    for (o, &ws) in out.iter_mut().zip(&wsum) {
        *o /= ws.max(floor);
    }
    out.truncate(s.signal_len);
    Waveform::new(out, s.sample_rate)
}

pub fn amplitude_compress(s: &ComplexSpectrogram, p: &AmplitudeTransform) -> Result<ComplexSpectrogram> {
    p.validate()?;
    if s.compressed {
        return Err(Error::State("spectrogram is already compressed".into()));
    }
    Ok(s.map_coeffs(true, |re, im| p.compress_coeff(re, im)))
}

pub fn amplitude_expand(s: &ComplexSpectrogram, p: &AmplitudeTransform) -> Result<ComplexSpectrogram> {
    p.validate()?;
    if !s.compressed {
        return Err(Error::State("spectrogram is not compressed".into()));
    }
    Ok(s.map_coeffs(false, |re, im| p.expand_coeff(re, im)))
}

/// Waveform -> compressed spectrogram, the form the model consumes.
pub fn to_model_input(w: &Waveform, params: StftParams, p: &AmplitudeTransform) -> Result<ComplexSpectrogram> {
    amplitude_compress(&stft(w, params)?, p)
}

/// Compressed spectrogram -> waveform.
pub fn from_model_output(s: &ComplexSpectrogram, p: &AmplitudeTransform) -> Result<Waveform> {
    istft(&amplitude_expand(s, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::si_sdr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PAPER: StftParams = StftParams { hop: 512, window_len: 2048 };

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 44_100).unwrap()
    }

    fn valid_si_sdr(a: &Waveform, b: &Waveform, p: StftParams) -> f64 {
        let r = p.valid_region(a.len());
        let ra = Waveform::new(a.samples()[r.clone()].to_vec(), 1).unwrap();
        let rb = Waveform::new(b.samples()[r].to_vec(), 1).unwrap();
        si_sdr(&ra, &rb).unwrap()
    }

    #[test]
    fn chunk_of_34304_samples_gives_64_frames() {
        assert_eq!(PAPER.frames_for(34_304), Some(64));
        assert_eq!(PAPER.samples_for_frames(64), 34_304);
        let s = stft(&Waveform::silence(34_304, 44_100).unwrap(), PAPER).unwrap();
        assert_eq!(s.data().shape(), &[2, 1024, 64]);
        assert!(s.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_input_is_a_length_error() {
        let w = Waveform::silence(2047, 44_100).unwrap();
        assert!(matches!(stft(&w, PAPER), Err(Error::Length(_))));
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let s = ComplexSpectrogram::from_tensor(Tensor::zeros([2, 1024, 64]), false, PAPER, 44_100, 34_304).unwrap();
        let w = istft(&s).unwrap();
        assert_eq!(w.len(), 34_304);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_matches_direct_dft() {
        let p = StftParams::with_hop(32);
        let len = p.samples_for_frames(8);
        let bin = 10;
        let w = Waveform::new(
            (0..len).map(|i| (2.0 * PI * bin as f64 * i as f64 / p.window_len as f64 + 0.3).cos()).collect(),
            16_000,
        )
        .unwrap();
        let s = stft(&w, p).unwrap();
        let win = p.window();
        // direct O(N^2) DFT of each windowed frame
        for t in 0..s.frames() {
            for k in 1..p.freq_bins() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, wv) in win.iter().enumerate() {
                    let x = w.samples()[t * p.hop + i] * wv;
                    let ang = -2.0 * PI * (k * i) as f64 / p.window_len as f64;
                    acc += Complex64::from_polar(x, ang);
                }
                acc /= (p.window_len as f64).sqrt();
                assert!((acc - s.coeff(k, t)).norm() < 1e-9, "bin {k} frame {t}");
            }
        }
        // the Hann main lobe spans bin +-1; everything else is >= 40 dB down
        let peak = s.coeff(bin, 3).norm();
        for k in 0..p.freq_bins() {
            if (k as isize - bin as isize).abs() > 1 {
                assert!(20.0 * (s.coeff(k, 3).norm() / peak).log10() <= -40.0, "bin {k}");
            }
        }
    }

    #[test]
    fn nyquist_coefficient_survives_roundtrip() {
        let p = StftParams::with_hop(16);
        let len = p.samples_for_frames(6);
        let w = Waveform::new((0..len).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect(), 8000).unwrap();
        let back = istft(&stft(&w, p).unwrap()).unwrap();
        for i in p.valid_region(len) {
            assert!((back.samples()[i] - w.samples()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_noise_above_40db() {
        for seed in 0..3 {
            let w = noise(34_304, seed);
            let back = istft(&stft(&w, PAPER).unwrap()).unwrap();
            assert_eq!(back.len(), w.len());
            assert!(valid_si_sdr(&w, &back, PAPER) > 40.0);
        }
    }

    #[test]
    fn unaligned_length_is_padded_then_trimmed() {
        let w = noise(5000, 9);
        let s = stft(&w, PAPER).unwrap();
        assert_eq!(s.frames(), 1 + (5000 - 2048usize).div_ceil(512));
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 5000);
    }

    #[test]
    fn single_frame_impulse_spectrum_gives_centred_impulse() {
        // a flat unit spectrum in one frame is a delta at the frame start;
        // a linear phase ramp moves it to the frame centre
        let p = StftParams::with_hop(8);
        let frames = 5;
        let (bins, n) = (p.freq_bins(), p.window_len);
        let centre = n / 2;
        let mut data = Tensor::zeros([2, bins, frames]);
        let t0 = 2;
        let norm = (n as f64).sqrt();
        for k in 0..bins {
            let c = Complex64::from_polar(1.0 / norm, -2.0 * PI * (k * centre) as f64 / n as f64);
            let d = data.data_mut();
            if k == 0 {
                d[t0] = c.re;
                d[bins * frames + t0] = if centre % 2 == 0 { 1.0 / norm } else { -1.0 / norm };
            } else {
                d[k * frames + t0] = c.re;
                d[bins * frames + k * frames + t0] = c.im;
            }
        }
        let len = p.samples_for_frames(frames);
        let s = ComplexSpectrogram::from_tensor(data, false, p, 8000, len).unwrap();
        let w = istft(&s).unwrap();
        // oracle: frame = delta at `centre`, windowed, divided by the window-power sum
        let win = p.window();
        let mut wsum = vec![0.0; len];
        for t in 0..frames {
            for i in 0..n {
                wsum[t * p.hop + i] += win[i] * win[i];
            }
        }
        let pos = t0 * p.hop + centre;
        for (i, &v) in w.samples().iter().enumerate() {
            let want = if i == pos { win[centre] / wsum[pos] } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "sample {i}: {v} vs {want}");
        }
    }

    #[test]
    fn compress_examples() {
        let p = AmplitudeTransform::default();
        assert_eq!(p.compress_coeff(1.0, 0.0), (0.35, 0.0));
        assert_eq!(p.compress_coeff(0.0, 0.0), (0.0, 0.0));
        let (re, im) = p.compress_coeff(0.0, 4.0);
        assert_eq!(re, 0.0);
        assert!((im - 0.35 * 4f64.powf(0.65)).abs() < 1e-12);
        assert!((im - 0.8618).abs() < 1e-4);
        let (re, im) = p.expand_coeff(0.35, 0.0);
        assert!((re - 1.0).abs() < 1e-12 && im == 0.0);
        assert_eq!(p.expand_coeff(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn compress_state_errors() {
        let p = AmplitudeTransform::default();
        let s = stft(&noise(4096, 1), PAPER).unwrap();
        let c = amplitude_compress(&s, &p).unwrap();
        assert!(c.is_compressed());
        assert!(matches!(amplitude_compress(&c, &p), Err(Error::State(_))));
        assert!(matches!(amplitude_expand(&s, &p), Err(Error::State(_))));
        assert!(matches!(istft(&c), Err(Error::State(_))));
        let bad = AmplitudeTransform { alpha: 1.5, beta: 0.35 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn compress_expand_random_spectrogram() {
        let p = AmplitudeTransform::default();
        let s = stft(&noise(8192, 4), PAPER).unwrap();
        let back = amplitude_expand(&amplitude_compress(&s, &p).unwrap(), &p).unwrap();
        for (a, b) in s.data().data().iter().zip(back.data().data()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }
}
