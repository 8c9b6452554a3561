//! The network together with the audio front end and noise schedule it was
//! built for.

use cae_tensor::Tensor;

use crate::audio_repr::{to_model_input, AmplitudeTransform, StftParams, Waveform};
use crate::config::RunConfig;
use crate::network::Network;
use crate::schedule::ScheduleConfig;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub stft: StftParams,
    pub amplitude: AmplitudeTransform,
    pub schedule: ScheduleConfig,
    pub sample_rate: u32,
}

impl Model {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            network: Network::new(cfg.model.clone())?,
            stft: cfg.audio.stft(),
            amplitude: cfg.audio.amplitude(),
            schedule: cfg.schedule,
            sample_rate: cfg.audio.sample_rate,
        })
    }

    /// Samples per training chunk: exactly `time_frames` STFT frames.
    pub fn chunk_len(&self) -> usize {
        self.stft.samples_for_frames(self.network.config().time_frames)
    }

    /// Waveform samples represented by one latent vector.
    pub fn samples_per_latent(&self) -> usize {
        self.stft.hop * self.network.config().frames_per_latent()
    }

    /// Compressed spectrograms `[B, 2, F, T]` of chunk-length waveforms.
    pub fn spectrogram_batch(&self, chunks: &[Waveform]) -> Result<Tensor<f64>> {
        if chunks.is_empty() {
            return Err(Error::Length("empty batch".into()));
        }
        let (f, t) = (self.network.config().freq_bins, self.network.config().time_frames);
        let mut data = Vec::with_capacity(chunks.len() * 2 * f * t);
        for w in chunks {
            if w.len() != self.chunk_len() {
                return Err(Error::Length(format!("chunk has {} samples, expected {}", w.len(), self.chunk_len())));
            }
            if w.sample_rate() != self.sample_rate {
                return Err(Error::Data(format!("chunk is {} Hz, model expects {} Hz", w.sample_rate(), self.sample_rate)));
            }
            let s = to_model_input(w, self.stft, &self.amplitude)?;
            data.extend_from_slice(s.data().data());
        }
        Ok(Tensor::new([chunks.len(), 2, f, t], data))
    }
}
