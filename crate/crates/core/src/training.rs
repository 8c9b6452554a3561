//! End-to-end consistency training.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use cae_tensor::{Float, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio_repr::Waveform;
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::model::Model;
use crate::network::{Network, Params, Weights};
use crate::schedule::{loss_weight, pseudo_huber_batch, sample_noise_pair, NoisePair, ScheduleConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr0: f64,
    /// Learning rate reached at the last iteration.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr0: 1e-4, lr_final: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr0 && self.lr0.is_finite()) {
            return bad("need 0 < lr_final <= lr0");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub ema_momentum: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { batch_size: 16, ema_momentum: 0.9999, checkpoint_every: 10_000, seed: 0 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("training: batch_size and checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("training: ema_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at `k = 0` to `lr_final` at `k = total`.
pub fn lr_at(k: u64, cfg: &OptimizerConfig, total: u64) -> Result<f64> {
    if k > total || total == 0 {
        return Err(Error::range("k", k as f64, 0.0, total as f64));
    }
    let progress = k as f64 / total as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr0 - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `ema <- momentum * ema + (1 - momentum) * params`, element-wise.
pub fn ema_update<F: Float>(params: &Params<F>, ema: &mut Params<F>, momentum: f64) -> Result<()> {
    if !params.same_structure(ema) {
        return Err(Error::Schema("EMA weights do not match the parameter layout".into()));
    }
    let (m, rest) = (F::of(momentum), F::of(1.0 - momentum));
    for i in 0..params.len() {
        let src = params.tensor(i);
        for (e, &p) in ema.tensor_mut(i).data_mut().iter_mut().zip(src.data()) {
            *e = m * *e + rest * p;
        }
    }
    Ok(())
}

/// First/second moment estimates of the rectified Adam optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl RAdamState {
    pub fn new(params: &Params<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    /// One RAdam update with learning rate `lr`.
    pub fn apply(&mut self, params: &mut Params<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &OptimizerConfig) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let eps = cfg.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            match rect {
                Some(r) => {
                    let step = (lr * r / bc1) as f32;
                    let sbc2 = bc2.sqrt() as f32;
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = b1f * m[j] + (1.0 - b1f) * gj;
                        v[j] = b2f * v[j] + (1.0 - b2f) * gj * gj;
                        p[j] -= step * m[j] * sbc2 / (v[j].sqrt() + eps);
                    }
                }
                None => {
                    let step = (lr / bc1) as f32;
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = b1f * m[j] + (1.0 - b1f) * gj;
                        v[j] = b2f * v[j] + (1.0 - b2f) * gj * gj;
                        p[j] -= step * m[j];
                    }
                }
            }
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Params<f32>,
    pub ema: Params<f32>,
    pub opt: RAdamState,
    pub k: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh weights drawn from `seed`; the EMA starts at the initial weights.
    pub fn init(network: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = network.init_params(&mut rng);
        Self { ema: params.clone(), opt: RAdamState::new(&params), params, k: 0, rng }
    }
}

/// Per-sample noise pairs and the shared Gaussian direction `z`.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub pairs: Vec<NoisePair>,
    pub z: Tensor<f64>,
}

pub fn draw_noise<R: Rng + ?Sized>(k: u64, shape: &[usize], rng: &mut R, sched: &ScheduleConfig) -> Result<NoiseDraw> {
    let pairs = (0..shape[0]).map(|_| sample_noise_pair(k, rng, sched)).collect::<Result<Vec<_>>>()?;
    let z = Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal));
    Ok(NoiseDraw { pairs, z })
}

/// `x + sigma_b * z` for every batch element `b`.
pub fn add_noise<F: Float>(x: &Tensor<F>, z: &Tensor<f64>, sigmas: &[f64]) -> Tensor<F> {
    let per = x.numel() / sigmas.len();
    let mut out = x.clone();
    for (i, (o, &zi)) in out.data_mut().iter_mut().zip(z.data()).enumerate() {
        *o += F::of(sigmas[i / per] * zi);
    }
    out
}

pub struct LossTerms<F> {
    pub loss: Var<F>,
    pub student: Var<F>,
    pub teacher: Var<F>,
    /// Per-sample pseudo-Huber distances.
    pub distances: Var<F>,
    pub weights: Vec<f64>,
}

/// The weighted consistency loss for one batch. Gradients reach `student`
/// weights through the encoder, decoder and the high-noise UNet evaluation;
/// the low-noise evaluation uses `teacher` weights and detached decoder
/// features, so it is a constant target.
pub fn consistency_loss<F: Float>(
    net: &Network,
    sched: &ScheduleConfig,
    student: &Weights<F>,
    teacher: &Weights<F>,
    x: &Tensor<F>,
    noise: &NoiseDraw,
) -> Result<LossTerms<F>> {
    let batch = x.shape()[0];
    if noise.pairs.len() != batch || noise.z.shape() != x.shape() {
        return Err(Error::shape(format!("noise for batch {:?}", x.shape()), noise.z.shape()));
    }
    let weights = noise.pairs.iter().map(loss_weight).collect::<Result<Vec<_>>>()?;
    let sigma_hi: Vec<f64> = noise.pairs.iter().map(|p| p.sigma_hi).collect();
    let sigma_lo: Vec<f64> = noise.pairs.iter().map(|p| p.sigma_lo).collect();

    let lat = net.encode(student, &Var::constant(x.clone()))?;
    let y = net.decode_features(student, &lat)?;
    let x_hi = Var::constant(add_noise(x, &noise.z, &sigma_hi));
    let x_lo = Var::constant(add_noise(x, &noise.z, &sigma_lo));
    let student_out = net.consistency_fn(student, &x_hi, &sigma_hi, &y, sched)?;
    let y_fixed: Vec<Var<F>> = y.iter().map(Var::detach).collect();
    let teacher_out = net.consistency_fn(teacher, &x_lo, &sigma_lo, &y_fixed, sched)?.detach();

    let c = F::of(sched.huber_c(x.numel() / batch));
    let distances = pseudo_huber_batch(&student_out, &teacher_out, c);
    let lambda = Tensor::new([batch], weights.iter().map(|&w| F::of(w)).collect());
    let loss = distances.mul(&Var::constant(lambda)).mean_all();
    Ok(LossTerms { loss, student: student_out, teacher: teacher_out, distances, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    /// Iteration index the step was taken at.
    pub k: u64,
    pub loss: f64,
    /// Mean upper noise level of the batch.
    pub sigma_hi: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimisation step on a batch of chunk-length waveforms.
pub fn training_step(model: &Model, state: &mut TrainState, batch: &[Waveform], cfg: &RunConfig) -> Result<StepStats> {
    let sched = &model.schedule;
    if state.k >= sched.total_iters {
        return Err(Error::State(format!("iteration {} is past the schedule end {}", state.k, sched.total_iters)));
    }
    let x: Tensor<f32> = model.spectrogram_batch(batch)?.cast();
    let noise = draw_noise(state.k, x.shape(), &mut state.rng, sched)?;

    let tape = Tape::new();
    let student = state.params.leaves(&tape);
    let terms = consistency_loss(&model.network, sched, &student, &state.params.constants(), &x, &noise)?;
    let loss = terms.loss.value().item() as f64;
    let mut grads = tape.backward(&terms.loss);
    let mut grads: Vec<Tensor<f32>> = student
        .vars
        .iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
        .collect();
    let grad_norm = grads.iter().map(|g| g.sum_sq() as f64).sum::<f64>().sqrt();
    let sigma_hi = noise.pairs.iter().map(|p| p.sigma_hi).sum::<f64>() / noise.pairs.len() as f64;
    if !loss.is_finite() || !grad_norm.is_finite() {
        let pairs: Vec<String> =
            noise.pairs.iter().map(|p| format!("({:.4e}, {:.4e})", p.sigma_lo, p.sigma_hi)).collect();
        return Err(Error::NonFinite {
            iteration: state.k,
            diagnostic: format!("loss {loss}, grad norm {grad_norm}, sigma pairs [{}]", pairs.join(", ")),
        });
    }
    if let Some(clip) = cfg.optimizer.grad_clip {
        if grad_norm > clip {
            let s = (clip / grad_norm) as f32;
            grads.iter_mut().for_each(|g| g.map_inplace(|v| v * s));
        }
    }
    let lr = lr_at(state.k, &cfg.optimizer, sched.total_iters)?;
    state.opt.apply(&mut state.params, &grads, lr, &cfg.optimizer);
    ema_update(&state.params, &mut state.ema, cfg.training.ema_momentum)?;
    let stats = StepStats { k: state.k, loss, sigma_hi, lr, grad_norm };
    state.k += 1;
    Ok(stats)
}

/// Supplier of training batches. Draws must come from `rng` only, so a run is
/// reproducible from the stored generator state.
pub trait BatchSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Vec<Waveform>>;
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop (and checkpoint) once this iteration count is reached.
    pub stop_at: Option<u64>,
    /// CSV log of `iteration,sigma_hi,loss,lr,grad_norm`, appended to.
    pub loss_log: Option<PathBuf>,
}

/// Runs [`training_step`] until the schedule ends (or `stop_at`), writing
/// periodic and final checkpoints.
pub fn train(
    model: &Model,
    cfg: &RunConfig,
    mut state: TrainState,
    source: &mut dyn BatchSource,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainState> {
    let end = opts.stop_at.map_or(model.schedule.total_iters, |s| s.min(model.schedule.total_iters));
    let mut log = match &opts.loss_log {
        Some(path) => {
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            if fresh {
                writeln!(f, "iteration,sigma_hi,loss,lr,grad_norm").map_err(|e| Error::io(path, e))?;
            }
            Some((path.clone(), f))
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(checkpoint::file_name(state.k));
            checkpoint::save(&path, &Checkpoint::from_state(cfg, state), true)?;
            log::info!("checkpoint written to {}", path.display());
        }
        Ok(())
    };
    while state.k < end {
        let batch = source.next_batch(&mut state.rng, cfg.training.batch_size)?;
        if batch.is_empty() {
            return Err(Error::Data("batch source produced no audio".into()));
        }
        let stats = training_step(model, &mut state, &batch, cfg)?;
        if let Some((path, f)) = log.as_mut() {
            writeln!(f, "{},{:e},{:e},{:e},{:e}", stats.k, stats.sigma_hi, stats.loss, stats.lr, stats.grad_norm)
                .map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&stats);
        if state.k % cfg.training.checkpoint_every == 0 && state.k < end {
            save(&state)?;
        }
    }
    save(&state)?;
    Ok(state)
}

/// Restores a training state, refusing checkpoints written under a
/// different configuration.
pub fn resume(ckpt: Checkpoint, cfg: &RunConfig) -> Result<TrainState> {
    let want = cfg.hash();
    if ckpt.config_hash != want {
        return Err(Error::Schema(format!(
            "checkpoint was written with config {} but the run config hashes to {want}; refusing to resume",
            ckpt.config_hash
        )));
    }
    ckpt.into_train_state()
}
