//! Noise-level machinery for consistency training: the time-to-sigma map,
//! lognormal noise-pair sampling with an exponentially shrinking step,
//! loss weighting, boundary-exact consistency scalings and the
//! pseudo-Huber distance.

use cae_tensor::{Float, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    /// Exponent of the time-to-sigma map.
    pub rho: f64,
    /// Location of the lognormal sigma distribution.
    pub p_mean: f64,
    /// Scale of the lognormal sigma distribution.
    pub p_std: f64,
    /// Initial step between paired timesteps.
    pub dt0: f64,
    /// Step exponent reached at the final iteration.
    pub e_k: f64,
    /// Total training iterations `K`.
    pub total_iters: u64,
    /// Pseudo-Huber constant is `huber_c_scale * sqrt(elements per sample)`.
    pub huber_c_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            rho: 7.0,
            p_mean: -1.1,
            p_std: 2.0,
            dt0: 0.1,
            e_k: 3.0,
            total_iters: 800_000,
            huber_c_scale: 0.00054,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |cond: bool, msg: &str| if cond { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        ok(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max, "schedule: need 0 < sigma_min < sigma_max")?;
        ok(self.sigma_max.is_finite(), "schedule: sigma_max must be finite")?;
        ok(self.sigma_data > 0.0, "schedule: sigma_data must be positive")?;
        ok(self.rho > 0.0, "schedule: rho must be positive")?;
        ok(self.p_std > 0.0 && self.p_mean.is_finite(), "schedule: need finite p_mean and p_std > 0")?;
        ok(self.dt0 > 0.0 && self.dt0 < 1.0, "schedule: need 0 < dt0 < 1")?;
        ok(self.e_k >= 1.0, "schedule: need e_k >= 1")?;
        ok(self.total_iters >= 1, "schedule: need total_iters >= 1")?;
        ok(self.huber_c_scale > 0.0, "schedule: huber_c_scale must be positive")
    }

    /// Pseudo-Huber constant for samples with `elements` values each.
    pub fn huber_c(&self, elements: usize) -> f64 {
        self.huber_c_scale * (elements as f64).sqrt()
    }
}

/// Step between the paired timesteps at iteration `k`:
/// `dt0 ^ ((k / K) * (e_k - 1) + 1)`.
pub fn step_size(k: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if k > cfg.total_iters {
        return Err(Error::range("k", k as f64, 0.0, cfg.total_iters as f64));
    }
    let progress = k as f64 / cfg.total_iters as f64;
    Ok(cfg.dt0.powf(progress * (cfg.e_k - 1.0) + 1.0))
}

/// `sigma(t) = (sigma_min^(1/rho) + t (sigma_max^(1/rho) - sigma_min^(1/rho)))^rho`.
/// The endpoints are returned exactly.
pub fn t_to_sigma(t: f64, cfg: &ScheduleConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::range("t", t, 0.0, 1.0));
    }
    if t == 0.0 {
        return Ok(cfg.sigma_min);
    }
    if t == 1.0 {
        return Ok(cfg.sigma_max);
    }
    let inv = 1.0 / cfg.rho;
    let (lo, hi) = (cfg.sigma_min.powf(inv), cfg.sigma_max.powf(inv));
    Ok((lo + t * (hi - lo)).powf(cfg.rho).clamp(cfg.sigma_min, cfg.sigma_max))
}

/// Inverse of [`t_to_sigma`].
pub fn sigma_to_t(sigma: f64, cfg: &ScheduleConfig) -> Result<f64> {
    if !(cfg.sigma_min..=cfg.sigma_max).contains(&sigma) {
        return Err(Error::range("sigma", sigma, cfg.sigma_min, cfg.sigma_max));
    }
    if sigma == cfg.sigma_min {
        return Ok(0.0);
    }
    if sigma == cfg.sigma_max {
        return Ok(1.0);
    }
    let inv = 1.0 / cfg.rho;
    let (lo, hi) = (cfg.sigma_min.powf(inv), cfg.sigma_max.powf(inv));
    Ok(((sigma.powf(inv) - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Adjacent noise levels `sigma_lo < sigma_hi` used by one consistency-loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePair {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl NoisePair {
    /// Builds the pair for upper timestep `t_hi` and step `dt`.
    pub fn from_t_hi(t_hi: f64, dt: f64, cfg: &ScheduleConfig) -> Result<Self> {
        let t_lo = (t_hi - dt).max(0.0);
        Ok(Self { sigma_lo: t_to_sigma(t_lo, cfg)?, sigma_hi: t_to_sigma(t_hi, cfg)?, t_lo, t_hi })
    }
}

/// Draws `ln sigma ~ N(p_mean, p_std^2)`, projects it onto
/// `[sigma_min, sigma_max]`, converts to the upper timestep and steps down by
/// [`step_size`]. A draw that lands on `sigma_min` itself would give an empty
/// pair; it is replaced by the smallest valid pair `(0, dt_k)`.
pub fn sample_noise_pair<R: Rng + ?Sized>(k: u64, rng: &mut R, cfg: &ScheduleConfig) -> Result<NoisePair> {
    let dt = step_size(k, cfg)?;
    let normal = Normal::new(cfg.p_mean, cfg.p_std).map_err(|e| Error::Config(e.to_string()))?;
    let sigma = normal.sample(rng).exp().clamp(cfg.sigma_min, cfg.sigma_max);
    let t_hi = sigma_to_t(sigma, cfg)?;
    let pair = NoisePair::from_t_hi(t_hi, dt, cfg)?;
    if pair.sigma_lo < pair.sigma_hi {
        Ok(pair)
    } else {
        NoisePair::from_t_hi(dt.min(1.0), dt, cfg)
    }
}

/// `lambda = 1 / (sigma_hi - sigma_lo)`.
pub fn loss_weight(pair: &NoisePair) -> Result<f64> {
    let gap = pair.sigma_hi - pair.sigma_lo;
    if !(gap > 0.0) {
        return Err(Error::DegeneratePair(pair.sigma_lo));
    }
    Ok(1.0 / gap)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scalings {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
}

/// Consistency parameterisation factors. They are written in terms of
/// `sigma - sigma_min`, so `c_skip(sigma_min) = 1` and `c_out(sigma_min) = 0`
/// hold exactly in floating point.
pub fn consistency_scalings(sigma: f64, cfg: &ScheduleConfig) -> Result<Scalings> {
    if !(cfg.sigma_min..=cfg.sigma_max).contains(&sigma) {
        return Err(Error::range("sigma", sigma, cfg.sigma_min, cfg.sigma_max));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let shifted = sigma - cfg.sigma_min;
    let norm = (sigma * sigma + sd2).sqrt();
    Ok(Scalings {
        c_skip: sd2 / (shifted * shifted + sd2),
        c_out: cfg.sigma_data * shifted / norm,
        c_in: 1.0 / norm,
    })
}

/// `sqrt(|x - y|^2 + c^2) - c` with the Euclidean norm over all elements.
pub fn pseudo_huber(x: &Tensor<f64>, y: &Tensor<f64>, c: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("{:?}", x.shape()), y.shape()));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!("pseudo-Huber constant must be positive, got {c}")));
    }
    let sq: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    // algebraically equal to sqrt(sq + c^2) - c, without cancellation for small sq
    Ok(sq / ((sq + c * c).sqrt() + c))
}

/// Differentiable per-sample pseudo-Huber distance for batches `[B, ...]`;
/// returns shape `[B]`.
pub fn pseudo_huber_batch<F: Float>(x: &Var<F>, y: &Var<F>, c: F) -> Var<F> {
    assert_eq!(x.shape(), y.shape(), "pseudo-Huber operands differ in shape");
    let batch = x.shape()[0];
    let sq = x.sub(y).square().reshape([batch, x.value().numel() / batch]).sum_to(&[batch, 1]);
    sq.add_scalar(c * c).sqrt().add_scalar(-c).reshape([batch])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_k(k: u64) -> ScheduleConfig {
        ScheduleConfig { total_iters: k, ..Default::default() }
    }

    #[test]
    fn step_size_endpoints_and_midpoint() {
        let cfg = cfg_k(1000);
        assert_eq!(step_size(0, &cfg).unwrap(), 0.1);
        assert!((step_size(1000, &cfg).unwrap() - 0.001).abs() < 1e-15);
        assert!((step_size(500, &cfg).unwrap() - 0.01).abs() < 1e-15);
        assert!(matches!(step_size(1001, &cfg), Err(Error::Range { .. })));
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let s = step_size(k, &cfg).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn t_to_sigma_values() {
        let cfg = ScheduleConfig::default();
        assert_eq!(t_to_sigma(0.0, &cfg).unwrap(), 0.002);
        assert_eq!(t_to_sigma(1.0, &cfg).unwrap(), 80.0);
        // scalar oracle: ((0.002^(1/7) + 80^(1/7)) / 2)^7
        let lo = 0.002f64.powf(1.0 / 7.0);
        let hi = 80f64.powf(1.0 / 7.0);
        let want = (0.5 * (lo + hi)).powi(7);
        let got = t_to_sigma(0.5, &cfg).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
        assert!((got - 2.517).abs() < 1e-3 * 2.517);
        assert!(t_to_sigma(-0.1, &cfg).is_err() && t_to_sigma(1.1, &cfg).is_err());
    }

    #[test]
    fn sigma_to_t_inverts() {
        let cfg = ScheduleConfig::default();
        assert_eq!(sigma_to_t(0.002, &cfg).unwrap(), 0.0);
        assert_eq!(sigma_to_t(80.0, &cfg).unwrap(), 1.0);
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let s = t_to_sigma(t, &cfg).unwrap();
            let back = t_to_sigma(sigma_to_t(s, &cfg).unwrap(), &cfg).unwrap();
            assert!((back - s).abs() <= 1e-9 * s);
            assert!((sigma_to_t(s, &cfg).unwrap() - t).abs() < 1e-12);
        }
        assert!(sigma_to_t(0.001, &cfg).is_err());
    }

    #[test]
    fn sampled_pairs_are_ordered() {
        let cfg = cfg_k(100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [0, 50, 100] {
            let dt = step_size(k, &cfg).unwrap();
            for _ in 0..10_000 {
                let p = sample_noise_pair(k, &mut rng, &cfg).unwrap();
                assert!(cfg.sigma_min <= p.sigma_lo && p.sigma_lo < p.sigma_hi && p.sigma_hi <= cfg.sigma_max);
                assert_eq!(p.t_lo, (p.t_hi - dt).max(0.0));
                if p.t_hi <= dt {
                    assert_eq!(p.t_lo, 0.0);
                    assert_eq!(p.sigma_lo, cfg.sigma_min);
                }
            }
        }
    }

    #[test]
    fn loss_weight_examples() {
        let p = NoisePair { sigma_lo: 1.0, sigma_hi: 1.5, t_lo: 0.0, t_hi: 0.0 };
        assert_eq!(loss_weight(&p).unwrap(), 2.0);
        let half = NoisePair { sigma_hi: 1.25, ..p };
        assert_eq!(loss_weight(&half).unwrap(), 4.0);
        let flat = NoisePair { sigma_hi: 1.0, ..p };
        assert!(matches!(loss_weight(&flat), Err(Error::DegeneratePair(_))));
    }

    #[test]
    fn scalings_boundary_and_limits() {
        let cfg = ScheduleConfig::default();
        let s = consistency_scalings(cfg.sigma_min, &cfg).unwrap();
        assert_eq!(s.c_skip, 1.0);
        assert_eq!(s.c_out, 0.0);
        assert_eq!(s.c_in, 1.0 / (0.002f64 * 0.002 + 0.25).sqrt());
        // independent scalar evaluation at sigma_data + sigma_min
        let sigma = 0.502;
        let s = consistency_scalings(sigma, &cfg).unwrap();
        assert!((s.c_skip - 0.5).abs() < 1e-12);
        assert!((s.c_out - 0.5 * 0.5 / (0.502f64 * 0.502 + 0.25).sqrt()).abs() < 1e-12);
        let top = consistency_scalings(cfg.sigma_max, &cfg).unwrap();
        assert!(top.c_skip < 1e-4);
        assert!((top.c_out - cfg.sigma_data).abs() < 1e-3);
        assert!(consistency_scalings(100.0, &cfg).is_err());
    }

    #[test]
    fn pseudo_huber_examples() {
        let x = Tensor::new([2], vec![3.0, 0.0]);
        let y = Tensor::new([2], vec![0.0, 0.0]);
        assert_eq!(pseudo_huber(&x, &x, 4.0).unwrap(), 0.0);
        assert!((pseudo_huber(&x, &y, 4.0).unwrap() - 1.0).abs() < 1e-15);
        // small residual regime: d ~ |x - y|^2 / (2c)
        let small = Tensor::new([2], vec![0.3, 0.1]);
        let d = pseudo_huber(&small, &y, 4.0).unwrap();
        let approx = 0.1 / 8.0;
        assert!((d - approx).abs() < 0.01 * approx);
        assert!(pseudo_huber(&x, &Tensor::zeros([3]), 1.0).is_err());
    }

    #[test]
    fn batched_pseudo_huber_matches_scalar() {
        let a = Tensor::<f64>::from_fn([3, 2, 4], |i| (i as f64 * 0.7).sin());
        let b = Tensor::<f64>::from_fn([3, 2, 4], |i| (i as f64 * 0.3).cos());
        let d = pseudo_huber_batch(&Var::constant(a.clone()), &Var::constant(b.clone()), 0.5);
        for i in 0..3 {
            let sa = Tensor::new([8], a.data()[i * 8..(i + 1) * 8].to_vec());
            let sb = Tensor::new([8], b.data()[i * 8..(i + 1) * 8].to_vec());
            assert!((d.value().data()[i] - pseudo_huber(&sa, &sb, 0.5).unwrap()).abs() < 1e-12);
        }
    }
}
