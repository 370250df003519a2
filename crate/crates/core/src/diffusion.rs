//! Noise schedule, forward noising, noise-correction estimation, the DDIM
//! skip-step update and the full reconstruction loop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfdn::{LfdnModel, LfdnParams};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Construction parameters of a linear beta schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[0] = 1`, `alpha_bars[t] = prod_{i<=t} (1 - beta_i)`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_min` (step 1) to `beta_max` (step T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_min]
        } else {
            let span = (beta_max - beta_min) / (steps - 1) as f64;
            (0..steps).map(|i| beta_min + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::config(format!("step {t} beyond schedule length {}", self.steps()))
        })
    }

    fn check_noisy_step(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::config(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(self.alpha_bars[t])
    }
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps` for an explicit noise level.
pub fn ennoise_with(z0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).max(0.0).sqrt();
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// Forward noising to step `t`; returns `(z_t, eps)`.
pub fn ennoise<R: Rng + ?Sized>(
    z0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ab = schedule.check_noisy_step(t)?;
    let eps = gaussian_vec(rng, z0.len());
    Ok((ennoise_with(z0, &eps, ab), eps))
}

/// Noise implied by a clean-feature prediction: `(z_t - sqrt(ab) z~) / sqrt(1 - ab)`.
pub fn noise_correction(
    zt: &[f64],
    zt_pred: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let ab = schedule.check_noisy_step(t)?;
    check_same_len(zt, zt_pred)?;
    let a = ab.sqrt();
    let inv = 1.0 / (1.0 - ab).sqrt();
    Ok(zt
        .iter()
        .zip(zt_pred)
        .map(|(z, p)| (z - a * p) * inv)
        .collect())
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::structure(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// How the fresh-noise term of the skip step is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseExponent {
    /// `sigma^2 * eps`.
    #[default]
    Variance,
    /// `sigma * eps`, the usual DDIM form.
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepNoise {
    pub eta: f64,
    pub exponent: NoiseExponent,
}

impl StepNoise {
    pub const DETERMINISTIC: StepNoise = StepNoise {
        eta: 0.0,
        exponent: NoiseExponent::Variance,
    };
}

/// DDIM sigma for a jump from `ab_t` to `ab_prev`.
pub fn ddim_sigma(eta: f64, ab_t: f64, ab_prev: f64) -> f64 {
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
}

/// Skip-step update from `t` to `t_prime < t` given the prediction `zt_pred`.
/// The rng is only consumed when `noise.eta > 0`.
pub fn ddim_step<R: Rng + ?Sized>(
    zt: &[f64],
    zt_pred: &[f64],
    t: usize,
    t_prime: usize,
    noise: StepNoise,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if t_prime >= t {
        return Err(Error::config(format!(
            "target step {t_prime} is not below {t}"
        )));
    }
    if !(noise.eta >= 0.0 && noise.eta.is_finite()) {
        return Err(Error::config(format!(
            "eta must be a finite non-negative value, got {}",
            noise.eta
        )));
    }
    let eps_hat = noise_correction(zt, zt_pred, t, schedule)?;
    let ab_t = schedule.alpha_bars[t];
    let ab_prev = schedule.alpha_bars[t_prime];
    let sigma = ddim_sigma(noise.eta, ab_t, ab_prev);
    let drift = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let keep = ab_prev.sqrt();
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let mut out: Vec<f64> = zt
        .iter()
        .zip(&eps_hat)
        .map(|(z, e)| keep * ((z - sb * e) / sa) + drift * e)
        .collect();
    if sigma > 0.0 {
        let scale = match noise.exponent {
            NoiseExponent::Variance => sigma * sigma,
            NoiseExponent::StdDev => sigma,
        };
        for o in &mut out {
            let e: f64 = rng.sample(StandardNormal);
            *o += scale * e;
        }
    }
    Ok(out)
}

/// Anything that predicts clean features from a noisy input at a step.
pub trait Reconstructor {
    fn predict(&self, z: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl Reconstructor for LfdnParams {
    fn predict(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        self.forward(z, t)
    }
}

impl Reconstructor for LfdnModel {
    fn predict(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        self.forward(z, t)
    }
}

impl<T: Reconstructor + ?Sized> Reconstructor for &T {
    fn predict(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        (**self).predict(z, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StridePolicy {
    /// `s ~ Uniform{1..=t}`, drawn once per reconstruction.
    RandomUniform,
    Fixed(usize),
}

impl std::str::FromStr for StridePolicy {
    type Err = Error;

    /// `random` or `fixed:<s>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(StridePolicy::RandomUniform);
        }
        if let Some(n) = s.strip_prefix("fixed:") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::config(format!("bad stride `{s}`")))?;
            return Ok(StridePolicy::Fixed(n));
        }
        Err(Error::config(format!(
            "bad stride `{s}`, expected random or fixed:<s>"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub t_start: usize,
    pub stride: StridePolicy,
    pub eta: f64,
    pub noise_exponent: NoiseExponent,
    pub rng_seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            t_start: 5,
            stride: StridePolicy::RandomUniform,
            eta: 0.0,
            noise_exponent: NoiseExponent::Variance,
            rng_seed: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_start == 0 || self.t_start > schedule.steps() {
            return Err(Error::config(format!(
                "t_start {} outside [1, {}]",
                self.t_start,
                schedule.steps()
            )));
        }
        if let StridePolicy::Fixed(s) = self.stride {
            if s == 0 || s > self.t_start {
                return Err(Error::config(format!(
                    "fixed stride {s} outside [1, {}]",
                    self.t_start
                )));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    pub fn step_noise(&self) -> StepNoise {
        StepNoise {
            eta: self.eta,
            exponent: self.noise_exponent,
        }
    }
}

/// Reconstructs `z~_0` from `z_t` by alternating predictions and skip steps
/// until step 0, returning the last prediction.
pub fn denoise<M, R>(
    model: &M,
    zt: &[f64],
    t: usize,
    cfg: &DenoiseConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    M: Reconstructor + ?Sized,
    R: Rng + ?Sized,
{
    schedule.check_noisy_step(t)?;
    let stride = match cfg.stride {
        StridePolicy::RandomUniform => rng.random_range(1..=t),
        StridePolicy::Fixed(0) => return Err(Error::config("fixed stride must be positive")),
        StridePolicy::Fixed(s) => s,
    };
    let noise = cfg.step_noise();
    let mut cur_t = t;
    let mut z = zt.to_vec();
    let mut pred = model.predict(&z, cur_t)?;
    while cur_t > 0 {
        let next_t = cur_t.saturating_sub(stride);
        z = ddim_step(&z, &pred, cur_t, next_t, noise, schedule, rng)?;
        pred = model.predict(&z, next_t)?;
        cur_t = next_t;
    }
    Ok(pred)
}
