//! Linear noise schedule, the forward Gaussian process and deterministic
//! DDIM sampling.
//!
//! Schedule coefficients are kept in f64 and applied to tensors of either
//! precision.

use ndcore::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// T = 1000, β from 1e-4 to 2e-2.
    pub fn full() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }

    /// T = 200 with the full-mode endpoints scaled by 1000 / T, so the
    /// terminal ᾱ stays close to zero.
    pub fn desk() -> Self {
        Self { steps: 200, beta_start: 5e-4, beta_end: 0.1 }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// β, α and ᾱ for t = 1..=T (stored at index t - 1).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alphabar: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_start` to `beta_end`, endpoints
    /// included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Arbitrary β sequence in `[0, 1)`. Zero entries are allowed so a
    /// noiseless prefix can be expressed; `linear` never produces them.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alphabar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alphabar.push(acc);
        }
        Ok(Self { beta, alpha, alphabar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alphabar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphabar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// z_t together with its step index.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyLatent<F> {
    pub z: Tensor<F>,
    pub t: usize,
}

/// z_t = √ᾱ_t z + √(1 − ᾱ_t) ε.
pub fn forward_diffuse<F: Float>(
    z: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<NoisyLatent<F>> {
    schedule.check_t(t)?;
    if z.shape() != eps.shape() {
        return Err(shape_err("forward_diffuse", z.shape(), eps.shape()));
    }
    let ab = schedule.alphabar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let zt = z.zip_map(eps, |z, e| F::c(a * z.f64() + b * e.f64()))?;
    Ok(NoisyLatent { z: zt, t })
}

/// Forward diffusion with one timestep per sample along the leading axis.
pub fn forward_diffuse_batch<F: Float>(
    z: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if z.shape() != eps.shape() || z.rank() == 0 || z.dim(0) != ts.len() {
        return Err(shape_err("forward_diffuse_batch", z.shape(), eps.shape()));
    }
    let inner = z.len() / ts.len();
    let mut out = z.clone();
    for (n, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alphabar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = n * inner..(n + 1) * inner;
        for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = F::c(a * o.f64() + b * e.f64());
        }
    }
    Ok(out)
}

/// ẑ₀ = (z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t.
pub fn predict_x0<F: Float>(
    z_t: &Tensor<F>,
    eps_pred: &Tensor<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if z_t.shape() != eps_pred.shape() {
        return Err(shape_err("predict_x0", z_t.shape(), eps_pred.shape()));
    }
    let ab = schedule.alphabar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps_pred, |z, e| F::c((z.f64() - n * e.f64()) / s))?)
}

/// One deterministic DDIM update from `t` to `t_prev`. Only `eta = 0` is
/// supported. With `t_prev = 0` the result is ẑ₀; with `t_prev = t` it is
/// `z_t` unchanged.
pub fn ddim_step<F: Float>(
    z_t: &Tensor<F>,
    eps_pred: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Result<Tensor<F>> {
    if eta != 0.0 {
        return Err(Error::Config(format!("only eta = 0 is supported, got {eta}")));
    }
    schedule.check_t(t)?;
    if t_prev > t {
        return Err(Error::Config(format!("DDIM step must go backwards: {t} -> {t_prev}")));
    }
    if z_t.shape() != eps_pred.shape() {
        return Err(shape_err("ddim_step", z_t.shape(), eps_pred.shape()));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let x0 = predict_x0(z_t, eps_pred, t, schedule)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab = schedule.alphabar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps_pred, |x, e| F::c(a * x.f64() + b * e.f64()))?)
}

/// DDIM step with ẑ₀ clipped to `[-limit, limit]`. ε̂ is then re-derived
/// from the clipped ẑ₀ so the update stays on the DDIM trajectory. Without
/// clipping active this equals [`ddim_step`].
pub fn ddim_step_clipped<F: Float>(
    z_t: &Tensor<F>,
    eps_pred: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    limit: f64,
) -> Result<Tensor<F>> {
    if !(limit > 0.0) {
        return Err(Error::Config(format!("x0 clip limit must be positive, got {limit}")));
    }
    if limit.is_infinite() {
        return ddim_step(z_t, eps_pred, t, t_prev, schedule, 0.0);
    }
    schedule.check_t(t)?;
    if t_prev > t {
        return Err(Error::Config(format!("DDIM step must go backwards: {t} -> {t_prev}")));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let x0 = predict_x0(z_t, eps_pred, t, schedule)?.map(|v| F::c(v.f64().clamp(-limit, limit)));
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab_t = schedule.alphabar(t);
    let (s, n) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let eps = z_t.zip_map(&x0, |z, x| F::c((z.f64() - s * x.f64()) / n))?;
    let ab = schedule.alphabar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(&eps, |x, e| F::c(a * x.f64() + b * e.f64()))?)
}

/// Evenly spaced steps `floor(k T / n)` for `k = n..1`, duplicates removed.
/// The sampler appends a final step to 0.
pub fn sampling_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::Config(format!(
            "sampler steps must be in [1, {total}], got {num_steps}"
        )));
    }
    let mut ts: Vec<usize> = (1..=num_steps).rev().map(|k| k * total / num_steps).collect();
    ts.dedup();
    ts.retain(|&t| t >= 1);
    Ok(ts)
}

/// Norm-wise relative error `‖a − b‖ / ‖b‖`. At large t the f32 rounding of
/// z_t is amplified by 1/√ᾱ_t, so single elements can exceed what the norm
/// reports.
pub fn recovery_error<F: Float>(estimate: &Tensor<F>, truth: &Tensor<F>) -> f64 {
    let num: f64 = estimate
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    let den: f64 = truth.data().iter().map(|b| b.f64().powi(2)).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Runs DDIM from ẑ_T ~ N(0, I) (drawn from `seed`) down to ẑ₀.
///
/// `denoise(z_t, t)` returns ε̂ of the same shape; any conditioning is
/// captured by the closure.
pub fn sample<F: Float>(
    denoise: impl FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
    schedule: &NoiseSchedule,
    num_steps: usize,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<F>> {
    sample_clipped(denoise, schedule, num_steps, shape, seed, None)
}

/// [`sample`] with optional ẑ₀ clipping at every step.
pub fn sample_clipped<F: Float>(
    mut denoise: impl FnMut(&Tensor<F>, usize) -> Result<Tensor<F>>,
    schedule: &NoiseSchedule,
    num_steps: usize,
    shape: &[usize],
    seed: u64,
    clip: Option<f64>,
) -> Result<Tensor<F>> {
    let ts = sampling_timesteps(schedule.steps(), num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::<F>::randn(shape, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = denoise(&z, t)?;
        if eps.shape() != shape {
            return Err(shape_err("denoise output", shape, eps.shape()));
        }
        z = match clip {
            Some(limit) => ddim_step_clipped(&z, &eps, t, t_prev, schedule, limit)?,
            None => ddim_step(&z, &eps, t, t_prev, schedule, 0.0)?,
        };
        z.ensure_finite("DDIM sampling")?;
    }
    Ok(z)
}
