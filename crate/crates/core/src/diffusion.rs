//! Variance-preserving diffusion arithmetic: schedule, closed-form forward
//! noising, the Gaussian posterior `q(z_{t-1} | z_t, z_0)` and ancestral
//! sampling steps. Nothing here knows about networks.
//!
//! Timesteps are 1-indexed; index 0 holds the `alpha_bar = 1` sentinel.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Latent,
    Pixel,
}

/// Dense `C × H × W` array in either latent or pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentArray {
    shape: [usize; 3],
    data: Vec<f64>,
    pub space: Space,
}

impl LatentArray {
    pub fn new(shape: [usize; 3], data: Vec<f64>, space: Space) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            Validation,
            "shape {shape:?} needs {} values, got {}",
            shape.iter().product::<usize>(),
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Numerical,
            "latent contains non-finite values"
        );
        Ok(Self { shape, data, space })
    }

    pub fn zeros(shape: [usize; 3], space: Space) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
            space,
        }
    }

    pub fn filled(shape: [usize; 3], value: f64, space: Space) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            space,
        }
    }

    pub fn standard_normal(shape: [usize; 3], space: Space, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            space,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Validation,
            "{what}: shape {:?} does not match {:?}",
            other.shape,
            self.shape
        );
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    fn lincomb(&self, a: f64, other: &Self, b: f64) -> Self {
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            space: self.space,
        }
    }
}

/// Serializable description from which a schedule is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub stride: usize,
}

impl ScheduleDescriptor {
    pub fn new(timesteps: usize, beta_min: f64, beta_max: f64) -> Self {
        Self {
            timesteps,
            beta_min,
            beta_max,
            stride: default_stride(timesteps),
        }
    }
}

/// 1 for short chains, otherwise about fifty sampling steps.
pub fn default_stride(timesteps: usize) -> usize {
    if timesteps <= 100 {
        1
    } else {
        (timesteps / 50).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    /// `alpha[t]` for `t` in `1..=T`; `alpha[0]` is an unused 1.0.
    alpha: Vec<f64>,
    /// Cumulative products with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

/// Linear-beta schedule with `alpha_t = 1 - beta_t`.
pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    ensure!(timesteps >= 1, Validation, "need at least one diffusion step");
    ensure!(
        beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
        Validation,
        "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
    );
    let mut alpha = Vec::with_capacity(timesteps + 1);
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha.push(1.0);
    alpha_bar.push(1.0);
    for t in 1..=timesteps {
        let frac = if timesteps == 1 {
            0.0
        } else {
            (t - 1) as f64 / (timesteps - 1) as f64
        };
        let beta = beta_min + frac * (beta_max - beta_min);
        let a = 1.0 - beta;
        alpha.push(a);
        alpha_bar.push(alpha_bar[t - 1] * a);
    }
    Ok(NoiseSchedule {
        timesteps,
        beta_min,
        beta_max,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_descriptor(d: &ScheduleDescriptor) -> Result<Self> {
        ensure!(d.stride >= 1, Validation, "sampling stride must be >= 1");
        make_schedule(d.timesteps, d.beta_min, d.beta_max)
    }

    pub fn descriptor(&self, stride: usize) -> ScheduleDescriptor {
        ScheduleDescriptor {
            timesteps: self.timesteps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            stride,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn check(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.timesteps).contains(&t),
            Validation,
            "timestep {t} outside [1, {}]",
            self.timesteps
        );
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t])
    }

    /// Cumulative product; `t = 0` returns the sentinel 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        ensure!(
            t <= self.timesteps,
            Validation,
            "timestep {t} exceeds {}",
            self.timesteps
        );
        Ok(self.alpha_bar[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Retained timesteps for strided sampling, paired with the step each
    /// transitions to: `[(T, T-s), …, (t_k, 0)]`.
    pub fn reverse_steps(&self, stride: usize) -> Result<Vec<(usize, usize)>> {
        ensure!(stride >= 1, Validation, "sampling stride must be >= 1");
        let mut kept: Vec<usize> = (0..)
            .map(|k| self.timesteps as isize - (k * stride) as isize)
            .take_while(|&t| t >= 1)
            .map(|t| t as usize)
            .collect();
        kept.push(0);
        Ok(kept.windows(2).map(|w| (w[0], w[1])).collect())
    }

    /// Coefficients `(c_z0, c_zt, variance)` of `q(z_prev | z_t, z_0)`.
    pub fn posterior_coefficients(&self, t: usize, prev: usize) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        ensure!(prev < t, Validation, "posterior target {prev} must precede {t}");
        let ab_t = self.alpha_bar[t];
        let ab_p = self.alpha_bar[prev];
        // per-hop retention; equals alpha_t when prev = t - 1
        let a = if prev + 1 == t { self.alpha[t] } else { ab_t / ab_p };
        let denom = 1.0 - ab_t;
        let c0 = ab_p.sqrt() * (1.0 - a) / denom;
        let ct = a.sqrt() * (1.0 - ab_p) / denom;
        let var = (1.0 - ab_p) / denom * (1.0 - a);
        Ok((c0, ct, var))
    }
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(
    z0: &LatentArray,
    t: usize,
    eps: &LatentArray,
    sched: &NoiseSchedule,
) -> Result<LatentArray> {
    sched.check(t)?;
    z0.same_shape(eps, "noise")?;
    let ab = sched.alpha_bar[t];
    Ok(z0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Mean and variance of `q(z_{t-1} | z_t, z_0 = z0_hat)`.
pub fn posterior_params(
    z_t: &LatentArray,
    z0_hat: &LatentArray,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(LatentArray, f64)> {
    posterior_between(z_t, z0_hat, t, t.saturating_sub(1), sched)
}

/// Posterior between two retained steps of a strided chain.
pub fn posterior_between(
    z_t: &LatentArray,
    z0_hat: &LatentArray,
    t: usize,
    prev: usize,
    sched: &NoiseSchedule,
) -> Result<(LatentArray, f64)> {
    z_t.same_shape(z0_hat, "z0 estimate")?;
    let (c0, ct, var) = sched.posterior_coefficients(t, prev)?;
    if prev == 0 {
        // alpha_bar_0 = 1 forces c0 = 1, ct = 0, var = 0
        return Ok((z0_hat.clone(), 0.0));
    }
    Ok((z0_hat.lincomb(c0, z_t, ct), var))
}

/// One ancestral step `t → t-1`.
pub fn sample_step(
    z_t: &LatentArray,
    z0_hat: &LatentArray,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentArray> {
    sample_between(z_t, z0_hat, t, t.saturating_sub(1), sched, rng)
}

/// One ancestral step `t → prev`; the final hop to 0 returns the mean.
pub fn sample_between(
    z_t: &LatentArray,
    z0_hat: &LatentArray,
    t: usize,
    prev: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentArray> {
    let (mu, var) = posterior_between(z_t, z0_hat, t, prev, sched)?;
    if var == 0.0 {
        return Ok(mu);
    }
    let sd = var.sqrt();
    let data = mu
        .data
        .iter()
        .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(LatentArray {
        shape: mu.shape,
        data,
        space: mu.space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> LatentArray {
        LatentArray::new([1, 1, 1], vec![v], Space::Latent).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha(1).unwrap(), 0.9);
        assert_eq!(s.alpha_bar(1).unwrap(), 0.9);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_schedule_decays_and_is_consistent() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // independent cumulative product
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (t - 1) as f64 / 999.0 * (0.02 - 1e-4);
            prod *= 1.0 - beta;
            let ab = s.alpha_bar(t).unwrap();
            assert!((ab - prod).abs() <= 1e-12 * prod);
            assert!(ab < s.alpha_bar(t - 1).unwrap());
            let ratio = ab / s.alpha_bar(t - 1).unwrap();
            assert!((ratio - s.alpha(t).unwrap()).abs() <= 1e-12 * ratio);
        }
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
    }

    #[test]
    fn bad_ranges_rejected() {
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let z0 = LatentArray::new([1, 2, 2], vec![1.0, -2.0, 0.5, 3.0], Space::Latent).unwrap();
        let zeros = LatentArray::zeros([1, 2, 2], Space::Latent);
        let out = forward_noise(&z0, 7, &zeros, &s).unwrap();
        let k = s.alpha_bar(7).unwrap().sqrt();
        for (o, z) in out.data().iter().zip(z0.data()) {
            assert_eq!(*o, k * z);
        }
        assert!(forward_noise(&z0, 0, &zeros, &s).is_err());
        assert!(forward_noise(&z0, 51, &zeros, &s).is_err());
        let wrong = LatentArray::zeros([1, 1, 4], Space::Latent);
        assert!(forward_noise(&z0, 3, &wrong, &s).is_err());
    }

    #[test]
    fn posterior_degenerates_at_first_step() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let zt = scalar(0.7);
        let z0 = scalar(-1.25);
        let (mu, var) = posterior_params(&zt, &z0, 1, &s).unwrap();
        assert_eq!(mu, z0);
        assert_eq!(var, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_step(&zt, &z0, 1, &s, &mut rng).unwrap(), z0);
    }

    #[test]
    fn posterior_constant_input() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let t = 9;
        let (a, ab, abp) = (
            s.alpha(t).unwrap(),
            s.alpha_bar(t).unwrap(),
            s.alpha_bar(t - 1).unwrap(),
        );
        let c1 = abp.sqrt() * (1.0 - a) / (1.0 - ab);
        let c2 = a.sqrt() * (1.0 - abp) / (1.0 - ab);
        let c = LatentArray::filled([2, 3, 3], 0.4, Space::Latent);
        let (mu, var) = posterior_params(&c, &c, t, &s).unwrap();
        for v in mu.data() {
            assert!((v - 0.4 * (c1 + c2)).abs() < 1e-15);
        }
        assert!((var - (1.0 - abp) / (1.0 - ab) * (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let zt = LatentArray::filled([1, 4, 4], 0.3, Space::Latent);
        let z0 = LatentArray::filled([1, 4, 4], -0.2, Space::Latent);
        let a = sample_step(&zt, &z0, 10, &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_step(&zt, &z0, 10, &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_steps_cover_the_chain() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let steps = s.reverse_steps(20).unwrap();
        assert_eq!(steps.first(), Some(&(1000, 980)));
        assert_eq!(steps.last(), Some(&(20, 0)));
        assert_eq!(steps.len(), 50);
        let s = make_schedule(10, 1e-3, 0.1).unwrap();
        let steps = s.reverse_steps(1).unwrap();
        assert_eq!(steps.len(), 10);
        assert_eq!(steps.last(), Some(&(1, 0)));
        let steps = s.reverse_steps(4).unwrap();
        assert_eq!(steps, vec![(10, 6), (6, 2), (2, 0)]);
    }

    #[test]
    fn strided_posterior_reduces_to_single_step() {
        let s = make_schedule(30, 1e-3, 0.1).unwrap();
        let t = 12;
        let (c0, ct, v) = s.posterior_coefficients(t, t - 1).unwrap();
        let hop = s.alpha_bar(t).unwrap() / s.alpha_bar(t - 1).unwrap();
        let ab = s.alpha_bar(t).unwrap();
        let abp = s.alpha_bar(t - 1).unwrap();
        assert!((c0 - abp.sqrt() * (1.0 - hop) / (1.0 - ab)).abs() < 1e-12);
        assert!((ct - hop.sqrt() * (1.0 - abp) / (1.0 - ab)).abs() < 1e-12);
        assert!((v - (1.0 - abp) / (1.0 - ab) * (1.0 - hop)).abs() < 1e-12);
    }
}
