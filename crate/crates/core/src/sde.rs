//! Noise schedule, closed-form forward marginals and Euler-type integrators
//! for the mean-anchored diffusion
//!
//! ```text
//! dX_t = -1/2 Σ^{-1} (X_t - μ) β_t dt + sqrt(β_t) dW_t
//! ```
//!
//! and its reverse-time SDE / probability-flow ODE. `Σ` is diagonal per mel
//! bin and `μ` is either a full grid or a single row broadcast over frames.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::MelGrid;

/// Linear rate schedule `β_t = β0 + (β1 - β0) t / T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub t_max: f64,
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
            t_max: 1.0,
            t_min: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64, t_max: f64, t_min: f64) -> Result<Self> {
        let sched = Self {
            beta0,
            beta1,
            t_max,
            t_min,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta0 > 0.0
            && self.beta0 <= self.beta1
            && self.t_min > 0.0
            && self.t_min < self.t_max
            && self.beta1.is_finite()
            && self.t_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "schedule needs 0 < beta0 <= beta1 and 0 < t_min < t_max, got {self:?}"
            )))
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("t={t} outside [0, {}]", self.t_max)))
        }
    }

    fn rate(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * (t / self.t_max)
    }

    fn integral(&self, t: f64) -> f64 {
        self.beta0 * t + (self.beta1 - self.beta0) * t * t / (2.0 * self.t_max)
    }

    pub fn beta_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.rate(t))
    }

    /// `B(t) = ∫_0^t β_s ds`.
    pub fn cum_noise(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.integral(t))
    }

    /// `λ_t = 1 - exp(-B(t))`, the variance of the forward marginal when Σ = I.
    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(-(-self.integral(t)).exp_m1())
    }
}

/// The terminal law `N(μ, Σ)` the forward process is anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredGaussian {
    mu: MelGrid,
    sigma_diag: Vec<f64>,
}

impl AnchoredGaussian {
    pub fn new(mu: MelGrid, sigma_diag: Vec<f64>) -> Result<Self> {
        if sigma_diag.len() != mu.bins() {
            return Err(Error::shape(
                format!("{} variance entries", mu.bins()),
                sigma_diag.len(),
            ));
        }
        if let Some(i) = sigma_diag.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!(
                "sigma_diag[{i}] = {} must be positive",
                sigma_diag[i]
            )));
        }
        Ok(Self { mu, sigma_diag })
    }

    /// Σ = I.
    pub fn identity(mu: MelGrid) -> Self {
        let bins = mu.bins();
        Self {
            mu,
            sigma_diag: vec![1.0; bins],
        }
    }

    pub fn mu(&self) -> &MelGrid {
        &self.mu
    }

    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma_diag
    }

    /// μ expanded to `frames` rows (a single-row μ is broadcast).
    fn mu_for(&self, frames: usize, bins: usize) -> Result<Array2<f64>> {
        let (mf, mb) = self.mu.shape();
        if mb != bins || (mf != frames && mf != 1) {
            return Err(Error::shape(
                format!("grid broadcastable from anchor {:?}", (mf, mb)),
                format!("{:?}", (frames, bins)),
            ));
        }
        if mf == frames {
            Ok(self.mu.values().clone())
        } else {
            Ok(self.mu.values().broadcast((frames, bins)).unwrap().to_owned())
        }
    }
}

/// Closed-form mean and per-bin variance of `X_t | X_0 = x0`.
pub fn forward_marginal(
    anchor: &AnchoredGaussian,
    x0: &MelGrid,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<(MelGrid, Vec<f64>)> {
    let big_b = sched.cum_noise(t)?;
    let (frames, bins) = x0.shape();
    let mut mean = anchor.mu_for(frames, bins)?;
    let decay: Vec<f64> = anchor
        .sigma_diag
        .iter()
        .map(|s| (-big_b / (2.0 * s)).exp())
        .collect();
    Zip::indexed(&mut mean)
        .and(x0.values())
        .for_each(|(_, b), m, &x| *m += (x - *m) * decay[b]);
    let var = anchor
        .sigma_diag
        .iter()
        .map(|s| -s * (-big_b / s).exp_m1())
        .collect();
    Ok((MelGrid::from_array_unchecked(mean), var))
}

/// Draws `x_t = mean + sqrt(var) ξ`; returns `(x_t, ξ)`.
pub fn sample_forward<R: Rng + ?Sized>(
    anchor: &AnchoredGaussian,
    x0: &MelGrid,
    sched: &NoiseSchedule,
    t: f64,
    rng: &mut R,
) -> Result<(MelGrid, MelGrid)> {
    let (mean, var) = forward_marginal(anchor, x0, sched, t)?;
    let (frames, bins) = x0.shape();
    let xi = MelGrid::standard_normal(frames, bins, rng);
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let mut xt = mean.into_inner();
    Zip::indexed(&mut xt)
        .and(xi.values())
        .for_each(|(_, b), x, &z| *x += sd[b] * z);
    Ok((MelGrid::from_array_unchecked(xt), xi))
}

/// `∇ log N(x_t; mean, diag(var))`.
pub fn true_conditional_score(x_t: &MelGrid, mean: &MelGrid, var_diag: &[f64]) -> Result<MelGrid> {
    x_t.ensure_same_shape(mean, "x_t")?;
    if var_diag.len() != x_t.bins() {
        return Err(Error::shape(x_t.bins(), var_diag.len()));
    }
    if let Some(index) = var_diag.iter().position(|v| *v <= 0.0) {
        return Err(Error::Singular { index });
    }
    let mut out = x_t.values() - mean.values();
    Zip::indexed(&mut out).for_each(|(_, b), v| *v = -*v / var_diag[b]);
    Ok(MelGrid::from_array_unchecked(out))
}

/// Euler–Maruyama integration of the forward SDE over `[0, t_max]`,
/// returning a snapshot every `snapshot_every` steps (the final state is
/// always the last entry).
pub fn simulate_forward_em_snapshots<R: Rng + ?Sized>(
    anchor: &AnchoredGaussian,
    x0: &MelGrid,
    sched: &NoiseSchedule,
    n_steps: usize,
    snapshot_every: usize,
    rng: &mut R,
) -> Result<Vec<MelGrid>> {
    if n_steps == 0 || snapshot_every == 0 {
        return Err(Error::Invalid("n_steps and snapshot interval must be >= 1".into()));
    }
    let (frames, bins) = x0.shape();
    let mu = anchor.mu_for(frames, bins)?;
    let inv_sigma: Vec<f64> = anchor.sigma_diag.iter().map(|s| 1.0 / s).collect();
    let dt = sched.t_max / n_steps as f64;
    let mut x = x0.values().clone();
    let mut snapshots = Vec::with_capacity(n_steps / snapshot_every + 1);
    for k in 0..n_steps {
        // midpoint rate: exact step average for the linear schedule
        let beta = sched.rate((k as f64 + 0.5) * dt);
        let noise_scale = (beta * dt).sqrt();
        Zip::indexed(&mut x).and(&mu).for_each(|(_, b), x, &m| {
            let z: f64 = rng.sample(StandardNormal);
            *x += -0.5 * inv_sigma[b] * (*x - m) * beta * dt + noise_scale * z;
        });
        if (k + 1) % snapshot_every == 0 || k + 1 == n_steps {
            snapshots.push(MelGrid::from_array_unchecked(x.clone()));
        }
    }
    Ok(snapshots)
}

/// Euler–Maruyama integration of the forward SDE; returns `X_T`.
pub fn simulate_forward_em<R: Rng + ?Sized>(
    anchor: &AnchoredGaussian,
    x0: &MelGrid,
    sched: &NoiseSchedule,
    n_steps: usize,
    rng: &mut R,
) -> Result<MelGrid> {
    let mut snaps = simulate_forward_em_snapshots(anchor, x0, sched, n_steps, n_steps, rng)?;
    Ok(snaps.pop().expect("at least one snapshot"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Sde,
    Ode,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sde" => Ok(Self::Sde),
            "ode" => Ok(Self::Ode),
            other => Err(Error::Invalid(format!("unknown sampler mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sde => "sde",
            Self::Ode => "ode",
        })
    }
}

fn check_reverse_step(
    x: &MelGrid,
    score: &MelGrid,
    sched: &NoiseSchedule,
    t: f64,
    dt: f64,
) -> Result<f64> {
    x.ensure_same_shape(score, "state")?;
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Domain(format!("step size {dt} must be positive")));
    }
    let slack = 1e-9 * sched.t_max;
    if t - dt < sched.t_min - slack {
        return Err(Error::Domain(format!(
            "step from t={t} by dt={dt} passes t_min={}",
            sched.t_min
        )));
    }
    sched.beta_at(t)
}

/// One backward Euler–Maruyama step of the reverse-time SDE from `t` to `t - dt`.
pub fn reverse_step_sde<R: Rng + ?Sized>(
    x: &MelGrid,
    score: &MelGrid,
    anchor: &AnchoredGaussian,
    sched: &NoiseSchedule,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<MelGrid> {
    let beta = check_reverse_step(x, score, sched, t, dt)?;
    let (frames, bins) = x.shape();
    let mu = anchor.mu_for(frames, bins)?;
    let noise_scale = (beta * dt).sqrt();
    let mut out = x.values().clone();
    Zip::indexed(&mut out)
        .and(&mu)
        .and(score.values())
        .for_each(|(_, b), x, &m, &s| {
            let drift = -0.5 * (*x - m) / anchor.sigma_diag[b] * beta - beta * s;
            let z: f64 = rng.sample(StandardNormal);
            *x += -drift * dt + noise_scale * z;
        });
    Ok(MelGrid::from_array_unchecked(out))
}

/// One backward Euler step of the probability-flow ODE from `t` to `t - dt`.
pub fn reverse_step_ode(
    x: &MelGrid,
    score: &MelGrid,
    anchor: &AnchoredGaussian,
    sched: &NoiseSchedule,
    t: f64,
    dt: f64,
) -> Result<MelGrid> {
    let beta = check_reverse_step(x, score, sched, t, dt)?;
    let (frames, bins) = x.shape();
    let mu = anchor.mu_for(frames, bins)?;
    let mut out = x.values().clone();
    Zip::indexed(&mut out)
        .and(&mu)
        .and(score.values())
        .for_each(|(_, b), x, &m, &s| {
            let drift = 0.5 * (-(*x - m) / anchor.sigma_diag[b] - s) * beta;
            *x -= drift * dt;
        });
    Ok(MelGrid::from_array_unchecked(out))
}

/// Draws `X_T ~ N(μ, Σ / temperature)` and integrates back to `t_min` with
/// `n_steps` uniform steps. `score_fn(x, t)` supplies the score estimate.
pub fn sample_reverse<F, R>(
    score_fn: F,
    anchor: &AnchoredGaussian,
    sched: &NoiseSchedule,
    n_steps: usize,
    mode: SamplerMode,
    temperature: f64,
    rng: &mut R,
) -> Result<MelGrid>
where
    F: Fn(&MelGrid, f64) -> MelGrid,
    R: Rng + ?Sized,
{
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be >= 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    let (frames, bins) = anchor.mu.shape();
    let mut x = anchor.mu.values().clone();
    Zip::indexed(&mut x).for_each(|(_, b), v| {
        let z: f64 = rng.sample(StandardNormal);
        *v += (anchor.sigma_diag[b] / temperature).sqrt() * z;
    });
    let mut x = MelGrid::from_array_unchecked(x);
    debug_assert_eq!(x.shape(), (frames, bins));
    let dt = (sched.t_max - sched.t_min) / n_steps as f64;
    for k in 0..n_steps {
        let t = sched.t_max - k as f64 * dt;
        let score = score_fn(&x, t);
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score output at reverse step {k}")));
        }
        x = match mode {
            SamplerMode::Sde => reverse_step_sde(&x, &score, anchor, sched, t, dt, rng)?,
            SamplerMode::Ode => reverse_step_ode(&x, &score, anchor, sched, t, dt)?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    fn grid(v: f64) -> MelGrid {
        MelGrid::filled(1, 1, v).unwrap()
    }

    #[test]
    fn linear_schedule_values() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta_at(0.0).unwrap(), 0.05);
        assert_eq!(s.beta_at(1.0).unwrap(), 20.0);
        assert_relative_eq!(s.beta_at(0.5).unwrap(), 10.025, epsilon = 1e-12);
        assert_eq!(s.cum_noise(0.0).unwrap(), 0.0);
        assert_relative_eq!(s.cum_noise(1.0).unwrap(), 10.025, epsilon = 1e-12);
        assert_eq!(s.lambda_at(0.0).unwrap(), 0.0);
        assert!(s.beta_at(1.5).is_err());
        assert!(s.cum_noise(-0.1).is_err());
        assert!(NoiseSchedule::new(0.0, 1.0, 1.0, 1e-3).is_err());
        assert!(NoiseSchedule::new(2.0, 1.0, 1.0, 1e-3).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn cum_noise_matches_simpson_quadrature() {
        let s = NoiseSchedule::default();
        for &t in &[0.1, 0.5, 0.77, 1.0] {
            let n = 2000;
            let h = t / n as f64;
            let mut acc = s.beta_at(0.0).unwrap() + s.beta_at(t).unwrap();
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * s.beta_at(i as f64 * h).unwrap();
            }
            let quad = acc * h / 3.0;
            assert!((quad - s.cum_noise(t).unwrap()).abs() < 1e-10);
        }
        // frozen from the quadrature above
        assert_relative_eq!(s.cum_noise(0.5).unwrap(), 2.51875, epsilon = 1e-10);
    }

    #[test]
    fn lambda_at_closed_forms() {
        // B(t) = ln 4 on a schedule with beta0 = beta1 = ln 4, T = 1 at t = 1
        let s = NoiseSchedule::new(4f64.ln(), 4f64.ln(), 1.0, 1e-3).unwrap();
        assert_relative_eq!(s.lambda_at(1.0).unwrap(), 0.75, epsilon = 1e-15);
        let d = NoiseSchedule::default();
        assert_relative_eq!(
            d.lambda_at(1.0).unwrap(),
            1.0 - (-10.025f64).exp(),
            epsilon = 1e-15
        );
        assert_relative_eq!(d.lambda_at(1.0).unwrap(), 0.9999557, epsilon = 1e-7);
    }

    #[test]
    fn forward_marginal_cases() {
        let s = NoiseSchedule::new(4f64.ln(), 4f64.ln(), 1.0, 1e-3).unwrap();
        let anchor = AnchoredGaussian::identity(grid(0.0));
        let (m, v) = forward_marginal(&anchor, &grid(2.0), &s, 1.0).unwrap();
        assert_relative_eq!(m.values()[[0, 0]], 1.0, epsilon = 1e-15);
        assert_relative_eq!(v[0], 0.75, epsilon = 1e-15);

        let (m, v) = forward_marginal(&anchor, &grid(2.0), &s, 0.0).unwrap();
        assert_eq!(m.values()[[0, 0]], 2.0);
        assert_eq!(v[0], 0.0);

        let d = NoiseSchedule::default();
        let (m, v) = forward_marginal(&anchor, &grid(2.0), &d, 1.0).unwrap();
        assert!(m.values()[[0, 0]].abs() < 0.007 * 2.0);
        assert_relative_eq!(v[0], 0.99996, epsilon = 1e-5);
    }

    #[test]
    fn forward_marginal_general_sigma_and_shape_errors() {
        let s = NoiseSchedule::default();
        let mu = MelGrid::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let anchor = AnchoredGaussian::new(mu, vec![0.5, 2.0]).unwrap();
        let x0 = MelGrid::from_rows(&[vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let (m, v) = forward_marginal(&anchor, &x0, &s, 0.3).unwrap();
        let b = s.cum_noise(0.3).unwrap();
        assert_relative_eq!(m.values()[[0, 0]], 1.0 + 2.0 * (-b / 1.0).exp(), epsilon = 1e-14);
        assert_relative_eq!(m.values()[[1, 1]], -1.0 + 1.0 * (-b / 4.0).exp(), epsilon = 1e-14);
        assert_relative_eq!(v[1], 2.0 * (1.0 - (-b / 2.0).exp()), epsilon = 1e-14);

        let wide = MelGrid::zeros(2, 3).unwrap();
        assert!(matches!(
            forward_marginal(&anchor, &wide, &s, 0.3),
            Err(Error::Shape { .. })
        ));
        assert!(AnchoredGaussian::new(grid(0.0), vec![0.0]).is_err());
        assert!(AnchoredGaussian::new(grid(0.0), vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn sample_forward_is_exact_at_zero_and_deterministic() {
        let s = NoiseSchedule::default();
        let x0 = MelGrid::from_rows(&[vec![0.3, -2.0], vec![1.0, 4.0]]).unwrap();
        let anchor = AnchoredGaussian::identity(MelGrid::zeros(2, 2).unwrap());
        let (xt, _) = sample_forward(&anchor, &x0, &s, 0.0, &mut seeded(1)).unwrap();
        assert_eq!(xt, x0);
        let a = sample_forward(&anchor, &x0, &s, 0.4, &mut seeded(9)).unwrap();
        let b = sample_forward(&anchor, &x0, &s, 0.4, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_forward_moments_within_three_standard_errors() {
        let s = NoiseSchedule::default();
        let n = 100_000;
        let x0 = MelGrid::filled(n, 1, 2.0).unwrap();
        let anchor = AnchoredGaussian::identity(grid(-1.0));
        let t = 0.2;
        let (xt, _) = sample_forward(&anchor, &x0, &s, t, &mut seeded(3)).unwrap();
        let (m, v) = forward_marginal(&anchor, &grid(2.0), &s, t).unwrap();
        let mean = xt.values().mean().unwrap();
        let var = xt.values().var(1.0);
        assert!((mean - m.values()[[0, 0]]).abs() < 3.0 * (v[0] / n as f64).sqrt());
        assert!((var - v[0]).abs() < 3.0 * v[0] * (2.0 / (n as f64 - 1.0)).sqrt());
    }

    #[test]
    fn score_identity_and_simple_values() {
        let s = NoiseSchedule::default();
        let x0 = MelGrid::from_rows(&vec![vec![0.5, 1.5, -0.2]; 4]).unwrap();
        let anchor = AnchoredGaussian::identity(MelGrid::zeros(1, 3).unwrap());
        let t = 0.35;
        let (xt, xi) = sample_forward(&anchor, &x0, &s, t, &mut seeded(5)).unwrap();
        let (mean, var) = forward_marginal(&anchor, &x0, &s, t).unwrap();
        let score = true_conditional_score(&xt, &mean, &var).unwrap();
        let lam = s.lambda_at(t).unwrap();
        for (sc, z) in score.values().iter().zip(xi.values()) {
            assert_relative_eq!(*sc, -z / lam.sqrt(), max_relative = 1e-12);
        }

        let at_mode = true_conditional_score(&grid(0.7), &grid(0.7), &[0.3]).unwrap();
        assert_eq!(at_mode.values()[[0, 0]], 0.0);
        let v = true_conditional_score(&grid(1.0), &grid(0.0), &[0.75]).unwrap();
        assert_relative_eq!(v.values()[[0, 0]], -4.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(
            true_conditional_score(&grid(1.0), &grid(0.0), &[0.0]),
            Err(Error::Singular { index: 0 })
        ));
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let log_density = |x: f64, m: f64, v: f64| {
            -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m) * (x - m) / (2.0 * v)
        };
        let h = 1e-5;
        for &(x, m, v) in &[(0.3, -0.2, 0.4), (2.0, 1.0, 0.01), (-5.0, 3.0, 7.5)] {
            let fd = (log_density(x + h, m, v) - log_density(x - h, m, v)) / (2.0 * h);
            let an = true_conditional_score(&grid(x), &grid(m), &[v]).unwrap().values()[[0, 0]];
            assert!(((fd - an) / an).abs() < 1e-6, "{fd} vs {an}");
        }
    }

    #[test]
    fn zero_schedule_leaves_state_fixed() {
        let s = NoiseSchedule {
            beta0: 0.0,
            beta1: 0.0,
            t_max: 1.0,
            t_min: 1e-3,
        };
        let x0 = MelGrid::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let anchor = AnchoredGaussian::identity(MelGrid::zeros(1, 2).unwrap());
        let xt = simulate_forward_em(&anchor, &x0, &s, 50, &mut seeded(0)).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn reverse_steps_basic_contracts() {
        let s = NoiseSchedule::default();
        let mu = MelGrid::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let anchor = AnchoredGaussian::new(mu.clone(), vec![1.0, 0.5]).unwrap();
        // Stationary-law score cancels the ODE drift.
        let x = MelGrid::from_rows(&[vec![2.0, 1.0]]).unwrap();
        let stationary = true_conditional_score(&x, &mu, anchor.sigma_diag()).unwrap();
        let y = reverse_step_ode(&x, &stationary, &anchor, &s, 0.5, 0.01).unwrap();
        for (a, b) in y.values().iter().zip(x.values()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
        let y2 = reverse_step_ode(&x, &stationary, &anchor, &s, 0.5, 0.01).unwrap();
        assert_eq!(y, y2);

        // Zero drift at the anchor with a point-mass score: mean over draws stays at μ.
        let zero = MelGrid::zeros(1, 2).unwrap();
        let mut rng = seeded(11);
        let n = 20_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let z = reverse_step_sde(&mu, &zero, &anchor, &s, 0.5, 0.01, &mut rng).unwrap();
            acc[0] += z.values()[[0, 0]];
            acc[1] += z.values()[[0, 1]];
        }
        let sd = (s.beta_at(0.5).unwrap() * 0.01).sqrt();
        assert!((acc[0] / n as f64 - 0.5).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((acc[1] / n as f64 + 1.0).abs() < 4.0 * sd / (n as f64).sqrt());

        let a = reverse_step_sde(&x, &zero, &anchor, &s, 0.5, 0.01, &mut seeded(2)).unwrap();
        let b = reverse_step_sde(&x, &zero, &anchor, &s, 0.5, 0.01, &mut seeded(2)).unwrap();
        assert_eq!(a, b);

        assert!(reverse_step_ode(&x, &zero, &anchor, &s, 0.005, 0.01).is_err());
        assert!(reverse_step_ode(&x, &zero, &anchor, &s, 0.5, 0.0).is_err());
    }

    #[test]
    fn single_step_ode_formula() {
        let s = NoiseSchedule::default();
        let anchor = AnchoredGaussian::identity(grid(1.0));
        let zero_score = |x: &MelGrid, _t: f64| MelGrid::zeros(x.frames(), x.bins()).unwrap();
        let out = sample_reverse(zero_score, &anchor, &s, 1, SamplerMode::Ode, 1.0, &mut seeded(4))
            .unwrap();
        // replay the prior draw
        let mut rng = seeded(4);
        let z: f64 = rng.sample(StandardNormal);
        let x_t = 1.0 + z;
        let dt = s.t_max - s.t_min;
        let expected = x_t - 0.5 * (-(x_t - 1.0)) * 20.0 * dt;
        assert_relative_eq!(out.values()[[0, 0]], expected, epsilon = 1e-12);
    }

    #[test]
    fn sample_reverse_rejects_bad_input() {
        let s = NoiseSchedule::default();
        let anchor = AnchoredGaussian::identity(grid(0.0));
        let f = |x: &MelGrid, _t: f64| x.clone();
        assert!(sample_reverse(f, &anchor, &s, 0, SamplerMode::Ode, 1.0, &mut seeded(0)).is_err());
        assert!(sample_reverse(f, &anchor, &s, 5, SamplerMode::Ode, 0.0, &mut seeded(0)).is_err());
        let nan = |_x: &MelGrid, t: f64| {
            MelGrid::from_array_unchecked(Array2::from_elem((1, 1), if t < 0.5 { f64::NAN } else { 0.0 }))
        };
        let err = sample_reverse(nan, &anchor, &s, 10, SamplerMode::Sde, 1.0, &mut seeded(0))
            .unwrap_err();
        assert!(err.to_string().contains("step 6"), "{err}");
    }
}
