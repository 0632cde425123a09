//! Numerical self-checks: Monte-Carlo moments of the forward process,
//! reverse-sampler recovery, MAS against brute force, and gradient checks.

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::align::{self, brute_force_alignment, mas_search, EncodedMeans};
use crate::corpus::{CorpusConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mel::MelGrid;
use crate::model::{grad_check, GradCheckReport, ModelParams};
use crate::par;
use crate::rng;
use crate::sde::{
    forward_marginal, sample_reverse, simulate_forward_em_snapshots, AnchoredGaussian, NoiseSchedule, SamplerMode,
};
use crate::training::{align_item, item_objective, loss_dp, DiffusionDraw, LossWeights, TrainConfig, TrainItem};

/// Paths per worker chunk; fixes the random streams independent of thread count.
const CHUNK: usize = 1000;

// Disjoint stream namespaces so no two checks share random numbers.
const FORWARD_STREAMS: u64 = 1 << 32;
const RECOVERY_STREAMS: u64 = 2 << 32;

/// Empirical versus closed-form moments at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub analytic_mean: f64,
    pub empirical_mean: f64,
    pub analytic_var: f64,
    pub empirical_var: f64,
    pub mean_stderr: f64,
    pub var_stderr: f64,
}

pub const MOMENT_HEADER: &str = "t,analytic_mean,empirical_mean,analytic_var,empirical_var,mean_stderr,var_stderr";

impl MomentRow {
    /// Both moments within `k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        (self.empirical_mean - self.analytic_mean).abs() <= k * self.mean_stderr
            && (self.empirical_var - self.analytic_var).abs() <= k * self.var_stderr
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.t,
            self.analytic_mean,
            self.empirical_mean,
            self.analytic_var,
            self.empirical_var,
            self.mean_stderr,
            self.var_stderr
        )
    }
}

/// Forward-marginal experiment on one scalar coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardCheck {
    pub x0: f64,
    pub mu: f64,
    pub sigma: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_times: usize,
}

impl Default for ForwardCheck {
    fn default() -> Self {
        Self {
            x0: 2.0,
            mu: -1.0,
            sigma: 1.5,
            n_paths: 10_000,
            n_steps: 1000,
            n_times: 10,
        }
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Simulates Euler–Maruyama paths and compares mean and variance with the
/// closed-form marginal at `n_times` evenly spaced times.
pub fn forward_moments(check: &ForwardCheck, sched: &NoiseSchedule, seed: u64) -> Result<Vec<MomentRow>> {
    if check.n_paths < 2 || check.n_times == 0 || !check.n_steps.is_multiple_of(check.n_times) {
        return Err(Error::Invalid("need >= 2 paths and n_steps divisible by n_times".into()));
    }
    let every = check.n_steps / check.n_times;
    let anchor = AnchoredGaussian::new(MelGrid::filled(1, 1, check.mu)?, vec![check.sigma])?;
    let chunks = check.n_paths.div_ceil(CHUNK);
    let per_chunk = par::map_range(chunks, |c| {
        let rows = CHUNK.min(check.n_paths - c * CHUNK);
        let x0 = MelGrid::filled(rows, 1, check.x0)?;
        let mut rng = rng::stream(seed, FORWARD_STREAMS + c as u64);
        simulate_forward_em_snapshots(&anchor, &x0, sched, check.n_steps, every, &mut rng)
    });
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(check.n_paths); check.n_times];
    for snaps in per_chunk {
        for (col, snap) in columns.iter_mut().zip(snaps?) {
            col.extend(snap.values().iter());
        }
    }
    let x0 = MelGrid::filled(1, 1, check.x0)?;
    let n = check.n_paths as f64;
    columns
        .iter()
        .enumerate()
        .map(|(i, col)| {
            let t = sched.t_max * ((i + 1) * every) as f64 / check.n_steps as f64;
            let (m, v) = forward_marginal(&anchor, &x0, sched, t)?;
            let (em, ev) = mean_var(col);
            Ok(MomentRow {
                t,
                analytic_mean: m.values()[[0, 0]],
                empirical_mean: em,
                analytic_var: v[0],
                empirical_var: ev,
                mean_stderr: (ev / n).sqrt(),
                var_stderr: ev * (2.0 / (n - 1.0)).sqrt(),
            })
        })
        .collect()
}

/// Relative deviation of the closed-form terminal marginal from `N(μ, Σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalLaw {
    pub cum_noise: f64,
    /// `|mean_T - μ| / |x0 - μ|`.
    pub mean_rel: f64,
    /// `|var_T - Σ| / Σ`.
    pub var_rel: f64,
}

pub fn terminal_law(x0: f64, mu: f64, sigma: f64, sched: &NoiseSchedule) -> Result<TerminalLaw> {
    if x0 == mu {
        return Err(Error::Invalid("x0 must differ from mu".into()));
    }
    let anchor = AnchoredGaussian::new(MelGrid::filled(1, 1, mu)?, vec![sigma])?;
    let (m, v) = forward_marginal(&anchor, &MelGrid::filled(1, 1, x0)?, sched, sched.t_max)?;
    Ok(TerminalLaw {
        cum_noise: sched.cum_noise(sched.t_max)?,
        mean_rel: (m.values()[[0, 0]] - mu).abs() / (x0 - mu).abs(),
        var_rel: (v[0] - sigma).abs() / sigma,
    })
}

/// Reverse sampling of Gaussian data with the exact marginal score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub mode: SamplerMode,
    pub n_samples: usize,
    pub n_steps: usize,
    pub data_mean: f64,
    pub data_var: f64,
    pub sample_mean: f64,
    pub sample_var: f64,
}

impl RecoveryReport {
    pub fn passes(&self, mean_tol: f64, var_rel_tol: f64) -> bool {
        (self.sample_mean - self.data_mean).abs() <= mean_tol
            && (self.sample_var - self.data_var).abs() <= var_rel_tol * self.data_var
    }
}

/// Data `N(data_mean, data_var)` pushed through the forward process anchored
/// at `N(0, 1)` stays Gaussian, so its score is known in closed form; the
/// reverse sampler driven by that score should return the data law.
pub fn reverse_recovery(
    data_mean: f64,
    data_var: f64,
    n_samples: usize,
    n_steps: usize,
    mode: SamplerMode,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<RecoveryReport> {
    if n_samples < 2 || data_var <= 0.0 {
        return Err(Error::Invalid("need >= 2 samples and positive data variance".into()));
    }
    let score = |x: &MelGrid, t: f64| -> MelGrid {
        let b = sched.cum_noise(t).unwrap_or(f64::NAN);
        let decay = (-b).exp();
        let m = data_mean * (-0.5 * b).exp();
        let v = (1.0 - decay) + data_var * decay;
        MelGrid::new(x.values().mapv(|xv| -(xv - m) / v)).unwrap_or_else(|_| x.clone())
    };
    let chunks = n_samples.div_ceil(CHUNK);
    let parts = par::map_range(chunks, |c| {
        let rows = CHUNK.min(n_samples - c * CHUNK);
        let anchor = AnchoredGaussian::identity(MelGrid::zeros(rows, 1)?);
        let mut rng = rng::stream(seed, RECOVERY_STREAMS + c as u64);
        sample_reverse(score, &anchor, sched, n_steps, mode, 1.0, &mut rng)
    });
    let mut values = Vec::with_capacity(n_samples);
    for p in parts {
        values.extend(p?.values().iter());
    }
    let (sample_mean, sample_var) = mean_var(&values);
    Ok(RecoveryReport {
        mode,
        n_samples,
        n_steps,
        data_mean,
        data_var,
        sample_mean,
        sample_var,
    })
}

/// MAS against exhaustive enumeration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MasSweep {
    pub exhaustive_instances: usize,
    pub random_instances: usize,
    pub mismatches: usize,
}

fn random_instance<R: Rng + ?Sized>(frames: usize, phonemes: usize, bins: usize, rng: &mut R) -> Result<(MelGrid, EncodedMeans)> {
    let y = MelGrid::standard_normal(frames, bins, rng);
    let m = EncodedMeans::new(Array2::from_shape_simple_fn((phonemes, bins), || rng.random_range(-1.5..1.5)))?;
    Ok((y, m))
}

fn agrees(y: &MelGrid, m: &EncodedMeans) -> Result<bool> {
    let fast = mas_search(y, m)?;
    let slow = brute_force_alignment(y, m)?;
    let ll = align::alignment_log_likelihood(y, m, &fast)?;
    Ok((ll - slow.log_likelihood).abs() <= 1e-9 * slow.log_likelihood.abs().max(1.0))
}

/// `per_size` instances for every `1 <= L <= F <= 6, L <= 4`, plus
/// `random` instances with `F` up to 12 and `L` up to 6.
pub fn mas_sweep(per_size: usize, random: usize, seed: u64) -> Result<MasSweep> {
    let mut sizes = Vec::new();
    for f in 1..=6 {
        for l in 1..=4.min(f) {
            for rep in 0..per_size {
                sizes.push((f, l, rep));
            }
        }
    }
    let exhaustive = par::map_slice(&sizes, |&(f, l, rep)| {
        let mut rng = rng::stream(seed, ((f * 8 + l) * 1_000_000 + rep) as u64);
        let (y, m) = random_instance(f, l, 2, &mut rng)?;
        agrees(&y, &m)
    });
    let randoms = par::map_range(random, |k| {
        let mut rng = rng::stream(seed ^ 0x9e37_79b9_7f4a_7c15, k as u64);
        let f = rng.random_range(1..=12);
        let l = rng.random_range(1..=6.min(f));
        let (y, m) = random_instance(f, l, 3, &mut rng)?;
        agrees(&y, &m)
    });
    let (exhaustive_instances, random_instances) = (exhaustive.len(), randoms.len());
    let mut mismatches = 0;
    for ok in exhaustive.into_iter().chain(randoms) {
        if !ok? {
            mismatches += 1;
        }
    }
    Ok(MasSweep {
        exhaustive_instances,
        random_instances,
        mismatches,
    })
}

/// Finite-difference checks of each loss term with the diffusion noise frozen.
pub fn loss_grad_checks(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cc = CorpusConfig {
        bins: 4,
        symbols_per_language: 3,
        ..CorpusConfig::default()
    };
    let mut rng = rng::seeded(seed);
    let spec = SyntheticSpec::generate(&cc, &mut rng)?;
    let tokens = spec.sample_tokens(spec.speakers[0].language, 4, &mut rng);
    let (mel, _) = spec.render(&tokens, 0, &mut rng)?;
    let item = TrainItem {
        phonemes: tokens,
        speaker: Some(0),
        language: Some(0),
        mel,
    };
    let cfg = TrainConfig {
        embed_dim: 6,
        hidden: 8,
        time_dim: 4,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg.model_config(spec.vocab.len(), spec.speakers.len(), cc.bins), seed)?;
    let alignment = align_item(&params, &item)?;
    let draw = DiffusionDraw::sample(item.mel.frames(), cc.bins, &cfg.schedule, &mut rng);
    // the duration predictor treats μ̃ as a constant
    let frozen = params.encode(&item.phonemes, item.speaker, item.language)?;
    let targets = align::durations_from_alignment(&alignment, frozen.len())?;
    let terms: [(&'static str, LossWeights); 3] = [
        ("L_enc", LossWeights { enc: 1.0, dp: 0.0, diff: 0.0 }),
        ("L_dp", LossWeights { enc: 0.0, dp: 1.0, diff: 0.0 }),
        ("L_diff", LossWeights { enc: 0.0, dp: 0.0, diff: 1.0 }),
    ];
    let mut out = Vec::new();
    for (name, w) in terms {
        let f = |p: &ModelParams| {
            let (l, g) = item_objective(p, &item, &alignment, &draw, &w, &cfg.schedule).expect("valid item");
            let dp = p
                .predict_log_durations(&frozen)
                .ok()
                .and_then(|pred| loss_dp(pred.as_slice()?, &targets).ok())
                .unwrap_or(f64::NAN);
            (w.enc * l.enc + w.diff * l.diff + w.dp * dp, g)
        };
        out.push((name, grad_check(f, &params, 1e-5, tol, &mut rng::stream(seed, 7))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_forward_check_agrees() {
        let check = ForwardCheck {
            n_paths: 2000,
            n_steps: 200,
            n_times: 5,
            ..ForwardCheck::default()
        };
        let rows = forward_moments(&check, &NoiseSchedule::default(), 3).unwrap();
        assert_eq!(rows.len(), 5);
        assert!((rows[4].t - 1.0).abs() < 1e-12);
        for r in &rows {
            assert!(r.within(4.0), "{r:?}");
        }
    }

    #[test]
    fn forward_check_independent_of_threading() {
        let check = ForwardCheck {
            n_paths: 2500,
            n_steps: 20,
            n_times: 2,
            ..ForwardCheck::default()
        };
        let sched = NoiseSchedule::default();
        let a = forward_moments(&check, &sched, 1).unwrap();
        let b = par::sequential(|| forward_moments(&check, &sched, 1).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn terminal_law_values() {
        let r = terminal_law(2.0, -1.0, 1.5, &NoiseSchedule::default()).unwrap();
        assert!((r.cum_noise - 10.025).abs() < 1e-12);
        // relative mean gap e^{-B/(2Σ)} and variance gap e^{-B/Σ}
        assert!((r.mean_rel - (-10.025f64 / 3.0).exp()).abs() < 1e-12);
        assert!((r.var_rel - (-10.025f64 / 1.5).exp()).abs() < 1e-12);
        assert!(terminal_law(1.0, 1.0, 1.0, &NoiseSchedule::default()).is_err());
    }

    #[test]
    fn small_recovery() {
        let sched = NoiseSchedule::default();
        for mode in [SamplerMode::Ode, SamplerMode::Sde] {
            let r = reverse_recovery(3.0, 0.25, 2000, 200, mode, &sched, 4).unwrap();
            assert!(r.passes(0.1, 0.2), "{r:?}");
        }
    }

    #[test]
    fn small_mas_sweep() {
        let s = mas_sweep(2, 20, 5).unwrap();
        assert_eq!(s.mismatches, 0);
        assert_eq!(s.exhaustive_instances, 2 * (1 + 2 + 3 + 4 + 4 + 4));
    }

    #[test]
    fn grad_checks_pass() {
        for (name, r) in loss_grad_checks(2, 1e-4).unwrap() {
            assert!(r.passed && r.checked >= 100, "{name}: {r:?}");
        }
    }
}
