//! Text to mel inference: encode, predict durations, expand, reverse diffusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::expand;
use crate::corpus::{transliterate, Language, PhonemeVocab};
use crate::error::{Error, Result};
use crate::mel::MelGrid;
use crate::model::ModelParams;
use crate::sde::{sample_reverse, AnchoredGaussian, NoiseSchedule, SamplerMode};

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_steps: usize,
    pub mode: SamplerMode,
    pub temperature: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            mode: SamplerMode::Ode,
            temperature: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: MelGrid,
    /// Frames spent on each token.
    pub durations: Vec<usize>,
}

/// `max(1, round_half_up(exp(log d)))`.
pub fn frame_counts(log_durations: &[f64]) -> Vec<usize> {
    log_durations
        .iter()
        .map(|&l| {
            let d = (l.exp() + 0.5).floor();
            if d.is_finite() && d >= 1.0 {
                d as usize
            } else if d.is_finite() || d < 0.0 || l.is_nan() {
                1
            } else {
                usize::MAX
            }
        })
        .collect()
}

/// Frame budget guarding against a runaway duration predictor.
pub const MAX_FRAMES: usize = 100_000;

pub fn synthesize<R: Rng + ?Sized>(
    params: &ModelParams,
    tokens: &[usize],
    speaker: Option<usize>,
    language: Option<usize>,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Synthesis> {
    if cfg.n_steps == 0 {
        return Err(Error::Invalid("n_steps must be >= 1".into()));
    }
    let mu_tilde = params.encode(tokens, speaker, language)?;
    let log_d = params.predict_log_durations(&mu_tilde)?;
    let durations = frame_counts(log_d.as_slice().expect("contiguous"));
    let total = durations.iter().try_fold(0usize, |acc, &d| acc.checked_add(d));
    if total.is_none_or(|t| t > MAX_FRAMES) {
        return Err(Error::Invalid(format!("predicted length exceeds {MAX_FRAMES} frames")));
    }
    let mu = expand(&mu_tilde, &durations)?;
    let anchor = AnchoredGaussian::identity(mu.clone());
    let mel = sample_reverse(
        |x, t| {
            params
                .score(x, &mu, t)
                .unwrap_or_else(|_| MelGrid::filled(x.frames(), x.bins(), f64::NAN).expect("non-empty"))
        },
        &anchor,
        sched,
        cfg.n_steps,
        cfg.mode,
        cfg.temperature,
        rng,
    )?;
    Ok(Synthesis { mel, durations })
}

/// Cross-lingual inference: transliterates `tokens` into language A and
/// synthesizes them with a language-A speaker.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_cross<R: Rng + ?Sized>(
    params: &ModelParams,
    vocab: &PhonemeVocab,
    tokens: &[usize],
    speaker_a: Option<usize>,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Synthesis> {
    let ids = transliterate(tokens, vocab)?;
    synthesize(params, &ids, speaker_a, Some(Language::A.id()), sched, cfg, rng)
}

/// JSON written next to every synthesized mel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub id: String,
    pub tokens: Vec<String>,
    pub speaker: Option<usize>,
    pub language: Option<Language>,
    pub n_steps: usize,
    pub mode: SamplerMode,
    pub temperature: f64,
    pub seed: u64,
    pub durations: Vec<usize>,
}

/// Per-token mean frames of `mel` under `durations`.
pub fn segment_means(mel: &MelGrid, durations: &[usize]) -> Result<Vec<Vec<f64>>> {
    let total: usize = durations.iter().sum();
    if total != mel.frames() {
        return Err(Error::shape(format!("{total} frames"), mel.frames()));
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut j = 0;
    for &d in durations {
        let mut mean = vec![0.0; mel.bins()];
        for _ in 0..d {
            for (m, v) in mean.iter_mut().zip(mel.row(j)) {
                *m += v;
            }
            j += 1;
        }
        if d > 0 {
            mean.iter_mut().for_each(|m| *m /= d as f64);
        }
        out.push(mean);
    }
    Ok(out)
}

/// Mean squared difference between per-token segment means. Compares
/// outputs whose frame counts differ.
pub fn segment_mel_mse(
    reference: &MelGrid,
    ref_durations: &[usize],
    hypothesis: &MelGrid,
    hyp_durations: &[usize],
) -> Result<f64> {
    if ref_durations.len() != hyp_durations.len() {
        return Err(Error::shape(ref_durations.len(), hyp_durations.len()));
    }
    if reference.bins() != hypothesis.bins() {
        return Err(Error::shape(reference.bins(), hypothesis.bins()));
    }
    let a = segment_means(reference, ref_durations)?;
    let b = segment_means(hypothesis, hyp_durations)?;
    let n = (a.len() * reference.bins()) as f64;
    Ok(a.iter()
        .zip(&b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        / n)
}

/// Counts tokens whose predicted duration is within `tol` frames.
pub fn durations_within(predicted: &[usize], truth: &[usize], tol: usize) -> Result<usize> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(truth.len(), predicted.len()));
    }
    Ok(predicted.iter().zip(truth).filter(|(p, t)| p.abs_diff(**t) <= tol).count())
}
