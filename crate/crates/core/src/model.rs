//! Trainable networks: phoneme encoder, duration predictor and the
//! time-conditioned per-frame score network, with hand-written
//! backpropagation.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::EncodedMeans;
use crate::error::{Error, Result};
use crate::mel::MelGrid;
use crate::rng::seeded;

/// Number of language embedding rows.
pub const LANGUAGES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub speakers: usize,
    pub bins: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl ModelConfig {
    pub fn new(vocab: usize, speakers: usize, bins: usize) -> Self {
        Self {
            vocab,
            speakers,
            bins,
            embed_dim: 64,
            hidden: 128,
            time_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.speakers == 0 || self.bins == 0 {
            return Err(Error::Invalid("vocab, speakers and bins must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Invalid("layer widths must be >= 1".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "time embedding width {} must be even and positive",
                self.time_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features `[sin(2πk t), cos(2πk t)]` for `k = 1..=width/2`.
pub fn time_embedding(t: f64, width: usize) -> Array1<f64> {
    let mut out = Array1::zeros(width);
    for k in 0..width / 2 {
        let angle = 2.0 * PI * (k + 1) as f64 * t;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out
}

macro_rules! param_fields {
    ($mac:ident) => {
        $mac!(
            phoneme_emb,
            speaker_emb,
            language_emb,
            enc_conv_w,
            enc_conv_b,
            enc_proj_w,
            enc_proj_b,
            dp_w1,
            dp_b1,
            dp_w2,
            dp_b2,
            score_w_in,
            score_b_in,
            score_w_h1,
            score_b_h1,
            score_w_h2,
            score_b_h2,
            score_w_out,
            score_b_out
        )
    };
}

/// All trainable weights. Matrices are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub phoneme_emb: Array2<f64>,
    pub speaker_emb: Array2<f64>,
    pub language_emb: Array2<f64>,
    /// Kernel-3 convolution as one `E x 3E` matrix over `[e_{i-1}, e_i, e_{i+1}]`.
    pub enc_conv_w: Array2<f64>,
    pub enc_conv_b: Array1<f64>,
    pub enc_proj_w: Array2<f64>,
    pub enc_proj_b: Array1<f64>,
    pub dp_w1: Array2<f64>,
    pub dp_b1: Array1<f64>,
    pub dp_w2: Array2<f64>,
    pub dp_b2: Array1<f64>,
    pub score_w_in: Array2<f64>,
    pub score_b_in: Array1<f64>,
    pub score_w_h1: Array2<f64>,
    pub score_b_h1: Array1<f64>,
    pub score_w_h2: Array2<f64>,
    pub score_b_h2: Array1<f64>,
    pub score_w_out: Array2<f64>,
    pub score_b_out: Array1<f64>,
}

/// Names of every parameter tensor, in checkpoint order.
pub const PARAM_NAMES: [&str; 19] = {
    macro_rules! names {
        ($($f:ident),*) => { [$(stringify!($f)),*] };
    }
    param_fields!(names)
};

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, bins) = (cfg.embed_dim, cfg.hidden, cfg.bins);
        let score_in = 2 * bins + cfg.time_dim;
        Self {
            phoneme_emb: Array2::zeros((cfg.vocab, e)),
            speaker_emb: Array2::zeros((cfg.speakers, e)),
            language_emb: Array2::zeros((LANGUAGES, e)),
            enc_conv_w: Array2::zeros((e, 3 * e)),
            enc_conv_b: Array1::zeros(e),
            enc_proj_w: Array2::zeros((bins, e)),
            enc_proj_b: Array1::zeros(bins),
            dp_w1: Array2::zeros((e, bins)),
            dp_b1: Array1::zeros(e),
            dp_w2: Array2::zeros((1, e)),
            dp_b2: Array1::zeros(1),
            score_w_in: Array2::zeros((h, score_in)),
            score_b_in: Array1::zeros(h),
            score_w_h1: Array2::zeros((h, h)),
            score_b_h1: Array1::zeros(h),
            score_w_h2: Array2::zeros((h, h)),
            score_b_h2: Array1::zeros(h),
            score_w_out: Array2::zeros((bins, h)),
            score_b_out: Array1::zeros(bins),
        }
    }

    /// Uniform(±1/√fan_in) weights, zero biases. Embedding lookups have fan-in 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |a: &mut Array2<f64>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            a.mapv_inplace(|_| rng.random_range(-bound..bound));
        };
        fill(&mut p.phoneme_emb, 1);
        fill(&mut p.speaker_emb, 1);
        fill(&mut p.language_emb, 1);
        fill(&mut p.enc_conv_w, 3 * cfg.embed_dim);
        fill(&mut p.enc_proj_w, cfg.embed_dim);
        fill(&mut p.dp_w1, cfg.bins);
        fill(&mut p.dp_w2, cfg.embed_dim);
        fill(&mut p.score_w_in, 2 * cfg.bins + cfg.time_dim);
        fill(&mut p.score_w_h1, cfg.hidden);
        fill(&mut p.score_w_h2, cfg.hidden);
        fill(&mut p.score_w_out, cfg.hidden);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config())
    }

    /// Dimensions recovered from tensor shapes.
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.phoneme_emb.nrows(),
            speakers: self.speaker_emb.nrows(),
            bins: self.enc_proj_w.nrows(),
            embed_dim: self.phoneme_emb.ncols(),
            hidden: self.score_w_h1.nrows(),
            time_dim: self.score_w_in.ncols() - 2 * self.enc_proj_w.nrows(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        macro_rules! views {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.view().into_dyn())),*] };
        }
        param_fields!(views)
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        macro_rules! views {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.view_mut().into_dyn())),*] };
        }
        param_fields!(views)
    }

    /// Total number of scalar weights.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads flat weight `index` (tensor order, row-major).
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for (_, t) in self.tensors() {
            if index < t.len() {
                return t.as_slice().expect("standard layout")[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            if index < t.len() {
                t.as_slice_mut().expect("standard layout")[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Bytes-level equality of every weight.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.tensors().iter().zip(other.tensors()).all(|((na, a), (nb, b))| {
            na == &nb
                && a.shape() == b.shape()
                && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    fn lookup(&self, table: &'static str, rows: &Array2<f64>, id: usize) -> Result<()> {
        if id >= rows.nrows() {
            return Err(Error::UnknownId {
                kind: table,
                id,
                size: rows.nrows(),
            });
        }
        Ok(())
    }

    // ---- encoder ----

    pub fn encode(
        &self,
        phonemes: &[usize],
        speaker: Option<usize>,
        language: Option<usize>,
    ) -> Result<EncodedMeans> {
        Ok(self.encode_with_cache(phonemes, speaker, language)?.0)
    }

    pub fn encode_with_cache(
        &self,
        phonemes: &[usize],
        speaker: Option<usize>,
        language: Option<usize>,
    ) -> Result<(EncodedMeans, EncoderCache)> {
        if phonemes.is_empty() {
            return Err(Error::Invalid("empty phoneme sequence".into()));
        }
        let e = self.phoneme_emb.ncols();
        let len = phonemes.len();
        let mut emb = Array2::zeros((len, e));
        for (i, &id) in phonemes.iter().enumerate() {
            self.lookup("phoneme", &self.phoneme_emb, id)?;
            emb.row_mut(i).assign(&self.phoneme_emb.row(id));
        }
        if let Some(s) = speaker {
            self.lookup("speaker", &self.speaker_emb, s)?;
            emb += &self.speaker_emb.row(s);
        }
        if let Some(l) = language {
            self.lookup("language", &self.language_emb, l)?;
            emb += &self.language_emb.row(l);
        }
        let mut ctx = Array2::zeros((len, 3 * e));
        for i in 0..len {
            if i > 0 {
                ctx.slice_mut(s![i, 0..e]).assign(&emb.row(i - 1));
            }
            ctx.slice_mut(s![i, e..2 * e]).assign(&emb.row(i));
            if i + 1 < len {
                ctx.slice_mut(s![i, 2 * e..3 * e]).assign(&emb.row(i + 1));
            }
        }
        let mut hidden = ctx.dot(&self.enc_conv_w.t()) + &self.enc_conv_b;
        hidden.mapv_inplace(f64::tanh);
        let mu_tilde = hidden.dot(&self.enc_proj_w.t()) + &self.enc_proj_b;
        let means = EncodedMeans::new(mu_tilde)?;
        Ok((
            means,
            EncoderCache {
                phonemes: phonemes.to_vec(),
                speaker,
                language,
                ctx,
                hidden,
            },
        ))
    }

    /// Accumulates encoder and embedding gradients for `d_mu_tilde = ∂L/∂μ̃`.
    pub fn encode_backward(&self, cache: &EncoderCache, d_mu_tilde: &Array2<f64>, grads: &mut ModelParams) {
        let e = self.phoneme_emb.ncols();
        let len = cache.phonemes.len();
        grads.enc_proj_w += &d_mu_tilde.t().dot(&cache.hidden);
        grads.enc_proj_b += &d_mu_tilde.sum_axis(Axis(0));
        let d_hidden = d_mu_tilde.dot(&self.enc_proj_w);
        let d_pre = d_hidden * cache.hidden.mapv(|h| 1.0 - h * h);
        grads.enc_conv_w += &d_pre.t().dot(&cache.ctx);
        grads.enc_conv_b += &d_pre.sum_axis(Axis(0));
        let d_ctx = d_pre.dot(&self.enc_conv_w);
        let mut d_emb = Array2::<f64>::zeros((len, e));
        for i in 0..len {
            let mut row = d_emb.row_mut(i);
            row += &d_ctx.slice(s![i, e..2 * e]);
            if i + 1 < len {
                row += &d_ctx.slice(s![i + 1, 0..e]);
            }
            if i > 0 {
                row += &d_ctx.slice(s![i - 1, 2 * e..3 * e]);
            }
        }
        for (i, &id) in cache.phonemes.iter().enumerate() {
            let mut row = grads.phoneme_emb.row_mut(id);
            row += &d_emb.row(i);
        }
        let total = d_emb.sum_axis(Axis(0));
        if let Some(s) = cache.speaker {
            let mut row = grads.speaker_emb.row_mut(s);
            row += &total;
        }
        if let Some(l) = cache.language {
            let mut row = grads.language_emb.row_mut(l);
            row += &total;
        }
    }

    // ---- duration predictor ----

    /// Per-phoneme log-duration predictions. The input is treated as a
    /// constant: no gradient flows back into the encoder.
    pub fn predict_log_durations(&self, mu_tilde: &EncodedMeans) -> Result<Array1<f64>> {
        Ok(self.predict_with_cache(mu_tilde)?.0)
    }

    pub fn predict_with_cache(&self, mu_tilde: &EncodedMeans) -> Result<(Array1<f64>, DurationCache)> {
        if mu_tilde.width() != self.dp_w1.ncols() {
            return Err(Error::shape(self.dp_w1.ncols(), mu_tilde.width()));
        }
        let input = mu_tilde.values().clone();
        let mut hidden = input.dot(&self.dp_w1.t()) + &self.dp_b1;
        hidden.mapv_inplace(f64::tanh);
        let out = hidden.dot(&self.dp_w2.t()) + &self.dp_b2;
        Ok((out.column(0).to_owned(), DurationCache { input, hidden }))
    }

    pub fn predict_backward(&self, cache: &DurationCache, d_pred: &Array1<f64>, grads: &mut ModelParams) {
        let d_out = d_pred.view().insert_axis(Axis(1));
        grads.dp_w2 += &d_out.t().dot(&cache.hidden);
        grads.dp_b2 += &d_out.sum_axis(Axis(0));
        let d_hidden = d_out.dot(&self.dp_w2);
        let d_pre = d_hidden * cache.hidden.mapv(|h| 1.0 - h * h);
        grads.dp_w1 += &d_pre.t().dot(&cache.input);
        grads.dp_b1 += &d_pre.sum_axis(Axis(0));
    }

    // ---- score network ----

    /// `s_θ(x_t, μ, t)`, applied frame by frame.
    pub fn score(&self, x_t: &MelGrid, mu: &MelGrid, t: f64) -> Result<MelGrid> {
        Ok(self.score_with_cache(x_t, mu, t)?.0)
    }

    pub fn score_with_cache(&self, x_t: &MelGrid, mu: &MelGrid, t: f64) -> Result<(MelGrid, ScoreCache)> {
        x_t.ensure_same_shape(mu, "x_t")?;
        let bins = self.enc_proj_w.nrows();
        if x_t.bins() != bins {
            return Err(Error::shape(format!("{bins} bins"), x_t.bins()));
        }
        let time_dim = self.score_w_in.ncols() - 2 * bins;
        let frames = x_t.frames();
        let temb = time_embedding(t, time_dim);
        let mut input = Array2::zeros((frames, 2 * bins + time_dim));
        input.slice_mut(s![.., 0..bins]).assign(x_t.values());
        input.slice_mut(s![.., bins..2 * bins]).assign(mu.values());
        input.slice_mut(s![.., 2 * bins..]).assign(&temb);
        let mut h1 = input.dot(&self.score_w_in.t()) + &self.score_b_in;
        h1.mapv_inplace(f64::tanh);
        let mut h2 = h1.dot(&self.score_w_h1.t()) + &self.score_b_h1;
        h2.mapv_inplace(f64::tanh);
        let mut h3 = h2.dot(&self.score_w_h2.t()) + &self.score_b_h2;
        h3.mapv_inplace(f64::tanh);
        let out = h3.dot(&self.score_w_out.t()) + &self.score_b_out;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score network output".into()));
        }
        Ok((
            MelGrid::from_array_unchecked(out),
            ScoreCache { input, h1, h2, h3 },
        ))
    }

    /// Accumulates score-net gradients; returns `(∂L/∂x_t, ∂L/∂μ)`.
    pub fn score_backward(
        &self,
        cache: &ScoreCache,
        d_out: &Array2<f64>,
        grads: &mut ModelParams,
    ) -> (Array2<f64>, Array2<f64>) {
        let bins = self.enc_proj_w.nrows();
        grads.score_w_out += &d_out.t().dot(&cache.h3);
        grads.score_b_out += &d_out.sum_axis(Axis(0));
        let d3 = d_out.dot(&self.score_w_out) * cache.h3.mapv(|h| 1.0 - h * h);
        grads.score_w_h2 += &d3.t().dot(&cache.h2);
        grads.score_b_h2 += &d3.sum_axis(Axis(0));
        let d2 = d3.dot(&self.score_w_h2) * cache.h2.mapv(|h| 1.0 - h * h);
        grads.score_w_h1 += &d2.t().dot(&cache.h1);
        grads.score_b_h1 += &d2.sum_axis(Axis(0));
        let d1 = d2.dot(&self.score_w_h1) * cache.h1.mapv(|h| 1.0 - h * h);
        grads.score_w_in += &d1.t().dot(&cache.input);
        grads.score_b_in += &d1.sum_axis(Axis(0));
        let d_input = d1.dot(&self.score_w_in);
        (
            d_input.slice(s![.., 0..bins]).to_owned(),
            d_input.slice(s![.., bins..2 * bins]).to_owned(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    phonemes: Vec<usize>,
    speaker: Option<usize>,
    language: Option<usize>,
    ctx: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DurationCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    h3: Array2<f64>,
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst weight.
    pub worst_index: usize,
    pub passed: bool,
}

/// Absolute scale below which gradient components are compared absolutely.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients to central differences on a random 1% of the
/// weights (at least 100, or all when there are fewer).
///
/// `loss_fn` must be deterministic and return `(loss, ∂loss/∂params)`.
pub fn grad_check<F, R>(loss_fn: F, params: &ModelParams, h: f64, tol: f64, rng: &mut R) -> GradCheckReport
where
    F: Fn(&ModelParams) -> (f64, ModelParams),
    R: Rng + ?Sized,
{
    let total = params.len();
    let want = (total / 100).max(100).min(total);
    let indices = rand::seq::index::sample(rng, total, want).into_vec();
    let (_, analytic) = loss_fn(params);
    let mut probe = params.clone();
    let mut worst = (0.0f64, 0usize);
    for &idx in &indices {
        let w = params.get_flat(idx);
        probe.set_flat(idx, w + h);
        let up = loss_fn(&probe).0;
        probe.set_flat(idx, w - h);
        let down = loss_fn(&probe).0;
        probe.set_flat(idx, w);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get_flat(idx);
        let scale = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / scale;
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, idx);
        }
    }
    GradCheckReport {
        checked: indices.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    }
}
