//! Encoder, duration and diffusion losses, and the alternating
//! alignment-search / parameter-update training loop.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, Alignment, EncodedMeans};
use crate::checkpoint::{self, Record};
use crate::error::{Error, Result};
use crate::mel::MelGrid;
use crate::model::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::par;
use crate::rng;
use crate::sde::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub enc: f64,
    pub dp: f64,
    pub diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            enc: 1.0,
            dp: 1.0,
            diff: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub schedule: NoiseSchedule,
    pub embed_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            schedule: NoiseSchedule::default(),
            embed_dim: 64,
            hidden: 128,
            time_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Invalid("learning_rate must be > 0 and batch_size >= 1".into()));
        }
        if w.enc < 0.0 || w.dp < 0.0 || w.diff < 0.0 {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Invalid("adam betas must lie in [0, 1)".into()));
        }
        self.schedule.validate()
    }

    pub fn model_config(&self, vocab: usize, speakers: usize, bins: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            speakers,
            bins,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            time_dim: self.time_dim,
        }
    }
}

/// One training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub phonemes: Vec<usize>,
    pub speaker: Option<usize>,
    pub language: Option<usize>,
    pub mel: MelGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<TrainItem>,
    pub vocab: usize,
    pub speakers: usize,
    pub bins: usize,
}

/// Per-item values of the three loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemLosses {
    pub enc: f64,
    pub dp: f64,
    pub diff: f64,
}

impl ItemLosses {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.enc * self.enc + w.dp * self.dp + w.diff * self.diff
    }

    fn is_finite(&self) -> bool {
        self.enc.is_finite() && self.dp.is_finite() && self.diff.is_finite()
    }
}

/// Encoder loss `-Σ_j log φ(y_j; μ̃_{A(j)}, I)`.
pub fn loss_enc(y: &MelGrid, mu_tilde: &EncodedMeans, a: &Alignment) -> Result<f64> {
    Ok(-align::alignment_log_likelihood(y, mu_tilde, a)?)
}

/// [`loss_enc`] and its gradient with respect to `μ̃`.
pub fn loss_enc_grad(y: &MelGrid, mu_tilde: &EncodedMeans, a: &Alignment) -> Result<(f64, Array2<f64>)> {
    let value = loss_enc(y, mu_tilde, a)?;
    let expanded = align::expand(mu_tilde, &a.counts())?;
    let residual = expanded.values() - y.values();
    Ok((value, align::collapse(&residual, a, mu_tilde.len())))
}

/// Lower bound of [`loss_enc`] for a grid of `frames x bins`.
pub fn loss_enc_floor(frames: usize, bins: usize) -> f64 {
    frames as f64 * bins as f64 / 2.0 * (2.0 * PI).ln()
}

/// Mean squared error between predicted and target log-durations.
pub fn loss_dp(pred_logd: &[f64], targets: &[f64]) -> Result<f64> {
    Ok(loss_dp_grad(pred_logd, targets)?.0)
}

pub fn loss_dp_grad(pred_logd: &[f64], targets: &[f64]) -> Result<(f64, Array1<f64>)> {
    if pred_logd.len() != targets.len() || targets.is_empty() {
        return Err(Error::shape(targets.len(), pred_logd.len()));
    }
    let n = targets.len() as f64;
    let diff: Array1<f64> = pred_logd.iter().zip(targets).map(|(p, d)| p - d).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// The `(t, ξ)` draw behind one evaluation of the diffusion loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw {
    pub t: f64,
    pub xi: MelGrid,
}

impl DiffusionDraw {
    /// `t ~ U(t_min, t_max)`, `ξ ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(frames: usize, bins: usize, sched: &NoiseSchedule, rng: &mut R) -> Self {
        let t = rng.random_range(sched.t_min..sched.t_max);
        Self {
            t,
            xi: MelGrid::standard_normal(frames, bins, rng),
        }
    }
}

/// Diffusion loss value plus the pieces needed to backpropagate it.
struct DiffusionEval {
    value: f64,
    /// ∂L/∂μ through both the score-net input and `x_t`.
    d_mu: Array2<f64>,
}

fn diffusion_loss_at(
    y0: &MelGrid,
    mu: &MelGrid,
    params: &ModelParams,
    sched: &NoiseSchedule,
    draw: &DiffusionDraw,
    grads: Option<&mut ModelParams>,
) -> Result<DiffusionEval> {
    y0.ensure_same_shape(mu, "target mel")?;
    y0.ensure_same_shape(&draw.xi, "target mel")?;
    let lambda = sched.lambda_at(draw.t)?;
    let decay = (-0.5 * sched.cum_noise(draw.t)?).exp();
    let sqrt_lambda = lambda.sqrt();
    let mut xt = mu.values() + &((y0.values() - mu.values()) * decay);
    xt.scaled_add(sqrt_lambda, draw.xi.values());
    let xt = MelGrid::from_array_unchecked(xt);
    let (score, cache) = params.score_with_cache(&xt, mu, draw.t)?;
    let residual = score.values() + &(draw.xi.values() / sqrt_lambda);
    let n = residual.len() as f64;
    let value = lambda * residual.iter().map(|r| r * r).sum::<f64>() / n;
    let d_mu = match grads {
        Some(g) => {
            let d_score = residual * (2.0 * lambda / n);
            let (d_xt, d_mu_direct) = params.score_backward(&cache, &d_score, g);
            d_mu_direct + d_xt * (1.0 - decay)
        }
        None => Array2::zeros(mu.shape()),
    };
    Ok(DiffusionEval { value, d_mu })
}

/// Single-draw estimate of `λ_t · mean ‖s_θ(x_t, μ, t) + ξ/√λ_t‖²` with
/// `t ~ U(t_min, t_max)`.
pub fn loss_diff<R: Rng + ?Sized>(
    y0: &MelGrid,
    mu: &MelGrid,
    params: &ModelParams,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let draw = DiffusionDraw::sample(y0.frames(), y0.bins(), sched, rng);
    loss_diff_at(y0, mu, params, sched, &draw)
}

/// [`loss_diff`] at a fixed draw.
pub fn loss_diff_at(
    y0: &MelGrid,
    mu: &MelGrid,
    params: &ModelParams,
    sched: &NoiseSchedule,
    draw: &DiffusionDraw,
) -> Result<f64> {
    Ok(diffusion_loss_at(y0, mu, params, sched, draw, None)?.value)
}

/// Weighted objective for one item at a fixed alignment and diffusion draw,
/// with gradients for every parameter. The duration predictor sees `μ̃` as a
/// constant.
pub fn item_objective(
    params: &ModelParams,
    item: &TrainItem,
    alignment: &Alignment,
    draw: &DiffusionDraw,
    weights: &LossWeights,
    sched: &NoiseSchedule,
) -> Result<(ItemLosses, ModelParams)> {
    let mut grads = params.zeros_like();
    let (mu_tilde, enc_cache) = params.encode_with_cache(&item.phonemes, item.speaker, item.language)?;
    let phonemes = mu_tilde.len();

    let (enc, d_enc) = loss_enc_grad(&item.mel, &mu_tilde, alignment)?;

    let targets = align::durations_from_alignment(alignment, phonemes)?;
    let (pred, dp_cache) = params.predict_with_cache(&mu_tilde)?;
    let (dp, d_pred) = loss_dp_grad(pred.as_slice().unwrap(), &targets)?;
    params.predict_backward(&dp_cache, &(d_pred * weights.dp), &mut grads);

    let mu = align::expand(&mu_tilde, &alignment.counts())?;
    let mut diff_grads = params.zeros_like();
    let diff = diffusion_loss_at(&item.mel, &mu, params, sched, draw, Some(&mut diff_grads))?;
    grads.add_scaled(&diff_grads, weights.diff);

    let mut d_mu_tilde = d_enc * weights.enc;
    d_mu_tilde.scaled_add(weights.diff, &align::collapse(&diff.d_mu, alignment, phonemes));
    params.encode_backward(&enc_cache, &d_mu_tilde, &mut grads);

    Ok((
        ItemLosses {
            enc,
            dp,
            diff: diff.value,
        },
        grads,
    ))
}

/// Alignment step: MAS against the current encoder output.
pub fn align_item(params: &ModelParams, item: &TrainItem) -> Result<Alignment> {
    let mu_tilde = params.encode(&item.phonemes, item.speaker, item.language)?;
    align::mas_search(&item.mel, &mu_tilde)
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = cfg.learning_rate;
        let eps = cfg.adam_eps;
        let p_all = params.tensors_mut();
        let m_all = self.m.tensors_mut();
        let v_all = self.v.tensors_mut();
        let g_all = grads.tensors();
        for (((mut p, mut m), mut v), g) in p_all
            .into_iter()
            .map(|(_, t)| t)
            .zip(m_all.into_iter().map(|(_, t)| t))
            .zip(v_all.into_iter().map(|(_, t)| t))
            .zip(g_all.into_iter().map(|(_, t)| t))
        {
            ndarray::Zip::from(&mut p)
                .and(&mut m)
                .and(&mut v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss_enc: f64,
    pub loss_dp: f64,
    pub loss_diff: f64,
    pub loss_total: f64,
    /// Wall-clock time; not persisted in checkpoints.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            adam: AdamState::new(&params),
            params,
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn init(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let model_cfg = cfg.model_config(dataset.vocab, dataset.speakers, dataset.bins);
        Ok(Self::new(ModelParams::init(&model_cfg, cfg.seed)?))
    }
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.items.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    if let Some(i) = dataset.items.iter().position(|it| it.mel.bins() != dataset.bins) {
        return Err(Error::shape(
            format!("{} bins", dataset.bins),
            format!("{} bins in item {i}", dataset.items[i].mel.bins()),
        ));
    }
    Ok(())
}

/// Runs one epoch of alternating alignment search and Adam updates.
pub fn train_epoch(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig) -> Result<EpochStats> {
    check_dataset(dataset)?;
    let started = Instant::now();
    let n = dataset.items.len();
    let epoch = state.epoch;
    let stream_base = (epoch as u64) * (n as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, stream_base));

    let mut sums = ItemLosses::default();
    for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
        let base = batch_idx * cfg.batch_size;
        let params = &state.params;
        let results = par::map_range(batch.len(), |k| -> Result<(ItemLosses, ModelParams)> {
            let item = &dataset.items[batch[k]];
            // step 1: alignment with parameters held fixed
            let alignment = align_item(params, item)?;
            // step 2: gradients with the alignment held fixed
            let mut draw_rng = rng::stream(cfg.seed, stream_base + 1 + (base + k) as u64);
            let draw = DiffusionDraw::sample(item.mel.frames(), item.mel.bins(), &cfg.schedule, &mut draw_rng);
            item_objective(params, item, &alignment, &draw, &cfg.loss_weights, &cfg.schedule)
        });
        let mut grads = state.params.zeros_like();
        let mut batch_sum = ItemLosses::default();
        for r in results {
            let (losses, g) = r?;
            batch_sum.enc += losses.enc;
            batch_sum.dp += losses.dp;
            batch_sum.diff += losses.diff;
            grads.add_scaled(&g, 1.0);
        }
        if !batch_sum.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {} batch {batch_idx}",
                epoch + 1
            )));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut mean_grads = state.params.zeros_like();
        mean_grads.add_scaled(&grads, scale);
        state.adam.update(&mut state.params, &mean_grads, cfg);
        sums.enc += batch_sum.enc;
        sums.dp += batch_sum.dp;
        sums.diff += batch_sum.diff;
    }
    let mean = ItemLosses {
        enc: sums.enc / n as f64,
        dp: sums.dp / n as f64,
        diff: sums.diff / n as f64,
    };
    state.epoch += 1;
    let stats = EpochStats {
        epoch: state.epoch,
        loss_enc: mean.enc,
        loss_dp: mean.dp,
        loss_diff: mean.diff,
        loss_total: mean.total(&cfg.loss_weights),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.history.push(stats);
    Ok(stats)
}

/// Trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let mut state = TrainState::init(dataset, cfg)?;
    for _ in 0..cfg.epochs {
        let stats = train_epoch(&mut state, dataset, cfg)?;
        on_epoch(&stats);
    }
    Ok(state)
}

/// CSV header of the per-epoch training log.
pub const LOG_HEADER: &str = "epoch,loss_enc,loss_dp,loss_diff,loss_total,wall_ms";

pub fn log_line(s: &EpochStats) -> String {
    format!(
        "{},{},{},{},{},{:.3}",
        s.epoch, s.loss_enc, s.loss_dp, s.loss_diff, s.loss_total, s.wall_ms
    )
}

const HISTORY_COLS: usize = 5;

pub fn checkpoint_records(state: &TrainState) -> Vec<Record> {
    let mut records = Vec::new();
    let push_params = |records: &mut Vec<Record>, prefix: &str, p: &ModelParams| {
        for (name, t) in p.tensors() {
            records.push(Record::new(
                format!("{prefix}{name}"),
                t.shape().to_vec(),
                t.iter().copied().collect(),
            ));
        }
    };
    push_params(&mut records, "", &state.params);
    push_params(&mut records, "adam.m.", &state.adam.m);
    push_params(&mut records, "adam.v.", &state.adam.v);
    records.push(Record::scalar("adam.step", state.adam.step as f64));
    records.push(Record::scalar("train.epoch", state.epoch as f64));
    let history: Vec<f64> = state
        .history
        .iter()
        .flat_map(|s| [s.epoch as f64, s.loss_enc, s.loss_dp, s.loss_diff, s.loss_total])
        .collect();
    records.push(Record::new(
        "train.history",
        vec![state.history.len(), HISTORY_COLS],
        history,
    ));
    records
}

fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Invalid(format!("checkpoint is missing record {name:?}")))
}

fn params_from_records(records: &[Record], prefix: &str) -> Result<ModelParams> {
    let shape_of = |name: &str| -> Result<Vec<usize>> { Ok(find(records, &format!("{prefix}{name}"))?.dims.clone()) };
    let emb = shape_of("phoneme_emb")?;
    let spk = shape_of("speaker_emb")?;
    let proj = shape_of("enc_proj_w")?;
    let h1 = shape_of("score_w_h1")?;
    let w_in = shape_of("score_w_in")?;
    if emb.len() != 2 || spk.len() != 2 || proj.len() != 2 || h1.len() != 2 || w_in.len() != 2 || w_in[1] < 2 * proj[0] {
        return Err(Error::Invalid("checkpoint tensors have inconsistent ranks".into()));
    }
    let cfg = ModelConfig {
        vocab: emb[0],
        speakers: spk[0],
        bins: proj[0],
        embed_dim: emb[1],
        hidden: h1[0],
        time_dim: w_in[1] - 2 * proj[0],
    };
    let mut params = ModelParams::zeros(&cfg);
    for (name, mut t) in params.tensors_mut() {
        let rec = find(records, &format!("{prefix}{name}"))?;
        if rec.dims != t.shape() {
            return Err(Error::shape(
                format!("{name} {:?}", t.shape()),
                format!("{:?}", rec.dims),
            ));
        }
        t.as_slice_mut().unwrap().copy_from_slice(&rec.values);
    }
    Ok(params)
}

fn scalar(records: &[Record], name: &str) -> Result<f64> {
    let r = find(records, name)?;
    if r.values.len() != 1 {
        return Err(Error::Invalid(format!("record {name:?} is not a scalar")));
    }
    Ok(r.values[0])
}

pub fn state_from_records(records: &[Record]) -> Result<TrainState> {
    let params = params_from_records(records, "")?;
    let m = params_from_records(records, "adam.m.")?;
    let v = params_from_records(records, "adam.v.")?;
    if m.config() != params.config() || v.config() != params.config() {
        return Err(Error::Invalid("optimizer moments do not mirror parameter shapes".into()));
    }
    let step = scalar(records, "adam.step")? as u64;
    let epoch = scalar(records, "train.epoch")? as usize;
    let hist = find(records, "train.history")?;
    if hist.dims.len() != 2 || hist.dims[1] != HISTORY_COLS {
        return Err(Error::Invalid("train.history must be epochs x 5".into()));
    }
    let history = hist
        .values
        .chunks_exact(HISTORY_COLS)
        .map(|c| EpochStats {
            epoch: c[0] as usize,
            loss_enc: c[1],
            loss_dp: c[2],
            loss_diff: c[3],
            loss_total: c[4],
            wall_ms: 0.0,
        })
        .collect();
    Ok(TrainState {
        params,
        adam: AdamState { m, v, step },
        epoch,
        history,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint::write_records(path, &checkpoint_records(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    state_from_records(&checkpoint::read_records(path)?)
}

/// Parameter names, for callers that index checkpoints directly.
pub fn param_names() -> &'static [&'static str] {
    &PARAM_NAMES
}
