//! Fine-tuning on ground-truth masks: cross-entropy over refined mask-text
//! similarities, with only the attention q/v projections, `log α` and the
//! similarity head trainable.

mod checkpoint;
mod gradcheck;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, MaskPrior};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::infer::{mask_acc, prepare_samples, MaskAccOptions, PreparedSample};
use crate::linalg::Matrix;
use crate::params::{prefixed, prefixed_mut, ParamMut, ParamRef};
use crate::psm::{
    classification_loss, psm_backward, psm_forward, PsmKind, PsmParams, DEFAULT_PSM_DIM,
};
use crate::textenc::TextEmbeddings;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, relative_error, relative_error_with_floor, GradCheckReport};

fn default_base_lr() -> f64 {
    1e-4
}
fn default_multiplier() -> f64 {
    100.0
}
fn default_batch() -> usize {
    4
}
fn default_steps() -> usize {
    2000
}
fn default_wd() -> f64 {
    1e-4
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_eval_every() -> usize {
    100
}
fn default_psm() -> PsmKind {
    PsmKind::SimAffine
}
fn default_psm_dim() -> usize {
    DEFAULT_PSM_DIM
}

/// Training recipe plus the model shape used when starting from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// q/v projections train at `base_lr × qv_lr_multiplier`.
    #[serde(default = "default_multiplier")]
    pub qv_lr_multiplier: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub total_steps: usize,
    /// Decoupled decay, applied to matrices only.
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Train only on masks of these categories (by name); the loss then
    /// competes among them alone.
    #[serde(default)]
    pub seen_categories: Option<Vec<String>>,
    #[serde(default)]
    pub prior: MaskPrior,
    /// Validation maskAcc is computed every this many steps and at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop once validation maskAcc reaches this value.
    #[serde(default)]
    pub early_stop_mask_acc: Option<f64>,
    #[serde(default)]
    pub encoder: EncoderDims,
    #[serde(default = "default_psm")]
    pub psm: PsmKind,
    #[serde(default = "default_psm_dim")]
    pub psm_dim: usize,
    /// Seed of the hash-based text embeddings.
    #[serde(default)]
    pub text_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!(
                "base_lr must be non-negative, got {}",
                self.base_lr
            ));
        }
        if !(self.qv_lr_multiplier >= 1.0) {
            return bad(format!(
                "qv_lr_multiplier must be >= 1, got {}",
                self.qv_lr_multiplier
            ));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, total_steps and eval_every must be positive".into());
        }
        if !(self.weight_decay >= 0.0)
            || self.betas.iter().any(|b| !(0.0..1.0).contains(b))
            || !(self.adam_eps > 0.0)
        {
            return bad("invalid optimizer hyperparameters".into());
        }
        if self.psm_dim == 0 {
            return bad("psm_dim must be at least 1".into());
        }
        self.encoder.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Learning rate of the shared group at `step` (0-based): cosine decay
    /// from `base_lr` to 0 over `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (PI * frac).cos())
    }
}

/// Encoder and similarity head, trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub psm: PsmParams,
}

impl Model {
    pub fn init(config: &TrainConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::init(config.encoder, seed)?,
            psm: PsmParams::init(config.psm, config.encoder.embed_dim, config.psm_dim)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            psm: self.psm.zeros_like(),
        }
    }

    /// All tensors, named `encoder.*` and `psm.*`.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        prefixed("encoder.", self.encoder.params())
            .chain(prefixed("psm.", self.psm.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        prefixed_mut("encoder.", self.encoder.params_mut())
            .chain(prefixed_mut("psm.", self.psm.params_mut()))
            .collect()
    }
}

/// The q/v projections of every layer, which train at the multiplied rate.
pub fn is_qv(name: &str) -> bool {
    name.starts_with("encoder.layers.") && (name.contains(".attn.q.") || name.contains(".attn.v."))
}

pub fn is_trainable(name: &str) -> bool {
    is_qv(name) || name == "encoder.log_alpha" || name.starts_with("psm.")
}

/// Names of every parameter the optimizer updates.
pub fn trainable_set(encoder: &EncoderParams, psm: &PsmParams) -> Vec<String> {
    prefixed("encoder.", encoder.params())
        .chain(prefixed("psm.", psm.params()))
        .map(|p| p.name)
        .filter(|n| is_trainable(n))
        .collect()
}

/// Mean cross-entropy over every mask in `batch`, and its gradient.
pub fn batch_loss_and_grad(
    model: &Model,
    batch: &[&PreparedSample],
    text: &Matrix,
) -> Result<(f64, Model)> {
    let mut grads = model.zeros_like();
    let loss = accumulate_batch(model, batch, text, Some(&mut grads))?;
    Ok((loss, grads))
}

pub fn batch_loss(model: &Model, batch: &[&PreparedSample], text: &Matrix) -> Result<f64> {
    accumulate_batch(model, batch, text, None)
}

fn accumulate_batch(
    model: &Model,
    batch: &[&PreparedSample],
    text: &Matrix,
    mut grads: Option<&mut Model>,
) -> Result<f64> {
    let total: usize = batch.iter().map(|s| s.labels.len()).sum();
    if total == 0 {
        return Err(Error::Invalid("batch holds no masks".into()));
    }
    let mut loss = 0.0;
    for s in batch {
        let trace = model.encoder.forward(&s.patches, &s.masks)?;
        let e_m = trace.embeddings();
        let pt = psm_forward(&model.psm, e_m, text)?;
        let out = classification_loss(&pt.refined, &s.labels, model.psm.log_logit_scale)?;
        let w = s.labels.len() as f64 / total as f64;
        loss += w * out.loss;
        if let Some(g) = grads.as_deref_mut() {
            let mut d_r = out.d_refined;
            d_r.as_mut_slice().iter_mut().for_each(|v| *v *= w);
            g.psm.log_logit_scale += w * out.d_log_logit_scale;
            let d_emb = psm_backward(&model.psm, &pt, e_m, text, &d_r, &mut g.psm);
            model.encoder.backward(&trace, &d_emb, &mut g.encoder);
        }
    }
    Ok(loss)
}

/// AdamW first and second moments, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Model,
    pub v: Model,
    /// Number of updates applied so far.
    pub t: usize,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update of the trainable tensors at shared learning rate `lr`.
/// Returns the number of tensors updated.
pub fn adamw_step(
    model: &mut Model,
    grads: &Model,
    opt: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
) -> usize {
    opt.t += 1;
    let [b1, b2] = config.betas;
    let bc1 = 1.0 - b1.powi(opt.t as i32);
    let bc2 = 1.0 - b2.powi(opt.t as i32);
    let g_all = grads.params();
    let mut m_all = opt.m.params_mut();
    let mut v_all = opt.v.params_mut();
    let mut updated = 0;
    for (((p, g), m), v) in model
        .params_mut()
        .into_iter()
        .zip(&g_all)
        .zip(&mut m_all)
        .zip(&mut v_all)
    {
        debug_assert_eq!(p.name, g.name);
        if !is_trainable(&p.name) {
            continue;
        }
        updated += 1;
        let lr_p = if is_qv(&p.name) {
            lr * config.qv_lr_multiplier
        } else {
            lr
        };
        let decay = if p.is_matrix() {
            config.weight_decay
        } else {
            0.0
        };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] -= lr_p * (mh / (vh.sqrt() + config.adam_eps) + decay * p.data[i]);
        }
    }
    updated
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub opt: AdamState,
    /// Steps completed.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, model: Model) -> Self {
        let opt = AdamState::new(&model);
        Self {
            config,
            model,
            opt,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_mask_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,loss,val_maskAcc";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let acc = self.val_mask_acc.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.lr, self.loss, acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    /// Validation maskAcc reached the configured target after this step.
    EarlyStop {
        step: usize,
    },
    /// Loss or gradients became non-finite at this step; the returned state is
    /// the one before it.
    Diverged {
        step: usize,
    },
}

pub struct TrainRun {
    pub state: TrainState,
    pub metrics: Vec<MetricRow>,
    pub stop: StopReason,
}

/// Resolve `seen_categories` names against the vocabulary.
pub fn seen_indices(config: &TrainConfig, dataset: &Dataset) -> Result<Vec<usize>> {
    match &config.seen_categories {
        None => Ok((0..dataset.vocab.len()).collect()),
        Some(names) => names
            .iter()
            .map(|n| {
                dataset.vocab.index_of(n).ok_or_else(|| {
                    Error::Invalid(format!("seen category '{n}' is not in the vocabulary"))
                })
            })
            .collect(),
    }
}

/// Batch indices for `step`, drawn from a generator keyed on `(seed, step)` so
/// that a resumed run samples exactly what an uninterrupted one would.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rand::seq::index::sample(&mut rng, n, batch_size.min(n)).into_vec()
}

/// Train from `state` until `config.total_steps`, early stop or divergence.
/// `on_step` sees every metrics row as it is produced.
pub fn train(
    mut state: TrainState,
    dataset: &Dataset,
    text: &TextEmbeddings,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<TrainRun> {
    let config = state.config.clone();
    config.validate()?;
    text.check_vocab(&dataset.vocab, false)?;
    if state.model.encoder.dims != config.encoder {
        return Err(Error::Invalid(
            "model encoder shape differs from the config".into(),
        ));
    }
    let seen = seen_indices(&config, dataset)?;
    let text_seen = text.select(&seen);
    let prep = |split: &str, prior| -> Result<Vec<PreparedSample>> {
        let all = prepare_samples(dataset.split(split), &state.model.encoder, prior)?;
        Ok(all.iter().filter_map(|s| s.restrict(&seen)).collect())
    };
    let train_set = prep("train", config.prior)?;
    if train_set.is_empty() {
        return Err(Error::Invalid(
            "no training masks in the seen categories".into(),
        ));
    }
    let val_set = prep("val", MaskPrior::Mask)?;

    let mut metrics = Vec::new();
    let mut stop = StopReason::Completed;
    while state.step < config.total_steps {
        let step = state.step;
        let lr = config.lr_at(step);
        let idx = batch_indices(config.seed, step, train_set.len(), config.batch_size);
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &train_set[i]).collect();
        let (loss, grads) = batch_loss_and_grad(&state.model, &batch, &text_seen)?;
        if !loss.is_finite()
            || grads
                .params()
                .iter()
                .any(|p| p.data.iter().any(|v| !v.is_finite()))
        {
            log::error!("non-finite loss or gradient at step {}", step + 1);
            stop = StopReason::Diverged { step: step + 1 };
            break;
        }
        adamw_step(&mut state.model, &grads, &mut state.opt, &config, lr);
        state.step += 1;
        let done = state.step == config.total_steps;
        let val_mask_acc = if !val_set.is_empty() && (state.step % config.eval_every == 0 || done) {
            Some(mask_acc(
                &state.model.encoder,
                &state.model.psm,
                &text_seen,
                &val_set,
                true,
                &MaskAccOptions::default(),
            )?)
        } else {
            None
        };
        let row = MetricRow {
            step: state.step,
            lr,
            loss,
            val_mask_acc,
        };
        log::debug!("{}", row.csv_line());
        on_step(&row);
        metrics.push(row);
        if let (Some(acc), Some(target)) = (val_mask_acc, config.early_stop_mask_acc) {
            if acc >= target && !done {
                stop = StopReason::EarlyStop { step: state.step };
                break;
            }
        }
    }
    Ok(TrainRun {
        state,
        metrics,
        stop,
    })
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
