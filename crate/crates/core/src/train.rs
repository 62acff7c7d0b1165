//! Training: knowledge pretraining of the MLP channel, fine-tuning on
//! oracle labels, constraint-corrector training, and the baseline family.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asfr::{sample_knowledge_dataset, AsfrError, KnowledgeDataset, KnowledgeSampler};
use crate::constraints::{kc_residuals_with, ConstraintContext, KcWeights};
use crate::dataset::{LabeledRecord, SampleInput};
use crate::model::{
    kd_predict, Channel, FusionModel, ModelConfig, ModelError, NormalizedSample, Prediction, PredictionSource, OUTPUTS,
};
use crate::nn::{adam_step, seeded_rng, NnError, OptimState, ParamStore, Standardizer, Tape, Tensor};
use crate::sim::FrequencyMetrics;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("knowledge: {0}")]
    Asfr(#[from] AsfrError),
    #[error("frozen channel {0:?} changed during training")]
    FrozenChannelDrift(Channel),
    #[error("held-out mse {mse:.3e} did not reach target {target:.3e}")]
    TargetNotReached { mse: f64, target: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no {0} samples")]
    EmptyData(&'static str),
    #[error("unknown baseline kind {0:?}")]
    UnknownKind(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Cn,
}

impl Stage {
    fn channels(self) -> &'static [Channel] {
        match self {
            Stage::Pretrain => &[Channel::MlpChannel, Channel::PretrainHead],
            Stage::Finetune => &[Channel::GcnChannel, Channel::MlpChannel, Channel::FusionHead],
            Stage::Cn => &[Channel::CnCorrector],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Channels held fixed on top of those the stage never touches.
    #[serde(default)]
    pub frozen_channels: BTreeSet<Channel>,
    #[serde(default)]
    pub kc_weights: KcWeights,
    pub early_stop_patience: usize,
    /// Fail when the selected checkpoint's validation MSE is above this.
    #[serde(default)]
    pub target_mse: Option<f64>,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, learning_rate) = match stage {
            Stage::Pretrain => (60, 1e-3),
            Stage::Finetune => (200, 1e-3),
            Stage::Cn => (100, 5e-4),
        };
        Self {
            stage,
            epochs,
            batch_size: 64,
            learning_rate,
            seed: 0,
            frozen_channels: BTreeSet::new(),
            kc_weights: KcWeights::default(),
            early_stop_patience: 20,
            target_mse: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.frozen_channels.contains(&Channel::PretrainHead) {
            return Err(TrainError::InvalidConfig("pretrain_head is not a freezable channel".into()));
        }
        self.kc_weights.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    fn trainable(&self) -> Vec<Channel> {
        self.stage.channels().iter().copied().filter(|c| !self.frozen_channels.contains(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_kc: f64,
    pub train_total: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub stage: Stage,
    pub epochs: Vec<EpochLoss>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,train_kc,train_total,val_loss\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{},{},{}", e.epoch, e.train_mse, e.train_kc, e.train_total, e.val_loss).expect("string");
        }
        s
    }
}

/// Samples paired with oracle labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet<'a> {
    pub samples: Vec<&'a SampleInput>,
    pub labels: Vec<FrequencyMetrics>,
}

impl<'a> LabeledSet<'a> {
    pub fn from_records(records: &[&'a LabeledRecord]) -> Self {
        Self { samples: records.iter().map(|r| &r.input).collect(), labels: records.iter().map(|r| r.label).collect() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loss value of one batch with its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridLoss {
    pub mse: f64,
    pub kc: f64,
    pub total: f64,
}

fn frozen_hashes(model: &FusionModel, trainable: &[Channel]) -> Vec<(Channel, String)> {
    Channel::ALL.iter().filter(|c| !trainable.contains(c)).map(|&c| (c, model.channel_hash(c))).collect()
}

fn check_frozen(model: &FusionModel, before: &[(Channel, String)]) -> Result<()> {
    for (c, h) in before {
        if model.channel_hash(*c) != *h {
            return Err(TrainError::FrozenChannelDrift(*c));
        }
    }
    Ok(())
}

/// Minibatch Adam over `n` items with best-validation checkpointing.
/// `step` records a batch's loss on the tape and returns (loss, mse, kc).
fn optimize(
    model: &mut FusionModel,
    cfg: &TrainConfig,
    n: usize,
    stream: u64,
    mut step: impl FnMut(&FusionModel, &mut Tape, &[usize]) -> Result<(usize, f64, f64)>,
    mut val: impl FnMut(&FusionModel) -> Result<f64>,
) -> Result<LossCurve> {
    cfg.validate()?;
    if n == 0 {
        return Err(TrainError::EmptyData("training"));
    }
    let trainable = cfg.trainable();
    let mask = model.trainable_mask(&trainable);
    let before = frozen_hashes(model, &trainable);
    let mut opt = OptimState::adam(cfg.learning_rate, &model.store);
    let mut best_val = val(model)?;
    let mut best_store: ParamStore = model.store.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seeded_rng(cfg.seed, (stream << 32) | epoch as u64));
        let (mut sum_mse, mut sum_kc) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (loss, mse, kc) = step(model, &mut tape, batch)?;
            let grads = tape.backward(loss, &model.store)?;
            adam_step(&mut model.store, &grads, &mut opt, &mask)?;
            sum_mse += mse * batch.len() as f64;
            sum_kc += kc * batch.len() as f64;
        }
        let v = val(model)?;
        let (train_mse, train_kc) = (sum_mse / n as f64, sum_kc / n as f64);
        epochs.push(EpochLoss { epoch, train_mse, train_kc, train_total: train_mse + train_kc, val_loss: v });
        if v < best_val {
            best_val = v;
            best_epoch = epoch;
            best_store = model.store.clone();
        } else if epoch - best_epoch > cfg.early_stop_patience {
            break;
        }
    }
    model.store = best_store;
    check_frozen(model, &before)?;
    if let Some(target) = cfg.target_mse {
        if !(best_val <= target) {
            return Err(TrainError::TargetNotReached { mse: best_val, target });
        }
    }
    Ok(LossCurve { stage: cfg.stage, epochs, best_epoch, best_val })
}

fn masked_mse(pred: &[[f64; OUTPUTS]], target: &[[f64; OUTPUTS]], mask: &[f64; OUTPUTS]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..OUTPUTS).map(|o| mask[o] * (p[o] - t[o]).powi(2)).sum::<f64>())
        .sum();
    s / pred.len().max(1) as f64
}

fn tensor_rows(rows: impl Iterator<Item = [f64; OUTPUTS]>) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / OUTPUTS;
    Ok(Tensor::new(vec![n, OUTPUTS], data)?)
}

/// Raw global rows for knowledge records. Knowledge has no penetration, so
/// that feature sits at the labelled-set mean.
fn knowledge_rows(model: &FusionModel, data: &KnowledgeDataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let norm = model.norm()?;
    if model.config.global_dim() != crate::dataset::GLOBAL_FEATURES || model.config.kd_residual {
        return Err(TrainError::InvalidConfig("knowledge pretraining needs plain global inputs".into()));
    }
    let pen = norm.global.mean[7];
    let xs = data.records.iter().map(|r| vec![r.h, r.h_syn, r.h_vir, r.d, r.r_inv, r.t_r, r.f_h, pen, r.delta_p]).collect();
    let ys = data.records.iter().map(|r| r.label.to_array().to_vec()).collect();
    Ok((xs, ys))
}

fn to_six(v: Vec<f64>) -> [f64; OUTPUTS] {
    let mut r = [0.0; OUTPUTS];
    r.copy_from_slice(&v);
    r
}

fn pretrain_outputs(model: &FusionModel, xs: &[Vec<f64>], idx: &[usize]) -> Result<Vec<[f64; OUTPUTS]>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(1024) {
        let mut tape = Tape::new();
        let g = Tensor::new(vec![chunk.len(), xs[0].len()], chunk.iter().flat_map(|&i| xs[i].iter().copied()).collect())?;
        let v = model.record_pretrain(&mut tape, g)?;
        let t = tape.value(v);
        for i in 0..chunk.len() {
            let mut r = [0.0; OUTPUTS];
            r.copy_from_slice(t.row(i));
            out.push(r);
        }
    }
    Ok(out)
}

/// MSE of the pretraining path on a knowledge set, with outputs in the
/// units the pretraining loss used.
pub fn knowledge_mse(model: &FusionModel, data: &KnowledgeDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyData("knowledge"));
    }
    let norm = model.norm()?;
    let scale = model.knowledge_scale.as_ref().unwrap_or(&norm.output);
    let (xs, ys) = knowledge_rows(model, data)?;
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| norm.global.normalize(x)).collect();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let pred: Vec<[f64; OUTPUTS]> = pretrain_outputs(model, &xs, &idx)?
        .iter()
        .map(|z| to_six(scale.normalize(&norm.output.denormalize(z))))
        .collect();
    let ys: Vec<[f64; OUTPUTS]> = ys.iter().map(|y| to_six(scale.normalize(y))).collect();
    Ok(masked_mse(&pred, &ys, &[1.0; OUTPUTS]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub curve: LossCurve,
    /// MSE on the held-out tenth of the knowledge data, in knowledge-scaled
    /// output units.
    pub heldout_mse: f64,
}

/// Stage 1: MLP channel plus its temporary head on knowledge labels.
///
/// Knowledge spans wider ranges than the labelled data, so inputs and
/// outputs are standardised with the knowledge set's own statistics while
/// training. Afterwards the first MLP layer and the last head layer absorb
/// the change of scale, leaving a network that speaks the labelled-set
/// normalisation. Needs that normalisation already fitted.
pub fn pretrain_stage1(model: &mut FusionModel, data: &KnowledgeDataset, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    if cfg.stage != Stage::Pretrain {
        return Err(TrainError::InvalidConfig("pretrain_stage1 needs stage = pretrain".into()));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyData("knowledge"));
    }
    let (raw_x, raw_y) = knowledge_rows(model, data)?;
    let norm = model.norm()?.clone();
    let mut kin = Standardizer::fit(&raw_x);
    kin.mean[7] = norm.global.mean[7];
    kin.std[7] = norm.global.std[7];
    let kout = Standardizer::fit(&raw_y);
    let xs: Vec<Vec<f64>> = raw_x.iter().map(|x| kin.normalize(x)).collect();
    let ys: Vec<[f64; OUTPUTS]> = raw_y.iter().map(|y| to_six(kout.normalize(y))).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut seeded_rng(cfg.seed, 0x9e));
    let n_hold = if xs.len() >= 10 { xs.len() / 10 } else { 0 };
    let (hold, fit) = order.split_at(n_hold);
    let (hold, fit) = (hold.to_vec(), fit.to_vec());
    let hold_eval = if hold.is_empty() { fit.clone() } else { hold };
    let hold_y: Vec<[f64; OUTPUTS]> = hold_eval.iter().map(|&i| ys[i]).collect();
    let curve = optimize(
        model,
        cfg,
        fit.len(),
        1,
        |m, tape, batch| {
            let idx: Vec<usize> = batch.iter().map(|&b| fit[b]).collect();
            let g = Tensor::new(vec![idx.len(), xs[0].len()], idx.iter().flat_map(|&i| xs[i].iter().copied()).collect())?;
            let pred = m.record_pretrain(tape, g)?;
            let target = tensor_rows(idx.iter().map(|&i| ys[i]))?;
            let loss = tape.mse(pred, &target, None)?;
            let v = tape.value(loss).data[0];
            Ok((loss, v, 0.0))
        },
        |m| Ok(masked_mse(&pretrain_outputs(m, &xs, &hold_eval)?, &hold_y, &[1.0; OUTPUTS])),
    )?;
    fold_input_scale(model, &kin, &norm.global)?;
    fold_output_scale(model, &kout, &norm.output)?;
    model.knowledge_scale = Some(kout);
    let heldout_mse = curve.best_val;
    Ok(PretrainOutcome { curve, heldout_mse })
}

/// Rewrites the first MLP layer so that it takes `to`-normalised inputs
/// and computes what it computed on `from`-normalised ones.
fn fold_input_scale(model: &mut FusionModel, from: &Standardizer, to: &Standardizer) -> Result<()> {
    let [w, b] = model.mlp[0].params;
    let wt = model.store.params[w].value.clone();
    let (rows, cols) = (wt.rows(), wt.cols());
    if rows != from.mean.len() {
        return Err(TrainError::InvalidConfig("input scale does not match the first layer".into()));
    }
    let mut nw = wt.clone();
    let mut nb = model.store.params[b].value.clone();
    for i in 0..rows {
        let a = to.std[i] / from.std[i];
        let c = (to.mean[i] - from.mean[i]) / from.std[i];
        for j in 0..cols {
            nw.data[i * cols + j] = a * wt.data[i * cols + j];
            nb.data[j] += c * wt.data[i * cols + j];
        }
    }
    model.store.params[w].value = nw;
    model.store.params[b].value = nb;
    Ok(())
}

/// Rewrites the last pretraining-head layer from `from`-normalised outputs
/// to `to`-normalised ones.
fn fold_output_scale(model: &mut FusionModel, from: &Standardizer, to: &Standardizer) -> Result<()> {
    let [w, b] = model.pretrain_head.last().expect("head has layers").params;
    let cols = model.store.params[w].value.cols();
    if cols != OUTPUTS {
        return Err(TrainError::InvalidConfig("pretraining head must emit six outputs".into()));
    }
    for o in 0..OUTPUTS {
        let a = from.std[o] / to.std[o];
        let c = (from.mean[o] - to.mean[o]) / to.std[o];
        let wt = &mut model.store.params[w].value;
        for r in 0..wt.rows() {
            wt.data[r * cols + o] *= a;
        }
        let bt = &mut model.store.params[b].value;
        bt.data[o] = bt.data[o] * a + c;
    }
    Ok(())
}

/// Seeds the fusion head from the pretraining head: MLP-side rows and the
/// second layer are copied, graph-side rows start at zero.
pub fn init_head_from_pretrain(model: &mut FusionModel) -> Result<()> {
    let (h0, p0) = (model.head[0].params, model.pretrain_head[0].params);
    let (h1, p1) = (model.head[1].params, model.pretrain_head[1].params);
    let src = model.store.params[p0[0]].value.clone();
    let dst = &mut model.store.params[h0[0]].value;
    let offset = dst.rows().checked_sub(src.rows()).filter(|_| dst.cols() == src.cols() && model.head.len() == 2);
    let Some(offset) = offset else {
        return Err(TrainError::InvalidConfig("fusion head and pretraining head widths differ".into()));
    };
    let cols = dst.cols();
    dst.data[..offset * cols].iter_mut().for_each(|v| *v = 0.0);
    dst.data[offset * cols..].copy_from_slice(&src.data);
    for (d, s) in [(h0[1], p0[1]), (h1[0], p1[0]), (h1[1], p1[1])] {
        let v = model.store.params[s].value.clone();
        model.store.params[d].value = v;
    }
    Ok(())
}

fn head_targets(model: &FusionModel, samples: &[NormalizedSample], labels: &[FrequencyMetrics]) -> Result<Vec<[f64; OUTPUTS]>> {
    samples.iter().zip(labels).map(|(s, l)| Ok(model.head_target(&l.to_array(), s)?)).collect()
}

/// Stage 2: every main channel trainable on oracle labels, keeping the
/// checkpoint with the lowest validation MSE.
pub fn finetune_stage2(model: &mut FusionModel, train: &LabeledSet, val: &LabeledSet, cfg: &TrainConfig) -> Result<LossCurve> {
    if cfg.stage != Stage::Finetune {
        return Err(TrainError::InvalidConfig("finetune_stage2 needs stage = finetune".into()));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let tr = model.normalize_all(&train.samples)?;
    let tr_y = head_targets(model, &tr, &train.labels)?;
    let va = model.normalize_all(&val.samples)?;
    let va_y = head_targets(model, &va, &val.labels)?;
    let mask = model.output_mask();
    optimize(
        model,
        cfg,
        tr.len(),
        2,
        |m, tape, batch| {
            let refs: Vec<&NormalizedSample> = batch.iter().map(|&i| &tr[i]).collect();
            let pred = m.record_preliminary(tape, &refs)?;
            let target = tensor_rows(batch.iter().map(|&i| tr_y[i]))?;
            let mask_t = tensor_rows(batch.iter().map(|_| mask))?;
            let loss = tape.mse(pred, &target, Some(&mask_t))?;
            let v = tape.value(loss).data[0];
            Ok((loss, v, 0.0))
        },
        |m| {
            let refs: Vec<&NormalizedSample> = va.iter().collect();
            Ok(masked_mse(&m.raw_preliminary(&refs)?, &va_y, &mask))
        },
    )
}

/// One corrector training item in normalised output units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnItem {
    pub input: [f64; OUTPUTS],
    pub target: [f64; OUTPUTS],
    pub ctx: ConstraintContext,
    /// Weight of the item's regression term.
    pub weight: f64,
    /// False for pseudo-labelled items.
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnAugment {
    /// Violation items per preliminary.
    pub fraction: f64,
    /// Relative perturbation of one output.
    pub scale: f64,
    /// Outputs that may be perturbed.
    pub outputs: Vec<usize>,
    /// Regression weight of pseudo-labelled items.
    pub pseudo_weight: f64,
}

impl Default for CnAugment {
    fn default() -> Self {
        Self { fraction: 1.0, scale: 0.5, outputs: vec![0, 3, 4, 5], pseudo_weight: 0.2 }
    }
}

/// Builds corrector items from frozen preliminaries. Labelled samples
/// regress to their oracle label; unlabelled samples regress to their own
/// preliminary; violation items (one output of a preliminary scaled by
/// 1 ± scale) regress to the unperturbed preliminary.
pub fn cn_items(
    model: &FusionModel,
    data: &LabeledSet,
    unlabeled: &[&SampleInput],
    augment: &CnAugment,
    seed: u64,
) -> Result<Vec<CnItem>> {
    if augment.outputs.iter().any(|&o| o >= OUTPUTS) || !(augment.pseudo_weight >= 0.0) {
        return Err(TrainError::InvalidConfig("corrector augmentation settings".into()));
    }
    let norm = model.norm()?;
    let all: Vec<&SampleInput> = data.samples.iter().chain(unlabeled).copied().collect();
    let ns = model.normalize_all(&all)?;
    let refs: Vec<&NormalizedSample> = ns.iter().collect();
    let prelim = model.forward_preliminary_batch(&refs)?;
    let z = |m: &FrequencyMetrics| to_six(norm.output.normalize(&m.to_array()));
    let pw = augment.pseudo_weight;
    let mut items: Vec<CnItem> = prelim
        .iter()
        .zip(&ns)
        .enumerate()
        .map(|(i, (p, s))| match data.labels.get(i) {
            Some(l) => CnItem { input: z(p), target: z(l), ctx: s.ctx, weight: 1.0, oracle: true },
            None => CnItem { input: z(p), target: z(p), ctx: s.ctx, weight: pw, oracle: false },
        })
        .collect();
    let n_aug = (augment.fraction * prelim.len() as f64).round() as usize;
    if !augment.outputs.is_empty() {
        let mut rng = seeded_rng(seed, 0xa06);
        for k in 0..n_aug {
            let i = k % prelim.len();
            let o = augment.outputs[rng.gen_range(0..augment.outputs.len())];
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let bad = perturb_deviation(&prelim[i], o, 1.0 + sign * augment.scale, ns[i].ctx.f_n);
            items.push(CnItem { input: z(&bad), target: z(&prelim[i]), ctx: ns[i].ctx, weight: pw, oracle: false });
        }
    }
    Ok(items)
}

/// Scales one output's deviation by `factor`; frequencies are measured
/// from `f_n`, the other outputs from zero.
pub fn perturb_deviation(m: &FrequencyMetrics, output: usize, factor: f64, f_n: f64) -> FrequencyMetrics {
    let mut a = m.to_array();
    let base = if output == 1 || output == 3 { f_n } else { 0.0 };
    a[output] = base + (a[output] - base) * factor;
    FrequencyMetrics::from_array(a)
}

/// MSE plus constraint loss of the corrector on a batch, recorded on `tape`.
fn record_cn_loss(model: &FusionModel, tape: &mut Tape, items: &[&CnItem], w: &KcWeights) -> Result<(usize, f64, f64)> {
    let input = tensor_rows(items.iter().map(|i| i.input))?;
    let target = tensor_rows(items.iter().map(|i| i.target))?;
    let ctxs: Vec<ConstraintContext> = items.iter().map(|i| i.ctx).collect();
    let weights = tensor_rows(items.iter().map(|i| [i.weight; OUTPUTS]))?;
    let out = model.record_cn(tape, input, &ctxs)?;
    let mse = tape.mse(out, &target, Some(&weights))?;
    let norm = model.norm()?;
    let kc = tape.kc_loss(out, &norm.output, &ctxs, w)?;
    let (a, b) = (tape.value(mse).data[0], tape.value(kc).data[0]);
    let loss = tape.add(mse, kc)?;
    Ok((loss, a, b))
}

/// Corrector loss on `items`, split into its parts.
pub fn cn_loss(model: &FusionModel, items: &[CnItem], w: &KcWeights) -> Result<HybridLoss> {
    if items.is_empty() {
        return Err(TrainError::EmptyData("corrector"));
    }
    let refs: Vec<&CnItem> = items.iter().collect();
    let mut tape = Tape::new();
    let (loss, mse, kc) = record_cn_loss(model, &mut tape, &refs, w)?;
    Ok(HybridLoss { mse, kc, total: tape.value(loss).data[0] })
}

/// Stage 3: only the corrector trains, on MSE plus constraint loss.
pub fn train_cn_stage3(
    model: &mut FusionModel,
    train: &LabeledSet,
    unlabeled: &[&SampleInput],
    val: &LabeledSet,
    cfg: &TrainConfig,
    augment: &CnAugment,
) -> Result<LossCurve> {
    if cfg.stage != Stage::Cn {
        return Err(TrainError::InvalidConfig("train_cn_stage3 needs stage = cn".into()));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let items = cn_items(model, train, unlabeled, augment, cfg.seed)?;
    let val_items = cn_items(model, val, &[], augment, cfg.seed ^ 0x5a5a)?;
    let w = cfg.kc_weights;
    let curve = optimize(
        model,
        cfg,
        items.len(),
        3,
        |m, tape, batch| {
            let refs: Vec<&CnItem> = batch.iter().map(|&i| &items[i]).collect();
            record_cn_loss(m, tape, &refs, &w)
        },
        |m| Ok(cn_loss(m, &val_items, &w)?.total),
    )?;
    model.cn_trained = true;
    model.kc_weights = w;
    Ok(curve)
}

/// Knowledge source with T_R in the labels scaled by (1 + fraction).
pub fn knowledge_error_injection(sampler: &KnowledgeSampler, fraction: f64) -> Result<KnowledgeSampler> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(TrainError::InvalidConfig(format!("t_r error {fraction} outside [0, 0.5]")));
    }
    Ok(KnowledgeSampler { t_r_error: fraction, ..*sampler })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "KD")]
    Kd,
    #[serde(rename = "DD")]
    Dd,
    #[serde(rename = "SFD")]
    Sfd,
    #[serde(rename = "PFD")]
    Pfd,
    #[serde(rename = "GL")]
    Gl,
    #[serde(rename = "GL_CN")]
    GlCn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [Self::Kd, Self::Dd, Self::Sfd, Self::Pfd, Self::Gl, Self::GlCn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kd => "KD",
            Self::Dd => "DD",
            Self::Sfd => "SFD",
            Self::Pfd => "PFD",
            Self::Gl => "GL",
            Self::GlCn => "GL_CN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.as_str().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| TrainError::UnknownKind(s.to_string()))
    }

    /// Architecture options this kind adds to the shared model config.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Self::Sfd => {
                c.kd_inputs = true;
                c.kd_residual = true;
            }
            Self::Pfd => c.kd_override = vec![0, 3],
            _ => {}
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnowledgeConfig {
    pub sampler: KnowledgeSampler,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self { sampler: KnowledgeSampler::default(), n_samples: 20_000, seed: 23 }
    }
}

/// Settings shared by every baseline so that runs differ only in procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub cn: TrainConfig,
    pub knowledge: KnowledgeConfig,
    pub cn_augment: CnAugment,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig::for_stage(Stage::Pretrain),
            finetune: TrainConfig::for_stage(Stage::Finetune),
            cn: TrainConfig::for_stage(Stage::Cn),
            knowledge: KnowledgeConfig::default(),
            cn_augment: CnAugment::default(),
        }
    }
}

impl PipelineConfig {
    /// Same pipeline with every seed replaced by `seed`-derived values.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.pretrain.seed = seed;
        c.finetune.seed = seed;
        c.cn.seed = seed;
        c.knowledge.seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(23);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.cn.validate()?;
        if self.knowledge.n_samples == 0 {
            return Err(TrainError::InvalidConfig("knowledge.n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that maps samples to indicator predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predictor {
    /// Closed-form aggregated response.
    Knowledge { kc_weights: KcWeights },
    /// A fusion model; `gated` routes failing outputs through the corrector.
    Model { model: Box<FusionModel>, gated: bool },
}

impl Predictor {
    pub fn predict(&self, samples: &[&SampleInput]) -> Result<Vec<Prediction>> {
        match self {
            Predictor::Knowledge { kc_weights } => samples
                .iter()
                .map(|s| {
                    let m = kd_predict(s)?;
                    Ok(Prediction {
                        metrics: m,
                        preliminary: m,
                        residuals: kc_residuals_with(&m, &s.ctx, kc_weights.floor),
                        provenance: PredictionSource::Retained,
                    })
                })
                .collect(),
            Predictor::Model { model, gated } => {
                let ns = model.normalize_all(samples)?;
                let refs: Vec<&NormalizedSample> = ns.iter().collect();
                if *gated {
                    return Ok(model.predict_batch(&refs)?);
                }
                let prelim = model.forward_preliminary_batch(&refs)?;
                Ok(prelim
                    .into_iter()
                    .zip(&ns)
                    .map(|(m, s)| Prediction {
                        metrics: m,
                        preliminary: m,
                        residuals: kc_residuals_with(&m, &s.ctx, model.kc_weights.floor),
                        provenance: PredictionSource::Retained,
                    })
                    .collect())
            }
        }
    }

    pub fn model(&self) -> Option<&FusionModel> {
        match self {
            Predictor::Model { model, .. } => Some(model),
            Predictor::Knowledge { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBaseline {
    pub kind: BaselineKind,
    pub predictor: Predictor,
    pub curves: Vec<LossCurve>,
    /// Held-out knowledge MSE after pretraining, for the guided kinds.
    pub pretrain_heldout_mse: Option<f64>,
}

/// Data for a baseline run. Guided kinds draw knowledge from the pipeline
/// config when none is given.
#[derive(Debug, Clone, Default)]
pub struct BaselineData<'a> {
    pub train: LabeledSet<'a>,
    pub val: LabeledSet<'a>,
    /// Inputs without oracle labels; the corrector uses them with
    /// pseudo-labels.
    pub unlabeled: Vec<&'a SampleInput>,
    pub knowledge: Option<&'a KnowledgeDataset>,
}

/// Normalisation, then stage 1 and the head hand-over.
pub fn pretrained_model(data: &BaselineData, cfg: &PipelineConfig) -> Result<(FusionModel, PretrainOutcome)> {
    let mut model = FusionModel::new(cfg.model.clone())?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    model.fit_normalization(&data.train.samples, &data.train.labels)?;
    let owned;
    let knowledge = match data.knowledge {
        Some(k) => k,
        None => {
            let f_n = data.train.samples[0].ctx.f_n;
            owned = sample_knowledge_dataset(&cfg.knowledge.sampler, cfg.knowledge.n_samples, cfg.knowledge.seed, f_n)?;
            &owned
        }
    };
    let outcome = pretrain_stage1(&mut model, knowledge, &cfg.pretrain)?;
    init_head_from_pretrain(&mut model)?;
    Ok((model, outcome))
}

pub fn train_baseline(kind: BaselineKind, data: &BaselineData, cfg: &PipelineConfig) -> Result<TrainedBaseline> {
    cfg.validate()?;
    let mut curves = Vec::new();
    let mut pretrain_heldout_mse = None;
    let predictor = match kind {
        BaselineKind::Kd => Predictor::Knowledge { kc_weights: cfg.cn.kc_weights },
        BaselineKind::Dd | BaselineKind::Sfd | BaselineKind::Pfd => {
            let mut model = FusionModel::new(kind.model_config(&cfg.model))?;
            model.fit_normalization(&data.train.samples, &data.train.labels)?;
            curves.push(finetune_stage2(&mut model, &data.train, &data.val, &cfg.finetune)?);
            Predictor::Model { model: Box::new(model), gated: false }
        }
        BaselineKind::Gl | BaselineKind::GlCn => {
            let (mut model, outcome) = pretrained_model(data, cfg)?;
            pretrain_heldout_mse = Some(outcome.heldout_mse);
            curves.push(outcome.curve);
            curves.push(finetune_stage2(&mut model, &data.train, &data.val, &cfg.finetune)?);
            if kind == BaselineKind::GlCn {
                curves.push(train_cn_stage3(&mut model, &data.train, &data.unlabeled, &data.val, &cfg.cn, &cfg.cn_augment)?);
            }
            Predictor::Model { model: Box::new(model), gated: kind == BaselineKind::GlCn }
        }
    };
    Ok(TrainedBaseline { kind, predictor, curves, pretrain_heldout_mse })
}

/// Adds the corrector stage to a GL result, giving GL_CN.
pub fn extend_with_cn(gl: &TrainedBaseline, data: &BaselineData, cfg: &PipelineConfig) -> Result<TrainedBaseline> {
    let Predictor::Model { model, .. } = &gl.predictor else {
        return Err(TrainError::InvalidConfig("corrector stage needs a trained model".into()));
    };
    let mut model = model.as_ref().clone();
    let mut curves = gl.curves.clone();
    curves.push(train_cn_stage3(&mut model, &data.train, &data.unlabeled, &data.val, &cfg.cn, &cfg.cn_augment)?);
    Ok(TrainedBaseline {
        kind: BaselineKind::GlCn,
        predictor: Predictor::Model { model: Box::new(model), gated: true },
        curves,
        pretrain_heldout_mse: gl.pretrain_heldout_mse,
    })
}
