//! Phased optimization: linear learning-rate warmup, per-branch warm start
//! with the cross gate closed, beta adaptation at the phase boundary, and
//! checkpoint selection by the validation staple score.

mod adam;
mod exact;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MultiDecoderNet;
use crate::datapipe::{
    average_annotations, pad_image, pad_to_grid, relabel_consensus, unpad_map, CaseRecord,
};
use crate::losses::{total_training_loss_with_grads, LossReport, LossWeights};
use crate::metrics::{staple_score, Provenance, SoftMap, ThresholdLadder};
use crate::{Error, Result};

pub use adam::Adam;

/// How decoder branches are matched to training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Decoder i trains against consensus level i (pixels at least i raters
    /// marked). A single decoder gets the median level.
    Consensus,
    /// Decoder i trains against rater i's raw mask.
    RawRater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Epoch at which the cross term opens; earlier epochs are Phase A.
    pub cross_enable_epoch: usize,
    pub total_epochs: usize,
    pub seed: u64,
    /// Re-derive betas from the final Phase-A per-branch losses.
    pub beta_adapt: bool,
    pub batch_size: usize,
    pub label_mode: LabelMode,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 3e-4,
            warmup_epochs: 10,
            weight_decay: 1e-5,
            cross_enable_epoch: 20,
            total_epochs: 100,
            seed: 0,
            beta_adapt: true,
            batch_size: 4,
            label_mode: LabelMode::Consensus,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs < 1 {
            return Err(Error::InvalidConfig("warmup_epochs must be >= 1".into()));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if self.total_epochs < 1 {
            return Err(Error::InvalidConfig("total_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// One hyperparameter-ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub seed: u64,
}

/// Hyperparameter variations trained independently and averaged at
/// prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub runs: Vec<EnsembleRun>,
}

impl EnsembleSpec {
    /// Three runs varying the cross-entropy weight and the seed.
    pub fn default_runs(n_branches: usize, base_seed: u64) -> Self {
        EnsembleSpec {
            runs: [1.0, 0.5, 1.5]
                .iter()
                .enumerate()
                .map(|(i, &alpha)| EnsembleRun {
                    alpha,
                    betas: vec![1.0; n_branches],
                    seed: base_seed + i as u64,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::InvalidConfig(
                "ensemble needs at least one run".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_epochs`, then a plateau. The
/// fraction is formed first so exact ratios (5/10, 10/10) stay exact.
pub fn warmup_lr(epoch: usize, s: &TrainSchedule) -> f64 {
    if epoch < s.warmup_epochs {
        s.base_lr * ((epoch + 1) as f64 / s.warmup_epochs as f64)
    } else {
        s.base_lr
    }
}

/// `beta_j = L_j / mean(L)`: branches with a higher pretrained loss pull
/// harder during joint training. Quotients are rounded as exact rational
/// arithmetic would round them, and the last entry is pinned so the betas
/// average to exactly 1.
pub fn adapt_betas(pretrain_losses: &[f64]) -> Result<Vec<f64>> {
    if pretrain_losses.is_empty() {
        return Err(Error::InvalidConfig("no losses to adapt from".into()));
    }
    if pretrain_losses.iter().any(|l| !l.is_finite() || *l <= 0.0) {
        return Err(Error::Numeric(format!(
            "pretrain losses must be finite and positive, got {pretrain_losses:?}"
        )));
    }
    let n = pretrain_losses.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mean = exact::exact_sum(pretrain_losses).div_f64(n as f64);
    let mut betas: Vec<f64> = pretrain_losses
        .iter()
        .map(|&l| exact::TwoFloat::from_f64(l).div(mean).to_f64())
        .collect();
    // pin the mean to exactly 1: sum(betas) == n after this adjustment
    let partial: f64 = betas[..n - 1].iter().sum();
    betas[n - 1] = n as f64 - partial;
    Ok(betas)
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss components over the epoch's batches.
    pub report: LossReport,
    pub val_score: f64,
}

/// Result of a training run; the network is left holding the parameters of
/// the best validation epoch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_score: f64,
    /// Betas in effect at the end of training (after any adaptation).
    pub final_betas: Vec<f64>,
}

/// Serializes epoch logs as CSV, one row per epoch with per-branch columns.
pub fn history_to_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::new();
    if epochs.is_empty() {
        return out;
    }
    let n = epochs[0].report.per_branch.len();
    out.push_str("epoch,lr");
    for i in 0..n {
        out.push_str(&format!(
            ",branch{i}_ce,branch{i}_dc,branch{i}_cross_mean,branch{i}_loss"
        ));
    }
    out.push_str(",total,val_staple\n");
    for e in epochs {
        out.push_str(&format!("{},{}", e.epoch, e.lr));
        for b in &e.report.per_branch {
            out.push_str(&format!(
                ",{},{},{},{}",
                b.cross_entropy,
                b.dice_self,
                b.dice_cross_mean(),
                b.loss
            ));
        }
        out.push_str(&format!(",{},{}\n", e.report.total, e.val_score));
    }
    out
}

/// Consensus levels assigned to decoders: the identity map when branch and
/// rater counts match, the median level for a single decoder.
fn assigned_levels(n_decoders: usize, n_raters: usize) -> Result<Vec<usize>> {
    if n_decoders == n_raters {
        Ok((1..=n_raters).collect())
    } else if n_decoders == 1 {
        Ok(vec![n_raters.div_ceil(2)])
    } else {
        Err(Error::InvalidConfig(format!(
            "cannot assign {n_raters} consensus levels to {n_decoders} decoders; \
             use matching counts or a single decoder"
        )))
    }
}

struct PreparedCase {
    image: Array3<f64>,
    targets: Vec<Array3<f64>>,
    gt_average: SoftMap,
}

fn prepare_cases(
    net: &MultiDecoderNet,
    cases: &[CaseRecord],
    mode: LabelMode,
) -> Result<Vec<PreparedCase>> {
    let cfg = net.config();
    let n_dec = cfg.n_decoders;
    cases
        .iter()
        .map(|case| {
            case.validate()?;
            let (padded, _) = pad_to_grid(case, cfg.grid_multiple());
            let image = padded.image.mapv(f64::from);
            let labels = relabel_consensus(&padded.raters)?;
            let masks: Vec<_> = match mode {
                LabelMode::Consensus => assigned_levels(n_dec, padded.raters.len())?
                    .into_iter()
                    .map(|k| labels.level(k))
                    .collect(),
                LabelMode::RawRater => {
                    if n_dec != padded.raters.len() {
                        return Err(Error::InvalidConfig(format!(
                            "raw-rater mode needs one decoder per rater ({} vs {})",
                            n_dec,
                            padded.raters.len()
                        )));
                    }
                    padded.raters.clone()
                }
            };
            let targets = masks
                .iter()
                .map(|m| crate::datapipe::one_hot_from_mask(m, cfg.n_classes))
                .collect();
            let gt_average = average_annotations(&padded.raters)?;
            Ok(PreparedCase {
                image,
                targets,
                gt_average,
            })
        })
        .collect()
}

/// Deterministic split: the last 20% of cases by sorted case id validate.
fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n == 1 {
        return (vec![0], vec![0]);
    }
    let n_val = (n / 5).max(1);
    let cut = n - n_val;
    ((0..cut).collect(), (cut..n).collect())
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n_branches = reports[0].per_branch.len();
    let inv = 1.0 / reports.len() as f64;
    let mut per_branch = Vec::with_capacity(n_branches);
    for b in 0..n_branches {
        let mut ce = 0.0;
        let mut dc = 0.0;
        let mut loss = 0.0;
        let mut cross: Vec<(usize, f64)> = reports[0].per_branch[b]
            .dice_cross
            .iter()
            .map(|&(j, _)| (j, 0.0))
            .collect();
        for r in reports {
            let t = &r.per_branch[b];
            ce += t.cross_entropy;
            dc += t.dice_self;
            loss += t.loss;
            for (slot, &(_, v)) in cross.iter_mut().zip(&t.dice_cross) {
                slot.1 += v;
            }
        }
        for slot in &mut cross {
            slot.1 *= inv;
        }
        per_branch.push(crate::losses::BranchLossTerms {
            branch: b,
            cross_entropy: ce * inv,
            dice_self: dc * inv,
            dice_cross: cross,
            loss: loss * inv,
        });
    }
    let total = reports.iter().map(|r| r.total).sum::<f64>() * inv;
    LossReport { per_branch, total }
}

/// Predicts the mean foreground probability map for one image, padding to
/// the model grid and unpadding back to the original shape.
pub fn predict(net: &MultiDecoderNet, image: &Array3<f32>) -> Result<SoftMap> {
    let (padded, crop) = pad_image(image, net.config().grid_multiple());
    let preds = net.forward_all(&padded.mapv(f64::from))?;
    let full = preds.mean_foreground.mapv(|v| v as f32);
    SoftMap::new(unpad_map(&full, &crop), Provenance::BranchAverage)
}

/// Arithmetic mean of per-model predictions.
pub fn ensemble_predict(models: &[MultiDecoderNet], image: &Array3<f32>) -> Result<SoftMap> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("empty ensemble".into()));
    }
    let mut acc: Option<ndarray::Array2<f64>> = None;
    for m in models {
        let p = predict(m, image)?;
        let v = p.values.mapv(f64::from);
        acc = Some(match acc {
            Some(a) => a + v,
            None => v,
        });
    }
    let mean = acc.expect("nonempty") / models.len() as f64;
    SoftMap::new(mean.mapv(|v| v as f32), Provenance::BranchAverage)
}

/// Runs the two-phase training loop and retains the checkpoint with the
/// best validation staple score (ties resolve to the earlier epoch).
pub fn train(
    net: &mut MultiDecoderNet,
    cases: &[CaseRecord],
    schedule: &TrainSchedule,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let n_dec = net.config().n_decoders;
    weights.validate(n_dec)?;
    if cases.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let mut sorted: Vec<&CaseRecord> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let owned: Vec<CaseRecord> = sorted.into_iter().cloned().collect();
    let prepared = prepare_cases(net, &owned, schedule.label_mode)?;
    let (train_idx, val_idx) = split_indices(prepared.len());

    let ladder = ThresholdLadder::default();
    let mut adam = Adam::new(net.parameter_count());
    let mut betas = weights.betas.clone();
    let mut epochs = Vec::with_capacity(schedule.total_epochs);
    let mut best_epoch = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<f64>> = None;
    let mut grads = vec![0.0; net.parameter_count()];

    for epoch in 0..schedule.total_epochs {
        let lr = warmup_lr(epoch, schedule);
        let eff = LossWeights {
            alpha: weights.alpha,
            betas: betas.clone(),
            cross_enabled: epoch >= schedule.cross_enable_epoch,
        };

        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut batch_reports = Vec::new();
        for batch in order.chunks(schedule.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &ci in batch {
                let pc = &prepared[ci];
                let (preds, trace) = net.forward_all_traced(&pc.image)?;
                let (loss, report, dprobs) =
                    total_training_loss_with_grads(&preds.probs, &pc.targets, &eff)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!(
                            "case index {ci}: total {loss}, components {:?}",
                            report
                                .per_branch
                                .iter()
                                .map(|b| (b.cross_entropy, b.dice_self))
                                .collect::<Vec<_>>()
                        ),
                    });
                }
                let branch_grads: Vec<Option<Array3<f64>>> = dprobs.into_iter().map(Some).collect();
                net.backward(&trace, &branch_grads, &mut grads)?;
                batch_reports.push(report);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            adam.step(net.params_mut(), &grads, lr, schedule.weight_decay);
        }
        let report = mean_reports(&batch_reports);

        // phase boundary: re-derive betas from the final Phase-A losses
        if schedule.beta_adapt && n_dec > 1 && epoch + 1 == schedule.cross_enable_epoch {
            let phase_a: Vec<f64> = report.per_branch.iter().map(|b| b.loss).collect();
            betas = adapt_betas(&phase_a)?;
        }

        let mut val_acc = 0.0;
        for &vi in &val_idx {
            let pc = &prepared[vi];
            let preds = net.forward_all(&pc.image)?;
            let soft = SoftMap::new(
                preds.mean_foreground.mapv(|v| v as f32),
                Provenance::BranchAverage,
            )?;
            val_acc += staple_score(&soft, &pc.gt_average, &ladder)?;
        }
        let val_score = val_acc / val_idx.len() as f64;

        if val_score > best_score {
            best_score = val_score;
            best_epoch = epoch;
            best_params = Some(net.params().to_vec());
        }
        epochs.push(EpochLog {
            epoch,
            lr,
            report,
            val_score,
        });
    }

    if let Some(p) = best_params {
        net.set_params(p)?;
    }
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_score: best_score,
        final_betas: betas,
    })
}
