//! Segmentation objectives with analytic gradients.
//!
//! Gradients are taken with respect to the predicted probabilities; mapping
//! them through a softmax is left to the caller. All reductions run in f64
//! with a fixed summation tree.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::numeric::sum_by;
use crate::volume::{LabelVolume, ProbVolume, Real};

/// Lower clamp applied to probabilities inside the logarithm.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_dc: f64,
    /// Denominator smoothing of the soft Dice term.
    pub eps: f64,
    /// One weight per supervised scale, finest first.
    pub ds_weights: Vec<f64>,
    /// Include class 0 in the Dice class mean.
    pub include_background: bool,
    /// Drop classes with no ground-truth voxels from the Dice class mean.
    pub exclude_absent: bool,
    /// Voxels with this label are left out of every sum.
    pub ignore_label: Option<u16>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_dc: 1.0,
            eps: 1e-5,
            ds_weights: vec![1.0],
            include_background: true,
            exclude_absent: false,
            ignore_label: None,
        }
    }
}

impl LossConfig {
    /// Halving weights `1, 1/2, 1/4, ...` for `k` scales.
    pub fn halving_weights(k: usize) -> Vec<f64> {
        (0..k).map(|i| 0.5f64.powi(i as i32)).collect()
    }

    pub fn with_scales(mut self, k: usize) -> Self {
        self.ds_weights = Self::halving_weights(k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_dc >= 0.0) || self.lambda_ce + self.lambda_dc == 0.0 {
            return arg_err("lambdas must be non-negative and not both zero");
        }
        if !(self.eps > 0.0) {
            return arg_err("eps must be positive");
        }
        if self.ds_weights.is_empty() || self.ds_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return arg_err("deep supervision weights must be positive");
        }
        Ok(())
    }
}

/// Valid-voxel mask and count.
fn valid_voxels<T: Real>(pred: &ProbVolume<T>, gt: &LabelVolume, ignore: Option<u16>) -> Result<(Vec<bool>, usize)> {
    if pred.grid.dims != gt.grid.dims {
        return shape_err(format!("prediction {:?} vs labels {:?}", pred.grid.dims, gt.grid.dims));
    }
    let c = pred.channels;
    let mut valid = Vec::with_capacity(gt.data.len());
    for &l in &gt.data {
        let ok = Some(l) != ignore;
        if ok && l as usize >= c {
            return shape_err(format!("label {l} has no prediction channel (C = {c})"));
        }
        valid.push(ok);
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return arg_err("no valid voxels");
    }
    Ok((valid, count))
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy<T: Real>(pred: &ProbVolume<T>, gt: &LabelVolume, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (valid, count) = valid_voxels(pred, gt, cfg.ignore_label)?;
    let n = pred.voxels();
    let omega = count as f64;
    let p_true = |v: usize| pred.data[gt.data[v] as usize * n + v].as_f64();
    let loss = -sum_by(n, |v| if valid[v] { p_true(v).max(CE_CLAMP).ln() } else { 0.0 }) / omega;
    let mut grad = vec![0.0; pred.data.len()];
    for v in (0..n).filter(|&v| valid[v]) {
        let p = p_true(v);
        if p > CE_CLAMP {
            grad[gt.data[v] as usize * n + v] = -1.0 / (p * omega);
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceOutput {
    pub loss: f64,
    #[serde(skip)]
    pub grad: Vec<f64>,
    /// Soft Dice coefficient per class; `None` for classes left out of the mean.
    pub per_class: Vec<Option<f64>>,
}

/// `1 - mean_c 2 Σ p g / (Σ p + Σ g + eps)`.
pub fn soft_dice<T: Real>(pred: &ProbVolume<T>, gt: &LabelVolume, cfg: &LossConfig) -> Result<DiceOutput> {
    if !(cfg.eps > 0.0) {
        return arg_err("eps must be positive");
    }
    let (valid, _) = valid_voxels(pred, gt, cfg.ignore_label)?;
    let n = pred.voxels();
    let classes = pred.channels;
    let mut stats = Vec::with_capacity(classes);
    for c in 0..classes {
        let pc = pred.channel(c);
        let p_sum = sum_by(n, |v| if valid[v] { pc[v].as_f64() } else { 0.0 });
        let g_sum = (0..n).filter(|&v| valid[v] && gt.data[v] as usize == c).count() as f64;
        let inter = sum_by(n, |v| if valid[v] && gt.data[v] as usize == c { pc[v].as_f64() } else { 0.0 });
        stats.push((p_sum, g_sum, inter));
    }
    let included: Vec<bool> = (0..classes)
        .map(|c| (cfg.include_background || c != 0) && (!cfg.exclude_absent || stats[c].1 > 0.0))
        .collect();
    let k = included.iter().filter(|&&i| i).count();
    if k == 0 {
        return arg_err("no classes left for the Dice mean");
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let (p, g, i) = stats[c];
            included[c].then(|| 2.0 * i / (p + g + cfg.eps))
        })
        .collect();
    let loss = 1.0 - per_class.iter().flatten().sum::<f64>() / k as f64;
    let mut grad = vec![0.0; pred.data.len()];
    for c in (0..classes).filter(|&c| included[c]) {
        let (p, g, i) = stats[c];
        let d = p + g + cfg.eps;
        let d2 = d * d;
        for v in (0..n).filter(|&v| valid[v]) {
            let gv = if gt.data[v] as usize == c { 1.0 } else { 0.0 };
            grad[c * n + v] = -(2.0 * gv * d - 2.0 * i) / d2 / k as f64;
        }
    }
    Ok(DiceOutput { loss, grad, per_class })
}

/// Loss terms of one output scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub weight: f64,
    pub ce: f64,
    pub dice: f64,
    pub combined: f64,
    pub per_class_dice: Vec<Option<f64>>,
}

/// `lambda_ce * CE + lambda_dc * Dice` and its gradient.
pub fn combined_loss<T: Real>(pred: &ProbVolume<T>, gt: &LabelVolume, cfg: &LossConfig) -> Result<(ScaleLoss, Vec<f64>)> {
    cfg.validate()?;
    let (ce, g_ce) = cross_entropy(pred, gt, cfg)?;
    let dice = soft_dice(pred, gt, cfg)?;
    let combined = cfg.lambda_ce * ce + cfg.lambda_dc * dice.loss;
    let grad = g_ce.iter().zip(&dice.grad).map(|(a, b)| cfg.lambda_ce * a + cfg.lambda_dc * b).collect();
    Ok((ScaleLoss { weight: 1.0, ce, dice: dice.loss, combined, per_class_dice: dice.per_class }, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// `Σ_k w_k CE_k`.
    pub ce: f64,
    /// `Σ_k w_k Dice_k`.
    pub dice: f64,
    pub per_scale: Vec<ScaleLoss>,
}

/// `Σ_k w_k L_comb(pred_k, gt_k)`; gradients are returned per scale, already weighted.
pub fn deep_supervision_loss<T: Real>(
    preds: &[ProbVolume<T>],
    gts: &[LabelVolume],
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if preds.len() != gts.len() || preds.len() != cfg.ds_weights.len() {
        return shape_err(format!(
            "{} predictions, {} label volumes, {} weights",
            preds.len(),
            gts.len(),
            cfg.ds_weights.len()
        ));
    }
    let mut per_scale = Vec::with_capacity(preds.len());
    let mut grads = Vec::with_capacity(preds.len());
    for ((pred, gt), &w) in preds.iter().zip(gts).zip(&cfg.ds_weights) {
        let (mut term, grad) = combined_loss(pred, gt, cfg)?;
        term.weight = w;
        grads.push(grad.into_iter().map(|g| w * g).collect());
        per_scale.push(term);
    }
    let total = per_scale.iter().map(|s| s.weight * s.combined).sum();
    let ce = per_scale.iter().map(|s| s.weight * s.ce).sum();
    let dice = per_scale.iter().map(|s| s.weight * s.dice).sum();
    Ok((LossReport { total, ce, dice, per_scale }, grads))
}
