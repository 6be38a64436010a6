//! Segmentation, adversarial and cycle losses, plus the Dice metric.
//!
//! Every differentiable loss is built from candle tensor ops so gradients come
//! from autograd. The Dice score works on hard label maps and is computed on the
//! host.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};

/// Smallest value `1 - TI` is clamped to before the focal power; keeps the
/// gradient of `x^(1/gamma)` finite at a perfect prediction.
const FOCAL_FLOOR: f64 = 1e-20;

/// Loss hyperparameters shared by the structure loss and the composite
/// generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on false negatives.
    pub alpha: f64,
    /// Weight on false positives.
    pub beta: f64,
    /// Focal parameter; the loss uses the exponent `1 / gamma`.
    pub gamma: f64,
    pub epsilon: f64,
    /// Weight of the structure term in the generator objective.
    pub zeta: f64,
    pub lambda_cyc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
            epsilon: 1e-6,
            zeta: 1.0,
            lambda_cyc: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (self.gamma > 0.0, "gamma must be > 0"),
            (self.epsilon > 0.0, "epsilon must be > 0"),
            (self.zeta >= 0.0, "zeta must be >= 0"),
            (self.lambda_cyc >= 0.0, "lambda_cyc must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(invalid(msg));
            }
        }
        let all_finite = [
            self.alpha,
            self.beta,
            self.gamma,
            self.epsilon,
            self.zeta,
            self.lambda_cyc,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid("loss parameters must be finite"));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, shape `(batch, classes, height, width)`.
///
/// One channel means binary segmentation (foreground probability). Two or more
/// channels are a per-pixel distribution over classes, background first.
#[derive(Debug, Clone)]
pub struct ProbMap(Tensor);

impl ProbMap {
    /// Wraps `values` after checking range and normalization.
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, classes, _, _) = values
            .dims4()
            .map_err(|_| dim_err(format!("probability map must be rank 4, got {:?}", values.dims())))?;
        let host = values.to_dtype(DType::F64)?;
        let flat = host.flatten_all()?.to_vec1::<f64>()?;
        if flat.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        if classes >= 2 {
            let sums = host.sum(1)?.flatten_all()?.to_vec1::<f64>()?;
            if sums.iter().any(|s| (s - 1.0).abs() > 1e-5) {
                return Err(invalid("class probabilities must sum to 1 per pixel"));
            }
        }
        Ok(Self(values))
    }

    /// Wraps segmenter output without the host-side range check.
    pub(crate) fn from_network(values: Tensor) -> Self {
        Self(values)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    /// Hard labels: 0.5 threshold for one channel, argmax otherwise.
    pub fn hard_labels(&self) -> Result<MaskBatch> {
        let (_, classes, _, _) = self.0.dims4()?;
        let labels = if classes == 1 {
            self.0.squeeze(1)?.ge(0.5)?.to_dtype(DType::U32)?
        } else {
            self.0.argmax(1)?
        };
        let num_classes = if classes == 1 { 2 } else { classes };
        Ok(MaskBatch {
            labels,
            num_classes,
        })
    }
}

/// Integer class-index masks, shape `(batch, height, width)`, class 0 is
/// background.
#[derive(Debug, Clone)]
pub struct MaskBatch {
    labels: Tensor,
    num_classes: usize,
}

impl MaskBatch {
    pub fn new(labels: Tensor, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        if labels.rank() != 3 {
            return Err(dim_err(format!(
                "mask batch must be rank 3, got {:?}",
                labels.dims()
            )));
        }
        let labels = labels.to_dtype(DType::U32)?;
        let max = labels.flatten_all()?.to_vec1::<u32>()?.into_iter().max();
        if let Some(max) = max {
            if max as usize >= num_classes {
                return Err(invalid(format!(
                    "label value {max} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn from_vec(
        data: Vec<u32>,
        (batch, height, width): (usize, usize, usize),
        num_classes: usize,
        device: &Device,
    ) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(dim_err(format!(
                "{} labels do not fill a {batch}x{height}x{width} batch",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (batch, height, width), device)?, num_classes)
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.labels.dims();
        (d[0], d[1], d[2])
    }

    pub fn to_vec(&self) -> Result<Vec<u32>> {
        Ok(self.labels.flatten_all()?.to_vec1::<u32>()?)
    }

    /// One-hot indicators for classes `first..first + count`, as `(b, count, h, w)`.
    fn one_hot(&self, first: usize, count: usize, dtype: DType) -> Result<Tensor> {
        let ids: Vec<u32> = (first..first + count).map(|c| c as u32).collect();
        let ids = Tensor::from_vec(ids, (1, count, 1, 1), self.labels.device())?;
        let hot = self.labels.unsqueeze(1)?.broadcast_eq(&ids)?;
        Ok(hot.to_dtype(dtype)?)
    }
}

/// Foreground probabilities and their one-hot targets, both `(b, k, h, w)`.
fn foreground_pairs(pred: &ProbMap, target: &MaskBatch) -> Result<(Tensor, Tensor)> {
    let p = pred.tensor();
    let (b, ch, h, w) = p.dims4()?;
    let (tb, th, tw) = target.dims();
    if (b, h, w) != (tb, th, tw) {
        return Err(dim_err(format!(
            "prediction {:?} and target {:?} disagree",
            p.dims(),
            target.labels.dims()
        )));
    }
    let expected = if ch == 1 { 2 } else { ch };
    if target.num_classes != expected {
        return Err(invalid(format!(
            "target has {} classes but the prediction encodes {expected}",
            target.num_classes
        )));
    }
    let fg = if ch == 1 { p.clone() } else { p.narrow(1, 1, ch - 1)? };
    let k = fg.dims()[1];
    let g = target.one_hot(1, k, p.dtype())?;
    Ok((fg, g))
}

/// Tversky index for every non-background class, pooled over the whole batch.
///
/// `pred` and `target` must share batch and spatial dims. A single-channel
/// prediction is the foreground probability of a two-class mask.
pub fn tversky_index(pred: &ProbMap, target: &MaskBatch, cfg: &LossConfig) -> Result<Tensor> {
    let (p, g) = foreground_pairs(pred, target)?;
    let p_neg = p.affine(-1.0, 1.0)?;
    let g_neg = g.affine(-1.0, 1.0)?;
    let pool = |t: Tensor| -> Result<Tensor> { Ok(t.sum(D::Minus1)?.sum(D::Minus1)?.sum(0)?) };
    let tp = pool((&p * &g)?)?;
    let false_neg = pool((&p_neg * &g)?)?;
    let false_pos = pool((&p * &g_neg)?)?;
    let numer = (&tp + cfg.epsilon)?;
    let denom = ((&tp + (false_neg * cfg.alpha)?)? + (false_pos * cfg.beta)?)?;
    let denom = (denom + cfg.epsilon)?;
    Ok((numer / denom)?)
}

/// Sum over non-background classes of `(1 - TI_c)^(1 / gamma)`.
pub fn focal_tversky_loss(pred: &ProbMap, target: &MaskBatch, cfg: &LossConfig) -> Result<Tensor> {
    let ti = tversky_index(pred, target, cfg)?;
    let gap = ti.affine(-1.0, 1.0)?;
    let gap = gap.maximum(FOCAL_FLOOR)?;
    Ok(gap.powf(1.0 / cfg.gamma)?.sum_all()?)
}

/// Focal-Tversky loss of the segmenter's prediction on a cycle-recovered
/// source image against the source label. Only source labels are accepted.
pub fn structure_loss(
    segmenter_out: &ProbMap,
    source_label: &MaskBatch,
    cfg: &LossConfig,
) -> Result<Tensor> {
    focal_tversky_loss(segmenter_out, source_label, cfg)
}

/// Dice score of one class over two hard label maps of identical shape.
///
/// Two empty indicator maps score 1, exactly one empty map scores 0.
pub fn dice_score(pred_labels: &MaskBatch, target: &MaskBatch, class_id: u32) -> Result<f64> {
    if pred_labels.dims() != target.dims() {
        return Err(dim_err(format!(
            "label maps {:?} and {:?} disagree",
            pred_labels.dims(),
            target.dims()
        )));
    }
    Ok(dice_from_labels(
        &pred_labels.to_vec()?,
        &target.to_vec()?,
        class_id,
    ))
}

pub(crate) fn dice_from_labels(pred: &[u32], target: &[u32], class_id: u32) -> f64 {
    let (mut inter, mut n_pred, mut n_target) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p == class_id, t == class_id);
        n_pred += p as usize;
        n_target += t as usize;
        inter += (p && t) as usize;
    }
    if n_pred + n_target == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (n_pred + n_target) as f64
    }
}

/// Least-squares adversarial loss: mean of `(score - target)^2` with target
/// 1 for real and 0 for fake.
pub fn lsgan_loss(disc_out: &Tensor, target_is_real: bool) -> Result<Tensor> {
    if disc_out.elem_count() == 0 {
        return Err(invalid("discriminator output is empty"));
    }
    let target = if target_is_real { 1.0 } else { 0.0 };
    Ok(disc_out.affine(1.0, -target)?.sqr()?.mean_all()?)
}

/// Mean absolute difference between an image and its cycle reconstruction.
pub fn cycle_loss(original: &Tensor, recovered: &Tensor) -> Result<Tensor> {
    if original.dims() != recovered.dims() {
        return Err(dim_err(format!(
            "original {:?} and recovered {:?} disagree",
            original.dims(),
            recovered.dims()
        )));
    }
    Ok((original - recovered)?.abs()?.mean_all()?)
}

/// Scalar components of the generator objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc_x: f64,
    pub cyc_y: f64,
    #[serde(rename = "struct")]
    pub structure: f64,
}

impl LossParts {
    pub const NAMES: [&'static str; 5] = ["adv_G", "adv_F", "cyc_X", "cyc_Y", "struct"];

    /// Collects the five named components, failing on any missing name.
    pub fn from_named(parts: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |name: &str| {
            parts
                .get(name)
                .copied()
                .ok_or_else(|| invalid(format!("objective part {name} is missing")))
        };
        Ok(Self {
            adv_g: get("adv_G")?,
            adv_f: get("adv_F")?,
            cyc_x: get("cyc_X")?,
            cyc_y: get("cyc_Y")?,
            structure: get("struct")?,
        })
    }
}

/// `adv_G + adv_F + lambda_cyc * (cyc_X + cyc_Y) + zeta * struct`.
pub fn sp_generator_objective(parts: &LossParts, cfg: &LossConfig) -> f64 {
    parts.adv_g
        + parts.adv_f
        + cfg.lambda_cyc * (parts.cyc_x + parts.cyc_y)
        + cfg.zeta * parts.structure
}
