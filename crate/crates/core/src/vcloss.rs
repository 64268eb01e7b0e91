//! Virtual category loss.
//!
//! A confusing sample gets an extra per-sample class whose weight vector is
//! the normalised, scaled teacher feature of the sample. The classifier
//! logits are extended by one entry for it, the classes in the sample's
//! potential-category set are ignored, and the virtual class is the target.
//! Unambiguous samples use their pseudo class as target and ignore only the
//! virtual entry, which reduces to ordinary cross-entropy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{first_non_finite, Error, Result};
use crate::numcore::{dot, norm, Matrix};
use crate::pcdisc::PcSet;

/// Scaling rule for the virtual weight norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Fixed norm given by [`VcConfig::constant_scale`].
    #[default]
    Constant,
    /// Mean row norm of the current classifier weights.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcConfig {
    pub scale_mode: ScaleMode,
    pub constant_scale: f64,
    pub focal_gamma: f64,
}

impl Default for VcConfig {
    fn default() -> Self {
        Self {
            scale_mode: ScaleMode::Constant,
            constant_scale: 3.5,
            focal_gamma: 1.5,
        }
    }
}

impl VcConfig {
    pub fn resolve_scale(&self, weights: &Matrix) -> Result<f64> {
        match self.scale_mode {
            ScaleMode::Constant => Ok(self.constant_scale),
            ScaleMode::Adaptive => adaptive_scale(weights),
        }
    }
}

/// Mean Euclidean norm of the rows of `weights`.
pub fn adaptive_scale(weights: &Matrix) -> Result<f64> {
    if weights.rows() == 0 || weights.cols() == 0 {
        return Err(Error::InvalidArgument("adaptive_scale needs a non-empty weight matrix".into()));
    }
    if let Some(index) = first_non_finite(weights.as_slice()) {
        return Err(Error::NonFinite {
            context: "adaptive_scale weights",
            index,
        });
    }
    let total: f64 = weights.iter_rows().map(norm).sum();
    Ok(total / weights.rows() as f64)
}

/// Weight vector of a sample's virtual class. Constant during backward.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualWeight {
    vector: Vec<f64>,
    scale: f64,
}

impl VirtualWeight {
    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `scale * f / |f|`. A zero teacher feature is rejected.
pub fn build_virtual_weight(teacher_feature: &[f64], scale: f64) -> Result<VirtualWeight> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("virtual weight scale must be positive, got {scale}")));
    }
    if let Some(index) = first_non_finite(teacher_feature) {
        return Err(Error::NonFinite {
            context: "teacher feature",
            index,
        });
    }
    let n = norm(teacher_feature);
    if n == 0.0 {
        return Err(Error::Degenerate("teacher feature has zero norm".into()));
    }
    let k = scale / n;
    Ok(VirtualWeight {
        vector: teacher_feature.iter().map(|x| x * k).collect(),
        scale,
    })
}

/// `[f.w_0, ..., f.w_{K-1}, f.w_v]`; the virtual logit sits at index `K`.
pub fn extend_logits(student_feature: &[f64], weights: &Matrix, virtual_weight: &VirtualWeight) -> Result<Vec<f64>> {
    if student_feature.len() != weights.cols() || virtual_weight.vector.len() != weights.cols() {
        return Err(Error::shape(
            "extend_logits",
            format!("feature and virtual weight of length {}", weights.cols()),
            format!(
                "feature {} / virtual weight {}",
                student_feature.len(),
                virtual_weight.vector.len()
            ),
        ));
    }
    let mut logits: Vec<f64> = weights.iter_rows().map(|w| dot(w, student_feature)).collect();
    logits.push(dot(&virtual_weight.vector, student_feature));
    Ok(logits)
}

/// Target index plus the set of logits excluded from the normaliser.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSpec {
    target: usize,
    ignore: BTreeSet<usize>,
}

impl TargetSpec {
    pub fn new(target: usize, ignore: impl IntoIterator<Item = usize>) -> Result<Self> {
        let ignore: BTreeSet<usize> = ignore.into_iter().collect();
        if ignore.contains(&target) {
            return Err(Error::InvalidArgument(format!("target index {target} is in the ignore set")));
        }
        Ok(Self { target, ignore })
    }

    /// Plain cross-entropy target.
    pub fn hard(target: usize) -> Self {
        Self {
            target,
            ignore: BTreeSet::new(),
        }
    }

    /// Target for a pseudo-labelled sample over `num_classes + 1` extended
    /// logits: the virtual index with the potential categories ignored when the
    /// set is confusing, otherwise the pseudo class with the virtual index ignored.
    pub fn for_sample(pc: &PcSet, pseudo_cls: usize, num_classes: usize) -> Result<Self> {
        if !pc.contains(pseudo_cls) {
            return Err(Error::InvalidArgument(format!(
                "pseudo class {pseudo_cls} is not in the potential-category set {:?}",
                pc.members()
            )));
        }
        if pc.is_confusing() {
            Self::new(num_classes, pc.members().iter().copied())
        } else {
            Self::new(pseudo_cls, [num_classes])
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn ignore(&self) -> &BTreeSet<usize> {
        &self.ignore
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.ignore.contains(&i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Vec<f64>,
    /// `(1 - p_target)^gamma`, `1` when focal weighting is off.
    pub focal_weight: f64,
}

/// Ignore-masked log-sum-exp loss
/// `w_f * log(sum_{i not ignored} exp(l_i - l_target))` with
/// `w_f = (1 - p_target)^gamma`.
///
/// The gradient includes the derivative of `w_f`. With `gamma == 0` the
/// focal factor is skipped entirely.
pub fn masked_lse_loss(logits: &[f64], target: &TargetSpec, focal_gamma: f64) -> Result<LossResult> {
    let n = logits.len();
    if target.target >= n {
        return Err(Error::InvalidArgument(format!(
            "target index {} out of range for {n} logits",
            target.target
        )));
    }
    if let Some(&bad) = target.ignore.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("ignore index {bad} out of range for {n} logits")));
    }
    if let Some(index) = first_non_finite(logits) {
        return Err(Error::NonFinite {
            context: "masked_lse_loss logits",
            index,
        });
    }
    if !(focal_gamma >= 0.0 && focal_gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {focal_gamma}")));
    }

    let t = target.target;
    let shift = (0..n)
        .filter(|i| !target.is_ignored(*i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);

    let mut grad = vec![0.0; n];
    let mut sum = 0.0;
    for i in 0..n {
        if !target.is_ignored(i) {
            let e = (logits[i] - shift).exp();
            grad[i] = e;
            sum += e;
        }
    }
    let value = (shift - logits[t]) + sum.ln();

    let mut others = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if i != t && !target.is_ignored(i) {
            *g /= sum;
            others += *g;
        }
    }
    grad[t] = -others;

    if focal_gamma == 0.0 {
        return Ok(LossResult {
            value,
            grad_logits: grad,
            focal_weight: 1.0,
        });
    }

    let p_t = (-value).exp();
    let one_minus = -(-value).exp_m1();
    let weight = one_minus.powf(focal_gamma);
    let dweight = if one_minus > 0.0 {
        focal_gamma * value * p_t * one_minus.powf(focal_gamma - 1.0)
    } else {
        0.0
    };
    let factor = weight + dweight;
    grad.iter_mut().for_each(|g| *g *= factor);
    Ok(LossResult {
        value: weight * value,
        grad_logits: grad,
        focal_weight: weight,
    })
}

/// Loss of one pseudo-labelled sample with gradients for the student side.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub loss: LossResult,
    pub target: TargetSpec,
    pub virtual_weight: VirtualWeight,
    pub grad_feature: Vec<f64>,
    pub grad_weights: Matrix,
}

/// Builds the virtual weight from `teacher_feature`, extends the logits and
/// evaluates the masked loss. No gradient reaches the teacher feature.
pub fn classification_loss_for_sample(
    student_feature: &[f64],
    weights: &Matrix,
    teacher_feature: &[f64],
    pc: &PcSet,
    pseudo_cls: usize,
    config: &VcConfig,
) -> Result<SampleLoss> {
    let k = weights.rows();
    let target = TargetSpec::for_sample(pc, pseudo_cls, k)?;
    if let Some(&bad) = pc.members().iter().find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!("class {bad} out of range for {k} classes")));
    }
    let scale = config.resolve_scale(weights)?;
    let virtual_weight = build_virtual_weight(teacher_feature, scale)?;
    let logits = extend_logits(student_feature, weights, &virtual_weight)?;
    let loss = masked_lse_loss(&logits, &target, config.focal_gamma)?;

    let mut grad_weights = Matrix::zeros(k, weights.cols());
    let mut grad_feature = vec![0.0; weights.cols()];
    for (i, &g) in loss.grad_logits[..k].iter().enumerate() {
        if g != 0.0 {
            grad_weights.add_scaled_row(i, g, student_feature);
            for (o, w) in grad_feature.iter_mut().zip(weights.row(i)) {
                *o += g * w;
            }
        }
    }
    let gv = loss.grad_logits[k];
    if gv != 0.0 {
        for (o, w) in grad_feature.iter_mut().zip(&virtual_weight.vector) {
            *o += gv * w;
        }
    }

    Ok(SampleLoss {
        loss,
        target,
        virtual_weight,
        grad_feature,
        grad_weights,
    })
}
