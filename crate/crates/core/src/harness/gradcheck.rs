//! Finite-difference verification of every analytic gradient in the crate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::{dot, norm, LinearHead, Matrix, Rng};
use crate::pcdisc::{PcSet, QualityFlags};
use crate::regloss::{reg_star_loss, BoxDeltas};
use crate::vcloss::{
    build_virtual_weight, classification_loss_for_sample, extend_logits, masked_lse_loss, ScaleMode, TargetSpec,
    VcConfig,
};

pub const STEP: f64 = 1e-4;
pub const THRESHOLD: f64 = 1e-6;
pub const INSTANCES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradEntry::passed)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<40} n={:<4} max rel err {:.3e}  {}",
                e.name,
                e.instances,
                e.max_rel_err,
                if e.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|)` over whole vectors; two zero vectors agree.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric));
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Runs `instances` checks. `case` returns the point, the analytic gradient
/// there and the scalar function.
pub fn check_entry<F>(
    name: &str,
    instances: usize,
    rng: &mut Rng,
    mut case: impl FnMut(&mut Rng) -> Result<(Vec<f64>, Vec<f64>, F)>,
) -> Result<GradEntry>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (x, analytic, f) = case(rng)?;
        let numeric = numeric_gradient(f, &x, STEP)?;
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(GradEntry {
        name: name.to_string(),
        instances,
        max_rel_err: worst,
    })
}

fn normals(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

/// Random potential-category set over `k` classes with `primary` in it.
fn random_pc(rng: &mut Rng, k: usize, primary: usize) -> PcSet {
    if rng.uniform() < 0.25 {
        PcSet::single(primary)
    } else {
        PcSet::pair(primary, (primary + 1 + rng.below(k - 1)) % k)
    }
}

fn lse_entry(rng: &mut Rng, virtual_mode: bool, gamma: f64) -> Result<GradEntry> {
    let name = format!(
        "masked_lse_loss {} gamma={gamma}",
        if virtual_mode { "virtual" } else { "plain" }
    );
    check_entry(&name, INSTANCES, rng, |rng| {
        let k = 2 + rng.below(10);
        let target = if virtual_mode {
            let cls = rng.below(k);
            TargetSpec::for_sample(&random_pc(rng, k, cls), cls, k)?
        } else {
            TargetSpec::hard(rng.below(k))
        };
        let n = if virtual_mode { k + 1 } else { k };
        let logits = normals(rng, n, 2.0);
        let analytic = masked_lse_loss(&logits, &target, gamma)?.grad_logits;
        let f = move |l: &[f64]| Ok(masked_lse_loss(l, &target, gamma)?.value);
        Ok((logits, analytic, f))
    })
}

struct SampleCase {
    feature: Vec<f64>,
    weights: Matrix,
    teacher: Vec<f64>,
    pc: PcSet,
    cls: usize,
}

fn sample_case(rng: &mut Rng) -> Result<SampleCase> {
    let k = 2 + rng.below(10);
    let d = 4 + rng.below(20);
    let cls = rng.below(k);
    Ok(SampleCase {
        feature: normals(rng, d, 1.0),
        weights: Matrix::random_normal(k, d, 0.5, rng),
        teacher: normals(rng, d, 1.0),
        pc: random_pc(rng, k, cls),
        cls,
    })
}

fn vc_config() -> VcConfig {
    VcConfig {
        scale_mode: ScaleMode::Constant,
        constant_scale: 3.5,
        focal_gamma: 1.5,
    }
}

fn sample_feature_entry(rng: &mut Rng) -> Result<GradEntry> {
    check_entry("classification_loss_for_sample d/feature", INSTANCES, rng, |rng| {
        let c = sample_case(rng)?;
        let cfg = vc_config();
        let analytic =
            classification_loss_for_sample(&c.feature, &c.weights, &c.teacher, &c.pc, c.cls, &cfg)?.grad_feature;
        let x = c.feature.clone();
        let f = move |x: &[f64]| {
            Ok(classification_loss_for_sample(x, &c.weights, &c.teacher, &c.pc, c.cls, &cfg)?
                .loss
                .value)
        };
        Ok((x, analytic, f))
    })
}

fn sample_weights_entry(rng: &mut Rng) -> Result<GradEntry> {
    check_entry("classification_loss_for_sample d/weights", INSTANCES, rng, |rng| {
        let c = sample_case(rng)?;
        let cfg = vc_config();
        let analytic = classification_loss_for_sample(&c.feature, &c.weights, &c.teacher, &c.pc, c.cls, &cfg)?
            .grad_weights
            .as_slice()
            .to_vec();
        let (rows, cols) = (c.weights.rows(), c.weights.cols());
        let x = c.weights.as_slice().to_vec();
        let f = move |x: &[f64]| {
            let w = Matrix::new(rows, cols, x.to_vec())?;
            Ok(classification_loss_for_sample(&c.feature, &w, &c.teacher, &c.pc, c.cls, &cfg)?
                .loss
                .value)
        };
        Ok((x, analytic, f))
    })
}

fn reg_entry(rng: &mut Rng) -> Result<GradEntry> {
    check_entry("reg_star_loss d/deltas", INSTANCES, rng, |rng| {
        let beta = rng.uniform_range(0.5, 1.5);
        // keep every residual away from the quadratic/linear seam
        let mut residual = [0.0; 4];
        for r in &mut residual {
            loop {
                *r = 2.0 * rng.normal();
                if (r.abs() - beta).abs() > 1e-2 {
                    break;
                }
            }
        }
        let target = BoxDeltas::from_slice(&normals(rng, 4, 1.0));
        let t = target.to_array();
        let pred: Vec<f64> = (0..4).map(|i| t[i] + residual[i]).collect();
        let flags = QualityFlags {
            horizontal: rng.uniform() < 0.7,
            vertical: rng.uniform() < 0.7,
        };
        let analytic = reg_star_loss(&BoxDeltas::from_slice(&pred), &target, flags, beta).1.to_array().to_vec();
        let f = move |p: &[f64]| Ok(reg_star_loss(&BoxDeltas::from_slice(p), &target, flags, beta).0);
        Ok((pred, analytic, f))
    })
}

/// Head checked through the scalar `u . forward(x)`.
fn head_case(rng: &mut Rng) -> Result<(LinearHead, Vec<f64>, Vec<f64>)> {
    let (out, inp) = (1 + rng.below(8), 1 + rng.below(20));
    let weights = Matrix::random_normal(out, inp, 1.0, rng);
    let head = if rng.uniform() < 0.5 {
        LinearHead::classifier(weights)?
    } else {
        LinearHead::with_bias(weights, normals(rng, out, 1.0))?
    };
    let x = normals(rng, inp, 1.0);
    let u = normals(rng, out, 1.0);
    Ok((head, x, u))
}

fn head_param_entry(rng: &mut Rng) -> Result<GradEntry> {
    check_entry("linear head d/params", INSTANCES, rng, |rng| {
        let (head, x, u) = head_case(rng)?;
        let analytic = head.backward(&x, &u)?.0.flatten();
        let mut params = Vec::new();
        head.write_params(&mut params);
        let mut probe = head;
        let f = move |p: &[f64]| {
            probe.read_params(p)?;
            Ok(dot(&u, &probe.forward(&x)?))
        };
        Ok((params, analytic, f))
    })
}

fn head_input_entry(rng: &mut Rng) -> Result<GradEntry> {
    check_entry("linear head d/input", INSTANCES, rng, |rng| {
        let (head, x, u) = head_case(rng)?;
        let analytic = head.backward(&x, &u)?.1;
        let f = move |x: &[f64]| Ok(dot(&u, &head.forward(x)?));
        Ok((x, analytic, f))
    })
}

/// Extended-logit path checked end to end through the feature.
fn extended_logits_entry(rng: &mut Rng) -> Result<GradEntry> {
    check_entry("extend_logits d/feature", INSTANCES, rng, |rng| {
        let c = sample_case(rng)?;
        let vw = build_virtual_weight(&c.teacher, 3.5)?;
        let u = normals(rng, c.weights.rows() + 1, 1.0);
        let mut analytic = vec![0.0; c.feature.len()];
        for (i, ui) in u.iter().enumerate() {
            let row = if i < c.weights.rows() { c.weights.row(i) } else { vw.vector() };
            for (a, w) in analytic.iter_mut().zip(row) {
                *a += ui * w;
            }
        }
        let f = move |x: &[f64]| Ok(dot(&u, &extend_logits(x, &c.weights, &vw)?));
        Ok((c.feature, analytic, f))
    })
}

/// Every gradient check, deterministic in `seed`.
pub fn gradcheck(seed: u64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let mut entries = Vec::new();
    for virtual_mode in [false, true] {
        for gamma in [0.0, 1.5] {
            entries.push(lse_entry(&mut rng, virtual_mode, gamma)?);
        }
    }
    entries.push(sample_feature_entry(&mut rng)?);
    entries.push(sample_weights_entry(&mut rng)?);
    entries.push(extended_logits_entry(&mut rng)?);
    entries.push(reg_entry(&mut rng)?);
    entries.push(head_param_entry(&mut rng)?);
    entries.push(head_input_entry(&mut rng)?);
    Ok(GradReport { seed, entries })
}
