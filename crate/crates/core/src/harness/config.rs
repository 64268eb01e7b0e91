use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthbench::BenchConfig;
use crate::vcloss::{ScaleMode, VcConfig};

/// How pseudo-labelled samples with a confusing potential-category set are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Plain pseudo labels, no potential-category handling.
    Baseline,
    /// Confusing samples are dropped.
    Discard,
    /// One cross-entropy term per potential category.
    Keep,
    /// Virtual category target.
    #[default]
    Vc,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Discard, Strategy::Keep, Strategy::Vc];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Baseline => "baseline",
            Strategy::Discard => "discard",
            Strategy::Keep => "keep",
            Strategy::Vc => "vc",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "discard" => Ok(Strategy::Discard),
            "keep" => Ok(Strategy::Keep),
            "vc" => Ok(Strategy::Vc),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Source of potential-category sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcMode {
    /// Compare with the pseudo labels of the previous visit.
    #[default]
    Temporal,
    /// Ask a second, independently trained teacher.
    Cross,
}

impl fmt::Display for PcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PcMode::Temporal => "temporal",
            PcMode::Cross => "cross",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub label_ratio: f64,
    pub iterations: usize,
    pub warmup_iters: usize,
    pub lr: f64,
    /// Weight of the unlabelled loss.
    pub lambda_u: f64,
    pub ema_momentum: f64,
    pub unlabelled_per_step: usize,
    pub score_thr: f64,
    pub nms_thr: f64,
    pub fg_thr: f64,
    pub bg_thr: f64,
    pub iou_close_thr: f64,
    pub t_loc: f64,
    pub smooth_l1_beta: f64,
    pub scale_mode: ScaleMode,
    pub virtual_scale: f64,
    pub focal_gamma: f64,
    pub pc_mode: PcMode,
    pub strategy: Strategy,
    pub reg_star_enabled: bool,
    pub init_std: f64,
    pub eval_interval: usize,
    pub eval_iou: f64,
    /// Evaluate the EMA teacher (otherwise the student).
    pub eval_teacher: bool,
    pub benchmark: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label_ratio: 0.01,
            iterations: 6000,
            warmup_iters: 400,
            lr: 0.01,
            lambda_u: 2.0,
            ema_momentum: 0.999,
            unlabelled_per_step: 4,
            score_thr: 0.7,
            nms_thr: 0.5,
            fg_thr: 0.5,
            bg_thr: 0.5,
            iou_close_thr: 0.5,
            t_loc: 0.05,
            smooth_l1_beta: 1.0,
            scale_mode: ScaleMode::Constant,
            virtual_scale: 3.5,
            focal_gamma: 1.5,
            pc_mode: PcMode::Temporal,
            strategy: Strategy::Vc,
            reg_star_enabled: true,
            init_std: 0.01,
            eval_interval: 200,
            eval_iou: 0.5,
            eval_teacher: true,
            benchmark: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn vc_config(&self) -> VcConfig {
        VcConfig {
            scale_mode: self.scale_mode,
            constant_scale: self.virtual_scale,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if self.iterations == 0 || self.warmup_iters >= self.iterations {
            return bad(format!(
                "warmup_iters ({}) must be smaller than iterations ({})",
                self.warmup_iters, self.iterations
            ));
        }
        if self.eval_interval == 0 || !self.iterations.is_multiple_of(self.eval_interval) {
            return bad(format!(
                "eval_interval ({}) must divide iterations ({})",
                self.eval_interval, self.iterations
            ));
        }
        if !unit_open(self.label_ratio) {
            return bad(format!("label_ratio must lie in (0, 1), got {}", self.label_ratio));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!("lambda_u must be >= 0, got {}", self.lambda_u));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1), got {}", self.ema_momentum));
        }
        for (name, v) in [
            ("score_thr", self.score_thr),
            ("nms_thr", self.nms_thr),
            ("fg_thr", self.fg_thr),
            ("iou_close_thr", self.iou_close_thr),
            ("eval_iou", self.eval_iou),
        ] {
            if !unit_open(v) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.bg_thr > 0.0 && self.bg_thr <= self.fg_thr) {
            return bad(format!("bg_thr ({}) must lie in (0, fg_thr]", self.bg_thr));
        }
        if !(self.t_loc > 0.0) || !(self.smooth_l1_beta > 0.0) || !(self.virtual_scale > 0.0) {
            return bad("t_loc, smooth_l1_beta and virtual_scale must be positive".into());
        }
        if !(self.focal_gamma >= 0.0) || !(self.init_std >= 0.0) {
            return bad("focal_gamma and init_std must be non-negative".into());
        }
        self.benchmark.validate()
    }

    /// Short label used in tables and CSV output.
    pub fn variant_label(&self) -> String {
        let mut s = self.strategy.to_string();
        if self.pc_mode == PcMode::Cross {
            s.push_str("-cross");
        }
        if self.reg_star_enabled {
            s.push_str("+reg*");
        }
        s
    }
}
