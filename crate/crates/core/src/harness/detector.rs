use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{HeadGrad, LinearHead, Matrix, Rng};
use crate::pcdisc::RegionClassifier;
use crate::pseudo::{nms, BBox, Detection};
use crate::regloss::{decode_deltas, BoxDeltas};
use crate::synthbench::{gen_proposals, proposal_feature, BenchConfig, ClassPrototypes, Scene};

/// Largest log size ratio applied when decoding boxes.
const MAX_LOG_RATIO: f64 = 4.135;

/// Classification head (no bias, background is the last row) and a
/// class-agnostic box-regression head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub cls: LinearHead,
    pub reg: LinearHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorGrad {
    pub cls: HeadGrad,
    pub reg: HeadGrad,
}

impl DetectorGrad {
    pub fn zeros_like(d: &Detector) -> Self {
        Self {
            cls: HeadGrad::zeros_like(&d.cls),
            reg: HeadGrad::zeros_like(&d.reg),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.cls.flatten();
        v.extend(self.reg.flatten());
        v
    }
}

/// Stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Detector {
    pub fn init(bench: &BenchConfig, init_std: f64, rng: &mut Rng) -> Self {
        let d = bench.feature_dim();
        Self {
            cls: LinearHead::classifier(Matrix::random_normal(bench.num_classes(), d, init_std, rng))
                .expect("finite init"),
            reg: LinearHead::with_bias(Matrix::random_normal(4, d, init_std, rng), vec![0.0; 4])
                .expect("finite init"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_dim()
    }

    pub fn background(&self) -> usize {
        self.num_classes() - 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.cls.num_params() + self.reg.num_params());
        self.cls.write_params(&mut v);
        self.reg.write_params(&mut v);
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let rest = self.cls.read_params(flat)?;
        let rest = self.reg.read_params(rest)?;
        if !rest.is_empty() {
            return Err(Error::shape("Detector::load_flat", "exact parameter count", format!("{} extra", rest.len())));
        }
        Ok(())
    }

    pub fn apply_sgd(&mut self, grad: &DetectorGrad, lr: f64) -> Result<()> {
        self.cls.apply_sgd(&grad.cls, lr)?;
        self.reg.apply_sgd(&grad.reg, lr)
    }

    pub fn classify(&self, feature: &[f64]) -> Result<usize> {
        Ok(argmax(&self.cls.forward(feature)?))
    }

    pub fn predict_deltas(&self, feature: &[f64]) -> Result<BoxDeltas> {
        let mut d = BoxDeltas::from_slice(&self.reg.forward(feature)?);
        d.tw = d.tw.min(MAX_LOG_RATIO);
        d.th = d.th.min(MAX_LOG_RATIO);
        Ok(d)
    }

    /// Regression-refined box, clipped to the canvas.
    pub fn refine(&self, proposal: &BBox, feature: &[f64], canvas: (f64, f64)) -> Result<Option<BBox>> {
        let d = self.predict_deltas(feature)?;
        Ok(decode_deltas(&d, proposal).ok().and_then(|b| b.clip(canvas.0, canvas.1)))
    }

    /// Argmax class with its probability and refined box; `None` for background.
    pub fn detect(&self, proposal: &BBox, feature: &[f64], canvas: (f64, f64)) -> Result<Option<Detection>> {
        let probs = softmax(&self.cls.forward(feature)?);
        let cls = argmax(&probs);
        if cls == self.background() {
            return Ok(None);
        }
        Ok(self.refine(proposal, feature, canvas)?.map(|bbox| Detection {
            bbox,
            cls,
            score: probs[cls],
        }))
    }

    /// Fresh proposals and features for `scene`, detections, then NMS.
    pub fn detect_scene(
        &self,
        scene: &Scene,
        protos: &ClassPrototypes,
        bench: &BenchConfig,
        nms_thr: f64,
        rng: &mut Rng,
    ) -> Result<Vec<Detection>> {
        let canvas = (scene.canvas.width, scene.canvas.height);
        let mut dets = Vec::new();
        for p in gen_proposals(scene, bench, rng) {
            let prop = proposal_feature(scene, protos, &p, bench.noise_sigma, rng);
            if let Some(d) = self.detect(&p, &prop.feature, canvas)? {
                dets.push(d);
            }
        }
        Ok(nms(&dets, nms_thr))
    }
}

/// A detector bound to a scene: re-classifies regions with fresh feature draws.
pub struct SceneRegionClassifier<'a> {
    pub detector: &'a Detector,
    pub scene: &'a Scene,
    pub protos: &'a ClassPrototypes,
    pub noise_sigma: f64,
    pub rng: &'a mut Rng,
    /// Refined box of the last classified region when it came out foreground.
    pub last_box: Option<BBox>,
}

impl RegionClassifier for SceneRegionClassifier<'_> {
    fn classify_region(&mut self, region: &BBox) -> Result<usize> {
        let prop = proposal_feature(self.scene, self.protos, region, self.noise_sigma, self.rng);
        let cls = self.detector.classify(&prop.feature)?;
        self.last_box = if cls == self.detector.background() {
            None
        } else {
            self.detector
                .refine(region, &prop.feature, (self.scene.canvas.width, self.scene.canvas.height))?
        };
        Ok(cls)
    }
}

/// Saved detector plus what is needed to evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorFile {
    pub seed: u64,
    pub nms_thr: f64,
    pub eval_iou: f64,
    pub benchmark: BenchConfig,
    pub detector: Detector,
}

impl DetectorFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let bench = BenchConfig::default();
        let d = Detector::init(&bench, 0.1, &mut Rng::new(1));
        let mut e = Detector::init(&bench, 0.0, &mut Rng::new(2));
        e.load_flat(&d.flatten()).unwrap();
        assert_eq!(d, e);
        assert!(e.load_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
