//! AP@IoU with 101-point interpolated precision, averaged over classes.

use crate::error::{Error, Result};
use crate::harness::detector::Detector;
use crate::numcore::Rng;
use crate::pseudo::{iou, Detection};
use crate::synthbench::{derive_seed, domain, gen_proposals, proposal_feature, BenchConfig, ClassPrototypes, GtObject, Scene};

/// Per-image detections and ground truth.
pub struct ImageEval<'a> {
    pub detections: Vec<Detection>,
    pub ground_truth: &'a [GtObject],
}

/// Average precision in percent.
///
/// Per class, detections are ranked by score (ties keep image order) and each
/// is matched to the highest-IoU unmatched ground truth of its class in the
/// same image with IoU `>= iou_thr`. Precision is made monotone from the
/// right and sampled at recall `0, 0.01, ..., 1`. Classes without ground
/// truth are skipped.
pub fn average_precision(images: &[ImageEval<'_>], num_fg: usize, iou_thr: f64) -> Result<f64> {
    let mut per_class = Vec::new();
    for c in 0..num_fg {
        let n_gt: usize = images
            .iter()
            .map(|im| im.ground_truth.iter().filter(|g| g.cls == c).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, im)| im.detections.iter().filter(|d| d.cls == c).map(move |d| (i, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

        let mut matched: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut recall = Vec::with_capacity(ranked.len());
        let mut precision = Vec::with_capacity(ranked.len());
        for (img, det) in ranked {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in images[img].ground_truth.iter().enumerate() {
                if g.cls != c || matched[img][j] {
                    continue;
                }
                let v = iou(&det.bbox, &g.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    matched[img][j] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            recall.push(tp as f64 / n_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut total = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            if idx < precision.len() {
                total += precision[idx];
            }
        }
        per_class.push(total / 101.0);
    }
    if per_class.is_empty() {
        return Err(Error::InvalidArgument("no ground truth to evaluate against".into()));
    }
    Ok(100.0 * per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Runs `detector` on every scene and returns AP in percent.
///
/// Proposal and feature draws for a scene depend only on the benchmark seed
/// and the scene id, so every call sees the same inputs.
pub fn evaluate_ap(
    detector: &Detector,
    protos: &ClassPrototypes,
    bench: &BenchConfig,
    scenes: &[Scene],
    nms_thr: f64,
    iou_thr: f64,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let eval_seed = derive_seed(bench.seed, domain::EVAL);
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let mut rng = Rng::with_stream(eval_seed, s.image_id);
        images.push(ImageEval {
            detections: detector.detect_scene(s, protos, bench, nms_thr, &mut rng)?,
            ground_truth: &s.objects,
        });
    }
    average_precision(&images, bench.num_fg_classes, iou_thr)
}

/// Row-normalised confusion among foreground classes for proposals that
/// overlap their object with IoU >= 0.5: `rates[true][pred]`.
pub fn confusion_rates(
    detector: &Detector,
    protos: &ClassPrototypes,
    bench: &BenchConfig,
    scenes: &[Scene],
) -> Result<Vec<Vec<f64>>> {
    let k = detector.num_classes();
    let mut counts = vec![vec![0usize; k]; k];
    let eval_seed = derive_seed(bench.seed, domain::EVAL);
    for s in scenes {
        let mut rng = Rng::with_stream(eval_seed, s.image_id);
        for p in gen_proposals(s, bench, &mut rng) {
            let prop = proposal_feature(s, protos, &p, bench.noise_sigma, &mut rng);
            let best = s
                .objects
                .iter()
                .map(|o| (o, iou(&p, &o.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((obj, v)) = best {
                if v >= 0.5 {
                    counts[obj.cls][detector.classify(&prop.feature)?] += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.into_iter().map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::BBox;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn empty_detections_score_zero() {
        let gt = [GtObject { bbox: bx(0.0, 0.0, 10.0, 10.0), cls: 0 }];
        let images = [ImageEval { detections: vec![], ground_truth: &gt }];
        assert_eq!(average_precision(&images, 2, 0.5).unwrap(), 0.0);
        assert!(average_precision(&[], 2, 0.5).is_err());
    }

    #[test]
    fn perfect_ranking_scores_hundred() {
        let gt = [
            GtObject { bbox: bx(0.0, 0.0, 10.0, 10.0), cls: 0 },
            GtObject { bbox: bx(20.0, 20.0, 30.0, 30.0), cls: 1 },
        ];
        let dets = vec![
            Detection { bbox: gt[0].bbox, cls: 0, score: 0.9 },
            Detection { bbox: gt[1].bbox, cls: 1, score: 0.8 },
            Detection { bbox: bx(50.0, 50.0, 60.0, 60.0), cls: 0, score: 0.1 },
        ];
        let images = [ImageEval { detections: dets, ground_truth: &gt }];
        assert_eq!(average_precision(&images, 2, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gt = [GtObject { bbox: bx(0.0, 0.0, 10.0, 10.0), cls: 0 }];
        // FP ranked first, then the TP: precision 1/2 at recall 1
        let dets = vec![
            Detection { bbox: bx(40.0, 40.0, 50.0, 50.0), cls: 0, score: 0.9 },
            Detection { bbox: gt[0].bbox, cls: 0, score: 0.5 },
        ];
        let images = [ImageEval { detections: dets, ground_truth: &gt }];
        assert!((average_precision(&images, 1, 0.5).unwrap() - 50.0).abs() < 1e-12);
    }
}
