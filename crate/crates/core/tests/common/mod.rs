//! Brute-force oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use vcdet::numcore::Rng;
use vcdet::pcdisc::{quality_flags, temporal_pc, PcSet};
use vcdet::pseudo::{assign_proposals, AssignedTo, BBox, PseudoLabel};

/// Integer-grid boxes so that equal IoUs (ties) and exact threshold hits occur.
pub fn grid_box(rng: &mut Rng) -> BBox {
    let x1 = rng.below(12) as f64;
    let y1 = rng.below(12) as f64;
    let w = 1 + rng.below(8);
    let h = 1 + rng.below(8);
    BBox::new(x1, y1, x1 + w as f64, y1 + h as f64).unwrap()
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.coords();
    let [bx1, by1, bx2, by2] = b.coords();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// Exhaustive IoU table, then first index attaining the maximum.
pub fn oracle_argmax(b: &BBox, others: &[BBox]) -> Option<(usize, f64)> {
    let table: Vec<f64> = others.iter().map(|o| oracle_iou(b, o)).collect();
    let best = table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    table.iter().position(|&v| v == best).map(|j| (j, best))
}

/// Instances (of `n`, up to 20 boxes each) where `temporal_pc` disagrees with the oracle.
pub fn temporal_pc_mismatches(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    let bg = 10;
    let mut bad = 0;
    for _ in 0..n {
        let count = rng.below(20);
        let b = PseudoLabel { bbox: grid_box(&mut rng), cls: rng.below(bg), score: 0.9 };
        let others: Vec<PseudoLabel> = (0..count)
            .map(|_| PseudoLabel { bbox: grid_box(&mut rng), cls: rng.below(bg), score: 0.8 })
            .collect();
        let close: Vec<(usize, BBox)> = others
            .iter()
            .enumerate()
            .filter(|(_, o)| oracle_iou(&b.bbox, &o.bbox) >= 0.5)
            .map(|(j, o)| (j, o.bbox))
            .collect();
        let boxes: Vec<BBox> = close.iter().map(|c| c.1).collect();
        let expected = match oracle_argmax(&b.bbox, &boxes) {
            Some((k, _)) => (PcSet::pair(b.cls, others[close[k].0].cls), Some(close[k].1)),
            None => (PcSet::pair(b.cls, bg), None),
        };
        if temporal_pc(&b, &others, 0.5, bg) != expected {
            bad += 1;
        }
    }
    bad
}

/// Instances where `assign_proposals` disagrees with the oracle on any proposal.
pub fn assign_mismatches(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    let mut bad = 0;
    for _ in 0..n {
        let props: Vec<BBox> = (0..1 + rng.below(20)).map(|_| grid_box(&mut rng)).collect();
        let targets: Vec<BBox> = (0..rng.below(20)).map(|_| grid_box(&mut rng)).collect();
        let (fg, bg) = if rng.below(2) == 0 { (0.5, 0.5) } else { (0.5, 0.25) };
        let got = assign_proposals(&props, &targets, fg, bg).unwrap();
        let ok = props.iter().enumerate().all(|(i, p)| {
            let (want, v) = match oracle_argmax(p, &targets) {
                Some((j, v)) if v >= fg => (AssignedTo::Target(j), v),
                Some((_, v)) if v < bg => (AssignedTo::Background, v),
                Some((_, v)) => (AssignedTo::Ignored, v),
                None => (AssignedTo::Background, 0.0),
            };
            got[i].proposal == i && got[i].assigned == want && got[i].max_iou == v
        });
        if !ok {
            bad += 1;
        }
    }
    bad
}

/// Pairs whose flags change under a shared translation and power-of-two scaling.
/// Coordinates sit on a 1/64 grid so the transformed arithmetic is exact.
pub fn flag_invariance_violations(seed: u64, n: usize) -> usize {
    let mut rng = Rng::new(seed);
    let q = |rng: &mut Rng, lo: usize, span: usize| (lo + rng.below(span)) as f64 / 64.0;
    let make = |c: [f64; 4], s: f64, tx: f64, ty: f64| {
        BBox::new(c[0] * s + tx, c[1] * s + ty, c[2] * s + tx, c[3] * s + ty).unwrap()
    };
    let mut bad = 0;
    for _ in 0..n {
        let (x1, y1) = (q(&mut rng, 0, 640), q(&mut rng, 0, 640));
        let (w, h) = (q(&mut rng, 64, 640), q(&mut rng, 64, 640));
        let b = [x1, y1, x1 + w, y1 + h];
        let jitter = |rng: &mut Rng, c: f64, side: f64| c + side * (rng.below(21) as f64 - 10.0) / 128.0;
        let hat = [
            jitter(&mut rng, b[0], w),
            jitter(&mut rng, b[1], h),
            jitter(&mut rng, b[2], w),
            jitter(&mut rng, b[3], h),
        ];
        let reference = quality_flags(&make(b, 1.0, 0.0, 0.0), Some(&make(hat, 1.0, 0.0, 0.0)), 0.05).unwrap();
        let s = [0.25, 0.5, 2.0, 8.0][rng.below(4)];
        let (tx, ty) = (rng.below(200) as f64 - 100.0, rng.below(200) as f64 - 100.0);
        let moved = quality_flags(&make(b, s, tx, ty), Some(&make(hat, s, tx, ty)), 0.05).unwrap();
        if reference != moved {
            bad += 1;
        }
    }
    bad
}
