//! Box geometry, duplicate suppression, score filtering, proposal assignment
//! and the per-image store of last-seen pseudo labels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in canvas coordinates, `x1 < x2` and `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "box has non-finite coordinates [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Degenerate(format!(
                "box [{x1}, {y1}, {x2}, {y2}] has non-positive extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips to `[0, w] x [0, h]`; `None` when nothing of positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    // union computed symmetrically so that iou(a, b) == iou(b, a) bitwise
    let union = (a.area() + b.area()) - inter;
    inter / union
}

/// Raw detector output before score filtering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub cls: usize,
    pub score: f64,
}

/// Greedy class-wise non-maximum suppression.
///
/// Output is sorted by descending score (ties keep input order). No two
/// surviving boxes of the same class overlap with IoU above `iou_thr`.
pub fn nms(detections: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let d = &detections[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.cls == d.cls && iou(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Teacher-generated training target for an unlabelled image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub cls: usize,
    pub score: f64,
}

/// Keeps detections with `score >= thr`, preserving order. Background
/// detections (`cls >= background`) never become pseudo labels.
pub fn filter_by_score(detections: &[Detection], thr: f64, background: usize) -> Vec<PseudoLabel> {
    detections
        .iter()
        .filter(|d| d.score >= thr && d.cls < background)
        .map(|d| PseudoLabel {
            bbox: d.bbox,
            cls: d.cls,
            score: d.score,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignedTo {
    /// Index into the target list.
    Target(usize),
    Background,
    /// Max IoU fell in `[bg_thr, fg_thr)`; the proposal is not trained.
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub proposal: usize,
    pub assigned: AssignedTo,
    pub max_iou: f64,
}

/// Matches each proposal to its maximal-IoU target box (lowest index on ties).
pub fn assign_proposals(
    proposals: &[BBox],
    targets: &[BBox],
    fg_thr: f64,
    bg_thr: f64,
) -> Result<Vec<Assignment>> {
    if fg_thr < bg_thr {
        return Err(Error::InvalidArgument(format!(
            "fg_thr ({fg_thr}) must be >= bg_thr ({bg_thr})"
        )));
    }
    Ok(proposals
        .iter()
        .enumerate()
        .map(|(proposal, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in targets.iter().enumerate() {
                let v = iou(p, t);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let (assigned, max_iou) = match best {
                Some((j, v)) if v >= fg_thr => (AssignedTo::Target(j), v),
                Some((_, v)) if v < bg_thr => (AssignedTo::Background, v),
                Some((_, v)) => (AssignedTo::Ignored, v),
                None => (AssignedTo::Background, 0.0),
            };
            Assignment {
                proposal,
                assigned,
                max_iou,
            }
        })
        .collect())
}

/// Most recent pseudo labels per image plus a visit counter.
#[derive(Clone, Debug, Default)]
pub struct LabelStore {
    last: HashMap<u64, Vec<PseudoLabel>>,
    visits: u64,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the labels stored at the previous visit of `image_id` (empty on
    /// the first visit) and replaces them with `current`.
    pub fn record_and_fetch_last(&mut self, image_id: u64, current: Vec<PseudoLabel>) -> Vec<PseudoLabel> {
        self.visits += 1;
        self.last.insert(image_id, current).unwrap_or_default()
    }

    pub fn visits(&self) -> u64 {
        self.visits
    }

    pub fn len(&self) -> usize {
        self.last.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last.is_empty()
    }
}
