//! Potential-category discovery (temporal stability and cross-model
//! verification) and the per-axis boundary quality flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::{iou, BBox, PseudoLabel};

/// Plausible classes of one pseudo-labelled sample. The first member is the
/// pseudo label's own class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcSet {
    members: Vec<usize>,
}

impl PcSet {
    pub fn single(cls: usize) -> Self {
        Self { members: vec![cls] }
    }

    /// `{primary, other}`, collapsing to a singleton when they agree.
    pub fn pair(primary: usize, other: usize) -> Self {
        if primary == other {
            Self::single(primary)
        } else {
            Self {
                members: vec![primary, other],
            }
        }
    }

    pub fn primary(&self) -> usize {
        self.members[0]
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, cls: usize) -> bool {
        self.members.contains(&cls)
    }

    /// More than one plausible class.
    pub fn is_confusing(&self) -> bool {
        self.members.len() > 1
    }
}

/// Temporal stability check of pseudo label `b` against `others`, the union of
/// the current and previous pseudo labels of the image with `b` removed.
///
/// The comparator is the max-IoU label among those with IoU at least
/// `iou_close_thr` (lowest index on ties). No comparator means the competing
/// category is background.
pub fn temporal_pc(
    b: &PseudoLabel,
    others: &[PseudoLabel],
    iou_close_thr: f64,
    background: usize,
) -> (PcSet, Option<BBox>) {
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in others.iter().enumerate() {
        let v = iou(&b.bbox, &o.bbox);
        if v >= iou_close_thr && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((j, v));
        }
    }
    match best {
        Some((j, _)) => (PcSet::pair(b.cls, others[j].cls), Some(others[j].bbox)),
        None => (PcSet::pair(b.cls, background), None),
    }
}

/// A second detector that can re-determine the class of a region.
pub trait RegionClassifier {
    /// Argmax class (background allowed) for the region.
    fn classify_region(&mut self, region: &BBox) -> Result<usize>;
}

/// Cross-model verification: the other detector re-classifies `b`'s region.
pub fn cross_model_pc<C: RegionClassifier + ?Sized>(b: &PseudoLabel, other: &mut C) -> Result<PcSet> {
    let cls2 = other.classify_region(&b.bbox)?;
    Ok(PcSet::pair(b.cls, cls2))
}

/// Per-axis boundary stability of a pseudo box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFlags {
    pub horizontal: bool,
    pub vertical: bool,
}

impl QualityFlags {
    pub const BOTH: QualityFlags = QualityFlags {
        horizontal: true,
        vertical: true,
    };

    pub fn q_hor(&self) -> f64 {
        if self.horizontal {
            1.0
        } else {
            0.0
        }
    }

    pub fn q_ver(&self) -> f64 {
        if self.vertical {
            1.0
        } else {
            0.0
        }
    }
}

/// Horizontal flag is set iff both left and right boundary shifts, relative to
/// the width of `b`, are below `t_loc`; vertical likewise with the height.
pub fn quality_flags(b: &BBox, b_hat: Option<&BBox>, t_loc: f64) -> Result<QualityFlags> {
    if !(t_loc > 0.0) {
        return Err(Error::InvalidArgument(format!("t_loc must be positive, got {t_loc}")));
    }
    let Some(h) = b_hat else {
        return Ok(QualityFlags::default());
    };
    let (w, ht) = (b.width(), b.height());
    let horizontal = ((b.x1() - h.x1()) / w).abs() < t_loc && ((b.x2() - h.x2()) / w).abs() < t_loc;
    let vertical = ((b.y1() - h.y1()) / ht).abs() < t_loc && ((b.y2() - h.y2()) / ht).abs() < t_loc;
    Ok(QualityFlags {
        horizontal,
        vertical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BG: usize = 10;
    const HORSE: usize = 3;
    const COW: usize = 5;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn label(b: BBox, cls: usize) -> PseudoLabel {
        PseudoLabel { bbox: b, cls, score: 0.9 }
    }

    #[test]
    fn temporal_class_flip_gives_pair() {
        let current = label(bx(0.0, 0.0, 10.0, 10.0), HORSE);
        let last = label(bx(0.0, 0.0, 10.0, 8.0), COW);
        assert!((iou(&current.bbox, &last.bbox) - 0.8).abs() < 1e-12);
        let (pc, matched) = temporal_pc(&current, &[last], 0.5, BG);
        assert_eq!(pc.members(), &[HORSE, COW]);
        assert_eq!(matched, Some(last.bbox));
    }

    #[test]
    fn temporal_agreement_and_background() {
        let current = label(bx(0.0, 0.0, 10.0, 10.0), HORSE);
        let near = label(bx(0.5, 0.0, 10.0, 10.0), HORSE);
        let (pc, _) = temporal_pc(&current, &[near], 0.5, BG);
        assert_eq!(pc, PcSet::single(HORSE));
        assert!(!pc.is_confusing());

        let far = label(bx(50.0, 50.0, 60.0, 60.0), HORSE);
        let (pc, matched) = temporal_pc(&current, &[far], 0.5, BG);
        assert_eq!(pc.members(), &[HORSE, BG]);
        assert_eq!(matched, None);
    }

    struct Fixed(usize);
    impl RegionClassifier for Fixed {
        fn classify_region(&mut self, _: &BBox) -> Result<usize> {
            Ok(self.0)
        }
    }

    #[test]
    fn cross_model_cases() {
        let b = label(bx(0.0, 0.0, 5.0, 5.0), 3);
        assert_eq!(cross_model_pc(&b, &mut Fixed(3)).unwrap(), PcSet::single(3));
        let (dog, bear) = (1, 7);
        let b = label(bx(0.0, 0.0, 5.0, 5.0), dog);
        assert_eq!(cross_model_pc(&b, &mut Fixed(bear)).unwrap().members(), &[dog, bear]);
        assert_eq!(cross_model_pc(&b, &mut Fixed(BG)).unwrap().members(), &[dog, BG]);
    }

    #[test]
    fn quality_flag_battery() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(quality_flags(&b, Some(&b), 0.05).unwrap(), QualityFlags::BOTH);
        let f = quality_flags(&b, Some(&bx(0.3, 0.0, 10.2, 10.0)), 0.05).unwrap();
        assert_eq!(f, QualityFlags::BOTH);
        let f = quality_flags(&b, Some(&bx(0.8, 0.0, 10.0, 10.0)), 0.05).unwrap();
        assert_eq!(f, QualityFlags { horizontal: false, vertical: true });
        let f = quality_flags(&b, Some(&bx(0.0, 0.0, 10.0, 9.0)), 0.05).unwrap();
        assert_eq!(f, QualityFlags { horizontal: true, vertical: false });
        assert_eq!(quality_flags(&b, None, 0.05).unwrap(), QualityFlags::default());
        // negative shifts are judged by magnitude
        let f = quality_flags(&b, Some(&bx(-3.0, 0.0, 10.0, 10.0)), 0.05).unwrap();
        assert!(!f.horizontal);
        assert!(quality_flags(&b, Some(&b), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn pc_pair_members_distinct(a in 0usize..11, b in 0usize..11) {
            let pc = PcSet::pair(a, b);
            prop_assert_eq!(pc.primary(), a);
            prop_assert!(pc.contains(a));
            if pc.len() == 2 {
                prop_assert_ne!(pc.members()[0], pc.members()[1]);
            }
            prop_assert_eq!(pc.is_confusing(), a != b);
        }
    }
}
