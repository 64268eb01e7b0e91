//! Box-delta encoding, Smooth-L1 and the quality-gated regression loss.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pcdisc::QualityFlags;
use crate::pseudo::BBox;

/// Regression targets relative to a proposal: centre offsets normalised by
/// the proposal size and log size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDeltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn encode_deltas(proposal: &BBox, target: &BBox) -> BoxDeltas {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BoxDeltas {
        tx: (tcx - pcx) / pw,
        ty: (tcy - pcy) / ph,
        tw: (target.width() / pw).ln(),
        th: (target.height() / ph).ln(),
    }
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(deltas: &BoxDeltas, proposal: &BBox) -> Result<BBox> {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + deltas.tx * pw;
    let cy = pcy + deltas.ty * ph;
    let w = pw * deltas.tw.exp();
    let h = ph * deltas.th.exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// `0.5 x^2 / beta` inside `|x| < beta`, `|x| - 0.5 beta` outside.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// `q_hor (L^x + L^w) + q_ver (L^y + L^h)` with Smooth-L1 terms. Gated-off
/// components are skipped, so their value and gradient are exactly zero.
pub fn reg_star_loss(pred: &BoxDeltas, target: &BoxDeltas, flags: QualityFlags, beta: f64) -> (f64, BoxDeltas) {
    let mut value = 0.0;
    let mut grad = BoxDeltas::default();
    if flags.horizontal {
        let (dx, dw) = (pred.tx - target.tx, pred.tw - target.tw);
        value += smooth_l1(dx, beta) + smooth_l1(dw, beta);
        grad.tx = smooth_l1_grad(dx, beta);
        grad.tw = smooth_l1_grad(dw, beta);
    }
    if flags.vertical {
        let (dy, dh) = (pred.ty - target.ty, pred.th - target.th);
        value += smooth_l1(dy, beta) + smooth_l1(dh, beta);
        grad.ty = smooth_l1_grad(dy, beta);
        grad.th = smooth_l1_grad(dh, beta);
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    const HOR: QualityFlags = QualityFlags { horizontal: true, vertical: false };
    const VER: QualityFlags = QualityFlags { horizontal: false, vertical: true };

    #[test]
    fn encode_examples() {
        let p = bx(10.0, 10.0, 30.0, 40.0);
        assert_eq!(encode_deltas(&p, &p), BoxDeltas::default());
        let t = bx(0.0, 10.0, 40.0, 40.0);
        let d = encode_deltas(&p, &t);
        assert_eq!(d.tx, 0.0);
        assert!((d.tw - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1(1.0, 1.0), 0.5);
        assert_eq!(smooth_l1(3.0, 1.0), 2.5);
        assert_eq!(smooth_l1(-3.0, 1.0), 2.5);
        for beta in [0.1, 1.0, 2.5] {
            let below = smooth_l1(beta * (1.0 - 1e-15), beta);
            assert!((below - smooth_l1(beta, beta)).abs() < 1e-12);
            assert!((smooth_l1_grad(beta * (1.0 - 1e-15), beta) - smooth_l1_grad(beta, beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn reg_star_examples() {
        let t = BoxDeltas { tx: 0.1, ty: -0.2, tw: 0.3, th: 0.05 };
        assert_eq!(reg_star_loss(&t, &t, QualityFlags::BOTH, 1.0).0, 0.0);

        let p = BoxDeltas { tx: 2.0, ty: 1.0, tw: -1.0, th: 0.5 };
        let (v, g) = reg_star_loss(&p, &t, QualityFlags::default(), 1.0);
        assert_eq!(v, 0.0);
        assert_eq!(g, BoxDeltas::default());

        // flags (1, 0): y/h insensitive, x sensitive
        let (v0, _) = reg_star_loss(&p, &t, HOR, 1.0);
        let (v1, g1) = reg_star_loss(&BoxDeltas { ty: 9.0, th: -4.0, ..p }, &t, HOR, 1.0);
        assert_eq!(v0, v1);
        assert_eq!((g1.ty, g1.th), (0.0, 0.0));
        let (v2, _) = reg_star_loss(&BoxDeltas { tx: 0.5, ..p }, &t, HOR, 1.0);
        assert_ne!(v0, v2);
        let (v3, _) = reg_star_loss(&BoxDeltas { tw: 0.0, ..p }, &t, HOR, 1.0);
        assert_ne!(v0, v3);

        // flags (0, 1): the vertical pair carries the loss
        let (v0, _) = reg_star_loss(&p, &t, VER, 1.0);
        let (v1, g1) = reg_star_loss(&BoxDeltas { tx: -7.0, tw: 3.0, ..p }, &t, VER, 1.0);
        assert_eq!(v0, v1);
        assert_eq!((g1.tx, g1.tw), (0.0, 0.0));
        let (v2, _) = reg_star_loss(&BoxDeltas { th: 0.0, ..p }, &t, VER, 1.0);
        assert_ne!(v0, v2);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..90.0f64, 0.0..90.0f64, 1.0..40.0f64, 1.0..40.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(p in arb_box(), t in arb_box()) {
            let back = decode_deltas(&encode_deltas(&p, &t), &p).unwrap();
            for (a, b) in back.coords().iter().zip(t.coords()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn smooth_l1_midpoint_convex(a in -5.0..5.0f64, b in -5.0..5.0f64, beta in 0.05..3.0f64) {
            let mid = smooth_l1(0.5 * (a + b), beta);
            prop_assert!(mid <= 0.5 * (smooth_l1(a, beta) + smooth_l1(b, beta)) + 1e-12);
        }

        #[test]
        fn gated_components_are_exactly_zero(
            p in prop::array::uniform4(-3.0..3.0f64),
            t in prop::array::uniform4(-3.0..3.0f64),
            h in any::<bool>(), v in any::<bool>()
        ) {
            let flags = QualityFlags { horizontal: h, vertical: v };
            let (val, g) = reg_star_loss(&BoxDeltas::from_slice(&p), &BoxDeltas::from_slice(&t), flags, 1.0);
            let full = reg_star_loss(&BoxDeltas::from_slice(&p), &BoxDeltas::from_slice(&t), QualityFlags::BOTH, 1.0).0;
            prop_assert!(val <= full);
            if !h { prop_assert_eq!((g.tx.to_bits(), g.tw.to_bits()), (0, 0)); }
            if !v { prop_assert_eq!((g.ty.to_bits(), g.th.to_bits()), (0, 0)); }
        }
    }
}
