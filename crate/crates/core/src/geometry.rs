//! Axis-aligned box arithmetic: IoU, box/offset coordinate transforms,
//! clipping.
//!
//! Boxes use the continuous corner convention `(x1, y1, x2, y2)` with
//! `x2 > x1`, `y2 > y1` and `width = x2 - x1` (no "+1"). Centers and sizes
//! are derived on the fly so there is a single source of truth for the
//! geometry.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Axis-aligned rectangle in image coordinates (pixels, corner convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T = f64> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

/// Box regression parameters: center shift relative to the anchor size and
/// log size ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Offsets<T = f64> {
    pub tx: T,
    pub ty: T,
    pub tw: T,
    pub th: T,
}

impl<T: Real> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::c(0.5);
        BBox {
            x1: cx - w * half,
            y1: cy - h * half,
            x2: cx + w * half,
            y2: cy + h * half,
        }
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::c(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    /// True when the box has positive area and finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    /// Clamp coordinates to `[0, width] x [0, height]`. The result may be
    /// degenerate; callers must check the area before using it.
    pub fn clip(&self, width: T, height: T) -> Self {
        BBox {
            x1: clamp(self.x1, T::zero(), width),
            y1: clamp(self.y1, T::zero(), height),
            x2: clamp(self.x2, T::zero(), width),
            y2: clamp(self.y2, T::zero(), height),
        }
    }
}

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn check_valid<T: Real>(b: &BBox<T>, what: &str) -> Result<()> {
    if b.is_valid() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} box must have positive area: ({}, {}, {}, {})",
            b.x1, b.y1, b.x2, b.y2
        )))
    }
}

/// Intersection-over-union of two positive-area boxes. Symmetric, in [0, 1],
/// 0 for disjoint boxes.
pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    check_valid(a, "iou")?;
    check_valid(b, "iou")?;
    Ok(iou_unchecked(a, b))
}

/// IoU without the validity check; used on hot paths after inputs were
/// validated once.
pub(crate) fn iou_unchecked<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    if ix2 <= ix1 || iy2 <= iy1 {
        return T::zero();
    }
    let inter = (ix2 - ix1) * (iy2 - iy1);
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Offsets that map `anchor` onto `target`:
/// `tx = (cx_t - cx_a) / w_a`, `tw = ln(w_t / w_a)` (likewise for y/h).
pub fn encode<T: Real>(anchor: &BBox<T>, target: &BBox<T>) -> Result<Offsets<T>> {
    check_valid(anchor, "encode anchor")?;
    check_valid(target, "encode target")?;
    let (cxa, cya) = anchor.center();
    let (cxt, cyt) = target.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    Ok(Offsets {
        tx: (cxt - cxa) / wa,
        ty: (cyt - cya) / ha,
        tw: (target.width() / wa).ln(),
        th: (target.height() / ha).ln(),
    })
}

/// Exact inverse of [`encode`]: applies `offsets` to `anchor`. The output has
/// positive area by construction.
pub fn decode<T: Real>(anchor: &BBox<T>, offsets: &Offsets<T>) -> Result<BBox<T>> {
    check_valid(anchor, "decode anchor")?;
    if !(offsets.tx.is_finite()
        && offsets.ty.is_finite()
        && offsets.tw.is_finite()
        && offsets.th.is_finite())
    {
        return Err(Error::invalid("decode offsets must be finite"));
    }
    Ok(decode_raw(anchor, offsets))
}

/// Size-ratio cap applied when decoding raw network outputs: `ln(1000/16)`,
/// the usual dense-detector guard against exp blow-up on wild offsets.
pub fn max_log_size_ratio<T: Real>() -> T {
    T::c((1000.0f64 / 16.0).ln())
}

/// [`decode`] with `tw`/`th` clamped to [`max_log_size_ratio`]. Used on model
/// outputs (anchor refinement, detection decoding); the unclamped [`decode`]
/// stays an exact inverse of [`encode`].
pub fn decode_clamped<T: Real>(anchor: &BBox<T>, offsets: &Offsets<T>) -> Result<BBox<T>> {
    let cap = max_log_size_ratio::<T>();
    decode(
        anchor,
        &Offsets {
            tx: offsets.tx,
            ty: offsets.ty,
            tw: offsets.tw.min(cap),
            th: offsets.th.min(cap),
        },
    )
}

fn decode_raw<T: Real>(anchor: &BBox<T>, offsets: &Offsets<T>) -> BBox<T> {
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = cxa + offsets.tx * wa;
    let cy = cya + offsets.ty * ha;
    let w = wa * offsets.tw.exp();
    let h = ha * offsets.th.exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = b(5.0, 5.0, 6.0, 6.0);
        let d = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&d, &c).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_case() {
        // intersection 1, union 4 + 4 - 1 = 7
        let a = b(0.0, 0.0, 2.0, 2.0);
        let c = b(1.0, 1.0, 3.0, 3.0);
        let v = iou(&a, &c).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(v, iou(&c, &a).unwrap());
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let bad = b(3.0, 3.0, 3.0, 5.0);
        assert!(iou(&a, &bad).is_err());
        assert!(iou(&bad, &a).is_err());
    }

    #[test]
    fn encode_hand_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let same = encode(&a, &a).unwrap();
        assert_eq!((same.tx, same.ty, same.tw, same.th), (0.0, 0.0, 0.0, 0.0));

        let shifted = encode(&a, &b(5.0, 0.0, 15.0, 10.0)).unwrap();
        assert_eq!((shifted.tx, shifted.ty), (0.5, 0.0));
        assert_eq!((shifted.tw, shifted.th), (0.0, 0.0));

        let grown = encode(&a, &b(0.0, 0.0, 20.0, 20.0)).unwrap();
        assert_eq!((grown.tx, grown.ty), (0.5, 0.5));
        assert!((grown.tw - 2f64.ln()).abs() < 1e-15);
        assert!((grown.th - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn decode_hand_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let zero = Offsets {
            tx: 0.0,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
        };
        assert_eq!(decode(&a, &zero).unwrap(), a);

        let shifted = decode(
            &a,
            &Offsets {
                tx: 0.5,
                ty: 0.0,
                tw: 0.0,
                th: 0.0,
            },
        )
        .unwrap();
        assert_eq!(shifted, b(5.0, 0.0, 15.0, 10.0));

        assert!(decode(
            &a,
            &Offsets {
                tx: f64::NAN,
                ty: 0.0,
                tw: 0.0,
                th: 0.0
            }
        )
        .is_err());
    }

    fn random_box(rng: &mut Rng) -> BBox<f64> {
        let w = rng.uniform_in(1.0, 512.0);
        let h = rng.uniform_in(1.0, 512.0);
        let x1 = rng.uniform_in(-200.0, 800.0);
        let y1 = rng.uniform_in(-200.0, 800.0);
        b(x1, y1, x1 + w, y1 + h)
    }

    #[test]
    fn encode_decode_round_trip_random() {
        let mut rng = Rng::new(0x9e3779b9);
        let mut worst = 0.0f64;
        for _ in 0..20_000 {
            let anchor = random_box(&mut rng);
            let target = random_box(&mut rng);
            let off = encode(&anchor, &target).unwrap();
            let back = decode(&anchor, &off).unwrap();
            for (got, want) in [
                (back.x1, target.x1),
                (back.y1, target.y1),
                (back.x2, target.x2),
                (back.y2, target.y2),
            ] {
                worst = worst.max((got - want).abs());
            }
        }
        assert!(worst < 1e-9, "round-trip error {worst}");
    }

    #[test]
    fn encode_translation_invariant() {
        let mut rng = Rng::new(7);
        for _ in 0..1000 {
            let anchor = random_box(&mut rng);
            let target = random_box(&mut rng);
            let dx = rng.uniform_in(-50.0, 50.0);
            let dy = rng.uniform_in(-50.0, 50.0);
            let shift = |bx: &BBox<f64>| b(bx.x1 + dx, bx.y1 + dy, bx.x2 + dx, bx.y2 + dy);
            let o1 = encode(&anchor, &target).unwrap();
            let o2 = encode(&shift(&anchor), &shift(&target)).unwrap();
            assert!((o1.tx - o2.tx).abs() < 1e-9);
            assert!((o1.ty - o2.ty).abs() < 1e-9);
            assert!((o1.tw - o2.tw).abs() < 1e-12);
            assert!((o1.th - o2.th).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_cases() {
        assert_eq!(
            b(-5.0, -5.0, 5.0, 5.0).clip(64.0, 64.0),
            b(0.0, 0.0, 5.0, 5.0)
        );
        let inside = b(3.0, 4.0, 10.0, 12.0);
        assert_eq!(inside.clip(64.0, 64.0), inside);
        assert_eq!(
            b(60.0, 60.0, 80.0, 80.0).clip(64.0, 64.0),
            b(60.0, 60.0, 64.0, 64.0)
        );
    }

    #[test]
    fn decode_clamped_caps_size_ratio() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let wild = Offsets {
            tx: 0.0,
            ty: 0.0,
            tw: 30.0,
            th: 30.0,
        };
        let out = decode_clamped(&a, &wild).unwrap();
        assert!((out.width() - 10.0 * 1000.0 / 16.0).abs() < 1e-6);
        // Within the cap it matches the exact decode.
        let mild = Offsets {
            tx: 0.2,
            ty: -0.1,
            tw: 0.5,
            th: -0.5,
        };
        assert_eq!(decode_clamped(&a, &mild).unwrap(), decode(&a, &mild).unwrap());
    }

    #[test]
    fn works_at_f32() {
        let a = BBox::<f32>::new(0.0, 0.0, 2.0, 2.0);
        let c = BBox::<f32>::new(1.0, 1.0, 3.0, 3.0);
        let v = iou(&a, &c).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-6);
    }
}
