//! Axis-aligned box geometry in continuous pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle stored as top-left / bottom-right corners.
///
/// Coordinates are continuous; there is no `+1` pixel convention, so a box
/// with `x1 == x2` has zero width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, checking that coordinates are finite and ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite box coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Data(format!(
                "inverted box corners ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Converts a COCO `[x, y, width, height]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !w.is_finite() || !h.is_finite() || w < 0.0 || h < 0.0 {
            return Err(Error::Data(format!("invalid box size {w} x {h}")));
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub(crate) fn from_corners_unchecked(c: [f64; 4]) -> Self {
        Self {
            x1: c[0],
            y1: c[1],
            x2: c[2],
            y2: c[3],
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }
}

/// Area of a box; zero for lines and points.
pub fn area(b: &BBox) -> f64 {
    (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0)
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union. Two zero-area boxes have IoU 0, not NaN.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts covered cells of a fine grid.
    fn raster_iou(a: &BBox, c: &BBox, step: f64) -> f64 {
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1 && x < bx.x2 && y >= bx.y1 && y < bx.y2;
        let (lo_x, hi_x) = (a.x1.min(c.x1), a.x2.max(c.x2));
        let (lo_y, hi_y) = (a.y1.min(c.y1), a.y2.max(c.y2));
        let nx = ((hi_x - lo_x) / step).round() as usize;
        let ny = ((hi_y - lo_y) / step).round() as usize;
        let (mut inter, mut uni) = (0u64, 0u64);
        for i in 0..nx {
            let x = lo_x + (i as f64 + 0.5) * step;
            for j in 0..ny {
                let y = lo_y + (j as f64 + 0.5) * step;
                let (ia, ic) = (inside(a, x, y), inside(c, x, y));
                inter += (ia && ic) as u64;
                uni += (ia || ic) as u64;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn areas() {
        assert_eq!(area(&b(0.0, 0.0, 2.0, 2.0)), 4.0);
        assert_eq!(area(&b(1.0, 1.0, 1.0, 5.0)), 0.0);
        assert_eq!(area(&b(0.0, 0.0, 3.0, 7.0)), 21.0);
    }

    #[test]
    fn iou_examples() {
        let unit = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        let shifted = b(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&unit, &shifted) - 1.0 / 7.0).abs() < 1e-15);
        assert!((raster_iou(&unit, &shifted, 0.001) - 1.0 / 7.0).abs() < 1e-3);
    }

    #[test]
    fn degenerate_pair_is_zero() {
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        let line = b(0.0, 0.0, 0.0, 4.0);
        assert_eq!(iou(&line, &b(0.0, 0.0, 0.0, 4.0)), 0.0);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
        assert!(BBox::from_xywh(0.0, 0.0, -1.0, 1.0).is_err());
        assert_eq!(
            BBox::from_xywh(10.0, 20.0, 30.0, 40.0).unwrap(),
            b(10.0, 20.0, 40.0, 60.0)
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (
            -100.0..100.0f64,
            -100.0..100.0f64,
            0.0..50.0f64,
            0.0..50.0f64,
        )
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let u = iou(&a, &c);
            prop_assert_eq!(u, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&u));
        }

        #[test]
        fn self_iou_is_one(a in arb_box()) {
            prop_assume!(a.area() > 1e-9);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_similarity_invariant(
            a in arb_box(), c in arb_box(),
            dx in -50.0..50.0f64, dy in -50.0..50.0f64, s in 0.1..10.0f64,
        ) {
            let base = iou(&a, &c);
            let moved = iou(&a.translate(dx, dy).scale(s), &c.translate(dx, dy).scale(s));
            prop_assert!((base - moved).abs() <= 1e-12 * base.max(1.0) + 1e-12);
        }

        #[test]
        fn area_translation_invariant(a in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let moved = a.translate(dx, dy).area();
            prop_assert!(moved >= 0.0);
            prop_assert!((moved - a.area()).abs() <= 1e-9 * a.area().max(1.0));
        }
    }
}
