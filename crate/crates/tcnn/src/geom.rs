//! Axis-aligned boxes and overlap computations shared across the pipeline.

/// A 2D box given by its top-left and bottom-right corners. `x` runs along
/// the width axis, `y` along the height axis; a cell `(x, y)` of a feature
/// map occupies the unit square `[x, x+1) x [y, y+1)`, so a full `h x w`
/// map is the box `(0, 0, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Box2D { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2D {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2 && self.x1.is_finite() && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
    }

    /// Clamps the box to the extent `[0, w] x [0, h]`.
    pub fn clamped(&self, w: f64, h: f64) -> Box2D {
        Box2D {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Rescales coordinates by independent x / y factors.
    pub fn scaled(&self, sx: f64, sy: f64) -> Box2D {
        Box2D {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }
}

/// Intersection over union of two boxes; 0 when either has zero area.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    inter / (area_a + area_b - inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes_iou_one() {
        let b = Box2D::new(1.0, 2.0, 4.0, 6.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_iou_zero() {
        let a = Box2D::new(0.0, 0.0, 1.0, 1.0);
        let b = Box2D::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn hand_computed_overlap() {
        // intersection 1x2, union 4 + 4 - 2 = 6
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let b = Box2D::new(1.0, 0.0, 3.0, 2.0);
        let v = iou(&a, &b);
        assert!((v - 2.0 / 6.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn degenerate_box_iou_zero() {
        let a = Box2D::new(1.0, 1.0, 1.0, 3.0);
        let b = Box2D::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&b, &a), 0.0);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0f64..10.0, ay in 0.0f64..10.0, aw in 0.0f64..10.0, ah in 0.0f64..10.0,
            bx in 0.0f64..10.0, by in 0.0f64..10.0, bw in 0.0f64..10.0, bh in 0.0f64..10.0,
        ) {
            let a = Box2D::new(ax, ay, ax + aw, ay + ah);
            let b = Box2D::new(bx, by, bx + bw, by + bh);
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_one_only_for_identical(
            ax in 0.0f64..10.0, ay in 0.0f64..10.0,
            aw in 0.1f64..10.0, ah in 0.1f64..10.0,
            dx in 0.05f64..3.0,
        ) {
            let a = Box2D::new(ax, ay, ax + aw, ay + ah);
            let b = Box2D::new(ax + dx, ay, ax + aw + dx, ay + ah);
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert!(iou(&a, &b) < 1.0);
        }
    }
}
