use serde::{Deserialize, Serialize};

/// Axis-aligned box in scene coordinates, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor; `None` if the corners are not ordered or finite.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.is_valid().then_some(b)
    }

    pub fn from_array(a: [f64; 4]) -> Option<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
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

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clamps to `[0,width]×[0,height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Regression target `(dx, dy, dw, dh)` taking `proposal` onto `self`.
    pub fn deltas_from(&self, proposal: &BBox) -> [f64; 4] {
        let (px, py) = proposal.center();
        let (gx, gy) = self.center();
        [
            (gx - px) / proposal.width(),
            (gy - py) / proposal.height(),
            (self.width() / proposal.width()).ln(),
            (self.height() / proposal.height()).ln(),
        ]
    }

    /// Inverse of [`BBox::deltas_from`].
    pub fn apply_deltas(&self, d: [f64; 4]) -> BBox {
        let (px, py) = self.center();
        let cx = px + d[0] * self.width();
        let cy = py + d[1] * self.height();
        let w = self.width() * d[2].exp();
        let h = self.height() * d[3].exp();
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }
}
