use std::fmt;

/// Axis-aligned pixel box, half-open: a pixel `(px, py)` is inside when
/// `x0 <= px < x1` and `y0 <= py < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BBox {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        (self.x1 as i64 - self.x0 as i64).max(0)
    }

    pub fn height(&self) -> i64 {
        (self.y1 as i64 - self.y0 as i64).max(0)
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection(&self, other: &BBox) -> BBox {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x1 <= x0 || y1 <= y0 {
            BBox::new(x0, y0, x0, y0)
        } else {
            BBox::new(x0, y0, x1, y1)
        }
    }

    pub fn overlap_area(&self, other: &BBox) -> i64 {
        self.intersection(other).area()
    }

    pub fn contains(&self, px: i32, py: i32) -> bool {
        self.x0 <= px && px < self.x1 && self.y0 <= py && py < self.y1
    }

    pub fn clip(&self, width: i32, height: i32) -> BBox {
        BBox::new(
            self.x0.clamp(0, width),
            self.y0.clamp(0, height),
            self.x1.clamp(0, width),
            self.y1.clamp(0, height),
        )
    }

    /// Grows the box by `margin` pixels on every side.
    pub fn expand(&self, margin: i32) -> BBox {
        BBox::new(
            self.x0 - margin,
            self.y0 - margin,
            self.x1 + margin,
            self.y1 + margin,
        )
    }

    pub fn center(&self) -> (i32, i32) {
        ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}
