use crate::shapes::PixelBox;

use super::NetError;

/// Largest log-scale change accepted when decoding width/height deltas.
pub const DELTA_SCALE_CLIP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Continuous box in pixel-edge coordinates: pixel `(row, col)` covers
/// `[col, col + 1) × [row, row + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxF { x0, y0, x1, y1 }
    }

    pub fn from_pixels(b: PixelBox) -> Self {
        BoxF { x0: b.x0 as f64, y0: b.y0 as f64, x1: (b.x1 + 1) as f64, y1: (b.y1 + 1) as f64 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clip(&self, width: usize, height: usize) -> BoxF {
        let (w, h) = (width as f64, height as f64);
        BoxF {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Grows each side below `min_side` symmetrically, then shifts the box
    /// back inside the canvas.
    pub fn with_min_side(&self, min_side: f64, width: usize, height: usize) -> BoxF {
        fn fix(lo: f64, hi: f64, min: f64, extent: f64) -> (f64, f64) {
            let min = min.min(extent);
            let (mut lo, mut hi) = (lo, hi);
            if hi - lo < min {
                let c = 0.5 * (lo + hi);
                lo = c - 0.5 * min;
                hi = c + 0.5 * min;
            }
            if lo < 0.0 {
                hi -= lo;
                lo = 0.0;
            }
            if hi > extent {
                lo -= hi - extent;
                hi = extent;
            }
            (lo.max(0.0), hi)
        }
        let (x0, x1) = fix(self.x0, self.x1, min_side, width as f64);
        let (y0, y1) = fix(self.y0, self.y1, min_side, height as f64);
        BoxF { x0, y0, x1, y1 }
    }
}

/// Regression target `(dx, dy, dw, dh)` taking `reference` to `target`.
pub fn encode_box(reference: &BoxF, target: &BoxF) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (tx - rx) / rw,
        (ty - ry) / rh,
        (target.width() / rw).ln(),
        (target.height() / rh).ln(),
    ]
}

/// Applies `deltas` to `reference` (`center + delta·size`, `size·exp(d)`),
/// then clips to the `width × height` canvas.
pub fn decode_box(reference: &BoxF, deltas: [f64; 4], width: usize, height: usize) -> Result<BoxF, NetError> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(NetError::NonFinite("box deltas"));
    }
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rx + deltas[0] * rw;
    let cy = ry + deltas[1] * rh;
    let w = rw * deltas[2].min(DELTA_SCALE_CLIP).exp();
    let h = rh * deltas[3].min(DELTA_SCALE_CLIP).exp();
    Ok(BoxF::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h).clip(width, height))
}
