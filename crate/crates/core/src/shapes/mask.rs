use super::ShapesError;

/// Binary instance mask over an `height × width` canvas, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Inclusive pixel box; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

impl Bitmask {
    pub fn new(height: usize, width: usize) -> Self {
        Bitmask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ShapesError> {
        if bits.len() != height * width {
            return Err(ShapesError::Format(format!(
                "mask of {}×{} needs {} bits, got {}",
                height,
                width,
                height * width,
                bits.len()
            )));
        }
        Ok(Bitmask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Bitmask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection_area(&self, other: &Bitmask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    /// Clears every pixel set in `other`.
    pub fn subtract(&mut self, other: &Bitmask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
    }

    /// Run lengths of alternating 0/1 runs in row-major order, starting with a
    /// (possibly zero-length) 0-run.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[usize]) -> Result<Self, ShapesError> {
        let total: usize = counts.iter().sum();
        if total != height * width {
            return Err(ShapesError::Format(format!(
                "RLE covers {total} pixels, canvas has {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &n) in counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, n));
        }
        Ok(Bitmask { height, width, bits })
    }
}

/// Tight inclusive bounding box of the set pixels.
pub fn derive_bbox(mask: &Bitmask) -> Result<PixelBox, ShapesError> {
    let mut bx: Option<PixelBox> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if !mask.get(r, c) {
                continue;
            }
            bx = Some(match bx {
                None => PixelBox { x0: c, y0: r, x1: c, y1: r },
                Some(b) => PixelBox { x0: b.x0.min(c), y0: b.y0.min(r), x1: b.x1.max(c), y1: b.y1.max(r) },
            });
        }
    }
    bx.ok_or(ShapesError::EmptyMask)
}
