//! Conversions between full-resolution masks and fixed-size RoI grids.

use crate::grad::kernels::{bilinear_tap, bin_taps, Tap};
use crate::grad::sigmoid;
use crate::shapes::Bitmask;

use super::{BoxF, NetError};

fn lerp2(grid: &[f32], stride: usize, ty: Tap<f64>, tx: Tap<f64>) -> f64 {
    let g = |r: usize, c: usize| f64::from(grid[r * stride + c]);
    let top = g(ty.lo, tx.lo) + (g(ty.lo, tx.hi) - g(ty.lo, tx.lo)) * tx.t;
    let bot = g(ty.hi, tx.lo) + (g(ty.hi, tx.hi) - g(ty.hi, tx.lo)) * tx.t;
    top + (bot - top) * ty.t
}

/// Pixel index range `[start, end)` whose centers fall inside `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, extent: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(extent);
    (start.min(end), end)
}

/// Per-pixel foreground probability of an `m×m` logit grid resized onto
/// `bx` within a `height × width` canvas. Pixels outside the box are 0.
pub fn paste_probabilities(
    logits: &[f32],
    m: usize,
    bx: &BoxF,
    height: usize,
    width: usize,
) -> Result<Vec<f32>, NetError> {
    if logits.len() != m * m || m == 0 {
        return Err(NetError::Shape(format!("expected {m}×{m} logits, got {}", logits.len())));
    }
    let bx = bx.clip(width, height);
    let (c0, c1) = pixel_span(bx.x0, bx.x1, width);
    let (r0, r1) = pixel_span(bx.y0, bx.y1, height);
    if c0 >= c1 || r0 >= r1 {
        return Err(NetError::DegenerateBox(format!("{bx:?} covers no pixel centers")));
    }
    let probs: Vec<f32> = logits.iter().map(|&v| sigmoid(v)).collect();
    let (bw, bh) = (bx.width(), bx.height());
    let col_taps: Vec<Tap<f64>> = (c0..c1)
        .map(|c| bilinear_tap((c as f64 + 0.5 - bx.x0) / bw * m as f64, m))
        .collect();
    let mut out = vec![0.0f32; height * width];
    for r in r0..r1 {
        let ty = bilinear_tap((r as f64 + 0.5 - bx.y0) / bh * m as f64, m);
        for (c, &tx) in (c0..c1).zip(&col_taps) {
            out[r * width + c] = lerp2(&probs, m, ty, tx) as f32;
        }
    }
    Ok(out)
}

/// Sigmoid, resize to the box, threshold (`p >= threshold`) and place.
pub fn paste_mask(
    logits: &[f32],
    m: usize,
    bx: &BoxF,
    height: usize,
    width: usize,
    threshold: f32,
) -> Result<Bitmask, NetError> {
    let probs = paste_probabilities(logits, m, bx, height, width)?;
    let bits = probs.iter().map(|&p| p > 0.0 && p >= threshold).collect();
    Bitmask::from_bits(height, width, bits).map_err(|e| NetError::Shape(e.to_string()))
}

/// Crops `mask` to `roi`, resamples it bilinearly onto an `m×m` grid at bin
/// centers and binarizes at 0.5.
pub fn mask_target(mask: &Bitmask, roi: &BoxF, m: usize) -> Vec<f32> {
    let (h, w) = (mask.height(), mask.width());
    let grid: Vec<f32> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let roi = roi.clip(w, h);
    let rows: Vec<Tap<f64>> = bin_taps(roi.y0, roi.y1, m, h);
    let cols: Vec<Tap<f64>> = bin_taps(roi.x0, roi.x1, m, w);
    let mut out = Vec::with_capacity(m * m);
    for &ty in &rows {
        for &tx in &cols {
            out.push(if lerp2(&grid, w, ty, tx) >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_logits_fill_exactly_the_box() {
        let bx = BoxF::new(3.0, 2.0, 9.0, 7.0);
        let full = paste_mask(&[10.0; 16], 4, &bx, 12, 12, 0.5).unwrap();
        let expect = Bitmask::from_fn(12, 12, |r, c| (2..7).contains(&r) && (3..9).contains(&c));
        assert_eq!(full, expect);
        let empty = paste_mask(&[-10.0; 16], 4, &bx, 12, 12, 0.5).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn two_by_two_upsampled_matches_bilinear_oracle() {
        // box of 4×4 pixels at the origin; pixel centers map to grid coords
        // u = (c + 0.5)/4·2 − 0.5 ∈ {−0.25, 0.25, 0.75, 1.25} → clamped to [0, 1]
        let logits = [-1.0f32, 0.5, 2.0, -0.3];
        let p: Vec<f64> = logits.iter().map(|&v| 1.0 / (1.0 + (-(v as f64)).exp())).collect();
        let bx = BoxF::new(0.0, 0.0, 4.0, 4.0);
        let got = paste_probabilities(&logits, 2, &bx, 4, 4).unwrap();
        let coords = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                let (v, u) = (coords[r], coords[c]);
                let top = p[0] * (1.0 - u) + p[1] * u;
                let bot = p[2] * (1.0 - u) + p[3] * u;
                let want = top * (1.0 - v) + bot * v;
                assert!((got[r * 4 + c] as f64 - want).abs() < 1e-6, "({r},{c})");
            }
        }
    }

    #[test]
    fn nothing_outside_box() {
        let bx = BoxF::new(5.5, 1.2, 9.7, 6.1);
        let logits: Vec<f32> = (0..49).map(|i| (i as f32 * 0.7).sin() * 5.0).collect();
        let m = paste_mask(&logits, 7, &bx, 16, 16, 0.5).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let inside = (c as f64 + 0.5) >= bx.x0
                    && (c as f64 + 0.5) < bx.x1
                    && (r as f64 + 0.5) >= bx.y0
                    && (r as f64 + 0.5) < bx.y1;
                if !inside {
                    assert!(!m.get(r, c));
                }
            }
        }
    }

    #[test]
    fn degenerate_box_errors() {
        let bx = BoxF::new(3.2, 3.0, 3.4, 8.0);
        assert!(matches!(paste_mask(&[0.0; 4], 2, &bx, 10, 10, 0.5), Err(NetError::DegenerateBox(_))));
    }

    #[test]
    fn target_of_full_box_is_all_ones() {
        let mask = Bitmask::from_fn(20, 20, |r, c| (4..12).contains(&r) && (6..16).contains(&c));
        let t = mask_target(&mask, &BoxF::new(6.0, 4.0, 16.0, 12.0), 5);
        assert!(t.iter().all(|&v| v == 1.0));
        let t = mask_target(&mask, &BoxF::new(0.0, 0.0, 20.0, 20.0), 4);
        assert_eq!(t.iter().filter(|&&v| v == 1.0).count(), 2);
    }
}
