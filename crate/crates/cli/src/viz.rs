//! PNG overlays of predicted instances.

use std::io::Cursor;

use image::{Rgb, RgbImage};
use maskx::net::Detection;
use maskx::shapes::{SceneRecord, SplitConfig};

use crate::CliError;

pub const A_COLOR: [u8; 3] = [0, 200, 0];
pub const B_COLOR: [u8; 3] = [220, 0, 0];
const SCALE: u32 = 2;

fn blend(px: &mut Rgb<u8>, color: [u8; 3], alpha: f32) {
    for (c, t) in px.0.iter_mut().zip(color) {
        *c = (f32::from(*c) * (1.0 - alpha) + f32::from(t) * alpha).round() as u8;
    }
}

/// The scene upscaled 2×, each detection's mask tinted and its box outlined
/// in the color of its predicted class's set.
pub fn render(scene: &SceneRecord, dets: &[&Detection], split: &SplitConfig) -> RgbImage {
    let (h, w) = (scene.image.height(), scene.image.width());
    let raw = scene.image.raw();
    let mut img = RgbImage::from_fn(w as u32 * SCALE, h as u32 * SCALE, |x, y| {
        let o = 3 * ((y / SCALE) as usize * w + (x / SCALE) as usize);
        Rgb([raw[o], raw[o + 1], raw[o + 2]])
    });
    for d in dets {
        let color = if split.in_a(d.category) { A_COLOR } else { B_COLOR };
        for y in 0..h * SCALE as usize {
            for x in 0..w * SCALE as usize {
                let (r, c) = (y / SCALE as usize, x / SCALE as usize);
                if !d.mask.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w
                    || !d.mask.get(r - 1, c) || !d.mask.get(r + 1, c) || !d.mask.get(r, c - 1) || !d.mask.get(r, c + 1);
                blend(img.get_pixel_mut(x as u32, y as u32), color, if edge { 0.9 } else { 0.35 });
            }
        }
        let s = SCALE as f64;
        let clamp = |v: f64, hi: u32| (v * s).round().clamp(0.0, f64::from(hi - 1)) as u32;
        let (x0, x1) = (clamp(d.bbox.x0, img.width()), clamp(d.bbox.x1, img.width()));
        let (y0, y1) = (clamp(d.bbox.y0, img.height()), clamp(d.bbox.y1, img.height()));
        for x in x0..=x1 {
            img.put_pixel(x, y0, Rgb(color));
            img.put_pixel(x, y1, Rgb(color));
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, Rgb(color));
            img.put_pixel(x1, y, Rgb(color));
        }
    }
    img
}

pub fn overlay_png(scene: &SceneRecord, dets: &[&Detection], split: &SplitConfig) -> Result<Vec<u8>, CliError> {
    let mut out = Cursor::new(Vec::new());
    render(scene, dets, split)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CliError::Artifact(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskx::net::BoxF;
    use maskx::shapes::{split_classes, Bitmask, SceneImage, SplitMode};

    #[test]
    fn colors_follow_the_split() {
        let scene = SceneRecord { image: SceneImage::from_raw(8, 8, vec![0; 192]).unwrap(), instances: vec![] };
        let split = split_classes(4, SplitMode::Fixed { a_count: 2 }).unwrap();
        let det = |category, x0: usize| Detection {
            image_id: 0,
            bbox: BoxF::new(x0 as f64, 0.0, x0 as f64 + 3.0, 3.0),
            category,
            score: 1.0,
            mask: Bitmask::from_fn(8, 8, |r, c| r < 3 && c >= x0 && c < x0 + 3),
        };
        let (a, b) = (det(1, 0), det(3, 4));
        let img = render(&scene, &[&a, &b], &split);
        assert_eq!(img.dimensions(), (16, 16));
        assert_eq!(img.get_pixel(0, 0).0, A_COLOR);
        assert_eq!(img.get_pixel(8, 0).0, B_COLOR);
        let inner = img.get_pixel(2, 2).0;
        assert!(inner[1] > 0 && inner[0] == 0, "{inner:?}");
        assert_eq!(img.get_pixel(15, 15).0, [0, 0, 0]);
    }
}
