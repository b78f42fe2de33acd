//! Procedural scene generation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_bbox, Bitmask, Instance, SceneImage, SceneRecord, ShapesError};

/// Attempt budget for placing all instances of one scene.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Star,
    Annulus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star, ShapeKind::Annulus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Annulus => "annulus",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fill {
    Solid,
    Striped,
}

impl Fill {
    pub fn name(self) -> &'static str {
        match self {
            Fill::Solid => "solid",
            Fill::Striped => "striped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Category {
    pub shape: ShapeKind,
    pub fill: Fill,
}

impl Category {
    pub fn name(&self) -> String {
        format!("{}-{}", self.fill.name(), self.shape.name())
    }

    /// Inverse of [`Category::name`].
    pub fn parse(name: &str) -> Option<Category> {
        let (fill, shape) = name.split_once('-')?;
        let fill = [Fill::Solid, Fill::Striped].into_iter().find(|f| f.name() == fill)?;
        let shape = ShapeKind::ALL.into_iter().find(|s| s.name() == shape)?;
        Some(Category { shape, fill })
    }
}

/// The default ten categories. Fills alternate with the id while shapes
/// cycle every five, so id `k` and `k + 5` share a shape and differ only in
/// fill, and the first five ids cover every shape with both fills present.
pub fn default_vocabulary() -> Vec<Category> {
    (0..10)
        .map(|i| Category {
            shape: ShapeKind::ALL[i % 5],
            fill: if i % 2 == 0 { Fill::Solid } else { Fill::Striped },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub vocabulary: Vec<Category>,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Object diameter as a fraction of the shorter canvas side.
    pub min_size: f64,
    pub max_size: f64,
    /// Cap on `|a ∩ b| / min(|a|, |b|)` for any pair of analytic shapes.
    pub max_overlap: f64,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 128,
            width: 128,
            vocabulary: default_vocabulary(),
            min_instances: 1,
            max_instances: 4,
            min_size: 0.15,
            max_size: 0.45,
            max_overlap: 0.2,
            noise: 0.05,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ShapesError> {
        let bad = |m: &str| Err(ShapesError::InvalidConfig(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty");
        }
        if self.vocabulary.is_empty() {
            return bad("vocabulary must be non-empty");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("instance range must satisfy 1 <= min <= max");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad("size range must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return bad("max overlap must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise amplitude must be finite and >= 0");
        }
        Ok(())
    }

    /// Stable textual form used for hashing and manifests.
    pub fn canonical(&self) -> String {
        let vocab: Vec<String> = self.vocabulary.iter().map(Category::name).collect();
        format!(
            "canvas={}x{};vocab={};instances={}..{};size={}..{};overlap={};noise={}",
            self.height,
            self.width,
            vocab.join(","),
            self.min_instances,
            self.max_instances,
            self.min_size,
            self.max_size,
            self.max_overlap,
            self.noise
        )
    }
}

/// Analytic description of one placed object.
#[derive(Clone, Copy, Debug)]
struct Placement {
    category: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    color: [f64; 3],
    stripe_angle: f64,
    stripe_half_period: f64,
}

fn star_vertices(p: &Placement) -> Vec<(f64, f64)> {
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { p.radius } else { 0.45 * p.radius };
            let a = p.angle + k as f64 * PI / 5.0;
            (p.cx + r * a.cos(), p.cy + r * a.sin())
        })
        .collect()
}

fn regular_vertices(p: &Placement, sides: usize) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|k| {
            let a = p.angle + k as f64 * 2.0 * PI / sides as f64;
            (p.cx + p.radius * a.cos(), p.cy + p.radius * a.sin())
        })
        .collect()
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterizes a shape by testing every pixel center `(col + ½, row + ½)`.
fn rasterize(kind: ShapeKind, p: &Placement, height: usize, width: usize) -> Bitmask {
    let poly = match kind {
        ShapeKind::Square => Some(regular_vertices(p, 4)),
        ShapeKind::Triangle => Some(regular_vertices(p, 3)),
        ShapeKind::Star => Some(star_vertices(p)),
        ShapeKind::Disk | ShapeKind::Annulus => None,
    };
    let r2 = p.radius * p.radius;
    let inner2 = 0.25 * r2;
    let mut mask = Bitmask::new(height, width);
    let r0 = (p.cy - p.radius - 1.0).floor().max(0.0) as usize;
    let r1 = ((p.cy + p.radius + 1.0).ceil() as usize).min(height);
    let c0 = (p.cx - p.radius - 1.0).floor().max(0.0) as usize;
    let c1 = ((p.cx + p.radius + 1.0).ceil() as usize).min(width);
    for row in r0..r1 {
        for col in c0..c1 {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let d2 = (x - p.cx).powi(2) + (y - p.cy).powi(2);
            let hit = match kind {
                ShapeKind::Disk => d2 <= r2,
                ShapeKind::Annulus => d2 <= r2 && d2 >= inner2,
                _ => inside_polygon(poly.as_deref().expect("polygon"), x, y),
            };
            if hit {
                mask.set(row, col, true);
            }
        }
    }
    mask
}

/// Disk mask of `radius` pixels centered at `(cx, cy)`, for tests and tooling.
pub fn rasterize_disk(height: usize, width: usize, cx: f64, cy: f64, radius: f64) -> Bitmask {
    let p = Placement {
        category: 0,
        cx,
        cy,
        radius,
        angle: 0.0,
        color: [1.0; 3],
        stripe_angle: 0.0,
        stripe_half_period: 1.0,
    };
    rasterize(ShapeKind::Disk, &p, height, width)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

/// Deterministically generates one labeled scene from `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GenConfig) -> Result<SceneRecord, ShapesError> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bg_a = random_color(&mut rng);
    let bg_b = random_color(&mut rng);
    let bg_angle = rng.random::<f64>() * 2.0 * PI;

    let count = rng.random_range(config.min_instances..=config.max_instances);
    let side = h.min(w) as f64;
    let mut placed: Vec<(Placement, Bitmask)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(ShapesError::Infeasible { attempts: MAX_ATTEMPTS });
        }
        let category = rng.random_range(0..config.vocabulary.len());
        let diameter = side * rng.random_range(config.min_size..=config.max_size);
        let radius = 0.5 * diameter;
        let cx = rng.random_range(radius..=(w as f64 - radius).max(radius));
        let cy = rng.random_range(radius..=(h as f64 - radius).max(radius));
        let p = Placement {
            category,
            cx,
            cy,
            radius,
            angle: rng.random::<f64>() * 2.0 * PI,
            color: random_color(&mut rng),
            stripe_angle: rng.random::<f64>() * PI,
            stripe_half_period: rng.random_range(2.0..=3.5),
        };
        let mask = rasterize(config.vocabulary[category].shape, &p, h, w);
        let area = mask.area();
        if area == 0 {
            continue;
        }
        let overlaps = placed.iter().any(|(_, other)| {
            let inter = mask.intersection_area(other) as f64;
            inter / area.min(other.area()) as f64 > config.max_overlap
        });
        if overlaps {
            continue;
        }
        // later objects occlude earlier ones; every visible region must survive
        let survives = placed.iter().all(|(_, other)| {
            let mut vis = other.clone();
            vis.subtract(&mask);
            !vis.is_empty()
        });
        if !survives {
            continue;
        }
        placed.push((p, mask));
    }

    let mut pixels = vec![0.0f64; h * w * 3];
    let (ca, sa) = (bg_angle.cos(), bg_angle.sin());
    let diag = ((h * h + w * w) as f64).sqrt();
    for row in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64 + 0.5 - w as f64 / 2.0, row as f64 + 0.5 - h as f64 / 2.0);
            let t = ((x * ca + y * sa) / diag + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                pixels[(row * w + col) * 3 + ch] = bg_a[ch] + (bg_b[ch] - bg_a[ch]) * t;
            }
        }
    }
    for (p, mask) in &placed {
        let fill = config.vocabulary[p.category].fill;
        let alt = p.color.map(|c| 1.0 - c);
        let (sc, ss) = (p.stripe_angle.cos(), p.stripe_angle.sin());
        for row in 0..h {
            for col in 0..w {
                if !mask.get(row, col) {
                    continue;
                }
                let color = match fill {
                    Fill::Solid => p.color,
                    Fill::Striped => {
                        let u = (col as f64 + 0.5 - p.cx) * sc + (row as f64 + 0.5 - p.cy) * ss;
                        if (u / p.stripe_half_period).floor().rem_euclid(2.0) == 0.0 {
                            p.color
                        } else {
                            alt
                        }
                    }
                };
                pixels[(row * w + col) * 3..(row * w + col) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
    let data = pixels
        .iter()
        .map(|&v| {
            let n = if config.noise > 0.0 { rng.random_range(-config.noise..=config.noise) } else { 0.0 };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    let image = SceneImage::from_raw(h, w, data)?;

    let mut instances = Vec::with_capacity(placed.len());
    for i in 0..placed.len() {
        let mut visible = placed[i].1.clone();
        for (_, later) in &placed[i + 1..] {
            visible.subtract(later);
        }
        let bbox = derive_bbox(&visible)?;
        instances.push(Instance { category: placed[i].0.category, mask: visible, bbox });
    }
    Ok(SceneRecord { image, instances })
}
