//! Synthetic labeled scenes, class splits and the on-disk dataset format.

mod gen;
pub mod io;
mod mask;
mod split;

pub use gen::{default_vocabulary, generate_scene, rasterize_disk, Category, Fill, GenConfig, ShapeKind, MAX_ATTEMPTS};
pub use mask::{derive_bbox, Bitmask, PixelBox};
pub use split::{split_classes, SplitConfig, SplitMode};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapesError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("could not place instances within {attempts} attempts")]
    Infeasible { attempts: usize },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("invalid split: {0}")]
    Split(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit RGB image; channel values map to reals in `[0, 1]` as `v / 255`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SceneImage {
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ShapesError> {
        if data.len() != height * width * 3 {
            return Err(ShapesError::Format(format!(
                "{height}×{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(SceneImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved `H×W×3` bytes.
    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn value(&self, row: usize, col: usize, channel: usize) -> f32 {
        f32::from(self.data[(row * self.width + col) * 3 + channel]) / 255.0
    }

    /// Planar `3×H×W` reals in `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                out[ch * plane + i] = f32::from(px[ch]) / 255.0;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instance {
    /// Vocabulary index.
    pub category: usize,
    pub mask: Bitmask,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneRecord {
    pub image: SceneImage,
    pub instances: Vec<Instance>,
}

/// Random-access collection of scenes.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;

    fn scene(&self, index: usize) -> Result<SceneRecord, ShapesError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSource for [SceneRecord] {
    fn len(&self) -> usize {
        <[SceneRecord]>::len(self)
    }

    fn scene(&self, index: usize) -> Result<SceneRecord, ShapesError> {
        self.get(index)
            .cloned()
            .ok_or_else(|| ShapesError::Format(format!("scene {index} out of range")))
    }
}

impl SceneSource for Vec<SceneRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn scene(&self, index: usize) -> Result<SceneRecord, ShapesError> {
        self.as_slice().scene(index)
    }
}

/// Scenes generated on demand: scene `i` is `generate_scene(scene_seed(base, i))`.
#[derive(Clone, Debug)]
pub struct ProceduralScenes {
    pub config: GenConfig,
    pub base_seed: u64,
    pub count: usize,
}

impl ProceduralScenes {
    pub fn new(config: GenConfig, base_seed: u64, count: usize) -> Result<Self, ShapesError> {
        config.validate()?;
        Ok(ProceduralScenes { config, base_seed, count })
    }

    pub fn materialize(&self) -> Result<Vec<SceneRecord>, ShapesError> {
        (0..self.count).map(|i| self.scene(i)).collect()
    }
}

impl SceneSource for ProceduralScenes {
    fn len(&self) -> usize {
        self.count
    }

    fn scene(&self, index: usize) -> Result<SceneRecord, ShapesError> {
        if index >= self.count {
            return Err(ShapesError::Format(format!("scene {index} out of range")));
        }
        generate_scene(scene_seed(self.base_seed, index as u64), &self.config)
    }
}

/// SplitMix64 finalizer over `(base, index)`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_frequencies_near_uniform() {
        let src = ProceduralScenes::new(GenConfig::default(), 7, 1000).unwrap();
        let mut counts = [0usize; 10];
        for i in 0..src.len() {
            for inst in src.scene(i).unwrap().instances {
                counts[inst.category] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expect = total as f64 / 10.0;
        for (c, &n) in counts.iter().enumerate() {
            assert!((n as f64 - expect).abs() / expect <= 0.2, "class {c}: {n} vs {expect}");
        }
    }

    #[test]
    fn planar_layout() {
        let img = SceneImage::from_raw(1, 2, vec![255, 0, 51, 0, 255, 102]).unwrap();
        assert_eq!(img.to_planar(), vec![1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
    }
}
