//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest          magic line, version, config hash, canvas, image count, per-file sha256
//! <dir>/images/<id>.png   8-bit RGB
//! <dir>/annotations.rle   one instance per line:
//!                         <image id> <category> <x0> <y0> <x1> <y1> <rle counts...>
//! ```
//!
//! RLE counts are alternating 0/1 run lengths over the row-major mask,
//! starting with a 0-run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{derive_bbox, Bitmask, Instance, PixelBox, SceneImage, SceneRecord, ShapesError};

pub const MAGIC: &str = "MASKX-DATASET";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest";
pub const ANNOTATIONS: &str = "annotations.rle";

/// Parsed manifest contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub height: usize,
    pub width: usize,
    pub images: usize,
    /// Relative path → hex sha256.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    /// Digest over all file checksums; identifies the dataset contents.
    pub fn dataset_hash(&self) -> String {
        let mut h = Sha256::new();
        for (path, sum) in &self.checksums {
            h.update(path.as_bytes());
            h.update(b" ");
            h.update(sum.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    fn render(&self) -> String {
        let mut out = format!(
            "{MAGIC}\nversion {}\nconfig_hash {}\ncanvas {} {}\nimages {}\n",
            self.version, self.config_hash, self.height, self.width, self.images
        );
        for (path, sum) in &self.checksums {
            out.push_str(&format!("file {sum} {path}\n"));
        }
        out
    }

    fn parse(text: &str) -> Result<Self, ShapesError> {
        let fmt = |m: String| ShapesError::Format(m);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt("manifest magic string missing".into()));
        }
        let mut version = None;
        let mut config_hash = None;
        let mut canvas = None;
        let mut images = None;
        let mut checksums = BTreeMap::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["version", v] => {
                    let found = v.parse::<u32>().ok().filter(|&n| n == VERSION);
                    version = Some(found.ok_or_else(|| ShapesError::Version { found: v.to_string(), expected: VERSION })?);
                }
                ["config_hash", h] => config_hash = Some(h.to_string()),
                ["canvas", h, w] => {
                    let p = |s: &str| s.parse::<usize>().map_err(|_| fmt(format!("bad canvas size {s:?}")));
                    canvas = Some((p(h)?, p(w)?));
                }
                ["images", n] => images = Some(n.parse::<usize>().map_err(|_| fmt(format!("bad image count {n:?}")))?),
                ["file", sum, path] => {
                    checksums.insert(path.to_string(), sum.to_string());
                }
                [] => {}
                _ => return Err(fmt(format!("unrecognized manifest line {line:?}"))),
            }
        }
        let (height, width) = canvas.ok_or_else(|| fmt("manifest lacks canvas".into()))?;
        Ok(Manifest {
            version: version.ok_or_else(|| fmt("manifest lacks version".into()))?,
            config_hash: config_hash.ok_or_else(|| fmt("manifest lacks config_hash".into()))?,
            height,
            width,
            images: images.ok_or_else(|| fmt("manifest lacks image count".into()))?,
            checksums,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_path(id: usize) -> String {
    format!("images/{id}.png")
}

fn encode_png(image: &SceneImage) -> Result<Vec<u8>, ShapesError> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.raw().to_vec())
        .ok_or_else(|| ShapesError::Codec("image buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| ShapesError::Codec(e.to_string()))?;
    Ok(out.into_inner())
}

fn decode_png(bytes: &[u8]) -> Result<SceneImage, ShapesError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ShapesError::Codec(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    SceneImage::from_raw(h as usize, w as usize, img.into_raw())
}

fn render_annotations(records: &[SceneRecord]) -> String {
    let mut out = String::new();
    for (id, rec) in records.iter().enumerate() {
        for inst in &rec.instances {
            let b = inst.bbox;
            out.push_str(&format!("{id} {} {} {} {} {}", inst.category, b.x0, b.y0, b.x1, b.y1));
            for c in inst.mask.to_rle() {
                out.push_str(&format!(" {c}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `records` under `dir`, returning the manifest.
pub fn write_dataset(dir: &Path, records: &[SceneRecord], config_hash: &str) -> Result<Manifest, ShapesError> {
    let (height, width) = match records.first() {
        Some(r) => (r.image.height(), r.image.width()),
        None => return Err(ShapesError::Format("cannot write an empty dataset".into())),
    };
    fs::create_dir_all(dir.join("images"))?;
    let mut checksums = BTreeMap::new();
    for (id, rec) in records.iter().enumerate() {
        if rec.image.height() != height || rec.image.width() != width {
            return Err(ShapesError::Format(format!("scene {id} has a different canvas size")));
        }
        for inst in &rec.instances {
            if derive_bbox(&inst.mask)? != inst.bbox {
                return Err(ShapesError::Format(format!("scene {id}: stored box is not tight")));
            }
        }
        let png = encode_png(&rec.image)?;
        checksums.insert(image_path(id), sha256_hex(&png));
        fs::write(dir.join(image_path(id)), png)?;
    }
    let ann = render_annotations(records);
    checksums.insert(ANNOTATIONS.to_string(), sha256_hex(ann.as_bytes()));
    fs::write(dir.join(ANNOTATIONS), ann)?;
    let manifest = Manifest {
        version: VERSION,
        config_hash: config_hash.to_string(),
        height,
        width,
        images: records.len(),
        checksums,
    };
    fs::write(dir.join(MANIFEST), manifest.render())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ShapesError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Manifest::parse(&text)
}

/// Reads a dataset written by [`write_dataset`]. All files are verified
/// before any record is returned.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SceneRecord>), ShapesError> {
    let manifest = read_manifest(dir)?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut expected: Vec<String> = (0..manifest.images).map(image_path).collect();
    expected.push(ANNOTATIONS.to_string());
    for rel in expected {
        let sum = manifest
            .checksums
            .get(&rel)
            .ok_or_else(|| ShapesError::Format(format!("manifest has no checksum for {rel}")))?;
        let path: PathBuf = dir.join(&rel);
        let bytes = fs::read(&path)?;
        if &sha256_hex(&bytes) != sum {
            return Err(ShapesError::Checksum(rel));
        }
        blobs.insert(rel, bytes);
    }

    let mut records = Vec::with_capacity(manifest.images);
    for id in 0..manifest.images {
        let image = decode_png(&blobs[&image_path(id)])?;
        if image.height() != manifest.height || image.width() != manifest.width {
            return Err(ShapesError::Format(format!("image {id} does not match manifest canvas")));
        }
        records.push(SceneRecord { image, instances: Vec::new() });
    }
    let ann = std::str::from_utf8(&blobs[ANNOTATIONS]).map_err(|e| ShapesError::Format(e.to_string()))?;
    for (lineno, line) in ann.lines().enumerate() {
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| ShapesError::Format(format!("annotation line {}: {e}", lineno + 1)))?;
        if nums.len() < 7 {
            return Err(ShapesError::Format(format!("annotation line {} is truncated", lineno + 1)));
        }
        let id = nums[0];
        let rec = records
            .get_mut(id)
            .ok_or_else(|| ShapesError::Format(format!("annotation for unknown image {id}")))?;
        let mask = Bitmask::from_rle(manifest.height, manifest.width, &nums[6..])?;
        let bbox = PixelBox { x0: nums[2], y0: nums[3], x1: nums[4], y1: nums[5] };
        if derive_bbox(&mask)? != bbox {
            return Err(ShapesError::Format(format!("annotation line {}: box is not tight", lineno + 1)));
        }
        rec.instances.push(Instance { category: nums[1], mask, bbox });
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{GenConfig, ProceduralScenes};

    fn scenes(n: usize) -> Vec<SceneRecord> {
        let cfg = GenConfig { height: 48, width: 64, ..GenConfig::default() };
        ProceduralScenes::new(cfg, 3, n).unwrap().materialize().unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let recs = scenes(10);
        let m = write_dataset(dir.path(), &recs, "abc").unwrap();
        let (m2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, recs);
        let n: usize = recs.iter().map(|r| r.instances.len()).sum();
        assert_eq!(back.iter().map(|r| r.instances.len()).sum::<usize>(), n);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes(2), "abc").unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replacen(MAGIC, "NOT-A-DATASET", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(ShapesError::Format(_))));
    }

    #[test]
    fn version_and_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes(2), "abc").unwrap();
        let ann = dir.path().join(ANNOTATIONS);
        let mut text = fs::read_to_string(&ann).unwrap();
        text.push('\n');
        fs::write(&ann, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(ShapesError::Checksum(_))));

        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replacen("version 1", "version 9", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(ShapesError::Version { .. })));
    }

    #[test]
    fn missing_image_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes(2), "abc").unwrap();
        fs::remove_file(dir.path().join("images/1.png")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(ShapesError::Io(_))));
    }
}
