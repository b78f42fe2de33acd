//! Backbone, box head and mask head operating on ground-truth RoIs.
//!
//! Parameters live in a [`ParamStore`] keyed by name. A forward pass binds
//! them onto a tape (as trainable leaves or as constants) and then calls the
//! head functions, so the same code serves training in `f32` and gradient
//! checks in `f64`.

mod boxes;
mod paste;

pub use boxes::{decode_box, encode_box, BoxF, DELTA_SCALE_CLIP};
pub use paste::{mask_target, paste_mask, paste_probabilities};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::grad::{CropWindow, GradError, Real, Tape, Tensor, Var};
use crate::shapes::{scene_seed, Bitmask, SceneImage};
use crate::transfer::{build_class_embedding, init_transfer, transfer_forward, TransferSpec};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("parameter {0:?} not found")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("embedding file: {0}")]
    Embedding(String),
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Tensor<f32>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(k, v)| other.params.get(k).is_some_and(|o| o.bit_eq(v)))
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    /// Records every stored tensor; names for which `trainable` holds become
    /// gradient-tracking leaves, the rest constants.
    pub fn bind<F: Real>(
        tape: &mut Tape<F>,
        store: &ParamStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self, NetError> {
        let mut vars = IndexMap::with_capacity(store.len());
        for (name, t) in store.iter() {
            let v = if trainable(name) { tape.param(t.cast())? } else { tape.constant(t.cast())? };
            vars.insert(name.to_string(), v);
        }
        Ok(Bindings { vars })
    }

    pub fn get(&self, name: &str) -> Result<Var, NetError> {
        self.vars.get(name).copied().ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// `N(0, scale² · 2 / fan_in)` tensor whose stream depends on `(seed, name)`.
pub fn he_normal(shape: &[usize], fan_in: usize, seed: u64, name: &str, scale: f64) -> Tensor<f32> {
    let std = scale * (2.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, name_hash(name)));
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (z * std) as f32
    })
}

/// Scale applied to regression targets before the smooth-L1 loss.
pub const BOX_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub num_classes: usize,
    pub stages: Vec<BackboneStage>,
    /// Box-head trunk width `D`.
    pub box_dim: usize,
    pub box_crop: usize,
    /// Mask resolution `M`; also the mask-head crop size.
    pub mask_size: usize,
    /// Mask trunk channels `E`.
    pub mask_dim: usize,
    pub mask_convs: usize,
    pub mlp_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let stage = |channels, stride| BackboneStage { channels, kernel: 3, stride };
        NetConfig {
            num_classes: 10,
            stages: vec![stage(16, 2), stage(32, 1), stage(64, 2), stage(64, 1)],
            box_dim: 128,
            box_crop: 7,
            mask_size: 14,
            mask_dim: 32,
            mask_convs: 2,
            mlp_hidden: 128,
        }
    }
}

impl NetConfig {
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.channels)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.num_classes == 0 || self.stages.is_empty() {
            return bad("need at least one class and one backbone stage".into());
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0 || s.kernel % 2 == 0) {
            return bad("backbone stages need positive channels/stride and odd kernels".into());
        }
        let s = self.total_stride();
        if height % s != 0 || width % s != 0 {
            return bad(format!("total stride {s} does not divide canvas {height}×{width}"));
        }
        if [self.box_dim, self.box_crop, self.mask_size, self.mask_dim, self.mlp_hidden].contains(&0) {
            return bad("head dimensions must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// `w_seg` learned directly for every class.
    Oracle,
    /// One shared `w_seg` row used for all classes.
    ClassAgnostic,
    /// `w_seg` predicted from detection weights.
    Transfer,
}

impl HeadMode {
    pub fn label(self) -> &'static str {
        match self {
            HeadMode::Oracle => "oracle",
            HeadMode::ClassAgnostic => "class-agnostic",
            HeadMode::Transfer => "transfer",
        }
    }
}

pub const W_CLS: &str = "box.cls";
pub const W_BOX: &str = "box.reg";
pub const W_SEG: &str = "mask.seg";

pub fn is_detection_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("box.")
}

/// Architecture plus mask-head variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub net: NetConfig,
    pub head: HeadMode,
    pub mlp: bool,
    pub transfer: TransferSpec,
}

impl ModelSpec {
    pub fn new(net: NetConfig, head: HeadMode, mlp: bool, transfer: TransferSpec) -> Self {
        ModelSpec { net, head, mlp, transfer }
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore, NetError> {
        let n = &self.net;
        let (c, d, e, m) = (n.num_classes, n.box_dim, n.mask_dim, n.mask_size);
        let mut store = ParamStore::default();
        let conv = |store: &mut ParamStore, prefix: &str, o: usize, i: usize, k: usize| {
            let wn = format!("{prefix}.weight");
            store.insert(&wn, he_normal(&[o, i, k, k], i * k * k, seed, &wn, 1.0));
            store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[o]));
        };
        let mut cin = 3;
        for (i, st) in n.stages.iter().enumerate() {
            conv(&mut store, &format!("backbone.conv{i}"), st.channels, cin, st.kernel);
            cin = st.channels;
        }
        let cf = cin;
        let fc_in = cf * n.box_crop * n.box_crop;
        store.insert("box.fc.weight", he_normal(&[d, fc_in], fc_in, seed, "box.fc.weight", 1.0));
        store.insert("box.fc.bias", Tensor::zeros(&[d]));
        store.insert(W_CLS, small_with_bias_col(c + 1, d + 1, 0.01, seed, W_CLS));
        store.insert(W_BOX, small_with_bias_col(4 * c, d + 1, 0.001, seed, W_BOX));

        let mut min = cf;
        for i in 0..n.mask_convs {
            conv(&mut store, &format!("mask.conv{i}"), e, min, 3);
            min = e;
        }
        let trunk_out = if n.mask_convs == 0 { cf } else { e };
        if trunk_out != e {
            return Err(NetError::Config("mask trunk must end in E channels".into()));
        }
        match self.head {
            HeadMode::Oracle => store.insert(W_SEG, seg_init(c, e, seed)),
            HeadMode::ClassAgnostic => store.insert(W_SEG, seg_init(1, e, seed)),
            HeadMode::Transfer => {
                self.transfer.validate()?;
                let din = self.transfer.source.width(d);
                init_transfer(&self.transfer, din, e + 1, seed, &mut store);
            }
        }
        if self.mlp {
            let h = n.mlp_hidden;
            store.insert("mask.mlp.fc1.weight", he_normal(&[h, fc_in], fc_in, seed, "mask.mlp.fc1.weight", 1.0));
            store.insert("mask.mlp.fc1.bias", Tensor::zeros(&[h]));
            store.insert("mask.mlp.fc2.weight", he_normal(&[m * m, h], h, seed, "mask.mlp.fc2.weight", 0.1));
            store.insert("mask.mlp.fc2.bias", Tensor::zeros(&[m * m]));
        }
        Ok(store)
    }

    /// Feature map `[N, C_f, H/s, W/s]` of a planar image batch `[N, 3, H, W]`.
    pub fn backbone<F: Real>(&self, tape: &mut Tape<F>, p: &Bindings, images: Var) -> Result<Var, NetError> {
        let mut x = images;
        for (i, st) in self.net.stages.iter().enumerate() {
            let w = p.get(&format!("backbone.conv{i}.weight"))?;
            let b = p.get(&format!("backbone.conv{i}.bias"))?;
            x = tape.conv2d(x, w, Some(b), st.stride, st.kernel / 2)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    fn crop<F: Real>(&self, tape: &mut Tape<F>, feats: Var, rois: &[CropWindow], size: usize) -> Result<Var, NetError> {
        Ok(tape.bilinear_crop(feats, rois.to_vec(), size, 1.0 / self.net.total_stride() as f64)?)
    }

    /// Class logits `[R, C+1]` and box deltas `[R, 4C]`.
    pub fn box_head<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Bindings,
        feats: Var,
        rois: &[CropWindow],
    ) -> Result<(Var, Var), NetError> {
        let x = self.crop(tape, feats, rois, self.net.box_crop)?;
        let x = tape.flatten(x)?;
        let x = tape.linear(x, p.get("box.fc.weight")?, Some(p.get("box.fc.bias")?))?;
        let x = tape.relu(x)?;
        let x = append_ones(tape, x)?;
        let logits = tape.linear(x, p.get(W_CLS)?, None)?;
        let deltas = tape.linear(x, p.get(W_BOX)?, None)?;
        Ok((logits, deltas))
    }

    /// Per-class mask-output weights `[K, E+1]` for the configured head mode.
    pub fn mask_weights<F: Real>(&self, tape: &mut Tape<F>, p: &Bindings) -> Result<Var, NetError> {
        let k = self.net.num_classes;
        match self.head {
            HeadMode::Oracle => p.get(W_SEG),
            HeadMode::ClassAgnostic => Ok(tape.tile(p.get(W_SEG)?, 0, k)?),
            HeadMode::Transfer => {
                let emb = build_class_embedding(tape, p.get(W_CLS)?, p.get(W_BOX)?, &self.transfer.source, k)?;
                transfer_forward(tape, emb, p, &self.transfer)
            }
        }
    }

    /// Mask logits `[R, K, M, M]` for RoIs given `w_seg[K, E+1]`.
    pub fn mask_head<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Bindings,
        feats: Var,
        rois: &[CropWindow],
        w_seg: Var,
    ) -> Result<MaskLogits, NetError> {
        let (k, e, m) = (self.net.num_classes, self.net.mask_dim, self.net.mask_size);
        let ws = tape.value(w_seg).shape().to_vec();
        if ws != [k, e + 1] {
            return Err(NetError::Shape(format!("w_seg is {ws:?}, expected [{k}, {}]", e + 1)));
        }
        let mut x = self.crop(tape, feats, rois, m)?;
        for i in 0..self.net.mask_convs {
            let w = p.get(&format!("mask.conv{i}.weight"))?;
            let b = p.get(&format!("mask.conv{i}.bias"))?;
            x = tape.conv2d(x, w, Some(b), 1, 1)?;
            x = tape.relu(x)?;
        }
        let fcn = per_class_conv(tape, x, w_seg, k, e)?;
        if !self.mlp {
            return Ok(MaskLogits { fcn, mlp: None, fused: fcn });
        }
        let r = rois.len();
        let y = self.crop(tape, feats, rois, self.net.box_crop)?;
        let y = tape.flatten(y)?;
        let y = tape.linear(y, p.get("mask.mlp.fc1.weight")?, Some(p.get("mask.mlp.fc1.bias")?))?;
        let y = tape.relu(y)?;
        let y = tape.linear(y, p.get("mask.mlp.fc2.weight")?, Some(p.get("mask.mlp.fc2.bias")?))?;
        let mlp = tape.reshape(y, &[r, 1, m, m])?;
        let tiled = tape.tile(mlp, 1, k)?;
        let fused = tape.add(fcn, tiled)?;
        Ok(MaskLogits { fcn, mlp: Some(mlp), fused })
    }

    /// Detections for one image, one per RoI.
    ///
    /// The class is the arg-max over foreground logits, the box is the RoI
    /// refined by that class's deltas and the mask is that class's channel
    /// pasted into the refined box.
    pub fn predict(
        &self,
        store: &ParamStore,
        image: &SceneImage,
        image_id: usize,
        rois: &[BoxF],
        threshold: f32,
    ) -> Result<Vec<Detection>, NetError> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let (h, w) = (image.height(), image.width());
        let (k, m) = (self.net.num_classes, self.net.mask_size);
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, store, |_| false)?;
        let x = tape.constant(image_batch(std::slice::from_ref(image))?)?;
        let feats = self.backbone(&mut tape, &p, x)?;
        let windows: Vec<CropWindow> = rois.iter().map(|b| window(0, b)).collect();
        let (logits, deltas) = self.box_head(&mut tape, &p, feats, &windows)?;
        let (logits, deltas) = (tape.value(logits).clone(), tape.value(deltas).clone());

        let min_side = self.net.total_stride() as f64;
        let mut picks = Vec::with_capacity(rois.len());
        for (i, roi) in rois.iter().enumerate() {
            let row = &logits.data()[i * (k + 1)..(i + 1) * (k + 1)];
            let probs = softmax(row);
            let mut best = 1;
            for j in 2..=k {
                if probs[j] > probs[best] {
                    best = j;
                }
            }
            let cls = best - 1;
            let d = &deltas.data()[i * 4 * k + 4 * cls..i * 4 * k + 4 * cls + 4];
            let raw: [f64; 4] = std::array::from_fn(|j| f64::from(d[j]) / BOX_DELTA_WEIGHTS[j]);
            let bx = decode_box(roi, raw, w, h)?.with_min_side(min_side, w, h);
            picks.push((cls, probs[best], bx));
        }
        let refined: Vec<CropWindow> = picks.iter().map(|(_, _, b)| window(0, b)).collect();
        let w_seg = self.mask_weights(&mut tape, &p)?;
        let masks = self.mask_head(&mut tape, &p, feats, &refined, w_seg)?;
        let masks = tape.value(masks.fused);
        picks
            .into_iter()
            .enumerate()
            .map(|(i, (category, score, bx))| {
                let off = (i * k + category) * m * m;
                let mask = paste_mask(&masks.data()[off..off + m * m], m, &bx, h, w, threshold)?;
                Ok(Detection { image_id, bbox: bx, category, score, mask })
            })
            .collect()
    }
}

/// Planar `[N, 3, H, W]` batch with pixel values mapped from `[0, 1]` to
/// `[-2, 2]`.
pub fn image_batch(images: &[SceneImage]) -> Result<Tensor<f32>, NetError> {
    let (h, w) = images.first().map(|i| (i.height(), i.width())).ok_or_else(|| NetError::Shape("empty image batch".into()))?;
    let mut planar = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(NetError::Shape("images in a batch must share a size".into()));
        }
        planar.extend(img.to_planar().into_iter().map(|v| (v - 0.5) * 4.0));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], planar)?)
}

fn small_with_bias_col(rows: usize, cols: usize, std: f64, seed: u64, name: &str) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, name_hash(name)));
    Tensor::from_fn(&[rows, cols], |i| {
        if i % cols == cols - 1 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        }
    })
}

fn seg_init(rows: usize, e: usize, seed: u64) -> Tensor<f32> {
    let w = he_normal(&[rows, e], e, seed, W_SEG, 1.0);
    let mut data = Vec::with_capacity(rows * (e + 1));
    for row in w.data().chunks_exact(e) {
        data.extend_from_slice(row);
        data.push(0.0);
    }
    Tensor::new(&[rows, e + 1], data).expect("consistent shape")
}

fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// `[R, D] → [R, D+1]` with a trailing column of ones.
fn append_ones<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var, NetError> {
    let r = tape.value(x).shape()[0];
    let ones = tape.constant(Tensor::full(&[r, 1], F::one()))?;
    Ok(tape.concat(&[x, ones], 1)?)
}

/// 1×1 convolution whose per-class filters and biases are the rows of `w_seg`.
fn per_class_conv<F: Real>(tape: &mut Tape<F>, x: Var, w_seg: Var, k: usize, e: usize) -> Result<Var, NetError> {
    let wt = tape.slice(w_seg, 1, 0, e)?;
    let wt = tape.reshape(wt, &[k, e, 1, 1])?;
    let b = tape.slice(w_seg, 1, e, 1)?;
    let b = tape.reshape(b, &[k])?;
    Ok(tape.conv2d(x, wt, Some(b), 1, 0)?)
}

pub fn window(batch: usize, b: &BoxF) -> CropWindow {
    CropWindow { batch, x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskLogits {
    pub fcn: Var,
    pub mlp: Option<Var>,
    pub fused: Var,
}

/// One predicted instance. `category` is a vocabulary id `0..C`; the
/// classifier's row for it is `category + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BoxF,
    pub category: usize,
    pub score: f32,
    pub mask: Bitmask,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_check;

    fn small_net() -> NetConfig {
        NetConfig {
            num_classes: 3,
            stages: vec![BackboneStage { channels: 4, kernel: 3, stride: 2 }, BackboneStage { channels: 5, kernel: 3, stride: 2 }],
            box_dim: 6,
            box_crop: 3,
            mask_size: 4,
            mask_dim: 3,
            mask_convs: 1,
            mlp_hidden: 5,
        }
    }

    fn spec(head: HeadMode, mlp: bool) -> ModelSpec {
        ModelSpec::new(small_net(), head, mlp, TransferSpec::default())
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
    }

    #[test]
    fn default_backbone_shape() {
        let s = ModelSpec::new(NetConfig::default(), HeadMode::Oracle, false, TransferSpec::default());
        let store = s.init(0).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, &store, |_| false).unwrap();
        let x = tape.constant(image(128, 128, 1)).unwrap();
        let f = s.backbone(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 64, 32, 32]);
        let again = s.backbone(&mut tape, &p, x).unwrap();
        assert!(tape.value(f).bit_eq(tape.value(again)));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let s = spec(HeadMode::Oracle, false);
        let store = s.init(3).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, &store, |_| false).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let f = s.backbone(&mut tape, &p, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_must_divide_canvas() {
        assert!(NetConfig::default().validate(128, 128).is_ok());
        assert!(NetConfig::default().validate(130, 128).is_err());
    }

    #[test]
    fn box_head_shapes_and_zero_cls() {
        let s = ModelSpec::new(NetConfig::default(), HeadMode::Oracle, false, TransferSpec::default());
        let mut store = s.init(0).unwrap();
        store.get_mut(W_CLS).unwrap().data_mut().fill(0.0);
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, &store, |_| false).unwrap();
        let x = tape.constant(image(64, 64, 2)).unwrap();
        let f = s.backbone(&mut tape, &p, x).unwrap();
        let rois = [window(0, &BoxF::new(4.0, 4.0, 40.0, 30.0))];
        let (l, d) = s.box_head(&mut tape, &p, f, &rois).unwrap();
        assert_eq!(tape.value(l).shape(), &[1, 11]);
        assert_eq!(tape.value(d).shape(), &[1, 40]);
        let probs = softmax(tape.value(l).data());
        assert!(probs.iter().all(|&q| (q - 1.0 / 11.0).abs() < 1e-7));
    }

    #[test]
    fn cls_loss_gradient_wrt_w_cls() {
        let s = spec(HeadMode::Oracle, false);
        let store = s.init(5).unwrap();
        let img = image(16, 16, 9).cast::<f64>();
        let point = store.get(W_CLS).unwrap().cast::<f64>();
        let f = |tape: &mut Tape<f64>, w: Var| {
            let mut p = Bindings::bind(tape, &store, |_| false).map_err(|_| GradError::Consumed)?;
            p.vars.insert(W_CLS.into(), w);
            let x = tape.constant(img.clone())?;
            let go = |tape: &mut Tape<f64>| -> Result<Var, NetError> {
                let feats = s.backbone(tape, &p, x)?;
                let rois = [window(0, &BoxF::new(1.0, 2.0, 12.0, 14.0)), window(0, &BoxF::new(5.0, 0.0, 16.0, 9.0))];
                let (l, _) = s.box_head(tape, &p, feats, &rois)?;
                Ok(crate::grad::softmax_ce(tape, l, vec![2, 0])?.var)
            };
            go(tape).map_err(|e| match e {
                NetError::Grad(g) => g,
                other => GradError::Invalid { op: "test", detail: other.to_string() },
            })
        };
        let rep = finite_diff_check(f, &point, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    fn run_mask(s: &ModelSpec, store: &ParamStore, seed: u64) -> (Tensor<f32>, Option<Tensor<f32>>, Tensor<f32>) {
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, store, |_| false).unwrap();
        let x = tape.constant(image(16, 16, seed)).unwrap();
        let f = s.backbone(&mut tape, &p, x).unwrap();
        let rois = [window(0, &BoxF::new(0.0, 0.0, 16.0, 16.0)), window(0, &BoxF::new(3.0, 5.0, 11.0, 15.0))];
        let w = s.mask_weights(&mut tape, &p).unwrap();
        let out = s.mask_head(&mut tape, &p, f, &rois, w).unwrap();
        (
            tape.value(out.fcn).clone(),
            out.mlp.map(|v| tape.value(v).clone()),
            tape.value(out.fused).clone(),
        )
    }

    #[test]
    fn zero_seg_weights_give_zero_logits() {
        let s = spec(HeadMode::Oracle, false);
        let mut store = s.init(1).unwrap();
        store.get_mut(W_SEG).unwrap().data_mut().fill(0.0);
        let (_, _, fused) = run_mask(&s, &store, 4);
        assert_eq!(fused.shape(), &[2, 3, 4, 4]);
        assert!(fused.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_adds_mlp_map_to_every_channel() {
        let s = spec(HeadMode::Transfer, true);
        let store = s.init(2).unwrap();
        let (fcn, mlp, fused) = run_mask(&s, &store, 7);
        let mlp = mlp.unwrap();
        let mm = 16;
        for r in 0..2 {
            for c in 0..3 {
                for i in 0..mm {
                    let idx = (r * 3 + c) * mm + i;
                    let diff = fused.data()[idx] - fcn.data()[idx];
                    let want = mlp.data()[r * mm + i];
                    // a + b − a is not b in floating point; compare the sum
                    assert_eq!(fused.data()[idx], fcn.data()[idx] + want, "{diff} vs {want}");
                }
            }
        }
    }

    #[test]
    fn class_agnostic_channels_identical() {
        let s = spec(HeadMode::ClassAgnostic, true);
        let store = s.init(3).unwrap();
        let (_, _, fused) = run_mask(&s, &store, 8);
        let mm = 16;
        for r in 0..2 {
            let first = &fused.data()[r * 3 * mm..r * 3 * mm + mm];
            for c in 1..3 {
                assert_eq!(first, &fused.data()[(r * 3 + c) * mm..(r * 3 + c + 1) * mm]);
            }
        }
    }

    #[test]
    fn w_seg_row_count_checked() {
        let s = spec(HeadMode::Oracle, false);
        let store = s.init(1).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, &store, |_| false).unwrap();
        let x = tape.constant(image(16, 16, 1)).unwrap();
        let f = s.backbone(&mut tape, &p, x).unwrap();
        let bad = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let rois = [window(0, &BoxF::new(0.0, 0.0, 8.0, 8.0))];
        assert!(matches!(s.mask_head(&mut tape, &p, f, &rois, bad), Err(NetError::Shape(_))));
    }

    #[test]
    fn predict_masks_stay_in_boxes() {
        let s = spec(HeadMode::Transfer, true);
        let store = s.init(4).unwrap();
        let raw: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect();
        let img = SceneImage::from_raw(16, 16, raw).unwrap();
        let rois = [BoxF::new(1.0, 1.0, 9.0, 10.0), BoxF::new(6.0, 4.0, 16.0, 16.0)];
        let dets = s.predict(&store, &img, 3, &rois, 0.5).unwrap();
        assert_eq!(dets.len(), 2);
        for d in &dets {
            assert_eq!(d.image_id, 3);
            assert!(d.category < 3 && (0.0..=1.0).contains(&d.score));
            assert!(d.bbox.width() >= 4.0 && d.bbox.height() >= 4.0);
            for r in 0..16 {
                for c in 0..16 {
                    if d.mask.get(r, c) {
                        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                        assert!(x >= d.bbox.x0 && x < d.bbox.x1 && y >= d.bbox.y0 && y < d.bbox.y1);
                    }
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let s = spec(HeadMode::Transfer, true);
        assert!(s.init(1).unwrap().bit_eq(&s.init(1).unwrap()));
        assert!(!s.init(1).unwrap().bit_eq(&s.init(2).unwrap()));
    }
}
