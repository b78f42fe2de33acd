//! Partially supervised training on ground-truth RoIs.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grad::{bce_with_logits, sgd_momentum_step, smooth_l1, softmax_ce, GradError, SgdConfig, Tape, Tensor, Var};
use crate::net::{
    encode_box, image_batch, is_detection_param, mask_target, window, BoxF, Bindings, HeadMode, ModelSpec, NetError, ParamStore,
    BOX_DELTA_WEIGHTS,
};
use crate::shapes::{scene_seed, SceneRecord, SceneSource, ShapesError, SplitConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] ShapesError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset and split disagree: {0}")]
    Vocabulary(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Detection first, then the mask head on frozen features and box head.
    Stagewise,
    /// All losses in one loop.
    EndToEnd,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Stagewise => "stagewise",
            TrainMode::EndToEnd => "e2e",
        }
    }
}

/// Per-component loss multipliers. A zero weight drops the component from
/// the graph entirely.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, bbox: 1.0, mask: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub mode: TrainMode,
    /// Steps per stage (stage-wise runs twice this many in total).
    pub steps: u64,
    pub lr: f64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub images_per_step: usize,
    /// Per-edge jitter of ground-truth RoIs as a fraction of box size.
    pub jitter: f64,
    /// Background RoIs overlap every ground-truth box below this IoU.
    pub bg_iou: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Supervise every A channel of an A-class RoI (non-target channels get
    /// all-zero targets) instead of only the ground-truth channel.
    pub mask_loss_all_a_channels: bool,
    pub sgd: SgdConfig,
}

impl TrainConfig {
    pub fn new(model: ModelSpec) -> Self {
        TrainConfig {
            model,
            mode: TrainMode::EndToEnd,
            steps: 1000,
            lr: 0.01,
            decay_steps: vec![600, 800],
            decay_factor: 0.1,
            images_per_step: 2,
            jitter: 0.1,
            bg_iou: 0.3,
            seed: 0,
            loss_weights: LossWeights::default(),
            mask_loss_all_a_channels: false,
            sgd: SgdConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 || self.images_per_step == 0 {
            return bad("steps and images per step must be positive".into());
        }
        if !self.decay_steps.windows(2).all(|w| w[0] < w[1]) || self.decay_steps.iter().any(|&s| s >= self.steps) {
            return bad(format!("decay steps {:?} must ascend and stay below {}", self.decay_steps, self.steps));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("lr must be finite and >= 0, decay factor in (0, 1]".into());
        }
        if !(0.0..0.5).contains(&self.jitter) || !(0.0..=1.0).contains(&self.bg_iou) {
            return bad("jitter must lie in [0, 0.5) and bg IoU in [0, 1]".into());
        }
        let w = self.loss_weights;
        if [w.cls, w.bbox, w.mask].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and >= 0".into());
        }
        if self.model.head == HeadMode::Transfer {
            self.model.transfer.validate()?;
        }
        Ok(())
    }

    /// Total optimizer steps across stages.
    pub fn total_steps(&self) -> u64 {
        match self.mode {
            TrainMode::Stagewise => 2 * self.steps,
            TrainMode::EndToEnd => self.steps,
        }
    }

    /// Learning rate at `step` within a stage.
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self.decay_steps.iter().filter(|&&d| step >= d).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// One line of the loss log. Empty components are logged as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub cls: f32,
    pub bbox: f32,
    pub mask: f32,
    pub mask_empty: bool,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,lr,cls_loss,box_loss,mask_loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.lr, r.cls, r.bbox, r.mask);
    }
    out
}

/// RoIs of one image with their supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub roi: BoxF,
    /// Vocabulary id, or `None` for background.
    pub class: Option<usize>,
    /// Index of the matched instance in the scene.
    pub instance: Option<usize>,
}

/// Each ground-truth box expanded or shrunk by up to `jitter` of its size on
/// every edge, then widened to at least `min_side`.
pub fn jitter_box(b: &BoxF, jitter: f64, min_side: f64, width: usize, height: usize, rng: &mut impl Rng) -> BoxF {
    let (bw, bh) = (b.width(), b.height());
    let mut j = |s: f64| if jitter > 0.0 { rng.random_range(-jitter..jitter) * s } else { 0.0 };
    BoxF::new(b.x0 + j(bw), b.y0 + j(bh), b.x1 + j(bw), b.y1 + j(bh))
        .clip(width, height)
        .with_min_side(min_side, width, height)
}

/// Jittered ground-truth RoIs followed by as many background boxes (IoU
/// with every ground-truth box below `bg_iou`) as can be found.
pub fn sample_rois(
    scene: &SceneRecord,
    jitter: f64,
    bg_iou: f64,
    min_side: f64,
    rng: &mut impl Rng,
) -> Vec<RoiSample> {
    let (h, w) = (scene.image.height(), scene.image.width());
    let gts: Vec<BoxF> = scene.instances.iter().map(|i| BoxF::from_pixels(i.bbox)).collect();
    let mut out: Vec<RoiSample> = gts
        .iter()
        .enumerate()
        .map(|(k, g)| RoiSample {
            roi: jitter_box(g, jitter, min_side, w, h, rng),
            class: Some(scene.instances[k].category),
            instance: Some(k),
        })
        .collect();
    let short = h.min(w) as f64;
    for _ in 0..gts.len() {
        for _attempt in 0..50 {
            let bw = rng.random_range(0.1..0.5) * short;
            let bh = rng.random_range(0.1..0.5) * short;
            let x0 = rng.random_range(0.0..(w as f64 - bw));
            let y0 = rng.random_range(0.0..(h as f64 - bh));
            let b = BoxF::new(x0, y0, x0 + bw, y0 + bh).with_min_side(min_side, w, h);
            if gts.iter().all(|g| g.iou(&b) < bg_iou) {
                out.push(RoiSample { roi: b, class: None, instance: None });
                break;
            }
        }
    }
    out
}

/// Indices of the ground-truth channels supervised for an RoI of `class`.
fn supervised_channels(class: usize, split: &SplitConfig, head: HeadMode, all_a: bool) -> Vec<usize> {
    if head == HeadMode::Oracle {
        return vec![class];
    }
    if !split.in_a(class) {
        return Vec::new();
    }
    if all_a {
        split.a.clone()
    } else {
        vec![class]
    }
}

/// Scalar loss values from one step, plus which were empty.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cls: f32,
    pub bbox: f32,
    pub mask: f32,
    pub cls_empty: bool,
    pub bbox_empty: bool,
    pub mask_empty: bool,
}

/// Which losses a step builds and which parameters it may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    EndToEnd,
    Detection,
    Mask,
}

impl Phase {
    fn trainable(self, name: &str) -> bool {
        match self {
            Phase::EndToEnd => true,
            Phase::Detection => is_detection_param(name),
            Phase::Mask => !is_detection_param(name),
        }
    }
}

/// Mutable training state: weights, momentum buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub velocity: ParamStore,
    /// Number of completed optimizer steps (across stages).
    pub step: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self, TrainError> {
        let params = config.model.init(config.seed)?;
        let mut velocity = ParamStore::default();
        for (name, t) in params.iter() {
            velocity.insert(name, Tensor::zeros(t.shape()));
        }
        Ok(TrainState { params, velocity, step: 0 })
    }
}

/// Checks that every instance category is covered by the split and model.
pub fn check_vocabulary(scenes: &dyn SceneSource, split: &SplitConfig, model: &ModelSpec, probe: usize) -> Result<(), TrainError> {
    let c = model.net.num_classes;
    if split.num_classes() != c {
        return Err(TrainError::Vocabulary(format!("split covers {} classes, model has {c}", split.num_classes())));
    }
    for i in 0..scenes.len().min(probe) {
        let s = scenes.scene(i)?;
        if let Some(inst) = s.instances.iter().find(|inst| inst.category >= c) {
            return Err(TrainError::Vocabulary(format!("scene {i} has category {} >= {c}", inst.category)));
        }
        model.net.validate(s.image.height(), s.image.width())?;
    }
    Ok(())
}

/// Assembles the forward graph for a batch and returns the total loss node
/// (if any component is active) together with the component values.
pub fn build_losses(
    tape: &mut Tape<f32>,
    params: &Bindings,
    config: &TrainConfig,
    split: &SplitConfig,
    scenes: &[SceneRecord],
    rois: &[Vec<RoiSample>],
    phase: Phase,
) -> Result<(Option<Var>, StepLosses), TrainError> {
    let model = &config.model;
    let (c, m) = (model.net.num_classes, model.net.mask_size);
    let imgs: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let images = tape.constant(image_batch(&imgs)?)?;
    let feats = model.backbone(tape, params, images)?;
    let lw = config.loss_weights;
    let mut out = StepLosses::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();

    let windows: Vec<_> = rois
        .iter()
        .enumerate()
        .flat_map(|(b, rs)| rs.iter().map(move |r| window(b, &r.roi)))
        .collect();
    let flat: Vec<(usize, &RoiSample)> = rois.iter().enumerate().flat_map(|(b, rs)| rs.iter().map(move |r| (b, r))).collect();

    if phase != Phase::Mask && (lw.cls > 0.0 || lw.bbox > 0.0) && !windows.is_empty() {
        let (logits, deltas) = model.box_head(tape, params, feats, &windows)?;
        if lw.cls > 0.0 {
            let labels: Vec<usize> = flat.iter().map(|(_, r)| r.class.map_or(0, |k| k + 1)).collect();
            let l = softmax_ce(tape, logits, labels)?;
            out.cls = tape.value(l.var).item();
            out.cls_empty = l.empty;
            parts.push((l.var, lw.cls));
        }
        if lw.bbox > 0.0 {
            let n = flat.len();
            let mut target = vec![0.0f32; n * 4 * c];
            let mut mask = vec![false; n * 4 * c];
            for (i, (b, r)) in flat.iter().enumerate() {
                if let (Some(k), Some(inst)) = (r.class, r.instance) {
                    let gt = BoxF::from_pixels(scenes[*b].instances[inst].bbox);
                    let d = encode_box(&r.roi, &gt);
                    for j in 0..4 {
                        target[i * 4 * c + 4 * k + j] = (d[j] * BOX_DELTA_WEIGHTS[j]) as f32;
                        mask[i * 4 * c + 4 * k + j] = true;
                    }
                }
            }
            let t = tape.constant(Tensor::new(&[n, 4 * c], target)?)?;
            let l = smooth_l1(tape, deltas, t, mask)?;
            out.bbox = tape.value(l.var).item();
            out.bbox_empty = l.empty;
            parts.push((l.var, lw.bbox));
        }
    }

    if phase != Phase::Detection && lw.mask > 0.0 {
        let mut mwin = Vec::new();
        let mut chans = Vec::new();
        let mut targets = Vec::new();
        for (b, r) in &flat {
            let (Some(k), Some(inst)) = (r.class, r.instance) else { continue };
            let ch = supervised_channels(k, split, model.head, config.mask_loss_all_a_channels);
            if ch.is_empty() {
                continue;
            }
            mwin.push(window(*b, &r.roi));
            chans.push((k, ch));
            targets.push(mask_target(&scenes[*b].instances[inst].mask, &r.roi, m));
        }
        if mwin.is_empty() {
            out.mask_empty = true;
        } else {
            let n = mwin.len();
            let w_seg = model.mask_weights(tape, params)?;
            let logits = model.mask_head(tape, params, feats, &mwin, w_seg)?.fused;
            let mm = m * m;
            let mut target = vec![0.0f32; n * c * mm];
            let mut sel = vec![false; n * c * mm];
            for (i, ((k, ch), t)) in chans.iter().zip(&targets).enumerate() {
                for &j in ch {
                    let off = (i * c + j) * mm;
                    sel[off..off + mm].fill(true);
                    if j == *k {
                        target[off..off + mm].copy_from_slice(t);
                    }
                }
            }
            let t = tape.constant(Tensor::new(&[n, c, m, m], target)?)?;
            let l = bce_with_logits(tape, logits, t, sel)?;
            out.mask = tape.value(l.var).item();
            parts.push((l.var, lw.mask));
        }
    }

    let mut total: Option<Var> = None;
    for (v, wgt) in parts {
        let v = if wgt == 1.0 {
            v
        } else {
            let s = tape.constant(Tensor::scalar(wgt as f32))?;
            tape.mul(v, s)?
        };
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
    }
    Ok((total, out))
}

/// Drives optimization over a scene source.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub split: SplitConfig,
    pub state: TrainState,
    scenes: &'a dyn SceneSource,
    log: Vec<LossRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, split: SplitConfig, scenes: &'a dyn SceneSource) -> Result<Self, TrainError> {
        config.validate()?;
        check_vocabulary(scenes, &split, &config.model, 16)?;
        if scenes.is_empty() {
            return Err(TrainError::Config("dataset is empty".into()));
        }
        let state = TrainState::init(&config)?;
        Ok(Trainer { config, split, state, scenes, log: Vec::new() })
    }

    /// Continues from a saved state; the config must hash identically.
    pub fn resume(
        config: TrainConfig,
        split: SplitConfig,
        scenes: &'a dyn SceneSource,
        ckpt: Checkpoint,
    ) -> Result<Self, TrainError> {
        if ckpt.config_hash != config.hash() {
            return Err(TrainError::Checkpoint(format!(
                "config hash {:016x} does not match checkpoint {:016x}",
                config.hash(),
                ckpt.config_hash
            )));
        }
        let mut t = Trainer::new(config, split, scenes)?;
        if !ckpt.params.names().eq(t.state.params.names()) {
            return Err(TrainError::Checkpoint("parameter set differs from the model".into()));
        }
        t.state = TrainState { params: ckpt.params, velocity: ckpt.velocity, step: ckpt.step };
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            step: self.state.step,
            params: self.state.params.clone(),
            velocity: self.state.velocity.clone(),
        }
    }

    pub fn log(&self) -> &[LossRow] {
        &self.log
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps()
    }

    /// Phase and in-stage step index for global step `step`.
    pub fn phase_of(&self, step: u64) -> (Phase, u64) {
        match self.config.mode {
            TrainMode::EndToEnd => (Phase::EndToEnd, step),
            TrainMode::Stagewise if step < self.config.steps => (Phase::Detection, step),
            TrainMode::Stagewise => (Phase::Mask, step - self.config.steps),
        }
    }

    /// Scenes and RoIs of global step `step`; a pure function of the seed.
    pub fn batch(&self, step: u64) -> Result<(Vec<SceneRecord>, Vec<Vec<RoiSample>>), TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(self.config.seed ^ 0x7261_696e, step));
        let n = self.scenes.len();
        let k = self.config.images_per_step.min(n);
        let min_side = self.config.model.net.total_stride() as f64;
        let mut scenes = Vec::with_capacity(k);
        let mut rois = Vec::with_capacity(k);
        for idx in sample(&mut rng, n, k).into_iter() {
            let s = self.scenes.scene(idx)?;
            rois.push(sample_rois(&s, self.config.jitter, self.config.bg_iou, min_side, &mut rng));
            scenes.push(s);
        }
        Ok((scenes, rois))
    }

    /// One optimizer step with the configured losses.
    pub fn step(&mut self) -> Result<LossRow, TrainError> {
        let (phase, local) = self.phase_of(self.state.step);
        let (scenes, rois) = self.batch(self.state.step)?;
        self.step_with(phase, local, &scenes, &rois, self.config.loss_weights)
    }

    /// One optimizer step on an explicit batch with explicit loss weights.
    pub fn step_with(
        &mut self,
        phase: Phase,
        local: u64,
        scenes: &[SceneRecord],
        rois: &[Vec<RoiSample>],
        weights: LossWeights,
    ) -> Result<LossRow, TrainError> {
        let lr = self.config.lr_at(local);
        let mut tape = Tape::<f32>::new();
        let p = Bindings::bind(&mut tape, &self.state.params, |n| phase.trainable(n))?;
        let cfg = TrainConfig { loss_weights: weights, ..self.config.clone() };
        let (total, losses) = build_losses(&mut tape, &p, &cfg, &self.split, scenes, rois, phase)?;
        if let Some(total) = total {
            if tape.requires_grad(total) {
                let mut grads = tape.backward(total)?;
                for (name, var) in p.iter() {
                    // parameters off every gradient path keep their values and momentum
                    let Some(g) = grads.take(var) else { continue };
                    let param = self.state.params.get_mut(name).ok_or_else(|| NetError::MissingParam(name.into()))?;
                    let vel = self.state.velocity.get_mut(name).ok_or_else(|| NetError::MissingParam(name.into()))?;
                    sgd_momentum_step(param, &g, vel, lr as f32, self.config.sgd)?;
                }
            }
        }
        let row = LossRow {
            step: self.state.step,
            lr,
            cls: losses.cls,
            bbox: losses.bbox,
            mask: losses.mask,
            mask_empty: losses.mask_empty,
        };
        self.state.step += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Steps until `until` global steps are complete (or the schedule ends).
    pub fn run_until(&mut self, until: u64) -> Result<(), TrainError> {
        let end = until.min(self.config.total_steps());
        while self.state.step < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.config.total_steps())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BackboneStage, NetConfig, W_BOX, W_CLS};
    use crate::shapes::{split_classes, GenConfig, ProceduralScenes, SplitMode};
    use crate::transfer::TransferSpec;

    fn tiny_net() -> NetConfig {
        NetConfig {
            num_classes: 10,
            stages: vec![BackboneStage { channels: 8, kernel: 3, stride: 2 }, BackboneStage { channels: 8, kernel: 3, stride: 2 }],
            box_dim: 16,
            box_crop: 4,
            mask_size: 6,
            mask_dim: 8,
            mask_convs: 1,
            mlp_hidden: 16,
        }
    }

    fn scenes(n: usize) -> Vec<SceneRecord> {
        let g = GenConfig { height: 48, width: 48, ..GenConfig::default() };
        ProceduralScenes::new(g, 11, n).unwrap().materialize().unwrap()
    }

    fn config(head: HeadMode, stop_grad: bool) -> TrainConfig {
        let transfer = TransferSpec { stop_grad, ..TransferSpec::default() };
        let mut c = TrainConfig::new(ModelSpec::new(tiny_net(), head, true, transfer));
        c.steps = 20;
        c.decay_steps = vec![12, 16];
        c
    }

    fn split() -> SplitConfig {
        split_classes(10, SplitMode::Fixed { a_count: 5 }).unwrap()
    }

    #[test]
    fn schedule_is_piecewise_constant() {
        let mut c = TrainConfig::new(ModelSpec::new(NetConfig::default(), HeadMode::Transfer, true, TransferSpec::default()));
        c.lr = 0.02;
        assert!((c.lr_at(700) - 0.002).abs() < 1e-15);
        assert_eq!(c.lr_at(0), 0.02);
        assert!((c.lr_at(999) - 0.0002).abs() < 1e-15);
        let jumps = (1..1000).filter(|&s| c.lr_at(s) != c.lr_at(s - 1)).count();
        assert_eq!(jumps, 2);
        assert!((1..1000).all(|s| c.lr_at(s) <= c.lr_at(s - 1)));
    }

    #[test]
    fn invalid_decay_rejected() {
        let mut c = config(HeadMode::Oracle, true);
        c.decay_steps = vec![15, 12];
        assert!(c.validate().is_err());
        c.decay_steps = vec![25];
        assert!(c.validate().is_err());
    }

    #[test]
    fn background_rois_avoid_objects() {
        let s = &scenes(5)[3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rois = sample_rois(s, 0.1, 0.3, 4.0, &mut rng);
        let fg = rois.iter().filter(|r| r.class.is_some()).count();
        assert_eq!(fg, s.instances.len());
        for r in rois.iter().filter(|r| r.class.is_none()) {
            for inst in &s.instances {
                assert!(BoxF::from_pixels(inst.bbox).iou(&r.roi) < 0.3);
            }
        }
        for r in rois.iter().filter(|r| r.class.is_some()) {
            let gt = BoxF::from_pixels(s.instances[r.instance.unwrap()].bbox);
            assert!(gt.iou(&r.roi) > 0.5);
        }
    }

    fn b_only_batch(data: &[SceneRecord], split: &SplitConfig) -> (Vec<SceneRecord>, Vec<Vec<RoiSample>>) {
        let s = data.iter().find(|s| s.instances.iter().all(|i| !split.in_a(i.category))).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_rois(&s, 0.1, 0.3, 4.0, &mut rng);
        (vec![s], vec![r])
    }

    #[test]
    fn b_only_batch_has_empty_mask_loss() {
        let data = scenes(40);
        let sp = split();
        let (s, r) = b_only_batch(&data, &sp);
        let mut t = Trainer::new(config(HeadMode::Transfer, true), sp, &data).unwrap();
        let row = t.step_with(Phase::EndToEnd, 0, &s, &r, LossWeights::default()).unwrap();
        assert!(row.mask_empty);
        assert_eq!(row.mask, 0.0);
    }

    fn a_batch(data: &[SceneRecord], split: &SplitConfig) -> (Vec<SceneRecord>, Vec<Vec<RoiSample>>) {
        let s = data.iter().find(|s| s.instances.iter().any(|i| split.in_a(i.category))).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_rois(&s, 0.1, 0.3, 4.0, &mut rng);
        (vec![s], vec![r])
    }

    fn mask_only_step(stop_grad: bool) -> (ParamStore, ParamStore) {
        let data = scenes(40);
        let sp = split();
        let (s, r) = a_batch(&data, &sp);
        let mut t = Trainer::new(config(HeadMode::Transfer, stop_grad), sp, &data).unwrap();
        let before = t.params().clone();
        let w = LossWeights { cls: 0.0, bbox: 0.0, mask: 1.0 };
        let row = t.step_with(Phase::EndToEnd, 0, &s, &r, w).unwrap();
        assert!(!row.mask_empty);
        (before, t.params().clone())
    }

    #[test]
    fn stop_grad_freezes_detection_weights() {
        let (before, after) = mask_only_step(true);
        for n in [W_CLS, W_BOX] {
            assert!(before.get(n).unwrap().bit_eq(after.get(n).unwrap()), "{n} moved");
        }
        assert!(!before.get("transfer.l0.weight").unwrap().bit_eq(after.get("transfer.l0.weight").unwrap()));
    }

    #[test]
    fn without_stop_grad_a_rows_move() {
        let (before, after) = mask_only_step(false);
        let d = 17;
        let (b, a) = (before.get(W_CLS).unwrap().data(), after.get(W_CLS).unwrap().data());
        let moved = (1..=5).any(|row| b[row * d..(row + 1) * d] != a[row * d..(row + 1) * d]);
        assert!(moved);
    }

    #[test]
    fn non_target_channel_does_not_affect_mask_loss() {
        let data = scenes(40);
        let sp = split();
        let (s, r) = a_batch(&data, &sp);
        let c = config(HeadMode::Oracle, true);
        let run = |bump: f32| {
            let mut params = c.model.init(c.seed).unwrap();
            let present: Vec<usize> = s[0].instances.iter().map(|i| i.category).collect();
            let other = (0..10).find(|k| !present.contains(k)).unwrap();
            let seg = params.get_mut(crate::net::W_SEG).unwrap();
            let e1 = seg.shape()[1];
            for v in &mut seg.data_mut()[other * e1..(other + 1) * e1] {
                *v += bump;
            }
            let mut tape = Tape::<f32>::new();
            let p = Bindings::bind(&mut tape, &params, |_| true).unwrap();
            let w = TrainConfig { loss_weights: LossWeights { cls: 0.0, bbox: 0.0, mask: 1.0 }, ..c.clone() };
            build_losses(&mut tape, &p, &w, &sp, &s, &r, Phase::EndToEnd).unwrap().1.mask
        };
        assert_eq!(run(0.0), run(3.0));
    }

    #[test]
    fn stagewise_second_stage_freezes_detection() {
        let data = scenes(30);
        let mut c = config(HeadMode::Transfer, true);
        c.mode = TrainMode::Stagewise;
        c.steps = 4;
        c.decay_steps = vec![];
        let mut t = Trainer::new(c, split(), &data).unwrap();
        t.run_until(4).unwrap();
        let stage1 = t.params().clone();
        t.run().unwrap();
        assert_eq!(t.state.step, 8);
        for (name, v) in stage1.iter() {
            let same = v.bit_eq(t.params().get(name).unwrap());
            assert_eq!(same, is_detection_param(name), "{name}");
        }
        assert!(t.log()[..4].iter().all(|r| r.mask == 0.0));
        assert!(t.log()[4..].iter().all(|r| r.cls == 0.0 && r.bbox == 0.0));
    }

    #[test]
    fn fixed_seed_reproduces_losses() {
        let data = scenes(20);
        let mut c = config(HeadMode::ClassAgnostic, true);
        c.steps = 5;
        c.decay_steps = vec![3];
        let mut a = Trainer::new(c.clone(), split(), &data).unwrap();
        let mut b = Trainer::new(c, split(), &data).unwrap();
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(loss_log_csv(a.log()), loss_log_csv(b.log()));
        assert!(a.params().bit_eq(b.params()));
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let data = scenes(4);
        let sp = split_classes(8, SplitMode::Fixed { a_count: 4 }).unwrap();
        assert!(matches!(Trainer::new(config(HeadMode::Oracle, true), sp, &data), Err(TrainError::Vocabulary(_))));
    }
}
