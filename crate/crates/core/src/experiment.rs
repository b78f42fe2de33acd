//! Train-then-evaluate runs and the ablation grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::eval::{ablation_report, coco_map, AblationTable, EvalError, EvalReport, RunSummary};
use crate::net::{BoxF, Detection, ModelSpec, NetError, ParamStore};
use crate::shapes::{scene_seed, SceneRecord, SceneSource, ShapesError, SplitConfig};
use crate::train::{jitter_box, LossRow, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] ShapesError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mask_threshold: f32,
    /// Jitter of the ground-truth RoIs handed to the heads.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { mask_threshold: 0.5, jitter: 0.1, seed: 1 }
    }
}

/// Detections for every scene using jittered ground-truth RoIs. The jitter
/// of scene `i` depends only on `(opts.seed, i)`.
pub fn predict_all(
    model: &ModelSpec,
    params: &ParamStore,
    scenes: &[SceneRecord],
    opts: &EvalOptions,
) -> Result<Vec<Detection>, NetError> {
    let min_side = model.net.total_stride() as f64;
    let per_image: Vec<Vec<Detection>> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(opts.seed, i as u64));
            let (h, w) = (s.image.height(), s.image.width());
            let rois: Vec<BoxF> = s
                .instances
                .iter()
                .map(|g| jitter_box(&BoxF::from_pixels(g.bbox), opts.jitter, min_side, w, h, &mut rng))
                .collect();
            model.predict(params, &s.image, i, &rois, opts.mask_threshold)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn evaluate(
    model: &ModelSpec,
    params: &ParamStore,
    scenes: &[SceneRecord],
    split: &SplitConfig,
    opts: &EvalOptions,
) -> Result<EvalReport, ExperimentError> {
    let dets = predict_all(model, params, scenes, opts)?;
    Ok(coco_map(&dets, scenes, split)?)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub params: ParamStore,
    pub log: Vec<LossRow>,
    pub report: EvalReport,
}

/// Trains from scratch and evaluates on `eval_scenes`.
pub fn train_and_evaluate(
    config: &TrainConfig,
    split: &SplitConfig,
    train_scenes: &dyn SceneSource,
    eval_scenes: &[SceneRecord],
    opts: &EvalOptions,
) -> Result<RunOutcome, ExperimentError> {
    let mut trainer = Trainer::new(config.clone(), split.clone(), train_scenes)?;
    trainer.run()?;
    let report = evaluate(&config.model, trainer.params(), eval_scenes, split, opts)?;
    Ok(RunOutcome { params: trainer.state.params.clone(), log: trainer.log().to_vec(), report })
}

/// One cell of an ablation grid.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub label: String,
    pub trial: usize,
    pub config: TrainConfig,
    pub split: SplitConfig,
}

/// Runs every cell (in parallel when threads are available) and joins the
/// results in input order.
pub fn run_grid(
    cells: &[GridCell],
    train_scenes: &dyn SceneSource,
    eval_scenes: &[SceneRecord],
    opts: &EvalOptions,
    dataset_hash: &str,
) -> Result<Vec<(RunSummary, RunOutcome)>, ExperimentError> {
    cells
        .par_iter()
        .map(|cell| {
            let out = train_and_evaluate(&cell.config, &cell.split, train_scenes, eval_scenes, opts)?;
            let summary = RunSummary::from_report(&cell.label, cell.trial, &cell.split.hash(), dataset_hash, &out.report);
            Ok((summary, out))
        })
        .collect()
}

pub fn grid_report(results: &[(RunSummary, RunOutcome)], baseline: &str) -> Result<AblationTable, EvalError> {
    let runs: Vec<RunSummary> = results.iter().map(|(s, _)| s.clone()).collect();
    ablation_report(&runs, baseline)
}
