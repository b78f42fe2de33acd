//! Command-line driver: dataset generation, training, evaluation, ablation
//! grids and overlay rendering, all configured by a flat key/value file.

pub mod config;
mod viz;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use maskx::eval::{per_class_csv, AblationTable, EvalReport, RunSummary};
use maskx::experiment::{evaluate, grid_report, predict_all, run_grid, ExperimentError, GridCell};
use maskx::shapes::io::{read_dataset, write_dataset};
use maskx::shapes::{GenConfig, ProceduralScenes, SceneRecord, SceneSource, ShapesError};
use maskx::train::{load_checkpoint, loss_log_csv, save_checkpoint, TrainError, Trainer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] ShapesError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{0}")]
    Artifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "maskx", about = "Partially supervised instance segmentation on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Override one key, e.g. `--set train.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and evaluation datasets.
    GenData(Common),
    /// Train a model and write its checkpoint and loss log.
    Train(Common),
    /// Evaluate a checkpoint and write mask AP reports.
    Eval(Common),
    /// Train and evaluate every cell of the configured grid.
    Ablate(Common),
    /// Render prediction overlays (A classes green, B classes red).
    Viz(Common),
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let (common, f): (&Common, fn(&RunConfig, &Path) -> Result<(), CliError>) = match command {
        Command::GenData(c) => (c, gen_data),
        Command::Train(c) => (c, train),
        Command::Eval(c) => (c, eval),
        Command::Ablate(c) => (c, ablate),
        Command::Viz(c) => (c, viz),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    fs::create_dir_all(&common.out)?;
    f(&cfg, &common.out)
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Identifier of a procedurally generated dataset.
fn procedural_hash(gen: &GenConfig, seed: u64, count: usize) -> String {
    format!("procedural-{}", short_hash(&format!("{};seed={seed};count={count}", gen.canonical())))
}

/// Scenes plus the hash that identifies them.
struct Dataset {
    scenes: Vec<SceneRecord>,
    hash: String,
}

fn load_scenes(cfg: &RunConfig, dir: Option<PathBuf>, (count, seed): (usize, u64)) -> Result<Dataset, CliError> {
    match dir {
        Some(d) => {
            let (manifest, scenes) = read_dataset(&d)?;
            Ok(Dataset { scenes, hash: manifest.dataset_hash() })
        }
        None => {
            let gen = cfg.gen_config()?;
            let scenes = ProceduralScenes::new(gen.clone(), seed, count)?.materialize()?;
            Ok(Dataset { scenes, hash: procedural_hash(&gen, seed, count) })
        }
    }
}

fn write_provenance(out: &Path, cfg: &RunConfig, hashes: &[(&str, String)]) -> Result<(), CliError> {
    fs::write(out.join("config.txt"), cfg.render())?;
    let mut text = format!("config_hash {}\n", cfg.hash());
    for (k, v) in hashes {
        text.push_str(&format!("{k} {v}\n"));
    }
    fs::write(out.join("hashes.txt"), text)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let gen = cfg.gen_config()?;
    let mut hashes = Vec::new();
    for (name, (count, seed)) in [("train", cfg.train_images()?), ("eval", cfg.eval_images()?)] {
        let scenes = ProceduralScenes::new(gen.clone(), seed, count)?.materialize()?;
        let manifest = write_dataset(&out.join(name), &scenes, &procedural_hash(&gen, seed, count))?;
        let (_, back) = read_dataset(&out.join(name))?;
        if back != scenes {
            return Err(CliError::Artifact(format!("{name} dataset did not read back identically")));
        }
        hashes.push((if name == "train" { "train_dataset_hash" } else { "eval_dataset_hash" }, manifest.dataset_hash()));
    }
    write_provenance(out, cfg, &hashes)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let split = cfg.split()?;
    let data = load_scenes(cfg, cfg.train_data(), cfg.train_images()?)?;
    let source: &dyn SceneSource = &data.scenes;
    let mut prior_log = String::new();
    let mut trainer = match cfg.resume() {
        Some(path) => {
            let ckpt = load_checkpoint(&path)?;
            let step = ckpt.step;
            if let Some(dir) = path.parent() {
                if let Ok(text) = fs::read_to_string(dir.join("loss_log.csv")) {
                    prior_log = text
                        .lines()
                        .skip(1)
                        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
                        .map(|l| format!("{l}\n"))
                        .collect();
                }
            }
            Trainer::resume(tc.clone(), split.clone(), source, ckpt)?
        }
        None => Trainer::new(tc.clone(), split.clone(), source)?,
    };
    match cfg.stop_at()? {
        Some(s) => trainer.run_until(s)?,
        None => trainer.run()?,
    }
    let log = loss_log_csv(trainer.log());
    let (header, rows) = log.split_once('\n').unwrap_or((&log, ""));
    fs::write(out.join("loss_log.csv"), format!("{header}\n{prior_log}{rows}"))?;
    let ckpt_path = out.join("model.ckpt");
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, &ckpt_path)?;
    if load_checkpoint(&ckpt_path)? != ckpt {
        return Err(CliError::Artifact("checkpoint did not read back identically".into()));
    }
    write_provenance(
        out,
        cfg,
        &[
            ("train_config_hash", format!("{:016x}", tc.hash())),
            ("dataset_hash", data.hash),
            ("split_hash", split.hash()),
            ("step", trainer.state.step.to_string()),
        ],
    )
}

/// Loads `eval.checkpoint` (default `<out>/model.ckpt`) and checks that it was
/// trained with the configured model.
fn trained_params(cfg: &RunConfig, out: &Path) -> Result<maskx::net::ParamStore, CliError> {
    let tc = cfg.train_config()?;
    let path = cfg.eval_checkpoint().unwrap_or_else(|| out.join("model.ckpt"));
    let ckpt = load_checkpoint(&path)?;
    if ckpt.config_hash != tc.hash() {
        return Err(CliError::Config(format!(
            "eval.checkpoint: {} was trained with a different train.* configuration",
            path.display()
        )));
    }
    Ok(ckpt.params)
}

fn summary_csv(report: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    format!(
        "images,gt_instances,predictions,AP_A,AP_B\n{},{},{},{},{}\n",
        report.images,
        report.gt_instances,
        report.predictions,
        opt(report.ap_a),
        opt(report.ap_b)
    )
}

fn per_threshold_csv(report: &EvalReport) -> String {
    let mut out = String::from("class_id,iou_threshold,AP\n");
    for (c, row) in report.ap.iter().enumerate() {
        if let Some(row) = row {
            for (t, ap) in report.thresholds.iter().zip(row) {
                out.push_str(&format!("{c},{t:.2},{ap:.6}\n"));
            }
        }
    }
    out
}

fn write_report(dir: &Path, label: &str, report: &EvalReport) -> Result<(), CliError> {
    fs::write(dir.join("summary.csv"), summary_csv(report))?;
    fs::write(dir.join("per_class.csv"), per_class_csv(label, report))?;
    fs::write(dir.join("per_threshold.csv"), per_threshold_csv(report))?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let split = cfg.split()?;
    let params = trained_params(cfg, out)?;
    let data = load_scenes(cfg, cfg.eval_data(), cfg.eval_images()?)?;
    let report = evaluate(&tc.model, &params, &data.scenes, &split, &cfg.eval_options()?)?;
    write_report(out, tc.model.head.label(), &report)?;
    write_provenance(
        out,
        cfg,
        &[
            ("train_config_hash", format!("{:016x}", tc.hash())),
            ("eval_dataset_hash", data.hash),
            ("split_hash", split.hash()),
        ],
    )
}

/// Directory-safe form of a grid label.
fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cells = cfg.ablation_cells()?;
    let train = load_scenes(cfg, cfg.train_data(), cfg.train_images()?)?;
    let evals = load_scenes(cfg, cfg.eval_data(), cfg.eval_images()?)?;
    let grid: Vec<GridCell> = cells
        .iter()
        .map(|c| GridCell {
            label: format!("{}{}", c.group, c.label),
            trial: c.trial,
            config: c.train.clone(),
            split: c.split.clone(),
        })
        .collect();
    let results = run_grid(&grid, &train.scenes, &evals.scenes, &cfg.eval_options()?, &train.hash)?;
    for (cell, (summary, outcome)) in cells.iter().zip(&results) {
        let dir = out.join("runs").join(slug(&format!("{}#{}", summary.label, summary.trial)));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("loss_log.csv"), loss_log_csv(&outcome.log))?;
        write_report(&dir, &summary.label, &outcome.report)?;
        write_provenance(
            &dir,
            &cell.config,
            &[
                ("train_config_hash", format!("{:016x}", cell.train.hash())),
                ("dataset_hash", train.hash.clone()),
                ("eval_dataset_hash", evals.hash.clone()),
                ("split_hash", cell.split.hash()),
            ],
        )?;
    }
    let mut groups: Vec<&str> = Vec::new();
    for c in &cells {
        if !groups.contains(&c.group.as_str()) {
            groups.push(&c.group);
        }
    }
    let mut csv = String::new();
    for g in groups {
        let members: Vec<_> = results.iter().filter(|(s, _)| s.label.starts_with(g)).cloned().collect();
        let table: AblationTable = grid_report(&members, &format!("{g}{}", cfg.ablation_baseline()))
            .map_err(|e| CliError::Artifact(e.to_string()))?;
        let text = table.to_csv();
        if csv.is_empty() {
            csv.push_str(&text);
        } else {
            csv.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    fs::write(out.join("ablation.csv"), &csv)?;
    let summaries: Vec<RunSummary> = results.iter().map(|(s, _)| s.clone()).collect();
    let expected = summaries.len() + 1;
    if csv.lines().count() < expected {
        return Err(CliError::Artifact("ablation report is missing rows".into()));
    }
    write_provenance(
        out,
        cfg,
        &[
            ("dataset_hash", train.hash),
            ("eval_dataset_hash", evals.hash),
            ("cells", summaries.len().to_string()),
        ],
    )
}

fn viz(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let split = cfg.split()?;
    let params = trained_params(cfg, out)?;
    let data = load_scenes(cfg, cfg.eval_data(), cfg.eval_images()?)?;
    let n = cfg.viz_images()?.min(data.scenes.len());
    let scenes = &data.scenes[..n];
    let dets = predict_all(&tc.model, &params, scenes, &cfg.eval_options()?).map_err(ExperimentError::from)?;
    let dir = out.join("viz");
    fs::create_dir_all(&dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        let mine: Vec<_> = dets.iter().filter(|d| d.image_id == i).collect();
        let png = viz::overlay_png(scene, &mine, &split)?;
        fs::write(dir.join(format!("{i}.png")), png)?;
    }
    write_provenance(out, cfg, &[("eval_dataset_hash", data.hash), ("images", n.to_string())])
}
