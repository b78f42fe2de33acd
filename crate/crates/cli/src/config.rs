//! Flat `key = value` run configuration.
//!
//! Every key has a default. A config file and `--set` overrides may only
//! assign keys that exist; the resolved table is written next to every
//! output so a directory alone reproduces its results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use maskx::experiment::EvalOptions;
use maskx::grad::SgdConfig;
use maskx::net::{HeadMode, ModelSpec, NetConfig};
use maskx::shapes::{default_vocabulary, split_classes, Category, GenConfig, SplitConfig, SplitMode};
use maskx::train::{LossWeights, TrainConfig, TrainMode};
use maskx::transfer::{Activation, EmbeddingSource, ExternalEmbedding, TransferSpec};
use sha2::{Digest, Sha256};

use crate::CliError;

fn defaults() -> Vec<(&'static str, String)> {
    let vocab: Vec<String> = default_vocabulary().iter().map(Category::name).collect();
    let kv = |k: &'static str, v: &str| (k, v.to_string());
    vec![
        kv("gen.height", "128"),
        kv("gen.width", "128"),
        ("gen.vocabulary", vocab.join(",")),
        kv("gen.min_instances", "1"),
        kv("gen.max_instances", "4"),
        kv("gen.min_size", "0.15"),
        kv("gen.max_size", "0.45"),
        kv("gen.max_overlap", "0.2"),
        kv("gen.noise", "0.05"),
        kv("gen.train_images", "2000"),
        kv("gen.train_seed", "100"),
        kv("gen.eval_images", "300"),
        kv("gen.eval_seed", "200"),
        kv("split.mode", "fixed"),
        kv("split.a_count", "5"),
        kv("split.seed", "0"),
        kv("train.data", ""),
        kv("train.head", "transfer"),
        kv("train.mlp", "true"),
        kv("train.source", "cls+box"),
        kv("train.randn_seed", "7"),
        kv("train.embedding_file", ""),
        kv("train.layers", "2"),
        kv("train.activation", "leaky-relu"),
        kv("train.leaky_alpha", "0.01"),
        kv("train.hidden", "auto"),
        kv("train.stop_grad", "true"),
        kv("train.mode", "e2e"),
        kv("train.steps", "1000"),
        kv("train.lr", "0.01"),
        kv("train.decay_steps", "600,800"),
        kv("train.decay_factor", "0.1"),
        kv("train.images_per_step", "2"),
        kv("train.jitter", "0.1"),
        kv("train.bg_iou", "0.3"),
        kv("train.seed", "0"),
        kv("train.momentum", "0.9"),
        kv("train.weight_decay", "0.0001"),
        kv("train.loss_cls", "1"),
        kv("train.loss_box", "1"),
        kv("train.loss_mask", "1"),
        kv("train.mask_all_a_channels", "false"),
        kv("train.box_dim", "128"),
        kv("train.box_crop", "7"),
        kv("train.mask_size", "14"),
        kv("train.mask_dim", "32"),
        kv("train.mlp_hidden", "128"),
        kv("train.stop_at", ""),
        kv("train.resume", ""),
        kv("eval.data", ""),
        kv("eval.checkpoint", ""),
        kv("eval.mask_threshold", "0.5"),
        kv("eval.jitter", "0.1"),
        kv("eval.seed", "1"),
        kv("eval.viz_images", "8"),
        kv("ablate.heads", "class-agnostic,transfer"),
        kv("ablate.sources", "cls+box"),
        kv("ablate.layers", "2"),
        kv("ablate.activations", "leaky-relu"),
        kv("ablate.mlp", "true"),
        kv("ablate.modes", "e2e"),
        kv("ablate.stop_grad", "true"),
        kv("ablate.trials", "3"),
        kv("ablate.baseline", "class-agnostic"),
        kv("ablate.split_mode", "fixed"),
        kv("ablate.a_counts", "5"),
    ]
}

/// Resolved key/value table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError> {
    raw.trim().parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {raw:?}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool, CliError> {
    match raw.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected a boolean, got {raw:?}"))),
    }
}

impl RunConfig {
    /// Defaults overridden by `text` (one `key = value` per line, `#` comments).
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} has no default"))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        parse_value(key, self.get(key))
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        parse_bool(key, self.get(key))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key).trim();
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.render().as_bytes())[..8])
    }

    pub fn gen_config(&self) -> Result<GenConfig, CliError> {
        let vocabulary = self
            .list("gen.vocabulary")
            .iter()
            .map(|n| Category::parse(n).ok_or_else(|| CliError::Config(format!("gen.vocabulary: unknown category {n:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let g = GenConfig {
            height: self.num("gen.height")?,
            width: self.num("gen.width")?,
            vocabulary,
            min_instances: self.num("gen.min_instances")?,
            max_instances: self.num("gen.max_instances")?,
            min_size: self.num("gen.min_size")?,
            max_size: self.num("gen.max_size")?,
            max_overlap: self.num("gen.max_overlap")?,
            noise: self.num("gen.noise")?,
        };
        g.validate().map_err(|e| CliError::Config(format!("gen.*: {e}")))?;
        Ok(g)
    }

    pub fn num_classes(&self) -> usize {
        self.list("gen.vocabulary").len()
    }

    pub fn train_images(&self) -> Result<(usize, u64), CliError> {
        Ok((self.num("gen.train_images")?, self.num("gen.train_seed")?))
    }

    pub fn eval_images(&self) -> Result<(usize, u64), CliError> {
        Ok((self.num("gen.eval_images")?, self.num("gen.eval_seed")?))
    }

    pub fn split_mode(&self, mode_key: &str, a_count: usize, seed: u64) -> Result<SplitMode, CliError> {
        match self.get(mode_key) {
            "fixed" => Ok(SplitMode::Fixed { a_count }),
            "random" => Ok(SplitMode::Random { a_count, seed }),
            other => Err(CliError::Config(format!("{mode_key}: expected fixed or random, got {other:?}"))),
        }
    }

    pub fn split(&self) -> Result<SplitConfig, CliError> {
        let mode = self.split_mode("split.mode", self.num("split.a_count")?, self.num("split.seed")?)?;
        split_classes(self.num_classes(), mode).map_err(|e| CliError::Config(format!("split.*: {e}")))
    }

    pub fn eval_options(&self) -> Result<EvalOptions, CliError> {
        Ok(EvalOptions {
            mask_threshold: self.num("eval.mask_threshold")?,
            jitter: self.num("eval.jitter")?,
            seed: self.num("eval.seed")?,
        })
    }

    pub fn viz_images(&self) -> Result<usize, CliError> {
        self.num("eval.viz_images")
    }

    pub fn train_data(&self) -> Option<PathBuf> {
        self.path("train.data")
    }

    pub fn eval_data(&self) -> Option<PathBuf> {
        self.path("eval.data")
    }

    pub fn eval_checkpoint(&self) -> Option<PathBuf> {
        self.path("eval.checkpoint")
    }

    pub fn resume(&self) -> Option<PathBuf> {
        self.path("train.resume")
    }

    pub fn stop_at(&self) -> Result<Option<u64>, CliError> {
        let v = self.get("train.stop_at").trim();
        if v.is_empty() {
            Ok(None)
        } else {
            parse_value("train.stop_at", v).map(Some)
        }
    }

    fn source(&self, raw: &str) -> Result<EmbeddingSource, CliError> {
        Ok(match raw {
            "cls" => EmbeddingSource::Cls,
            "box" => EmbeddingSource::Box,
            "cls+box" => EmbeddingSource::ClsBox,
            "randn" => EmbeddingSource::Randn { seed: self.num("train.randn_seed")? },
            "external" => {
                let path = self
                    .path("train.embedding_file")
                    .ok_or_else(|| CliError::Config("train.embedding_file: required for source external".into()))?;
                let e = ExternalEmbedding::load(&path)
                    .map_err(|e| CliError::Config(format!("train.embedding_file: {e}")))?;
                EmbeddingSource::External(e)
            }
            other => return Err(CliError::Config(format!("train.source: unknown source {other:?}"))),
        })
    }

    fn activation(&self, raw: &str) -> Result<Activation, CliError> {
        match raw {
            "relu" => Ok(Activation::Relu),
            "leaky-relu" => Ok(Activation::LeakyRelu { alpha: self.num("train.leaky_alpha")? }),
            other => Err(CliError::Config(format!("train.activation: expected relu or leaky-relu, got {other:?}"))),
        }
    }

    fn head(key: &str, raw: &str) -> Result<HeadMode, CliError> {
        match raw {
            "oracle" => Ok(HeadMode::Oracle),
            "class-agnostic" => Ok(HeadMode::ClassAgnostic),
            "transfer" => Ok(HeadMode::Transfer),
            other => Err(CliError::Config(format!("{key}: unknown head mode {other:?}"))),
        }
    }

    fn mode(key: &str, raw: &str) -> Result<TrainMode, CliError> {
        match raw {
            "e2e" => Ok(TrainMode::EndToEnd),
            "stagewise" => Ok(TrainMode::Stagewise),
            other => Err(CliError::Config(format!("{key}: expected e2e or stagewise, got {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let hidden = match self.get("train.hidden").trim() {
            "auto" => None,
            v => Some(parse_value("train.hidden", v)?),
        };
        let transfer = TransferSpec {
            source: self.source(self.get("train.source"))?,
            layers: self.num("train.layers")?,
            activation: self.activation(self.get("train.activation"))?,
            hidden,
            stop_grad: self.flag("train.stop_grad")?,
        };
        let net = NetConfig {
            num_classes: self.num_classes(),
            box_dim: self.num("train.box_dim")?,
            box_crop: self.num("train.box_crop")?,
            mask_size: self.num("train.mask_size")?,
            mask_dim: self.num("train.mask_dim")?,
            mlp_hidden: self.num("train.mlp_hidden")?,
            ..NetConfig::default()
        };
        let (h, w) = (self.num("gen.height")?, self.num("gen.width")?);
        net.validate(h, w).map_err(|e| CliError::Config(format!("train.* / gen.height / gen.width: {e}")))?;
        let head = Self::head("train.head", self.get("train.head"))?;
        let mut cfg = TrainConfig::new(ModelSpec::new(net, head, self.flag("train.mlp")?, transfer));
        cfg.mode = Self::mode("train.mode", self.get("train.mode"))?;
        cfg.steps = self.num("train.steps")?;
        cfg.lr = self.num("train.lr")?;
        cfg.decay_steps = self
            .list("train.decay_steps")
            .iter()
            .map(|s| parse_value("train.decay_steps", s))
            .collect::<Result<_, _>>()?;
        cfg.decay_factor = self.num("train.decay_factor")?;
        cfg.images_per_step = self.num("train.images_per_step")?;
        cfg.jitter = self.num("train.jitter")?;
        cfg.bg_iou = self.num("train.bg_iou")?;
        cfg.seed = self.num("train.seed")?;
        cfg.loss_weights = LossWeights {
            cls: self.num("train.loss_cls")?,
            bbox: self.num("train.loss_box")?,
            mask: self.num("train.loss_mask")?,
        };
        cfg.mask_loss_all_a_channels = self.flag("train.mask_all_a_channels")?;
        cfg.sgd = SgdConfig { momentum: self.num("train.momentum")?, weight_decay: self.num("train.weight_decay")? };
        cfg.validate().map_err(|e| CliError::Config(format!("train.*: {e}")))?;
        Ok(cfg)
    }

    /// Grid cells of `ablate`, one per variant and trial, each a full config
    /// with its label.
    pub fn ablation_cells(&self) -> Result<Vec<AblationCell>, CliError> {
        let trials: usize = self.num("ablate.trials")?;
        if trials == 0 {
            return Err(CliError::Config("ablate.trials: must be >= 1".into()));
        }
        let a_counts: Vec<usize> =
            self.list("ablate.a_counts").iter().map(|s| parse_value("ablate.a_counts", s)).collect::<Result<_, _>>()?;
        let mlps: Vec<bool> = self.list("ablate.mlp").iter().map(|s| parse_bool("ablate.mlp", s)).collect::<Result<_, _>>()?;
        let sgs: Vec<bool> =
            self.list("ablate.stop_grad").iter().map(|s| parse_bool("ablate.stop_grad", s)).collect::<Result<_, _>>()?;
        let heads = self.list("ablate.heads");
        let modes = self.list("ablate.modes");
        let sources = self.list("ablate.sources");
        let layers = self.list("ablate.layers");
        let acts = self.list("ablate.activations");
        for (key, l) in [
            ("ablate.heads", heads.len()),
            ("ablate.modes", modes.len()),
            ("ablate.sources", sources.len()),
            ("ablate.layers", layers.len()),
            ("ablate.activations", acts.len()),
            ("ablate.mlp", mlps.len()),
            ("ablate.stop_grad", sgs.len()),
            ("ablate.a_counts", a_counts.len()),
        ] {
            if l == 0 {
                return Err(CliError::Config(format!("{key}: must list at least one value")));
            }
        }
        let mut variants: Vec<(String, Vec<(&str, String)>)> = Vec::new();
        for head in &heads {
            Self::head("ablate.heads", head)?;
            for mode in &modes {
                Self::mode("ablate.modes", mode)?;
                for &mlp in &mlps {
                    let base = vec![("train.head", head.clone()), ("train.mode", mode.clone()), ("train.mlp", mlp.to_string())];
                    let suffix = format!(
                        "{}{}",
                        if mlp && mlps.len() > 1 { "+mlp" } else { "" },
                        if modes.len() > 1 { format!("@{mode}") } else { String::new() }
                    );
                    if head != "transfer" {
                        variants.push((format!("{head}{suffix}"), base));
                        continue;
                    }
                    for src in &sources {
                        for l in &layers {
                            for act in &acts {
                                for &sg in &sgs {
                                    let mut v = base.clone();
                                    v.extend([
                                        ("train.source", src.clone()),
                                        ("train.layers", l.clone()),
                                        ("train.activation", act.clone()),
                                        ("train.stop_grad", sg.to_string()),
                                    ]);
                                    let label = format!(
                                        "transfer:{src}:{l}L:{act}{}{suffix}",
                                        if sg { "" } else { ":no-sg" }
                                    );
                                    variants.push((label, v));
                                }
                            }
                        }
                    }
                }
            }
        }
        let baseline = self.get("ablate.baseline").to_string();
        let mut cells = Vec::new();
        let seed0: u64 = self.num("train.seed")?;
        let split_seed0: u64 = self.num("split.seed")?;
        for &a_count in &a_counts {
            for trial in 0..trials {
                let split_mode = self.split_mode("ablate.split_mode", a_count, split_seed0 + trial as u64)?;
                let split = split_classes(self.num_classes(), split_mode)
                    .map_err(|e| CliError::Config(format!("ablate.a_counts: {e}")))?;
                for (label, assignments) in &variants {
                    let mut rc = self.clone();
                    for (k, v) in assignments {
                        rc.set(k, v)?;
                    }
                    rc.set("train.seed", &(seed0 + trial as u64).to_string())?;
                    rc.set("split.mode", self.get("ablate.split_mode"))?;
                    rc.set("split.a_count", &a_count.to_string())?;
                    rc.set("split.seed", &(split_seed0 + trial as u64).to_string())?;
                    let group = if a_counts.len() > 1 { format!("a{a_count}/") } else { String::new() };
                    cells.push(AblationCell {
                        group,
                        label: label.clone(),
                        trial,
                        train: rc.train_config()?,
                        split: split.clone(),
                        config: rc,
                    });
                }
            }
        }
        if !variants.iter().any(|(l, _)| *l == baseline) {
            let labels: Vec<&str> = variants.iter().map(|(l, _)| l.as_str()).collect();
            return Err(CliError::Config(format!("ablate.baseline: {baseline:?} is not one of {labels:?}")));
        }
        Ok(cells)
    }

    pub fn ablation_baseline(&self) -> &str {
        self.get("ablate.baseline")
    }
}

/// One trained-and-evaluated cell of the ablation grid.
#[derive(Clone, Debug)]
pub struct AblationCell {
    /// Split-size group prefix (empty when only one `|A|` is swept).
    pub group: String,
    pub label: String,
    pub trial: usize,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub config: RunConfig,
}
