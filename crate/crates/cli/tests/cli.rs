use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use maskx_cli::run;

const TINY: &str = "\
gen.height = 32
gen.width = 32
gen.min_size = 0.3
gen.max_size = 0.5
gen.max_instances = 2
gen.train_images = 8
gen.eval_images = 4
train.steps = 4
train.decay_steps = 3
train.box_dim = 8
train.mask_dim = 4
train.mask_size = 8
train.mlp_hidden = 8
eval.viz_images = 2
";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn cmd(sub: &str, config: &Path, out: &Path, sets: &[&str]) -> i32 {
    let mut argv = vec!["maskx".to_string(), sub.into(), "--config".into(), config.display().to_string()];
    argv.extend(["--out".to_string(), out.display().to_string()]);
    for s in sets {
        argv.extend(["--set".to_string(), s.to_string()]);
    }
    run(argv)
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_ne!(cmd("eval", &dir.path().join("nope.cfg"), &out, &[]), 0);
    assert!(!out.exists());
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    let bin = env!("CARGO_BIN_EXE_maskx");
    let o = Command::new(bin).arg("frobnicate").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = Command::new(bin).args(["train", "--config", "x", "--out", "y", "--bogus"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.lr = quick\n");
    let bin = env!("CARGO_BIN_EXE_maskx");
    let o = Command::new(bin)
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lr"));
    assert_ne!(cmd("train", &cfg, &dir.path().join("o"), &["no.such.key=1"]), 0);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(cmd("gen-data", &cfg, &a, &[]), 0);
    assert_eq!(cmd("gen-data", &cfg, &b, &[]), 0);
    assert_eq!(read(a.join("hashes.txt")), read(b.join("hashes.txt")));
    assert_eq!(read(a.join("train/manifest")), read(b.join("train/manifest")));
    assert_eq!(fs::read(a.join("train/images/3.png")).unwrap(), fs::read(b.join("train/images/3.png")).unwrap());
    assert_eq!(cmd("gen-data", &cfg, &b, &["gen.train_seed=5"]), 0);
    assert_ne!(read(a.join("train/manifest")), read(b.join("train/manifest")));
}

#[test]
fn train_and_eval_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let outs: Vec<PathBuf> = ["r1", "r2"].iter().map(|n| dir.path().join(n)).collect();
    for o in &outs {
        assert_eq!(cmd("train", &cfg, o, &[]), 0);
        assert_eq!(cmd("eval", &cfg, o, &[]), 0);
    }
    for f in ["loss_log.csv", "summary.csv", "per_class.csv", "per_threshold.csv", "hashes.txt", "config.txt"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(outs[0].join("model.ckpt")).unwrap(), fs::read(outs[1].join("model.ckpt")).unwrap());
    let log = read(outs[0].join("loss_log.csv"));
    assert!(log.starts_with("step,lr,cls_loss,box_loss,mask_loss\n"));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn eval_and_train_from_written_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    assert_eq!(cmd("gen-data", &cfg, &data, &[]), 0);
    let (procedural, stored) = (dir.path().join("p"), dir.path().join("s"));
    assert_eq!(cmd("train", &cfg, &procedural, &[]), 0);
    let train_set = format!("train.data={}", data.join("train").display());
    let eval_set = format!("eval.data={}", data.join("eval").display());
    assert_eq!(cmd("train", &cfg, &stored, &[&train_set, &eval_set]), 0);
    assert_eq!(read(procedural.join("loss_log.csv")), read(stored.join("loss_log.csv")));
    assert_eq!(cmd("eval", &cfg, &stored, &[&train_set, &eval_set]), 0);
    assert!(read(stored.join("hashes.txt")).contains("eval_dataset_hash"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (full, part, rest) = (dir.path().join("full"), dir.path().join("part"), dir.path().join("rest"));
    assert_eq!(cmd("train", &cfg, &full, &[]), 0);
    assert_eq!(cmd("train", &cfg, &part, &["train.stop_at=2"]), 0);
    let resume = format!("train.resume={}", part.join("model.ckpt").display());
    assert_eq!(cmd("train", &cfg, &rest, &[&resume]), 0);
    assert_eq!(fs::read(full.join("model.ckpt")).unwrap(), fs::read(rest.join("model.ckpt")).unwrap());
    assert_eq!(read(full.join("loss_log.csv")), read(rest.join("loss_log.csv")));
}

#[test]
fn eval_rejects_a_checkpoint_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(cmd("train", &cfg, &out, &[]), 0);
    assert_ne!(cmd("eval", &cfg, &out, &["train.seed=9"]), 0);
}

#[test]
fn ablate_two_heads_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ablate.heads = class-agnostic,transfer\nablate.trials = 3\n");
    let out = dir.path().join("grid");
    assert_eq!(cmd("ablate", &cfg, &out, &[]), 0);
    let csv = read(out.join("ablation.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,split_hash,AP_A,AP_B,rel_change_B,trials,std_AP_B");
    let runs: Vec<&&str> = lines[1..].iter().filter(|l| l.contains('#')).collect();
    let aggregates: Vec<&&str> = lines[1..].iter().filter(|l| !l.contains('#')).collect();
    assert_eq!(runs.len(), 6);
    assert_eq!(aggregates.len(), 2);
    assert!(aggregates.iter().all(|l| l.split(',').nth(5) == Some("3")));
    let base = aggregates.iter().find(|l| l.starts_with("class-agnostic,")).unwrap();
    let rel = base.split(',').nth(4).unwrap();
    assert!(rel.is_empty() || rel == "0.000000", "{base}");
    let runs_dir = out.join("runs");
    assert_eq!(fs::read_dir(&runs_dir).unwrap().count(), 6);
    for entry in fs::read_dir(&runs_dir).unwrap() {
        let d = entry.unwrap().path();
        for f in ["config.txt", "hashes.txt", "loss_log.csv", "summary.csv"] {
            assert!(d.join(f).exists(), "{}/{f}", d.display());
        }
    }
}

#[test]
fn viz_writes_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(cmd("train", &cfg, &out, &[]), 0);
    assert_eq!(cmd("viz", &cfg, &out, &[]), 0);
    for i in 0..2 {
        let png = fs::read(out.join(format!("viz/{i}.png"))).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
