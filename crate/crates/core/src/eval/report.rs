use std::fmt::Write as _;

use super::{EvalError, EvalReport};

/// Headline numbers of one trained-and-evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub trial: usize,
    pub split_hash: String,
    pub dataset_hash: String,
    pub ap_a: f64,
    pub ap_b: f64,
}

impl RunSummary {
    pub fn from_report(label: &str, trial: usize, split_hash: &str, dataset_hash: &str, r: &EvalReport) -> Self {
        RunSummary {
            label: label.to_string(),
            trial,
            split_hash: split_hash.to_string(),
            dataset_hash: dataset_hash.to_string(),
            ap_a: r.ap_a.unwrap_or(0.0),
            ap_b: r.ap_b.unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub split_hash: String,
    pub ap_a: f64,
    pub ap_b: f64,
    /// `(AP_B − AP_B(baseline)) / AP_B(baseline)`; `None` if the baseline AP is 0.
    pub rel_change_b: Option<f64>,
    pub trials: usize,
    /// Sample standard deviation of AP_B; `None` for a single trial.
    pub std_ap_b: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub baseline: String,
    /// One row per run, in input order.
    pub runs: Vec<AblationRow>,
    /// One row per label (first-appearance order), aggregated over trials.
    pub aggregates: Vec<AblationRow>,
}

impl AblationTable {
    pub fn aggregate(&self, label: &str) -> Option<&AblationRow> {
        self.aggregates.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,split_hash,AP_A,AP_B,rel_change_B,trials,std_AP_B\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in self.runs.iter().chain(&self.aggregates) {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{},{}",
                r.label,
                r.split_hash,
                r.ap_a,
                r.ap_b,
                opt(r.rel_change_b),
                r.trials,
                opt(r.std_ap_b)
            );
        }
        out
    }
}

fn rel(x: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| (x - base) / base)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Per-run rows (relative change against the baseline of the same trial) and
/// per-label aggregates (relative change of the means).
pub fn ablation_report(runs: &[RunSummary], baseline: &str) -> Result<AblationTable, EvalError> {
    if !runs.iter().any(|r| r.label == baseline) {
        return Err(EvalError::MissingBaseline(baseline.to_string()));
    }
    if let Some(r) = runs.iter().find(|r| r.dataset_hash != runs[0].dataset_hash) {
        return Err(EvalError::Mismatch(format!("dataset hash ({} vs {})", r.dataset_hash, runs[0].dataset_hash)));
    }
    let base_of = |trial: usize| runs.iter().find(|r| r.label == baseline && r.trial == trial);
    let mut rows = Vec::with_capacity(runs.len());
    for r in runs {
        let base = base_of(r.trial);
        if let Some(b) = base {
            if b.split_hash != r.split_hash {
                return Err(EvalError::Mismatch(format!("split hash of {} trial {}", r.label, r.trial)));
            }
        }
        rows.push(AblationRow {
            label: format!("{}#{}", r.label, r.trial),
            split_hash: r.split_hash.clone(),
            ap_a: r.ap_a,
            ap_b: r.ap_b,
            rel_change_b: base.and_then(|b| rel(r.ap_b, b.ap_b)),
            trials: 1,
            std_ap_b: None,
        });
    }
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let summarize = |label: &str| {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| r.label == label).collect();
        let a: Vec<f64> = group.iter().map(|r| r.ap_a).collect();
        let b: Vec<f64> = group.iter().map(|r| r.ap_b).collect();
        let first = &group[0].split_hash;
        let split_hash = if group.iter().all(|r| &r.split_hash == first) { first.clone() } else { "mixed".into() };
        (split_hash, mean(&a), mean(&b), sample_std(&b), group.len())
    };
    let base_b = summarize(baseline).2;
    let aggregates = labels
        .iter()
        .map(|&l| {
            let (split_hash, ap_a, ap_b, std_ap_b, trials) = summarize(l);
            AblationRow {
                label: l.to_string(),
                split_hash,
                ap_a,
                ap_b,
                rel_change_b: rel(ap_b, base_b),
                trials,
                std_ap_b,
            }
        })
        .collect();
    Ok(AblationTable { baseline: baseline.to_string(), runs: rows, aggregates })
}

/// `label, class_id, AP` for every class with ground truth.
pub fn per_class_csv(label: &str, report: &EvalReport) -> String {
    let mut out = String::from("label,class_id,AP\n");
    for (c, ap) in report.class_ap.iter().enumerate() {
        if let Some(ap) = ap {
            let _ = writeln!(out, "{label},{c},{ap:.6}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(label: &str, trial: usize, ap_b: f64) -> RunSummary {
        RunSummary {
            label: label.into(),
            trial,
            split_hash: "s".into(),
            dataset_hash: "d".into(),
            ap_a: 0.5,
            ap_b,
        }
    }

    #[test]
    fn relative_change_formula() {
        let t = ablation_report(&[run("base", 0, 0.16), run("x", 0, 0.20)], "base").unwrap();
        assert!((t.aggregate("x").unwrap().rel_change_b.unwrap() - 0.25).abs() < 1e-12);
        assert!((t.runs[1].rel_change_b.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn five_trials_give_mean_and_std() {
        let vals = [0.1, 0.2, 0.3, 0.4, 0.5];
        let runs: Vec<RunSummary> = vals.iter().enumerate().map(|(i, &v)| run("base", i, v)).collect();
        let t = ablation_report(&runs, "base").unwrap();
        let a = t.aggregate("base").unwrap();
        assert_eq!(a.trials, 5);
        assert!((a.ap_b - 0.3).abs() < 1e-12);
        assert!((a.std_ap_b.unwrap() - 0.025f64.sqrt()).abs() < 1e-12);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 1 + 5 + 1);
        assert!(csv.starts_with("label,split_hash,AP_A,AP_B,rel_change_B,trials,std_AP_B\n"));
    }

    #[test]
    fn missing_baseline_and_mismatched_datasets() {
        assert!(matches!(ablation_report(&[run("x", 0, 0.2)], "base"), Err(EvalError::MissingBaseline(_))));
        let mut other = run("x", 0, 0.2);
        other.dataset_hash = "e".into();
        assert!(matches!(ablation_report(&[run("base", 0, 0.1), other], "base"), Err(EvalError::Mismatch(_))));
    }
}
