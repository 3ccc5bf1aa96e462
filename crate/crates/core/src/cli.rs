//! Command implementations behind the `aosa` binary.
//!
//! Every command writes its outputs atomically, so rerunning with the same
//! inputs overwrites them with identical bytes (wall-clock fields aside).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature_store::{generate_synthetic, save_feature_store, SyntheticSpec};
use crate::io::write_string_atomic;
use crate::model::load_external_predictions;
use crate::protocol::{load_rounds_csv, run_protocol_with_predictions, save_rounds_csv, RoundReport};
use crate::theory::{
    generator_constant, save_bound_csv, verify_bound_grid, BoundGrid, BoundRow, DEFAULT_ALPHA,
};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Recorded in every summary: the classifier is a linear model on stored
/// features, not a network trained on raw inputs.
pub const MODEL_SUBSTITUTION: &str = "logistic regression on stored features";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Generates a synthetic store from a TOML spec file.
pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = toml::from_str(&read_text(spec_path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let store = generate_synthetic(&spec)?;
    save_feature_store(&store, out)
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub reports: Vec<RoundReport>,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
}

/// Picks the run directory: `--out`, then the config's `output_dir`, then
/// `<output_root>/<config file stem>`.
pub fn resolve_run_dir(
    config_path: &Path,
    cfg: &RunConfig,
    out: Option<&Path>,
    output_root: Option<&Path>,
) -> PathBuf {
    if let Some(out) = out {
        return out.to_path_buf();
    }
    if let Some(dir) = &cfg.output_dir {
        return dir.clone();
    }
    let stem = config_path
        .file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    output_root.unwrap_or(Path::new("runs")).join(stem)
}

pub fn cmd_run(
    config_path: &Path,
    out: Option<&Path>,
    seed_override: Option<u64>,
    output_root: Option<&Path>,
) -> Result<RunOutcome> {
    let cfg = RunConfig::load(config_path)?;
    let out_dir = resolve_run_dir(config_path, &cfg, out, output_root);
    let seeds = seed_override.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let store = cfg.load_dataset()?;
    let known = cfg.known_set()?;
    let external = match &cfg.predictions {
        Some(p) => Some(load_external_predictions(p, known.len(), &store)?),
        None => None,
    };
    let dataset = match (&cfg.dataset.path, &cfg.dataset.synthetic) {
        (Some(p), _) => p.display().to_string(),
        _ => "synthetic".to_string(),
    };
    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let started = Instant::now();
            let pcfg = cfg.protocol(seed)?;
            let run = run_protocol_with_predictions(&pcfg, &store, external.as_ref())?;
            let dir = out_dir.join(format!("seed_{seed}"));
            save_rounds_csv(&run.reports, &dir.join(ROUNDS_FILE))?;
            let mut s = String::new();
            let mut kv = |k: &str, v: String| {
                let _ = writeln!(s, "{k}={v}");
            };
            kv("strategy", cfg.strategy.name().into());
            kv("prefilter", format!("{:?}", cfg.prefilter).to_lowercase());
            kv("label", cfg.label());
            kv("seed", seed.to_string());
            kv("dataset", dataset.clone());
            kv("n_samples", run.n_samples.to_string());
            kv(
                "known_classes",
                known.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            );
            kv("init_fraction", cfg.init_fraction.to_string());
            kv("test_fraction", cfg.test_fraction.to_string());
            kv("k", cfg.k.to_string());
            kv("budget", cfg.budget.to_string());
            kv("rounds", cfg.rounds.to_string());
            kv("use_invalid_neighbors", cfg.use_invalid_neighbors.to_string());
            kv("train_epochs", cfg.train.epochs.to_string());
            kv("train_learning_rate", cfg.train.learning_rate.to_string());
            kv("train_lr_decay", cfg.train.lr_decay.to_string());
            kv("train_decay_every", cfg.train.decay_every.to_string());
            kv("train_batch_size", cfg.train.batch_size.to_string());
            kv("train_seed", cfg.train.seed.to_string());
            kv("external_predictions", cfg.predictions.is_some().to_string());
            kv("initial_labeled", run.initial_labeled.to_string());
            kv("n_total_known", run.n_total_known.to_string());
            kv("rounds_completed", run.reports.len().to_string());
            kv("truncated", run.truncated.to_string());
            kv("model_substitution", MODEL_SUBSTITUTION.into());
            kv(
                "wall_time_secs",
                format!("{:.3}", started.elapsed().as_secs_f64()),
            );
            write_string_atomic(&dir.join(SUMMARY_FILE), &s)?;
            Ok(SeedOutcome {
                seed,
                dir,
                reports: run.reports,
                truncated: run.truncated,
            })
        })
        .collect::<Result<_>>()?;
    let per_seed: Vec<&[RoundReport]> = outcomes.iter().map(|o| o.reports.as_slice()).collect();
    write_string_atomic(&out_dir.join(AGGREGATE_FILE), &aggregate_csv(&per_seed))?;
    Ok(RunOutcome {
        out_dir,
        seeds: outcomes,
    })
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

pub const AGGREGATE_HEADER: &str = "round,n_seeds,precision_mean,precision_std,recall_cum_mean,recall_cum_std,test_accuracy_mean,test_accuracy_std,known_selected_mean,known_selected_std";

/// Per-round mean and std across seeds. A round is aggregated over the seeds
/// that reached it.
pub fn aggregate_csv(per_seed: &[&[RoundReport]]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    let max_round = per_seed.iter().map(|r| r.len()).max().unwrap_or(0);
    for t in 0..max_round {
        let rows: Vec<&RoundReport> = per_seed.iter().filter_map(|r| r.get(t)).collect();
        let column = |f: &dyn Fn(&RoundReport) -> Option<f64>| -> String {
            let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
            let (m, s) = mean_std(&v);
            format!("{},{}", fmt(m), fmt(s))
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            rows[0].round,
            rows.len(),
            column(&|r| Some(r.precision)),
            column(&|r| Some(r.recall_cumulative)),
            column(&|r| r.test_accuracy),
            column(&|r| Some(r.known_selected as f64)),
        );
    }
    out
}

/// Runs a bound-verification grid (the default grid when `grid_path` is
/// `None`), writes the CSV to `out` and the construction constants next to it.
pub fn cmd_bound(grid_path: Option<&Path>, out: &Path) -> Result<Vec<BoundRow>> {
    let grid = match grid_path {
        Some(p) => toml::from_str::<BoundGrid>(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => BoundGrid::default(),
    };
    let rows = verify_bound_grid(&grid)?;
    save_bound_csv(&rows, out)?;
    let mut notes = String::new();
    let _ = writeln!(
        notes,
        "# Construction behind {}.\n\
         # Points of one cluster share a true label; points of different clusters\n\
         # are at least cross_cluster_gap apart, so C = gap^-alpha satisfies the\n\
         # smoothness assumption. r_K defaults to the largest observed K-th\n\
         # neighbour distance. label_flip_rate is set per row from the e column.",
        out.file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
    );
    let _ = writeln!(notes, "cross_cluster_gap = {}", grid.spec.cross_cluster_gap());
    let _ = writeln!(
        notes,
        "within_cluster_diameter = {}",
        grid.spec.within_cluster_diameter()
    );
    let alpha = grid
        .alpha
        .as_ref()
        .and_then(|a| a.first().copied())
        .unwrap_or(DEFAULT_ALPHA);
    if let Ok(c) = generator_constant(&grid.spec, alpha) {
        let _ = writeln!(notes, "alpha = {alpha}\nC = {c}");
    }
    let _ = writeln!(notes, "trials = {}\nseed = {}\n", grid.trials, grid.seed);
    notes.push_str("[spec]\n");
    notes.push_str(&toml::to_string(&grid.spec).map_err(|e| Error::Format(e.to_string()))?);
    write_string_atomic(&out.with_extension("spec.toml"), &notes)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub accuracy: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

fn parse_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("{}: malformed line {l:?}", path.display())))
        })
        .collect()
}

/// Final-round accuracy, precision and recall per strategy label, averaged
/// over every run found under `dir`, best accuracy first.
pub fn collect_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<String, Vec<RoundReport>> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        if entry.file_name() != SUMMARY_FILE {
            continue;
        }
        let summary = parse_summary(entry.path())?;
        let label = summary
            .get("label")
            .or_else(|| summary.get("strategy"))
            .ok_or_else(|| Error::Format(format!("{}: no strategy recorded", entry.path().display())))?
            .clone();
        let rounds_path = entry.path().with_file_name(ROUNDS_FILE);
        let reports = load_rounds_csv(&rounds_path)?;
        let last = reports
            .last()
            .ok_or_else(|| Error::Data(format!("{}: no rounds recorded", rounds_path.display())))?;
        groups.entry(label).or_default().push(last.clone());
    }
    if groups.is_empty() {
        return Err(Error::Data(format!("no runs found under {}", dir.display())));
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(label, finals)| {
            let acc: Vec<f64> = finals.iter().filter_map(|r| r.test_accuracy).collect();
            let prec: Vec<f64> = finals.iter().map(|r| r.precision).collect();
            let rec: Vec<f64> = finals.iter().map(|r| r.recall_cumulative).collect();
            ReportRow {
                label,
                runs: finals.len(),
                accuracy: mean_std(&acc).0,
                precision: mean_std(&prec).0.unwrap_or(0.0),
                recall: mean_std(&rec).0.unwrap_or(0.0),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.accuracy
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.accuracy.unwrap_or(f64::NEG_INFINITY))
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(rows)
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(0)
        .max("strategy".len());
    let mut out = format!(
        "{:<width$}  {:>4}  {:>8}  {:>9}  {:>6}\n",
        "strategy", "runs", "accuracy", "precision", "recall"
    );
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>8}  {:>9.4}  {:>6.4}",
            r.label, r.runs, acc, r.precision, r.recall
        );
    }
    out
}

pub fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<String> {
    let table = render_report(&collect_report(dir)?);
    if let Some(path) = out {
        write_string_atomic(path, &table)?;
    }
    Ok(table)
}
