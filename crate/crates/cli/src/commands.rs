use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bifair::bilevel::{self, save_checkpoint, load_checkpoint, Fairness, TrainConfig, TrainedModel};
use bifair::dataio::{
    assign_attribute_groups, assign_popularity_groups, load_interactions, load_metadata, load_metadata_rows, preprocess,
    read_dataset, read_groups, write_dataset, write_groups, Dataset, GroupAssignment, InteractionFormat,
};
use bifair::embed::{load_embeddings, synth_embeddings, write_embeddings, SemanticMatrix};
use bifair::evalmetrics::{grouping_report, overall_metrics, rank_topk, GroupingReport, MaskPolicy, OverallMetrics};
use bifair::synth;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{GroupingKind, Method, RunConfig};
use crate::CliError;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_timing(dir: &Path, started: Instant) -> Result<(), CliError> {
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "runtime_seconds": started.elapsed().as_secs_f64() }),
    )
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_json(&dir.join("config.echo.json"), cfg)
}

/// Writes `raw/interactions.csv`, `raw/items.csv` and `raw/embeddings.bin`.
pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let world = synth::generate(&cfg.world)?;
    let dir = cfg.raw_dir();
    let mut text = String::from("user,item,rating,timestamp\n");
    for r in &world.interactions {
        let _ = writeln!(text, "{},{},{},{}", r.user, r.item, r.rating, r.timestamp.unwrap_or(0));
    }
    write_text(&dir.join("interactions.csv"), &text)?;
    let mut items = String::from("item,label,title\n");
    for (i, key) in world.item_keys.iter().enumerate() {
        let _ = writeln!(items, "{key},{},Item {key}", world.genre_labels[world.genre_of[i]]);
    }
    write_text(&dir.join("items.csv"), &items)?;
    write_embeddings(dir.join("embeddings.bin"), &world.embeddings)?;
    echo_config(&dir, cfg)?;
    log::info!(
        "synth: {} interactions, {} items written to {}",
        world.interactions.len(),
        world.item_keys.len(),
        dir.display()
    );
    Ok(())
}

fn existing(explicit: &Option<PathBuf>, fallback: PathBuf) -> Option<PathBuf> {
    match explicit {
        Some(p) => Some(p.clone()),
        None => fallback.exists().then_some(fallback),
    }
}

/// Writes the dataset directory, both groupings and the aligned embeddings.
pub fn prep(cfg: &RunConfig) -> Result<(), CliError> {
    let raw = cfg.raw_dir();
    let interactions = cfg
        .input
        .interactions
        .clone()
        .unwrap_or_else(|| raw.join("interactions.csv"));
    let format = InteractionFormat {
        delimiter: cfg.input.delimiter.as_bytes()[0],
    };
    let loaded = load_interactions(&interactions, format)?;
    let ds = preprocess(&loaded.raw, &cfg.prep)?;
    let dir = cfg.data_dir();
    write_dataset(&dir, &ds, Some(&cfg.prep))?;

    let popularity = assign_popularity_groups(&ds, cfg.prep.top_pop_fraction)?;
    write_groups(dir.join(GroupingKind::Popularity.file_name()), &popularity)?;
    let items = existing(&cfg.input.items, raw.join("items.csv"));
    let genre = match &items {
        Some(path) => {
            let g = assign_attribute_groups(&load_metadata(path)?, &ds)?;
            write_groups(dir.join(GroupingKind::Genre.file_name()), &g)?;
            Some(g)
        }
        None => None,
    };

    let z = match existing(&cfg.input.embeddings, raw.join("embeddings.bin")) {
        Some(path) => {
            let items = items.ok_or_else(|| {
                CliError::config("embeddings need an items file giving their row order (input.items)")
            })?;
            let keys: Vec<String> = load_metadata_rows(&items)?.into_iter().map(|(k, _)| k).collect();
            let all = load_embeddings(&path, keys.len(), cfg.input.normalize_embeddings)?;
            let position: std::collections::HashMap<&str, usize> =
                keys.iter().enumerate().map(|(r, k)| (k.as_str(), r)).collect();
            let order = ds
                .item_keys
                .iter()
                .map(|k| {
                    position
                        .get(k.as_str())
                        .copied()
                        .ok_or_else(|| CliError::runtime(format!("item {k} has no embedding row")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            all.select_rows(&order)?
        }
        None => {
            log::warn!("no embeddings given; synthesizing them");
            synth_embeddings(&ds, genre.as_ref().unwrap_or(&popularity), &cfg.embed)?
        }
    };
    write_embeddings(dir.join("embeddings.bin"), &z)?;
    echo_config(&dir, cfg)?;
    log::info!(
        "prep: {} users, {} items, {} train / {} val / {} test interactions ({} malformed lines)",
        ds.num_users,
        ds.num_items,
        ds.train.iter().map(Vec::len).sum::<usize>(),
        ds.val.iter().map(Vec::len).sum::<usize>(),
        ds.test.iter().map(Vec::len).sum::<usize>(),
        loaded.malformed
    );
    Ok(())
}

/// Everything `prep` produced.
pub struct Prepared {
    pub ds: Dataset,
    pub groupings: Vec<(GroupingKind, GroupAssignment)>,
    pub z: SemanticMatrix,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = cfg.data_dir();
        let ds = read_dataset(&dir)?;
        let mut groupings = Vec::new();
        for kind in [GroupingKind::Popularity, GroupingKind::Genre] {
            let path = dir.join(kind.file_name());
            if path.exists() {
                groupings.push((kind, read_groups(&path)?));
            }
        }
        let z = load_embeddings(dir.join("embeddings.bin"), ds.num_items, false)?;
        Ok(Self { ds, groupings, z })
    }

    pub fn grouping(&self, kind: GroupingKind) -> Result<&GroupAssignment, CliError> {
        self.groupings
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, g)| g)
            .ok_or_else(|| CliError::config(format!("no {} grouping in the dataset directory", kind.name())))
    }
}

fn method_config(base: &TrainConfig, method: Method, seed: u64) -> TrainConfig {
    let (fairness, separate) = match method {
        Method::Plain => (Fairness::Plain, false),
        Method::Reweight => (Fairness::Reweight, false),
        Method::GroupDro => (Fairness::GroupDro, false),
        Method::Bifair => (Fairness::Bifair, false),
        Method::BifairSeparate => (Fairness::Bifair, true),
    };
    TrainConfig {
        fairness,
        separate,
        seed,
        ..base.clone()
    }
}

/// Trains on the configured grouping and writes the checkpoint.
pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let data = Prepared::load(cfg)?;
    let groups = data.grouping(cfg.grouping)?;
    let model = bilevel::train(&data.ds, groups, &data.z, &cfg.train)?;
    let dir = cfg.checkpoint_dir();
    save_checkpoint(&dir, &model)?;
    echo_config(&dir, cfg)?;
    write_timing(&dir, started)?;
    log::info!(
        "train: {} epochs, best val recall {:.4} at record {}",
        model.history.len(),
        model.best_val_recall(),
        model.best_index + 1
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub fairness: Fairness,
    pub separate: bool,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_recall: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub checkpoint: CheckpointSummary,
    pub k: usize,
    pub overall: OverallMetrics,
    pub groupings: Vec<GroupingReport>,
}

fn evaluate_model(cfg: &RunConfig, data: &Prepared, model: &TrainedModel) -> Result<(OverallMetrics, Vec<GroupingReport>), CliError> {
    let ranking = rank_topk(
        &model.theta,
        &model.z,
        &data.ds,
        &cfg.train.score,
        cfg.eval.k,
        MaskPolicy::TrainVal,
    )?;
    let overall = overall_metrics(&ranking, &data.ds.test);
    let groupings = data
        .groupings
        .iter()
        .map(|(kind, g)| grouping_report(kind.name(), &ranking, &data.ds.test, g, &cfg.eval))
        .collect();
    Ok((overall, groupings))
}

fn report_csv(groupings: &[GroupingReport]) -> String {
    let mut out = String::from("grouping,group,label,utility,cv,min_bottom\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for g in groupings {
        for (n, label) in g.labels.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{n},{label},{},{},{}",
                g.name,
                fmt(g.utilities.values[n]),
                fmt(g.cv),
                fmt(g.min_bottom)
            );
        }
    }
    out
}

/// Evaluates the checkpoint on the test split and writes the report.
pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let data = Prepared::load(cfg)?;
    let model = load_checkpoint(cfg.checkpoint_dir())?;
    let (overall, groupings) = evaluate_model(cfg, &data, &model)?;
    let echo: Option<Value> = fs::read_to_string(cfg.checkpoint_dir().join("config.echo.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let train_echo = echo.as_ref().and_then(|v| v.get("train"));
    let best = &model.history[model.best_index];
    let report = Report {
        config: cfg.clone(),
        checkpoint: CheckpointSummary {
            fairness: train_echo
                .and_then(|t| t.get("fairness"))
                .and_then(|f| serde_json::from_value(f.clone()).ok())
                .unwrap_or(cfg.train.fairness),
            separate: train_echo
                .and_then(|t| t.get("separate"))
                .and_then(Value::as_bool)
                .unwrap_or(cfg.train.separate),
            seed: model.seed,
            epochs: model.history.len(),
            best_epoch: best.epoch,
            best_val_recall: best.val_recall,
        },
        k: cfg.eval.k,
        overall,
        groupings,
    };
    let dir = cfg.report_dir();
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("report.csv"), &report_csv(&report.groupings))?;
    echo_config(&dir, cfg)?;
    write_timing(&dir, started)?;
    log::info!(
        "eval: recall@{k} {:.4} ndcg@{k} {:.4} hr@{k} {:.4}",
        report.overall.recall,
        report.overall.ndcg,
        report.overall.hr,
        k = cfg.eval.k
    );
    Ok(())
}

pub const COMPARE_METRICS: [&str; 7] = ["recall", "ndcg", "hr", "pop_cv", "pop_min", "genre_cv", "genre_min"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    /// `None` on median rows.
    pub seed: Option<u64>,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub metrics: Vec<String>,
    pub runs: Vec<CompareRow>,
    pub medians: Vec<CompareRow>,
}

impl CompareTable {
    pub fn median(&self, method: &str, metric: &str) -> Option<f64> {
        let col = self.metrics.iter().position(|m| m == metric)?;
        self.medians.iter().find(|r| r.method == method)?.values[col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("method,seed,{}\n", self.metrics.join(","));
        for r in self.runs.iter().chain(&self.medians) {
            let seed = r.seed.map_or("median".to_string(), |s| s.to_string());
            let vals: Vec<String> = r.values.iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))).collect();
            let _ = writeln!(out, "{},{seed},{}", r.method, vals.join(","));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| method | {} |\n|---|{}\n", self.metrics.join(" | "), "---|".repeat(self.metrics.len()));
        for r in &self.medians {
            let vals: Vec<String> = r.values.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.4}"))).collect();
            let _ = writeln!(out, "| {} | {} |", r.method, vals.join(" | "));
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn row_values(overall: &OverallMetrics, groupings: &[GroupingReport]) -> Vec<Option<f64>> {
    let find = |name: &str| groupings.iter().find(|g| g.name == name);
    let pop = find("popularity");
    let genre = find("genre");
    vec![
        Some(overall.recall),
        Some(overall.ndcg),
        Some(overall.hr),
        pop.and_then(|g| g.cv),
        pop.and_then(|g| g.min_bottom),
        genre.and_then(|g| g.cv),
        genre.and_then(|g| g.min_bottom),
    ]
}

/// Trains and evaluates every method for every seed on the prepared data.
/// Per-run histories go to `compare/runs/<method>-s<seed>/history.jsonl`
/// when `out` is given.
pub fn run_compare(cfg: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<CompareTable, CliError> {
    let groups = data.grouping(cfg.grouping)?;
    let mut runs = Vec::new();
    for &method in &cfg.compare.methods {
        for &seed in &cfg.compare.seeds {
            let tcfg = method_config(&cfg.train, method, seed);
            let started = Instant::now();
            let model = bilevel::train(&data.ds, groups, &data.z, &tcfg)?;
            let (overall, groupings) = evaluate_model(cfg, data, &model)?;
            log::info!(
                "compare {} seed {seed}: {} epochs in {:.1}s, recall {:.4}",
                method.name(),
                model.history.len(),
                started.elapsed().as_secs_f64(),
                overall.recall
            );
            if let Some(dir) = out {
                let mut lines = String::new();
                for r in &model.history {
                    lines.push_str(&serde_json::to_string(r)?);
                    lines.push('\n');
                }
                write_text(&dir.join("runs").join(format!("{}-s{seed}", method.name())).join("history.jsonl"), &lines)?;
            }
            runs.push(CompareRow {
                method: method.name().to_string(),
                seed: Some(seed),
                values: row_values(&overall, &groupings),
            });
        }
    }
    let medians = cfg
        .compare
        .methods
        .iter()
        .map(|m| CompareRow {
            method: m.name().to_string(),
            seed: None,
            values: (0..COMPARE_METRICS.len())
                .map(|c| {
                    median(
                        runs.iter()
                            .filter(|r| r.method == m.name())
                            .filter_map(|r| r.values[c])
                            .collect(),
                    )
                })
                .collect(),
        })
        .collect();
    Ok(CompareTable {
        metrics: COMPARE_METRICS.iter().map(|s| s.to_string()).collect(),
        runs,
        medians,
    })
}

/// Writes `compare/table.json`, `compare/table.csv` and prints the medians.
pub fn compare(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let data = Prepared::load(cfg)?;
    let dir = cfg.compare_dir();
    let table = run_compare(cfg, &data, Some(&dir))?;
    write_json(&dir.join("table.json"), &table)?;
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    echo_config(&dir, cfg)?;
    write_timing(&dir, started)?;
    print!("{}", table.to_markdown());
    Ok(())
}
