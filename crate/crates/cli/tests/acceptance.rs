//! End-to-end acceptance checks. Every test prints one `PASS`/`FAIL` line.
//!
//! The benchmark checks (7 and 8) run the bundled benchmark config through the
//! release pipeline and take a few minutes.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bifair::bilevel::{outer_hypergradient, GroupRule, RecObjective};
use bifair::dataio::{Dataset, GroupAssignment};
use bifair::embed::{user_representation, SemanticMatrix};
use bifair::evalmetrics::*;
use bifair::fairloss::{
    entropy_gradient, frank_wolfe_gram, group_loss_vector, softmax_entropy, BalanceOptions, FwOptions,
};
use bifair::recmodel::{group_heads, GradRequest, ProjectorParams, ProjectorShape, ScoreConfig};
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

fn report(n: usize, name: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(detail) => format!("criterion {n:>2} PASS  {name}: {detail}\n"),
        Err(detail) => format!("criterion {n:>2} FAIL  {name}: {detail}\n"),
    };
    // Written past the harness capture so the line shows in every run.
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(detail) = outcome {
        panic!("criterion {n} failed: {detail}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- 1 ----

fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let (mlp, bias) = (seed % 2 == 1, seed % 4 < 2);
        let mut r = rng(seed);
        let inst = random_instance(&mut r, mlp, bias, 1);
        let model = inst.model();
        let g = model.loss_grad_theta(&inst.theta, &inst.z, &inst.batch).map_err(|e| e.to_string())?;
        let fd = central_diff(&inst.theta.values, 1e-5, |v| {
            model.infonce_loss(&inst.theta.with_values(v.to_vec()), &inst.z, &inst.batch).unwrap()
        });
        let et = rel_err(&g.values, &fd);
        let (n, d) = (inst.z.num_items(), inst.z.dim());
        let gz = model.loss_grad_z(&inst.theta, &inst.z, &inst.batch).map_err(|e| e.to_string())?;
        let fd = central_diff(inst.z.as_slice(), 1e-5, |v| {
            model.infonce_loss(&inst.theta, &z_with_values(&inst.z, v), &inst.batch).unwrap()
        });
        let ez = rel_err(&dense_z(&gz, n, d), &fd);
        ensure(et <= 1e-4 && ez <= 1e-4, || {
            format!("instance {seed} (mlp={mlp}, bias={bias}): theta {et:.2e}, z {ez:.2e}")
        })?;
        worst = worst.max(et).max(ez);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("50 instances, worst relative error {worst:.2e}, {secs:.2}s"))
}

#[test]
fn criterion_01_gradient_correctness() {
    report(1, "loss gradients vs central differences", gradient_correctness());
}

// ---- 2 ----

fn entropy_oracle() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let n = [2, 3, 5][seed as usize % 3];
        let mut r = rng(1000 + seed);
        let inst = random_instance(&mut r, seed % 2 == 0, true, n);
        let model = inst.model();
        let heads = group_heads(&inst.batch, n);
        let eval = model
            .evaluate(&inst.theta, &inst.z, &inst.batch, &heads, GradRequest::THETA)
            .map_err(|e| e.to_string())?;
        let grads: Vec<_> = (0..n).map(|h| eval.theta_grad(h)).collect();
        let losses = group_loss_vector(&model, &inst.theta, &inst.z, &inst.batch, n)
            .map_err(|e| e.to_string())?
            .present_losses();
        let g = entropy_gradient(&grads, &losses).map_err(|e| e.to_string())?;
        let fd = central_diff(&inst.theta.values, 1e-5, |v| {
            let theta = inst.theta.with_values(v.to_vec());
            softmax_entropy(&group_loss_vector(&model, &theta, &inst.z, &inst.batch, n).unwrap().present_losses()).1
        });
        let err = rel_err(&g.values, &fd);
        ensure(err <= 1e-4, || format!("instance {seed} (N={n}): {err:.2e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 instances, N in {{2,3,5}}, worst relative error {worst:.2e}"))
}

#[test]
fn criterion_02_entropy_gradient_oracle() {
    report(2, "entropy gradient vs end-to-end differences", entropy_oracle());
}

// ---- 3 and 4 ----

fn frank_wolfe_optimality() -> Result<String, String> {
    let opts = FwOptions::default();
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..100 {
        let atoms = random_atoms(seed);
        let m = atoms.len();
        let gram = gram_of(&atoms);
        let sol = frank_wolfe_gram(&gram, m, &opts);
        let d = direction(&atoms, &sol);
        let excess = dot(&d, &d) - oracle_min(&gram, m);
        ensure(excess <= 1e-4, || format!("instance {seed}: excess {excess:.2e}"))?;
        ensure(sol.weights.w.iter().all(|&x| x >= 0.0), || format!("instance {seed}: negative weight"))?;
        let total: f64 = sol.weights.w.iter().sum();
        ensure((total - 1.0).abs() <= 1e-12, || format!("instance {seed}: weights sum to {total}"))?;
        ensure(sol.objective.windows(2).all(|p| p[1] <= p[0]), || {
            format!("instance {seed}: objective increased")
        })?;
        worst = worst.max(excess);
    }
    Ok(format!("100 atom sets, worst excess over oracle {worst:.2e}"))
}

#[test]
fn criterion_03_frank_wolfe_min_norm() {
    report(3, "Frank-Wolfe vs brute-force simplex oracle", frank_wolfe_optimality());
}

fn support_property() -> Result<String, String> {
    let opts = FwOptions::default();
    let mut worst: f64 = f64::INFINITY;
    for seed in 0..100 {
        let atoms = random_atoms(seed);
        let sol = frank_wolfe_gram(&gram_of(&atoms), atoms.len(), &opts);
        let d = direction(&atoms, &sol);
        let dd = dot(&d, &d);
        for (k, g) in atoms.iter().enumerate() {
            let slack = dot(&d, g) - dd;
            ensure(slack >= -1e-6, || format!("instance {seed} atom {k}: slack {slack:.2e}"))?;
            worst = worst.min(slack);
        }
    }
    Ok(format!("100 atom sets, min d.g - |d|^2 = {worst:.2e}"))
}

#[test]
fn criterion_04_min_norm_support_property() {
    report(4, "non-conflicting direction at the min-norm point", support_property());
}

// ---- 5 ----

fn hypergradient() -> Result<String, String> {
    let xi = 1e-3;
    let bilinear = CubicToy::new(1.3, 0.0, 0.7);
    let h = outer_hypergradient(&bilinear, &-0.4, xi, 0.01).map_err(|e| e.to_string())?;
    let err = (h.z_direction.values[0] - bilinear.unrolled_exact(-0.4, xi)).abs();
    ensure(err <= 1e-5, || format!("bilinear error {err:.2e}"))?;

    let cubic = CubicToy::new(0.8, 1.5, 1.2);
    let error_at = |scale: f64| {
        let h = outer_hypergradient(&cubic, &0.6, xi, scale).unwrap();
        (h.z_direction.values[0] - cubic.unrolled_exact(0.6, xi)).abs()
    };
    let ratio = error_at(0.1) / error_at(0.05);
    ensure((3.0..=5.0).contains(&ratio), || format!("halving ratio {ratio:.3}"))?;

    let mut r = rng(5);
    let inst = random_instance(&mut r, false, true, 3);
    let rule = GroupRule::Balance(BalanceOptions::default());
    let obj = RecObjective::new(inst.model(), &inst.z, &inst.batch, 3, rule.clone(), rule);
    outer_hypergradient(&obj, &inst.theta, xi, 0.01).map_err(|e| e.to_string())?;
    let (nt, nz) = obj.eval_counts();
    ensure((nt, nz) == (2, 3), || format!("{nt} theta / {nz} Z gradient evaluations"))?;
    Ok(format!("bilinear error {err:.1e}, halving ratio {ratio:.3}, cost {nt} theta + {nz} Z gradients"))
}

#[test]
fn criterion_05_hypergradient() {
    report(5, "finite-difference hypergradient", hypergradient());
}

// ---- 6 ----

fn random_dataset(r: &mut impl Rng) -> Dataset {
    let num_users = r.random_range(1..=6);
    let num_items = r.random_range(3..=25);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..num_users {
        let mut items: Vec<usize> = (0..num_items).collect();
        items.shuffle(r);
        let a = r.random_range(0..=num_items / 2);
        let b = r.random_range(0..=(num_items - a) / 2);
        let c = r.random_range(0..=num_items - a - b);
        let split = |range: std::ops::Range<usize>| {
            let mut v = items[range].to_vec();
            v.sort_unstable();
            v
        };
        train.push(split(0..a));
        val.push(split(a..a + b));
        test.push(split(a + b..a + b + c));
    }
    Dataset {
        num_users,
        num_items,
        train,
        val,
        test,
        user_keys: (0..num_users).map(|u| u.to_string()).collect(),
        item_keys: (0..num_items).map(|i| i.to_string()).collect(),
        seed: 0,
    }
}

fn metric_oracles() -> Result<String, String> {
    let mut users = 0;
    for seed in 0..30 {
        let mut r = rng(500 + seed);
        let ds = random_dataset(&mut r);
        let d_sem = r.random_range(2..=5);
        let rows: Vec<Vec<f64>> = (0..ds.num_items)
            .map(|_| (0..d_sem).map(|_| r.random_range(-2..=2) as f64).collect())
            .collect();
        let z = SemanticMatrix::from_rows(rows, false).unwrap();
        let theta = ProjectorParams::init(ProjectorShape::linear(d_sem, 3, false), &mut r).unwrap();
        let cfg = ScoreConfig::default();
        let k = r.random_range(1..=ds.num_items + 2);
        let groups = GroupAssignment::new((0..ds.num_items).map(|i| i % 3).collect(), vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        let ranking = rank_topk(&theta, &z, &ds, &cfg, k, MaskPolicy::TrainVal).map_err(|e| e.to_string())?;
        for u in 0..ds.num_users {
            let expected = if ds.train[u].is_empty() {
                Vec::new()
            } else {
                let eu = theta.project(&user_representation(&z, &ds.train[u], cfg.pooling).unwrap()).unwrap();
                let scores: Vec<f64> = (0..ds.num_items)
                    .map(|i| cfg.score(&eu, &theta.project(z.row(i)).unwrap()))
                    .collect();
                let masked: Vec<usize> = ds.train[u].iter().chain(&ds.val[u]).copied().collect();
                brute_topk(&scores, k, &masked)
            };
            let list = &ranking.lists[u];
            let rel = &ds.test[u];
            ensure(*list == expected, || format!("instance {seed} user {u}: top-K differs"))?;
            ensure(recall_at_k(list, rel) == brute_recall(list, rel), || format!("instance {seed}: recall"))?;
            ensure(ndcg_at_k(list, rel, k) == brute_ndcg(list, rel, k), || format!("instance {seed}: ndcg"))?;
            ensure(hr_at_k(list, rel) == brute_hr(list, rel), || format!("instance {seed}: hr"))?;
            let by_group: usize = (0..3)
                .map(|g| {
                    let restricted: Vec<usize> = rel.iter().copied().filter(|&i| groups.group_of[i] == g).collect();
                    hits(list, &restricted)
                })
                .sum();
            ensure(by_group == hits(list, rel), || format!("instance {seed} user {u}: hit conservation"))?;
            users += 1;
        }
    }
    let c = cv(&[1.0, 3.0]).map_err(|e| e.to_string())?;
    ensure((c - 0.5).abs() < 1e-15, || format!("CV((1,3)) = {c}"))?;
    let m = min_bottom(&[0.1, 0.2, 0.3, 0.4, 0.5], 0.25).map_err(|e| e.to_string())?;
    ensure((m - 0.15).abs() < 1e-15, || format!("min_bottom = {m}"))?;
    Ok(format!("30 instances / {users} users exact, CV((1,3)) = {c}, min_bottom = {m:.2}"))
}

#[test]
fn criterion_06_metric_oracles() {
    report(6, "metrics vs brute-force full sort", metric_oracles());
}

// ---- CLI helpers ----

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bifair")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run_cli(cmd: &str, cfg: &Path, out_dir: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(bin());
    c.arg(cmd)
        .arg("-c")
        .arg(cfg)
        .arg("--set")
        .arg(format!("out_dir=\"{}\"", out_dir.display()))
        .env("BIFAIR_LOG", "warn");
    for e in extra {
        c.arg("--set").arg(e);
    }
    c.output().expect("run bifair")
}

fn run_ok(cmd: &str, cfg: &Path, out_dir: &Path, extra: &[&str]) -> Result<Output, String> {
    let out = run_cli(cmd, cfg, out_dir, extra);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`bifair {cmd}` exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Median of a method/metric cell in a compare table.
fn median(table: &Value, method: &str, metric: &str) -> Result<f64, String> {
    let col = table["metrics"]
        .as_array()
        .and_then(|m| m.iter().position(|x| x == metric))
        .ok_or_else(|| format!("no metric {metric}"))?;
    table["medians"]
        .as_array()
        .and_then(|rows| rows.iter().find(|r| r["method"] == method))
        .and_then(|r| r["values"][col].as_f64())
        .ok_or_else(|| format!("no median for {method}/{metric}"))
}

// ---- 7 and 8 ----

struct Bench {
    table: Value,
    elapsed: Duration,
    genre_groups: usize,
    popularity_groups: usize,
    users: u64,
    items: u64,
    seeds: usize,
}

fn bench() -> &'static Result<Bench, String> {
    static BENCH: OnceLock<Result<Bench, String>> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = config("bench.toml");
        let start = Instant::now();
        for cmd in ["synth", "prep", "compare"] {
            run_ok(cmd, &cfg, dir.path(), &[])?;
        }
        let elapsed = start.elapsed();
        let table = read_json(&dir.path().join("compare/table.json"))?;
        let data = dir.path().join("data");
        let genre = read_json(&data.join("groups_genre.json"))?;
        let pop = read_json(&data.join("groups_popularity.json"))?;
        let meta = read_json(&data.join("meta.json"))?;
        let seeds = table["runs"]
            .as_array()
            .map(|r| r.iter().filter(|x| x["method"] == "bifair").count())
            .unwrap_or(0);
        Ok(Bench {
            genre_groups: genre["num_groups"].as_u64().unwrap_or(0) as usize,
            popularity_groups: pop["num_groups"].as_u64().unwrap_or(0) as usize,
            users: meta["num_users"].as_u64().unwrap_or(0),
            items: meta["num_items"].as_u64().unwrap_or(0),
            table,
            elapsed,
            seeds,
        })
    })
}

fn directional_fairness() -> Result<String, String> {
    let b = bench().as_ref().map_err(Clone::clone)?;
    ensure(b.genre_groups == 4 && b.popularity_groups == 2, || {
        format!("{} genre / {} popularity groups", b.genre_groups, b.popularity_groups)
    })?;
    ensure(b.seeds == 5, || format!("{} seeds", b.seeds))?;
    let cv_of = |m: &str| median(&b.table, m, "genre_cv");
    let recall_of = |m: &str| median(&b.table, m, "recall");
    let bifair = cv_of("bifair")?;
    let mut detail = format!(
        "{} users / {} items, genre CV@20 bifair {bifair:.4}",
        b.users, b.items
    );
    for base in ["plain", "reweight", "groupdro"] {
        let other = cv_of(base)?;
        detail.push_str(&format!(", {base} {other:.4}"));
        ensure(bifair < other, || format!("bifair CV {bifair:.4} not below {base} {other:.4}"))?;
    }
    let (rb, rp) = (recall_of("bifair")?, recall_of("plain")?);
    ensure(rb >= 0.95 * rp, || format!("recall {rb:.4} below 95% of plain {rp:.4}"))?;
    let secs = b.elapsed.as_secs_f64();
    ensure(secs < 900.0, || format!("benchmark took {secs:.0}s"))?;
    let pop_b = median(&b.table, "bifair", "pop_cv")?;
    let pop_p = median(&b.table, "plain", "pop_cv")?;
    Ok(format!(
        "{detail}; recall {rb:.4} vs plain {rp:.4}; popularity CV bifair {pop_b:.4} vs plain {pop_p:.4}; {secs:.0}s"
    ))
}

#[test]
fn criterion_07_directional_fairness() {
    report(7, "synthetic benchmark fairness vs baselines", directional_fairness());
}

fn joint_vs_separate() -> Result<String, String> {
    let b = bench().as_ref().map_err(Clone::clone)?;
    let joint = median(&b.table, "bifair", "genre_cv")?;
    let separate = median(&b.table, "bifair-separate", "genre_cv")?;
    ensure(joint <= separate, || format!("joint CV {joint:.4} above separate {separate:.4}"))?;
    Ok(format!("median genre CV@20 joint {joint:.4} <= separate {separate:.4}"))
}

#[test]
fn criterion_08_joint_beats_separate() {
    report(8, "joint vs two-phase schedule", joint_vs_separate());
}

// ---- 9 ----

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config("tiny.toml");
    let mut runs = Vec::new();
    for _ in 0..2 {
        for cmd in ["synth", "prep", "train", "eval"] {
            run_ok(cmd, &cfg, dir.path(), &[])?;
        }
        let history = std::fs::read(dir.path().join("checkpoint/history.jsonl")).map_err(|e| e.to_string())?;
        let report = std::fs::read(dir.path().join("report/report.json")).map_err(|e| e.to_string())?;
        runs.push((history, report));
    }
    ensure(runs[0].0 == runs[1].0, || "history.jsonl differs".into())?;
    ensure(runs[0].1 == runs[1].1, || "report.json differs".into())?;
    Ok(format!(
        "history.jsonl ({} bytes) and report.json ({} bytes) identical across runs",
        runs[0].0.len(),
        runs[0].1.len()
    ))
}

#[test]
fn criterion_09_determinism() {
    report(9, "byte-identical reruns", determinism());
}

// ---- 10 ----

fn has_keys(v: &Value, keys: &[&str], what: &str) -> Result<(), String> {
    for k in keys {
        ensure(v.get(k).is_some(), || format!("{what} lacks `{k}`"))?;
    }
    Ok(())
}

fn smoke() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config("tiny.toml");
    let start = Instant::now();
    for cmd in ["synth", "prep", "train", "eval", "compare"] {
        run_ok(cmd, &cfg, dir.path(), &[])?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("pipeline took {secs:.1}s"))?;
    let root = dir.path();

    let history = std::fs::read_to_string(root.join("checkpoint/history.jsonl")).map_err(|e| e.to_string())?;
    for line in history.lines() {
        let rec: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        has_keys(&rec, &["phase", "epoch", "train_loss", "group_losses", "val_recall", "improved"], "history record")?;
    }
    let rep = read_json(&root.join("report/report.json"))?;
    has_keys(&rep, &["config", "checkpoint", "k", "overall", "groupings"], "report.json")?;
    has_keys(&rep["overall"], &["recall", "ndcg", "hr"], "report.overall")?;
    let groupings = rep["groupings"].as_array().ok_or("groupings is not a list")?;
    ensure(groupings.len() == 2, || format!("{} groupings", groupings.len()))?;
    for g in groupings {
        has_keys(g, &["name", "labels", "utilities", "cv", "min_bottom", "epsilon_if"], "grouping report")?;
    }
    let table = read_json(&root.join("compare/table.json"))?;
    has_keys(&table, &["metrics", "runs", "medians"], "table.json")?;
    let csv = std::fs::read_to_string(root.join("compare/table.csv")).map_err(|e| e.to_string())?;
    ensure(csv.starts_with("method,seed,recall"), || "table.csv header".into())?;

    let bad = run_cli("train", &cfg, root, &["train.inner_lr=-0.1"]);
    ensure(bad.status.code() == Some(2), || format!("negative lr exited with {:?}", bad.status.code()))?;
    let err: Value = serde_json::from_slice(&bad.stderr).map_err(|e| format!("error output is not JSON: {e}"))?;
    has_keys(&err, &["error", "kind", "code"], "error JSON")?;
    Ok(format!("synth/prep/train/eval/compare in {secs:.1}s, outputs valid, bad config exits 2"))
}

#[test]
fn criterion_10_end_to_end_smoke() {
    report(10, "tiny pipeline smoke run", smoke());
}
