//! All-ranking evaluation, group utilities and dispersion metrics.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, GroupAssignment};
use crate::embed::{user_representation, SemanticMatrix};
use crate::recmodel::{ProjectorParams, ScoreConfig};
use crate::{Error, Result};

/// Which of a user's known items are excluded from ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    None,
    /// Validation: hide training items.
    Train,
    /// Test: hide training and validation items.
    TrainVal,
}

/// Top-K item lists, one per user.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub k: usize,
    pub lists: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Recall,
    Ndcg,
    Hr,
}

/// Indices of the `k` largest scores among unmasked items; ties go to the
/// lower index.
pub fn top_k(scores: &[f64], k: usize, masked: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !masked(i)).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < cand.len() {
        if k == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand
}

/// Scores every item for every user and keeps the top `k` after masking.
/// User vectors are pooled from training histories.
pub fn rank_topk(
    theta: &ProjectorParams,
    z: &SemanticMatrix,
    ds: &Dataset,
    cfg: &ScoreConfig,
    k: usize,
    mask: MaskPolicy,
) -> Result<RankingResult> {
    if !z.is_finite() || theta.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model parameters".into()));
    }
    let items: Vec<Vec<f64>> = (0..z.num_items())
        .map(|i| theta.project(z.row(i)))
        .collect::<Result<_>>()?;
    let mut masked = vec![false; z.num_items()];
    let mut lists = Vec::with_capacity(ds.num_users);
    let mut scores = vec![0.0; z.num_items()];
    for u in 0..ds.num_users {
        if ds.train[u].is_empty() {
            lists.push(Vec::new());
            continue;
        }
        let eu = theta.project(&user_representation(z, &ds.train[u], cfg.pooling)?)?;
        for (s, ei) in scores.iter_mut().zip(&items) {
            *s = cfg.score(&eu, ei);
        }
        let hidden: Vec<&[usize]> = match mask {
            MaskPolicy::None => vec![],
            MaskPolicy::Train => vec![&ds.train[u]],
            MaskPolicy::TrainVal => vec![&ds.train[u], &ds.val[u]],
        };
        for &i in hidden.iter().flat_map(|h| h.iter()) {
            masked[i] = true;
        }
        lists.push(top_k(&scores, k, |i| masked[i]));
        for &i in hidden.iter().flat_map(|h| h.iter()) {
            masked[i] = false;
        }
    }
    Ok(RankingResult { k, lists })
}

fn contains(sorted: &[usize], x: usize) -> bool {
    sorted.binary_search(&x).is_ok()
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn recall_at_k(topk: &[usize], relevant: &[usize]) -> f64 {
    let rel = sorted(relevant);
    if rel.is_empty() {
        return 0.0;
    }
    topk.iter().filter(|&&i| contains(&rel, i)).count() as f64 / rel.len() as f64
}

/// Binary-gain NDCG; the ideal DCG places `min(K, |relevant|)` hits first.
pub fn ndcg_at_k(topk: &[usize], relevant: &[usize], k: usize) -> f64 {
    let rel = sorted(relevant);
    if rel.is_empty() {
        return 0.0;
    }
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| contains(&rel, i))
        .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(rel.len())).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
    dcg / idcg
}

pub fn hr_at_k(topk: &[usize], relevant: &[usize]) -> f64 {
    let rel = sorted(relevant);
    if topk.iter().any(|&i| contains(&rel, i)) {
        1.0
    } else {
        0.0
    }
}

pub fn metric_at_k(metric: Metric, topk: &[usize], relevant: &[usize], k: usize) -> f64 {
    match metric {
        Metric::Recall => recall_at_k(topk, relevant),
        Metric::Ndcg => ndcg_at_k(topk, relevant, k),
        Metric::Hr => hr_at_k(topk, relevant),
    }
}

/// Number of recommended items that are relevant.
pub fn hits(topk: &[usize], relevant: &[usize]) -> usize {
    let rel = sorted(relevant);
    topk.iter().filter(|&&i| contains(&rel, i)).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub hr: f64,
    /// Users with a nonempty relevant set.
    pub users: usize,
}

/// Dataset-level metrics averaged over users with relevant items.
pub fn overall_metrics(ranking: &RankingResult, relevant: &[Vec<usize>]) -> OverallMetrics {
    let mut acc = [0.0; 3];
    let mut users = 0;
    for (list, rel) in ranking.lists.iter().zip(relevant) {
        if rel.is_empty() {
            continue;
        }
        users += 1;
        acc[0] += recall_at_k(list, rel);
        acc[1] += ndcg_at_k(list, rel, ranking.k);
        acc[2] += hr_at_k(list, rel);
    }
    let n = users.max(1) as f64;
    OverallMetrics {
        recall: acc[0] / n,
        ndcg: acc[1] / n,
        hr: acc[2] / n,
        users,
    }
}

/// Average of the group-restricted metric for group `n`.
///
/// For each user the relevant set is cut down to items of group `n` and only
/// recommended items of that group can hit; ranks are positions in the full
/// list. Users whose restricted relevant set is empty are skipped, or count
/// as zero when `strict` is set (users with no relevant items at all are
/// always skipped). `None` when no user qualifies.
pub fn group_utility(
    ranking: &RankingResult,
    relevant: &[Vec<usize>],
    groups: &GroupAssignment,
    n: usize,
    metric: Metric,
    strict: bool,
) -> Option<f64> {
    let mut total = 0.0;
    let mut users = 0usize;
    for (list, rel) in ranking.lists.iter().zip(relevant) {
        if rel.is_empty() {
            continue;
        }
        let restricted: Vec<usize> = rel.iter().copied().filter(|&i| groups.group_of[i] == n).collect();
        if restricted.is_empty() {
            if strict {
                users += 1;
            }
            continue;
        }
        users += 1;
        total += metric_at_k(metric, list, &restricted, ranking.k);
    }
    (users > 0).then(|| total / users as f64)
}

/// Per-group utilities; undefined groups are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityVector {
    pub values: Vec<Option<f64>>,
    pub metric: Metric,
    pub k: usize,
}

impl UtilityVector {
    pub fn defined(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

pub fn utility_vector(
    ranking: &RankingResult,
    relevant: &[Vec<usize>],
    groups: &GroupAssignment,
    metric: Metric,
    strict: bool,
) -> UtilityVector {
    let values = (0..groups.num_groups)
        .map(|n| {
            let u = group_utility(ranking, relevant, groups, n, metric, strict);
            if u.is_none() {
                log::warn!("group {n} ({}) has no evaluable users", groups.labels[n]);
            }
            u
        })
        .collect();
    UtilityVector {
        values,
        metric,
        k: ranking.k,
    }
}

/// Population standard deviation over mean.
pub fn cv(utilities: &[f64]) -> Result<f64> {
    if utilities.len() < 2 {
        return Err(Error::Config("CV needs at least two defined utilities".into()));
    }
    let n = utilities.len() as f64;
    let mean = utilities.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Config("CV undefined: mean utility is 0".into()));
    }
    if utilities.iter().all(|u| *u == utilities[0]) {
        return Ok(0.0);
    }
    let var = utilities.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Mean of the lowest `ceil(fraction * N)` utilities.
pub fn min_bottom(utilities: &[f64], fraction: f64) -> Result<f64> {
    if utilities.is_empty() {
        return Err(Error::Config("MIN needs at least one defined utility".into()));
    }
    let mut v = utilities.to_vec();
    v.sort_by(f64::total_cmp);
    let take = ((fraction * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
    Ok(v[..take].iter().sum::<f64>() / take as f64)
}

/// Every pairwise utility gap is at most `eps`.
pub fn epsilon_if(utilities: &[f64], eps: f64) -> bool {
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = utilities.iter().copied().fold(f64::INFINITY, f64::min);
    max - min <= eps + 1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub name: String,
    pub labels: Vec<String>,
    pub utilities: UtilityVector,
    pub cv: Option<f64>,
    pub min_bottom: Option<f64>,
    /// `(eps, holds)` for every requested tolerance.
    pub epsilon_if: Vec<(f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub k: usize,
    pub metric: Metric,
    pub strict: bool,
    pub min_fraction: f64,
    pub epsilons: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 20,
            metric: Metric::Recall,
            strict: false,
            min_fraction: 0.25,
            epsilons: vec![0.01, 0.05, 0.1],
        }
    }
}

pub fn grouping_report(
    name: &str,
    ranking: &RankingResult,
    relevant: &[Vec<usize>],
    groups: &GroupAssignment,
    opts: &EvalOptions,
) -> GroupingReport {
    let utilities = utility_vector(ranking, relevant, groups, opts.metric, opts.strict);
    let defined = utilities.defined();
    let cv = match cv(&defined) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{name}: {e}");
            None
        }
    };
    let epsilon_if = if defined.len() >= 2 {
        opts.epsilons.iter().map(|&e| (e, epsilon_if(&defined, e))).collect()
    } else {
        Vec::new()
    };
    GroupingReport {
        name: name.to_string(),
        labels: groups.labels.clone(),
        cv,
        min_bottom: min_bottom(&defined, opts.min_fraction).ok(),
        epsilon_if,
        utilities,
    }
}
