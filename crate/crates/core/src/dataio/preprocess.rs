use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{natural_key_cmp, Dataset, RawInteractions};
use crate::seeds::{self, Role};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Uniform random per-user split.
    #[default]
    Random,
    /// Per-user split by ascending timestamp (records without one sort last).
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_rating: f64,
    pub min_user_interactions: usize,
    /// train : val : test
    pub split_ratio: [f64; 3],
    pub top_pop_fraction: f64,
    pub seed: u64,
    pub split_mode: SplitMode,
    /// Repeat user filtering and item pruning until nothing changes.
    pub filter_to_fixpoint: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_rating: 3.0,
            min_user_interactions: 20,
            split_ratio: [4.0, 3.0, 3.0],
            top_pop_fraction: 0.1,
            seed: 0,
            split_mode: SplitMode::Random,
            filter_to_fixpoint: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.min_rating.is_finite() {
            return Err(Error::Config("min_rating must be finite".into()));
        }
        if self.split_ratio.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("split_ratio entries must be > 0".into()));
        }
        if !(self.top_pop_fraction > 0.0 && self.top_pop_fraction <= 1.0) {
            return Err(Error::Config("top_pop_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// (train, val, test) sizes for a user with `n` interactions; val and test
    /// are rounded down and train takes the remainder.
    pub fn split_sizes(&self, n: usize) -> (usize, usize, usize) {
        let total: f64 = self.split_ratio.iter().sum();
        let share = |r: f64| ((n as f64 * r / total) + 1e-9).floor() as usize;
        let val = share(self.split_ratio[1]);
        let test = share(self.split_ratio[2]);
        (n - val - test, val, test)
    }
}

struct UserRecords {
    /// (item key, timestamp), sorted by item key.
    items: Vec<(String, Option<i64>)>,
}

/// Runs the fixed pipeline: rating filter, user-activity filter, per-user
/// split, pruning of held-out items unseen in training, dense re-indexing.
pub fn preprocess(raw: &RawInteractions, cfg: &PreprocessConfig) -> Result<Dataset> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::ZeroRecords);
    }

    // (1) rating filter, collapsing duplicates to their best rating.
    let mut best: HashMap<(&str, &str), (f64, Option<i64>)> = HashMap::new();
    for r in &raw.records {
        let entry = best.entry((r.user.as_str(), r.item.as_str())).or_insert((r.rating, r.timestamp));
        if r.rating > entry.0 {
            *entry = (r.rating, r.timestamp);
        }
    }
    let mut by_user: BTreeMap<NaturalKey, UserRecords> = BTreeMap::new();
    for ((user, item), (rating, ts)) in best {
        if rating < cfg.min_rating {
            continue;
        }
        by_user
            .entry(NaturalKey(user.to_string()))
            .or_insert_with(|| UserRecords { items: Vec::new() })
            .items
            .push((item.to_string(), ts));
    }
    for recs in by_user.values_mut() {
        recs.items.sort_by(|a, b| natural_key_cmp(&a.0, &b.0));
    }

    // (2) user activity filter.
    by_user.retain(|_, recs| recs.items.len() >= cfg.min_user_interactions);
    if by_user.is_empty() {
        return Err(Error::AllUsersFiltered);
    }

    // (3) per-user split.
    let mut rng = seeds::rng(cfg.seed, Role::Split);
    type Splits = (Vec<String>, Vec<String>, Vec<String>);
    let mut splits: BTreeMap<NaturalKey, Splits> = BTreeMap::new();
    for (user, mut recs) in by_user {
        match cfg.split_mode {
            SplitMode::Random => recs.items.shuffle(&mut rng),
            SplitMode::Temporal => recs
                .items
                .sort_by(|a, b| match (a.1, b.1) {
                    (Some(x), Some(y)) => x.cmp(&y),
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (None, None) => std::cmp::Ordering::Equal,
                }
                .then_with(|| natural_key_cmp(&a.0, &b.0))),
        }
        let (n_train, n_val, _) = cfg.split_sizes(recs.items.len());
        let keys: Vec<String> = recs.items.into_iter().map(|(k, _)| k).collect();
        let train = keys[..n_train].to_vec();
        let val = keys[n_train..n_train + n_val].to_vec();
        let test = keys[n_train + n_val..].to_vec();
        splits.insert(user, (train, val, test));
    }

    // (4) prune held-out items never seen in training.
    loop {
        let seen: BTreeSet<&str> = splits
            .values()
            .flat_map(|(train, _, _)| train.iter().map(String::as_str))
            .collect();
        let mut pruned: BTreeMap<NaturalKey, Splits> = BTreeMap::new();
        for (user, (train, val, test)) in &splits {
            let keep = |v: &Vec<String>| -> Vec<String> {
                v.iter().filter(|k| seen.contains(k.as_str())).cloned().collect()
            };
            pruned.insert(user.clone(), (train.clone(), keep(val), keep(test)));
        }
        if !cfg.filter_to_fixpoint {
            splits = pruned;
            break;
        }
        let before = pruned.len();
        let total_before: usize = splits.values().map(|(a, b, c)| a.len() + b.len() + c.len()).sum();
        pruned.retain(|_, (a, b, c)| a.len() + b.len() + c.len() >= cfg.min_user_interactions);
        let total_after: usize = pruned.values().map(|(a, b, c)| a.len() + b.len() + c.len()).sum();
        let stable = pruned.len() == before && total_after == total_before;
        splits = pruned;
        if splits.is_empty() {
            return Err(Error::AllUsersFiltered);
        }
        if stable {
            break;
        }
    }

    // (5) dense id maps.
    let user_keys: Vec<String> = splits.keys().map(|k| k.0.clone()).collect();
    let mut item_keys: Vec<String> = splits
        .values()
        .flat_map(|(train, _, _)| train.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    item_keys.sort_by(|a, b| natural_key_cmp(a, b));
    let item_index: HashMap<&str, usize> = item_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();

    let index_list = |keys: &[String]| -> Vec<usize> {
        let mut v: Vec<usize> = keys.iter().map(|k| item_index[k.as_str()]).collect();
        v.sort_unstable();
        v
    };
    let mut train = Vec::with_capacity(user_keys.len());
    let mut val = Vec::with_capacity(user_keys.len());
    let mut test = Vec::with_capacity(user_keys.len());
    for (tr, va, te) in splits.values() {
        train.push(index_list(tr));
        val.push(index_list(va));
        test.push(index_list(te));
    }

    Ok(Dataset {
        num_users: user_keys.len(),
        num_items: item_keys.len(),
        train,
        val,
        test,
        user_keys,
        item_keys,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NaturalKey(String);

impl Ord for NaturalKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        natural_key_cmp(&self.0, &other.0)
    }
}

impl PartialOrd for NaturalKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
