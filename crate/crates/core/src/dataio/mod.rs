//! Interaction ingestion, preprocessing and item grouping.

mod groups;
mod load;
mod preprocess;
mod store;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use groups::{
    assign_attribute_groups, assign_popularity_groups, load_metadata, load_metadata_rows, GroupAssignment, UNKNOWN_LABEL,
};
pub use load::{load_interactions, parse_interactions, InteractionFormat, LoadReport};
pub use preprocess::{preprocess, PreprocessConfig, SplitMode};
pub use store::{read_dataset, read_groups, write_dataset, write_groups};

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawInteractions {
    pub records: Vec<Interaction>,
}

impl RawInteractions {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Which held-out split a computation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Preprocessed interactions with dense indices.
///
/// `train`, `val` and `test` hold one sorted item list per user.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    /// Dense user index -> external key.
    pub user_keys: Vec<String>,
    /// Dense item index -> external key.
    pub item_keys: Vec<String>,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Vec<usize>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_interactions(&self, split: Split) -> usize {
        self.split(split).iter().map(Vec::len).sum()
    }

    /// Interaction count of every item in the training split.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_items];
        for items in &self.train {
            for &i in items {
                counts[i] += 1;
            }
        }
        counts
    }

    /// All training (user, item) pairs in user-major order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.item_keys.iter().position(|k| k == key)
    }
}

/// Orders keys numerically when both parse as integers, otherwise
/// lexicographically; numeric keys sort before the rest.
pub(crate) fn natural_key_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}
