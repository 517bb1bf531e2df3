use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{Error, Result};

pub const UNKNOWN_LABEL: &str = "unknown";

/// A partition of items into disjoint, nonempty groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub num_groups: usize,
    pub group_of: Vec<usize>,
    pub labels: Vec<String>,
}

impl GroupAssignment {
    pub fn new(group_of: Vec<usize>, labels: Vec<String>) -> Result<Self> {
        let ga = Self {
            num_groups: labels.len(),
            group_of,
            labels,
        };
        ga.validate()?;
        Ok(ga)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.num_groups {
            return Err(Error::Shape(format!(
                "{} labels for {} groups",
                self.labels.len(),
                self.num_groups
            )));
        }
        let sizes = self.sizes_checked()?;
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyGroup(empty));
        }
        Ok(())
    }

    fn sizes_checked(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![0usize; self.num_groups];
        for (item, &g) in self.group_of.iter().enumerate() {
            if g >= self.num_groups {
                return Err(Error::Shape(format!("item {item} assigned to group {g} of {}", self.num_groups)));
            }
            sizes[g] += 1;
        }
        Ok(sizes)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_groups];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter(|&(_, &g)| g == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_items(&self) -> usize {
        self.group_of.len()
    }
}

/// Head/tail split by training popularity.
///
/// Items are ranked by descending train count, ties by ascending index, and
/// the first `ceil(top_fraction * num_items)` form group 0.
pub fn assign_popularity_groups(ds: &Dataset, top_fraction: f64) -> Result<GroupAssignment> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::Config("top_fraction must be in (0, 1)".into()));
    }
    let counts = ds.train_item_counts();
    let mut order: Vec<usize> = (0..ds.num_items).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let head = ((top_fraction * ds.num_items as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut group_of = vec![1usize; ds.num_items];
    for &i in order.iter().take(head) {
        group_of[i] = 0;
    }
    GroupAssignment::new(group_of, vec!["head".into(), "tail".into()])
}

/// One group per distinct label, numbered by first appearance in item-index
/// order. Items without a label fall into [`UNKNOWN_LABEL`].
pub fn assign_attribute_groups(metadata: &HashMap<String, String>, ds: &Dataset) -> Result<GroupAssignment> {
    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut group_of = Vec::with_capacity(ds.num_items);
    let mut missing = 0usize;
    for key in &ds.item_keys {
        let label = match metadata.get(key) {
            Some(l) => l.clone(),
            None => {
                missing += 1;
                UNKNOWN_LABEL.to_string()
            }
        };
        let g = *index.entry(label.clone()).or_insert_with(|| {
            labels.push(label);
            labels.len() - 1
        });
        group_of.push(g);
    }
    if missing > 0 {
        log::warn!("{missing} items have no metadata label; assigned to \"{UNKNOWN_LABEL}\"");
    }
    if labels.len() == 1 {
        log::warn!("every item shares one label; group fairness metrics are degenerate");
    }
    GroupAssignment::new(group_of, labels)
}

/// Reads an `item,label[,title]` file. When the label holds several
/// `|`-separated values only the first is kept.
pub fn load_metadata(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_metadata(&text)
}

/// `(item, label)` rows of a metadata file in file order, labels cleaned as
/// in [`load_metadata`].
pub fn load_metadata_rows(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_metadata_rows(&text)
}

pub(crate) fn parse_metadata(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (item, label) in parse_metadata_rows(text)? {
        out.entry(item).or_insert(label);
    }
    Ok(out)
}

fn parse_metadata_rows(text: &str) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line_no, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() < 2 {
            return Err(Error::Parse(format!("metadata line {}: expected item,label[,title]", line_no + 1)));
        }
        if line_no == 0 && row[0].eq_ignore_ascii_case("item") {
            continue;
        }
        let label = row[1].split('|').next().unwrap_or("").trim();
        let label = if label.is_empty() { UNKNOWN_LABEL } else { label };
        out.push((row[0].to_string(), label.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset_with_counts(counts: &[usize]) -> Dataset {
        let num_users = counts.iter().copied().max().unwrap_or(0).max(1);
        let mut train = vec![Vec::new(); num_users];
        for (item, &c) in counts.iter().enumerate() {
            for u in train.iter_mut().take(c) {
                u.push(item);
            }
        }
        Dataset {
            num_users,
            num_items: counts.len(),
            val: vec![Vec::new(); num_users],
            test: vec![Vec::new(); num_users],
            train,
            user_keys: (0..num_users).map(|u| format!("u{u}")).collect(),
            item_keys: (0..counts.len()).map(|i| format!("i{i}")).collect(),
            seed: 0,
        }
    }

    #[test]
    fn most_popular_item_is_head() {
        let ds = dataset_with_counts(&[9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        let g = assign_popularity_groups(&ds, 0.1).unwrap();
        assert_eq!(g.members(0), vec![0]);
        assert_eq!(g.num_groups, 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let ds = dataset_with_counts(&[3; 10]);
        let g = assign_popularity_groups(&ds, 0.1).unwrap();
        assert_eq!(g.members(0), vec![0]);
    }

    #[test]
    fn head_size_uses_ceiling() {
        let ds = dataset_with_counts(&[1, 2, 3, 4, 5, 6, 7]);
        let g = assign_popularity_groups(&ds, 0.1).unwrap();
        assert_eq!(g.members(0), vec![6]);
        let g = assign_popularity_groups(&ds, 0.3).unwrap();
        assert_eq!(g.sizes(), vec![3, 4]);
    }

    #[test]
    fn attribute_groups_follow_first_appearance() {
        let mut ds = dataset_with_counts(&[1, 1, 1]);
        ds.item_keys = vec!["a".into(), "b".into(), "c".into()];
        let meta: HashMap<String, String> = [("a", "x"), ("b", "y"), ("c", "x")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let g = assign_attribute_groups(&meta, &ds).unwrap();
        assert_eq!(g.num_groups, 2);
        assert_eq!(g.group_of, vec![0, 1, 0]);
        assert_eq!(g.labels, vec!["x", "y"]);
    }

    #[test]
    fn single_label_gives_one_group() {
        let ds = dataset_with_counts(&[1, 1]);
        let meta: HashMap<String, String> = ds.item_keys.iter().map(|k| (k.clone(), "z".to_string())).collect();
        assert_eq!(assign_attribute_groups(&meta, &ds).unwrap().num_groups, 1);
    }

    #[test]
    fn missing_metadata_maps_to_unknown() {
        let ds = dataset_with_counts(&[1, 1]);
        let meta: HashMap<String, String> = [("i0".to_string(), "x".to_string())].into_iter().collect();
        let g = assign_attribute_groups(&meta, &ds).unwrap();
        assert_eq!(g.labels, vec!["x", UNKNOWN_LABEL]);
        assert_eq!(g.group_of, vec![0, 1]);
    }

    #[test]
    fn metadata_keeps_first_of_several_labels() {
        let meta = parse_metadata("item,label,title\na,drama|comedy,Some Title\nb,,\n").unwrap();
        assert_eq!(meta["a"], "drama");
        assert_eq!(meta["b"], UNKNOWN_LABEL);
    }
}
