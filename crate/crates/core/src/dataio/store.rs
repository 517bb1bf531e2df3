//! On-disk layout of a preprocessed dataset.
//!
//! ```text
//! meta.json               counts, seed, preprocessing config
//! split_{train,val,test}.csv   user_idx,item_idx rows
//! user_map.csv, item_map.csv   key,idx rows
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GroupAssignment, PreprocessConfig};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_users: usize,
    num_items: usize,
    num_train: usize,
    num_val: usize,
    num_test: usize,
    seed: u64,
    config: Option<PreprocessConfig>,
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset, cfg: Option<&PreprocessConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        num_users: ds.num_users,
        num_items: ds.num_items,
        num_train: ds.num_interactions(super::Split::Train),
        num_val: ds.num_interactions(super::Split::Val),
        num_test: ds.num_interactions(super::Split::Test),
        seed: ds.seed,
        config: cfg.cloned(),
    };
    write_text(&dir.join("meta.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    for (name, lists) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let mut out = String::from("user_idx,item_idx\n");
        for (u, items) in lists.iter().enumerate() {
            for i in items {
                out.push_str(&format!("{u},{i}\n"));
            }
        }
        write_text(&dir.join(format!("split_{name}.csv")), &out)?;
    }
    for (name, keys) in [("user_map", &ds.user_keys), ("item_map", &ds.item_keys)] {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "idx"])?;
        for (idx, key) in keys.iter().enumerate() {
            w.write_record([key.as_str(), &idx.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join(format!("{name}.csv")), bytes).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_str(&read_text(&dir.join("meta.json"))?)?;
    let read_split = |name: &str| -> Result<Vec<Vec<usize>>> {
        let path = dir.join(format!("split_{name}.csv"));
        let mut lists = vec![Vec::new(); meta.num_users];
        let text = read_text(&path)?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for row in reader.records() {
            let row = row?;
            let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{}: {e}", path.display())));
            let (u, i) = (parse(&row[0])?, parse(&row[1])?);
            if u >= meta.num_users || i >= meta.num_items {
                return Err(Error::Parse(format!("{}: index ({u}, {i}) out of range", path.display())));
            }
            lists[u].push(i);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        Ok(lists)
    };
    let read_keys = |name: &str, expected: usize| -> Result<Vec<String>> {
        let path = dir.join(format!("{name}.csv"));
        let text = read_text(&path)?;
        let mut keys = vec![String::new(); expected];
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut seen = 0;
        for row in reader.records() {
            let row = row?;
            let idx: usize = row[1]
                .parse()
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            if idx >= expected {
                return Err(Error::Parse(format!("{}: index {idx} out of range", path.display())));
            }
            keys[idx] = row[0].to_string();
            seen += 1;
        }
        if seen != expected {
            return Err(Error::RowCount { expected, found: seen });
        }
        Ok(keys)
    };
    Ok(Dataset {
        num_users: meta.num_users,
        num_items: meta.num_items,
        train: read_split("train")?,
        val: read_split("val")?,
        test: read_split("test")?,
        user_keys: read_keys("user_map", meta.num_users)?,
        item_keys: read_keys("item_map", meta.num_items)?,
        seed: meta.seed,
    })
}

pub fn write_groups(path: impl AsRef<Path>, groups: &GroupAssignment) -> Result<()> {
    let path = path.as_ref();
    write_text(path, &(serde_json::to_string(groups)? + "\n"))
}

pub fn read_groups(path: impl AsRef<Path>) -> Result<GroupAssignment> {
    let path = path.as_ref();
    let groups: GroupAssignment = serde_json::from_str(&read_text(path)?)?;
    groups.validate()?;
    Ok(groups)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
