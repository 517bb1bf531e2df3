use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{Interaction, RawInteractions};
use crate::{Error, Result};

/// Column layout of an interactions file: `user,item,rating[,timestamp]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionFormat {
    pub delimiter: u8,
}

impl Default for InteractionFormat {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

impl InteractionFormat {
    pub fn tab() -> Self {
        Self { delimiter: b'\t' }
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub raw: RawInteractions,
    /// Lines that could not be parsed (the header line is not counted).
    pub malformed: usize,
    /// Records folded into an earlier record for the same (user, item).
    pub duplicates: usize,
    pub had_header: bool,
}

pub fn load_interactions(path: impl AsRef<Path>, format: InteractionFormat) -> Result<LoadReport> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let report = parse_interactions(&text, format)?;
    if report.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), report.malformed);
    }
    if report.duplicates > 0 {
        log::warn!(
            "{}: {} duplicate (user, item) records collapsed to their max rating",
            path.display(),
            report.duplicates
        );
    }
    Ok(report)
}

/// Parses delimiter-separated interactions.
///
/// A first line whose rating field is not numeric is taken as a header.
/// Duplicate (user, item) records keep the maximum rating.
pub fn parse_interactions(text: &str, format: InteractionFormat) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records: Vec<Interaction> = Vec::new();
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    let mut malformed = 0usize;
    let mut duplicates = 0usize;
    let mut had_header = false;

    for (line_no, row) in reader.records().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        if row.iter().all(str::is_empty) {
            continue;
        }
        if line_no == 0 && row.len() >= 3 && row[2].parse::<f64>().is_err() {
            had_header = true;
            continue;
        }
        let Some(rec) = parse_record(&row) else {
            malformed += 1;
            continue;
        };
        match slot.get(&(rec.user.clone(), rec.item.clone())) {
            Some(&at) => {
                duplicates += 1;
                if rec.rating > records[at].rating {
                    records[at] = rec;
                }
            }
            None => {
                slot.insert((rec.user.clone(), rec.item.clone()), records.len());
                records.push(rec);
            }
        }
    }

    if records.is_empty() {
        return Err(Error::ZeroRecords);
    }
    Ok(LoadReport {
        raw: RawInteractions { records },
        malformed,
        duplicates,
        had_header,
    })
}

fn parse_record(row: &csv::StringRecord) -> Option<Interaction> {
    if !(3..=4).contains(&row.len()) {
        return None;
    }
    let user = row[0].to_string();
    let item = row[1].to_string();
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let rating: f64 = row[2].parse().ok().filter(|r: &f64| r.is_finite())?;
    let timestamp = match row.get(3) {
        Some(ts) if !ts.is_empty() => Some(ts.parse::<i64>().ok()?),
        _ => None,
    };
    Some(Interaction {
        user,
        item,
        rating,
        timestamp,
    })
}
