//! `user,item,value` triples on disk.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::observation::{Observation, ObservationSet};

const HEADER: [&str; 3] = ["user", "item", "value"];

/// An ingested triples file: observations over densely re-indexed IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub observations: ObservationSet,
    /// `user_ids[i]` is the original ID of row `i`.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl Ingested {
    /// Places rows and columns at the integer value of their IDs instead of
    /// first-appearance order, for files whose IDs are dense indices (such as
    /// those written by [`export_triples`] without ID lists).
    pub fn aligned_numeric(&self, n_users: usize, n_items: usize) -> Result<ObservationSet> {
        let parse = |ids: &[String], bound: usize, what: &str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| match id.parse::<usize>() {
                    Ok(k) if k < bound => Ok(k),
                    _ => Err(Error::invalid(format!("{what} id `{id}` is not an index below {bound}"))),
                })
                .collect()
        };
        let rows = parse(&self.user_ids, n_users, "user")?;
        let cols = parse(&self.item_ids, n_items, "item")?;
        let entries = self
            .observations
            .entries()
            .iter()
            .map(|e| Observation {
                row: rows[e.row],
                col: cols[e.col],
                value: e.value,
            })
            .collect();
        ObservationSet::new(n_users, n_items, entries)
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, id: &str) -> usize {
    if let Some(&k) = index.get(id) {
        return k;
    }
    let k = ids.len();
    ids.push(id.to_owned());
    index.insert(id.to_owned(), k);
    k
}

/// Reads triples from any reader; see [`ingest_triples`].
pub fn read_triples<R: Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(parse_error(1, "empty file")),
        Some(r) => r?,
    };
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_error(
            1,
            format!("expected header `user,item,value`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let (mut user_ids, mut item_ids) = (Vec::new(), Vec::new());
    let (mut user_index, mut item_index) = (HashMap::new(), HashMap::new());
    let mut first_line: HashMap<(usize, usize), u64> = HashMap::new();
    let mut entries = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 3 {
            return Err(parse_error(line, format!("expected 3 fields, found {}", record.len())));
        }
        let value: f64 = record[2]
            .parse()
            .map_err(|_| parse_error(line, format!("value `{}` is not a number", &record[2])))?;
        if !value.is_finite() {
            return Err(parse_error(line, format!("value `{}` is not finite", &record[2])));
        }
        if record[0].is_empty() || record[1].is_empty() {
            return Err(parse_error(line, "empty user or item id"));
        }
        let row = intern(&mut user_ids, &mut user_index, &record[0]);
        let col = intern(&mut item_ids, &mut item_index, &record[1]);
        if let Some(prev) = first_line.insert((row, col), line) {
            return Err(parse_error(
                line,
                format!("duplicate pair ({}, {}), first seen on line {prev}", &record[0], &record[1]),
            ));
        }
        entries.push(Observation { row, col, value });
    }
    if entries.is_empty() {
        return Err(parse_error(1, "no data rows"));
    }
    let observations = ObservationSet::new(user_ids.len(), item_ids.len(), entries)?;
    Ok(Ingested {
        observations,
        user_ids,
        item_ids,
    })
}

/// Reads a CSV with header `user,item,value`. IDs are arbitrary strings,
/// re-indexed densely in order of first appearance.
pub fn ingest_triples(path: impl AsRef<Path>) -> Result<Ingested> {
    read_triples(File::open(path)?)
}

/// Writes every observed cell as one row, in row-major order. Without ID
/// lists, rows and columns are written as their integer indices.
pub fn write_triples<W: Write>(
    writer: W,
    obs: &ObservationSet,
    user_ids: Option<&[String]>,
    item_ids: Option<&[String]>,
) -> Result<()> {
    check_ids(user_ids, obs.n_users(), "user")?;
    check_ids(item_ids, obs.n_items(), "item")?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    let label = |ids: Option<&[String]>, k: usize| ids.map_or_else(|| k.to_string(), |ids| ids[k].clone());
    for e in obs.entries() {
        w.write_record([label(user_ids, e.row), label(item_ids, e.col), e.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn check_ids(ids: Option<&[String]>, expected: usize, what: &str) -> Result<()> {
    match ids {
        Some(ids) if ids.len() != expected => Err(Error::DimensionMismatch {
            expected: format!("{expected} {what} ids"),
            got: ids.len().to_string(),
        }),
        _ => Ok(()),
    }
}

pub fn export_triples(
    path: impl AsRef<Path>,
    obs: &ObservationSet,
    user_ids: Option<&[String]>,
    item_ids: Option<&[String]>,
) -> Result<()> {
    write_triples(File::create(path)?, obs, user_ids, item_ids)
}
