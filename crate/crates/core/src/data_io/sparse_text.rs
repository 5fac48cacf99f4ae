//! Reader for the `<label> <index>:<value> ...` sparse text format.
//!
//! Indices are 1-based and strictly increasing within a line. Blank lines and
//! anything after `#` are ignored. The feature dimension is the largest index seen.

use std::io::BufRead;
use std::path::Path;

use super::{Dataset, DatasetMeta, FeatureMatrix};
use crate::error::{KlrError, Result};

pub fn read_sparse_file(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_sparse_text(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn parse_sparse_text(reader: impl BufRead, source: &str) -> Result<Dataset> {
    let mut labels: Vec<f64> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut d = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| KlrError::Parse { line: lineno, msg };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("bad label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(err(format!("non-finite label {label_tok:?}")));
        }
        let mut row = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected index:value, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(format!("bad feature index in {tok:?}")))?;
            if idx == 0 {
                return Err(err(format!("feature indices are 1-based, got {tok:?}")));
            }
            if idx <= last {
                return Err(err(format!(
                    "feature index {idx} does not increase (previous {last})"
                )));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("bad feature value in {tok:?}")))?;
            if !val.is_finite() {
                return Err(err(format!("non-finite feature value in {tok:?}")));
            }
            last = idx;
            row.push((idx, val));
        }
        d = d.max(last);
        labels.push(label);
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(KlrError::Validation(format!("{source}: no samples")));
    }

    let mut label_values = labels.clone();
    label_values.sort_by(f64::total_cmp);
    label_values.dedup();
    let y = labels
        .iter()
        .map(|l| {
            label_values
                .binary_search_by(|v| v.total_cmp(l))
                .expect("label collected above")
        })
        .collect();

    let mut data = vec![0.0; rows.len() * d];
    for (i, row) in rows.iter().enumerate() {
        for &(idx, val) in row {
            data[i * d + idx - 1] = val;
        }
    }
    Dataset::new(
        FeatureMatrix::new(rows.len(), d, data)?,
        y,
        DatasetMeta {
            source: source.to_string(),
            label_values,
        },
    )
}
