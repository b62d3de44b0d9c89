//! JSONL datasets: one `{"features": [...], "label": n}` object per line, or
//! `{"id": n, "labels": {"<class>": count}}` for multi-label data.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use hyperproto::{Dataset, Item, MultiLabelDataset, MultiLabelItem};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, HarnessError, Result};

fn parse_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map(|v| (i + 1, v))
                .map_err(|e| HarnessError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("dataset rows serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let rows: Vec<(usize, Item)> = parse_lines(path)?;
    let Some((_, first)) = rows.first() else {
        return Err(HarnessError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "dataset is empty".into(),
        });
    };
    let dim = first.features.len();
    if let Some((line, item)) = rows.iter().find(|(_, it)| it.features.len() != dim) {
        return Err(HarnessError::Parse {
            path: path.to_path_buf(),
            line: *line,
            msg: format!("expected {dim} features, found {}", item.features.len()),
        });
    }
    Ok(Dataset::new(rows.into_iter().map(|(_, it)| it).collect())?)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_lines(path, ds.items())
}

pub fn load_multilabel(path: &Path) -> Result<MultiLabelDataset> {
    let rows: Vec<(usize, MultiLabelItem)> = parse_lines(path)?;
    Ok(MultiLabelDataset::new(rows.into_iter().map(|(_, it)| it).collect())?)
}

pub fn save_multilabel(ds: &MultiLabelDataset, path: &Path) -> Result<()> {
    write_lines(path, ds.items())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}
