//! Output writing and the per-run reproducibility record.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use ccl::data::DATASET_FORMAT_VERSION;
use ccl::model::CHECKPOINT_FORMAT_VERSION;

use crate::{invalid, runtime, CliResult};

pub const RECORD_FILE: &str = "run.toml";

/// `run.toml`: the resolved configuration, seeds and format versions of a
/// run. The only output that carries a timestamp.
pub struct RunRecord {
    table: toml::Table,
}

impl RunRecord {
    pub fn new(command: &str) -> Self {
        let mut record = Self { table: toml::Table::new() };
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        record.set("command", command);
        record.set("tool_version", env!("CARGO_PKG_VERSION"));
        record.set("argv", std::env::args().collect::<Vec<_>>());
        record.set("created_unix_seconds", created as i64);
        record.set("dataset_format_version", DATASET_FORMAT_VERSION as i64);
        record.set("checkpoint_format_version", CHECKPOINT_FORMAT_VERSION as i64);
        record
    }

    pub fn set<V: Serialize>(&mut self, key: &str, value: V) {
        let value = toml::Value::try_from(value).expect("record values serialize to TOML");
        self.table.insert(key.to_string(), value);
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = toml::to_string_pretty(&self.table).map_err(runtime)?;
        write_file(&dir.join(RECORD_FILE), &text)
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| invalid(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// One JSON object per line.
pub fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row).expect("rows serialize"));
        out.push('\n');
    }
    out
}

/// Left-aligned first column, right-aligned rest.
pub fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate().take(cols) {
            let pad = widths[c] - cell.chars().count();
            if c == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
    }
    out
}
