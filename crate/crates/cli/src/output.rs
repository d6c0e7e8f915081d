//! Everything a command writes goes through [`Output`], rooted at `--out-dir`.

use std::path::{Path, PathBuf};

use fastsfp_core::config::KvConfig;
use fastsfp_core::error::{Error, Result};
use serde::Serialize;
use serde_json::{Map, Number, Value};

pub const CONFIG_ECHO: &str = "config.txt";

pub struct Output {
    dir: PathBuf,
    json: bool,
}

impl Output {
    pub fn create(dir: &Path, json: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            json,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        Ok(())
    }

    /// Writes `<stem>.csv`, plus `<stem>.json` when mirroring is on.
    pub fn write_csv(&self, stem: &str, csv: &str) -> Result<()> {
        self.write_bytes(&format!("{stem}.csv"), csv.as_bytes())?;
        if self.json {
            self.write_json(stem, &csv_to_json(csv))?;
        }
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, stem: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.write_bytes(&format!("{stem}.json"), (text + "\n").as_bytes())
    }

    pub fn echo_config(&self, kv: &KvConfig) -> Result<()> {
        self.write_bytes(CONFIG_ECHO, kv.to_text().as_bytes())
    }
}

fn cell(s: &str) -> Value {
    match s {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        "" => Value::Null,
        _ => {
            if let Ok(i) = s.parse::<i64>() {
                return Value::Number(i.into());
            }
            match s.parse::<f64>().ok().and_then(Number::from_f64) {
                Some(n) => Value::Number(n),
                None => Value::String(s.to_string()),
            }
        }
    }
}

/// Header-keyed array of row objects; columns keep header order.
pub fn csv_to_json(csv: &str) -> Value {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().map(|h| h.split(',').collect()).unwrap_or_default();
    Value::Array(
        lines
            .map(|line| {
                let mut row = Map::new();
                for (k, v) in header.iter().zip(line.split(',')) {
                    row.insert((*k).to_string(), cell(v));
                }
                Value::Object(row)
            })
            .collect(),
    )
}
