pub mod embed_tree;
pub mod eval;
pub mod oodsim;
pub mod spectra;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::VERSION;
use crate::error::{CliError, CliResult};

/// Artifact sink rooted at the output directory.
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(path, e))
    }

    /// Write `body` merged with the tool version and resolved config.
    pub fn report<C: Serialize>(&self, name: &str, config: &C, body: Value) -> CliResult<()> {
        let mut doc = json!({
            "version": VERSION,
            "config": config,
        });
        if let (Some(target), Value::Object(extra)) = (doc.as_object_mut(), body) {
            target.extend(extra);
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
        text.push('\n');
        self.write(name, text)
    }

    /// Echo the resolved config on its own.
    pub fn echo<C: Serialize>(&self, config: &C) -> CliResult<()> {
        self.report("config.json", config, json!({}))
    }
}

/// Build CSV text in memory; writing to a `Vec` cannot fail.
pub fn csv_text(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// JSON-safe float: non-finite values become null.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}
