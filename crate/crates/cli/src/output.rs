//! Result files: CSV tables with fixed headers and a JSON manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Seventeen significant digits, exponent form, no locale.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV writer that flushes every row, so a run that stops early leaves the
/// rows written so far.
pub struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Csv {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut csv = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        csv.line(header)?;
        Ok(csv)
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.line(&fields.join(","))
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|()| self.out.flush())
            .with_context(|| format!("writing {}", self.path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Manifest {
    fields: serde_json::Map<String, Value>,
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, config: &Value, seed: u64) -> Self {
        let mut fields = serde_json::Map::new();
        fields.insert("command".into(), json!(command));
        fields.insert("config".into(), config.clone());
        fields.insert("config_sha256".into(), json!(sha256_hex(config_text.as_bytes())));
        fields.insert("seed".into(), json!(seed));
        fields.insert(
            "versions".into(),
            json!({ "amid-cli": env!("CARGO_PKG_VERSION") }),
        );
        Self { fields }
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.fields.insert(key.into(), value);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&Value::Object(self.fields.clone()))?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
