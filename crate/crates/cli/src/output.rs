//! Artifact writing: CSV with round-trip floats, pretty JSON, SVG, and the
//! run manifest listing every file written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;

/// Seventeen significant digits, independent of locale.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Header plus rows, rendered in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<ManifestEntry>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub const MANIFEST: &str = "manifest.json";

/// Output directory of one command. Every write is recorded for the
/// manifest.
pub struct OutputDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    started: u64,
    files: Vec<ManifestEntry>,
}

impl OutputDir {
    /// Refuses to reuse a directory holding a previous manifest unless
    /// `overwrite` is set.
    pub fn create(root: &Path, command: &str, config_hash: &str, overwrite: bool) -> std::io::Result<Self> {
        if root.join(MANIFEST).exists() && !overwrite {
            return Err(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} already holds a run; pass --overwrite", root.display()),
            ));
        }
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            started: unix_now(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        self.files.retain(|e| e.path != name);
        self.files.push(ManifestEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn write_csv(&mut self, name: &str, table: &Table) -> std::io::Result<PathBuf> {
        self.write_bytes(name, table.render().as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> std::io::Result<PathBuf> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn files(&self) -> &[ManifestEntry] {
        &self.files
    }

    /// Writes `manifest.json`; the manifest does not list itself.
    pub fn finish(self) -> std::io::Result<RunManifest> {
        let mut files = self.files;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: unix_now(),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST), text)?;
        Ok(manifest)
    }
}
