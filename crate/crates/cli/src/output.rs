//! Artifact writing: deterministic CSV/JSON files plus a manifest of hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Format;
use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "RADNER_OUT_DIR";

/// `--out` beats the config, which beats the environment, which beats `out`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    radner_cli_version: &'a str,
    config_sha256: &'a str,
    seed: u64,
    n_paths: usize,
    extra: &'a BTreeMap<String, String>,
    files: &'a [FileEntry],
}

/// Collects the files of one run and writes `manifest.json` at the end.
pub struct ArtifactWriter {
    dir: PathBuf,
    formats: Vec<Format>,
    files: Vec<FileEntry>,
    extra: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn create(dir: PathBuf, formats: &[Format]) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir,
            formats: formats.to_vec(),
            files: Vec::new(),
            extra: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    /// Free-form key/value recorded in the manifest.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.extra.insert(key.to_string(), value.to_string());
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).context("serialising JSON")?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes a CSV with `\n` line endings; cells are written verbatim.
    pub fn csv<I>(&mut self, rel: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(header).context("writing CSV header")?;
        for row in rows {
            w.write_record(&row).context("writing CSV row")?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing CSV: {e}"))?;
        self.write_bytes(rel, &bytes)
    }

    pub fn numeric_csv<I>(&mut self, rel: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        self.csv(rel, header, rows.into_iter().map(|r| r.into_iter().map(fmt_f64).collect()))
    }

    pub fn finish(mut self, command: &str, config_bytes: &[u8], seed: u64, n_paths: usize) -> Result<Vec<String>, CliError> {
        let config_sha = sha256_hex(config_bytes);
        self.note("radner_core_version", radner_core::VERSION);
        let manifest = Manifest {
            command,
            radner_cli_version: env!("CARGO_PKG_VERSION"),
            config_sha256: &config_sha,
            seed,
            n_paths,
            extra: &self.extra,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).context("serialising manifest")?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        let mut names: Vec<String> = self.files.into_iter().map(|f| f.path).collect();
        names.push("manifest.json".into());
        Ok(names)
    }
}
