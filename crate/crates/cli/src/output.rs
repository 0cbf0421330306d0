//! Output directory, manifests and the merged report.

use crate::plot::Plot;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// the estimate or property being checked
    pub reference: String,
    pub passed: bool,
    pub value: Option<f64>,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, reference: impl Into<String>, passed: bool, value: Option<f64>, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            reference: reference.into(),
            passed,
            value,
            detail: detail.into(),
        }
    }

    /// `lo <= value <= hi`.
    pub fn within(name: impl Into<String>, reference: impl Into<String>, value: f64, lo: f64, hi: f64) -> Check {
        Check::new(name, reference, value >= lo && value <= hi, Some(value), format!("required in [{lo}, {hi}]"))
    }

    /// `value <= limit`.
    pub fn at_most(name: impl Into<String>, reference: impl Into<String>, value: f64, limit: f64) -> Check {
        Check::new(name, reference, value <= limit, Some(value), format!("required <= {limit}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub nx: usize,
    pub nt: usize,
    pub t: f64,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub grid: GridSummary,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Writer confined to one directory; every CSV starts with `# manifest=<hash>`.
pub struct OutputDir {
    root: PathBuf,
    hash: String,
    written: Vec<String>,
}

fn json_text<T: Serialize>(value: &T) -> io::Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    Ok(s)
}

impl OutputDir {
    pub fn create(root: &Path, hash: &str) -> io::Result<OutputDir> {
        fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            hash: hash.to_string(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&mut self, name: &str) -> io::Result<PathBuf> {
        if name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return Err(io::Error::other(format!("output name `{name}` must be a plain file name")));
        }
        if !self.written.iter().any(|n| n == name) {
            self.written.push(name.to_string());
        }
        Ok(self.root.join(name))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let p = self.path(name)?;
        fs::write(p, json_text(value)?)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
        let p = self.path(name)?;
        let mut buf = format!("# manifest={}\n", self.hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
        fs::write(p, buf)
    }

    pub fn svg(&mut self, name: &str, plot: &Plot) -> io::Result<()> {
        let p = self.path(name)?;
        fs::write(p, plot.render())
    }

    pub fn text(&mut self, name: &str, body: &str) -> io::Result<()> {
        let p = self.path(name)?;
        fs::write(p, body)
    }

    pub fn written(&self) -> Vec<String> {
        let mut v = self.written.clone();
        v.sort();
        v
    }

    pub fn write_manifest(&self, m: &Manifest) -> io::Result<()> {
        fs::write(self.root.join(MANIFEST), json_text(m)?)
    }
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_manifests(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == MANIFEST) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub path: PathBuf,
    pub rows: usize,
    pub failures: usize,
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

/// Merges every manifest below `dir` into `dir/report.md`.
pub fn report(dir: &Path) -> Result<ReportOutcome, String> {
    let mut paths = Vec::new();
    find_manifests(dir, &mut paths).map_err(|e| format!("{}: {e}", dir.display()))?;
    if paths.is_empty() {
        return Err(format!("no {MANIFEST} found below {}", dir.display()));
    }
    let mut body = String::from("| run | experiment | check | reference | status | value | detail |\n");
    body.push_str("|---|---|---|---|---|---|---|\n");
    let (mut rows, mut failures, mut runs) = (0, 0, 0);
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
        let run = p
            .parent()
            .and_then(|d| d.strip_prefix(dir).ok())
            .map(|d| d.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        runs += 1;
        for c in &m.checks {
            rows += 1;
            if !c.passed {
                failures += 1;
            }
            body.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                cell(&run),
                m.experiment,
                cell(&c.name),
                cell(&c.reference),
                if c.passed { "pass" } else { "FAIL" },
                c.value.map(|v| format!("{v:.6e}")).unwrap_or_default(),
                cell(&c.detail)
            ));
        }
    }
    let head = format!("# Verification report\n\n{runs} runs, {rows} checks, {failures} failed.\n\n");
    let path = dir.join(REPORT);
    fs::write(&path, head + &body).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(ReportOutcome { path, rows, failures })
}
