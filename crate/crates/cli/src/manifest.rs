//! Run manifest: everything needed to repeat a command, written before any
//! work starts.
//!
//! ```text
//! run.command = train
//! run.seed = 7
//! run.git_describe = v0.1.0-3-gabc1234
//! run.started = 2026-01-01T12:00:00+00:00
//! path.data = /abs/data
//! train.alpha = 0.5
//! net.fusion = true
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mgproto::config::{parse_kv, to_kv_text, KvLine};
use mgproto::{Error, Result};

pub const FILE: &str = "run_manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub git_describe: String,
    pub started: String,
    pub finished: Option<String>,
    /// `(name, path)` for inputs and outputs, stored under `path.<name>`.
    pub paths: Vec<(String, PathBuf)>,
    /// Resolved `gen.*`, `train.*` and `net.*` settings.
    pub config: Vec<(String, String)>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// `git describe --always --dirty`, or `unknown` outside a work tree.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Absolute form of `p` for the manifest; falls back to `p` itself.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            git_describe: git_describe(),
            started: now(),
            finished: None,
            paths: Vec::new(),
            config: Vec::new(),
        }
    }

    pub fn path(&self, name: &str) -> Option<&Path> {
        self.paths.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_path())
    }

    /// Settings as config lines, for replaying through `Settings::apply`.
    pub fn config_lines(&self) -> Vec<KvLine> {
        self.config
            .iter()
            .map(|(k, v)| KvLine {
                line: 0,
                key: k.clone(),
                value: v.clone(),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut e: Vec<(String, String)> = vec![
            ("run.command".into(), self.command.clone()),
            ("run.seed".into(), self.seed.to_string()),
            ("run.git_describe".into(), self.git_describe.clone()),
            ("run.started".into(), self.started.clone()),
        ];
        if let Some(f) = &self.finished {
            e.push(("run.finished".into(), f.clone()));
        }
        for (n, p) in &self.paths {
            e.push((format!("path.{n}"), p.display().to_string()));
        }
        e.extend(self.config.iter().cloned());
        to_kv_text(&e)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let lines = parse_kv(text, path)?;
        let get = |k: &str| {
            lines
                .iter()
                .find(|l| l.key == k)
                .map(|l| l.value.clone())
                .ok_or_else(|| Error::parse(path, 0, format!("missing {k}")))
        };
        let seed = get("run.seed")?;
        let mut m = Self {
            command: get("run.command")?,
            seed: seed
                .parse()
                .map_err(|_| Error::parse(path, 0, format!("bad run.seed {seed:?}")))?,
            git_describe: get("run.git_describe")?,
            started: get("run.started")?,
            finished: get("run.finished").ok(),
            paths: Vec::new(),
            config: Vec::new(),
        };
        for l in &lines {
            if let Some(n) = l.key.strip_prefix("path.") {
                m.paths.push((n.to_string(), PathBuf::from(&l.value)));
            } else if !l.key.starts_with("run.") {
                m.config.push((l.key.clone(), l.value.clone()));
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(FILE);
        fs::write(&p, self.to_text()).map_err(|e| Error::io(&p, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
