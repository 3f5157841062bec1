//! Config file plus flag overrides. Both become `KvLine`s; flags come last so
//! they win when applied in order.

use std::path::Path;

use mgproto::config::{read_kv, KvLine};
use mgproto::{Error, Result};

/// Prefixes a config file may use; anything else is an error.
pub const SECTIONS: [&str; 3] = ["gen.", "train.", "net."];

#[derive(Clone, Debug, Default)]
pub struct Layered {
    pub lines: Vec<KvLine>,
}

impl Layered {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let lines = read_kv(path)?;
        if let Some(bad) = lines.iter().find(|l| !SECTIONS.iter().any(|s| l.key.starts_with(s))) {
            return Err(Error::parse(
                path,
                bad.line,
                format!("key {:?} must start with one of {SECTIONS:?}", bad.key),
            ));
        }
        Ok(Self { lines })
    }

    /// Appends a flag override when the flag was given.
    pub fn flag(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.lines.push(KvLine {
                line: 0,
                key: key.to_string(),
                value: v.to_string(),
            });
        }
    }

    /// Value of the last line for `key`, if any.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().rev().find(|l| l.key == key).map(|l| l.value.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mgproto::config::Settings;
    use mgproto::trainer::TrainConfig;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "train.alpha = 0.2\ntrain.epochs = 4\n").unwrap();
        let mut l = Layered::from_file(Some(&p)).unwrap();
        l.flag("train.alpha", Some(0.7));
        l.flag("train.tau", None::<f64>);
        let mut cfg = TrainConfig::default();
        cfg.apply(&l.lines, "train.").unwrap();
        assert_eq!((cfg.alpha, cfg.epochs, cfg.tau), (0.7, 4, 0.1));
        assert_eq!(l.get("train.alpha"), Some("0.7"));
    }

    #[test]
    fn unknown_section_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "alpha = 0.2\n").unwrap();
        let e = Layered::from_file(Some(&p)).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
