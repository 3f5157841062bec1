//! Dataset manifest: a line-oriented text file.
//!
//! ```text
//! # comment lines and blank lines are ignored
//! num_classes 3
//! class 0 scratch_head
//! class 1 rub_nose
//! class 2 fold_arms
//! clip c0000 0 train clips/c0000.rgb.mgt clips/c0000.pose.mgt
//! ```
//!
//! `class` lines must cover `0..num_classes` exactly once. A `clip` record is
//! `clip <id> <label> <split> <rgb_path> <pose_path>`; relative paths are
//! resolved against the directory holding the manifest. Tokens are separated
//! by whitespace, so ids, names and paths may not contain any.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub label: usize,
    pub rgb_path: String,
    pub pose_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative clip paths are resolved against. Not serialized.
    pub root: PathBuf,
}

fn token_ok(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl DatasetManifest {
    /// Checks every invariant that does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes must be positive"));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::validation(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if let Some(bad) = self.class_names.iter().find(|n| !token_ok(n)) {
            return Err(Error::validation(format!(
                "class name {bad:?} is empty or contains whitespace"
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label >= self.num_classes {
                return Err(Error::validation(format!(
                    "clip {}: label {} out of range for {} classes",
                    e.clip_id, e.label, self.num_classes
                )));
            }
            for tok in [&e.clip_id, &e.rgb_path, &e.pose_path] {
                if !token_ok(tok) {
                    return Err(Error::validation(format!(
                        "clip {:?}: field {tok:?} is empty or contains whitespace",
                        e.clip_id
                    )));
                }
            }
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate clip_id {:?}",
                    e.clip_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Checks that every referenced clip file exists.
    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.rgb_path, &e.pose_path] {
                if !self.resolve(p).is_file() {
                    return Err(Error::validation(format!(
                        "clip {}: dangling path {p}",
                        e.clip_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# mgproto dataset manifest\n");
        writeln!(s, "num_classes {}", self.num_classes).unwrap();
        for (k, name) in self.class_names.iter().enumerate() {
            writeln!(s, "class {k} {name}").unwrap();
        }
        for e in &self.entries {
            writeln!(
                s,
                "clip {} {} {} {} {}",
                e.clip_id, e.label, e.split, e.rgb_path, e.pose_path
            )
            .unwrap();
        }
        s
    }

    /// Parses manifest text. `path` names the source in error messages.
    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let mut num_classes = None;
        let mut names: Vec<Option<String>> = Vec::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| Error::parse(path, lineno, msg);
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(format!("expected a non-negative integer, got {s:?}")))
            };
            match toks.as_slice() {
                ["num_classes", k] => {
                    if num_classes.is_some() {
                        return Err(err("num_classes given twice".into()));
                    }
                    let k = int(k)?;
                    num_classes = Some(k);
                    names = vec![None; k];
                }
                ["class", k, name] => {
                    let k = int(k)?;
                    let Some(slot) = names.get_mut(k) else {
                        return Err(err(format!(
                            "class index {k} before num_classes or out of range"
                        )));
                    };
                    if slot.replace((*name).to_string()).is_some() {
                        return Err(err(format!("class {k} named twice")));
                    }
                }
                ["clip", id, label, split, rgb, pose] => entries.push(ManifestEntry {
                    clip_id: (*id).to_string(),
                    label: int(label)?,
                    split: split.parse().map_err(|e: Error| err(e.to_string()))?,
                    rgb_path: (*rgb).to_string(),
                    pose_path: (*pose).to_string(),
                }),
                _ => return Err(err(format!("unrecognized record {line:?}"))),
            }
        }
        let num_classes =
            num_classes.ok_or_else(|| Error::parse(path, 0, "missing num_classes"))?;
        let class_names = names
            .into_iter()
            .enumerate()
            .map(|(k, n)| n.ok_or_else(|| Error::parse(path, 0, format!("class {k} unnamed"))))
            .collect::<Result<Vec<_>>>()?;
        let m = DatasetManifest {
            num_classes,
            class_names,
            entries,
            root,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Loads and validates a manifest, including that every clip path exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let m = DatasetManifest::parse(&text, path, root)?;
    m.check_paths()?;
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorBlob;
    use crate::tensorio::write_tensor;

    fn three_class(dir: &Path) -> DatasetManifest {
        let t = TensorBlob::new(vec![1], vec![0.0]).unwrap();
        for name in ["a.rgb", "a.pose", "b.rgb", "b.pose"] {
            write_tensor(dir.join(name), &t).unwrap();
        }
        let entry = |id: &str, label, split| ManifestEntry {
            clip_id: id.into(),
            label,
            rgb_path: format!("{id}.rgb"),
            pose_path: format!("{id}.pose"),
            split,
        };
        DatasetManifest {
            num_classes: 3,
            class_names: vec!["x".into(), "y".into(), "z".into()],
            entries: vec![entry("a", 0, Split::Train), entry("b", 2, Split::Test)],
            root: dir.to_path_buf(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = three_class(dir.path());
        let path = dir.path().join("manifest.txt");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.num_classes, 3);
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back, m);
    }

    #[test]
    fn label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = three_class(dir.path());
        m.entries[0].label = 5;
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
        let text = m.to_text();
        assert!(matches!(
            DatasetManifest::parse(&text, Path::new("m"), dir.path().into()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_clip_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = three_class(dir.path());
        m.entries[1].clip_id = "a".into();
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn dangling_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = three_class(dir.path());
        m.entries[1].pose_path = "missing.pose".into();
        let path = dir.path().join("manifest.txt");
        save_manifest(&m, &path).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("dangling"));
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "num_classes 1\nclass 0 a\nclip only_two\n";
        let err = DatasetManifest::parse(text, Path::new("m"), ".".into()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
