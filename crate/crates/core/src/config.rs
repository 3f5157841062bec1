//! Plain-text `key = value` settings shared by config files, checkpoints and
//! run manifests.
//!
//! ```text
//! # comment
//! train.alpha = 0.5
//! net.rgb.stage_channels = 16,32
//! ```

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{BranchConfig, NetConfig};
use crate::synthgen::{AmbiguousPair, GenConfig};

/// One `key = value` line with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvLine {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str, path: &Path) -> Result<Vec<KvLine>> {
    let mut out: Vec<KvLine> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, n + 1, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::parse(path, n + 1, format!("bad key {k:?}")));
        }
        if out.iter().any(|l| l.key == k) {
            return Err(Error::parse(path, n + 1, format!("duplicate key {k}")));
        }
        out.push(KvLine {
            line: n + 1,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}

pub fn read_kv(path: impl AsRef<Path>) -> Result<Vec<KvLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

pub fn to_kv_text(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// A struct whose fields can be read and written as `key = value`.
pub trait Settings {
    /// Sets one field; unknown keys are errors.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    /// Every field, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;

    /// Applies every line whose key starts with `prefix`, stripping it.
    fn apply(&mut self, lines: &[KvLine], prefix: &str) -> Result<()> {
        for l in lines {
            if let Some(k) = l.key.strip_prefix(prefix) {
                self.set(k, &l.value)?;
            }
        }
        Ok(())
    }

    fn prefixed_entries(&self, prefix: &str) -> Vec<(String, String)> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v))
            .collect()
    }
}

pub(crate) fn unknown_key(key: &str) -> Error {
    Error::validation(format!("unknown setting {key:?}"))
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::validation(format!("{key} = {value:?}: {e}")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub(crate) fn show_list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Settings for GenConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "clips_train" => self.clips_per_class_train = parse_value(key, value)?,
            "clips_val" => self.clips_per_class_val = parse_value(key, value)?,
            "clips_test" => self.clips_per_class_test = parse_value(key, value)?,
            "t_rgb" => self.t_rgb = parse_value(key, value)?,
            "t_pose" => self.t_pose = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "n_joints" => self.n_joints = parse_value(key, value)?,
            "intra_noise" => self.intra_noise = parse_value(key, value)?,
            "blob_sigma" => self.blob_sigma = parse_value(key, value)?,
            "ambiguous_pairs" => self.ambiguous_pairs = parse_pairs(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let pairs: Vec<String> = self
            .ambiguous_pairs
            .iter()
            .map(|p| format!("{}:{}:{}", p.class_a, p.class_b, p.offset))
            .collect();
        [
            ("seed", self.seed.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("clips_train", self.clips_per_class_train.to_string()),
            ("clips_val", self.clips_per_class_val.to_string()),
            ("clips_test", self.clips_per_class_test.to_string()),
            ("t_rgb", self.t_rgb.to_string()),
            ("t_pose", self.t_pose.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("n_joints", self.n_joints.to_string()),
            ("intra_noise", self.intra_noise.to_string()),
            ("blob_sigma", self.blob_sigma.to_string()),
            ("ambiguous_pairs", pairs.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

impl Settings for BranchConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "stage_channels" => self.stage_channels = parse_list(key, value)?,
            "temporal_strides" => self.temporal_strides = parse_list(key, value)?,
            "spatial_strides" => self.spatial_strides = parse_list(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("in_channels".into(), self.in_channels.to_string()),
            ("stage_channels".into(), show_list(&self.stage_channels)),
            ("temporal_strides".into(), show_list(&self.temporal_strides)),
            ("spatial_strides".into(), show_list(&self.spatial_strides)),
            ("embed_dim".into(), self.embed_dim.to_string()),
        ]
    }
}

impl Settings for NetConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("rgb.") {
            return self.rgb.set(k, value);
        }
        if let Some(k) = key.strip_prefix("pose.") {
            return self.pose.set(k, value);
        }
        match key {
            "t_rgb" => self.input.t_rgb = parse_value(key, value)?,
            "t_pose" => self.input.t_pose = parse_value(key, value)?,
            "height" => self.input.height = parse_value(key, value)?,
            "width" => self.input.width = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "fusion" => self.fusion.enabled = parse_value(key, value)?,
            "fusion.hidden" => self.fusion.hidden = parse_value(key, value)?,
            "fusion.lateral_channels" => self.fusion.lateral_channels = parse_value(key, value)?,
            "fusion.attention_source" => self.fusion.attention_source = parse_value(key, value)?,
            "fusion.gate_act" => self.fusion.gate_act = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = [
            ("t_rgb", self.input.t_rgb.to_string()),
            ("t_pose", self.input.t_pose.to_string()),
            ("height", self.input.height.to_string()),
            ("width", self.input.width.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("fusion", self.fusion.enabled.to_string()),
            ("fusion.hidden", self.fusion.hidden.to_string()),
            ("fusion.lateral_channels", self.fusion.lateral_channels.to_string()),
            ("fusion.attention_source", self.fusion.attention_source.to_string()),
            ("fusion.gate_act", self.fusion.gate_act.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(self.rgb.prefixed_entries("rgb."));
        out.extend(self.pose.prefixed_entries("pose."));
        out
    }
}

/// `a:b:offset` items separated by commas.
pub fn parse_pairs(key: &str, value: &str) -> Result<Vec<AmbiguousPair>> {
    let items: Vec<String> = parse_list(key, value)?;
    items
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::validation(format!(
                    "{key}: {item:?} is not class_a:class_b:offset"
                )));
            }
            Ok(AmbiguousPair {
                class_a: parse_value(key, parts[0])?,
                class_b: parse_value(key, parts[1])?,
                offset: parse_value(key, parts[2])?,
            })
        })
        .collect()
}
