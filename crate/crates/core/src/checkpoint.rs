//! Model checkpoints: a directory of tensor blobs plus a text index.
//!
//! ```text
//! # mgproto checkpoint
//! stage joint
//! epoch 12
//! config fusion.hidden 16
//! param rgb.stage1.conv.weight params/rgb.stage1.conv.weight.mgt 16,3,3,3,3
//! bank rgb banks/rgb.mgt 6,64 0.9
//! ```
//!
//! Blobs hold f32, so a save/load cycle rounds parameters to single precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{parse_list, show_list, Settings};
use crate::error::{Error, Result};
use crate::net::{NetConfig, Stage};
use crate::params::ParamStore;
use crate::protoref::PrototypeBank;
use crate::synthgen::GenConfig;
use crate::tensor::Tensor;
use crate::tensorio::{read_tensor, write_tensor};

pub const INDEX_FILE: &str = "index.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub stage: Stage,
    pub epoch: usize,
    pub params: ParamStore,
    /// Prototype banks keyed by branch name.
    pub banks: BTreeMap<String, PrototypeBank>,
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["params", "banks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut index = String::from("# mgproto checkpoint\n");
        writeln!(index, "stage {}", self.stage).unwrap();
        writeln!(index, "epoch {}", self.epoch).unwrap();
        for (k, v) in self.net.entries() {
            writeln!(index, "config {k} {v}").unwrap();
        }
        for (name, t) in self.params.iter() {
            let rel = format!("params/{name}.mgt");
            write_tensor(dir.join(&rel), &t.to_blob())?;
            writeln!(index, "param {name} {rel} {}", show_list(t.shape())).unwrap();
        }
        for (branch, bank) in &self.banks {
            let rel = format!("banks/{branch}.mgt");
            write_tensor(dir.join(&rel), &bank.protos().to_blob())?;
            let shape = show_list(bank.protos().shape());
            writeln!(index, "bank {branch} {rel} {shape} {}", bank.rho()).unwrap();
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        // the net config is rebuilt from scratch, so every key must be present
        let mut net = NetConfig::for_dataset(&GenConfig::default());
        let mut stage = None;
        let mut epoch = None;
        let mut params = ParamStore::new();
        let mut banks = BTreeMap::new();
        let load_blob = |rel: &str, shape: &str, line: usize| -> Result<Tensor> {
            let want: Vec<usize> = parse_list("shape", shape).map_err(|e| Error::parse(&path, line, e.to_string()))?;
            let t = read_tensor(dir.join(rel))?;
            if t.shape() != want.as_slice() {
                return Err(Error::parse(
                    &path,
                    line,
                    format!("{rel} has shape {:?}, index says {want:?}", t.shape()),
                ));
            }
            Ok(t.to_tensor())
        };
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let f: Vec<&str> = raw.split_whitespace().collect();
            let bad = |msg: &str| Error::parse(&path, line, msg.to_string());
            match f.as_slice() {
                [] => {}
                [c, ..] if c.starts_with('#') => {}
                ["stage", s] => stage = Some(s.parse::<Stage>()?),
                ["epoch", e] => epoch = Some(e.parse::<usize>().map_err(|_| bad("bad epoch"))?),
                ["config", k, v] => net.set(k, v)?,
                ["config", k] => net.set(k, "")?,
                ["param", name, rel, shape] => params.insert(*name, load_blob(rel, shape, line)?),
                ["bank", branch, rel, shape, rho] => {
                    let rho: f64 = rho.parse().map_err(|_| bad("bad rho"))?;
                    let bank = PrototypeBank::new(load_blob(rel, shape, line)?, rho)?;
                    banks.insert(branch.to_string(), bank);
                }
                _ => return Err(bad("unrecognized index line")),
            }
        }
        let stage = stage.ok_or_else(|| Error::parse(&path, 0, "missing stage line"))?;
        let epoch = epoch.ok_or_else(|| Error::parse(&path, 0, "missing epoch line"))?;
        net.validate()?;
        Ok(Self {
            net,
            stage,
            epoch,
            params,
            banks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use crate::rng::stream;

    #[test]
    fn save_load_round_trip() {
        let mut net = NetConfig::for_dataset(&GenConfig::default());
        net.fusion.hidden = 7;
        net.rgb.embed_dim = 9;
        let params = init_params(&net, 3).unwrap();
        let mut banks = BTreeMap::new();
        banks.insert(
            "pose".to_string(),
            PrototypeBank::random(6, 64, 0.8, &mut stream(1, "b")).unwrap(),
        );
        let ck = Checkpoint {
            net,
            stage: Stage::Joint,
            epoch: 4,
            params,
            banks,
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.net, ck.net);
        assert_eq!((back.stage, back.epoch), (ck.stage, ck.epoch));
        assert_eq!(back.params.len(), ck.params.len());
        for (name, t) in ck.params.iter() {
            let b = back.params.get(name).unwrap();
            let rounded: Vec<f64> = t.data().iter().map(|&v| f64::from(v as f32)).collect();
            assert_eq!(b.data(), rounded.as_slice(), "{name}");
        }
        assert_eq!(back.banks["pose"].rho(), 0.8);
        // a second cycle is exact
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        assert_eq!(Checkpoint::load(dir2.path()).unwrap(), back);
    }

    #[test]
    fn corrupt_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(INDEX_FILE), "stage joint\nepoch 1\nbogus\n").unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::Parse { line: 3, .. })
        ));
        assert_eq!(Checkpoint::load(dir.path().join("missing")).unwrap_err().exit_code(), 4);
    }
}
