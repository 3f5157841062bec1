//! In-memory datasets and mini-batches.
//!
//! Clips are stored frame-major `(T, C, H, W)` on disk; the encoder wants
//! channel-major `(C, T, H, W)`, so loading transposes once.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::synthgen::ClipSample;
use crate::tensor::{Tensor, TensorBlob};
use crate::tensorio::{read_tensor, DatasetManifest, Split};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clip_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `(C, T, H, W)` per clip.
    rgb_shape: [usize; 4],
    pose_shape: [usize; 4],
    rgb: Vec<Vec<f64>>,
    pose: Vec<Vec<f64>>,
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub clip_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `(N, 3, T_rgb, H, W)`.
    pub rgb: Tensor,
    /// `(N, J, T_pose, H, W)`.
    pub pose: Tensor,
}

fn channel_major(t: &TensorBlob, what: &str) -> Result<([usize; 4], Vec<f64>)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("{what}: clip {s:?}, expected (T, C, H, W)")));
    }
    let (tt, c, hw) = (s[0], s[1], s[2] * s[3]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ti in 0..tt {
        for ci in 0..c {
            let from = (ti * c + ci) * hw;
            let to = (ci * tt + ti) * hw;
            for j in 0..hw {
                out[to + j] = f64::from(src[from + j]);
            }
        }
    }
    Ok(([c, tt, s[2], s[3]], out))
}

impl Dataset {
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a ClipSample>, num_classes: usize) -> Result<Self> {
        let mut ds = Dataset {
            clip_ids: Vec::new(),
            labels: Vec::new(),
            num_classes,
            rgb_shape: [0; 4],
            pose_shape: [0; 4],
            rgb: Vec::new(),
            pose: Vec::new(),
        };
        for c in clips {
            ds.push(&c.clip_id, c.label, &c.rgb, &c.pose)?;
        }
        Ok(ds)
    }

    /// Reads every clip of `split`.
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut ds = Self::from_clips([], manifest.num_classes)?;
        for e in manifest.split(split) {
            let rgb = read_tensor(manifest.resolve(&e.rgb_path))?;
            let pose = read_tensor(manifest.resolve(&e.pose_path))?;
            ds.push(&e.clip_id, e.label, &rgb, &pose)?;
        }
        Ok(ds)
    }

    fn push(&mut self, id: &str, label: usize, rgb: &TensorBlob, pose: &TensorBlob) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::validation(format!(
                "clip {id}: label {label} >= {} classes",
                self.num_classes
            )));
        }
        let (rs, r) = channel_major(rgb, id)?;
        let (ps, p) = channel_major(pose, id)?;
        if self.rgb.is_empty() {
            self.rgb_shape = rs;
            self.pose_shape = ps;
        } else if rs != self.rgb_shape || ps != self.pose_shape {
            return Err(Error::shape(format!(
                "clip {id}: shapes {rs:?}/{ps:?} differ from {:?}/{:?}",
                self.rgb_shape, self.pose_shape
            )));
        }
        self.clip_ids.push(id.to_string());
        self.labels.push(label);
        self.rgb.push(r);
        self.pose.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, T, H, W)` of the rgb and pose clips.
    pub fn clip_shapes(&self) -> ([usize; 4], [usize; 4]) {
        (self.rgb_shape, self.pose_shape)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::validation(format!("clip index {bad} out of range")));
        }
        let stack = |clips: &[Vec<f64>], s: [usize; 4]| {
            let data = idx.iter().flat_map(|&i| clips[i].iter().copied()).collect();
            Tensor::new(vec![idx.len(), s[0], s[1], s[2], s[3]], data)
        };
        Ok(Batch {
            clip_ids: idx.iter().map(|&i| self.clip_ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            rgb: stack(&self.rgb, self.rgb_shape)?,
            pose: stack(&self.pose, self.pose_shape)?,
        })
    }

    /// Consecutive index chunks of at most `size`, in dataset order.
    pub fn sequential(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Seeded permutation of `0..n` for one epoch, split into batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &format!("batch-order/{epoch}")));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
