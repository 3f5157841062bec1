//! Deterministic synthetic micro-gesture clips.
//!
//! Each class owns a motion template: every joint traces an ellipse
//! `(cx + ax·sin(2π·f·u + φ), cy + ay·cos(2π·f·u + φ))` over normalized clip
//! time `u ∈ [0, 1)`, with an integer number of cycles `f`. A clip perturbs
//! the template with Gaussian jitter of scale `σ = intra_noise`:
//!
//! | quantity            | jitter                      |
//! |---------------------|-----------------------------|
//! | joint center        | `N(0, 2σ)` pixels per axis  |
//! | phase               | `N(0, σ)` radians           |
//! | amplitude           | factor `1 + N(0, σ/2)`      |
//! | per-frame position  | `N(0, σ/2)` pixels per axis |
//!
//! Joints are rendered as isotropic Gaussian blobs: one heatmap channel per
//! joint at pose frame rate, and additively colored into three RGB channels
//! at the RGB frame rate. RGB frame `i` is the pose frame `i·(t_pose/t_rgb)`.
//!
//! Classes in an ambiguous pair `(a, b, offset)` share `a`'s template, with
//! `b`'s phases shifted by `offset` of a full cycle. Because the cycles are
//! whole, time-averaged heatmaps of the two classes are almost identical and
//! only the temporal ordering separates them.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian, stream};
use crate::tensor::TensorBlob;
use crate::tensorio::{save_manifest, write_tensor, DatasetManifest, ManifestEntry, Split};

/// Standard deviation of a rendered joint blob, in pixels.
pub const DEFAULT_BLOB_SIGMA: f64 = 1.5;

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.2, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
    [1.0, 0.6, 0.2],
    [0.6, 0.2, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbiguousPair {
    pub class_a: usize,
    pub class_b: usize,
    /// Phase offset of `class_b` relative to `class_a`, as a fraction of a cycle.
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub clips_per_class_train: usize,
    pub clips_per_class_val: usize,
    pub clips_per_class_test: usize,
    pub t_rgb: usize,
    pub t_pose: usize,
    pub height: usize,
    pub width: usize,
    pub n_joints: usize,
    pub ambiguous_pairs: Vec<AmbiguousPair>,
    pub intra_noise: f64,
    pub blob_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 6,
            clips_per_class_train: 10,
            clips_per_class_val: 5,
            clips_per_class_test: 5,
            t_rgb: 8,
            t_pose: 32,
            height: 16,
            width: 16,
            n_joints: 5,
            ambiguous_pairs: Vec::new(),
            intra_noise: 0.1,
            blob_sigma: DEFAULT_BLOB_SIGMA,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::validation(m));
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if self.t_rgb == 0 || self.t_pose == 0 || self.height == 0 || self.width == 0 {
            return err("frame counts and frame size must be positive".into());
        }
        if self.t_pose % self.t_rgb != 0 {
            return err(format!(
                "t_pose ({}) must be divisible by t_rgb ({})",
                self.t_pose, self.t_rgb
            ));
        }
        if self.n_joints == 0 {
            return err("n_joints must be positive".into());
        }
        if !(self.intra_noise >= 0.0 && self.intra_noise.is_finite()) {
            return err(format!("intra_noise must be >= 0, got {}", self.intra_noise));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return err(format!("blob_sigma must be > 0, got {}", self.blob_sigma));
        }
        for p in &self.ambiguous_pairs {
            if p.class_a == p.class_b {
                return err(format!("ambiguous pair ({0}, {0}) is not distinct", p.class_a));
            }
            if p.class_a >= self.num_classes || p.class_b >= self.num_classes {
                return err(format!(
                    "ambiguous pair ({}, {}) out of range for {} classes",
                    p.class_a, p.class_b, self.num_classes
                ));
            }
            if !(p.offset > 0.0 && p.offset <= 1.0) {
                return err(format!("ambiguous offset {} not in (0, 1]", p.offset));
            }
        }
        Ok(())
    }

    pub fn temporal_stride(&self) -> usize {
        self.t_pose / self.t_rgb
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTrack {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    pub cycles: f64,
    pub phase: f64,
}

impl JointTrack {
    /// Position `[x, y]` at normalized time `u`.
    pub fn at(&self, u: f64) -> [f64; 2] {
        let a = TAU * self.cycles * u + self.phase;
        [
            self.center[0] + self.amplitude[0] * a.sin(),
            self.center[1] + self.amplitude[1] * a.cos(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionTemplate {
    pub joints: Vec<JointTrack>,
}

/// One labeled clip. `rgb` is `(t_rgb, 3, H, W)`, `pose` is `(t_pose, n_joints, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub label: usize,
    pub rgb: TensorBlob,
    pub pose: TensorBlob,
}

/// Builds every class template, applying ambiguous pairs in order.
pub fn class_templates(cfg: &GenConfig) -> Result<Vec<MotionTemplate>> {
    cfg.validate()?;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut templates: Vec<MotionTemplate> = (0..cfg.num_classes)
        .map(|k| {
            let mut rng = stream(cfg.seed, &format!("template/{k}"));
            let joints = (0..cfg.n_joints)
                .map(|_| JointTrack {
                    center: [
                        rng.random_range(0.3 * w..0.7 * w),
                        rng.random_range(0.3 * h..0.7 * h),
                    ],
                    amplitude: [
                        rng.random_range(1.0..(0.25 * w).max(1.5)),
                        rng.random_range(1.0..(0.25 * h).max(1.5)),
                    ],
                    cycles: f64::from(rng.random_range(1u32..=2)),
                    phase: rng.random_range(0.0..TAU),
                })
                .collect();
            MotionTemplate { joints }
        })
        .collect();
    for p in &cfg.ambiguous_pairs {
        let mut t = templates[p.class_a].clone();
        for j in &mut t.joints {
            j.phase += TAU * p.offset;
        }
        templates[p.class_b] = t;
    }
    Ok(templates)
}

fn clamp_to_frame(p: [f64; 2], cfg: &GenConfig) -> [f64; 2] {
    [
        p[0].clamp(0.0, (cfg.width - 1) as f64),
        p[1].clamp(0.0, (cfg.height - 1) as f64),
    ]
}

/// Jittered joint positions `[frame][joint] -> [x, y]` at pose frame rate.
pub fn jittered_trajectory(
    template: &MotionTemplate,
    jitter_seed: u64,
    cfg: &GenConfig,
) -> Vec<Vec<[f64; 2]>> {
    let sigma = cfg.intra_noise;
    let mut rng = stream(jitter_seed, "jitter");
    let tracks: Vec<JointTrack> = template
        .joints
        .iter()
        .map(|j| JointTrack {
            center: [
                j.center[0] + gaussian(&mut rng, 2.0 * sigma),
                j.center[1] + gaussian(&mut rng, 2.0 * sigma),
            ],
            amplitude: {
                let s = 1.0 + gaussian(&mut rng, 0.5 * sigma);
                [j.amplitude[0] * s, j.amplitude[1] * s]
            },
            cycles: j.cycles,
            phase: j.phase + gaussian(&mut rng, sigma),
        })
        .collect();
    (0..cfg.t_pose)
        .map(|f| {
            let u = f as f64 / cfg.t_pose as f64;
            tracks
                .iter()
                .map(|tr| {
                    let [x, y] = tr.at(u);
                    let p = [
                        x + gaussian(&mut rng, 0.5 * sigma),
                        y + gaussian(&mut rng, 0.5 * sigma),
                    ];
                    clamp_to_frame(p, cfg)
                })
                .collect()
        })
        .collect()
}

fn blob(sigma: f64, center: [f64; 2], x: usize, y: usize) -> f64 {
    let dx = x as f64 - center[0];
    let dy = y as f64 - center[1];
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Renders one clip. Deterministic in `(template, jitter_seed, cfg)`.
pub fn render_clip(
    template: &MotionTemplate,
    jitter_seed: u64,
    cfg: &GenConfig,
    clip_id: &str,
    label: usize,
) -> Result<ClipSample> {
    cfg.validate()?;
    if template.joints.len() != cfg.n_joints {
        return Err(Error::validation(format!(
            "template has {} joints, config {}",
            template.joints.len(),
            cfg.n_joints
        )));
    }
    let traj = jittered_trajectory(template, jitter_seed, cfg);
    let (h, w, nj) = (cfg.height, cfg.width, cfg.n_joints);
    let plane = h * w;

    let mut pose = vec![0f32; cfg.t_pose * nj * plane];
    for (f, joints) in traj.iter().enumerate() {
        for (j, &p) in joints.iter().enumerate() {
            let out = &mut pose[(f * nj + j) * plane..][..plane];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = blob(cfg.blob_sigma, p, x, y) as f32;
                }
            }
        }
    }

    let stride = cfg.temporal_stride();
    let mut rgb = vec![0f32; cfg.t_rgb * 3 * plane];
    for i in 0..cfg.t_rgb {
        let joints = &traj[i * stride];
        for y in 0..h {
            for x in 0..w {
                let mut px = [0.0f64; 3];
                for (j, &p) in joints.iter().enumerate() {
                    let b = blob(cfg.blob_sigma, p, x, y);
                    for (c, v) in px.iter_mut().enumerate() {
                        *v += PALETTE[j % PALETTE.len()][c] * b;
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    rgb[((i * 3 + c) * h + y) * w + x] = v.min(1.0) as f32;
                }
            }
        }
    }

    Ok(ClipSample {
        clip_id: clip_id.to_string(),
        label,
        rgb: TensorBlob::new(vec![cfg.t_rgb, 3, h, w], rgb)?,
        pose: TensorBlob::new(vec![cfg.t_pose, nj, h, w], pose)?,
    })
}

/// `(clip_id, label, split)` for every clip, in manifest order.
fn clip_plan(cfg: &GenConfig) -> Vec<(String, usize, Split)> {
    let mut plan = Vec::new();
    for (split, per_class) in [
        (Split::Train, cfg.clips_per_class_train),
        (Split::Val, cfg.clips_per_class_val),
        (Split::Test, cfg.clips_per_class_test),
    ] {
        for k in 0..cfg.num_classes {
            for i in 0..per_class {
                plan.push((format!("{split}_c{k:02}_{i:04}"), k, split));
            }
        }
    }
    plan
}

pub fn clip_jitter_seed(cfg: &GenConfig, clip_id: &str) -> u64 {
    derive_seed(cfg.seed, &format!("clip/{clip_id}"))
}

/// Renders the whole dataset in memory, in manifest order.
pub fn generate_clips(cfg: &GenConfig) -> Result<Vec<(ClipSample, Split)>> {
    let templates = class_templates(cfg)?;
    clip_plan(cfg)
        .into_par_iter()
        .map(|(id, label, split)| {
            let seed = clip_jitter_seed(cfg, &id);
            render_clip(&templates[label], seed, cfg, &id, label).map(|c| (c, split))
        })
        .collect()
}

/// Writes `clips/<id>.rgb.mgt`, `clips/<id>.pose.mgt` and `manifest.txt`
/// under `out_dir`.
pub fn generate(cfg: &GenConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let clips = generate_clips(cfg)?;
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let entries = clips
        .par_iter()
        .map(|(c, split)| {
            let rgb_path = format!("clips/{}.rgb.mgt", c.clip_id);
            let pose_path = format!("clips/{}.pose.mgt", c.clip_id);
            write_tensor(out_dir.join(&rgb_path), &c.rgb)?;
            write_tensor(out_dir.join(&pose_path), &c.pose)?;
            Ok(ManifestEntry {
                clip_id: c.clip_id.clone(),
                label: c.label,
                rgb_path,
                pose_path,
                split: *split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        num_classes: cfg.num_classes,
        class_names: (0..cfg.num_classes).map(|k| format!("mg{k:02}")).collect(),
        entries,
        root: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
