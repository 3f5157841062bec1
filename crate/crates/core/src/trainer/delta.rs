//! Mechanism-delta comparison: the same joint network trained with plain
//! cross-entropy, with the refinement loss added, and with the refinement
//! loss plus cross-modal fusion, over several training seeds.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{NetConfig, Stage};
use crate::synthgen::{generate_clips, AmbiguousPair, GenConfig};
use crate::tensorio::Split;

use super::{metrics, predict, train, Init, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    CrossEntropy,
    WithRefinement,
    WithRefinementAndFusion,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::CrossEntropy,
        Variant::WithRefinement,
        Variant::WithRefinementAndFusion,
    ];

    /// Applies the variant's switches to copies of the base configs.
    pub fn configure(self, net: &NetConfig, train: &TrainConfig) -> (NetConfig, TrainConfig) {
        let (mut net, mut train) = (net.clone(), train.clone());
        train.stage = Stage::Joint;
        train.prm = self != Variant::CrossEntropy;
        net.fusion.enabled = self == Variant::WithRefinementAndFusion;
        (net, train)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::CrossEntropy => "CE",
            Variant::WithRefinement => "CE+PRM",
            Variant::WithRefinementAndFusion => "CE+PRM+fusion",
        })
    }
}

/// The ambiguous-pairs dataset: two class pairs whose templates differ only
/// by a small phase offset, rendered with heavy jitter.
pub fn ambiguous_dataset(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        ambiguous_pairs: vec![
            AmbiguousPair {
                class_a: 0,
                class_b: 1,
                offset: 0.05,
            },
            AmbiguousPair {
                class_a: 2,
                class_b: 3,
                offset: 0.1,
            },
        ],
        intra_noise: 0.3,
        ..GenConfig::default()
    }
}

/// Train, val and test splits generated in memory.
pub fn splits(gen: &GenConfig) -> Result<[Dataset; 3]> {
    let clips = generate_clips(gen)?;
    let pick = |s: Split| {
        Dataset::from_clips(
            clips.iter().filter(|(_, sp)| *sp == s).map(|(c, _)| c),
            gen.num_classes,
        )
    };
    Ok([pick(Split::Train)?, pick(Split::Val)?, pick(Split::Test)?])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_fused: f64,
    pub test_fused: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    /// Mean and population standard deviation of test top-1 per variant.
    pub fn summary(&self) -> Vec<(Variant, f64, f64)> {
        Variant::ALL
            .iter()
            .filter_map(|&v| {
                let xs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == v)
                    .map(|r| r.test_fused)
                    .collect();
                if xs.is_empty() {
                    return None;
                }
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                Some((v, mean, var.sqrt()))
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut s = String::from("| variant |");
        for seed in &seeds {
            s += &format!(" seed {seed} |");
        }
        s += " mean | std |\n|---|";
        s += &"---:|".repeat(seeds.len() + 2);
        s.push('\n');
        for (v, mean, std) in self.summary() {
            s += &format!("| {v} |");
            for seed in &seeds {
                match self.rows.iter().find(|r| r.variant == v && r.seed == *seed) {
                    Some(r) => s += &format!(" {:.3} |", r.test_fused),
                    None => s += " - |",
                }
            }
            s += &format!(" {mean:.3} | {std:.3} |\n");
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tseed\tbest_epoch\tval_fused\ttest_fused\n");
        for r in &self.rows {
            s += &format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.variant, r.seed, r.best_epoch, r.val_fused, r.test_fused
            );
        }
        s
    }
}

/// Trains every variant from scratch for each seed and scores the best-val
/// checkpoint on the test split. `on_row` sees each row as it completes.
pub fn mechanism_delta(
    data: &[Dataset; 3],
    net: &NetConfig,
    base: &TrainConfig,
    seeds: &[u64],
    mut on_row: impl FnMut(&DeltaRow),
) -> Result<DeltaTable> {
    if seeds.is_empty() {
        return Err(Error::validation("mechanism delta needs at least one seed"));
    }
    let [train_set, val_set, test_set] = data;
    let mut table = DeltaTable::default();
    for &seed in seeds {
        for v in Variant::ALL {
            let (net_v, mut cfg) = v.configure(net, base);
            cfg.seed = seed;
            let out = train(train_set, val_set, &net_v, &cfg, Init::Fresh)?;
            let pred = predict(&out.best.params, &net_v, Stage::Joint, test_set)?;
            let row = DeltaRow {
                variant: v,
                seed,
                best_epoch: out.record.best_epoch,
                val_fused: out.record.best_val_fused,
                test_fused: metrics(&pred, &test_set.labels)?.fused,
            };
            on_row(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}
