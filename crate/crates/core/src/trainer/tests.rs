use std::path::Path;

use super::*;
use crate::config::parse_kv;
use crate::synthgen::{generate_clips, GenConfig};
use crate::tensorio::Split;

fn tiny_data() -> (Dataset, Dataset, NetConfig) {
    let gen = GenConfig {
        num_classes: 3,
        clips_per_class_train: 4,
        clips_per_class_val: 2,
        clips_per_class_test: 0,
        t_rgb: 4,
        t_pose: 8,
        height: 8,
        width: 8,
        n_joints: 2,
        ..GenConfig::default()
    };
    let clips = generate_clips(&gen).unwrap();
    let pick = |s: Split| {
        Dataset::from_clips(clips.iter().filter(|(_, sp)| *sp == s).map(|(c, _)| c), 3).unwrap()
    };
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    let (r, p) = train.clip_shapes();
    let mut net = NetConfig::for_clips(r, p, 3).unwrap();
    for b in [&mut net.rgb, &mut net.pose] {
        b.stage_channels = vec![4, 6];
        b.embed_dim = 5;
    }
    net.fusion.hidden = 3;
    net.fusion.lateral_channels = 2;
    (train, val, net)
}

fn quick(stage: Stage) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 5,
        lr: 0.05,
        lr_drop_epochs: vec![2],
        stage,
        ..TrainConfig::default()
    }
}

fn bits(p: &ParamStore) -> Vec<(String, Vec<u64>)> {
    p.iter()
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    for (epochs, lr) in [(0..8, 0.0075), (8..22, 0.00075), (22..30, 0.000075)] {
        for e in epochs {
            assert_eq!(lr_at(e, &cfg), lr, "epoch {e}");
        }
    }
    let flat = TrainConfig {
        lr_drop_factor: 1.0,
        ..cfg
    };
    assert!((0..30).all(|e| lr_at(e, &flat) == 0.0075));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_drop_epochs: vec![22, 8],
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_drop_epochs: vec![8, 8],
            ..TrainConfig::default()
        },
        TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    // drops past the last epoch never fire
    let short = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    assert!(short.validate().is_ok());
    assert_eq!(lr_at(1, &short), short.lr);
}

#[test]
fn config_round_trips_through_text() {
    let cfg = TrainConfig {
        alpha: 0.25,
        stage: Stage::PoseOnly,
        prm_branch: PrmBranch::Rgb,
        lr_drop_epochs: vec![],
        ..TrainConfig::default()
    };
    let text = crate::config::to_kv_text(&cfg.prefixed_entries("train."));
    let mut back = TrainConfig::default();
    back.apply(&parse_kv(&text, Path::new("t")).unwrap(), "train.").unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn prm_branches_follow_stage_and_flags() {
    let mut cfg = TrainConfig::default();
    assert_eq!(cfg.prm_branches(), vec!["rgb", "pose"]);
    cfg.prm_branch = PrmBranch::Pose;
    assert_eq!(cfg.prm_branches(), vec!["pose"]);
    cfg.stage = Stage::PoseOnly;
    assert!(cfg.prm_branches().is_empty());
    cfg.prm_in_pretrain = true;
    assert_eq!(cfg.prm_branches(), vec!["pose"]);
    cfg.stage = Stage::RgbOnly;
    assert!(cfg.prm_branches().is_empty());
}

#[test]
fn same_seed_same_record() {
    let (train_set, val, net) = tiny_data();
    let cfg = quick(Stage::Joint);
    let a = train(&train_set, &val, &net, &cfg, Init::Fresh).unwrap();
    let b = train(&train_set, &val, &net, &cfg, Init::Fresh).unwrap();
    assert_eq!(a.record.to_tsv(), b.record.to_tsv());
    assert_eq!(bits(&a.last.params), bits(&b.last.params));
    assert_eq!(a.record.rows.len(), 3);
    assert!(a.record.rows.iter().all(|r| r.pr > 0.0));
    assert_eq!(a.record.drift.len(), 3 * 2);
}

#[test]
fn zero_alpha_matches_disabled_refinement() {
    let (train_set, val, net) = tiny_data();
    let off = TrainConfig {
        prm: false,
        ..quick(Stage::Joint)
    };
    let zero = TrainConfig {
        alpha: 0.0,
        ..quick(Stage::Joint)
    };
    let a = train(&train_set, &val, &net, &off, Init::Fresh).unwrap();
    let b = train(&train_set, &val, &net, &zero, Init::Fresh).unwrap();
    assert_eq!(bits(&a.last.params), bits(&b.last.params));
    assert!(a.last.banks.is_empty());
    assert_eq!(b.last.banks.len(), 2);
    assert!(b.record.rows.iter().all(|r| r.pr > 0.0 && r.total == r.ce));

    let on = train(&train_set, &val, &net, &quick(Stage::Joint), Init::Fresh).unwrap();
    assert_ne!(bits(&on.last.params), bits(&a.last.params));
}

#[test]
fn single_branch_stage_touches_only_its_branch() {
    let (train_set, val, net) = tiny_data();
    let out = train(&train_set, &val, &net, &quick(Stage::RgbOnly), Init::Fresh).unwrap();
    let fresh = init_params(&net, 7).unwrap();
    for (name, t) in out.last.params.iter() {
        let unchanged = fresh.get(name).unwrap() == t;
        // the embedding head only learns through the refinement loss
        let trained = name.starts_with("rgb.") && !name.starts_with("rgb.embed");
        assert_eq!(unchanged, !trained, "{name}");
    }
    assert!(out.record.rows[0].train.pose.is_none());
    assert!(out.last.banks.is_empty());
    assert!(out.record.to_tsv().lines().nth(1).unwrap().contains("\t-\t"));
}

#[test]
fn joint_init_copies_branch_weights_only() {
    let (train_set, val, net) = tiny_data();
    let rgb = train(&train_set, &val, &net, &quick(Stage::RgbOnly), Init::Fresh).unwrap();
    let pose = train(&train_set, &val, &net, &quick(Stage::PoseOnly), Init::Fresh).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        lr_drop_epochs: vec![],
        lr: 1e-300,
        ..quick(Stage::Joint)
    };
    let joint = train(
        &train_set,
        &val,
        &net,
        &cfg,
        Init::FromBranches {
            rgb: &rgb.best,
            pose: &pose.best,
        },
    )
    .unwrap();
    let p = &joint.last.params;
    let fresh = init_params(&net, cfg.seed).unwrap();
    for (name, t) in p.iter() {
        let want = if name.starts_with("rgb.") {
            rgb.best.params.get(name).unwrap()
        } else if name.starts_with("pose.") {
            pose.best.params.get(name).unwrap()
        } else {
            fresh.get(name).unwrap()
        };
        assert!(t.max_abs_diff(want) < 1e-200, "{name}");
    }
    let iv = joint.record.initial_val;
    assert_eq!(iv.rgb, Some(rgb.record.rows[rgb.best.epoch].val.rgb.unwrap()));
}

#[test]
fn flat_accuracy_keeps_earliest_best() {
    let (train_set, val, net) = tiny_data();
    let cfg = TrainConfig {
        lr: 1e-300,
        lr_drop_epochs: vec![],
        ..quick(Stage::Joint)
    };
    let out = train(&train_set, &val, &net, &cfg, Init::Fresh).unwrap();
    assert!(out.record.rows.windows(2).all(|w| w[0].val.fused == w[1].val.fused));
    assert_eq!(out.record.best_epoch, 0);
    assert_eq!(out.best.epoch, 0);
}

#[test]
fn evaluation_outputs_are_consistent() {
    let (train_set, val, net) = tiny_data();
    let out = train(&train_set, &val, &net, &quick(Stage::Joint), Init::Fresh).unwrap();
    let rep = evaluate(&out.best, &val).unwrap();
    for (k, row) in rep.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), val.labels.iter().filter(|&&l| l == k).count());
    }
    for i in 0..rep.predictions.len() {
        let s: f64 = rep.predictions.row(i).iter().map(|&v| f64::from(v)).sum();
        assert!((s - 1.0).abs() <= 1e-5);
    }
    assert_eq!(rep.metrics.fused, out.record.rows[out.best.epoch].val.fused);
    let diag: usize = (0..3).map(|k| rep.confusion[k][k]).sum();
    assert_eq!(diag as f64 / val.len() as f64, rep.metrics.fused);
}

#[test]
fn record_tsv_round_trips() {
    let (train_set, val, net) = tiny_data();
    let out = train(&train_set, &val, &net, &quick(Stage::PoseOnly), Init::Fresh).unwrap();
    let rows = RunRecord::parse_tsv(&out.record.to_tsv(), Path::new("r")).unwrap();
    assert_eq!(rows, out.record.rows);
}

fn pred(ids: &[&str], rows: &[f32], k: usize) -> PredictionFile {
    PredictionFile::new(
        ids.iter().map(|s| s.to_string()).collect(),
        TensorBlob::new(vec![ids.len(), k], rows.to_vec()).unwrap(),
    )
    .unwrap()
}

#[test]
fn ensemble_examples() {
    let a = pred(&["x"], &[1.0, 0.0], 2);
    let b = pred(&["x"], &[0.0, 1.0], 2);
    assert_eq!(ensemble(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap().row(0), &[0.5, 0.5]);
    let p = pred(&["x", "y"], &[0.2, 0.3, 0.5, 0.7, 0.2, 0.1], 3);
    assert_eq!(ensemble(std::slice::from_ref(&p), &[1.0]).unwrap(), p);
    assert_eq!(ensemble(&[p.clone(), p.clone()], &[0.3, 2.0]).unwrap(), p);
    let other = pred(&["y", "x"], &[0.2, 0.3, 0.5, 0.7, 0.2, 0.1], 3);
    assert!(ensemble(&[p.clone(), other], &[1.0, 1.0]).is_err());
    assert!(ensemble(&[p.clone()], &[0.0]).is_err());
    assert!(ensemble(&[p.clone(), p], &[1.0]).is_err());
}

#[test]
fn variants_toggle_refinement_and_fusion() {
    let (_, _, net) = tiny_data();
    let base = quick(Stage::RgbOnly);
    let got: Vec<(bool, bool, Stage)> = Variant::ALL
        .iter()
        .map(|v| {
            let (n, t) = v.configure(&net, &base);
            (t.prm, n.fusion.enabled, t.stage)
        })
        .collect();
    assert_eq!(
        got,
        [
            (false, false, Stage::Joint),
            (true, false, Stage::Joint),
            (true, true, Stage::Joint)
        ]
    );
}

#[test]
fn mechanism_delta_fills_table() {
    let (train, val, net) = tiny_data();
    let data = [train, val.clone(), val];
    let cfg = TrainConfig {
        epochs: 1,
        lr_drop_epochs: vec![],
        ..quick(Stage::Joint)
    };
    let mut seen = 0;
    let table = mechanism_delta(&data, &net, &cfg, &[1, 2], |_| seen += 1).unwrap();
    assert_eq!((seen, table.rows.len()), (6, 6));
    let summary = table.summary();
    assert_eq!(summary.len(), 3);
    for (v, mean, std) in &summary {
        let xs: Vec<f64> = table.rows.iter().filter(|r| r.variant == *v).map(|r| r.test_fused).collect();
        assert!((mean - (xs[0] + xs[1]) / 2.0).abs() < 1e-15);
        assert!((std - (xs[0] - xs[1]).abs() / 2.0).abs() < 1e-15);
    }
    let md = table.to_markdown();
    assert_eq!(md.lines().count(), 5);
    assert!(md.contains("| CE+PRM+fusion |"));
    assert_eq!(table.to_tsv().lines().count(), 7);
    assert!(mechanism_delta(&data, &net, &cfg, &[], |_| {}).is_err());
}

#[test]
fn ambiguous_preset_is_valid() {
    let gen = ambiguous_dataset(3);
    gen.validate().unwrap();
    assert_eq!(gen.ambiguous_pairs.len(), 2);
}

fn normalized_rows(raw: &[f32], k: usize) -> Vec<f32> {
    raw.chunks(k)
        .flat_map(|r| {
            let s: f32 = r.iter().sum();
            r.iter().map(move |v| v / s).collect::<Vec<_>>()
        })
        .collect()
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn ensemble_rows_stay_normalized(
        n in 1usize..5,
        k in 2usize..5,
        raw in proptest::collection::vec(0.05f32..1.0, 3 * 4 * 4),
        weights in proptest::collection::vec(0.1f64..5.0, 3),
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let files: Vec<PredictionFile> = (0..3)
            .map(|f| {
                let rows = normalized_rows(&raw[f * 16..f * 16 + n * k], k);
                PredictionFile::new(ids.clone(), TensorBlob::new(vec![n, k], rows).unwrap()).unwrap()
            })
            .collect();
        let out = ensemble(&files, &weights).unwrap();
        for i in 0..n {
            let s: f64 = out.row(i).iter().map(|&v| f64::from(v)).sum();
            proptest::prop_assert!((s - 1.0).abs() <= 1e-5);
        }
        proptest::prop_assert_eq!(&ensemble(&files[..1], &weights[..1]).unwrap(), &files[0]);
    }
}
