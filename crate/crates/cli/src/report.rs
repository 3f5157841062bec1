//! `report`: loss curves, accuracy curves, prototype drift and a confusion
//! matrix as PNGs, plus `report.md` tying them together.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mgproto::tensorio::Split;
use mgproto::trainer::{EpochRow, RunRecord};
use mgproto::{Error, Result};

use crate::args::ReportArgs;
use crate::commands::{confusion_tsv, eval_split};
use crate::manifest::{self, RunManifest};
use crate::plot::{heatmap, line_chart, Series, PALETTE};

const COLOR_NAMES: [&str; 8] = ["blue", "orange", "green", "red", "purple", "brown", "pink", "grey"];
const W: u32 = 720;
const H: u32 = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct DriftPoint {
    pub epoch: usize,
    pub branch: String,
    pub class: usize,
    pub cos: f64,
}

pub fn parse_drift(text: &str, path: &Path) -> Result<Vec<DriftPoint>> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let bad = || Error::parse(path, n + 1, "malformed drift row");
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(DriftPoint {
                epoch: f[0].parse().map_err(|_| bad())?,
                branch: f[1].to_string(),
                class: f[2].parse().map_err(|_| bad())?,
                cos: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn series(label: &str, rows: &[EpochRow], f: impl Fn(&EpochRow) -> Option<f64>) -> Option<Series> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
        .collect();
    (!points.is_empty()).then(|| Series {
        label: label.into(),
        points,
    })
}

fn legend(series: &[Series]) -> String {
    series
        .iter()
        .zip(COLOR_NAMES.iter().cycle())
        .map(|(s, c)| format!("{c} = {}", s.label))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Value of a `key value` line in `summary.txt`.
fn summary_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix(' '))
}

pub fn drift_series(points: &[DriftPoint]) -> Vec<Series> {
    let mut keys: Vec<(String, usize)> = points.iter().map(|p| (p.branch.clone(), p.class)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(b, k)| Series {
            label: format!("{b} class {k}"),
            points: points
                .iter()
                .filter(|p| p.branch == b && p.class == k)
                .map(|p| (p.epoch as f64, p.cos))
                .collect(),
        })
        .collect()
}

pub fn write_report(args: &ReportArgs) -> Result<PathBuf> {
    let run = RunManifest::read(&args.run.join(manifest::FILE))?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join("report"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let record_path = args.run.join("record.tsv");
    let rows = RunRecord::parse_tsv(&read(&record_path)?, &record_path)?;
    if rows.is_empty() {
        return Err(Error::validation(format!("{} has no epochs", record_path.display())));
    }
    let drift_path = args.run.join("proto_drift.tsv");
    let drift = if drift_path.exists() {
        parse_drift(&read(&drift_path)?, &drift_path)?
    } else {
        Vec::new()
    };

    let loss: Vec<Series> = [
        series("L_CE", &rows, |r| Some(r.ce)),
        series("L_PR", &rows, |r| Some(r.pr)),
        series("L_total", &rows, |r| Some(r.total)),
    ]
    .into_iter()
    .flatten()
    .collect();
    line_chart(&loss, W, H).save(&out.join("loss.png"))?;

    let acc: Vec<Series> = [
        series("train fused", &rows, |r| Some(r.train.fused)),
        series("val fused", &rows, |r| Some(r.val.fused)),
        series("val rgb", &rows, |r| r.val.rgb),
        series("val pose", &rows, |r| r.val.pose),
    ]
    .into_iter()
    .flatten()
    .collect();
    line_chart(&acc, W, H).save(&out.join("accuracy.png"))?;

    let drift_s = drift_series(&drift);
    line_chart(&drift_s, W, H).save(&out.join("drift.png"))?;

    let data = args
        .data
        .clone()
        .or_else(|| run.path("data").map(Path::to_path_buf))
        .ok_or_else(|| Error::validation("no dataset: pass --data or use a train run"))?;
    let split = Split::from(args.split);
    let eval = eval_split(&data, &args.run.join("best"), split)?;
    let cell = 44;
    heatmap(&eval.confusion, cell).save(&out.join("confusion.png"))?;
    fs::write(out.join("confusion.tsv"), confusion_tsv(&eval.confusion))
        .map_err(|e| Error::io(out.join("confusion.tsv"), e))?;

    let last = rows.last().expect("checked non-empty");
    let summary_path = args.run.join("summary.txt");
    let best = read(&summary_path)
        .ok()
        .and_then(|t| summary_value(&t, "best_epoch").map(str::to_string));
    let o = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut md = String::new();
    writeln!(md, "# Run report\n").unwrap();
    writeln!(md, "- run: `{}`", args.run.display()).unwrap();
    writeln!(md, "- git: `{}`", run.git_describe).unwrap();
    writeln!(md, "- seed: {}", run.seed).unwrap();
    writeln!(md, "- started: {}", run.started).unwrap();
    if let Some(f) = &run.finished {
        writeln!(md, "- finished: {f}").unwrap();
    }
    writeln!(md, "- epochs: {}", rows.len()).unwrap();
    if let Some(b) = best {
        writeln!(md, "- best epoch (val fused): {b}").unwrap();
    }
    writeln!(md, "\n## Top-1 accuracy\n").unwrap();
    writeln!(md, "| | rgb | pose | fused |\n|---|---:|---:|---:|").unwrap();
    writeln!(md, "| final train | {} | {} | {:.4} |", o(last.train.rgb), o(last.train.pose), last.train.fused).unwrap();
    writeln!(md, "| final val | {} | {} | {:.4} |", o(last.val.rgb), o(last.val.pose), last.val.fused).unwrap();
    let m = &eval.metrics;
    writeln!(md, "| best checkpoint, {split} | {} | {} | {:.4} |", o(m.rgb), o(m.pose), m.fused).unwrap();
    writeln!(md, "\n## Losses\n\n![losses](loss.png)\n\n{}.", legend(&loss)).unwrap();
    writeln!(md, "\n## Accuracy per epoch\n\n![accuracy](accuracy.png)\n\n{}.", legend(&acc)).unwrap();
    writeln!(
        md,
        "\n## Prototype drift\n\nCosine similarity of each prototype to its initial value.\n\n![drift](drift.png)\n"
    )
    .unwrap();
    if drift_s.is_empty() {
        writeln!(md, "No prototype banks in this run.").unwrap();
    } else {
        writeln!(md, "{}.", legend(&drift_s)).unwrap();
        if drift_s.len() > PALETTE.len() {
            writeln!(md, " Colors repeat after {} series.", PALETTE.len()).unwrap();
        }
    }
    writeln!(
        md,
        "\n## Confusion matrix ({split}, best checkpoint)\n\nRows are true classes, columns predictions.\n\n![confusion](confusion.png)\n"
    )
    .unwrap();
    let k = eval.confusion.len();
    write!(md, "| |").unwrap();
    for j in 0..k {
        write!(md, " {j} |").unwrap();
    }
    writeln!(md, "\n|---|{}", "---:|".repeat(k)).unwrap();
    for (i, row) in eval.confusion.iter().enumerate() {
        write!(md, "| {i} |").unwrap();
        for v in row {
            write!(md, " {v} |").unwrap();
        }
        md.push('\n');
    }
    writeln!(md, "\n## Configuration\n\n```text\n{}```", run.to_text()).unwrap();
    let md_path = out.join("report.md");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    println!("report written to {}", md_path.display());
    Ok(md_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_round_trips_from_record_text() {
        let text = "epoch\tbranch\tclass\tcos\n1\trgb\t0\t0.5\n1\trgb\t1\t1\n2\trgb\t0\t0.25\n";
        let pts = parse_drift(text, Path::new("d")).unwrap();
        assert_eq!(pts.len(), 3);
        let s = drift_series(&pts);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points, vec![(1.0, 0.5), (2.0, 0.25)]);
        assert!(parse_drift("h\n1\trgb\n", Path::new("d")).is_err());
    }

    #[test]
    fn legend_names_colors_in_order() {
        let s = |l: &str| Series {
            label: l.into(),
            points: vec![],
        };
        assert_eq!(legend(&[s("a"), s("b")]), "blue = a, orange = b");
    }
}
