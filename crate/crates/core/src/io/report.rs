use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchMethod;
use crate::metrics::{BarrierReport, RankReport, RatioReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown format `{other}` (json or csv)"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Json => "json",
            Format::Csv => "csv",
        })
    }
}

/// Naive and aligned curves for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub method: MatchMethod,
    pub naive: BarrierReport,
    pub aligned: BarrierReport,
    pub ratios: RatioReport,
}

/// One line of a multi-pair ratio table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub pair: String,
    pub method: MatchMethod,
    pub naive_loss_barrier: f64,
    pub aligned_loss_barrier: f64,
    pub ratios: RatioReport,
}

impl RatioRow {
    pub fn from_comparison(pair: impl Into<String>, cmp: &ComparisonReport) -> Self {
        Self {
            pair: pair.into(),
            method: cmp.method,
            naive_loss_barrier: cmp.naive.loss_barrier,
            aligned_loss_barrier: cmp.aligned.loss_barrier,
            ratios: cmp.ratios,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Barrier(&'a BarrierReport),
    Comparison(&'a ComparisonReport),
    Rank(&'a RankReport),
    Ratios(&'a [RatioRow]),
}

/// Shortest representation that parses back to the same double.
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

const SUMMARY_COLUMNS: [&str; 4] = ["loss_barrier", "loss_auc", "acc_barrier", "acc_auc"];

fn summary_cells(r: &BarrierReport) -> [String; 4] {
    [num(r.loss_barrier), num(r.loss_auc), opt(r.acc_barrier), opt(r.acc_auc)]
}

fn curve_cells(r: &BarrierReport, i: usize) -> [String; 4] {
    let chord = r.curve.chord();
    [
        num(r.curve.losses[i]),
        num(chord[i]),
        opt(r.curve.accuracies.as_ref().map(|a| a[i])),
        num(r.curve.losses[i] - chord[i]),
    ]
}

fn write_rows(out: impl Write, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn blanks(n: usize) -> impl Iterator<Item = String> {
    std::iter::repeat_n(String::new(), n)
}

/// Curve rows carry `t,loss,chord,accuracy,barrier` (barrier = loss − chord);
/// the final row has `t = summary` and fills only the summary columns.
fn barrier_csv(r: &BarrierReport, out: impl Write) -> Result<()> {
    let header: Vec<String> = ["t", "loss", "chord", "accuracy", "barrier"]
        .into_iter()
        .chain(SUMMARY_COLUMNS)
        .map(String::from)
        .collect();
    let mut rows: Vec<Vec<String>> = (0..r.curve.ts.len())
        .map(|i| {
            std::iter::once(num(r.curve.ts[i]))
                .chain(curve_cells(r, i))
                .chain(blanks(4))
                .collect()
        })
        .collect();
    rows.push(
        std::iter::once("summary".to_string())
            .chain(blanks(4))
            .chain(summary_cells(r))
            .collect(),
    );
    write_rows(out, header, rows)
}

/// Both curves side by side, then `naive`, `aligned` and `ratio` summary rows
/// (ratios ×100, blank when undefined).
fn comparison_csv(r: &ComparisonReport, out: impl Write) -> Result<()> {
    let mut header = vec!["t".to_string()];
    for side in ["naive", "aligned"] {
        for col in ["loss", "chord", "accuracy", "barrier"] {
            header.push(format!("{side}_{col}"));
        }
    }
    header.extend(SUMMARY_COLUMNS.map(String::from));
    let mut rows: Vec<Vec<String>> = (0..r.naive.curve.ts.len())
        .map(|i| {
            std::iter::once(num(r.naive.curve.ts[i]))
                .chain(curve_cells(&r.naive, i))
                .chain(curve_cells(&r.aligned, i))
                .chain(blanks(4))
                .collect()
        })
        .collect();
    for (label, cells) in [("naive", summary_cells(&r.naive)), ("aligned", summary_cells(&r.aligned))] {
        rows.push(std::iter::once(label.to_string()).chain(blanks(8)).chain(cells).collect());
    }
    let q = &r.ratios;
    rows.push(
        std::iter::once("ratio".to_string())
            .chain(blanks(8))
            .chain([opt(q.loss_barrier), opt(q.loss_auc), opt(q.acc_barrier), opt(q.acc_auc)])
            .collect(),
    );
    write_rows(out, header, rows)
}

/// One row per ordering (`tau` written as space-separated images), then a
/// summary row with `tau = summary`.
fn rank_csv(r: &RankReport, out: impl Write) -> Result<()> {
    let header: Vec<String> = [
        "tau", "barrier", "rank", "l_hat", "l_naive", "l_top1", "chosen_tau", "top1_tau", "method",
    ]
    .map(String::from)
    .to_vec();
    let perm = |p: &crate::symmetry::Permutation| {
        p.as_slice().iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    };
    let mut rows: Vec<Vec<String>> = r
        .permutations
        .iter()
        .zip(&r.barriers)
        .map(|(p, &b)| {
            let rank = 1 + r.barriers.iter().filter(|&&o| o < b).count();
            vec![perm(p), num(b), rank.to_string()]
                .into_iter()
                .chain(blanks(6))
                .collect()
        })
        .collect();
    rows.push(vec![
        "summary".into(),
        num(r.chosen_barrier),
        r.rank.to_string(),
        opt(r.l_hat),
        num(r.l_naive),
        num(r.l_top1),
        perm(&r.chosen_tau),
        perm(&r.top1_tau),
        r.method.map(|m| m.to_string()).unwrap_or_default(),
    ]);
    write_rows(out, header, rows)
}

fn ratios_csv(table: &[RatioRow], out: impl Write) -> Result<()> {
    let header: Vec<String> = [
        "pair",
        "method",
        "naive_loss_barrier",
        "aligned_loss_barrier",
        "loss_barrier_ratio",
        "loss_auc_ratio",
        "acc_barrier_ratio",
        "acc_auc_ratio",
    ]
    .map(String::from)
    .to_vec();
    let rows = table
        .iter()
        .map(|r| {
            vec![
                r.pair.clone(),
                r.method.to_string(),
                num(r.naive_loss_barrier),
                num(r.aligned_loss_barrier),
                opt(r.ratios.loss_barrier),
                opt(r.ratios.loss_auc),
                opt(r.ratios.acc_barrier),
                opt(r.ratios.acc_auc),
            ]
        })
        .collect();
    write_rows(out, header, rows)
}

pub fn write_report(report: Report<'_>, format: Format, out: impl Write) -> Result<()> {
    match format {
        Format::Json => {
            let mut out = out;
            let text = match report {
                Report::Barrier(r) => serde_json::to_string_pretty(r),
                Report::Comparison(r) => serde_json::to_string_pretty(r),
                Report::Rank(r) => serde_json::to_string_pretty(r),
                Report::Ratios(r) => serde_json::to_string_pretty(r),
            }
            .map_err(|e| Error::Malformed(e.to_string()))?;
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
            Ok(())
        }
        Format::Csv => match report {
            Report::Barrier(r) => barrier_csv(r, out),
            Report::Comparison(r) => comparison_csv(r, out),
            Report::Rank(r) => rank_csv(r, out),
            Report::Ratios(r) => ratios_csv(r, out),
        },
    }
}

pub fn export_report(path: impl AsRef<Path>, report: Report<'_>, format: Format) -> Result<()> {
    let file = File::create(path)?;
    write_report(report, format, std::io::BufWriter::new(file))
}
