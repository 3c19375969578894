//! CSV and JSON report writers. CSV output depends only on the results, so
//! identical inputs give identical bytes; JSON reports carry a timestamp.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::error::{CwkError, Result};
use crate::experiment::{
    profile_table, Bisection, Experiment, ProfileResult, ScheduleResult, Summary, SweepRow,
};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const FRAMES_CSV: &str = "frames.csv";
pub const REPORT_JSON: &str = "report.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const BISECTION_CSV: &str = "bisection.csv";
pub const PROFILE_CSV: &str = "profile.csv";
pub const PROFILE_SERIES_CSV: &str = "profile_series.csv";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CwkError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CwkError::io(&path, e))?;
    Ok(path)
}

/// Renders rows with standard CSV quoting; schedule names such as
/// `fixed_rate[1,2,4]` contain commas.
fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing into memory cannot fail.
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv of utf-8 fields")
}

const SUMMARY_HEADER: [&str; 12] = [
    "schedule",
    "sequences",
    "frames",
    "mean_iu",
    "fw_iu",
    "band_mean_iu",
    "band_fw_iu",
    "compute_fraction",
    "latency",
    "latency_raw",
    "comparable_time",
    "full_frame_fraction",
];

pub fn summary_csv(results: &[ScheduleResult]) -> String {
    to_csv(
        &SUMMARY_HEADER,
        results.iter().map(|r| {
            let s = &r.summary;
            vec![
                r.schedule.to_string(),
                r.runs.len().to_string(),
                s.frames.to_string(),
                opt(s.mean_iu),
                opt(s.fw_iu),
                opt(s.band_mean_iu),
                opt(s.band_fw_iu),
                s.compute_fraction.to_string(),
                s.latency.to_string(),
                s.latency_raw.to_string(),
                s.comparable_time.to_string(),
                s.full_frame_fraction.to_string(),
            ]
        }),
    )
}

/// One row per schedule, sequence and frame. `executed` is a stage mask,
/// most shallow stage first.
pub fn frames_csv(results: &[ScheduleResult]) -> String {
    let header = [
        "schedule",
        "sequence",
        "frame",
        "executed",
        "cost",
        "signal",
        "output_change",
        "mean_iu",
    ];
    let rows = results.iter().flat_map(|r| {
        let name = r.schedule.to_string();
        r.runs.iter().flat_map(move |run| {
            let rep = &run.report;
            let name = name.clone();
            (0..rep.n_frames()).map(move |t| {
                vec![
                    name.clone(),
                    run.sequence.clone(),
                    t.to_string(),
                    bits(&rep.executed[t]),
                    rep.accounting.per_frame[t].to_string(),
                    opt(rep.signals[t]),
                    opt(rep.output_change[t]),
                    opt(run.frame_mean_iu[t]),
                ]
            })
        })
    });
    to_csv(&header, rows)
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn summary_json(s: &Summary) -> Value {
    json!({
        "frames": s.frames,
        "mean_iu": s.mean_iu,
        "fw_iu": s.fw_iu,
        "band_mean_iu": s.band_mean_iu,
        "band_fw_iu": s.band_fw_iu,
        "compute_fraction": s.compute_fraction,
        "latency": s.latency,
        "latency_raw": s.latency_raw,
        "comparable_time": s.comparable_time,
        "full_frame_fraction": s.full_frame_fraction,
    })
}

pub fn report_json(exp: &Experiment, results: &[ScheduleResult]) -> Value {
    let schedules: Vec<Value> = results
        .iter()
        .map(|r| {
            let sequences: Vec<Value> = r
                .runs
                .iter()
                .map(|run| {
                    let rep = &run.report;
                    json!({
                        "sequence": run.sequence,
                        "frames": rep.n_frames(),
                        "mean_iu": clockwork_core::metrics::mean_iu(&run.confusion).ok(),
                        "fw_iu": clockwork_core::metrics::fw_iu(&run.confusion).ok(),
                        "execution_counts": rep.execution_counts(),
                        "full_frame_fraction": rep.full_frame_fraction(),
                        "compute_fraction": rep.accounting.compute_fraction,
                        "latency": rep.accounting.latency,
                        "comparable_time": rep.accounting.comparable_time,
                        "executed": rep.executed.iter().map(|e| bits(e)).collect::<Vec<_>>(),
                        "signals": rep.signals,
                        "frame_mean_iu": run.frame_mean_iu,
                    })
                })
                .collect();
            json!({
                "schedule": r.schedule.to_string(),
                "groups": r.runs.first().map(|run| {
                    run.report.groups.ranges().iter().map(|g| [g.start, g.end]).collect::<Vec<_>>()
                }),
                "summary": summary_json(&r.summary),
                "sequences": sequences,
            })
        })
        .collect();
    json!({
        "name": exp.config.name,
        "generated_at": timestamp(),
        "model": exp.model.describe(),
        "cost_model": {
            "stage_cost": exp.cost.stage_cost(),
            "fusion_cost": exp.cost.fusion_cost(),
        },
        "schedules": schedules,
    })
}

/// Writes `summary.csv`, `frames.csv` and `report.json` into `dir`.
pub fn write_run(dir: &Path, exp: &Experiment, results: &[ScheduleResult]) -> Result<Vec<PathBuf>> {
    let json = serde_json::to_string_pretty(&report_json(exp, results))
        .map_err(|e| CwkError::format(dir.join(REPORT_JSON), e.to_string()))?;
    Ok(vec![
        write(dir, SUMMARY_CSV, &summary_csv(results))?,
        write(dir, FRAMES_CSV, &frames_csv(results))?,
        write(dir, REPORT_JSON, &(json + "\n"))?,
    ])
}

const SWEEP_HEADER: [&str; 5] = [
    "theta",
    "full_frame_fraction",
    "mean_iu",
    "fw_iu",
    "compute_fraction",
];

fn sweep_fields(r: &SweepRow) -> Vec<String> {
    vec![
        r.theta.to_string(),
        r.full_frame_fraction.to_string(),
        opt(r.mean_iu),
        opt(r.fw_iu),
        r.compute_fraction.to_string(),
    ]
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    to_csv(&SWEEP_HEADER, rows.iter().map(sweep_fields))
}

/// Probe trace in probing order.
pub fn bisection_csv(b: &Bisection) -> String {
    let header: Vec<&str> = std::iter::once("iteration").chain(SWEEP_HEADER).collect();
    to_csv(
        &header,
        b.trace.iter().enumerate().map(|(i, r)| {
            let mut row = vec![i.to_string()];
            row.extend(sweep_fields(r));
            row
        }),
    )
}

pub fn write_sweep(
    dir: &Path,
    rows: &[SweepRow],
    bisection: Option<&Bisection>,
) -> Result<Vec<PathBuf>> {
    let mut paths = vec![write(dir, SWEEP_CSV, &sweep_csv(rows))?];
    if let Some(b) = bisection {
        paths.push(write(dir, BISECTION_CSV, &bisection_csv(b))?);
    }
    Ok(paths)
}

/// Aggregate table: pixels row then one row per stage. `series` names the
/// per-pair file.
pub fn profile_csv(profile: &ProfileResult) -> String {
    to_csv(
        &["level", "mean", "stdev", "pairs", "series"],
        profile_table(profile)
            .into_iter()
            .map(|(level, mean, stdev, n)| {
                vec![
                    level,
                    mean.to_string(),
                    stdev.to_string(),
                    n.to_string(),
                    PROFILE_SERIES_CSV.to_string(),
                ]
            }),
    )
}

pub fn profile_series_csv(profile: &ProfileResult) -> String {
    let rows = profile.per_sequence.iter().flat_map(|(name, p)| {
        std::iter::once(("pixels".to_string(), &p.pixels))
            .chain(
                p.stages
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (format!("stage{k}"), s)),
            )
            .flat_map(move |(level, stats)| {
                stats.series.iter().enumerate().map(move |(i, d)| {
                    vec![name.clone(), level.clone(), i.to_string(), d.to_string()]
                })
            })
    });
    to_csv(&["sequence", "level", "pair", "difference"], rows)
}

pub fn write_profile(dir: &Path, profile: &ProfileResult) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write(dir, PROFILE_CSV, &profile_csv(profile))?,
        write(dir, PROFILE_SERIES_CSV, &profile_series_csv(profile))?,
    ])
}
