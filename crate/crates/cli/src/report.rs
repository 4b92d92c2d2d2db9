//! `report` and `inspect-clip`: read-only views over run directories.

use crate::run::{CLIP_EVENTS_FILE, CONFIG_FILE, EVAL_FILE, METRICS_FILE};
use crate::{CmdResult, Failure};
use rltricks::config::parse_kv;
use rltricks::surrogate::ClipDirection;
use rltricks::trainer::{ClipEventRecord, EvalRecord, MetricsRecord};
use rltricks::vocab::{TokenId, Vocabulary};
use serde::de::DeserializeOwned;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const REPORT_HEADER: [&str; 8] = [
    "run",
    "name",
    "peak_acc",
    "final_acc",
    "mean_entropy",
    "clip_frac_high",
    "clip_frac_low",
    "repeat_ratio_mean",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub peak_acc: f64,
    pub final_acc: f64,
    pub mean_entropy: f64,
    pub clip_frac_high: f64,
    pub clip_frac_low: f64,
    pub repeat_ratio_mean: f64,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn config_value(run: &Path, key: &str) -> Option<String> {
    let text = fs::read_to_string(run.join(CONFIG_FILE)).ok()?;
    parse_kv(&text).ok()?.into_iter().find(|(k, _)| k == key).map(|(_, v)| v)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Summarizes one run. Accuracy comes from heldout evals, or from
/// `train_acc` when the run has none.
pub fn summarize(run: &Path) -> anyhow::Result<RunSummary> {
    let metrics: Vec<MetricsRecord> = read_jsonl(&run.join(METRICS_FILE))?;
    if metrics.is_empty() {
        anyhow::bail!("{} has no records", run.join(METRICS_FILE).display());
    }
    let evals: Vec<EvalRecord> = match run.join(EVAL_FILE).exists() {
        true => read_jsonl(&run.join(EVAL_FILE))?,
        false => Vec::new(),
    };
    let acc: Vec<f64> = if evals.is_empty() {
        metrics.iter().map(|m| m.train_acc).collect()
    } else {
        evals.iter().map(|e| e.accuracy).collect()
    };
    Ok(RunSummary {
        name: config_value(run, "run.name").unwrap_or_default(),
        peak_acc: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_acc: *acc.last().expect("nonempty"),
        mean_entropy: mean(metrics.iter().map(|m| m.entropy)),
        clip_frac_high: mean(metrics.iter().map(|m| m.clip_frac_high)),
        clip_frac_low: mean(metrics.iter().map(|m| m.clip_frac_low)),
        repeat_ratio_mean: mean(metrics.iter().map(|m| m.repeat_ratio)),
    })
}

/// Writes the comparison CSV. Unreadable runs get a row named `invalid` and
/// a warning on stderr.
pub fn report<W: Write>(runs: &[impl AsRef<Path>], out: W) -> CmdResult {
    if runs.is_empty() {
        return Err(Failure::validation("report needs at least one run directory"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for run in runs {
        let run = run.as_ref();
        let label = run.display().to_string();
        match summarize(run) {
            Ok(s) => w.write_record([
                label,
                s.name,
                s.peak_acc.to_string(),
                s.final_acc.to_string(),
                s.mean_entropy.to_string(),
                s.clip_frac_high.to_string(),
                s.clip_frac_low.to_string(),
                s.repeat_ratio_mean.to_string(),
            ])?,
            Err(e) => {
                eprintln!("warning: {label}: {e:#}");
                let mut row = vec![label, "invalid".to_string()];
                row.resize(REPORT_HEADER.len(), String::new());
                w.write_record(row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-token clip counts, sorted by total descending then token id.
pub fn clip_counts(events: &[ClipEventRecord]) -> Vec<(TokenId, usize, usize)> {
    let mut counts: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
    for e in events {
        let c = counts.entry(e.token).or_default();
        match e.dir {
            ClipDirection::Upper => c.0 += 1,
            ClipDirection::Lower => c.1 += 1,
        }
    }
    let mut rows: Vec<_> = counts.into_iter().map(|(t, (u, l))| (t, u, l)).collect();
    rows.sort_by(|a, b| (b.1 + b.2).cmp(&(a.1 + a.2)).then(a.0.cmp(&b.0)));
    rows
}

pub fn inspect_clip<W: Write>(run: &Path, top_k: usize, out: W) -> CmdResult {
    let path = run.join(CLIP_EVENTS_FILE);
    if !path.exists() {
        return Err(Failure::validation(format!("{} not found", path.display())));
    }
    let events: Vec<ClipEventRecord> = read_jsonl(&path).map_err(Failure::Runtime)?;
    let vocab = config_value(run, "vocab.size")
        .and_then(|v| v.parse().ok())
        .map_or(Ok(Vocabulary::default()), Vocabulary::new)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["token", "glyph", "upper", "lower"])?;
    for (token, upper, lower) in clip_counts(&events).into_iter().take(top_k) {
        w.write_record([token.to_string(), vocab.glyph(token), upper.to_string(), lower.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
