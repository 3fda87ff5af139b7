//! CSV outputs and the plain-text summary.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use retline_core::decode::StepStats;

use retline_core::cost::KV_TABLE_NOTE;

use crate::checks::Outcome;
use crate::train::EpochMetrics;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const VERIFY_TXT: &str = "verify.txt";
pub const FLOPS_CSV: &str = "flops.csv";
pub const MEMORY_CSV: &str = "memory.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const DECODE_CSV: &str = "decode.csv";
pub const DECODE_STATS_CSV: &str = "decode_stats.csv";

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "step", "lr", "loss", "val_cer", "val_wer"])?;
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            m.step.to_string(),
            format!("{:e}", m.lr),
            format!("{:.6}", m.loss),
            format!("{:.6}", m.val_cer),
            format!("{:.6}", m.val_wer),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_step_stats(path: &Path, stats: &[StepStats]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "backend", "beam", "mults", "adds", "live_elements"])?;
    for s in stats {
        w.write_record([
            s.step.to_string(),
            s.backend.to_string(),
            s.beam.to_string(),
            s.mults.to_string(),
            s.adds.to_string(),
            s.live_elements.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn verify_text(outcomes: &[Outcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&o.line());
        s.push('\n');
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    s.push_str(&format!("{} checks, {} passed, {failed} failed\n", outcomes.len(), outcomes.len() - failed));
    s
}

fn read_rows(path: &Path) -> Result<Option<(Vec<String>, Vec<Vec<String>>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(String::from).collect()))
        .collect::<Result<_>>()?;
    Ok(Some((header, rows)))
}

fn column<'a>(header: &[String], rows: &'a [Vec<String>], name: &str) -> Vec<&'a str> {
    match header.iter().position(|h| h == name) {
        Some(i) => rows.iter().map(|r| r[i].as_str()).collect(),
        None => Vec::new(),
    }
}

/// Summarize whatever outputs exist in `dir` into `report.csv` and `report.txt`.
pub fn summarize(dir: &Path) -> Result<String> {
    let mut entries: Vec<(String, String, String)> = Vec::new();
    let mut push = |section: &str, key: &str, value: String| entries.push((section.into(), key.into(), value));

    let verify = dir.join(VERIFY_TXT);
    if verify.exists() {
        for line in fs::read_to_string(&verify)?.lines() {
            if let Some(rest) = line.strip_prefix('[') {
                let (status, tail) = rest.split_once("] ").unwrap_or((rest, ""));
                let id = tail.split_whitespace().next().unwrap_or("");
                push("verify", id, status.to_string());
            }
        }
    }
    if let Some((h, rows)) = read_rows(&dir.join(FLOPS_CSV))? {
        let forms = column(&h, &rows, "form");
        let totals = column(&h, &rows, "total");
        let closed = column(&h, &rows, "closed_form_total");
        push("flops", "rows", rows.len().to_string());
        let differ = totals.iter().zip(&closed).filter(|(a, b)| a != b).count();
        push("flops", "rows_measured_ne_published", differ.to_string());
        for form in ["vanilla", "kv_cached", "recurrent"] {
            if let Some(i) = forms.iter().position(|f| *f == form) {
                push("flops", &format!("{form}_first_total"), format!("{} (published {})", totals[i], closed[i]));
            }
        }
    }
    if let Some((h, rows)) = read_rows(&dir.join(MEMORY_CSV))? {
        let methods = column(&h, &rows, "method");
        let elems = column(&h, &rows, "elements");
        let keys: Vec<String> = rows.iter().map(|r| r[1..5].join("/")).collect();
        for ((m, e), k) in methods.iter().zip(&elems).zip(&keys) {
            push("memory", &format!("{m}[B/N/d/H={k}]"), e.to_string());
        }
        push("memory", "flag", KV_TABLE_NOTE.to_string());
    }
    if let Some((h, rows)) = read_rows(&dir.join(METRICS_CSV))? {
        let cer = column(&h, &rows, "val_cer");
        let loss = column(&h, &rows, "loss");
        push("train", "epochs", rows.len().to_string());
        if let (Some(c), Some(l)) = (cer.last(), loss.last()) {
            push("train", "final_val_cer", c.to_string());
            push("train", "final_loss", l.to_string());
        }
        if let Some(best) = cer.iter().filter_map(|c| c.parse::<f64>().ok()).reduce(f64::min) {
            push("train", "best_val_cer", format!("{best:.6}"));
        }
    }
    if let Some((h, rows)) = read_rows(&dir.join(DECODE_CSV))? {
        let cer: Vec<f64> = column(&h, &rows, "cer").iter().filter_map(|c| c.parse().ok()).collect();
        push("decode", "lines", rows.len().to_string());
        if !cer.is_empty() {
            push("decode", "mean_line_cer", format!("{:.6}", cer.iter().sum::<f64>() / cer.len() as f64));
        }
    }
    if let Some((h, rows)) = read_rows(&dir.join(DECODE_STATS_CSV))? {
        let live: Vec<u64> = column(&h, &rows, "live_elements").iter().filter_map(|c| c.parse().ok()).collect();
        let mults: u64 = column(&h, &rows, "mults").iter().filter_map(|c| c.parse::<u64>().ok()).sum();
        push("decode", "steps", rows.len().to_string());
        push("decode", "max_live_elements", live.iter().max().copied().unwrap_or(0).to_string());
        push("decode", "total_mults", mults.to_string());
    }

    let mut w = writer(&dir.join(REPORT_CSV))?;
    w.write_record(["section", "key", "value"])?;
    let mut text = String::new();
    let width = entries.iter().map(|e| e.0.len() + e.1.len() + 1).filter(|&w| w <= 48).max().unwrap_or(0);
    for (s, k, v) in &entries {
        w.write_record([s, k, v])?;
        text.push_str(&format!("{:<width$}  {v}\n", format!("{s}.{k}")));
    }
    w.flush()?;
    fs::write(dir.join(REPORT_TXT), &text)?;
    Ok(text)
}
