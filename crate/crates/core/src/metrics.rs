//! Interval IoU, grounding recall `Rk@θ`, retrieval `R@k` and result tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("degenerate interval [{0}, {1}]")]
    DegenerateInterval(f64, f64),
    #[error("query {0} has no ground truth")]
    MissingGroundTruth(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed result table: {0}")]
    Schema(String),
}

fn check(a: (f64, f64)) -> Result<(), MetricsError> {
    if a.0.is_finite() && a.1.is_finite() && a.0 < a.1 {
        Ok(())
    } else {
        Err(MetricsError::DegenerateInterval(a.0, a.1))
    }
}

pub fn iou(a: (f64, f64), b: (f64, f64)) -> Result<f64, MetricsError> {
    check(a)?;
    check(b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// Fraction of queries whose best IoU among the first `k` predictions is
/// strictly greater than `theta`. An empty query list scores 0.
pub fn recall_k_iou(
    ranked: &[Vec<(f64, f64)>],
    truths: &[Option<(f64, f64)>],
    k: usize,
    theta: f64,
) -> Result<f64, MetricsError> {
    if ranked.len() != truths.len() {
        return Err(MetricsError::MissingGroundTruth(ranked.len().min(truths.len())));
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, (preds, gt)) in ranked.iter().zip(truths).enumerate() {
        let gt = gt.ok_or(MetricsError::MissingGroundTruth(i))?;
        let mut best = 0.0f64;
        for &p in preds.iter().take(k) {
            best = best.max(iou(p, gt)?);
        }
        hits += (best > theta) as usize;
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Fraction of queries whose ground-truth id is among the first `k` ranks.
pub fn retrieval_recall<T: PartialEq>(rankings: &[Vec<T>], truths: &[Option<T>], k: usize) -> Result<f64, MetricsError> {
    if rankings.len() != truths.len() {
        return Err(MetricsError::MissingGroundTruth(rankings.len().min(truths.len())));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, (r, gt)) in rankings.iter().zip(truths).enumerate() {
        let gt = gt.as_ref().ok_or(MetricsError::MissingGroundTruth(i))?;
        hits += r.iter().take(k).any(|x| x == gt) as usize;
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Named metric values of one evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub name: String,
    pub queries: usize,
    pub fingerprint: String,
    pub metrics: BTreeMap<String, f64>,
}

fn columns(results: &[EvalResult]) -> Vec<String> {
    let mut cols: Vec<String> = results.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    cols.sort();
    cols.dedup();
    cols
}

/// Fixed-width text table; metric columns in sorted order.
pub fn report_table(results: &[EvalResult]) -> String {
    let cols = columns(results);
    let mut out = format!("{:<24} {:>8}", "run", "queries");
    for c in &cols {
        out.push_str(&format!(" {c:>10}"));
    }
    out.push('\n');
    for r in results {
        out.push_str(&format!("{:<24} {:>8}", r.name, r.queries));
        for c in &cols {
            match r.metrics.get(c) {
                Some(v) => out.push_str(&format!(" {:>10.4}", v)),
                None => out.push_str(&format!(" {:>10}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

pub fn report_csv(results: &[EvalResult]) -> Result<String, MetricsError> {
    let cols = columns(results);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["name".to_string(), "queries".into(), "fingerprint".into()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.name.clone(), r.queries.to_string(), r.fingerprint.clone()];
        row.extend(cols.iter().map(|c| r.metrics.get(c).map_or_else(String::new, |v| format!("{v:?}"))));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Schema(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MetricsError::Schema(e.to_string()))
}

pub fn read_csv(text: &str) -> Result<Vec<EvalResult>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[..3] != ["name", "queries", "fingerprint"] {
        return Err(MetricsError::Schema(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let queries = rec[1].parse().map_err(|_| MetricsError::Schema(format!("bad query count {}", &rec[1])))?;
        let mut metrics = BTreeMap::new();
        for (name, v) in header[3..].iter().zip(rec.iter().skip(3)) {
            if !v.is_empty() {
                let x = v.parse().map_err(|_| MetricsError::Schema(format!("bad value {v}")))?;
                metrics.insert(name.clone(), x);
            }
        }
        out.push(EvalResult { name: rec[0].to_string(), queries, fingerprint: rec[2].to_string(), metrics });
    }
    Ok(out)
}
