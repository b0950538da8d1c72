//! mAP@all, precision@K and precision-recall curves over Hamming rankings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::codes::{hamming_rank, CodeMatrix};
use crate::data::Modality;
use crate::error::{Error, Result};

/// Recall levels of the interpolated curve.
pub const PR_LEVELS: usize = 11;

/// `(1/R) Σ_{relevant ranks r} hits(r)/r`. `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of the first `k` ranked items that are relevant; `k` is clamped
/// to the list length.
pub fn precision_at(relevant: &[bool], k: usize) -> f64 {
    let k = k.min(relevant.len());
    if k == 0 {
        return 0.0;
    }
    relevant[..k].iter().filter(|&&r| r).count() as f64 / k as f64
}

/// 11-point interpolated precision: at level `r`, the best precision
/// achieved at any rank whose recall is at least `r`.
pub fn interpolated_pr(relevant: &[bool]) -> [f64; PR_LEVELS] {
    let total = relevant.iter().filter(|&&r| r).count();
    let mut out = [0.0; PR_LEVELS];
    if total == 0 {
        return out;
    }
    let mut points = Vec::with_capacity(relevant.len());
    let mut hits = 0usize;
    for (i, &rel) in relevant.iter().enumerate() {
        hits += rel as usize;
        points.push((hits as f64 / total as f64, hits as f64 / (i + 1) as f64));
    }
    for (level, slot) in out.iter_mut().enumerate() {
        let lv = level as f64 / 10.0;
        *slot = points
            .iter()
            .filter(|(r, _)| *r >= lv)
            .fold(0.0f64, |best, &(_, p)| best.max(p));
    }
    out
}

/// Aggregate retrieval metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map_all: f64,
    pub precision_at: BTreeMap<usize, f64>,
    /// `(recall level, mean interpolated precision)`.
    pub pr_curve: Vec<(f64, f64)>,
    /// Mean `(recall, precision)` after each rank, for plotting.
    pub pr_raw: Vec<(f64, f64)>,
    /// AP of each included query, in query order.
    pub per_query_ap: Vec<f64>,
    /// Queries with no relevant gallery item; left out of every metric.
    pub excluded_queries: Vec<usize>,
}

struct QueryResult {
    ap: f64,
    precision: Vec<f64>,
    interp: [f64; PR_LEVELS],
    raw: Vec<(f64, f64)>,
}

fn score_query(relevant: &[bool], ks: &[usize]) -> Option<QueryResult> {
    let ap = average_precision(relevant)?;
    let total = relevant.iter().filter(|&&r| r).count();
    let mut raw = Vec::with_capacity(relevant.len());
    let mut hits = 0usize;
    for (i, &rel) in relevant.iter().enumerate() {
        hits += rel as usize;
        raw.push((hits as f64 / total as f64, hits as f64 / (i + 1) as f64));
    }
    Some(QueryResult {
        ap,
        precision: ks.iter().map(|&k| precision_at(relevant, k)).collect(),
        interp: interpolated_pr(relevant),
        raw,
    })
}

/// Cross-modal evaluation: sketch queries against an image gallery.
///
/// Queries are ranked in parallel; results are merged in query order so the
/// report does not depend on scheduling.
pub fn evaluate(queries: &CodeMatrix, gallery: &CodeMatrix, ks: &[usize]) -> Result<RetrievalReport> {
    if queries.modality != Modality::Sketch || gallery.modality != Modality::Image {
        return Err(Error::Contract(format!(
            "queries must be sketch codes and the gallery image codes, got {} and {}",
            queries.modality, gallery.modality
        )));
    }
    if queries.bits() != gallery.bits() {
        return Err(Error::dim(
            "evaluate",
            format!("query codes have M={}, gallery codes have M={}", queries.bits(), gallery.bits()),
        ));
    }
    if gallery.is_empty() {
        return Err(Error::EmptyInput("gallery has no codes".into()));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no query codes".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Config(format!("precision@{k} is undefined")));
    }
    let results: Vec<Option<QueryResult>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let order = hamming_rank(queries.code(q), gallery)?;
            let label = queries.labels[q];
            let relevant: Vec<bool> = order.iter().map(|&i| gallery.labels[i] == label).collect();
            Ok(score_query(&relevant, ks))
        })
        .collect::<Result<_>>()?;

    let n = gallery.len();
    let mut per_query_ap = Vec::new();
    let mut excluded_queries = Vec::new();
    let mut prec_sum = vec![0.0; ks.len()];
    let mut interp_sum = [0.0; PR_LEVELS];
    let mut raw_sum = vec![(0.0, 0.0); n];
    for (q, r) in results.into_iter().enumerate() {
        let Some(r) = r else {
            excluded_queries.push(q);
            continue;
        };
        per_query_ap.push(r.ap);
        for (s, p) in prec_sum.iter_mut().zip(&r.precision) {
            *s += p;
        }
        for (s, p) in interp_sum.iter_mut().zip(&r.interp) {
            *s += p;
        }
        for (s, p) in raw_sum.iter_mut().zip(&r.raw) {
            s.0 += p.0;
            s.1 += p.1;
        }
    }
    if per_query_ap.is_empty() {
        return Err(Error::EmptyInput(
            "no query has a relevant item in the gallery".into(),
        ));
    }
    if !excluded_queries.is_empty() {
        log::warn!(
            "{} queries have no relevant gallery item and are excluded",
            excluded_queries.len()
        );
    }
    let count = per_query_ap.len() as f64;
    let map_all = per_query_ap.iter().sum::<f64>() / count;
    Ok(RetrievalReport {
        map_all,
        precision_at: ks.iter().zip(prec_sum).map(|(&k, s)| (k, s / count)).collect(),
        pr_curve: interp_sum
            .iter()
            .enumerate()
            .map(|(i, s)| (i as f64 / 10.0, s / count))
            .collect(),
        pr_raw: raw_sum.into_iter().map(|(r, p)| (r / count, p / count)).collect(),
        per_query_ap,
        excluded_queries,
    })
}

impl RetrievalReport {
    /// `name<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "queries\t{}", self.per_query_ap.len() + self.excluded_queries.len());
        let _ = writeln!(out, "excluded_queries\t{}", self.excluded_queries.len());
        let _ = writeln!(out, "mAP@all\t{}", self.map_all);
        for (k, p) in &self.precision_at {
            let _ = writeln!(out, "precision@{k}\t{p}");
        }
        for (r, p) in &self.pr_curve {
            let _ = writeln!(out, "interpolated_precision@recall={r:.1}\t{p}");
        }
        out
    }

    /// Tab-separated `kind recall precision` rows for plotting.
    pub fn pr_dump(&self) -> String {
        let mut out = String::from("kind\trecall\tprecision\n");
        for (r, p) in &self.pr_curve {
            let _ = writeln!(out, "interpolated\t{r}\t{p}");
        }
        for (r, p) in &self.pr_raw {
            let _ = writeln!(out, "rank\t{r}\t{p}");
        }
        out
    }
}
