//! Hamming-ranking index and retrieval metrics: MAP@N, PR curves, P@N.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashcore::HashCode;
use crate::semantics::LabelVector;

/// Immutable retrieval database: row-aligned codes and labels.
#[derive(Debug, Clone)]
pub struct Index {
    codes: Vec<HashCode>,
    labels: Vec<LabelVector>,
}

impl Index {
    pub fn build(codes: Vec<HashCode>, labels: Vec<LabelVector>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::invalid("index must contain at least one item"));
        }
        if codes.len() != labels.len() {
            return Err(Error::dimension(format!(
                "{} codes vs {} labels",
                codes.len(),
                labels.len()
            )));
        }
        let k = codes[0].len();
        if codes.iter().any(|c| c.len() != k) {
            return Err(Error::dimension("mixed code lengths in index"));
        }
        let c = labels[0].len();
        if labels.iter().any(|l| l.len() != c) {
            return Err(Error::dimension("mixed label lengths in index"));
        }
        Ok(Index { codes, labels })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code_len(&self) -> usize {
        self.codes[0].len()
    }

    pub fn codes(&self) -> &[HashCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[LabelVector] {
        &self.labels
    }
}

/// Ids sorted by Hamming distance ascending, ties broken by id ascending;
/// at most `topn` entries.
pub fn rank(query: &HashCode, index: &Index, topn: usize) -> Result<Vec<usize>> {
    if topn == 0 {
        return Err(Error::invalid("topn must be at least 1"));
    }
    if query.len() != index.code_len() {
        return Err(Error::dimension(format!(
            "query code length {} does not match index length {}",
            query.len(),
            index.code_len()
        )));
    }
    let mut order: Vec<(u32, usize)> = index
        .codes
        .iter()
        .enumerate()
        .map(|(id, c)| Ok((query.hamming(c)?, id)))
        .collect::<Result<_>>()?;
    let cut = topn.min(order.len());
    if cut < order.len() {
        order.select_nth_unstable(cut - 1);
        order.truncate(cut);
    }
    order.sort_unstable();
    Ok(order.into_iter().map(|(_, id)| id).collect())
}

/// AP normalized by the number of relevant items found in the list;
/// 0 when none are.
pub fn average_precision(rels: &[u8]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &r) in rels.iter().enumerate() {
        if r == 1 {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Evaluation settings echoed into every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub topn: usize,
    pub attack: String,
    pub seed: u64,
    /// Queries with no relevant database item, dropped from PR averaging.
    #[serde(default)]
    pub queries_without_relevant: usize,
}

/// MAP plus the per-query AP list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub config: EvalConfig,
}

fn check_queries(
    query_codes: &[HashCode],
    query_labels: &[LabelVector],
    index: &Index,
) -> Result<()> {
    if query_codes.is_empty() {
        return Err(Error::invalid("query set is empty"));
    }
    if query_codes.len() != query_labels.len() {
        return Err(Error::dimension(format!(
            "{} query codes vs {} query labels",
            query_codes.len(),
            query_labels.len()
        )));
    }
    if query_codes[0].len() != index.code_len() {
        return Err(Error::dimension("query code length does not match index"));
    }
    Ok(())
}

/// MAP over the top-`topn` Hamming-ranked results; relevance is label
/// intersection ≥ 1.
pub fn map_at_n(
    query_codes: &[HashCode],
    query_labels: &[LabelVector],
    index: &Index,
    topn: usize,
    attack_tag: &str,
    seed: u64,
) -> Result<MetricsReport> {
    check_queries(query_codes, query_labels, index)?;
    let per_query_ap: Vec<f64> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, label)| {
            let ids = rank(code, index, topn)?;
            let rels: Vec<u8> = ids
                .iter()
                .map(|&id| Ok(u8::from(label.shares_label(&index.labels[id])?)))
                .collect::<Result<_>>()?;
            Ok(average_precision(&rels))
        })
        .collect::<Result<_>>()?;
    let map = per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64;
    let queries_without_relevant = query_labels
        .iter()
        .map(|label| {
            Ok(usize::from(
                !index
                    .labels
                    .iter()
                    .any(|l| label.shares_label(l).unwrap_or(false)),
            ))
        })
        .collect::<Result<Vec<usize>>>()?
        .iter()
        .sum();
    Ok(MetricsReport {
        map,
        per_query_ap,
        config: EvalConfig {
            topn,
            attack: attack_tag.to_string(),
            seed,
            queries_without_relevant,
        },
    })
}

/// One macro-averaged (recall, precision) point per rank cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Macro-averaged precision-recall sweep over every cutoff k = 1..N.
/// Queries with zero relevant database items are excluded.
pub fn pr_curve(
    query_codes: &[HashCode],
    query_labels: &[LabelVector],
    index: &Index,
) -> Result<Vec<PrPoint>> {
    check_queries(query_codes, query_labels, index)?;
    let n = index.len();
    let per_query: Vec<Option<Vec<usize>>> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, label)| {
            let ids = rank(code, index, n)?;
            let mut cum = Vec::with_capacity(n);
            let mut hits = 0usize;
            for id in ids {
                hits += usize::from(label.shares_label(&index.labels[id])?);
                cum.push(hits);
            }
            Ok(if hits == 0 { None } else { Some(cum) })
        })
        .collect::<Result<_>>()?;

    let kept: Vec<&Vec<usize>> = per_query.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::invalid(
            "no query has a relevant database item; PR curve undefined",
        ));
    }
    let m = kept.len() as f64;
    let mut curve = Vec::with_capacity(n);
    for k in 1..=n {
        let mut precision = 0.0;
        let mut recall = 0.0;
        for cum in &kept {
            let hits = cum[k - 1] as f64;
            let total = *cum.last().unwrap() as f64;
            precision += hits / k as f64;
            recall += hits / total;
        }
        curve.push(PrPoint {
            recall: recall / m,
            precision: precision / m,
        });
    }
    Ok(curve)
}

/// One mean-precision point per requested cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnPoint {
    pub topn: usize,
    pub precision: f64,
}

/// Mean precision within the top-N ranks for each grid point; grid points
/// beyond the database size clamp to it.
pub fn p_at_topn(
    query_codes: &[HashCode],
    query_labels: &[LabelVector],
    index: &Index,
    grid: &[usize],
) -> Result<Vec<PnPoint>> {
    check_queries(query_codes, query_labels, index)?;
    if grid.iter().any(|&g| g == 0) {
        return Err(Error::invalid("P@N grid points must be positive"));
    }
    let max_n = grid.iter().copied().max().unwrap_or(1).min(index.len());
    let cum_rels: Vec<Vec<usize>> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, label)| {
            let ids = rank(code, index, max_n)?;
            let mut cum = Vec::with_capacity(ids.len());
            let mut hits = 0usize;
            for id in ids {
                hits += usize::from(label.shares_label(&index.labels[id])?);
                cum.push(hits);
            }
            Ok(cum)
        })
        .collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .map(|&g| {
            let n = g.min(index.len());
            let precision = cum_rels
                .iter()
                .map(|cum| cum[n - 1] as f64 / n as f64)
                .sum::<f64>()
                / cum_rels.len() as f64;
            PnPoint { topn: g, precision }
        })
        .collect())
}

/// Emits a PR curve with the `recall,precision` header.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("recall,precision\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.recall, p.precision));
    }
    out
}

/// Emits a P@N curve with the `topn,precision` header.
pub fn pn_curve_csv(curve: &[PnPoint]) -> String {
    let mut out = String::from("topn,precision\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.topn, p.precision));
    }
    out
}
