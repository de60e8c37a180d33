//! Exact retrieval evaluation: brute-force scoring of every query/key pair,
//! one globally sorted list, and average-precision metrics over it.
//!
//! The micro metric ranks all pairs together (so scores must be comparable
//! across queries); the macro metric averages per-query average precision.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_batch, BaselineFeaturizer, EncoderParams};
use crate::error::{QkiError, Result};
use crate::loss::pair_score;
use crate::numeric::Matrix;

/// Every query/key pair, globally sorted by descending score with ties
/// broken by (query_id, key_id).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPairList {
    pub entries: Vec<(u64, u64, f64)>,
    pub ground_truth: BTreeSet<(u64, u64)>,
    pub n_positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mu_ap: f64,
    pub macro_ap: f64,
    pub n_pairs: usize,
    pub n_positives: usize,
}

/// Score all Q*K pairs and sort them into one ranking.
pub fn rank_all_pairs(
    q_desc: &Matrix,
    query_ids: &[u64],
    k_desc: &Matrix,
    key_ids: &[u64],
    tau: f64,
    ground_truth: &BTreeSet<(u64, u64)>,
) -> Result<RankedPairList> {
    if q_desc.rows == 0 || k_desc.rows == 0 {
        return Err(QkiError::Data(format!(
            "ranking needs both sides non-empty, got {} queries and {} keys",
            q_desc.rows, k_desc.rows
        )));
    }
    if q_desc.cols != k_desc.cols {
        return Err(QkiError::Shape(format!(
            "query dimension {} does not match key dimension {}",
            q_desc.cols, k_desc.cols
        )));
    }
    if query_ids.len() != q_desc.rows || key_ids.len() != k_desc.rows {
        return Err(QkiError::Shape(format!(
            "id counts {}/{} do not match descriptor rows {}/{}",
            query_ids.len(),
            key_ids.len(),
            q_desc.rows,
            k_desc.rows
        )));
    }
    let mut entries = Vec::with_capacity(q_desc.rows * k_desc.rows);
    for (qi, &qid) in query_ids.iter().enumerate() {
        for (ki, &kid) in key_ids.iter().enumerate() {
            let s = pair_score(q_desc.row(qi), k_desc.row(ki), tau)?;
            if !s.is_finite() {
                return Err(QkiError::Numeric(format!(
                    "non-finite score for pair ({qid}, {kid})"
                )));
            }
            entries.push((qid, kid, s));
        }
    }
    entries.sort_unstable_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    Ok(RankedPairList {
        entries,
        ground_truth: ground_truth.clone(),
        n_positives: ground_truth.len(),
    })
}

/// Area under the precision/recall curve of the single global ranking:
/// the sum over positive-holding ranks of precision-at-that-rank, divided
/// by the total number of ground-truth positives.
pub fn micro_ap(rpl: &RankedPairList) -> Result<f64> {
    if rpl.n_positives == 0 {
        return Err(QkiError::Data(
            "average precision is undefined without positives".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, entry) in rpl.entries.iter().enumerate() {
        if rpl.ground_truth.contains(&(entry.0, entry.1)) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / rpl.n_positives as f64)
}

/// Mean of per-query average precisions, over queries that have at least one
/// ground-truth positive. Each query's ranking is the global list restricted
/// to that query.
pub fn macro_ap(rpl: &RankedPairList) -> Result<f64> {
    let mut per_query_positives: BTreeMap<u64, usize> = BTreeMap::new();
    for &(q, _) in &rpl.ground_truth {
        *per_query_positives.entry(q).or_insert(0) += 1;
    }
    if per_query_positives.is_empty() {
        return Err(QkiError::Data(
            "macro average precision is undefined without positives".into(),
        ));
    }
    struct Group {
        seen: usize,
        hits: usize,
        sum: f64,
    }
    let mut groups: BTreeMap<u64, Group> = BTreeMap::new();
    for entry in &rpl.entries {
        let g = groups.entry(entry.0).or_insert(Group {
            seen: 0,
            hits: 0,
            sum: 0.0,
        });
        g.seen += 1;
        if rpl.ground_truth.contains(&(entry.0, entry.1)) {
            g.hits += 1;
            g.sum += g.hits as f64 / g.seen as f64;
        }
    }
    let mut total = 0.0;
    for (&q, &n_pos) in &per_query_positives {
        let ap = groups.get(&q).map_or(0.0, |g| g.sum / n_pos as f64);
        total += ap;
    }
    Ok(total / per_query_positives.len() as f64)
}

/// Borrowed view of an evaluation dataset.
pub struct EvalData<'a> {
    pub queries: &'a Matrix,
    pub query_ids: &'a [u64],
    pub keys: &'a Matrix,
    pub key_ids: &'a [u64],
    pub ground_truth: &'a BTreeSet<(u64, u64)>,
}

/// Embed both sides with the current encoders (full forward, no store),
/// rank, and report both metrics.
pub fn evaluate_model(
    q_enc: &EncoderParams,
    k_enc: &EncoderParams,
    f: &BaselineFeaturizer,
    data: &EvalData,
    tau: f64,
) -> Result<Metrics> {
    let q_desc = encode_batch(q_enc, f, data.queries)?;
    let k_desc = encode_batch(k_enc, f, data.keys)?;
    let rpl = rank_all_pairs(
        &q_desc,
        data.query_ids,
        &k_desc,
        data.key_ids,
        tau,
        data.ground_truth,
    )?;
    Ok(Metrics {
        mu_ap: micro_ap(&rpl)?,
        macro_ap: macro_ap(&rpl)?,
        n_pairs: rpl.entries.len(),
        n_positives: rpl.n_positives,
    })
}
