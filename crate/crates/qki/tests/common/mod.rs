//! Independent reference implementations backing the acceptance suite.
//!
//! Every quantity checked against the library is recomputed here from its
//! definition — plain loops, full sorts, explicit precision/recall walks —
//! sharing nothing with the library but the matrix container.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeSet;

use qki::numeric::Matrix;

/// exp(-||q - k||^2 / tau), recomputed locally.
pub fn ref_score(q: &[f64], k: &[f64], tau: f64) -> f64 {
    let mut d2 = 0.0;
    for (a, b) in q.iter().zip(k) {
        let diff = a - b;
        d2 += diff * diff;
    }
    (-d2 / tau).exp()
}

/// Higher probability first; exact ties fall back to ascending (row, col).
fn harder_first(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
}

/// Hard-negative reference: materialize every non-positive pair, fully sort,
/// truncate. Globally or per batch row.
pub fn ref_mine(
    values: &Matrix,
    positive_map: &[usize],
    m: usize,
    per_row: bool,
) -> (Vec<(usize, usize)>, bool) {
    let b = values.rows;
    let n = values.cols;
    if per_row {
        let mut out = Vec::new();
        let mut short = false;
        for r in 0..b {
            let mut pool: Vec<(f64, usize, usize)> = (0..n)
                .filter(|&c| c != positive_map[r])
                .map(|c| (values.row(r)[c], r, c))
                .collect();
            pool.sort_by(harder_first);
            if pool.len() < m {
                short = true;
            }
            pool.truncate(m);
            out.extend(pool.into_iter().map(|(_, r, c)| (r, c)));
        }
        return (out, short);
    }
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for r in 0..b {
        for c in 0..n {
            if c != positive_map[r] {
                pool.push((values.row(r)[c], r, c));
            }
        }
    }
    pool.sort_by(harder_first);
    let short = pool.len() < b * m;
    pool.truncate(b * m);
    (pool.into_iter().map(|(_, r, c)| (r, c)).collect(), short)
}

/// Loss terms recomputed from raw descriptors by the definition: clamp each
/// probability to [eps, 1 - eps], average -ln p over positives, average
/// -ln(1 - p) over the mined pairs with the configured B*M denominator.
pub struct RefLoss {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l: f64,
    pub mined: Vec<(usize, usize)>,
    pub short: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn ref_loss(
    qs: &Matrix,
    ks: &Matrix,
    positive_map: &[usize],
    tau: f64,
    m: usize,
    w_pos: f64,
    w_neg: f64,
    eps: f64,
    per_row: bool,
) -> RefLoss {
    let b = qs.rows;
    let n = ks.rows;
    let mut p = Matrix::zeros(b, n);
    for r in 0..b {
        for c in 0..n {
            p.row_mut(r)[c] = ref_score(qs.row(r), ks.row(c), tau);
        }
    }
    let cl = |x: f64| x.min(1.0 - eps).max(eps);
    let mut pos_sum = 0.0;
    for r in 0..b {
        pos_sum += -cl(p.row(r)[positive_map[r]]).ln();
    }
    let l_pos = pos_sum / b as f64;
    let (mined, short) = ref_mine(&p, positive_map, m, per_row);
    let mut neg_sum = 0.0;
    for &(r, c) in &mined {
        neg_sum += -(1.0 - cl(p.row(r)[c])).ln();
    }
    let l_neg = neg_sum / (b * m) as f64;
    RefLoss {
        l_pos,
        l_neg,
        l: w_pos * l_pos + w_neg * l_neg,
        mined,
        short,
    }
}

/// Rank every (query, key) pair by descending score with an ascending
/// (query id, key id) tie-break, and flag the ground-truth ranks.
pub fn ref_ranked_hits(
    qs: &Matrix,
    qids: &[u64],
    ks: &Matrix,
    kids: &[u64],
    tau: f64,
    gt: &BTreeSet<(u64, u64)>,
) -> Vec<bool> {
    let mut entries = Vec::with_capacity(qids.len() * kids.len());
    for (qi, &qid) in qids.iter().enumerate() {
        for (ki, &kid) in kids.iter().enumerate() {
            entries.push((qid, kid, ref_score(qs.row(qi), ks.row(ki), tau)));
        }
    }
    entries.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    entries.iter().map(|e| gt.contains(&(e.0, e.1))).collect()
}

/// Area under the precision/recall curve, walked rank by rank: whenever a
/// positive raises the recall, add precision-at-that-rank times the recall
/// increment.
pub fn ref_pr_curve_ap(ranked_hits: &[bool], n_positives: usize) -> f64 {
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &hit) in ranked_hits.iter().enumerate() {
        if hit {
            hits += 1;
            let precision = hits as f64 / (i + 1) as f64;
            let recall = hits as f64 / n_positives as f64;
            ap += precision * (recall - prev_recall);
            prev_recall = recall;
        }
    }
    ap
}

/// Largest representable error of one binary16 round trip: half an ulp for
/// normal magnitudes, half the smallest subnormal step below them.
pub fn half_round_bound(x: f64) -> f64 {
    let rel = x.abs() * (0.5f64).powi(11);
    let sub = (0.5f64).powi(25);
    rel.max(sub)
}

/// Print the one verdict line for an acceptance check and panic on failure.
pub fn verdict(number: u32, name: &str, result: Result<String, String>) {
    match result {
        Ok(detail) if detail.is_empty() => println!("acceptance {number} {name}: PASS"),
        Ok(detail) => println!("acceptance {number} {name}: PASS ({detail})"),
        Err(msg) => {
            println!("acceptance {number} {name}: FAIL ({msg})");
            panic!("acceptance check {number} ({name}) failed: {msg}");
        }
    }
}
