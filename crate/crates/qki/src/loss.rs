//! Gaussian-overlap contrastive loss: pair probabilities from squared
//! distance under a temperature, binary cross entropy over positives and
//! globally mined hard negatives, and the sparse backward pass.
//!
//! The negative term only ever touches the mined columns, so the backward
//! cost scales with the batch and mining sizes, never with the database.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{QkiError, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature dividing the squared distance.
    pub tau: f64,
    /// Hard negatives mined per positive (the loss denominator uses this
    /// even when fewer are available).
    pub m_per_positive: usize,
    pub w_pos: f64,
    pub w_neg: f64,
    /// Probabilities are clamped to [eps_clamp, 1 - eps_clamp] before logs.
    pub eps_clamp: f64,
    /// Ablation: mine the top M per row instead of the top B*M globally.
    pub per_row_mining: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            m_per_positive: 10,
            w_pos: 1.0,
            w_neg: 3.0,
            eps_clamp: 1e-7,
            per_row_mining: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(QkiError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.m_per_positive == 0 {
            return Err(QkiError::Config("m_per_positive must be >= 1".into()));
        }
        if self.w_pos < 0.0 || self.w_neg < 0.0 {
            return Err(QkiError::Config("loss weights must be non-negative".into()));
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 0.5) {
            return Err(QkiError::Config(format!(
                "eps_clamp must be in (0, 0.5), got {}",
                self.eps_clamp
            )));
        }
        Ok(())
    }
}

/// B x N pair probabilities plus the identities of both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Matrix,
    pub batch_ids: Vec<u64>,
    pub db_ids: Vec<u64>,
    /// For each batch row, the db column holding its positive.
    pub positive_map: Vec<usize>,
}

impl ScoreMatrix {
    pub fn batch_size(&self) -> usize {
        self.values.rows
    }

    pub fn db_size(&self) -> usize {
        self.values.cols
    }
}

/// exp(-||q - k||^2 / tau), in (0, 1] for finite inputs.
pub fn pair_score(q: &[f64], k: &[f64], tau: f64) -> Result<f64> {
    if q.len() != k.len() {
        return Err(QkiError::Shape(format!(
            "pair_score lengths differ: {} vs {}",
            q.len(),
            k.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(QkiError::Config(format!("tau must be > 0, got {tau}")));
    }
    let mut d2 = 0.0;
    for (a, b) in q.iter().zip(k) {
        let diff = a - b;
        d2 += diff * diff;
    }
    Ok((-d2 / tau).exp())
}

/// Score the whole batch against the database, delivered as chunks.
///
/// Each pair's probability is computed independently from its two rows, so
/// the result is bitwise identical however the database is chunked.
/// `positive_ids` gives the db id of each batch row's positive; an id that
/// is not present in the database is a mapping error.
pub fn score_matrix(
    batch_desc: &Matrix,
    db_chunks: &[&Matrix],
    tau: f64,
    batch_ids: &[u64],
    db_ids: &[u64],
    positive_ids: &[u64],
) -> Result<ScoreMatrix> {
    if batch_ids.len() != batch_desc.rows || positive_ids.len() != batch_desc.rows {
        return Err(QkiError::Shape(format!(
            "batch has {} rows but {} ids and {} positives",
            batch_desc.rows,
            batch_ids.len(),
            positive_ids.len()
        )));
    }
    let n: usize = db_chunks.iter().map(|c| c.rows).sum();
    if db_ids.len() != n {
        return Err(QkiError::Shape(format!(
            "db chunks total {n} rows but {} ids given",
            db_ids.len()
        )));
    }
    let b = batch_desc.rows;
    let mut values = Matrix::zeros(b, n);
    let mut offset = 0;
    for chunk in db_chunks {
        if chunk.cols != batch_desc.cols {
            return Err(QkiError::Shape(format!(
                "db chunk dimension {} does not match batch dimension {}",
                chunk.cols, batch_desc.cols
            )));
        }
        for r in 0..chunk.rows {
            let k = chunk.row(r);
            let col = offset + r;
            for i in 0..b {
                values.row_mut(i)[col] = pair_score(batch_desc.row(i), k, tau)?;
            }
        }
        offset += chunk.rows;
    }
    let mut col_of_id = BTreeMap::new();
    for (c, &id) in db_ids.iter().enumerate() {
        col_of_id.insert(id, c);
    }
    let positive_map = positive_ids
        .iter()
        .enumerate()
        .map(|(row, id)| {
            col_of_id.get(id).copied().ok_or_else(|| {
                QkiError::Data(format!(
                    "batch row {row} declares positive id {id}, absent from the database"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreMatrix {
        values,
        batch_ids: batch_ids.to_vec(),
        db_ids: db_ids.to_vec(),
        positive_map,
    })
}

/// Total order for mining: higher probability first, then (row, col).
fn mining_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
}

/// The hardest negatives: the B*M non-positive pairs with the highest
/// probability. Returns the pairs in mining order plus a flag set when the
/// pool ran short.
pub fn mine_hard_negatives(
    sm: &ScoreMatrix,
    cfg: &LossConfig,
) -> (Vec<(usize, usize)>, bool) {
    let b = sm.batch_size();
    let n = sm.db_size();
    let m = cfg.m_per_positive;
    if cfg.per_row_mining {
        let mut mined = Vec::with_capacity(b * m);
        let mut short = false;
        for row in 0..b {
            let mut pool: Vec<(f64, usize, usize)> = (0..n)
                .filter(|&c| c != sm.positive_map[row])
                .map(|c| (sm.values.row(row)[c], row, c))
                .collect();
            if pool.len() < m {
                short = true;
            } else if pool.len() > m {
                pool.select_nth_unstable_by(m - 1, mining_order);
                pool.truncate(m);
            }
            pool.sort_unstable_by(mining_order);
            mined.extend(pool.into_iter().map(|(_, r, c)| (r, c)));
        }
        return (mined, short);
    }
    let target = b * m;
    let mut pool: Vec<(f64, usize, usize)> = Vec::with_capacity(b * n.saturating_sub(1));
    for row in 0..b {
        let vals = sm.values.row(row);
        for (col, &p) in vals.iter().enumerate() {
            if col != sm.positive_map[row] {
                pool.push((p, row, col));
            }
        }
    }
    let short = pool.len() < target;
    if pool.len() > target {
        pool.select_nth_unstable_by(target - 1, mining_order);
        pool.truncate(target);
    }
    pool.sort_unstable_by(mining_order);
    (pool.into_iter().map(|(_, r, c)| (r, c)).collect(), short)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l: f64,
    #[serde(skip)]
    pub mined: Vec<(usize, usize)>,
    pub short_mine: bool,
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.min(1.0 - eps).max(eps)
}

/// Binary cross entropy over the positive pairs and the mined negatives.
///
/// The negative term divides by the configured B*M even when mining ran
/// short, keeping the loss scale stable on tiny databases.
pub fn contrastive_bce(sm: &ScoreMatrix, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let b = sm.batch_size();
    if b == 0 {
        return Err(QkiError::Data(
            "contrastive loss needs a non-empty batch".into(),
        ));
    }
    let eps = cfg.eps_clamp;
    let mut pos_sum = 0.0;
    for row in 0..b {
        let p = clamp(sm.values.row(row)[sm.positive_map[row]], eps);
        pos_sum += -p.ln();
    }
    let l_pos = pos_sum / b as f64;
    let (mined, short_mine) = mine_hard_negatives(sm, cfg);
    let mut neg_sum = 0.0;
    for &(row, col) in &mined {
        let p = clamp(sm.values.row(row)[col], eps);
        neg_sum += -(1.0 - p).ln();
    }
    let l_neg = neg_sum / (b * cfg.m_per_positive) as f64;
    let l = cfg.w_pos * l_pos + cfg.w_neg * l_neg;
    Ok(LossBreakdown {
        l_pos,
        l_neg,
        l,
        mined,
        short_mine,
    })
}

/// Gradients of the loss with respect to the descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    /// One gradient row per batch descriptor.
    pub batch: Matrix,
    /// (db column, gradient) for exactly the columns that participate in a
    /// positive or mined pair, ascending by column.
    pub db: Vec<(usize, Vec<f64>)>,
}

/// Backward pass for `contrastive_bce` on the same inputs.
///
/// Descriptors are needed here because the probability's gradient carries
/// the difference vector: dP/dq = -2 P (q - k) / tau.
pub fn loss_backward(
    sm: &ScoreMatrix,
    cfg: &LossConfig,
    bd: &LossBreakdown,
    batch_desc: &Matrix,
    db_desc: &Matrix,
) -> Result<LossGrads> {
    let b = sm.batch_size();
    let n = sm.db_size();
    let d = batch_desc.cols;
    if batch_desc.rows != b || db_desc.rows != n || db_desc.cols != d {
        return Err(QkiError::Shape(format!(
            "descriptor shapes {}x{} / {}x{} do not match score matrix {b}x{n}",
            batch_desc.rows, batch_desc.cols, db_desc.rows, db_desc.cols
        )));
    }
    let eps = cfg.eps_clamp;
    let mut batch = Matrix::zeros(b, d);
    let mut db: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let bm = (b * cfg.m_per_positive) as f64;

    // dL/dP for one pair, zero on the clamp plateaus.
    fn add_pair(
        row: usize,
        col: usize,
        dl_dp: f64,
        tau: f64,
        sm: &ScoreMatrix,
        batch_desc: &Matrix,
        db_desc: &Matrix,
        batch: &mut Matrix,
        db: &mut BTreeMap<usize, Vec<f64>>,
    ) {
        let d = batch_desc.cols;
        let p = sm.values.row(row)[col];
        let q = batch_desc.row(row);
        let k = db_desc.row(col);
        let coef = dl_dp * p * (-2.0 / tau);
        let grad_q = batch.row_mut(row);
        let grad_k = db.entry(col).or_insert_with(|| vec![0.0; d]);
        for j in 0..d {
            let g = coef * (q[j] - k[j]);
            grad_q[j] += g;
            grad_k[j] -= g;
        }
    }

    for row in 0..b {
        let col = sm.positive_map[row];
        let p = sm.values.row(row)[col];
        if p > eps && p < 1.0 - eps {
            let dl_dp = -cfg.w_pos / (b as f64 * p);
            add_pair(row, col, dl_dp, cfg.tau, sm, batch_desc, db_desc, &mut batch, &mut db);
        } else {
            // Plateau: still record the column as participating, with an
            // exactly-zero contribution.
            db.entry(col).or_insert_with(|| vec![0.0; d]);
        }
    }
    for &(row, col) in &bd.mined {
        if row >= b || col >= n {
            return Err(QkiError::Contract(format!(
                "mined pair ({row}, {col}) outside the {b}x{n} score matrix"
            )));
        }
        if col == sm.positive_map[row] {
            return Err(QkiError::Contract(format!(
                "mined pair ({row}, {col}) coincides with the row's positive"
            )));
        }
        let p = sm.values.row(row)[col];
        if p > eps && p < 1.0 - eps {
            let dl_dp = cfg.w_neg / (bm * (1.0 - p));
            add_pair(row, col, dl_dp, cfg.tau, sm, batch_desc, db_desc, &mut batch, &mut db);
        } else {
            db.entry(col).or_insert_with(|| vec![0.0; d]);
        }
    }
    Ok(LossGrads {
        batch,
        db: db.into_iter().collect(),
    })
}
