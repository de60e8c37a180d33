//! Seeded synthetic corpus: clustered key vectors plus composable
//! augmentations that turn each key into its positive query.
//!
//! Keys are drawn around Gaussian cluster centers so that near-cluster
//! neighbours exist — that structure is what makes hard negative mining
//! observable. Augmentations are vector analogues of photometric noise,
//! occlusion, brightness scaling, and translation; every query is a pure
//! function of (seed, item index).

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QkiError, Result};
use crate::numeric::Matrix;
use crate::seeds::{derive_seed, item_rng, stream};

/// Spread of cluster centers around the origin.
pub const CENTER_SCALE: f64 = 1.0;
/// Within-cluster standard deviation.
pub const CLUSTER_SPREAD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_keys: usize,
    pub d_in: usize,
    pub n_clusters: usize,
    /// Additive Gaussian noise amplitude.
    pub noise_scale: f64,
    /// Fraction of coordinates zeroed by an occlusion block, in [0, 1).
    pub mask_fraction: f64,
    /// Multiplicative brightness range [lo, hi] with 0 < lo <= hi.
    pub scale_range: [f64; 2],
    /// Maximum circular-shift distance in coordinates.
    pub shift_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keys == 0 || self.d_in == 0 {
            return Err(QkiError::Config(format!(
                "n_keys ({}) and d_in ({}) must be positive",
                self.n_keys, self.d_in
            )));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_keys {
            return Err(QkiError::Config(format!(
                "n_clusters ({}) must be in 1..={}",
                self.n_clusters, self.n_keys
            )));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(QkiError::Config(format!(
                "mask_fraction ({}) must be in [0, 1)",
                self.mask_fraction
            )));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(QkiError::Config(format!(
                "scale_range [{lo}, {hi}] needs 0 < lo <= hi"
            )));
        }
        if self.noise_scale < 0.0 || self.shift_scale < 0.0 {
            return Err(QkiError::Config(
                "noise_scale and shift_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Cluster centers used by `generate_keys` (one per row).
pub fn cluster_centers(cfg: &SynthConfig) -> Result<Matrix> {
    cfg.validate()?;
    let mut rng = item_rng(cfg.seed, stream::CENTERS, 0);
    let mut m = Matrix::zeros(cfg.n_clusters, cfg.d_in);
    for v in m.data.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = CENTER_SCALE * n;
    }
    Ok(m)
}

/// Draw `n_rows` keys around the given centers: seeded cluster choice plus
/// within-cluster Gaussian offset. Each row's randomness is derived from
/// (seed, row), so generation order and worker count never change the result.
fn keys_around_centers(centers: &Matrix, n_rows: usize, seed: u64) -> Matrix {
    let d = centers.cols;
    let rows: Vec<Vec<f64>> = (0..n_rows)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, stream::KEYS, i as u64);
            let c = rng.gen_range(0..centers.rows);
            let center = centers.row(c);
            (0..d)
                .map(|j| {
                    let n: f64 = rng.sample(StandardNormal);
                    center[j] + CLUSTER_SPREAD * n
                })
                .collect()
        })
        .collect();
    let mut m = Matrix::zeros(n_rows, d);
    for (i, row) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(row);
    }
    m
}

/// Keys = seeded cluster center + within-cluster Gaussian offset.
pub fn generate_keys(cfg: &SynthConfig) -> Result<Matrix> {
    let centers = cluster_centers(cfg)?;
    Ok(keys_around_centers(&centers, cfg.n_keys, cfg.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    AdditiveNoise,
    MaskBlock,
    GlobalScale,
    FeatureShift,
}

/// Ops that can actually change a vector under the given magnitudes.
fn active_ops(cfg: &SynthConfig) -> Vec<OpKind> {
    let mut ops = Vec::new();
    if cfg.noise_scale > 0.0 {
        ops.push(OpKind::AdditiveNoise);
    }
    if cfg.mask_fraction > 0.0 {
        ops.push(OpKind::MaskBlock);
    }
    if cfg.scale_range != [1.0, 1.0] {
        ops.push(OpKind::GlobalScale);
    }
    if cfg.shift_scale > 0.0 && cfg.d_in >= 2 {
        ops.push(OpKind::FeatureShift);
    }
    ops
}

/// Build the positive query for one key: a seeded composition of 1-3 ops.
///
/// Deterministic in (cfg.seed, item_index); when every magnitude is zero the
/// key passes through unchanged, otherwise the output is guaranteed to
/// differ from the input.
pub fn augment_query(key: &[f64], item_index: u64, cfg: &SynthConfig) -> Vec<f64> {
    let d = key.len();
    let mut out = key.to_vec();
    let ops = active_ops(cfg);
    if ops.is_empty() {
        return out;
    }
    let mut rng = item_rng(cfg.seed, stream::AUGMENT, item_index);
    let n_ops = rng.gen_range(1..=3usize);
    for _ in 0..n_ops {
        let kind = ops[rng.gen_range(0..ops.len())];
        match kind {
            OpKind::AdditiveNoise => {
                for v in out.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += cfg.noise_scale * n;
                }
            }
            OpKind::MaskBlock => {
                // Occlusion: zero a contiguous (wrapping) block of at least
                // one coordinate.
                let len = ((cfg.mask_fraction * d as f64).floor() as usize).max(1);
                let start = rng.gen_range(0..d);
                for t in 0..len.min(d) {
                    out[(start + t) % d] = 0.0;
                }
            }
            OpKind::GlobalScale => {
                let [lo, hi] = cfg.scale_range;
                let u: f64 = rng.gen();
                let s = lo + u * (hi - lo);
                for v in out.iter_mut() {
                    *v *= s;
                }
            }
            OpKind::FeatureShift => {
                // Translation analogue: circular rotation by 1..=shift_scale
                // coordinates, never a multiple of the dimension.
                let u: f64 = rng.gen();
                let r = 1 + (u * cfg.shift_scale).floor() as usize;
                let r = ((r - 1) % (d - 1)) + 1;
                if rng.gen::<bool>() {
                    out.rotate_left(r);
                } else {
                    out.rotate_right(r);
                }
            }
        }
    }
    if out == key {
        // Measure-zero coincidence (e.g. two scales cancelling exactly):
        // keep the no-identity guarantee with a minimal nudge.
        let j = item_index as usize % d;
        out[j] = out[j].next_up();
    }
    out
}

/// A held-out retrieval split: fresh keys, their augmented queries, and
/// distractor queries that match nothing.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub keys: Matrix,
    /// Positive queries first (row i matches key row i), then distractors.
    pub queries: Matrix,
    pub n_eval_queries: usize,
    pub n_distractors: usize,
    pub key_id_base: u64,
    pub query_id_base: u64,
    pub ground_truth: Vec<(u64, u64)>,
    /// Augmentation magnitudes plus the derived seed behind the split's
    /// queries and distractors.
    pub split_cfg: SynthConfig,
}

pub fn build_eval_split(
    cfg: &SynthConfig,
    n_eval_queries: usize,
    n_distractors: usize,
) -> Result<EvalSplit> {
    cfg.validate()?;
    if n_eval_queries == 0 {
        return Err(QkiError::Config(
            "eval split needs at least one query".into(),
        ));
    }
    let split_cfg = SynthConfig {
        n_keys: n_eval_queries,
        n_clusters: cfg.n_clusters.min(n_eval_queries),
        seed: derive_seed(cfg.seed, stream::EVAL_SPLIT, 0),
        ..cfg.clone()
    };
    // Held-out keys are new draws from the *same* mixture as training:
    // identical centers, fresh cluster assignments and offsets. Resampling
    // the centers would shift the distribution and make held-out scores
    // meaningless for a model trained on cluster structure.
    let centers = cluster_centers(cfg)?;
    let keys = keys_around_centers(&centers, n_eval_queries, split_cfg.seed);
    let d = cfg.d_in;
    let mut queries = Matrix::zeros(n_eval_queries + n_distractors, d);
    for i in 0..n_eval_queries {
        let q = augment_query(keys.row(i), i as u64, &split_cfg);
        queries.row_mut(i).copy_from_slice(&q);
    }
    for j in 0..n_distractors {
        let mut rng = item_rng(split_cfg.seed, stream::DISTRACTORS, j as u64);
        let row = queries.row_mut(n_eval_queries + j);
        for v in row.iter_mut() {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            *v = CENTER_SCALE * a + CLUSTER_SPREAD * b;
        }
    }
    // Ids continue past the training keys so the ranges never collide.
    let key_id_base = cfg.n_keys as u64;
    let query_id_base = key_id_base + n_eval_queries as u64;
    let ground_truth = (0..n_eval_queries as u64)
        .map(|i| (query_id_base + i, key_id_base + i))
        .collect();
    Ok(EvalSplit {
        keys,
        queries,
        n_eval_queries,
        n_distractors,
        key_id_base,
        query_id_base,
        ground_truth,
        split_cfg,
    })
}
