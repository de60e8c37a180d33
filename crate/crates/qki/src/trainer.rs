//! Alternating-phase training loop.
//!
//! Each phase freezes one backbone, bulk-evaluates it into an on-disk
//! intermediate store, and trains everything else against descriptors
//! rebuilt from that store. Also hosts the in-batch baseline trainer that
//! shares the loss and architecture but scores each batch only against its
//! own keys.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backbone_forward_batch, backbone_hash, baseline_featurize_batch, encoder_backward,
    encoder_forward, head_forward_batch, head_forward_cached, head_backward, load_encoder,
    save_encoder, set_phase_trainability, BaselineFeaturizer, EncoderParams, LayerGrad, Phase,
};
use crate::error::{QkiError, Result};
use crate::eval::{evaluate_model, EvalData, Metrics};
use crate::loss::{contrastive_bce, loss_backward, score_matrix, LossConfig};
use crate::numeric::{adam_update, cosine_lr, AdamState, CosineSchedule, DenseLayer, Matrix};
use crate::seeds::{derive_seed, stream};
use crate::store::{store_write, tag_from_parts, tag_hex, IntermediateStore};
use crate::synth::{augment_query, EvalSplit, SynthConfig};

/// Budget and stopping rule for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: Phase,
    pub max_steps: u64,
    /// Evaluate on the held-out split every this many steps; 0 = only at
    /// phase end.
    pub eval_every: u64,
    /// Trailing evaluation window for the saturation check; 0 disables
    /// early stopping.
    pub plateau_window: usize,
    /// Stop when the best held-out score improved by less than this
    /// relative amount over the trailing window. 0 never stops.
    pub plateau_min_rel_improve: f64,
}

/// The whole alternation plus the master seed for batch ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phases: Vec<PhaseSpec>,
    pub seed: u64,
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(QkiError::Config("schedule has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.max_steps == 0 {
                return Err(QkiError::Config(format!(
                    "phase {i}: max_steps must be >= 1"
                )));
            }
            if !(p.plateau_min_rel_improve >= 0.0) || !p.plateau_min_rel_improve.is_finite() {
                return Err(QkiError::Config(format!(
                    "phase {i}: plateau_min_rel_improve must be finite and >= 0"
                )));
            }
            if p.plateau_window > 0 && p.eval_every == 0 {
                return Err(QkiError::Config(format!(
                    "phase {i}: plateau_window needs eval_every > 0"
                )));
            }
        }
        Ok(())
    }
}

/// Optimizer knobs shared by every phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr0: f64,
    /// Cosine decay horizon in steps; the schedule restarts at each phase.
    pub cosine_steps: u64,
    /// Floor of the decay as a fraction of lr0.
    pub alpha: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(QkiError::Config(format!(
                "lr0 must be positive and finite, got {}",
                self.lr0
            )));
        }
        if self.cosine_steps == 0 {
            return Err(QkiError::Config("cosine horizon must be >= 1 step".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(QkiError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(QkiError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Owned held-out retrieval set.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub queries: Matrix,
    pub query_ids: Vec<u64>,
    pub keys: Matrix,
    pub key_ids: Vec<u64>,
    pub ground_truth: std::collections::BTreeSet<(u64, u64)>,
}

impl EvalSet {
    pub fn from_split(split: &EvalSplit) -> EvalSet {
        EvalSet {
            queries: split.queries.clone(),
            query_ids: (0..split.queries.rows as u64)
                .map(|i| split.query_id_base + i)
                .collect(),
            keys: split.keys.clone(),
            key_ids: (0..split.keys.rows as u64)
                .map(|i| split.key_id_base + i)
                .collect(),
            ground_truth: split.ground_truth.iter().copied().collect(),
        }
    }

    pub fn data(&self) -> EvalData<'_> {
        EvalData {
            queries: &self.queries,
            query_ids: &self.query_ids,
            keys: &self.keys,
            key_ids: &self.key_ids,
            ground_truth: &self.ground_truth,
        }
    }
}

/// Everything a training run needs in memory.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub synth_cfg: SynthConfig,
    /// Training keys, one row per item.
    pub keys: Matrix,
    pub featurizer: BaselineFeaturizer,
    pub loss_cfg: LossConfig,
    pub opt: OptimizerConfig,
    pub eval: EvalSet,
    /// Chunk size of bulk-evaluated stores.
    pub chunk_size: u32,
    /// Rebuild the frozen-side database descriptors every this many steps.
    pub db_refresh_every: u64,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.loss_cfg.validate()?;
        self.opt.validate()?;
        if self.keys.rows == 0 {
            return Err(QkiError::Config("training set has no keys".into()));
        }
        if self.keys.rows != self.synth_cfg.n_keys || self.keys.cols != self.synth_cfg.d_in {
            return Err(QkiError::Config(format!(
                "key matrix is {}x{} but the data config says {}x{}",
                self.keys.rows, self.keys.cols, self.synth_cfg.n_keys, self.synth_cfg.d_in
            )));
        }
        if self.opt.batch_size > self.keys.rows {
            return Err(QkiError::Config(format!(
                "batch_size {} exceeds the {} training items",
                self.opt.batch_size,
                self.keys.rows
            )));
        }
        if self.chunk_size == 0 {
            return Err(QkiError::Config("chunk_size must be >= 1".into()));
        }
        if self.db_refresh_every == 0 {
            return Err(QkiError::Config("db_refresh_every must be >= 1".into()));
        }
        if self.eval.queries.rows == 0 || self.eval.keys.rows == 0 {
            return Err(QkiError::Config("held-out split is empty".into()));
        }
        Ok(())
    }

    /// The fixed augmented view of one item. Every call regenerates the
    /// same vector from the item's seed stream.
    pub fn augmented_input(&self, item: usize) -> Vec<f64> {
        augment_query(self.keys.row(item), item as u64, &self.synth_cfg)
    }

    /// All augmented views as a matrix, row per item.
    pub fn augmented_matrix(&self) -> Matrix {
        let d = self.keys.cols;
        let mut m = Matrix::zeros(self.keys.rows, d);
        m.data
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, row)| {
                row.copy_from_slice(&augment_query(self.keys.row(i), i as u64, &self.synth_cfg));
            });
        m
    }
}

/// Mutable training state threaded through every step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub q: EncoderParams,
    pub k: EncoderParams,
    /// Adam moments keyed by parameter-group id, e.g. "q/backbone/0/weight".
    pub adam: BTreeMap<String, AdamState>,
    /// Global optimizer-step counter across all phases.
    pub step: u64,
    pub phase_index: usize,
    pub store: Option<IntermediateStore>,
}

impl TrainState {
    pub fn new(q: EncoderParams, k: EncoderParams) -> TrainState {
        TrainState {
            q,
            k,
            adam: BTreeMap::new(),
            step: 0,
            phase_index: 0,
            store: None,
        }
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub lr: f64,
    pub l: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub short_mine: bool,
    /// Seconds spent in the step; excluded from serialized logs so reruns
    /// compare byte for byte.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Content hash of a full-precision matrix.
pub fn matrix_tag(m: &Matrix) -> [u8; 32] {
    let mut bytes = Vec::with_capacity(16 + m.data.len() * 8);
    bytes.extend_from_slice(&(m.rows as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    tag_from_parts(&[&bytes])
}

/// Tag a store must carry: the frozen backbone's parameter hash combined
/// with the content hash of the database it was evaluated on.
pub fn store_tag(frozen: &EncoderParams, data_tag: &[u8; 32]) -> [u8; 32] {
    tag_from_parts(&[&backbone_hash(frozen), data_tag])
}

/// Run the frozen backbone over every database row and persist the
/// intermediate descriptors as a tagged 16-bit store.
pub fn bulk_evaluate(
    frozen: &EncoderParams,
    inputs: &Matrix,
    chunk_size: u32,
    path: impl Into<PathBuf>,
) -> Result<IntermediateStore> {
    if frozen.trainable_backbone {
        return Err(QkiError::Contract(format!(
            "bulk evaluation requires a frozen backbone, but the {} side is trainable",
            frozen.role.label()
        )));
    }
    let mids = backbone_forward_batch(frozen, inputs)?;
    let tag = store_tag(frozen, &matrix_tag(inputs));
    store_write(
        (0..mids.rows).map(|i| mids.row(i).to_vec()),
        mids.cols as u32,
        chunk_size,
        tag,
        path,
    )
}

/// Per-phase working set: decoded intermediates, database baselines, and
/// the cached frozen-side descriptors.
#[derive(Debug, Clone)]
pub struct PhaseEngine {
    pub kind: Phase,
    /// Intermediate descriptors for the whole database, decoded from the
    /// 16-bit store.
    pub mids: Matrix,
    /// Baseline descriptors of the database items (full precision).
    pub db_bases: Matrix,
    pub db_ids: Vec<u64>,
    /// Content hash of the database inputs, for staleness checks.
    pub data_tag: [u8; 32],
    db_desc: Option<Matrix>,
    steps_since_refresh: u64,
}

impl PhaseEngine {
    pub fn new(
        kind: Phase,
        store: &IntermediateStore,
        db_inputs: &Matrix,
        f: &BaselineFeaturizer,
        frozen: &EncoderParams,
    ) -> Result<PhaseEngine> {
        if store.n_rows != db_inputs.rows as u64 {
            return Err(QkiError::Data(format!(
                "store {} holds {} rows but the database has {}",
                store.path.display(),
                store.n_rows,
                db_inputs.rows
            )));
        }
        if store.dim as usize != frozen.arch.d_mid {
            return Err(QkiError::Data(format!(
                "store {} holds {}-dim rows but the backbone emits {}",
                store.path.display(),
                store.dim,
                frozen.arch.d_mid
            )));
        }
        Ok(PhaseEngine {
            kind,
            mids: store.load_all()?,
            db_bases: baseline_featurize_batch(f, db_inputs)?,
            db_ids: (0..db_inputs.rows as u64).collect(),
            data_tag: matrix_tag(db_inputs),
            db_desc: None,
            steps_since_refresh: 0,
        })
    }

    /// Drop the cached database descriptors; the next step rebuilds them.
    pub fn invalidate(&mut self) {
        self.db_desc = None;
        self.steps_since_refresh = 0;
    }
}

fn zero_group(layers: &[DenseLayer]) -> Vec<LayerGrad> {
    layers
        .iter()
        .map(|l| LayerGrad {
            weight: Matrix::zeros(l.out_dim(), l.in_dim()),
            bias: vec![0.0; l.out_dim()],
        })
        .collect()
}

fn add_group(acc: &mut [LayerGrad], g: &[LayerGrad]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.weight.data.iter_mut().zip(&b.weight.data) {
            *x += y;
        }
        for (x, y) in a.bias.iter_mut().zip(&b.bias) {
            *x += y;
        }
    }
}

fn apply_group(
    adam: &mut BTreeMap<String, AdamState>,
    layers: &mut [DenseLayer],
    grads: &[LayerGrad],
    prefix: &str,
    lr: f64,
) -> Result<()> {
    for (idx, (layer, g)) in layers.iter_mut().zip(grads).enumerate() {
        let wid = format!("{prefix}/{idx}/weight");
        let st = adam
            .entry(wid.clone())
            .or_insert_with(|| AdamState::with_defaults(layer.weight.data.len()));
        adam_update(&mut layer.weight.data, &g.weight.data, st, lr, &wid)?;
        let bid = format!("{prefix}/{idx}/bias");
        let st = adam
            .entry(bid.clone())
            .or_insert_with(|| AdamState::with_defaults(layer.bias.len()));
        adam_update(&mut layer.bias, &g.bias, st, lr, &bid)?;
    }
    Ok(())
}

/// One optimizer step of a phase: forward the moving side on the batch,
/// rebuild the frozen-side database descriptors from the store, score, mine,
/// backpropagate, and update every trainable group.
pub fn phase_step(
    state: &mut TrainState,
    engine: &mut PhaseEngine,
    setup: &TrainSetup,
    batch_items: &[usize],
    lr: f64,
) -> Result<StepRecord> {
    let t0 = Instant::now();
    if batch_items.is_empty() {
        return Err(QkiError::Data("phase step got an empty batch".into()));
    }
    let (moving, frozen) = match engine.kind {
        Phase::QPhase => (&state.q, &state.k),
        Phase::KPhase => (&state.k, &state.q),
    };
    if !moving.trainable_backbone
        || !moving.trainable_head
        || frozen.trainable_backbone
        || !frozen.trainable_head
    {
        return Err(QkiError::Contract(format!(
            "{} phase expects the {} backbone frozen and every other group trainable",
            engine.kind.label(),
            frozen.role.label()
        )));
    }
    let store = state
        .store
        .as_ref()
        .ok_or_else(|| QkiError::Contract("phase step has no intermediate store".into()))?;
    let expected = store_tag(frozen, &engine.data_tag);
    if store.source_tag != expected {
        return Err(QkiError::Contract(format!(
            "intermediate store {} is stale: tag {} does not match the frozen {} backbone",
            store.path.display(),
            tag_hex(&store.source_tag),
            frozen.role.label()
        )));
    }

    // (a) Moving-side full forward on the batch.
    let b = batch_items.len();
    let mut batch_desc = Matrix::zeros(b, moving.arch.d_out);
    let mut caches = Vec::with_capacity(b);
    for (r, &item) in batch_items.iter().enumerate() {
        if item >= setup.keys.rows {
            return Err(QkiError::Data(format!(
                "batch item {item} out of range ({} training items)",
                setup.keys.rows
            )));
        }
        let input = match engine.kind {
            Phase::QPhase => setup.augmented_input(item),
            Phase::KPhase => setup.keys.row(item).to_vec(),
        };
        let (desc, cache) = encoder_forward(moving, &setup.featurizer, &input)?;
        batch_desc.row_mut(r).copy_from_slice(&desc);
        caches.push(cache);
    }

    // (b) Frozen-side head over the whole stored database.
    if engine.db_desc.is_none() || engine.steps_since_refresh >= setup.db_refresh_every {
        engine.db_desc = Some(head_forward_batch(frozen, &engine.mids, &engine.db_bases)?);
        engine.steps_since_refresh = 1;
    } else {
        engine.steps_since_refresh += 1;
    }
    let db_desc = engine.db_desc.as_ref().unwrap();

    // (c) Score, mine, loss.
    let ids: Vec<u64> = batch_items.iter().map(|&i| i as u64).collect();
    let sm = score_matrix(
        &batch_desc,
        &[db_desc],
        setup.loss_cfg.tau,
        &ids,
        &engine.db_ids,
        &ids,
    )?;
    let bd = contrastive_bce(&sm, &setup.loss_cfg)?;
    if !bd.l.is_finite() {
        return Err(QkiError::Numeric(format!(
            "step {}: non-finite loss {} (positive term {}, negative term {}, lr {lr})",
            state.step + 1,
            bd.l,
            bd.l_pos,
            bd.l_neg
        )));
    }
    let grads = loss_backward(&sm, &setup.loss_cfg, &bd, &batch_desc, db_desc)?;

    // (d) Backward: full moving encoder per batch row, frozen head only for
    // participating database columns. All gradients are accumulated before
    // any parameter moves.
    let mut mv_backbone = zero_group(&moving.backbone_layers);
    let mut mv_head = zero_group(&moving.head_layers);
    let mut fr_head = zero_group(&frozen.head_layers);
    for r in 0..b {
        let eg = encoder_backward(moving, &caches[r], grads.batch.row(r))?;
        add_group(
            &mut mv_backbone,
            eg.backbone.as_deref().ok_or_else(|| {
                QkiError::Contract("moving backbone produced no gradient".into())
            })?,
        );
        add_group(
            &mut mv_head,
            eg.head.as_deref().ok_or_else(|| {
                QkiError::Contract("moving head produced no gradient".into())
            })?,
        );
    }
    for (col, g) in &grads.db {
        let (_, cache) = head_forward_cached(frozen, engine.mids.row(*col), engine.db_bases.row(*col))?;
        let (hg, _) = head_backward(frozen, &cache, g)?;
        add_group(&mut fr_head, &hg);
    }

    // (e) Adam on all trainable groups, in a fixed global order.
    state.step += 1;
    match engine.kind {
        Phase::QPhase => {
            apply_group(&mut state.adam, &mut state.q.backbone_layers, &mv_backbone, "q/backbone", lr)?;
            apply_group(&mut state.adam, &mut state.q.head_layers, &mv_head, "q/head", lr)?;
            apply_group(&mut state.adam, &mut state.k.head_layers, &fr_head, "k/head", lr)?;
        }
        Phase::KPhase => {
            apply_group(&mut state.adam, &mut state.q.head_layers, &fr_head, "q/head", lr)?;
            apply_group(&mut state.adam, &mut state.k.backbone_layers, &mv_backbone, "k/backbone", lr)?;
            apply_group(&mut state.adam, &mut state.k.head_layers, &mv_head, "k/head", lr)?;
        }
    }

    Ok(StepRecord {
        step: state.step,
        phase: engine.kind.label().to_string(),
        lr,
        l: bd.l,
        l_pos: bd.l_pos,
        l_neg: bd.l_neg,
        short_mine: bd.short_mine,
        wall_time: t0.elapsed().as_secs_f64(),
    })
}

/// Everything one phase produced.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub records: Vec<StepRecord>,
    /// (steps into the phase, held-out metrics) at every evaluation point.
    pub evals: Vec<(u64, Metrics)>,
    pub final_metrics: Metrics,
    pub steps_run: u64,
    pub stopped_early: bool,
}

fn plateaued(history: &[f64], spec: &PhaseSpec) -> bool {
    let w = spec.plateau_window;
    if w == 0 || history.len() <= w {
        return false;
    }
    let best = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best_now = best(history);
    let best_before = best(&history[..history.len() - w]);
    let rel = (best_now - best_before) / best_before.max(1e-12);
    rel < spec.plateau_min_rel_improve
}

fn held_out(state: &TrainState, setup: &TrainSetup) -> Result<Metrics> {
    evaluate_model(
        &state.q,
        &state.k,
        &setup.featurizer,
        &setup.eval.data(),
        setup.loss_cfg.tau,
    )
}

/// Run one phase: shuffled batches, cosine-decayed steps, periodic held-out
/// evaluation, and the saturation-based early stop.
pub fn run_phase(
    state: &mut TrainState,
    engine: &mut PhaseEngine,
    setup: &TrainSetup,
    spec: &PhaseSpec,
    phase_index: usize,
    master_seed: u64,
) -> Result<PhaseOutcome> {
    let n = setup.keys.rows;
    let b = setup.opt.batch_size;
    let batches_per_epoch = (n / b) as u64;
    let sched = CosineSchedule {
        lr0: setup.opt.lr0,
        total_steps: setup.opt.cosine_steps,
        alpha: setup.opt.alpha,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    let mut evals: Vec<(u64, Metrics)> = Vec::new();
    let mut mu_history = Vec::new();
    let mut stopped_early = false;
    let mut steps_run = 0;
    let mut last_eval_step = None;
    for t in 0..spec.max_steps {
        let epoch = t / batches_per_epoch;
        let slot = (t % batches_per_epoch) as usize;
        if slot == 0 {
            // Fresh shuffle per epoch; partial trailing batches are dropped.
            order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                master_seed,
                stream::BATCH_ORDER,
                phase_index as u64 * 1_000_003 + epoch,
            ));
            order.shuffle(&mut rng);
        }
        let items = &order[slot * b..(slot + 1) * b];
        let lr = cosine_lr(&sched, t);
        records.push(phase_step(state, engine, setup, items, lr)?);
        steps_run = t + 1;
        if spec.eval_every > 0 && steps_run % spec.eval_every == 0 {
            let m = held_out(state, setup)?;
            mu_history.push(m.mu_ap);
            evals.push((steps_run, m));
            last_eval_step = Some(steps_run);
            if plateaued(&mu_history, spec) {
                stopped_early = true;
                break;
            }
        }
    }
    let final_metrics = if last_eval_step == Some(steps_run) {
        evals.last().unwrap().1
    } else {
        let m = held_out(state, setup)?;
        evals.push((steps_run, m));
        m
    };
    Ok(PhaseOutcome {
        records,
        evals,
        final_metrics,
        steps_run,
        stopped_early,
    })
}

/// One row of the per-phase results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub label: String,
    pub kind: String,
    pub steps: u64,
    pub stopped_early: bool,
    pub metrics: Metrics,
}

/// Held-out results before training and after each phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTable {
    pub baseline: Metrics,
    pub phases: Vec<PhaseSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedRunState {
    completed_phases: usize,
    global_step: u64,
    adam: BTreeMap<String, AdamState>,
}

/// Phase labels by kind count: Q1, K1, Q2, ...
pub fn phase_labels(schedule: &PhaseSchedule) -> Vec<String> {
    let mut nq = 0;
    let mut nk = 0;
    schedule
        .phases
        .iter()
        .map(|p| match p.kind {
            Phase::QPhase => {
                nq += 1;
                format!("Q{nq}")
            }
            Phase::KPhase => {
                nk += 1;
                format!("K{nk}")
            }
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| QkiError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| QkiError::Data(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| QkiError::io(path, e))?;
    w.flush().map_err(|e| QkiError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| QkiError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| QkiError::Data(format!("{}: {e}", path.display())))
}

fn append_records(path: &Path, records: &[StepRecord]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| QkiError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)
            .map_err(|e| QkiError::Data(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| QkiError::io(path, e))?;
    }
    w.flush().map_err(|e| QkiError::io(path, e))
}

/// Run the full alternation. Artifacts land in `out_dir`: a JSON-lines step
/// log, per-phase stores and checkpoints, the phase table, and a resume
/// state file. A rerun over a directory with completed phases picks up at
/// the next phase boundary and produces byte-identical artifacts.
pub fn run_qk_iteration(
    setup: &TrainSetup,
    schedule: &PhaseSchedule,
    q_init: EncoderParams,
    k_init: EncoderParams,
    out_dir: impl AsRef<Path>,
) -> Result<(TrainState, RunTable)> {
    schedule.validate()?;
    setup.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| QkiError::io(out_dir, e))?;
    let labels = phase_labels(schedule);
    let state_path = out_dir.join("state.json");
    let table_path = out_dir.join("phase_table.json");
    let log_path = out_dir.join("train_log.jsonl");

    let (mut state, mut table, completed) = if state_path.exists() {
        let saved: SavedRunState = read_json(&state_path)?;
        let table: RunTable = read_json(&table_path)?;
        if saved.completed_phases > schedule.phases.len()
            || saved.completed_phases != table.phases.len()
        {
            return Err(QkiError::Data(format!(
                "resume state at {} reports {} completed phases, but the table holds {} and the schedule {}",
                state_path.display(),
                saved.completed_phases,
                table.phases.len(),
                schedule.phases.len()
            )));
        }
        let c = saved.completed_phases;
        let (q, k) = if c == 0 {
            (q_init, k_init)
        } else {
            let label = &labels[c - 1];
            let (q, _) = load_encoder(out_dir.join(format!("checkpoint_{label}_q.qkcp")))?;
            let (k, _) = load_encoder(out_dir.join(format!("checkpoint_{label}_k.qkcp")))?;
            (q, k)
        };
        let mut st = TrainState::new(q, k);
        st.adam = saved.adam;
        st.step = saved.global_step;
        (st, table, c)
    } else {
        let baseline = evaluate_model(
            &q_init,
            &k_init,
            &setup.featurizer,
            &setup.eval.data(),
            setup.loss_cfg.tau,
        )?;
        (
            TrainState::new(q_init, k_init),
            RunTable {
                baseline,
                phases: Vec::new(),
            },
            0,
        )
    };

    let mut prev_kind = (completed > 0).then(|| schedule.phases[completed - 1].kind);
    for i in completed..schedule.phases.len() {
        let spec = &schedule.phases[i];
        let label = &labels[i];
        state.phase_index = i;
        set_phase_trainability(&mut state.q, &mut state.k, spec.kind);
        if prev_kind != Some(spec.kind) {
            // The backbone about to train was frozen (or fresh): its moments
            // describe a different loss landscape, so they start over.
            let prefix = match spec.kind {
                Phase::QPhase => "q/backbone/",
                Phase::KPhase => "k/backbone/",
            };
            state.adam.retain(|id, _| !id.starts_with(prefix));
        }
        let (frozen, db_inputs): (&EncoderParams, Cow<Matrix>) = match spec.kind {
            Phase::QPhase => (&state.k, Cow::Borrowed(&setup.keys)),
            Phase::KPhase => (&state.q, Cow::Owned(setup.augmented_matrix())),
        };
        let store_path = out_dir.join(format!("store_{label}.qkis"));
        let store = bulk_evaluate(frozen, &db_inputs, setup.chunk_size, &store_path)?;
        let mut engine = PhaseEngine::new(spec.kind, &store, &db_inputs, &setup.featurizer, frozen)?;
        state.store = Some(store);
        let outcome = run_phase(&mut state, &mut engine, setup, spec, i, schedule.seed)?;
        append_records(&log_path, &outcome.records)?;
        save_encoder(
            out_dir.join(format!("checkpoint_{label}_q.qkcp")),
            &state.q,
            &setup.featurizer,
        )?;
        save_encoder(
            out_dir.join(format!("checkpoint_{label}_k.qkcp")),
            &state.k,
            &setup.featurizer,
        )?;
        table.phases.push(PhaseSummary {
            label: label.clone(),
            kind: spec.kind.label().to_string(),
            steps: outcome.steps_run,
            stopped_early: outcome.stopped_early,
            metrics: outcome.final_metrics,
        });
        write_json(&table_path, &table)?;
        write_json(
            &state_path,
            &SavedRunState {
                completed_phases: i + 1,
                global_step: state.step,
                adam: state.adam.clone(),
            },
        )?;
        prev_kind = Some(spec.kind);
    }
    Ok((state, table))
}

/// One step of the in-batch baseline: both encoders fully trainable, the
/// database is just the batch's own keys.
pub fn simclr_step(
    state: &mut TrainState,
    setup: &TrainSetup,
    batch_items: &[usize],
    lr: f64,
) -> Result<StepRecord> {
    let t0 = Instant::now();
    if batch_items.is_empty() {
        return Err(QkiError::Data("baseline step got an empty batch".into()));
    }
    if !state.q.trainable_backbone
        || !state.q.trainable_head
        || !state.k.trainable_backbone
        || !state.k.trainable_head
    {
        return Err(QkiError::Contract(
            "the in-batch baseline trains every parameter group; found a frozen one".into(),
        ));
    }
    let b = batch_items.len();
    let mut q_desc = Matrix::zeros(b, state.q.arch.d_out);
    let mut k_desc = Matrix::zeros(b, state.k.arch.d_out);
    let mut q_caches = Vec::with_capacity(b);
    let mut k_caches = Vec::with_capacity(b);
    for (r, &item) in batch_items.iter().enumerate() {
        if item >= setup.keys.rows {
            return Err(QkiError::Data(format!(
                "batch item {item} out of range ({} training items)",
                setup.keys.rows
            )));
        }
        let qx = setup.augmented_input(item);
        let (dq, cq) = encoder_forward(&state.q, &setup.featurizer, &qx)?;
        q_desc.row_mut(r).copy_from_slice(&dq);
        q_caches.push(cq);
        let (dk, ck) = encoder_forward(&state.k, &setup.featurizer, setup.keys.row(item))?;
        k_desc.row_mut(r).copy_from_slice(&dk);
        k_caches.push(ck);
    }
    let ids: Vec<u64> = batch_items.iter().map(|&i| i as u64).collect();
    let sm = score_matrix(&q_desc, &[&k_desc], setup.loss_cfg.tau, &ids, &ids, &ids)?;
    let bd = contrastive_bce(&sm, &setup.loss_cfg)?;
    if !bd.l.is_finite() {
        return Err(QkiError::Numeric(format!(
            "step {}: non-finite loss {} (positive term {}, negative term {}, lr {lr})",
            state.step + 1,
            bd.l,
            bd.l_pos,
            bd.l_neg
        )));
    }
    let grads = loss_backward(&sm, &setup.loss_cfg, &bd, &q_desc, &k_desc)?;
    let mut qb = zero_group(&state.q.backbone_layers);
    let mut qh = zero_group(&state.q.head_layers);
    let mut kb = zero_group(&state.k.backbone_layers);
    let mut kh = zero_group(&state.k.head_layers);
    for r in 0..b {
        let eg = encoder_backward(&state.q, &q_caches[r], grads.batch.row(r))?;
        add_group(&mut qb, eg.backbone.as_deref().unwrap());
        add_group(&mut qh, eg.head.as_deref().unwrap());
    }
    for (col, g) in &grads.db {
        let eg = encoder_backward(&state.k, &k_caches[*col], g)?;
        add_group(&mut kb, eg.backbone.as_deref().unwrap());
        add_group(&mut kh, eg.head.as_deref().unwrap());
    }
    state.step += 1;
    apply_group(&mut state.adam, &mut state.q.backbone_layers, &qb, "q/backbone", lr)?;
    apply_group(&mut state.adam, &mut state.q.head_layers, &qh, "q/head", lr)?;
    apply_group(&mut state.adam, &mut state.k.backbone_layers, &kb, "k/backbone", lr)?;
    apply_group(&mut state.adam, &mut state.k.head_layers, &kh, "k/head", lr)?;
    Ok(StepRecord {
        step: state.step,
        phase: "S".to_string(),
        lr,
        l: bd.l,
        l_pos: bd.l_pos,
        l_neg: bd.l_neg,
        short_mine: bd.short_mine,
        wall_time: t0.elapsed().as_secs_f64(),
    })
}

/// Everything the baseline run produced.
#[derive(Debug, Clone)]
pub struct SimclrOutcome {
    pub records: Vec<StepRecord>,
    pub evals: Vec<(u64, Metrics)>,
    pub baseline: Metrics,
    pub final_metrics: Metrics,
}

/// Train the in-batch baseline for a fixed budget. The cosine schedule
/// restarts every `opt.cosine_steps` so the decay profile mirrors the
/// alternation's phases. Artifacts: the step log, final checkpoints, and a
/// summary file.
pub fn run_simclr(
    setup: &TrainSetup,
    total_steps: u64,
    eval_every: u64,
    master_seed: u64,
    q_init: EncoderParams,
    k_init: EncoderParams,
    out_dir: impl AsRef<Path>,
) -> Result<(TrainState, SimclrOutcome)> {
    setup.validate()?;
    if total_steps == 0 {
        return Err(QkiError::Config("baseline run needs at least one step".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| QkiError::io(out_dir, e))?;
    let mut q = q_init;
    let mut k = k_init;
    q.trainable_backbone = true;
    q.trainable_head = true;
    k.trainable_backbone = true;
    k.trainable_head = true;
    let baseline = evaluate_model(&q, &k, &setup.featurizer, &setup.eval.data(), setup.loss_cfg.tau)?;
    let mut state = TrainState::new(q, k);
    let n = setup.keys.rows;
    let bsz = setup.opt.batch_size;
    let batches_per_epoch = (n / bsz) as u64;
    let sched = CosineSchedule {
        lr0: setup.opt.lr0,
        total_steps: setup.opt.cosine_steps,
        alpha: setup.opt.alpha,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut last_eval_step = None;
    for t in 0..total_steps {
        let epoch = t / batches_per_epoch;
        let slot = (t % batches_per_epoch) as usize;
        if slot == 0 {
            order = (0..n).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(master_seed, stream::BATCH_ORDER, epoch));
            order.shuffle(&mut rng);
        }
        let items = &order[slot * bsz..(slot + 1) * bsz];
        let lr = cosine_lr(&sched, t % setup.opt.cosine_steps);
        records.push(simclr_step(&mut state, setup, items, lr)?);
        if eval_every > 0 && (t + 1) % eval_every == 0 {
            evals.push((t + 1, held_out(&state, setup)?));
            last_eval_step = Some(t + 1);
        }
    }
    let final_metrics = if last_eval_step == Some(total_steps) {
        evals.last().unwrap().1
    } else {
        let m = held_out(&state, setup)?;
        evals.push((total_steps, m));
        m
    };
    append_records(&out_dir.join("train_log.jsonl"), &records)?;
    save_encoder(out_dir.join("checkpoint_final_q.qkcp"), &state.q, &setup.featurizer)?;
    save_encoder(out_dir.join("checkpoint_final_k.qkcp"), &state.k, &setup.featurizer)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        baseline: &'a Metrics,
        final_metrics: &'a Metrics,
        steps: u64,
    }
    write_json(
        &out_dir.join("summary.json"),
        &Summary {
            baseline: &baseline,
            final_metrics: &final_metrics,
            steps: total_steps,
        },
    )?;
    Ok((
        state,
        SimclrOutcome {
            records,
            evals,
            baseline,
            final_metrics,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{backbone_forward, init_encoder, init_featurizer, param_hash, EncoderArch, EncoderRole};
    use crate::half::encode_half;
    use crate::synth::{build_eval_split, generate_keys};

    fn tmp() -> PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().to_path_buf();
        std::mem::forget(dir);
        path
    }

    fn toy_setup(n_keys: usize, batch_size: usize) -> (TrainSetup, EncoderParams, EncoderParams) {
        let synth_cfg = SynthConfig {
            n_keys,
            d_in: 8,
            n_clusters: 4,
            noise_scale: 0.05,
            mask_fraction: 0.2,
            scale_range: [0.9, 1.1],
            shift_scale: 2.0,
            seed: 77,
        };
        let keys = generate_keys(&synth_cfg).unwrap();
        let arch = EncoderArch {
            d_in: 8,
            backbone_hidden: 12,
            d_mid: 10,
            head_hidden: 8,
            d_out: 6,
        };
        // Tiny fixtures can have too few keys for a full-rank component fit,
        // so the featurizer trains on a larger draw from the same family.
        let fit_keys = generate_keys(&SynthConfig {
            n_keys: n_keys.max(64),
            ..synth_cfg.clone()
        })
        .unwrap();
        let featurizer = init_featurizer(77, 12, 1.0, arch.d_base(), &fit_keys).unwrap();
        let q = init_encoder(arch, EncoderRole::Query, 900, &keys).unwrap();
        let k = init_encoder(arch, EncoderRole::Key, 901, &keys).unwrap();
        let split = build_eval_split(&synth_cfg, 16, 8).unwrap();
        let eval = EvalSet::from_split(&split);
        let setup = TrainSetup {
            synth_cfg,
            keys,
            featurizer,
            loss_cfg: LossConfig {
                m_per_positive: 4,
                ..LossConfig::default()
            },
            opt: OptimizerConfig {
                lr0: 1e-3,
                cosine_steps: 100,
                alpha: 0.1,
                batch_size,
            },
            eval,
            chunk_size: 4,
            db_refresh_every: 1,
        };
        (setup, q, k)
    }

    /// Build a ready-to-step state and engine for one phase, with the store
    /// written under `dir`.
    fn prepare_phase(
        setup: &TrainSetup,
        q: EncoderParams,
        k: EncoderParams,
        kind: Phase,
        dir: &Path,
    ) -> (TrainState, PhaseEngine) {
        let mut state = TrainState::new(q, k);
        set_phase_trainability(&mut state.q, &mut state.k, kind);
        let (frozen, db_inputs): (&EncoderParams, Cow<Matrix>) = match kind {
            Phase::QPhase => (&state.k, Cow::Borrowed(&setup.keys)),
            Phase::KPhase => (&state.q, Cow::Owned(setup.augmented_matrix())),
        };
        let store = bulk_evaluate(frozen, &db_inputs, setup.chunk_size, dir.join("store.qkis")).unwrap();
        let engine = PhaseEngine::new(kind, &store, &db_inputs, &setup.featurizer, frozen).unwrap();
        state.store = Some(store);
        (state, engine)
    }

    #[test]
    fn bulk_evaluate_chunks_and_matches_direct() {
        let (setup, _, k) = toy_setup(10, 2);
        let mut k = k;
        k.trainable_backbone = false;
        let store = bulk_evaluate(&k, &setup.keys, 4, tmp().join("s.qkis")).unwrap();
        assert_eq!(store.n_rows, 10);
        assert_eq!(store.n_chunks(), 3);
        assert_eq!(
            (0..3).map(|c| store.chunk_rows(c)).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        let all = store.load_all().unwrap();
        for i in 0..10 {
            let direct = backbone_forward(&k, setup.keys.row(i)).unwrap();
            for (a, &b) in all.row(i).iter().zip(&direct) {
                // The store holds exactly the rounded-to-16-bit value.
                let roundtrip = crate::half::decode_half(encode_half(b).unwrap());
                assert_eq!(a.to_bits(), roundtrip.to_bits());
            }
        }
    }

    #[test]
    fn bulk_evaluate_rejects_trainable_backbone() {
        let (setup, q, _) = toy_setup(6, 2);
        let err = bulk_evaluate(&q, &setup.keys, 4, tmp().join("s.qkis")).unwrap_err();
        assert!(matches!(err, QkiError::Contract(_)), "{err}");
    }

    #[test]
    fn bulk_evaluate_is_bitwise_deterministic() {
        let (setup, _, k) = toy_setup(9, 2);
        let mut k = k;
        k.trainable_backbone = false;
        let dir = tmp();
        bulk_evaluate(&k, &setup.keys, 4, dir.join("a.qkis")).unwrap();
        bulk_evaluate(&k, &setup.keys, 4, dir.join("b.qkis")).unwrap();
        let a = fs::read(dir.join("a.qkis")).unwrap();
        let b = fs::read(dir.join("b.qkis")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phase_step_is_deterministic() {
        let (setup, q, k) = toy_setup(24, 4);
        let dir = tmp();
        let (state0, engine0) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut state = state0.clone();
            let mut engine = engine0.clone();
            let rec = phase_step(&mut state, &mut engine, &setup, &[3, 1, 7, 2], 1e-3).unwrap();
            runs.push((rec, param_hash(&state.q), param_hash(&state.k)));
        }
        assert_eq!(runs[0].0.l.to_bits(), runs[1].0.l.to_bits());
        assert_eq!(runs[0].0.l_pos.to_bits(), runs[1].0.l_pos.to_bits());
        assert_eq!(runs[0].0.l_neg.to_bits(), runs[1].0.l_neg.to_bits());
        assert_eq!(runs[0].1, runs[1].1);
        assert_eq!(runs[0].2, runs[1].2);
    }

    #[test]
    fn q_phase_step_leaves_k_backbone_untouched() {
        let (setup, q, k) = toy_setup(24, 4);
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        let k_backbone_before = backbone_hash(&state.k);
        let k_full_before = param_hash(&state.k);
        let q_before = param_hash(&state.q);
        phase_step(&mut state, &mut engine, &setup, &[0, 5, 9, 11], 1e-3).unwrap();
        assert_eq!(backbone_hash(&state.k), k_backbone_before);
        assert_ne!(param_hash(&state.k), k_full_before, "frozen-side head should train");
        assert_ne!(param_hash(&state.q), q_before, "moving side should train");
    }

    #[test]
    fn k_phase_mirrors_the_freeze_pattern() {
        let (setup, q, k) = toy_setup(24, 4);
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::KPhase, &dir);
        let q_backbone_before = backbone_hash(&state.q);
        let k_backbone_before = backbone_hash(&state.k);
        // Two steps: the zero-initialized final head layer blocks backbone
        // gradients on the very first one.
        phase_step(&mut state, &mut engine, &setup, &[0, 5, 9, 11], 1e-3).unwrap();
        phase_step(&mut state, &mut engine, &setup, &[2, 6, 10, 12], 1e-3).unwrap();
        assert_eq!(backbone_hash(&state.q), q_backbone_before);
        assert_ne!(backbone_hash(&state.k), k_backbone_before);
    }

    #[test]
    fn stale_store_is_rejected() {
        let (setup, q, k) = toy_setup(12, 4);
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        // Nudge one frozen backbone weight: the store no longer describes it.
        state.k.backbone_layers[0].weight.data[0] += 1e-9;
        let err = phase_step(&mut state, &mut engine, &setup, &[0, 1, 2, 3], 1e-3).unwrap_err();
        match err {
            QkiError::Contract(msg) => assert!(msg.contains("stale"), "{msg}"),
            other => panic!("expected contract violation, got {other}"),
        }
    }

    #[test]
    fn toy_loss_descends_over_fifty_steps() {
        let (mut setup, q, k) = toy_setup(6, 1);
        // Mine the whole pool every step so the loss sees a fixed objective.
        setup.loss_cfg.m_per_positive = 5;
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let rec = phase_step(&mut state, &mut engine, &setup, &[0], 1e-3).unwrap();
            assert!(rec.l < last, "loss {} did not drop below {last}", rec.l);
            last = rec.l;
        }
    }

    #[test]
    fn k_head_sees_gradient_during_q_phase() {
        let (setup, q, k) = toy_setup(24, 4);
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        for step in 0..3 {
            let items: Vec<usize> = (0..4).map(|i| (step * 4 + i) % 24).collect();
            phase_step(&mut state, &mut engine, &setup, &items, 1e-3).unwrap();
        }
        let st = state
            .adam
            .get("k/head/0/weight")
            .expect("frozen-side head should accumulate optimizer state");
        assert!(st.m.iter().any(|&m| m != 0.0));
        assert_eq!(st.t, 3);
    }

    #[test]
    fn run_phase_uses_full_budget_without_plateau_window() {
        let (setup, q, k) = toy_setup(12, 4);
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        let spec = PhaseSpec {
            kind: Phase::QPhase,
            max_steps: 7,
            eval_every: 3,
            plateau_window: 0,
            plateau_min_rel_improve: 0.5,
        };
        let out = run_phase(&mut state, &mut engine, &setup, &spec, 0, 55).unwrap();
        assert_eq!(out.steps_run, 7);
        assert_eq!(out.records.len(), 7);
        assert!(!out.stopped_early);
        // Evals at steps 3 and 6 plus the phase-end one.
        assert_eq!(out.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 6, 7]);
        assert_eq!(state.step, 7);
    }

    #[test]
    fn plateau_threshold_zero_never_stops() {
        let (setup, q, k) = toy_setup(12, 4);
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        let spec = PhaseSpec {
            kind: Phase::QPhase,
            max_steps: 6,
            eval_every: 1,
            plateau_window: 1,
            plateau_min_rel_improve: 0.0,
        };
        let out = run_phase(&mut state, &mut engine, &setup, &spec, 0, 55).unwrap();
        assert!(!out.stopped_early);
        assert_eq!(out.steps_run, 6);
    }

    #[test]
    fn plateau_stops_when_nothing_improves() {
        let (mut setup, q, k) = toy_setup(12, 4);
        // A learning rate this small cannot move the held-out score.
        setup.opt.lr0 = 1e-15;
        let dir = tmp();
        let (mut state, mut engine) = prepare_phase(&setup, q, k, Phase::QPhase, &dir);
        let spec = PhaseSpec {
            kind: Phase::QPhase,
            max_steps: 10,
            eval_every: 1,
            plateau_window: 2,
            plateau_min_rel_improve: 0.01,
        };
        let out = run_phase(&mut state, &mut engine, &setup, &spec, 0, 55).unwrap();
        assert!(out.stopped_early);
        // The first comparison happens once the window has one older entry.
        assert_eq!(out.steps_run, 3);
    }

    #[test]
    fn schedule_and_optimizer_validation() {
        let good = PhaseSpec {
            kind: Phase::QPhase,
            max_steps: 1,
            eval_every: 0,
            plateau_window: 0,
            plateau_min_rel_improve: 0.0,
        };
        assert!(PhaseSchedule { phases: vec![good], seed: 1 }.validate().is_ok());
        assert!(PhaseSchedule { phases: vec![], seed: 1 }.validate().is_err());
        let zero = PhaseSpec { max_steps: 0, ..good };
        assert!(PhaseSchedule { phases: vec![zero], seed: 1 }.validate().is_err());
        let windowed = PhaseSpec { plateau_window: 2, eval_every: 0, ..good };
        assert!(PhaseSchedule { phases: vec![windowed], seed: 1 }.validate().is_err());

        let opt = OptimizerConfig { lr0: 1e-3, cosine_steps: 10, alpha: 0.1, batch_size: 4 };
        assert!(opt.validate().is_ok());
        assert!(OptimizerConfig { lr0: 0.0, ..opt }.validate().is_err());
        assert!(OptimizerConfig { cosine_steps: 0, ..opt }.validate().is_err());
        assert!(OptimizerConfig { alpha: 1.5, ..opt }.validate().is_err());
        assert!(OptimizerConfig { batch_size: 0, ..opt }.validate().is_err());
    }

    fn quick_spec(kind: Phase, max_steps: u64) -> PhaseSpec {
        PhaseSpec {
            kind,
            max_steps,
            eval_every: 0,
            plateau_window: 0,
            plateau_min_rel_improve: 0.0,
        }
    }

    #[test]
    fn single_phase_run_writes_one_store() {
        let (setup, q, k) = toy_setup(12, 4);
        let dir = tmp();
        let schedule = PhaseSchedule {
            phases: vec![quick_spec(Phase::QPhase, 3)],
            seed: 5,
        };
        let (state, table) = run_qk_iteration(&setup, &schedule, q, k, &dir).unwrap();
        assert!(dir.join("store_Q1.qkis").exists());
        assert!(!dir.join("store_K1.qkis").exists());
        assert_eq!(table.phases.len(), 1);
        assert_eq!(table.phases[0].label, "Q1");
        assert_eq!(state.step, 3);
        // The single store came from the key backbone over the keys.
        let store = IntermediateStore::open(dir.join("store_Q1.qkis")).unwrap();
        assert_eq!(store.source_tag, store_tag(&state.k, &matrix_tag(&setup.keys)));
    }

    #[test]
    fn second_phase_consumes_the_trained_q_backbone() {
        let (setup, q, k) = toy_setup(12, 4);
        let q_init_hash = backbone_hash(&q);
        let dir = tmp();
        let schedule = PhaseSchedule {
            phases: vec![quick_spec(Phase::QPhase, 3), quick_spec(Phase::KPhase, 3)],
            seed: 5,
        };
        let (state, _) = run_qk_iteration(&setup, &schedule, q, k, &dir).unwrap();
        let store = IntermediateStore::open(dir.join("store_K1.qkis")).unwrap();
        let db = setup.augmented_matrix();
        // The K-phase store matches the Q backbone as trained in Q1 (still
        // intact after K1, where it stayed frozen) and not the initial one.
        assert_eq!(store.source_tag, store_tag(&state.q, &matrix_tag(&db)));
        assert_ne!(backbone_hash(&state.q), q_init_hash);
    }

    #[test]
    fn backbone_moments_reset_when_it_thaws() {
        let (setup, q, k) = toy_setup(12, 4);
        let dir = tmp();
        let schedule = PhaseSchedule {
            phases: vec![
                quick_spec(Phase::QPhase, 3),
                quick_spec(Phase::KPhase, 3),
                quick_spec(Phase::QPhase, 4),
            ],
            seed: 5,
        };
        let (state, _) = run_qk_iteration(&setup, &schedule, q, k, &dir).unwrap();
        // Q backbone trained in Q1 (3 steps), was frozen in K1, and restarted
        // fresh for Q2: its moments count only Q2's 4 steps.
        assert_eq!(state.adam["q/backbone/0/weight"].t, 4);
        // Heads train in every phase and are never reset.
        assert_eq!(state.adam["q/head/0/weight"].t, 10);
        assert_eq!(state.adam["k/head/0/weight"].t, 10);
        assert_eq!(state.adam["k/backbone/0/weight"].t, 3);
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let (setup, q, k) = toy_setup(16, 4);
        let schedule = PhaseSchedule {
            phases: vec![quick_spec(Phase::QPhase, 4), quick_spec(Phase::KPhase, 4)],
            seed: 9,
        };
        let dir_a = tmp();
        let dir_b = tmp();
        run_qk_iteration(&setup, &schedule, q.clone(), k.clone(), &dir_a).unwrap();
        run_qk_iteration(&setup, &schedule, q, k, &dir_b).unwrap();
        for name in [
            "train_log.jsonl",
            "phase_table.json",
            "state.json",
            "checkpoint_K1_q.qkcp",
            "checkpoint_K1_k.qkcp",
        ] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (setup, q, k) = toy_setup(16, 4);
        let full = PhaseSchedule {
            phases: vec![quick_spec(Phase::QPhase, 4), quick_spec(Phase::KPhase, 4)],
            seed: 9,
        };
        let prefix = PhaseSchedule {
            phases: vec![quick_spec(Phase::QPhase, 4)],
            seed: 9,
        };
        let dir_a = tmp();
        let dir_b = tmp();
        run_qk_iteration(&setup, &full, q.clone(), k.clone(), &dir_a).unwrap();
        // Stop after the first phase, then pick the run back up.
        run_qk_iteration(&setup, &prefix, q.clone(), k.clone(), &dir_b).unwrap();
        run_qk_iteration(&setup, &full, q, k, &dir_b).unwrap();
        for name in [
            "train_log.jsonl",
            "phase_table.json",
            "state.json",
            "checkpoint_K1_q.qkcp",
            "checkpoint_K1_k.qkcp",
        ] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after resuming");
        }
    }

    #[test]
    fn simclr_matches_phase_step_on_restricted_store() {
        // With the database restricted to the batch's own keys and identical
        // parameters, the alternation step and the in-batch step compute the
        // same loss. The store path rounds through 16 bits, so the engine's
        // intermediates are replaced with the full-precision backbone output.
        let (setup, q, k) = toy_setup(4, 4);
        let mut setup = setup;
        setup.loss_cfg.m_per_positive = 2;
        let dir = tmp();
        let (mut qk_state, mut engine) =
            prepare_phase(&setup, q.clone(), k.clone(), Phase::QPhase, &dir);
        engine.mids = backbone_forward_batch(&qk_state.k, &setup.keys).unwrap();
        engine.invalidate();
        let rec_qk = phase_step(&mut qk_state, &mut engine, &setup, &[0, 1, 2, 3], 1e-3).unwrap();

        let mut sc_state = TrainState::new(q, k);
        let rec_sc = simclr_step(&mut sc_state, &setup, &[0, 1, 2, 3], 1e-3).unwrap();
        assert_eq!(rec_qk.l.to_bits(), rec_sc.l.to_bits());
        assert_eq!(rec_qk.l_pos.to_bits(), rec_sc.l_pos.to_bits());
        assert_eq!(rec_qk.l_neg.to_bits(), rec_sc.l_neg.to_bits());
    }

    #[test]
    fn simclr_step_updates_both_backbones() {
        let (setup, q, k) = toy_setup(8, 4);
        let qb = backbone_hash(&q);
        let kb = backbone_hash(&k);
        let mut state = TrainState::new(q, k);
        // The final head layer starts at zero, so no gradient reaches either
        // backbone until it has moved: assert after the second step.
        simclr_step(&mut state, &setup, &[0, 1, 2, 3], 1e-3).unwrap();
        simclr_step(&mut state, &setup, &[4, 5, 6, 7], 1e-3).unwrap();
        assert_ne!(backbone_hash(&state.q), qb);
        assert_ne!(backbone_hash(&state.k), kb);
    }

    #[test]
    fn simclr_run_writes_artifacts_and_is_deterministic() {
        let (setup, q, k) = toy_setup(12, 4);
        let dir_a = tmp();
        let dir_b = tmp();
        let (_, out_a) =
            run_simclr(&setup, 5, 2, 9, q.clone(), k.clone(), &dir_a).unwrap();
        let (_, _out_b) = run_simclr(&setup, 5, 2, 9, q, k, &dir_b).unwrap();
        assert_eq!(out_a.records.len(), 5);
        assert_eq!(
            out_a.evals.iter().map(|e| e.0).collect::<Vec<_>>(),
            vec![2, 4, 5]
        );
        for name in ["train_log.jsonl", "checkpoint_final_q.qkcp", "summary.json"] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical baseline runs");
        }
    }
}
