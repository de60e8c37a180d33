//! Command implementations behind the CLI: dataset generation, training in
//! both modes, descriptor extraction, offline evaluation, and the two-mode
//! comparison.
//!
//! Dataset files store 32-bit floats for interchange; training itself
//! regenerates the full-precision data from the configured seeds and only
//! checks the files for presence and provenance.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::encoder::{
    encode_batch, init_encoder, init_featurizer, load_encoder, param_hash, EncoderParams,
    EncoderRole,
};
use crate::error::{QkiError, Result};
use crate::eval::{macro_ap, micro_ap, rank_all_pairs, Metrics};
use crate::loss::LossConfig;
use crate::seeds::{derive_seed, stream};
use crate::store::{
    read_f32_file, tag_from_parts, write_f32_file, DATASET_MAGIC, DESCRIPTOR_MAGIC,
};
use crate::synth::{build_eval_split, generate_keys};
use crate::trainer::{matrix_tag, run_qk_iteration, run_simclr, EvalSet, TrainSetup};

pub const KEYS_FILE: &str = "keys.qkds";
pub const EVAL_KEYS_FILE: &str = "eval_keys.qkds";
pub const EVAL_QUERIES_FILE: &str = "eval_queries.qkds";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// What `gen-data` wrote and the id layout of the files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataManifest {
    pub n_keys: usize,
    pub d_in: usize,
    pub n_clusters: usize,
    pub n_eval_queries: usize,
    pub n_distractors: usize,
    pub data_seed: u64,
    pub key_id_base: u64,
    pub eval_key_id_base: u64,
    pub eval_query_id_base: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| QkiError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| QkiError::Data(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| QkiError::io(path, e))?;
    w.flush().map_err(|e| QkiError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| QkiError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| QkiError::Data(format!("{}: {e}", path.display())))
}

/// Generate the training keys and the held-out split, and write all dataset
/// files. Rerunning with the same config reproduces identical bytes.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DataManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| QkiError::io(out_dir, e))?;
    let synth_cfg = cfg.synth_config();
    let keys = generate_keys(&synth_cfg)?;
    let split = build_eval_split(&synth_cfg, cfg.data.n_eval_queries, cfg.data.n_distractors)?;
    let chunk = cfg.training.chunk_size;
    write_f32_file(
        out_dir.join(KEYS_FILE),
        DATASET_MAGIC,
        &keys,
        chunk,
        matrix_tag(&keys),
        0,
    )?;
    write_f32_file(
        out_dir.join(EVAL_KEYS_FILE),
        DATASET_MAGIC,
        &split.keys,
        chunk,
        matrix_tag(&split.keys),
        split.key_id_base,
    )?;
    write_f32_file(
        out_dir.join(EVAL_QUERIES_FILE),
        DATASET_MAGIC,
        &split.queries,
        chunk,
        matrix_tag(&split.queries),
        split.query_id_base,
    )?;
    let gt_path = out_dir.join(GROUND_TRUTH_FILE);
    let file = File::create(&gt_path).map_err(|e| QkiError::io(&gt_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "query_id,key_id").map_err(|e| QkiError::io(&gt_path, e))?;
    for (q, k) in &split.ground_truth {
        writeln!(w, "{q},{k}").map_err(|e| QkiError::io(&gt_path, e))?;
    }
    w.flush().map_err(|e| QkiError::io(&gt_path, e))?;
    let manifest = DataManifest {
        n_keys: cfg.data.n_keys,
        d_in: cfg.data.d_in,
        n_clusters: cfg.data.n_clusters,
        n_eval_queries: cfg.data.n_eval_queries,
        n_distractors: cfg.data.n_distractors,
        data_seed: cfg.seeds.data,
        key_id_base: 0,
        eval_key_id_base: split.key_id_base,
        eval_query_id_base: split.query_id_base,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Check that `data_dir` holds datasets generated from this config.
pub fn verify_data_dir(cfg: &ExperimentConfig, data_dir: &Path) -> Result<()> {
    let manifest_path = data_dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(QkiError::Data(format!(
            "{}: no dataset manifest; run gen-data first",
            data_dir.display()
        )));
    }
    let m: DataManifest = read_json(&manifest_path)?;
    if m.n_keys != cfg.data.n_keys
        || m.d_in != cfg.data.d_in
        || m.n_clusters != cfg.data.n_clusters
        || m.n_eval_queries != cfg.data.n_eval_queries
        || m.n_distractors != cfg.data.n_distractors
        || m.data_seed != cfg.seeds.data
    {
        return Err(QkiError::Data(format!(
            "{}: datasets were generated from a different config (seed {} vs {}, {} keys vs {})",
            data_dir.display(),
            m.data_seed,
            cfg.seeds.data,
            m.n_keys,
            cfg.data.n_keys
        )));
    }
    let (header, _) = read_f32_file(data_dir.join(KEYS_FILE), DATASET_MAGIC)?;
    if header.n_rows != cfg.data.n_keys as u64 || header.dim != cfg.data.d_in as u32 {
        return Err(QkiError::Data(format!(
            "{}: key file is {}x{}, config expects {}x{}",
            data_dir.join(KEYS_FILE).display(),
            header.n_rows,
            header.dim,
            cfg.data.n_keys,
            cfg.data.d_in
        )));
    }
    Ok(())
}

/// Everything a run needs, built in-process from the config seeds.
pub struct BuiltExperiment {
    pub setup: TrainSetup,
    pub q_init: EncoderParams,
    pub k_init: EncoderParams,
}

/// Regenerate data, fit the featurizer, and initialize both encoders from
/// the configured seeds.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<BuiltExperiment> {
    cfg.validate()?;
    let synth_cfg = cfg.synth_config();
    let keys = generate_keys(&synth_cfg)?;
    let arch = cfg.arch();
    let featurizer = init_featurizer(
        cfg.seeds.model_init,
        cfg.proj_dim(),
        cfg.model.proj_scale,
        arch.d_base(),
        &keys,
    )?;
    // Distinct per-role init seeds derived from the one configured seed.
    let q_seed = derive_seed(cfg.seeds.model_init, stream::MODEL_INIT, 0);
    let k_seed = derive_seed(cfg.seeds.model_init, stream::MODEL_INIT, 1);
    let q_init = init_encoder(arch, EncoderRole::Query, q_seed, &keys)?;
    let k_init = init_encoder(arch, EncoderRole::Key, k_seed, &keys)?;
    let split = build_eval_split(&synth_cfg, cfg.data.n_eval_queries, cfg.data.n_distractors)?;
    let setup = TrainSetup {
        synth_cfg,
        keys,
        featurizer,
        loss_cfg: cfg.loss_config(),
        opt: cfg.optimizer_config(),
        eval: EvalSet::from_split(&split),
        chunk_size: cfg.training.chunk_size,
        db_refresh_every: cfg.training.db_refresh_every,
    };
    setup.validate()?;
    Ok(BuiltExperiment {
        setup,
        q_init,
        k_init,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Qk,
    Simclr,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "qk" => Ok(TrainMode::Qk),
            "simclr" => Ok(TrainMode::Simclr),
            other => Err(QkiError::Config(format!(
                "mode must be \"qk\" or \"simclr\", got \"{other}\""
            ))),
        }
    }
}

/// Final numbers of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: String,
    pub baseline: Metrics,
    pub final_metrics: Metrics,
    pub total_steps: u64,
    /// Per-phase rows; the baseline mode trains in one stretch and has none.
    pub phases: Vec<crate::trainer::PhaseSummary>,
}

/// Train in the requested mode. Artifacts land in `out_dir`; the
/// alternation mode resumes automatically from a previous partial run.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    mode: TrainMode,
) -> Result<TrainReport> {
    verify_data_dir(cfg, data_dir)?;
    let built = build_experiment(cfg)?;
    match mode {
        TrainMode::Qk => {
            let schedule = cfg.phase_schedule()?;
            let (state, table) =
                run_qk_iteration(&built.setup, &schedule, built.q_init, built.k_init, out_dir)?;
            let final_metrics = table
                .phases
                .last()
                .map(|p| p.metrics)
                .unwrap_or(table.baseline);
            Ok(TrainReport {
                mode: "qk".into(),
                baseline: table.baseline,
                final_metrics,
                total_steps: state.step,
                phases: table.phases,
            })
        }
        TrainMode::Simclr => {
            let total = cfg.total_schedule_steps();
            let eval_every = cfg
                .schedule
                .phases
                .first()
                .map(|p| p.eval_every)
                .unwrap_or(0);
            let (state, outcome) = run_simclr(
                &built.setup,
                total,
                eval_every,
                cfg.seeds.schedule,
                built.q_init,
                built.k_init,
                out_dir,
            )?;
            Ok(TrainReport {
                mode: "simclr".into(),
                baseline: outcome.baseline,
                final_metrics: outcome.final_metrics,
                total_steps: state.step,
                phases: Vec::new(),
            })
        }
    }
}

/// Embed a dataset file with a checkpointed encoder into a descriptor file.
pub fn cmd_embed(
    checkpoint: &Path,
    dataset: &Path,
    role: EncoderRole,
    out: &Path,
) -> Result<(u64, u32)> {
    let (enc, featurizer) = load_encoder(checkpoint)?;
    if enc.role != role {
        return Err(QkiError::Contract(format!(
            "{}: checkpoint holds a {} encoder, but the {} role was requested",
            checkpoint.display(),
            enc.role.label(),
            role.label()
        )));
    }
    let (header, data) = read_f32_file(dataset, DATASET_MAGIC)?;
    if header.n_rows == 0 {
        return Err(QkiError::Data(format!(
            "{}: dataset is empty",
            dataset.display()
        )));
    }
    if header.dim as usize != enc.arch.d_in {
        return Err(QkiError::Data(format!(
            "{}: dataset rows have dimension {}, encoder expects {}",
            dataset.display(),
            header.dim,
            enc.arch.d_in
        )));
    }
    let desc = encode_batch(&enc, &featurizer, &data)?;
    let tag = tag_from_parts(&[&param_hash(&enc), &header.source_tag]);
    write_f32_file(
        out,
        DESCRIPTOR_MAGIC,
        &desc,
        header.chunk_size,
        tag,
        header.id_base,
    )?;
    Ok((header.n_rows, desc.cols as u32))
}

fn read_ground_truth(path: &Path) -> Result<BTreeSet<(u64, u64)>> {
    let file = File::open(path).map_err(|e| QkiError::io(path, e))?;
    let mut gt = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| QkiError::io(path, e))?;
        let line = line.trim();
        if lineno == 0 || line.is_empty() {
            // Header row.
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<u64> {
            s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                QkiError::Data(format!(
                    "{}:{}: expected \"query_id,key_id\", got \"{line}\"",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let q = parse(parts.next())?;
        let k = parse(parts.next())?;
        gt.insert((q, k));
    }
    Ok(gt)
}

/// Rank two descriptor files against each other and report both metrics.
/// The ranking is invariant to the temperature, so the default is used.
pub fn cmd_evaluate(
    q_desc_path: &Path,
    k_desc_path: &Path,
    gt_path: &Path,
    out: Option<&Path>,
) -> Result<Metrics> {
    let (qh, q_desc) = read_f32_file(q_desc_path, DESCRIPTOR_MAGIC)?;
    let (kh, k_desc) = read_f32_file(k_desc_path, DESCRIPTOR_MAGIC)?;
    if qh.dim != kh.dim {
        return Err(QkiError::Data(format!(
            "descriptor dimensions disagree: {} vs {}",
            qh.dim, kh.dim
        )));
    }
    let query_ids: Vec<u64> = (0..qh.n_rows).map(|i| qh.id_base + i).collect();
    let key_ids: Vec<u64> = (0..kh.n_rows).map(|i| kh.id_base + i).collect();
    let gt = read_ground_truth(gt_path)?;
    let rpl = rank_all_pairs(
        &q_desc,
        &query_ids,
        &k_desc,
        &key_ids,
        LossConfig::default().tau,
        &gt,
    )?;
    let metrics = Metrics {
        mu_ap: micro_ap(&rpl)?,
        macro_ap: macro_ap(&rpl)?,
        n_pairs: rpl.entries.len(),
        n_positives: rpl.n_positives,
    };
    if let Some(out) = out {
        write_json(out, &metrics)?;
    }
    Ok(metrics)
}

/// Both modes trained from the same seeds, side by side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub qk: TrainReport,
    pub simclr: TrainReport,
}

/// Run the alternation and the in-batch baseline from identical seeds and
/// step budgets, and write a side-by-side report.
pub fn cmd_compare(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<CompareReport> {
    let qk = cmd_train(cfg, data_dir, &out_dir.join("qk"), TrainMode::Qk)?;
    let simclr = cmd_train(cfg, data_dir, &out_dir.join("simclr"), TrainMode::Simclr)?;
    let report = CompareReport { qk, simclr };
    fs::create_dir_all(out_dir).map_err(|e| QkiError::io(out_dir, e))?;
    write_json(&out_dir.join("compare.json"), &report)?;
    Ok(report)
}
