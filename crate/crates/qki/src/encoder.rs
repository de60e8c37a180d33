//! The query/key encoder pair: a frozen baseline featurizer shared by both
//! sides, a small dense backbone per side, and a head that concatenates the
//! baseline with the intermediate descriptor and adds a scaled residual back
//! onto the baseline.
//!
//! With the final head layer zero-initialized, the descriptor starts exactly
//! at the baseline descriptor, so training begins from baseline retrieval
//! quality and can only move away from it by learning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{QkiError, Result};
use crate::numeric::{
    dense_backward, dense_forward, dense_forward_batch, Activation, DenseLayer, Matrix,
};
use crate::pca::{pca_fit, pca_transform, PcaModel};
use crate::seeds::{item_rng, stream};

/// The head residual is scaled by this before being added to the baseline.
pub const RESIDUAL_SCALE: f64 = 0.01;
/// Variance floor used by feature standardization.
pub const STANDARDIZE_EPS: f64 = 1e-8;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QKCP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderRole {
    Query,
    Key,
}

impl EncoderRole {
    pub fn byte(self) -> u8 {
        match self {
            EncoderRole::Query => 0,
            EncoderRole::Key => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(EncoderRole::Query),
            1 => Ok(EncoderRole::Key),
            other => Err(QkiError::Data(format!("unknown encoder role byte {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EncoderRole::Query => "query",
            EncoderRole::Key => "key",
        }
    }
}

/// Which side of the alternation is currently training its backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    QPhase,
    KPhase,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::QPhase => "Q",
            Phase::KPhase => "K",
        }
    }
}

/// Per-feature standardization statistics, fixed at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub d_in: usize,
    pub backbone_hidden: usize,
    pub d_mid: usize,
    pub head_hidden: usize,
    pub d_out: usize,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("backbone_hidden", self.backbone_hidden),
            ("d_mid", self.d_mid),
            ("head_hidden", self.head_hidden),
            ("d_out", self.d_out),
        ] {
            if v == 0 {
                return Err(QkiError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Baseline descriptor dimension; always matches the output dimension.
    pub fn d_base(&self) -> usize {
        self.d_out
    }

    pub fn head_in(&self) -> usize {
        self.d_mid + self.d_base()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub role: EncoderRole,
    pub arch: EncoderArch,
    pub backbone_layers: Vec<DenseLayer>,
    pub head_layers: Vec<DenseLayer>,
    pub norm_stats: NormStats,
    pub trainable_backbone: bool,
    pub trainable_head: bool,
}

/// Fixed seeded projection + tanh + principal components; the stand-in for a
/// classical global descriptor. Shared by both roles, never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFeaturizer {
    pub seed: u64,
    pub proj_scale: f64,
    pub projection: Matrix,
    pub pca: PcaModel,
}

impl BaselineFeaturizer {
    pub fn d_in(&self) -> usize {
        self.projection.cols
    }

    pub fn d_base(&self) -> usize {
        self.pca.out_dim()
    }
}

fn seeded_layer(
    seed: u64,
    layer_index: u64,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
) -> DenseLayer {
    let mut rng = item_rng(seed, stream::MODEL_INIT, layer_index);
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut weight = Matrix::zeros(out_dim, in_dim);
    for w in weight.data.iter_mut() {
        *w = rng.gen_range(-bound..bound);
    }
    DenseLayer {
        weight,
        bias: vec![0.0; out_dim],
        activation,
    }
}

/// Fit the fixed featurizer on the training keys: seeded projection rows,
/// tanh squashing, then principal components down to `d_base`.
pub fn init_featurizer(
    seed: u64,
    proj_dim: usize,
    proj_scale: f64,
    d_base: usize,
    fit_data: &Matrix,
) -> Result<BaselineFeaturizer> {
    let d_in = fit_data.cols;
    if proj_dim == 0 || d_base == 0 || d_base > proj_dim {
        return Err(QkiError::Config(format!(
            "featurizer needs 0 < d_base ({d_base}) <= proj_dim ({proj_dim})"
        )));
    }
    if !(proj_scale > 0.0) {
        return Err(QkiError::Config(format!(
            "proj_scale must be positive, got {proj_scale}"
        )));
    }
    let mut rng = item_rng(seed, stream::FEATURIZER, 0);
    let bound = proj_scale / (d_in as f64).sqrt();
    let mut projection = Matrix::zeros(proj_dim, d_in);
    for w in projection.data.iter_mut() {
        *w = rng.gen_range(-bound..bound);
    }
    let mut squashed = Matrix::zeros(fit_data.rows, proj_dim);
    for i in 0..fit_data.rows {
        let x = fit_data.row(i);
        let out = squashed.row_mut(i);
        for (r, o) in out.iter_mut().enumerate() {
            let row = projection.row(r);
            let mut acc = 0.0;
            for j in 0..d_in {
                acc += row[j] * x[j];
            }
            *o = acc.tanh();
        }
    }
    let pca = pca_fit(&squashed, d_base)?;
    Ok(BaselineFeaturizer {
        seed,
        proj_scale,
        projection,
        pca,
    })
}

/// Project one raw input to its baseline descriptor.
pub fn baseline_featurize(f: &BaselineFeaturizer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f.d_in() {
        return Err(QkiError::Shape(format!(
            "featurizer expects dimension {}, got {}",
            f.d_in(),
            x.len()
        )));
    }
    let d_in = f.d_in();
    let mut squashed = vec![0.0; f.projection.rows];
    for (r, s) in squashed.iter_mut().enumerate() {
        let row = f.projection.row(r);
        let mut acc = 0.0;
        for j in 0..d_in {
            acc += row[j] * x[j];
        }
        *s = acc.tanh();
    }
    pca_transform(&f.pca, &squashed)
}

/// Row-wise featurization; bitwise identical to per-row single calls.
pub fn baseline_featurize_batch(f: &BaselineFeaturizer, xs: &Matrix) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (0..xs.rows)
        .into_par_iter()
        .map(|i| baseline_featurize(f, xs.row(i)))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(xs.rows, f.d_base());
    for (i, row) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(row);
    }
    Ok(out)
}

/// Initialize one encoder. Backbone and head weights come from the seeded
/// init streams; the final head layer is zeroed so the initial descriptor
/// equals the baseline. Standardization stats are measured over `dataset`
/// once and frozen.
pub fn init_encoder(
    arch: EncoderArch,
    role: EncoderRole,
    init_seed: u64,
    dataset: &Matrix,
) -> Result<EncoderParams> {
    arch.validate()?;
    if dataset.cols != arch.d_in || dataset.rows == 0 {
        return Err(QkiError::Shape(format!(
            "init dataset is {}x{}, expected non-empty with {} columns",
            dataset.rows, dataset.cols, arch.d_in
        )));
    }
    let n = dataset.rows as f64;
    let mut mean = vec![0.0; arch.d_in];
    for i in 0..dataset.rows {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += dataset.row(i)[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; arch.d_in];
    for i in 0..dataset.rows {
        for (j, v) in var.iter_mut().enumerate() {
            let c = dataset.row(i)[j] - mean[j];
            *v += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    let backbone_layers = vec![
        seeded_layer(init_seed, 0, arch.d_in, arch.backbone_hidden, Activation::Relu),
        seeded_layer(init_seed, 1, arch.backbone_hidden, arch.d_mid, Activation::Relu),
    ];
    let head_layers = vec![
        seeded_layer(init_seed, 2, arch.head_in(), arch.head_hidden, Activation::Relu),
        // Zero final layer: the residual starts at exactly zero.
        DenseLayer {
            weight: Matrix::zeros(arch.d_out, arch.head_hidden),
            bias: vec![0.0; arch.d_out],
            activation: Activation::Identity,
        },
    ];
    Ok(EncoderParams {
        role,
        arch,
        backbone_layers,
        head_layers,
        norm_stats: NormStats { mean, var },
        trainable_backbone: true,
        trainable_head: true,
    })
}

fn standardize(enc: &EncoderParams, x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, &v)| (v - enc.norm_stats.mean[j]) / (enc.norm_stats.var[j] + STANDARDIZE_EPS).sqrt())
        .collect()
}

/// Standardize then apply the backbone layers in order.
pub fn backbone_forward(enc: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != enc.arch.d_in {
        return Err(QkiError::Shape(format!(
            "backbone expects dimension {}, got {}",
            enc.arch.d_in,
            x.len()
        )));
    }
    let mut h = standardize(enc, x);
    for layer in &enc.backbone_layers {
        h = dense_forward(layer, &h)?;
    }
    Ok(h)
}

/// Batch backbone pass; bitwise identical to per-row `backbone_forward`.
pub fn backbone_forward_batch(enc: &EncoderParams, xs: &Matrix) -> Result<Matrix> {
    if xs.cols != enc.arch.d_in {
        return Err(QkiError::Shape(format!(
            "backbone expects dimension {}, got {}",
            enc.arch.d_in, xs.cols
        )));
    }
    let mut h = Matrix::zeros(xs.rows, xs.cols);
    for i in 0..xs.rows {
        let std = standardize(enc, xs.row(i));
        h.row_mut(i).copy_from_slice(&std);
    }
    for layer in &enc.backbone_layers {
        h = dense_forward_batch(layer, &h)?;
    }
    Ok(h)
}

fn concat_input(enc: &EncoderParams, intermediate: &[f64], base: &[f64]) -> Result<Vec<f64>> {
    if intermediate.len() != enc.arch.d_mid || base.len() != enc.arch.d_base() {
        return Err(QkiError::Shape(format!(
            "head expects intermediate {} + base {}, got {} + {}",
            enc.arch.d_mid,
            enc.arch.d_base(),
            intermediate.len(),
            base.len()
        )));
    }
    let mut joined = Vec::with_capacity(enc.arch.head_in());
    joined.extend_from_slice(intermediate);
    joined.extend_from_slice(base);
    Ok(joined)
}

/// head(concat(intermediate, base)) scaled by the residual factor and added
/// onto the baseline descriptor.
pub fn head_forward(enc: &EncoderParams, intermediate: &[f64], base: &[f64]) -> Result<Vec<f64>> {
    let mut h = concat_input(enc, intermediate, base)?;
    for layer in &enc.head_layers {
        h = dense_forward(layer, &h)?;
    }
    Ok(h
        .iter()
        .zip(base)
        .map(|(r, b)| RESIDUAL_SCALE * r + b)
        .collect())
}

/// Batch head pass over row-aligned intermediates and baselines.
pub fn head_forward_batch(enc: &EncoderParams, mids: &Matrix, bases: &Matrix) -> Result<Matrix> {
    if mids.rows != bases.rows {
        return Err(QkiError::Shape(format!(
            "head batch row mismatch: {} intermediates vs {} baselines",
            mids.rows, bases.rows
        )));
    }
    if mids.cols != enc.arch.d_mid || bases.cols != enc.arch.d_base() {
        return Err(QkiError::Shape(format!(
            "head batch expects {}+{} columns, got {}+{}",
            enc.arch.d_mid,
            enc.arch.d_base(),
            mids.cols,
            bases.cols
        )));
    }
    let n = mids.rows;
    let head_in = enc.arch.head_in();
    let mut h = Matrix::zeros(n, head_in);
    for i in 0..n {
        let row = h.row_mut(i);
        row[..mids.cols].copy_from_slice(mids.row(i));
        row[mids.cols..].copy_from_slice(bases.row(i));
    }
    for layer in &enc.head_layers {
        h = dense_forward_batch(layer, &h)?;
    }
    for i in 0..n {
        let base = bases.row(i);
        let row = h.row_mut(i);
        for (r, &b) in row.iter_mut().zip(base) {
            *r = RESIDUAL_SCALE * *r + b;
        }
    }
    Ok(h)
}

/// Full forward for many rows: featurize, run the backbone, apply the head.
/// Bitwise identical to per-row `encoder_forward`.
pub fn encode_batch(
    enc: &EncoderParams,
    f: &BaselineFeaturizer,
    xs: &Matrix,
) -> Result<Matrix> {
    if f.d_base() != enc.arch.d_base() {
        return Err(QkiError::Contract(format!(
            "featurizer emits {} dims, encoder expects baseline {}",
            f.d_base(),
            enc.arch.d_base()
        )));
    }
    let bases = baseline_featurize_batch(f, xs)?;
    let mids = backbone_forward_batch(enc, xs)?;
    head_forward_batch(enc, &mids, &bases)
}

/// Gradient of one dense layer stack; weight/bias pairs ordered like the
/// layer list they correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Inputs captured during a head forward, for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// Input to each head layer, in order.
    inputs: Vec<Vec<f64>>,
}

pub fn head_forward_cached(
    enc: &EncoderParams,
    intermediate: &[f64],
    base: &[f64],
) -> Result<(Vec<f64>, HeadCache)> {
    let mut h = concat_input(enc, intermediate, base)?;
    let mut inputs = Vec::with_capacity(enc.head_layers.len());
    for layer in &enc.head_layers {
        inputs.push(h.clone());
        h = dense_forward(layer, &h)?;
    }
    let desc = h
        .iter()
        .zip(base)
        .map(|(r, b)| RESIDUAL_SCALE * r + b)
        .collect();
    Ok((desc, HeadCache { inputs }))
}

/// Backward through the head only (frozen-side path). Returns per-layer
/// parameter gradients and the gradient with respect to the concatenated
/// input.
pub fn head_backward(
    enc: &EncoderParams,
    cache: &HeadCache,
    grad_descriptor: &[f64],
) -> Result<(Vec<LayerGrad>, Vec<f64>)> {
    if cache.inputs.len() != enc.head_layers.len() {
        return Err(QkiError::Contract(format!(
            "head cache holds {} layer inputs, encoder has {} layers",
            cache.inputs.len(),
            enc.head_layers.len()
        )));
    }
    if grad_descriptor.len() != enc.arch.d_out {
        return Err(QkiError::Shape(format!(
            "descriptor gradient has dimension {}, expected {}",
            grad_descriptor.len(),
            enc.arch.d_out
        )));
    }
    let mut grad: Vec<f64> = grad_descriptor.iter().map(|g| RESIDUAL_SCALE * g).collect();
    let mut grads = vec![
        LayerGrad {
            weight: Matrix::zeros(0, 0),
            bias: Vec::new(),
        };
        enc.head_layers.len()
    ];
    for (idx, layer) in enc.head_layers.iter().enumerate().rev() {
        let input = &cache.inputs[idx];
        if input.len() != layer.in_dim() {
            return Err(QkiError::Contract(format!(
                "head cache input {} has dimension {}, layer expects {}",
                idx,
                input.len(),
                layer.in_dim()
            )));
        }
        let dg = dense_backward(layer, input, &grad)?;
        grads[idx] = LayerGrad {
            weight: dg.weight,
            bias: dg.bias,
        };
        grad = dg.input;
    }
    Ok((grads, grad))
}

/// Everything captured during a full encoder forward.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to each backbone layer (first entry is the standardized input).
    backbone_inputs: Vec<Vec<f64>>,
    head: HeadCache,
}

/// Full forward: baseline featurization, backbone, residual head.
pub fn encoder_forward(
    enc: &EncoderParams,
    f: &BaselineFeaturizer,
    x: &[f64],
) -> Result<(Vec<f64>, EncoderCache)> {
    if f.d_base() != enc.arch.d_base() {
        return Err(QkiError::Contract(format!(
            "featurizer emits {} dims, encoder expects baseline {}",
            f.d_base(),
            enc.arch.d_base()
        )));
    }
    let base = baseline_featurize(f, x)?;
    if x.len() != enc.arch.d_in {
        return Err(QkiError::Shape(format!(
            "encoder expects dimension {}, got {}",
            enc.arch.d_in,
            x.len()
        )));
    }
    let mut h = standardize(enc, x);
    let mut backbone_inputs = Vec::with_capacity(enc.backbone_layers.len());
    for layer in &enc.backbone_layers {
        backbone_inputs.push(h.clone());
        h = dense_forward(layer, &h)?;
    }
    let (desc, head) = head_forward_cached(enc, &h, &base)?;
    Ok((
        desc,
        EncoderCache {
            backbone_inputs,
            head,
        },
    ))
}

/// Parameter gradients restricted to the trainable groups; frozen groups are
/// absent entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub backbone: Option<Vec<LayerGrad>>,
    pub head: Option<Vec<LayerGrad>>,
}

/// Backward through head and (if trainable) backbone. The baseline path is
/// constant by construction and receives no gradient.
pub fn encoder_backward(
    enc: &EncoderParams,
    cache: &EncoderCache,
    grad_descriptor: &[f64],
) -> Result<EncoderGrads> {
    let (head_grads, grad_concat) = head_backward(enc, &cache.head, grad_descriptor)?;
    let head = enc.trainable_head.then_some(head_grads);
    if !enc.trainable_backbone {
        return Ok(EncoderGrads {
            backbone: None,
            head,
        });
    }
    if cache.backbone_inputs.len() != enc.backbone_layers.len() {
        return Err(QkiError::Contract(format!(
            "backbone cache holds {} layer inputs, encoder has {} layers",
            cache.backbone_inputs.len(),
            enc.backbone_layers.len()
        )));
    }
    // Only the intermediate slice of the concat input reaches the backbone.
    let mut grad: Vec<f64> = grad_concat[..enc.arch.d_mid].to_vec();
    let mut backbone = vec![
        LayerGrad {
            weight: Matrix::zeros(0, 0),
            bias: Vec::new(),
        };
        enc.backbone_layers.len()
    ];
    for (idx, layer) in enc.backbone_layers.iter().enumerate().rev() {
        let dg = dense_backward(layer, &cache.backbone_inputs[idx], &grad)?;
        backbone[idx] = LayerGrad {
            weight: dg.weight,
            bias: dg.bias,
        };
        grad = dg.input;
    }
    Ok(EncoderGrads {
        backbone: Some(backbone),
        head,
    })
}

/// Apply the alternation's freeze pattern to both encoders. Idempotent.
pub fn set_phase_trainability(q: &mut EncoderParams, k: &mut EncoderParams, phase: Phase) {
    match phase {
        Phase::QPhase => {
            q.trainable_backbone = true;
            q.trainable_head = true;
            k.trainable_backbone = false;
            k.trainable_head = true;
        }
        Phase::KPhase => {
            q.trainable_backbone = false;
            q.trainable_head = true;
            k.trainable_backbone = true;
            k.trainable_head = true;
        }
    }
}

/// SHA-256 over role, shapes, parameters, and standardization stats.
/// Any parameter change gives a different hash.
pub fn param_hash(enc: &EncoderParams) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([enc.role.byte()]);
    for group in [&enc.backbone_layers, &enc.head_layers] {
        h.update((group.len() as u64).to_le_bytes());
        for layer in group.iter() {
            h.update((layer.out_dim() as u64).to_le_bytes());
            h.update((layer.in_dim() as u64).to_le_bytes());
            h.update([activation_byte(layer.activation)]);
            for w in &layer.weight.data {
                h.update(w.to_le_bytes());
            }
            for b in &layer.bias {
                h.update(b.to_le_bytes());
            }
        }
    }
    for v in enc.norm_stats.mean.iter().chain(&enc.norm_stats.var) {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// SHA-256 over role, backbone shapes and parameters, and standardization
/// stats only. Head parameters do not contribute: intermediate descriptors
/// depend on the backbone alone, and the frozen side's head keeps training
/// while its store stays valid.
pub fn backbone_hash(enc: &EncoderParams) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([enc.role.byte()]);
    h.update((enc.backbone_layers.len() as u64).to_le_bytes());
    for layer in &enc.backbone_layers {
        h.update((layer.out_dim() as u64).to_le_bytes());
        h.update((layer.in_dim() as u64).to_le_bytes());
        h.update([activation_byte(layer.activation)]);
        for w in &layer.weight.data {
            h.update(w.to_le_bytes());
        }
        for b in &layer.bias {
            h.update(b.to_le_bytes());
        }
    }
    for v in enc.norm_stats.mean.iter().chain(&enc.norm_stats.var) {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn activation_byte(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Tanh => 2,
    }
}

fn activation_from_byte(b: u8) -> Result<Activation> {
    match b {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Tanh),
        other => Err(QkiError::Data(format!("unknown activation byte {other}"))),
    }
}

fn write_vec(w: &mut impl Write, v: &[f64], path: &Path) -> Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())
        .map_err(|e| QkiError::io(path, e))?;
    for x in v {
        w.write_all(&x.to_le_bytes()).map_err(|e| QkiError::io(path, e))?;
    }
    Ok(())
}

fn read_vec(r: &mut impl Read, path: &Path) -> Result<Vec<f64>> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| QkiError::io(path, e))?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut out = vec![0.0; n];
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| QkiError::io(path, e))?;
    for (i, c) in buf.chunks_exact(8).enumerate() {
        out[i] = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok(out)
}

fn write_matrix(w: &mut impl Write, m: &Matrix, path: &Path) -> Result<()> {
    w.write_all(&(m.rows as u64).to_le_bytes())
        .map_err(|e| QkiError::io(path, e))?;
    w.write_all(&(m.cols as u64).to_le_bytes())
        .map_err(|e| QkiError::io(path, e))?;
    for x in &m.data {
        w.write_all(&x.to_le_bytes()).map_err(|e| QkiError::io(path, e))?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, path: &Path) -> Result<Matrix> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| QkiError::io(path, e))?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8).map_err(|e| QkiError::io(path, e))?;
    let cols = u64::from_le_bytes(b8) as usize;
    let mut m = Matrix::zeros(rows, cols);
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf).map_err(|e| QkiError::io(path, e))?;
    for (i, c) in buf.chunks_exact(8).enumerate() {
        m.data[i] = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok(m)
}

fn write_layers(w: &mut impl Write, layers: &[DenseLayer], path: &Path) -> Result<()> {
    w.write_all(&(layers.len() as u32).to_le_bytes())
        .map_err(|e| QkiError::io(path, e))?;
    for layer in layers {
        w.write_all(&[activation_byte(layer.activation)])
            .map_err(|e| QkiError::io(path, e))?;
        write_matrix(w, &layer.weight, path)?;
        write_vec(w, &layer.bias, path)?;
    }
    Ok(())
}

fn read_layers(r: &mut impl Read, path: &Path) -> Result<Vec<DenseLayer>> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| QkiError::io(path, e))?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1).map_err(|e| QkiError::io(path, e))?;
        let activation = activation_from_byte(b1[0])?;
        let weight = read_matrix(r, path)?;
        let bias = read_vec(r, path)?;
        layers.push(DenseLayer::new(weight, bias, activation)?);
    }
    Ok(layers)
}

/// Write one encoder (with the shared featurizer) as a checkpoint file.
/// The byte stream is a pure function of the contents, so identical models
/// produce identical files.
pub fn save_encoder(
    path: impl Into<PathBuf>,
    enc: &EncoderParams,
    f: &BaselineFeaturizer,
) -> Result<()> {
    let path = path.into();
    let file = File::create(&path).map_err(|e| QkiError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| QkiError::io(&path, e))?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(|e| QkiError::io(&path, e))?;
    w.write_all(&[
        enc.role.byte(),
        enc.trainable_backbone as u8,
        enc.trainable_head as u8,
        0,
    ])
    .map_err(|e| QkiError::io(&path, e))?;
    for dim in [
        enc.arch.d_in,
        enc.arch.backbone_hidden,
        enc.arch.d_mid,
        enc.arch.head_hidden,
        enc.arch.d_out,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())
            .map_err(|e| QkiError::io(&path, e))?;
    }
    write_layers(&mut w, &enc.backbone_layers, &path)?;
    write_layers(&mut w, &enc.head_layers, &path)?;
    write_vec(&mut w, &enc.norm_stats.mean, &path)?;
    write_vec(&mut w, &enc.norm_stats.var, &path)?;
    w.write_all(&f.seed.to_le_bytes()).map_err(|e| QkiError::io(&path, e))?;
    w.write_all(&f.proj_scale.to_le_bytes())
        .map_err(|e| QkiError::io(&path, e))?;
    write_matrix(&mut w, &f.projection, &path)?;
    write_vec(&mut w, &f.pca.mean, &path)?;
    write_matrix(&mut w, &f.pca.components, &path)?;
    w.flush().map_err(|e| QkiError::io(&path, e))?;
    Ok(())
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<(EncoderParams, BaselineFeaturizer)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| QkiError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| QkiError::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(QkiError::Data(format!(
            "{}: bad magic {magic:?}, expected QKCP",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| QkiError::io(path, e))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(QkiError::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut flags = [0u8; 4];
    r.read_exact(&mut flags).map_err(|e| QkiError::io(path, e))?;
    let role = EncoderRole::from_byte(flags[0])?;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        r.read_exact(&mut b4).map_err(|e| QkiError::io(path, e))?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let arch = EncoderArch {
        d_in: dims[0],
        backbone_hidden: dims[1],
        d_mid: dims[2],
        head_hidden: dims[3],
        d_out: dims[4],
    };
    let backbone_layers = read_layers(&mut r, path)?;
    let head_layers = read_layers(&mut r, path)?;
    let mean = read_vec(&mut r, path)?;
    let var = read_vec(&mut r, path)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| QkiError::io(path, e))?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(|e| QkiError::io(path, e))?;
    let proj_scale = f64::from_le_bytes(b8);
    let projection = read_matrix(&mut r, path)?;
    let pca_mean = read_vec(&mut r, path)?;
    let components = read_matrix(&mut r, path)?;
    let enc = EncoderParams {
        role,
        arch,
        backbone_layers,
        head_layers,
        norm_stats: NormStats { mean, var },
        trainable_backbone: flags[1] != 0,
        trainable_head: flags[2] != 0,
    };
    let featurizer = BaselineFeaturizer {
        seed,
        proj_scale,
        projection,
        pca: PcaModel {
            mean: pca_mean,
            components,
        },
    };
    if featurizer.d_base() != enc.arch.d_base() {
        return Err(QkiError::Data(format!(
            "{}: featurizer dimension {} does not match encoder baseline {}",
            path.display(),
            featurizer.d_base(),
            enc.arch.d_base()
        )));
    }
    Ok((enc, featurizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_keys, SynthConfig};
    use rand::Rng;

    fn test_data(seed: u64, n: usize, d: usize) -> Matrix {
        generate_keys(&SynthConfig {
            n_keys: n,
            d_in: d,
            n_clusters: 4,
            noise_scale: 0.1,
            mask_fraction: 0.1,
            scale_range: [0.9, 1.1],
            shift_scale: 2.0,
            seed,
        })
        .unwrap()
    }

    fn small_arch(d_in: usize) -> EncoderArch {
        EncoderArch {
            d_in,
            backbone_hidden: 7,
            d_mid: 5,
            head_hidden: 6,
            d_out: 4,
        }
    }

    fn setup(seed: u64) -> (EncoderParams, BaselineFeaturizer, Matrix) {
        let data = test_data(seed, 60, 6);
        let arch = small_arch(6);
        let f = init_featurizer(seed, 8, 1.0, arch.d_base(), &data).unwrap();
        let enc = init_encoder(arch, EncoderRole::Query, seed, &data).unwrap();
        (enc, f, data)
    }

    /// Give every layer (including the zeroed final one) random weights so
    /// gradient tests exercise all paths.
    fn randomize(enc: &mut EncoderParams, seed: u64) {
        let mut rng = crate::seeds::item_rng(seed, 99, 0);
        for layer in enc
            .backbone_layers
            .iter_mut()
            .chain(enc.head_layers.iter_mut())
        {
            for w in layer.weight.data.iter_mut() {
                *w = rng.gen_range(-0.7..0.7);
            }
            for b in layer.bias.iter_mut() {
                *b = rng.gen_range(-0.2..0.2);
            }
        }
    }

    #[test]
    fn featurizer_is_deterministic_and_seed_sensitive() {
        let data = test_data(5, 80, 6);
        let f1 = init_featurizer(11, 8, 1.0, 4, &data).unwrap();
        let f2 = init_featurizer(11, 8, 1.0, 4, &data).unwrap();
        let f3 = init_featurizer(12, 8, 1.0, 4, &data).unwrap();
        let x = data.row(3);
        assert_eq!(
            baseline_featurize(&f1, x).unwrap(),
            baseline_featurize(&f2, x).unwrap()
        );
        assert_ne!(
            baseline_featurize(&f1, x).unwrap(),
            baseline_featurize(&f3, x).unwrap()
        );
    }

    #[test]
    fn featurize_zero_input_is_projection_of_negative_mean() {
        let data = test_data(5, 80, 6);
        let f = init_featurizer(11, 8, 1.0, 4, &data).unwrap();
        let got = baseline_featurize(&f, &[0.0; 6]).unwrap();
        // tanh(proj * 0) = 0, so the output is components * (0 - pca mean).
        for (k, g) in got.iter().enumerate() {
            let expect: f64 = f
                .pca
                .components
                .row(k)
                .iter()
                .zip(&f.pca.mean)
                .map(|(c, m)| c * (0.0 - m))
                .sum();
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn featurize_rejects_wrong_dimension() {
        let (_, f, _) = setup(1);
        assert!(matches!(
            baseline_featurize(&f, &[0.0; 3]),
            Err(QkiError::Shape(_))
        ));
    }

    #[test]
    fn backbone_identity_config_passes_standardized_input() {
        let data = test_data(2, 50, 4);
        let arch = EncoderArch {
            d_in: 4,
            backbone_hidden: 4,
            d_mid: 4,
            head_hidden: 3,
            d_out: 2,
        };
        let mut enc = init_encoder(arch, EncoderRole::Key, 9, &data).unwrap();
        // Identity-configured backbone: identity weights, identity activation.
        for layer in enc.backbone_layers.iter_mut() {
            layer.activation = Activation::Identity;
            for r in 0..4 {
                for c in 0..4 {
                    layer.weight.data[r * 4 + c] = if r == c { 1.0 } else { 0.0 };
                }
            }
            layer.bias = vec![0.0; 4];
        }
        let x = data.row(7);
        let got = backbone_forward(&enc, x).unwrap();
        let expect = standardize(&enc, x);
        assert_eq!(got, expect);
    }

    #[test]
    fn backbone_output_length_and_shape_errors() {
        let (enc, _, data) = setup(3);
        for i in 0..5 {
            assert_eq!(backbone_forward(&enc, data.row(i)).unwrap().len(), 5);
        }
        assert!(matches!(
            backbone_forward(&enc, &[1.0]),
            Err(QkiError::Shape(_))
        ));
    }

    #[test]
    fn residual_floor_descriptor_equals_baseline_exactly() {
        let (enc, f, data) = setup(7);
        for i in 0..20 {
            let (desc, _) = encoder_forward(&enc, &f, data.row(i)).unwrap();
            let base = baseline_featurize(&f, data.row(i)).unwrap();
            assert_eq!(desc, base, "row {i}");
        }
    }

    #[test]
    fn head_residual_scales_linearly() {
        let (mut enc, f, data) = setup(13);
        randomize(&mut enc, 1);
        let x = data.row(0);
        let base = baseline_featurize(&f, x).unwrap();
        let mid = backbone_forward(&enc, x).unwrap();
        let desc = head_forward(&enc, &mid, &base).unwrap();
        // Perturb the final layer bias by delta: descriptor moves by 0.01*delta.
        let delta = 0.37;
        let mut enc2 = enc.clone();
        enc2.head_layers.last_mut().unwrap().bias[2] += delta;
        let desc2 = head_forward(&enc2, &mid, &base).unwrap();
        for (j, (a, b)) in desc.iter().zip(&desc2).enumerate() {
            let expect = if j == 2 { RESIDUAL_SCALE * delta } else { 0.0 };
            assert!((b - a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn full_forward_matches_straight_line_reimplementation() {
        let (mut enc, f, data) = setup(17);
        randomize(&mut enc, 2);
        for i in 0..5 {
            let x = data.row(i);
            let (got, _) = encoder_forward(&enc, &f, x).unwrap();

            // Independent straight-line recomputation with raw loops.
            let d_in = enc.arch.d_in;
            let mut squashed = vec![0.0; f.projection.rows];
            for r in 0..f.projection.rows {
                let mut acc = 0.0;
                for j in 0..d_in {
                    acc += f.projection.data[r * d_in + j] * x[j];
                }
                squashed[r] = acc.tanh();
            }
            let mut base = vec![0.0; f.pca.out_dim()];
            for k in 0..f.pca.out_dim() {
                let mut acc = 0.0;
                for j in 0..f.pca.in_dim() {
                    acc += f.pca.components.data[k * f.pca.in_dim() + j]
                        * (squashed[j] - f.pca.mean[j]);
                }
                base[k] = acc;
            }
            let mut h: Vec<f64> = (0..d_in)
                .map(|j| {
                    (x[j] - enc.norm_stats.mean[j])
                        / (enc.norm_stats.var[j] + STANDARDIZE_EPS).sqrt()
                })
                .collect();
            for layer in &enc.backbone_layers {
                let mut next = vec![0.0; layer.out_dim()];
                for (r, n) in next.iter_mut().enumerate() {
                    let mut acc = layer.bias[r];
                    for j in 0..layer.in_dim() {
                        acc += layer.weight.data[r * layer.in_dim() + j] * h[j];
                    }
                    *n = acc.max(0.0);
                }
                h = next;
            }
            let mut joined = h.clone();
            joined.extend_from_slice(&base);
            let l0 = &enc.head_layers[0];
            let mut hid = vec![0.0; l0.out_dim()];
            for (r, v) in hid.iter_mut().enumerate() {
                let mut acc = l0.bias[r];
                for j in 0..l0.in_dim() {
                    acc += l0.weight.data[r * l0.in_dim() + j] * joined[j];
                }
                *v = acc.max(0.0);
            }
            let l1 = &enc.head_layers[1];
            let mut expect = vec![0.0; l1.out_dim()];
            for (r, e) in expect.iter_mut().enumerate() {
                let mut acc = l1.bias[r];
                for j in 0..l1.in_dim() {
                    acc += l1.weight.data[r * l1.in_dim() + j] * hid[j];
                }
                *e = RESIDUAL_SCALE * acc + base[r];
            }
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_paths_match_single_paths_bitwise() {
        let (mut enc, f, data) = setup(19);
        randomize(&mut enc, 3);
        let xs = {
            let mut m = Matrix::zeros(9, enc.arch.d_in);
            for i in 0..9 {
                m.row_mut(i).copy_from_slice(data.row(i * 3));
            }
            m
        };
        let bases = baseline_featurize_batch(&f, &xs).unwrap();
        let mids = backbone_forward_batch(&enc, &xs).unwrap();
        let descs = head_forward_batch(&enc, &mids, &bases).unwrap();
        for i in 0..9 {
            let b = baseline_featurize(&f, xs.row(i)).unwrap();
            let m = backbone_forward(&enc, xs.row(i)).unwrap();
            let d = head_forward(&enc, &m, &b).unwrap();
            assert_eq!(bases.row(i), &b[..]);
            assert_eq!(mids.row(i), &m[..]);
            assert_eq!(descs.row(i), &d[..]);
            let (full, _) = encoder_forward(&enc, &f, xs.row(i)).unwrap();
            assert_eq!(full, d);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut enc, f, data) = setup(23);
        randomize(&mut enc, 4);
        enc.trainable_backbone = true;
        enc.trainable_head = true;
        let x = data.row(4);
        // Probe functional: dot(descriptor, g) for a fixed random g.
        let mut rng = crate::seeds::item_rng(77, 98, 0);
        let g: Vec<f64> = (0..enc.arch.d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = encoder_forward(&enc, &f, x).unwrap();
        let grads = encoder_backward(&enc, &cache, &g).unwrap();
        let backbone = grads.backbone.unwrap();
        let head = grads.head.unwrap();

        let eval = |e: &EncoderParams| -> f64 {
            let (d, _) = encoder_forward(e, &f, x).unwrap();
            d.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut checked = 0;
        for (group_idx, group_grads) in [(0, &backbone), (1, &head)] {
            let n_layers = group_grads.len();
            for li in 0..n_layers {
                let lg = &group_grads[li];
                let n_w = lg.weight.data.len();
                // Sample a few weights and biases per layer.
                for t in 0..6 {
                    let wi = (t * 31) % n_w;
                    let mut plus = enc.clone();
                    let mut minus = enc.clone();
                    let (lp, lm) = if group_idx == 0 {
                        (&mut plus.backbone_layers[li], &mut minus.backbone_layers[li])
                    } else {
                        (&mut plus.head_layers[li], &mut minus.head_layers[li])
                    };
                    lp.weight.data[wi] += h;
                    lm.weight.data[wi] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = lg.weight.data[wi];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "group {group_idx} layer {li} weight {wi}: fd {fd} vs {an}"
                    );
                    checked += 1;
                }
                for bi in 0..lg.bias.len().min(3) {
                    let mut plus = enc.clone();
                    let mut minus = enc.clone();
                    let (lp, lm) = if group_idx == 0 {
                        (&mut plus.backbone_layers[li], &mut minus.backbone_layers[li])
                    } else {
                        (&mut plus.head_layers[li], &mut minus.head_layers[li])
                    };
                    lp.bias[bi] += h;
                    lm.bias[bi] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let an = lg.bias[bi];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "group {group_idx} layer {li} bias {bi}: fd {fd} vs {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 30);
    }

    #[test]
    fn frozen_backbone_gets_no_gradient_entries() {
        let (mut enc, f, data) = setup(29);
        randomize(&mut enc, 5);
        enc.trainable_backbone = false;
        enc.trainable_head = true;
        let (_, cache) = encoder_forward(&enc, &f, data.row(0)).unwrap();
        let grads = encoder_backward(&enc, &cache, &vec![1.0; enc.arch.d_out]).unwrap();
        assert!(grads.backbone.is_none());
        assert!(grads.head.is_some());

        enc.trainable_head = false;
        let grads = encoder_backward(&enc, &cache, &vec![1.0; enc.arch.d_out]).unwrap();
        assert!(grads.backbone.is_none());
        assert!(grads.head.is_none());
    }

    #[test]
    fn zero_descriptor_gradient_gives_zero_parameter_gradients() {
        let (mut enc, f, data) = setup(31);
        randomize(&mut enc, 6);
        let (_, cache) = encoder_forward(&enc, &f, data.row(1)).unwrap();
        let grads = encoder_backward(&enc, &cache, &vec![0.0; enc.arch.d_out]).unwrap();
        for lg in grads.backbone.unwrap().iter().chain(grads.head.unwrap().iter()) {
            assert!(lg.weight.data.iter().all(|&v| v == 0.0));
            assert!(lg.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn phase_trainability_matches_the_alternation() {
        let (mut q, _, data) = setup(37);
        let mut k = init_encoder(small_arch(6), EncoderRole::Key, 37, &data).unwrap();
        set_phase_trainability(&mut q, &mut k, Phase::QPhase);
        assert!(q.trainable_backbone && q.trainable_head);
        assert!(!k.trainable_backbone && k.trainable_head);
        set_phase_trainability(&mut q, &mut k, Phase::QPhase);
        assert!(q.trainable_backbone && !k.trainable_backbone); // idempotent
        set_phase_trainability(&mut q, &mut k, Phase::KPhase);
        assert!(!q.trainable_backbone && q.trainable_head);
        assert!(k.trainable_backbone && k.trainable_head);
    }

    #[test]
    fn param_hash_tracks_any_parameter_change() {
        let (enc, _, _) = setup(41);
        let h1 = param_hash(&enc);
        assert_eq!(h1, param_hash(&enc));
        let mut changed = enc.clone();
        changed.backbone_layers[0].weight.data[0] += 1e-9;
        assert_ne!(h1, param_hash(&changed));
        let mut changed = enc.clone();
        changed.head_layers[1].bias[0] = 1e-300;
        assert_ne!(h1, param_hash(&changed));
        let mut relabeled = enc.clone();
        relabeled.role = EncoderRole::Key;
        assert_ne!(h1, param_hash(&relabeled));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (mut enc, f, _) = setup(43);
        randomize(&mut enc, 7);
        enc.trainable_backbone = false;
        let p1 = dir.path().join("a.qkcp");
        let p2 = dir.path().join("b.qkcp");
        save_encoder(&p1, &enc, &f).unwrap();
        save_encoder(&p2, &enc, &f).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let (enc2, f2) = load_encoder(&p1).unwrap();
        assert_eq!(enc, enc2);
        assert_eq!(f, f2);
        assert_eq!(param_hash(&enc), param_hash(&enc2));
    }

    #[test]
    fn checkpoint_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.qkcp");
        std::fs::write(&p, b"NOPE the rest does not matter").unwrap();
        assert!(matches!(load_encoder(&p), Err(QkiError::Data(_))));
    }

    #[test]
    fn q_and_k_never_share_storage() {
        let data = test_data(47, 40, 6);
        let arch = small_arch(6);
        let mut q = init_encoder(arch, EncoderRole::Query, 5, &data).unwrap();
        let k = init_encoder(arch, EncoderRole::Key, 5, &data).unwrap();
        // Same seed gives identical initial values...
        assert_eq!(q.backbone_layers, k.backbone_layers);
        // ...but mutating one side never touches the other.
        q.backbone_layers[0].weight.data[0] += 1.0;
        assert_ne!(q.backbone_layers, k.backbone_layers);
    }
}
