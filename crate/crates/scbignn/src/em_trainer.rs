//! Alternating optimization of the two models: pretrain the gene-level
//! model on labeled cells, then repeat [M-step, E-step] with pseudo-labels
//! flowing in both directions.
//!
//! In the M-step the gene model is frozen: its representations build a
//! fresh kNN graph and its predictions label the unlabeled cells for
//! training the cell model. In the E-step the cell model is frozen and its
//! predictions label the unlabeled cells for training the gene model.
//! Phase isolation is checksummed: the frozen model's parameters are hashed
//! before and after every phase.

use crate::cell_gnn::{
    build_knn_graph, cell_backward, cell_forward, CellCheckpoint, CellGraph, CellModelConfig,
    CellModelParams, Metric,
};
use crate::data_ingest::{LabelSet, ProcessedMatrix};
use crate::error::{Error, Result};
use crate::gene_gnn::{
    gene_backward, gene_forward, GeneCheckpoint, GeneModelConfig, GeneModelParams,
};
use crate::numerics::{
    param_checksum, softmax_rows, OptimizerState, Scalar, Tensor2, UpdateRule, LOG_CLAMP,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// How pseudo-label targets are drawn from the frozen model's distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelMode {
    /// Use the full distribution as a soft target: the categorical
    /// expectation of the sampled loss, computed exactly.
    Soft,
    /// Draw one label per cell per update step.
    Sample,
    /// Hard label at the distribution's argmax.
    Argmax,
}

/// Training-loop knobs. Architecture lives in [`ArchConfig`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub pretrain_epochs: usize,
    /// Epoch budget of each E-step (one optimizer step per labeled batch).
    pub epochs_per_phase: usize,
    /// Epoch budget of each M-step. Full-graph steps are cheap, and the
    /// cell model starts from scratch in iteration 1, so it gets a larger
    /// budget than the E-step.
    pub mstep_epochs: usize,
    pub lr_gene: f64,
    pub lr_cell: f64,
    pub em_iters: usize,
    pub beta: f64,
    pub pseudo_mode: PseudoLabelMode,
    pub seed: u64,
    /// Early-stopping patience (epochs without validation improvement).
    pub patience: usize,
    /// Fraction of labeled cells held out for early stopping.
    pub val_fraction: f64,
    /// Plain SGD instead of the adaptive default.
    pub plain_sgd: bool,
    pub k_neighbors: usize,
    pub metric: Metric,
    /// When set, checkpoints are written after every phase under
    /// `<dir>/<run_id>/`.
    pub checkpoint_dir: Option<PathBuf>,
    pub run_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_labeled: 256,
            batch_unlabeled: 256,
            pretrain_epochs: 30,
            epochs_per_phase: 30,
            mstep_epochs: 200,
            lr_gene: 1e-3,
            lr_cell: 1e-3,
            em_iters: 3,
            beta: 1.0,
            pseudo_mode: PseudoLabelMode::Soft,
            seed: 0,
            patience: 5,
            val_fraction: 0.10,
            plain_sgd: false,
            k_neighbors: 5,
            metric: Metric::Cosine,
            checkpoint_dir: None,
            run_id: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Validation("batch sizes must be >= 1".into()));
        }
        if self.lr_gene <= 0.0 || self.lr_cell <= 0.0 {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Validation("beta must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Validation("val_fraction must be in [0,1)".into()));
        }
        Ok(())
    }

    fn update_rule(&self) -> UpdateRule {
        if self.plain_sgd {
            UpdateRule::Plain
        } else {
            UpdateRule::Adaptive
        }
    }
}

/// Model architecture shared by presets and the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchConfig {
    pub gene_layers: usize,
    pub gene_heads: usize,
    pub learned_readout: bool,
    pub scaled_attention: bool,
    pub cell_layers: usize,
    pub embed_dim: usize,
    pub layer_width: usize,
    pub hidden_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            gene_layers: 2,
            gene_heads: 1,
            learned_readout: false,
            scaled_attention: true,
            cell_layers: 3,
            embed_dim: 32,
            layer_width: 32,
            hidden_width: 32,
        }
    }
}

impl ArchConfig {
    /// One attention layer with four heads and a learned read-out.
    pub fn one_layer_four_heads() -> Self {
        ArchConfig {
            gene_layers: 1,
            gene_heads: 4,
            learned_readout: true,
            ..Default::default()
        }
    }

    pub fn gene_config(&self, n_genes: usize, n_classes: usize) -> GeneModelConfig {
        GeneModelConfig {
            n_genes,
            n_classes,
            embed_dim: self.embed_dim,
            layer_width: self.layer_width,
            hidden_width: self.hidden_width,
            n_layers: self.gene_layers,
            n_heads: self.gene_heads,
            learned_readout: self.learned_readout,
            scaled_attention: self.scaled_attention,
        }
    }

    pub fn cell_config(&self, n_genes: usize, n_classes: usize) -> CellModelConfig {
        let h_width = if self.gene_layers == 0 {
            self.embed_dim
        } else {
            self.layer_width
        };
        CellModelConfig {
            n_genes,
            n_classes,
            h_width,
            layer_width: self.layer_width,
            hidden_width: self.hidden_width,
            n_layers: self.cell_layers,
        }
    }
}

/// One training phase's record: losses, validation curves, and the frozen
/// model's checksums proving phase isolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub em_iteration: usize,
    pub epoch_losses: Vec<f64>,
    pub epoch_val_acc: Vec<f64>,
    pub best_val_acc: f64,
    /// Validation accuracy of the gene model at the end of the phase.
    pub q_val_acc: f64,
    /// Validation accuracy of the cell model at the end of the phase.
    pub p_val_acc: Option<f64>,
    pub diverged: bool,
    pub frozen_checksum_before: Option<u64>,
    pub frozen_checksum_after: Option<u64>,
    pub wall_ms: u64,
}

/// Mutable trainer state carried across phases.
pub struct EmState<S> {
    pub iteration: usize,
    /// q_phi's distributions over the unlabeled cells (rows align with
    /// the `unlabeled` index list).
    pub q_pseudo: Option<Tensor2<S>>,
    /// p_theta's distributions over the unlabeled cells.
    pub p_pseudo: Option<Tensor2<S>>,
    pub beta: f64,
    pub history: Vec<PhaseRecord>,
}

/// Everything a finished run hands back.
pub struct EmRun<S> {
    pub gene_model: GeneModelParams<S>,
    /// None when `em_iters == 0` (pretrain-only run).
    pub cell_model: Option<CellModelParams<S>>,
    pub graph: Option<CellGraph>,
    pub state: EmState<S>,
    pub train_labeled: Vec<usize>,
    pub val_labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub diverged: bool,
}

// ── Small helpers ──────────────────────────────────────────────────────────

fn one_hot<S: Scalar>(class: usize, n_classes: usize) -> Vec<S> {
    let mut row = vec![S::zero(); n_classes];
    row[class] = S::one();
    row
}

fn sample_categorical<S: Scalar>(rng: &mut impl Rng, probs: &[S]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return c;
        }
    }
    probs.len() - 1
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stratified validation holdout from the labeled cells.
fn split_validation(labels: &LabelSet, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517cc1b727220a95);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..labels.n_classes() as u32 {
        let mut members: Vec<usize> = (0..labels.n_cells())
            .filter(|&i| labels.label_of(i) == Some(class))
            .collect();
        members.shuffle(&mut rng);
        let n_val = if members.len() >= 2 {
            ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1)
        } else {
            0
        };
        for (rank, cell) in members.into_iter().enumerate() {
            if rank < n_val {
                val.push(cell);
            } else {
                train.push(cell);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// h, logits, and softmax distributions of the gene model over `cells`.
fn gene_predict<S: Scalar>(
    params: &GeneModelParams<S>,
    data: &ProcessedMatrix,
    cells: &[usize],
) -> Result<(Tensor2<S>, Tensor2<S>, Tensor2<S>)> {
    let out = gene_forward(params, data, cells, false)?;
    let dist = softmax_rows(&out.logits)?;
    Ok((out.h, out.logits, dist))
}

fn gene_val_accuracy<S: Scalar>(
    params: &GeneModelParams<S>,
    data: &ProcessedMatrix,
    cells: &[usize],
    labels: &LabelSet,
) -> Result<f64> {
    Ok(gene_val_metrics(params, data, cells, labels)?.1)
}

/// (cross-entropy, accuracy) of the gene model on labeled cells. The
/// cross-entropy drives model selection: it stays informative where a
/// handful of validation cells make accuracy a step function.
fn gene_val_metrics<S: Scalar>(
    params: &GeneModelParams<S>,
    data: &ProcessedMatrix,
    cells: &[usize],
    labels: &LabelSet,
) -> Result<(f64, f64)> {
    if cells.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let out = gene_forward(params, data, cells, false)?;
    let mut hits = 0usize;
    let mut targets = Tensor2::zeros(cells.len(), out.logits.cols());
    for (row, &cell) in cells.iter().enumerate() {
        let truth = labels.label_of(cell).expect("labeled validation cell");
        targets.row_mut(row)[truth as usize] = S::one();
        if truth == argmax(out.logits.row(row)) as u32 {
            hits += 1;
        }
    }
    let ce = crate::numerics::cross_entropy(&out.logits, &targets)?.as_f64();
    Ok((ce, hits as f64 / cells.len() as f64))
}

/// (cross-entropy, accuracy) over `cells` where `logits` holds one row per
/// cell index.
fn full_graph_metrics<S: Scalar>(
    logits: &Tensor2<S>,
    cells: &[usize],
    labels: &LabelSet,
) -> Result<(f64, f64)> {
    if cells.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut hits = 0usize;
    let mut sub_logits = Tensor2::zeros(cells.len(), logits.cols());
    let mut targets = Tensor2::zeros(cells.len(), logits.cols());
    for (row, &cell) in cells.iter().enumerate() {
        sub_logits.row_mut(row).copy_from_slice(logits.row(cell));
        let truth = labels.label_of(cell).expect("labeled validation cell");
        targets.row_mut(row)[truth as usize] = S::one();
        if truth == argmax(logits.row(cell)) as u32 {
            hits += 1;
        }
    }
    let ce = crate::numerics::cross_entropy(&sub_logits, &targets)?.as_f64();
    Ok((ce, hits as f64 / cells.len() as f64))
}

/// Accuracy over `cells` where `logits` holds one row per cell index.
fn full_graph_accuracy<S: Scalar>(logits: &Tensor2<S>, cells: &[usize], labels: &LabelSet) -> f64 {
    if cells.is_empty() {
        return f64::NAN;
    }
    let mut hits = 0usize;
    for &cell in cells {
        if labels.label_of(cell) == Some(argmax(logits.row(cell)) as u32) {
            hits += 1;
        }
    }
    hits as f64 / cells.len() as f64
}

/// Draws one target row from a frozen model's distribution per the mode.
fn pseudo_target<S: Scalar>(mode: PseudoLabelMode, pseudo_row: &[S], rng: &mut impl Rng) -> Vec<S> {
    match mode {
        PseudoLabelMode::Soft => pseudo_row.to_vec(),
        PseudoLabelMode::Sample => one_hot(sample_categorical(rng, pseudo_row), pseudo_row.len()),
        PseudoLabelMode::Argmax => one_hot(argmax(pseudo_row), pseudo_row.len()),
    }
}

// ── Gene-model phases (pretraining and E-step share this loop) ─────────────

struct GenePhaseSpec<'a, S> {
    phase: &'a str,
    em_iteration: usize,
    epochs: usize,
    /// Pseudo-label distributions aligned with `unlabeled`; None means
    /// supervised training only.
    pseudo: Option<&'a Tensor2<S>>,
    labeled_weight: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_gene_phase<S: Scalar>(
    cfg: &TrainConfig,
    spec: GenePhaseSpec<'_, S>,
    model: &mut GeneModelParams<S>,
    data: &ProcessedMatrix,
    labels: &LabelSet,
    train_labeled: &[usize],
    val_labeled: &[usize],
    unlabeled: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<PhaseRecord> {
    let started = Instant::now();
    let n_classes = labels.n_classes();
    let mut opt = OptimizerState::new(cfg.lr_gene, cfg.update_rule());

    let mut best: Option<(f64, f64, GeneModelParams<S>)> = None;
    let mut epochs_since_best = 0usize;
    let mut epoch_losses = Vec::new();
    let mut epoch_val_acc = Vec::new();
    let mut diverged = false;

    let mut labeled_order: Vec<usize> = train_labeled.to_vec();
    let mut unlabeled_pool: Vec<usize> = unlabeled.to_vec();
    let mut row_in_unlabeled = std::collections::HashMap::new();
    for (row, &cell) in unlabeled.iter().enumerate() {
        row_in_unlabeled.insert(cell, row);
    }
    let mut pool_pos = unlabeled_pool.len(); // forces an initial shuffle

    'epochs: for _epoch in 0..spec.epochs {
        labeled_order.shuffle(rng);
        let mut batch_losses = Vec::new();

        for chunk in labeled_order.chunks(cfg.batch_labeled.max(1)) {
            let mut cells: Vec<usize> = chunk.to_vec();
            let mut targets: Vec<S> = Vec::new();
            let mut weights: Vec<S> = Vec::new();
            let lw = S::from_f64(spec.labeled_weight / chunk.len() as f64);
            for &cell in chunk {
                let class = labels.label_of(cell).expect("labeled cell") as usize;
                targets.extend(one_hot::<S>(class, n_classes));
                weights.push(lw);
            }

            if let Some(pseudo) = spec.pseudo {
                let take = cfg.batch_unlabeled.min(unlabeled_pool.len());
                let uw = S::from_f64(1.0 / take.max(1) as f64);
                for _ in 0..take {
                    if pool_pos >= unlabeled_pool.len() {
                        unlabeled_pool.shuffle(rng);
                        pool_pos = 0;
                    }
                    let cell = unlabeled_pool[pool_pos];
                    pool_pos += 1;
                    let row = row_in_unlabeled[&cell];
                    cells.push(cell);
                    targets.extend(pseudo_target(cfg.pseudo_mode, pseudo.row(row), rng));
                    weights.push(uw);
                }
            }

            let target_mat = Tensor2::from_vec(cells.len(), n_classes, targets);
            match gene_backward(model, data, &cells, &target_mat, &weights) {
                Ok((loss, grads)) => {
                    batch_losses.push(loss.as_f64());
                    opt.step(model, &grads);
                }
                Err(Error::NonFinite(_)) => {
                    log::error!("{}: non-finite loss, aborting phase", spec.phase);
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        epoch_losses.push(mean_loss);
        if !mean_loss.is_finite() {
            diverged = true;
            break;
        }

        let (val_ce, val_acc) = gene_val_metrics(model, data, val_labeled, labels)?;
        epoch_val_acc.push(val_acc);
        if val_ce.is_nan() {
            continue; // no validation set: run out the epoch budget
        }
        let improved = best.as_ref().map_or(true, |(ce, _, _)| val_ce < *ce);
        if improved {
            best = Some((val_ce, val_acc, model.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    // keep the parameters at the best validation cross-entropy
    let best_val_acc = if let Some((_, acc, params)) = best {
        *model = params;
        acc
    } else {
        f64::NAN
    };

    Ok(PhaseRecord {
        phase: spec.phase.to_string(),
        em_iteration: spec.em_iteration,
        epoch_losses,
        epoch_val_acc,
        best_val_acc,
        q_val_acc: gene_val_accuracy(model, data, val_labeled, labels)?,
        p_val_acc: None,
        diverged,
        frozen_checksum_before: None,
        frozen_checksum_after: None,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Pretrains the gene-level model on labeled cells only. Returns the
/// parameters at best validation accuracy.
pub fn pretrain_gene_model<S: Scalar>(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    data: &ProcessedMatrix,
    labels: &LabelSet,
) -> Result<(GeneModelParams<S>, PhaseRecord)> {
    cfg.validate()?;
    ensure_labeled_classes(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_labeled, val_labeled) = split_validation(labels, cfg.val_fraction, cfg.seed);
    let mut model = GeneModelParams::init(
        arch.gene_config(data.n_genes_kept, labels.n_classes()),
        &mut rng,
    )?;
    let record = run_gene_phase(
        cfg,
        GenePhaseSpec {
            phase: "pretrain",
            em_iteration: 0,
            epochs: cfg.pretrain_epochs,
            pseudo: None,
            labeled_weight: 1.0,
        },
        &mut model,
        data,
        labels,
        &train_labeled,
        &val_labeled,
        &[],
        &mut rng,
    )?;
    Ok((model, record))
}

fn ensure_labeled_classes(labels: &LabelSet) -> Result<()> {
    let mut seen = vec![false; labels.n_classes()];
    for cell in labels.labeled_cells() {
        seen[labels.label_of(cell).unwrap() as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Validation(format!(
            "class '{}' has no labeled cells",
            labels.classes[missing]
        )));
    }
    Ok(())
}

// ── E-step ─────────────────────────────────────────────────────────────────

/// Optimizes the gene model against the frozen cell model's pseudo-labels
/// plus the ground-truth labels (scaled by beta). The cell model's
/// parameters are untouched, which the checksums in the record prove.
#[allow(clippy::too_many_arguments)]
pub fn e_step<S: Scalar>(
    cfg: &TrainConfig,
    state: &mut EmState<S>,
    gene_model: &mut GeneModelParams<S>,
    cell_model: &CellModelParams<S>,
    data: &ProcessedMatrix,
    labels: &LabelSet,
    train_labeled: &[usize],
    val_labeled: &[usize],
    unlabeled: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<PhaseRecord> {
    let p_pseudo = state
        .p_pseudo
        .clone()
        .ok_or_else(|| Error::Validation("e_step requires p_pseudo from a prior m_step".into()))?;
    if unlabeled.is_empty() {
        log::warn!("e_step: no unlabeled cells; degenerating to supervised training");
    }
    let frozen_before = param_checksum(cell_model);
    let mut record = run_gene_phase(
        cfg,
        GenePhaseSpec {
            phase: "estep",
            em_iteration: state.iteration,
            epochs: cfg.epochs_per_phase,
            pseudo: if unlabeled.is_empty() {
                None
            } else {
                Some(&p_pseudo)
            },
            labeled_weight: state.beta,
        },
        gene_model,
        data,
        labels,
        train_labeled,
        val_labeled,
        unlabeled,
        rng,
    )?;
    record.frozen_checksum_before = Some(frozen_before);
    record.frozen_checksum_after = Some(param_checksum(cell_model));
    Ok(record)
}

// ── M-step ─────────────────────────────────────────────────────────────────

/// Rebuilds the cell graph from the frozen gene model's representations and
/// optimizes the cell model against q_phi's pseudo-labels plus the
/// ground-truth labels. The first call initializes theta; later calls
/// warm-start from the previous value.
#[allow(clippy::too_many_arguments)]
pub fn m_step<S: Scalar>(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    state: &mut EmState<S>,
    gene_model: &GeneModelParams<S>,
    cell_model: &mut Option<CellModelParams<S>>,
    data: &ProcessedMatrix,
    labels: &LabelSet,
    train_labeled: &[usize],
    val_labeled: &[usize],
    unlabeled: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(CellGraph, PhaseRecord)> {
    let started = Instant::now();
    let frozen_before = param_checksum(gene_model);
    let n = data.n_cells;
    let n_classes = labels.n_classes();

    // fresh h_i for all cells from the frozen q_phi, fresh graph, fresh
    // pseudo-labels
    let all_cells: Vec<usize> = (0..n).collect();
    let (h, _, q_dist) = gene_predict(gene_model, data, &all_cells)?;
    let graph = build_knn_graph(&h, cfg.k_neighbors, cfg.metric)?;
    let mut q_pseudo = Tensor2::zeros(unlabeled.len(), n_classes);
    for (row, &cell) in unlabeled.iter().enumerate() {
        q_pseudo.row_mut(row).copy_from_slice(q_dist.row(cell));
    }
    state.q_pseudo = Some(q_pseudo.clone());

    let model = match cell_model {
        Some(m) => m,
        None => cell_model.insert(CellModelParams::init(
            arch.cell_config(data.n_genes_kept, n_classes),
            rng,
        )?),
    };

    let x_dense = data.to_dense::<S>();
    let included = train_labeled.len() + unlabeled.len();
    let w_each = S::from_f64(1.0 / included.max(1) as f64);
    let mut weights = vec![S::zero(); n];
    for &cell in train_labeled.iter().chain(unlabeled.iter()) {
        weights[cell] = w_each;
    }

    // labeled targets are fixed; unlabeled rows are redrawn per epoch in
    // sample mode. Validation rows carry their true label so target rows
    // stay valid distributions, but their loss weight is zero.
    let mut targets = Tensor2::zeros(n, n_classes);
    for &cell in train_labeled.iter().chain(val_labeled.iter()) {
        let class = labels.label_of(cell).expect("labeled cell") as usize;
        targets
            .row_mut(cell)
            .copy_from_slice(&one_hot::<S>(class, n_classes));
    }
    let fill_unlabeled = |targets: &mut Tensor2<S>, rng: &mut ChaCha8Rng| {
        for (row, &cell) in unlabeled.iter().enumerate() {
            let t = pseudo_target(cfg.pseudo_mode, q_pseudo.row(row), rng);
            targets.row_mut(cell).copy_from_slice(&t);
        }
    };
    fill_unlabeled(&mut targets, rng);

    let mut opt = OptimizerState::new(cfg.lr_cell, cfg.update_rule());
    let mut best: Option<(f64, f64, CellModelParams<S>)> = None;
    let mut epochs_since_best = 0usize;
    let mut epoch_losses = Vec::new();
    let mut epoch_val_acc = Vec::new();
    let mut diverged = false;

    for epoch in 0..cfg.mstep_epochs {
        if epoch > 0 && cfg.pseudo_mode == PseudoLabelMode::Sample {
            fill_unlabeled(&mut targets, rng);
        }
        match cell_backward(model, &graph, &x_dense, &h, &targets, &weights) {
            Ok((loss, grads)) => {
                epoch_losses.push(loss.as_f64());
                if !loss.as_f64().is_finite() {
                    diverged = true;
                    break;
                }
                opt.step(model, &grads);
            }
            Err(Error::NonFinite(_)) => {
                log::error!("mstep: non-finite loss, aborting phase");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }

        let out = cell_forward(model, &graph, &x_dense, &h)?;
        let (val_ce, val_acc) = full_graph_metrics(&out.logits, val_labeled, labels)?;
        epoch_val_acc.push(val_acc);
        if val_ce.is_nan() {
            continue;
        }
        let improved = best.as_ref().map_or(true, |(ce, _, _)| val_ce < *ce);
        if improved {
            best = Some((val_ce, val_acc, model.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    let best_val_acc = if let Some((_, acc, params)) = best {
        *model = params;
        acc
    } else {
        f64::NAN
    };

    // p_theta's pseudo-labels for the coming E-step, from the restored
    // parameters on this phase's graph
    let out = cell_forward(model, &graph, &x_dense, &h)?;
    let p_dist = softmax_rows(&out.logits)?;
    let mut p_pseudo = Tensor2::zeros(unlabeled.len(), n_classes);
    for (row, &cell) in unlabeled.iter().enumerate() {
        p_pseudo.row_mut(row).copy_from_slice(p_dist.row(cell));
    }
    state.p_pseudo = Some(p_pseudo);

    let record = PhaseRecord {
        phase: "mstep".into(),
        em_iteration: state.iteration,
        epoch_losses,
        epoch_val_acc,
        best_val_acc,
        q_val_acc: gene_val_accuracy(gene_model, data, val_labeled, labels)?,
        p_val_acc: Some(full_graph_accuracy(&out.logits, val_labeled, labels)),
        diverged,
        frozen_checksum_before: Some(frozen_before),
        frozen_checksum_after: Some(param_checksum(gene_model)),
        wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok((graph, record))
}

// ── Full run ───────────────────────────────────────────────────────────────

/// Pretrain, then repeat [M-step, E-step] `em_iters` times. With
/// `em_iters == 0` the cell model is never trained and comes back `None`.
pub fn run_em<S: Scalar>(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    data: &ProcessedMatrix,
    labels: &LabelSet,
) -> Result<EmRun<S>> {
    cfg.validate()?;
    ensure_labeled_classes(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_labeled, val_labeled) = split_validation(labels, cfg.val_fraction, cfg.seed);
    let unlabeled = labels.unlabeled_cells();

    let mut state = EmState {
        iteration: 0,
        q_pseudo: None,
        p_pseudo: None,
        beta: cfg.beta,
        history: Vec::new(),
    };

    let mut gene_model = GeneModelParams::init(
        arch.gene_config(data.n_genes_kept, labels.n_classes()),
        &mut rng,
    )?;
    let pre_record = run_gene_phase(
        cfg,
        GenePhaseSpec {
            phase: "pretrain",
            em_iteration: 0,
            epochs: cfg.pretrain_epochs,
            pseudo: None,
            labeled_weight: 1.0,
        },
        &mut gene_model,
        data,
        labels,
        &train_labeled,
        &val_labeled,
        &[],
        &mut rng,
    )?;
    let mut diverged = pre_record.diverged;
    state.history.push(pre_record);
    write_gene_checkpoint(cfg, &gene_model, labels, data, "pretrain")?;

    if cfg.em_iters == 0 {
        log::warn!("em_iters=0: returning pretrained q_phi only; p_theta untrained");
        return Ok(EmRun {
            gene_model,
            cell_model: None,
            graph: None,
            state,
            train_labeled,
            val_labeled,
            unlabeled,
            diverged,
        });
    }

    let mut cell_model: Option<CellModelParams<S>> = None;
    let mut graph = None;
    for iteration in 1..=cfg.em_iters {
        state.iteration = iteration;

        let (g, m_record) = m_step(
            cfg,
            arch,
            &mut state,
            &gene_model,
            &mut cell_model,
            data,
            labels,
            &train_labeled,
            &val_labeled,
            &unlabeled,
            &mut rng,
        )?;
        assert_phase_isolation(&m_record)?;
        diverged |= m_record.diverged;
        graph = Some(g);
        state.history.push(m_record);
        if let Some(cm) = &cell_model {
            write_cell_checkpoint(cfg, cm, labels, data, &format!("iter{iteration}_mstep"))?;
        }

        let mut e_record = e_step(
            cfg,
            &mut state,
            &mut gene_model,
            cell_model.as_ref().expect("cell model trained in m_step"),
            data,
            labels,
            &train_labeled,
            &val_labeled,
            &unlabeled,
            &mut rng,
        )?;
        // report both models at the end of the phase and refresh q_phi's
        // pseudo-labels so diagnostics see the current state
        if let (Some(cm), Some(g)) = (&cell_model, &graph) {
            let all: Vec<usize> = (0..data.n_cells).collect();
            let (h, _, q_dist) = gene_predict(&gene_model, data, &all)?;
            let x_dense = data.to_dense::<S>();
            let out = cell_forward(cm, g, &x_dense, &h)?;
            e_record.p_val_acc = Some(full_graph_accuracy(&out.logits, &val_labeled, labels));
            let mut q_pseudo = Tensor2::zeros(unlabeled.len(), labels.n_classes());
            for (row, &cell) in unlabeled.iter().enumerate() {
                q_pseudo.row_mut(row).copy_from_slice(q_dist.row(cell));
            }
            state.q_pseudo = Some(q_pseudo);
        }
        assert_phase_isolation(&e_record)?;
        diverged |= e_record.diverged;
        state.history.push(e_record);
        write_gene_checkpoint(cfg, &gene_model, labels, data, &format!("iter{iteration}_estep"))?;
    }

    Ok(EmRun {
        gene_model,
        cell_model,
        graph,
        state,
        train_labeled,
        val_labeled,
        unlabeled,
        diverged,
    })
}

fn assert_phase_isolation(record: &PhaseRecord) -> Result<()> {
    if record.frozen_checksum_before != record.frozen_checksum_after {
        return Err(Error::Validation(format!(
            "phase isolation violated in {}: frozen model changed",
            record.phase
        )));
    }
    Ok(())
}

fn write_gene_checkpoint<S: Scalar>(
    cfg: &TrainConfig,
    model: &GeneModelParams<S>,
    labels: &LabelSet,
    data: &ProcessedMatrix,
    name: &str,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let run_dir = dir.join(&cfg.run_id);
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let path = run_dir.join(format!("{name}.ckpt"));
        GeneCheckpoint::new(model.clone(), labels.classes.clone(), &data.kept_gene_ids)
            .save(&path)?;
    }
    Ok(())
}

fn write_cell_checkpoint<S: Scalar>(
    cfg: &TrainConfig,
    model: &CellModelParams<S>,
    labels: &LabelSet,
    data: &ProcessedMatrix,
    name: &str,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let run_dir = dir.join(&cfg.run_id);
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let path = run_dir.join(format!("{name}.ckpt"));
        CellCheckpoint::new(model.clone(), labels.classes.clone(), &data.kept_gene_ids)
            .save(&path)?;
    }
    Ok(())
}

// ── ELBO diagnostic ────────────────────────────────────────────────────────

/// Monte-Carlo estimate of the evidence lower bound
/// `E_q[log p_theta(Y^L, Y^U | X) - log q_phi(Y^U | X)]`, using
/// independence across cells. Diagnostic only.
#[allow(clippy::too_many_arguments)]
pub fn estimate_elbo<S: Scalar>(
    gene_model: &GeneModelParams<S>,
    cell_model: &CellModelParams<S>,
    data: &ProcessedMatrix,
    labels: &LabelSet,
    k: usize,
    metric: Metric,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be >= 1".into()));
    }
    let all: Vec<usize> = (0..data.n_cells).collect();
    let (h, _, q_dist) = gene_predict(gene_model, data, &all)?;
    let graph = build_knn_graph(&h, k, metric)?;
    let x_dense = data.to_dense::<S>();
    let out = cell_forward(cell_model, &graph, &x_dense, &h)?;
    let p_dist = softmax_rows(&out.logits)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln = |v: f64| v.max(LOG_CLAMP).ln();
    let mut elbo = 0.0;
    for cell in 0..data.n_cells {
        match labels.label_of(cell) {
            Some(class) => {
                elbo += ln(p_dist.get(cell, class as usize).as_f64());
            }
            None => {
                let q_row = q_dist.row(cell);
                let mut acc = 0.0;
                for _ in 0..n_samples {
                    let y = sample_categorical(&mut rng, q_row);
                    acc += ln(p_dist.get(cell, y).as_f64()) - ln(q_row[y].as_f64());
                }
                elbo += acc / n_samples as f64;
            }
        }
    }
    Ok(elbo)
}

// ── Run manifest ───────────────────────────────────────────────────────────

/// JSON run manifest: config echo, per-phase curves, final accuracies.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub arch: ArchConfig,
    pub phases: Vec<PhaseRecord>,
    pub p_theta_trained: bool,
    pub diverged: bool,
    pub final_q_val_acc: Option<f64>,
    pub final_p_val_acc: Option<f64>,
    /// Accuracy over the unlabeled cells when ground truth is known
    /// (benchmark runs where the unlabeled set is a held-out fold).
    pub q_unlabeled_acc: Option<f64>,
    pub p_unlabeled_acc: Option<f64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Accuracy of both models over the unlabeled cells against a ground-truth
/// label set (benchmarks treat a held-out fold as the unlabeled set).
pub fn evaluate_on_unlabeled<S: Scalar>(
    run: &EmRun<S>,
    data: &ProcessedMatrix,
    truth: &LabelSet,
) -> Result<(f64, Option<f64>)> {
    let cells = &run.unlabeled;
    if cells.is_empty() {
        return Ok((f64::NAN, None));
    }
    let q_acc = gene_val_accuracy(&run.gene_model, data, cells, truth)?;
    let p_acc = match (&run.cell_model, &run.graph) {
        (Some(cm), Some(g)) => {
            let all: Vec<usize> = (0..data.n_cells).collect();
            let (h, _, _) = gene_predict(&run.gene_model, data, &all)?;
            let x_dense = data.to_dense::<S>();
            let out = cell_forward(cm, g, &x_dense, &h)?;
            Some(full_graph_accuracy(&out.logits, cells, truth))
        }
        _ => None,
    };
    Ok((q_acc, p_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::{normalize, select_top_variance};
    use crate::numerics::cross_entropy;
    use crate::numerics::Parameterized;
    use crate::synthetic::{generate, mask_labels, SyntheticConfig};

    fn small_dataset(n_cells: usize, seed: u64) -> (ProcessedMatrix, LabelSet) {
        let cfg = SyntheticConfig {
            n_cells,
            n_genes: 30,
            ..Default::default()
        };
        let (matrix, labels) = generate(&cfg, seed).unwrap();
        let norm = normalize(&matrix, 1e4).unwrap();
        let data = select_top_variance(&matrix, &norm, 30, 1e4).unwrap();
        let (masked, _) = mask_labels(&labels, 0.3, seed);
        (data, masked)
    }

    fn fast_config(seed: u64) -> (TrainConfig, ArchConfig) {
        let cfg = TrainConfig {
            pretrain_epochs: 8,
            epochs_per_phase: 6,
            em_iters: 1,
            batch_labeled: 64,
            batch_unlabeled: 64,
            seed,
            ..Default::default()
        };
        let arch = ArchConfig {
            embed_dim: 16,
            layer_width: 16,
            hidden_width: 16,
            cell_layers: 2,
            ..Default::default()
        };
        (cfg, arch)
    }

    #[test]
    fn pretrain_zero_epochs_returns_initialized_params() {
        let (data, labels) = small_dataset(60, 1);
        let (cfg, arch) = fast_config(3);
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            ..cfg
        };
        let (model, record) = pretrain_gene_model::<f32>(&cfg, &arch, &data, &labels).unwrap();
        assert!(record.epoch_losses.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = GeneModelParams::<f32>::init(
            arch.gene_config(data.n_genes_kept, labels.n_classes()),
            &mut rng,
        )
        .unwrap();
        assert_eq!(param_checksum(&model), param_checksum(&fresh));
    }

    #[test]
    fn pretrain_deterministic_under_seed() {
        let (data, labels) = small_dataset(60, 2);
        let (cfg, arch) = fast_config(5);
        let (m1, r1) = pretrain_gene_model::<f32>(&cfg, &arch, &data, &labels).unwrap();
        let (m2, r2) = pretrain_gene_model::<f32>(&cfg, &arch, &data, &labels).unwrap();
        assert_eq!(param_checksum(&m1), param_checksum(&m2));
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
    }

    #[test]
    fn pretrain_separable_data_high_accuracy() {
        // two well-separated classes; enough optimizer steps to converge
        let gen = SyntheticConfig {
            n_cells: 80,
            n_genes: 30,
            n_classes: 2,
            marker_rate: 4.0,
            ..Default::default()
        };
        let (matrix, truth) = generate(&gen, 3).unwrap();
        let norm = normalize(&matrix, 1e4).unwrap();
        let data = select_top_variance(&matrix, &norm, 30, 1e4).unwrap();
        let (labels, _) = mask_labels(&truth, 0.4, 3);

        let (mut cfg, arch) = fast_config(7);
        cfg.pretrain_epochs = 120;
        cfg.batch_labeled = 16;
        let (model, _) = pretrain_gene_model::<f32>(&cfg, &arch, &data, &labels).unwrap();
        let train = labels.labeled_cells();
        let acc = gene_val_accuracy(&model, &data, &train, &labels).unwrap();
        assert!(acc > 0.99, "training accuracy {acc}");
    }

    #[test]
    fn pretrain_missing_class_rejected() {
        let (data, labels) = small_dataset(60, 4);
        let class0: Vec<usize> = (0..labels.n_cells())
            .filter(|&i| labels.label_of(i) == Some(0))
            .collect();
        let masked = labels.mask_unlabeled(&class0);
        let (cfg, arch) = fast_config(9);
        assert!(pretrain_gene_model::<f32>(&cfg, &arch, &data, &masked).is_err());
    }

    #[test]
    fn em_iters_zero_returns_untrained_cell_model() {
        let (data, labels) = small_dataset(60, 5);
        let (mut cfg, arch) = fast_config(11);
        cfg.em_iters = 0;
        let run = run_em::<f32>(&cfg, &arch, &data, &labels).unwrap();
        assert!(run.cell_model.is_none());
        assert!(run.graph.is_none());
        assert_eq!(run.state.history.len(), 1);
    }

    #[test]
    fn phase_isolation_checksums_hold() {
        let (data, labels) = small_dataset(60, 6);
        let (cfg, arch) = fast_config(13);
        let run = run_em::<f32>(&cfg, &arch, &data, &labels).unwrap();
        for record in &run.state.history {
            assert_eq!(
                record.frozen_checksum_before, record.frozen_checksum_after,
                "phase {}",
                record.phase
            );
        }
        assert!(run.state.history[1].frozen_checksum_before.is_some());
        assert!(run.state.history[2].frozen_checksum_before.is_some());
    }

    #[test]
    fn run_em_deterministic_loss_histories() {
        let (data, labels) = small_dataset(60, 7);
        let (cfg, arch) = fast_config(17);
        let run1 = run_em::<f32>(&cfg, &arch, &data, &labels).unwrap();
        let run2 = run_em::<f32>(&cfg, &arch, &data, &labels).unwrap();
        for (a, b) in run1.state.history.iter().zip(&run2.state.history) {
            assert_eq!(a.epoch_losses, b.epoch_losses, "phase {}", a.phase);
            assert_eq!(a.epoch_val_acc, b.epoch_val_acc);
        }
        assert_eq!(
            param_checksum(&run1.gene_model),
            param_checksum(&run2.gene_model)
        );
    }

    #[test]
    fn pseudo_rows_are_distributions() {
        let (data, labels) = small_dataset(60, 8);
        let (cfg, arch) = fast_config(19);
        let run = run_em::<f32>(&cfg, &arch, &data, &labels).unwrap();
        for pseudo in [run.state.q_pseudo.as_ref(), run.state.p_pseudo.as_ref()] {
            let p = pseudo.expect("pseudo labels recorded");
            for r in 0..p.rows() {
                let sum: f64 = p.row(r).iter().map(|v| v.as_f64()).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn beta_zero_removes_labeled_influence() {
        // gradient equality: a batch with zero-weighted labeled terms equals
        // the gradient of the unlabeled term alone
        let (data, labels) = small_dataset(40, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = fast_config(0).1;
        let model = GeneModelParams::<f64>::init(
            arch.gene_config(data.n_genes_kept, labels.n_classes()),
            &mut rng,
        )
        .unwrap();
        let labeled = labels.labeled_cells();
        let unlabeled = labels.unlabeled_cells();
        let c = labels.n_classes();

        let mut cells: Vec<usize> = labeled[..2].to_vec();
        cells.extend_from_slice(&unlabeled[..2]);
        let mut targets = Tensor2::zeros(4, c);
        for (b, &cell) in cells.iter().enumerate() {
            let class = labels.label_of(cell).unwrap_or(0) as usize;
            targets.row_mut(b)[class] = 1.0;
        }
        let weights = vec![0.0, 0.0, 0.5, 0.5];
        let (_, g_combined) = gene_backward(&model, &data, &cells, &targets, &weights).unwrap();

        let u_cells = &cells[2..];
        let mut u_targets = Tensor2::zeros(2, c);
        for (b, &cell) in u_cells.iter().enumerate() {
            let class = labels.label_of(cell).unwrap_or(0) as usize;
            u_targets.row_mut(b)[class] = 1.0;
        }
        let (_, g_unlabeled) =
            gene_backward(&model, &data, u_cells, &u_targets, &[0.5, 0.5]).unwrap();

        for (a, b) in g_combined.blocks().iter().zip(g_unlabeled.blocks().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_mode_loss_equals_cross_entropy_against_full_distribution() {
        let (data, labels) = small_dataset(40, 10);
        let (mut cfg, arch) = fast_config(21);
        cfg.pseudo_mode = PseudoLabelMode::Soft;
        let run = run_em::<f64>(&cfg, &arch, &data, &labels).unwrap();
        let unlabeled = labels.unlabeled_cells();
        let p_pseudo = run.state.p_pseudo.as_ref().unwrap();

        // the categorical expectation of the sampled loss is exactly the
        // cross-entropy against p_theta's full distribution
        let out = gene_forward(&run.gene_model, &data, &unlabeled, false).unwrap();
        let direct = cross_entropy(&out.logits, p_pseudo).unwrap();
        let weights = vec![1.0 / unlabeled.len() as f64; unlabeled.len()];
        let (via_backward, _) =
            gene_backward(&run.gene_model, &data, &unlabeled, p_pseudo, &weights).unwrap();
        assert!((direct - via_backward).abs() < 1e-10);
    }

    #[test]
    fn elbo_bounded_by_enumerated_log_likelihood() {
        let (data, labels) = small_dataset(30, 11);
        let (cfg, arch) = fast_config(23);
        let run = run_em::<f64>(&cfg, &arch, &data, &labels).unwrap();
        let cell_model = run.cell_model.as_ref().unwrap();

        let elbo = estimate_elbo(
            &run.gene_model,
            cell_model,
            &data,
            &labels,
            cfg.k_neighbors,
            cfg.metric,
            64,
            99,
        )
        .unwrap();

        // independence across cells: the exact log-likelihood enumerates to
        // the sum of per-cell log p over labeled cells (each unlabeled
        // cell's classes marginalize to one)
        let all: Vec<usize> = (0..data.n_cells).collect();
        let (h, _, _) = gene_predict(&run.gene_model, &data, &all).unwrap();
        let graph = build_knn_graph(&h, cfg.k_neighbors, cfg.metric).unwrap();
        let x_dense = data.to_dense::<f64>();
        let out = cell_forward(cell_model, &graph, &x_dense, &h).unwrap();
        let p = softmax_rows(&out.logits).unwrap();
        let mut exact = 0.0;
        for cell in 0..data.n_cells {
            if let Some(class) = labels.label_of(cell) {
                exact += p.get(cell, class as usize).max(LOG_CLAMP).ln();
            }
        }
        assert!(
            elbo <= exact + 1e-9,
            "elbo {elbo} exceeds exact log-likelihood {exact}"
        );
    }

    #[test]
    fn elbo_no_unlabeled_equals_sum_log_p() {
        let (data, labels) = small_dataset(30, 12);
        let (cfg, arch) = fast_config(25);
        let run = run_em::<f64>(&cfg, &arch, &data, &labels).unwrap();
        let cell_model = run.cell_model.as_ref().unwrap();

        // treat every cell as labeled
        let full = {
            let classes = labels.classes.clone();
            let assignments: Vec<Option<u32>> = (0..labels.n_cells())
                .map(|i| labels.label_of(i).or(Some(0)))
                .collect();
            LabelSet::new(classes, assignments).unwrap()
        };
        let elbo = estimate_elbo(
            &run.gene_model,
            cell_model,
            &data,
            &full,
            cfg.k_neighbors,
            cfg.metric,
            1,
            1,
        )
        .unwrap();

        let all: Vec<usize> = (0..data.n_cells).collect();
        let (h, _, _) = gene_predict(&run.gene_model, &data, &all).unwrap();
        let graph = build_knn_graph(&h, cfg.k_neighbors, cfg.metric).unwrap();
        let x_dense = data.to_dense::<f64>();
        let out = cell_forward(cell_model, &graph, &x_dense, &h).unwrap();
        let p = softmax_rows(&out.logits).unwrap();
        let mut want = 0.0;
        for cell in 0..data.n_cells {
            want += p
                .get(cell, full.label_of(cell).unwrap() as usize)
                .max(LOG_CLAMP)
                .ln();
        }
        assert!((elbo - want).abs() < 1e-9);
    }

    #[test]
    fn graph_rebuilt_each_m_step_changes_with_phi() {
        let (data, labels) = small_dataset(40, 13);
        let (cfg, arch) = fast_config(27);

        let (gene_a, _) = pretrain_gene_model::<f32>(&cfg, &arch, &data, &labels).unwrap();
        let mut gene_b = gene_a.clone();
        for block in gene_b.blocks_mut() {
            for v in block.iter_mut() {
                *v += 0.35;
            }
        }
        let all: Vec<usize> = (0..data.n_cells).collect();
        let (ha, _, _) = gene_predict(&gene_a, &data, &all).unwrap();
        let (hb, _, _) = gene_predict(&gene_b, &data, &all).unwrap();
        let ga = build_knn_graph(&ha, cfg.k_neighbors, cfg.metric).unwrap();
        let gb = build_knn_graph(&hb, cfg.k_neighbors, cfg.metric).unwrap();
        assert_ne!(ga.edges(), gb.edges());
    }
}










#[cfg(test)]
mod scratch2 {
    use super::*;
    use crate::data_ingest::{normalize, select_top_variance};
    use crate::synthetic::{generate, mask_labels, SyntheticConfig};
    use super::scratch::{bench_cfg, bench_gen};

    #[test]
    #[ignore]
    fn probe_canonical_seed() {
        let (matrix, truth) = generate(&bench_gen(), 2).unwrap();
        let norm = normalize(&matrix, 1e6).unwrap();
        let data = select_top_variance(&matrix, &norm, 100, 1e6).unwrap();
        let (labels, _) = mask_labels(&truth, 0.10, 2);
        for k in [5usize, 10, 15, 20] {
            let run = run_em::<f32>(&bench_cfg(2, k), &ArchConfig::default(), &data, &labels).unwrap();
            let (q_acc, p_acc) = evaluate_on_unlabeled(&run, &data, &truth).unwrap();
            eprintln!("SWEEP k={k}: q={q_acc:.4} p={:.4}", p_acc.unwrap());
        }
    }
}
