//! Post-hoc network analyses and evaluation: gene-importance scores from
//! aggregated attention, graph homophily, accuracy, and the cross-validation
//! harness.

use crate::cell_gnn::CellGraph;
use crate::data_ingest::{normalize, select_top_variance, ExpressionMatrix, LabelSet};
use crate::em_trainer::{evaluate_on_unlabeled, run_em, ArchConfig, PhaseRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::gene_gnn::CellAttention;
use crate::numerics::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

// ── Attention aggregation ──────────────────────────────────────────────────

/// Accumulates per-cell attention matrices into a T x T mean. Every
/// (layer, head) matrix of a cell contributes one observation for each
/// ordered pair of that cell's expressed genes; pairs never observed stay 0.
pub struct AttentionAccumulator {
    t: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl AttentionAccumulator {
    pub fn new(n_genes: usize) -> Self {
        AttentionAccumulator {
            t: n_genes,
            sum: vec![0.0; n_genes * n_genes],
            count: vec![0; n_genes * n_genes],
        }
    }

    pub fn add<S: Scalar>(&mut self, capture: &CellAttention<S>) {
        for m in &capture.matrices {
            for (r, &gi) in capture.gene_idx.iter().enumerate() {
                let row = m.row(r);
                for (c, &gj) in capture.gene_idx.iter().enumerate() {
                    let slot = gi as usize * self.t + gj as usize;
                    self.sum[slot] += row[c].as_f64();
                    self.count[slot] += 1;
                }
            }
        }
    }

    pub fn observations(&self) -> usize {
        self.count.iter().map(|&c| c as usize).sum()
    }

    /// The aggregated matrix: mean over observations per pair, 0 where a
    /// pair was never observed.
    pub fn finish(self) -> Vec<f64> {
        self.sum
            .into_iter()
            .zip(self.count)
            .map(|(s, c)| if c > 0 { s / f64::from(c) } else { 0.0 })
            .collect()
    }
}

/// Mean attention matrix over a capture set (row-major T x T).
pub fn aggregate_attention<S: Scalar>(
    captures: &[CellAttention<S>],
    n_genes: usize,
) -> Result<Vec<f64>> {
    if captures.is_empty() {
        return Err(Error::Validation("no attention matrices captured".into()));
    }
    let mut acc = AttentionAccumulator::new(n_genes);
    for c in captures {
        acc.add(c);
    }
    Ok(acc.finish())
}

// ── Gene importance ────────────────────────────────────────────────────────

/// Column sums of the aggregated attention matrix, ranked descending
/// (ties by ascending gene index).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneImportanceReport {
    /// Importance score per gene: `s_j = Σ_i A~_ij`.
    pub scores: Vec<f64>,
    /// Gene indices ranked by descending score.
    pub ranking: Vec<usize>,
    /// The first `top_n` of `ranking` (50 by default, clipped to T).
    pub top: Vec<usize>,
}

pub const TOP_GENES: usize = 50;

pub fn gene_importance(aggregated: &[f64], n_genes: usize) -> Result<GeneImportanceReport> {
    if aggregated.len() != n_genes * n_genes {
        return Err(Error::Shape(format!(
            "aggregated attention has {} entries, expected {}",
            aggregated.len(),
            n_genes * n_genes
        )));
    }
    let mut scores = vec![0.0; n_genes];
    for i in 0..n_genes {
        for (j, s) in scores.iter_mut().enumerate() {
            *s += aggregated[i * n_genes + j];
        }
    }
    let mut ranking: Vec<usize> = (0..n_genes).collect();
    ranking.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let top = ranking[..TOP_GENES.min(n_genes)].to_vec();
    Ok(GeneImportanceReport {
        scores,
        ranking,
        top,
    })
}

/// Writes `rank,gene_id,score` rows for the top genes.
pub fn write_importance_csv(
    report: &GeneImportanceReport,
    gene_ids: &[String],
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "rank,gene_id,score").map_err(|e| Error::io(path, e))?;
    for (rank, &g) in report.top.iter().enumerate() {
        writeln!(w, "{},{},{}", rank + 1, gene_ids[g], report.scores[g])
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ── Homophily ──────────────────────────────────────────────────────────────

/// Intra-class edge fraction of an undirected graph.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HomophilyReport {
    pub intra_class_edges: usize,
    pub total_edges: usize,
    pub ratio: f64,
}

/// Proportion of undirected edges whose endpoints share a class. Every node
/// must be labeled.
pub fn homophily(graph: &CellGraph, labels: &LabelSet) -> Result<HomophilyReport> {
    let edges = graph.edges();
    if edges.is_empty() {
        return Err(Error::Validation("graph has no edges".into()));
    }
    let mut intra = 0usize;
    for &(a, b) in &edges {
        let la = labels
            .label_of(a as usize)
            .ok_or_else(|| Error::Validation(format!("node {a} unlabeled")))?;
        let lb = labels
            .label_of(b as usize)
            .ok_or_else(|| Error::Validation(format!("node {b} unlabeled")))?;
        if la == lb {
            intra += 1;
        }
    }
    Ok(HomophilyReport {
        intra_class_edges: intra,
        total_edges: edges.len(),
        ratio: intra as f64 / edges.len() as f64,
    })
}

// ── Accuracy ───────────────────────────────────────────────────────────────

/// Fraction of exact matches between aligned prediction/truth vectors.
pub fn accuracy(predictions: &[u32], ground_truth: &[u32]) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != truth length {}",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("empty prediction vector".into()));
    }
    let hits = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

// ── Cross-validation ───────────────────────────────────────────────────────

/// One fold's results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub q_accuracy: f64,
    pub p_accuracy: f64,
    /// kept-gene ids of this fold's preprocessing (selection is re-run
    /// inside the training fold to avoid leakage)
    pub kept_genes: usize,
    /// top-important-gene ids for overlap analysis across folds
    pub top_genes: Vec<String>,
    pub phases: Vec<PhaseRecord>,
}

/// Cross-validation summary over all folds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k_folds: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub mean_q_accuracy: f64,
    pub mean_p_accuracy: f64,
    pub std_q_accuracy: f64,
    pub std_p_accuracy: f64,
}

impl CrossvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("report serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the full pipeline per fold: gene selection on the training cells
/// only, EM training with the fold held out as unlabeled, accuracy of both
/// models on the held-out fold, and the fold's top-important genes.
///
/// Fold runs are independent and execute in parallel.
pub fn crossval<S: Scalar>(
    cfg: &TrainConfig,
    arch: &ArchConfig,
    raw: &ExpressionMatrix,
    labels: &LabelSet,
    k_folds: usize,
    top_t: usize,
    scaling: f64,
) -> Result<CrossvalReport> {
    if k_folds < 2 {
        return Err(Error::Validation("k_folds must be >= 2".into()));
    }
    let folds = crate::data_ingest::split_folds(labels, k_folds, cfg.seed)?;
    let normalized = normalize(raw, scaling)?;

    let results: Vec<Result<FoldResult>> = (0..k_folds)
        .into_par_iter()
        .map(|fold| {
            let test_cells: Vec<usize> = (0..raw.n_cells)
                .filter(|&i| folds[i] == fold as u32)
                .collect();

            // leakage-free gene selection: variance ranked on training cells
            let train_matrix = subset_matrix(raw, &folds, fold as u32)?;
            let train_normalized = normalize(&train_matrix, scaling)?;
            let train_proc = select_top_variance(&train_matrix, &train_normalized, top_t, scaling)?;

            // apply the training fold's gene set to the full matrix
            let keep: Vec<u32> = train_proc
                .kept_gene_ids
                .iter()
                .map(|id| {
                    raw.gene_ids
                        .iter()
                        .position(|g| g == id)
                        .expect("kept gene exists in raw matrix") as u32
                })
                .collect();
            let data = restrict_to_genes(raw, &normalized, &keep, scaling)?;

            let fold_labels = labels.mask_unlabeled(&test_cells);
            let fold_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(fold as u64),
                run_id: format!("{}_fold{fold}", cfg.run_id),
                ..cfg.clone()
            };
            let run = run_em::<S>(&fold_cfg, arch, &data, &fold_labels)?;
            let (q_acc, p_acc) = evaluate_on_unlabeled(&run, &data, labels)?;

            // gene importance from the trained fold model over the test cells
            let captures =
                crate::gene_gnn::gene_forward(&run.gene_model, &data, &test_cells, true)?
                    .attention
                    .expect("attention requested");
            let aggregated = aggregate_attention(&captures, data.n_genes_kept)?;
            let importance = gene_importance(&aggregated, data.n_genes_kept)?;
            let top_genes = importance
                .top
                .iter()
                .map(|&g| data.kept_gene_ids[g].clone())
                .collect();

            Ok(FoldResult {
                fold,
                q_accuracy: q_acc,
                p_accuracy: p_acc.unwrap_or(f64::NAN),
                kept_genes: data.n_genes_kept,
                top_genes,
                phases: run.state.history.clone(),
            })
        })
        .collect();

    let mut fold_results = Vec::with_capacity(k_folds);
    for r in results {
        fold_results.push(r?);
    }
    let (mean_q, std_q) = mean_std(&fold_results.iter().map(|f| f.q_accuracy).collect::<Vec<_>>());
    let (mean_p, std_p) = mean_std(&fold_results.iter().map(|f| f.p_accuracy).collect::<Vec<_>>());
    Ok(CrossvalReport {
        k_folds,
        seed: cfg.seed,
        folds: fold_results,
        mean_q_accuracy: mean_q,
        mean_p_accuracy: mean_p,
        std_q_accuracy: std_q,
        std_p_accuracy: std_p,
    })
}

/// Copy of `raw` restricted to the cells outside `fold`.
fn subset_matrix(
    raw: &ExpressionMatrix,
    folds: &[u32],
    fold: u32,
) -> Result<ExpressionMatrix> {
    let mut remap = vec![u32::MAX; raw.n_cells];
    let mut cell_ids = Vec::new();
    for i in 0..raw.n_cells {
        if folds[i] != fold {
            remap[i] = cell_ids.len() as u32;
            cell_ids.push(raw.cell_ids[i].clone());
        }
    }
    let entries = raw
        .entries()
        .iter()
        .filter(|(c, _, _)| remap[*c as usize] != u32::MAX)
        .map(|&(c, g, v)| (remap[c as usize], g, v))
        .collect();
    ExpressionMatrix::new(
        cell_ids.len(),
        raw.n_genes,
        entries,
        raw.gene_ids.clone(),
        cell_ids,
    )
}

/// Builds a processed matrix over an explicit kept-gene list (indices into
/// the raw gene space), using precomputed normalized values.
fn restrict_to_genes(
    raw: &ExpressionMatrix,
    normalized: &[f64],
    keep: &[u32],
    scaling: f64,
) -> Result<crate::data_ingest::ProcessedMatrix> {
    crate::data_ingest::ProcessedMatrix::from_parts(raw, normalized, keep, scaling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_gnn::{build_knn_graph, Metric};
    use crate::gene_gnn::CellAttention;
    use crate::numerics::Tensor2;

    fn graph_of(lists: Vec<Vec<u32>>) -> CellGraph {
        CellGraph::from_neighbor_lists(lists, 1)
    }

    fn labels_of(classes: &[u32], n_classes: usize) -> LabelSet {
        LabelSet::new(
            (0..n_classes).map(|c| format!("t{c}")).collect(),
            classes.iter().map(|&c| Some(c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_uniform_attention_aggregates_to_quarter() {
        let capture = CellAttention {
            gene_idx: vec![0, 1, 2, 3],
            matrices: vec![Tensor2::from_vec(4, 4, vec![0.25f64; 16])],
        };
        let agg = aggregate_attention(&[capture], 6).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(agg[i * 6 + j], 0.25);
            }
        }
        // unobserved pairs stay zero
        assert_eq!(agg[4 * 6 + 4], 0.0);
        assert_eq!(agg[0 * 6 + 5], 0.0);
    }

    #[test]
    fn two_observations_average() {
        let c1 = CellAttention {
            gene_idx: vec![1, 2],
            matrices: vec![Tensor2::from_vec(2, 2, vec![0.8f64, 0.2, 0.5, 0.5])],
        };
        let c2 = CellAttention {
            gene_idx: vec![1, 2],
            matrices: vec![Tensor2::from_vec(2, 2, vec![0.6f64, 0.4, 0.1, 0.9])],
        };
        let agg = aggregate_attention(&[c1, c2], 3).unwrap();
        assert!((agg[1 * 3 + 1] - 0.7).abs() < 1e-12); // (0.8+0.6)/2
        assert!((agg[1 * 3 + 2] - 0.3).abs() < 1e-12); // (0.2+0.4)/2
    }

    #[test]
    fn aggregation_matches_brute_force_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t = 8;
        let mut captures = Vec::new();
        for _ in 0..12 {
            let k = rng.gen_range(2..=4usize);
            let mut idx: Vec<u32> = (0..t as u32).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx.sort_unstable();
            let n_mats = rng.gen_range(1..=3usize);
            let matrices = (0..n_mats)
                .map(|_| {
                    let mut m = Tensor2::from_fn(k, k, |_, _| rng.gen_range(0.0..1.0f64));
                    // normalize rows so inputs look like attention
                    for r in 0..k {
                        let s: f64 = m.row(r).iter().sum();
                        for v in m.row_mut(r) {
                            *v /= s;
                        }
                    }
                    m
                })
                .collect();
            captures.push(CellAttention {
                gene_idx: idx,
                matrices,
            });
        }

        let agg = aggregate_attention(&captures, t).unwrap();

        // independent accumulation pass over plain nested vectors
        let mut sum = vec![vec![0.0f64; t]; t];
        let mut cnt = vec![vec![0usize; t]; t];
        for c in &captures {
            for m in &c.matrices {
                for (r, &gi) in c.gene_idx.iter().enumerate() {
                    for (col, &gj) in c.gene_idx.iter().enumerate() {
                        sum[gi as usize][gj as usize] += m.get(r, col);
                        cnt[gi as usize][gj as usize] += 1;
                    }
                }
            }
        }
        for i in 0..t {
            for j in 0..t {
                let want = if cnt[i][j] > 0 {
                    sum[i][j] / cnt[i][j] as f64
                } else {
                    0.0
                };
                assert!((agg[i * t + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rowstochastic_cooccurring_aggregation_rows_sum_to_one() {
        // all captures cover the same gene set with row-stochastic matrices
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let t = 5;
        let captures: Vec<CellAttention<f64>> = (0..7)
            .map(|_| {
                let mut m = Tensor2::from_fn(t, t, |_, _| rng.gen_range(0.1..1.0f64));
                for r in 0..t {
                    let s: f64 = m.row(r).iter().sum();
                    for v in m.row_mut(r) {
                        *v /= s;
                    }
                }
                CellAttention {
                    gene_idx: (0..t as u32).collect(),
                    matrices: vec![m],
                }
            })
            .collect();
        let agg = aggregate_attention(&captures, t).unwrap();
        for i in 0..t {
            let row_sum: f64 = (0..t).map(|j| agg[i * t + j]).sum();
            assert!((row_sum - 1.0).abs() < 1e-5, "row {i} sums to {row_sum}");
        }
    }

    #[test]
    fn importance_uniform_matrix_scores_one_rank_by_index() {
        let t = 6;
        let agg = vec![1.0 / t as f64; t * t];
        let rep = gene_importance(&agg, t).unwrap();
        for &s in &rep.scores {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(rep.ranking, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn importance_doubled_column_ranks_first() {
        let t = 4;
        let mut agg = vec![0.1; t * t];
        for i in 0..t {
            agg[i * t + 2] *= 2.0;
        }
        let rep = gene_importance(&agg, t).unwrap();
        assert_eq!(rep.ranking[0], 2);
    }

    #[test]
    fn importance_matches_column_sum_oracle_and_shift_invariance() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = 9;
        let agg: Vec<f64> = (0..t * t).map(|_| rng.gen_range(0.0..1.0)).collect();
        let rep = gene_importance(&agg, t).unwrap();
        for j in 0..t {
            let want: f64 = (0..t).map(|i| agg[i * t + j]).sum();
            assert!((rep.scores[j] - want).abs() < 1e-12);
        }
        // adding a constant to every column preserves the argsort
        let shifted: Vec<f64> = agg.iter().map(|v| v + 3.7).collect();
        let rep2 = gene_importance(&shifted, t).unwrap();
        assert_eq!(rep.ranking, rep2.ranking);
    }

    #[test]
    fn homophily_all_same_class_is_one() {
        let g = graph_of(vec![vec![1], vec![0, 2], vec![1]]);
        let l = labels_of(&[0, 0, 0], 2);
        let r = homophily(&g, &l).unwrap();
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn homophily_three_of_four_intra() {
        // edges: 0-1 (intra), 1-2 (intra), 2-3 (intra), 3-4 (inter)
        let g = graph_of(vec![vec![1], vec![0, 2], vec![1, 3], vec![2, 4], vec![3]]);
        let l = labels_of(&[0, 0, 0, 0, 1], 2);
        let r = homophily(&g, &l).unwrap();
        assert_eq!(r.total_edges, 4);
        assert_eq!(r.intra_class_edges, 3);
        assert!((r.ratio - 0.75).abs() < 1e-12);
    }

    #[test]
    fn homophily_bipartite_is_zero() {
        let g = graph_of(vec![vec![2, 3], vec![2, 3], vec![0, 1], vec![0, 1]]);
        let l = labels_of(&[0, 0, 1, 1], 2);
        let r = homophily(&g, &l).unwrap();
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn homophily_zero_edges_rejected() {
        let g = graph_of(vec![vec![], vec![]]);
        let l = labels_of(&[0, 1], 2);
        assert!(homophily(&g, &l).is_err());
    }

    #[test]
    fn homophily_invariant_under_class_relabeling() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let reps = Tensor2::from_fn(20, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let g = build_knn_graph(&reps, 3, Metric::Euclidean).unwrap();
        let classes: Vec<u32> = (0..20).map(|i| (i % 3) as u32).collect();
        let l1 = labels_of(&classes, 3);
        // bijection 0->2, 1->0, 2->1
        let relabeled: Vec<u32> = classes.iter().map(|&c| (c + 2) % 3).collect();
        let l2 = labels_of(&relabeled, 3);
        let r1 = homophily(&g, &l1).unwrap();
        let r2 = homophily(&g, &l2).unwrap();
        assert_eq!(r1.ratio, r2.ratio);
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        // invariant under consistent permutation of evaluation order
        let p = [1u32, 0, 2, 2, 1];
        let t = [1u32, 1, 2, 0, 1];
        let a1 = accuracy(&p, &t).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let pp: Vec<u32> = perm.iter().map(|&i| p[i]).collect();
        let tp: Vec<u32> = perm.iter().map(|&i| t[i]).collect();
        assert_eq!(a1, accuracy(&pp, &tp).unwrap());
    }
}
