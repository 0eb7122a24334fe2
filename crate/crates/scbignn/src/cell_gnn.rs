//! Cell-level model `p_theta`: kNN graph over cell representations,
//! row-normalized neighborhood aggregation, jumping-knowledge classifier.
//!
//! Input features per cell are `z_i = concat(h_i, input_mlp(x_i))`, where
//! `h_i` comes from the gene-level model and `x_i` is the densified
//! normalized expression row. Each aggregation layer computes
//! `Z' = MLP(D^-1 A Z W)`; the classifier reads the concatenation of every
//! layer's output (including layer 0).

use crate::data_ingest::ProcessedMatrix;
use crate::error::{Error, Result};
use crate::io_util::{id_list_hash, BinReader, BinWriter};
use crate::numerics::cross_entropy_with_grad;
use crate::numerics::{uniform_init, MlpCache, MlpParams, Parameterized, Scalar, Tensor2};
use rand::Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Magic bytes opening a cell-model checkpoint.
pub const CELL_CKPT_MAGIC: &[u8] = b"SCBG-C1";

/// Distance used by kNN construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 - cos(a, b)`; the default for expression-derived embeddings.
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance<S: Scalar>(&self, a: &[S], b: &[S]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = (x - y).as_f64();
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (x.as_f64(), y.as_f64());
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    // zero vectors carry no direction; treat as maximally far
                    return 1.0;
                }
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }
}

// ── Graph ──────────────────────────────────────────────────────────────────

/// Symmetric kNN adjacency over cells, stored as sorted neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGraph {
    neighbors: Vec<Vec<u32>>,
    pub k: usize,
    pub symmetric: bool,
    pub self_loops: bool,
}

impl CellGraph {
    /// Builds a graph directly from neighbor lists (sorted and
    /// deduplicated; indices validated).
    pub fn from_neighbor_lists(mut lists: Vec<Vec<u32>>, k: usize) -> Self {
        let n = lists.len() as u32;
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            assert!(list.iter().all(|&j| j < n), "neighbor index out of range");
        }
        CellGraph {
            neighbors: lists,
            k,
            symmetric: true,
            self_loops: false,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors_of(&self, i: usize) -> &[u32] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Undirected edge list (i < j), sorted.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                if (i as u32) < j {
                    out.push((i as u32, j));
                }
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.edges().len()
    }

    /// Writes `cell_id_a,cell_id_b` rows for every undirected edge.
    pub fn export_edge_csv(&self, cell_ids: &[String], path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (a, b) in self.edges() {
            writeln!(w, "{},{}", cell_ids[a as usize], cell_ids[b as usize])
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Directed k-nearest-neighbor lists: for each cell, the indices of its k
/// nearest others under `metric`, ties broken by ascending index. Exposed
/// separately so the exact out-degree contract can be checked before
/// symmetrization.
pub fn knn_directed<S: Scalar>(
    reps: &Tensor2<S>,
    k: usize,
    metric: Metric,
) -> Result<Vec<Vec<u32>>> {
    let n = reps.rows();
    if k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    if k >= n {
        return Err(Error::Validation(format!("k={k} must be < N={n}")));
    }
    reps.ensure_finite("kNN representations")?;

    let lists: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let mut dists: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (metric.distance(reps.row(i), reps.row(j)), j as u32))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dists.truncate(k);
            dists.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(lists)
}

/// Builds the cell graph: directed kNN under `metric`, symmetrized by union
/// (an edge is kept if either endpoint selected the other).
pub fn build_knn_graph<S: Scalar>(reps: &Tensor2<S>, k: usize, metric: Metric) -> Result<CellGraph> {
    let directed = knn_directed(reps, k, metric)?;
    let n = directed.len();
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::with_capacity(k * 2); n];
    for (i, nbrs) in directed.iter().enumerate() {
        for &j in nbrs {
            neighbors[i].push(j);
            neighbors[j as usize].push(i as u32);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Ok(CellGraph {
        neighbors,
        k,
        symmetric: true,
        self_loops: false,
    })
}

// ── Model ──────────────────────────────────────────────────────────────────

/// Architecture of the cell-level model.
#[derive(Clone, Debug, PartialEq)]
pub struct CellModelConfig {
    /// Kept-gene count T (input MLP width).
    pub n_genes: usize,
    pub n_classes: usize,
    /// Width of h_i produced by the gene-level model.
    pub h_width: usize,
    /// Output width of the input MLP and of every aggregation layer.
    pub layer_width: usize,
    pub hidden_width: usize,
    pub n_layers: usize,
}

impl CellModelConfig {
    /// Three aggregation layers of width 32.
    pub fn standard(n_genes: usize, n_classes: usize, h_width: usize) -> Self {
        CellModelConfig {
            n_genes,
            n_classes,
            h_width,
            layer_width: 32,
            hidden_width: 32,
            n_layers: 3,
        }
    }

    /// Width of z_i^(0) = concat(h_i, input_mlp(x_i)).
    pub fn z0_width(&self) -> usize {
        self.h_width + self.layer_width
    }

    /// Classifier input: concatenation of all layer outputs including layer 0.
    pub fn jk_width(&self) -> usize {
        self.z0_width() + self.n_layers * self.layer_width
    }
}

/// One aggregation layer: weight matrix applied after the row-normalized
/// neighborhood mean, followed by the layer MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct CellLayer<S> {
    pub weight: Tensor2<S>,
    pub mlp: MlpParams<S>,
}

/// All learnable state of the cell-level model (theta).
#[derive(Clone, Debug, PartialEq)]
pub struct CellModelParams<S> {
    pub config: CellModelConfig,
    pub input_mlp: MlpParams<S>,
    pub layers: Vec<CellLayer<S>>,
    pub classifier: MlpParams<S>,
}

impl<S: Scalar> CellModelParams<S> {
    pub fn init(config: CellModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::Validation("need C >= 2".into()));
        }
        // zero output layer: z_i^(0) starts as (h_i, 0) so the wide
        // log-normalized expression row cannot drown h_i at init; the
        // expression path grows during training.
        let mut input_mlp = MlpParams::init(
            &[config.n_genes, config.hidden_width, config.layer_width],
            rng,
        );
        let last = input_mlp.weights.len() - 1;
        input_mlp.weights[last].scale(S::zero());
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut in_width = config.z0_width();
        for _ in 0..config.n_layers {
            layers.push(CellLayer {
                weight: uniform_init(in_width, config.layer_width, rng),
                mlp: MlpParams::init(
                    &[config.layer_width, config.hidden_width, config.layer_width],
                    rng,
                ),
            });
            in_width = config.layer_width;
        }
        let classifier = MlpParams::init(
            &[config.jk_width(), config.hidden_width, config.n_classes],
            rng,
        );
        Ok(CellModelParams {
            config,
            input_mlp,
            layers,
            classifier,
        })
    }

    pub fn zeros(config: CellModelConfig) -> Self {
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut in_width = config.z0_width();
        for _ in 0..config.n_layers {
            layers.push(CellLayer {
                weight: Tensor2::zeros(in_width, config.layer_width),
                mlp: MlpParams::zeros(&[
                    config.layer_width,
                    config.hidden_width,
                    config.layer_width,
                ]),
            });
            in_width = config.layer_width;
        }
        CellModelParams {
            input_mlp: MlpParams::zeros(&[config.n_genes, config.hidden_width, config.layer_width]),
            classifier: MlpParams::zeros(&[
                config.jk_width(),
                config.hidden_width,
                config.n_classes,
            ]),
            layers,
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> CellModelParams<T> {
        let mut out = CellModelParams::<T>::zeros(self.config.clone());
        for (dst, src) in out.blocks_mut().into_iter().zip(self.blocks()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(s.as_f64());
            }
        }
        out
    }
}

impl<S: Scalar> Parameterized<S> for CellModelParams<S> {
    fn blocks(&self) -> Vec<&[S]> {
        let mut out = self.input_mlp.blocks();
        for layer in &self.layers {
            out.push(layer.weight.data());
            out.extend(layer.mlp.blocks());
        }
        out.extend(self.classifier.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = self.input_mlp.blocks_mut();
        for layer in &mut self.layers {
            out.push(layer.weight.data_mut());
            out.extend(layer.mlp.blocks_mut());
        }
        out.extend(self.classifier.blocks_mut());
        out
    }
}

// ── Aggregation ────────────────────────────────────────────────────────────

/// Row-normalized neighborhood mean `D^-1 A Z`. Zero-degree rows pass their
/// own features through (self-fallback; `D^-1` is undefined at degree 0).
fn aggregate_mean<S: Scalar>(graph: &CellGraph, z: &Tensor2<S>) -> Tensor2<S> {
    let n = z.rows();
    let cols = z.cols();
    let mut out = Tensor2::zeros(n, cols);
    let body = |(i, orow): (usize, &mut [S])| {
        let nbrs = graph.neighbors_of(i);
        if nbrs.is_empty() {
            orow.copy_from_slice(z.row(i));
            return;
        }
        for &j in nbrs {
            for (o, &v) in orow.iter_mut().zip(z.row(j as usize)) {
                *o += v;
            }
        }
        let inv = S::from_f64(1.0 / nbrs.len() as f64);
        for o in orow.iter_mut() {
            *o *= inv;
        }
    };
    if n >= 256 {
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(body);
    } else {
        out.data_mut().chunks_mut(cols).enumerate().for_each(body);
    }
    out
}

/// Transpose of [`aggregate_mean`]: scatters `d` back through `D^-1 A`.
fn aggregate_mean_backward<S: Scalar>(graph: &CellGraph, d: &Tensor2<S>) -> Tensor2<S> {
    let n = d.rows();
    let mut out = Tensor2::zeros(n, d.cols());
    for i in 0..n {
        let nbrs = graph.neighbors_of(i);
        if nbrs.is_empty() {
            let src = d.row(i).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o += v;
            }
            continue;
        }
        let inv = S::from_f64(1.0 / nbrs.len() as f64);
        for &j in nbrs {
            let dst = out.row_mut(j as usize);
            for (o, &v) in dst.iter_mut().zip(d.row(i)) {
                *o += inv * v;
            }
        }
    }
    out
}

struct CellLayerCache<S> {
    aggregated: Tensor2<S>,
    mlp_cache: MlpCache<S>,
}

/// One aggregation layer forward: `MLP(D^-1 A Z W)`.
pub fn aggregate_layer<S: Scalar>(
    layer: &CellLayer<S>,
    graph: &CellGraph,
    z: &Tensor2<S>,
) -> Result<Tensor2<S>> {
    Ok(aggregate_layer_cached(layer, graph, z)?.0)
}

fn aggregate_layer_cached<S: Scalar>(
    layer: &CellLayer<S>,
    graph: &CellGraph,
    z: &Tensor2<S>,
) -> Result<(Tensor2<S>, CellLayerCache<S>)> {
    if graph.n_nodes() == 0 {
        return Err(Error::Validation("empty graph".into()));
    }
    if z.rows() != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "feature rows {} != graph nodes {}",
            z.rows(),
            graph.n_nodes()
        )));
    }
    if z.cols() != layer.weight.rows() {
        return Err(Error::Shape(format!(
            "feature width {} != layer weight rows {}",
            z.cols(),
            layer.weight.rows()
        )));
    }
    let aggregated = aggregate_mean(graph, z);
    let pre = aggregated.matmul(&layer.weight);
    let (out, mlp_cache) = layer.mlp.forward_cached(&pre)?;
    out.ensure_finite("aggregation layer output")?;
    Ok((
        out,
        CellLayerCache {
            aggregated,
            mlp_cache,
        },
    ))
}

// ── Whole-model forward/backward ───────────────────────────────────────────

/// Forward pass over the whole graph. Returns the class logits and the
/// per-layer outputs `[Z^(0), ..., Z^(L)]` whose concatenation feeds the
/// classifier.
pub struct CellForwardOutput<S> {
    pub logits: Tensor2<S>,
    pub layer_outputs: Vec<Tensor2<S>>,
}

struct CellModelCache<S> {
    input_mlp_cache: MlpCache<S>,
    layer_caches: Vec<CellLayerCache<S>>,
    clf_cache: MlpCache<S>,
}

fn cell_forward_cached<S: Scalar>(
    params: &CellModelParams<S>,
    graph: &CellGraph,
    x_dense: &Tensor2<S>,
    h: &Tensor2<S>,
) -> Result<(CellForwardOutput<S>, CellModelCache<S>)> {
    let n = graph.n_nodes();
    if x_dense.rows() != n || h.rows() != n {
        return Err(Error::Shape(format!(
            "graph has {n} nodes but x has {} rows and h has {} rows",
            x_dense.rows(),
            h.rows()
        )));
    }
    if h.cols() != params.config.h_width {
        return Err(Error::Shape(format!(
            "h width {} != configured {}",
            h.cols(),
            params.config.h_width
        )));
    }
    let (x_emb, input_mlp_cache) = params.input_mlp.forward_cached(x_dense)?;

    // z^(0) = concat(h_i, MLP(x_i))
    let mut z0 = Tensor2::zeros(n, params.config.z0_width());
    z0.set_columns(0, h);
    z0.set_columns(params.config.h_width, &x_emb);

    let mut layer_outputs = vec![z0];
    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = aggregate_layer_cached(layer, graph, layer_outputs.last().unwrap())?;
        layer_caches.push(cache);
        layer_outputs.push(out);
    }

    // jumping knowledge: h'_i = concat(z^(0), ..., z^(L))
    let mut jk = Tensor2::zeros(n, params.config.jk_width());
    let mut offset = 0;
    for z in &layer_outputs {
        jk.set_columns(offset, z);
        offset += z.cols();
    }
    let (logits, clf_cache) = params.classifier.forward_cached(&jk)?;
    logits.ensure_finite("cell classifier logits")?;
    Ok((
        CellForwardOutput {
            logits,
            layer_outputs,
        },
        CellModelCache {
            input_mlp_cache,
            layer_caches,
            clf_cache,
        },
    ))
}

/// Full-graph forward pass of the cell-level model.
pub fn cell_forward<S: Scalar>(
    params: &CellModelParams<S>,
    graph: &CellGraph,
    x_dense: &Tensor2<S>,
    h: &Tensor2<S>,
) -> Result<CellForwardOutput<S>> {
    Ok(cell_forward_cached(params, graph, x_dense, h)?.0)
}

/// Weighted cross-entropy over the graph and its gradients w.r.t. theta
/// only; `h` is input data here (produced by the frozen gene model), so no
/// gradient w.r.t. it is ever formed or returned.
///
/// `weights[i]` multiplies cell i's loss term; zero excludes the cell.
pub fn cell_backward<S: Scalar>(
    params: &CellModelParams<S>,
    graph: &CellGraph,
    x_dense: &Tensor2<S>,
    h: &Tensor2<S>,
    targets: &Tensor2<S>,
    weights: &[S],
) -> Result<(S, CellModelParams<S>)> {
    let (fwd, cache) = cell_forward_cached(params, graph, x_dense, h)?;
    let (loss, d_logits) = cross_entropy_with_grad(&fwd.logits, targets, Some(weights))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cell model loss".into()));
    }

    let mut grads = params.zeros_like();
    let (clf_grads, d_jk) = params.classifier.backward(&cache.clf_cache, &d_logits);
    grads.classifier = clf_grads;

    // split d_jk back into per-layer slices; deeper layers receive both the
    // direct JK gradient and the backpropagated one
    let widths: Vec<usize> = fwd.layer_outputs.iter().map(Tensor2::cols).collect();
    let mut offsets = Vec::with_capacity(widths.len());
    let mut acc = 0;
    for w in &widths {
        offsets.push(acc);
        acc += w;
    }

    let mut d_z = d_jk.columns(offsets[widths.len() - 1], acc);
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lcache = &cache.layer_caches[li];
        // out = MLP(aggregated · W)
        let (mlp_grads, d_pre) = layer.mlp.backward(&lcache.mlp_cache, &d_z);
        grads.layers[li].mlp = mlp_grads;
        grads.layers[li].weight = lcache.aggregated.transposed_matmul(&d_pre);
        let d_agg = d_pre.matmul_transpose_rhs(&layer.weight);
        let mut d_prev = aggregate_mean_backward(graph, &d_agg);
        d_prev.add_scaled(&d_jk.columns(offsets[li], offsets[li] + widths[li]), S::one());
        d_z = d_prev;
    }

    // d_z is now the gradient w.r.t. z^(0); only the input-MLP columns flow
    // further (h is data)
    let d_x_emb = d_z.columns(params.config.h_width, params.config.z0_width());
    let (input_grads, _) = params.input_mlp.backward(&cache.input_mlp_cache, &d_x_emb);
    grads.input_mlp = input_grads;

    Ok((loss, grads))
}

/// Densify the processed matrix for the input MLP.
pub fn densify<S: Scalar>(data: &ProcessedMatrix) -> Tensor2<S> {
    data.to_dense()
}

// ── Checkpointing ──────────────────────────────────────────────────────────

/// Cell-model checkpoint, same contract as the gene checkpoint.
pub struct CellCheckpoint<S> {
    pub params: CellModelParams<S>,
    pub class_names: Vec<String>,
    pub gene_id_hash: u64,
}

impl<S: Scalar> CellCheckpoint<S> {
    pub fn new(params: CellModelParams<S>, class_names: Vec<String>, gene_ids: &[String]) -> Self {
        CellCheckpoint {
            params,
            class_names,
            gene_id_hash: id_list_hash(gene_ids),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.params.config;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BinWriter::new(BufWriter::new(file));
        let io = |e: std::io::Error| Error::io(path, e);
        w.bytes(CELL_CKPT_MAGIC).map_err(io)?;
        for v in [
            cfg.n_genes as u32,
            cfg.n_classes as u32,
            cfg.h_width as u32,
            cfg.layer_width as u32,
            cfg.hidden_width as u32,
            cfg.n_layers as u32,
        ] {
            w.u32(v).map_err(io)?;
        }
        w.str_list(&self.class_names).map_err(io)?;
        w.u64(self.gene_id_hash).map_err(io)?;
        for block in self.params.blocks() {
            w.u64(block.len() as u64).map_err(io)?;
            for &v in block {
                w.f64(v.as_f64()).map_err(io)?;
            }
        }
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BinReader::new(BufReader::new(file), path);
        r.expect_magic(CELL_CKPT_MAGIC)?;
        let config = CellModelConfig {
            n_genes: r.u32()? as usize,
            n_classes: r.u32()? as usize,
            h_width: r.u32()? as usize,
            layer_width: r.u32()? as usize,
            hidden_width: r.u32()? as usize,
            n_layers: r.u32()? as usize,
        };
        let class_names = r.str_list()?;
        let gene_id_hash = r.u64()?;
        let mut params = CellModelParams::<S>::zeros(config);
        for block in params.blocks_mut() {
            let n = r.u64()? as usize;
            if n != block.len() {
                return Err(Error::Validation(format!(
                    "checkpoint block length {n} != expected {}",
                    block.len()
                )));
            }
            for v in block.iter_mut() {
                *v = S::from_f64(r.f64()?);
            }
        }
        Ok(CellCheckpoint {
            params,
            class_names,
            gene_id_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, param_checksum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph_from_lists(lists: Vec<Vec<u32>>, k: usize) -> CellGraph {
        CellGraph {
            neighbors: lists,
            k,
            symmetric: true,
            self_loops: false,
        }
    }

    #[test]
    fn knn_collinear_points() {
        // (0,0), (0.1,0), (5,5) with k=1, Euclidean:
        // directed picks 0->1, 1->0, 2->1; union edges {0-1, 1-2}
        let reps = Tensor2::from_vec(3, 2, vec![0.0f64, 0.0, 0.1, 0.0, 5.0, 5.0]);
        let directed = knn_directed(&reps, 1, Metric::Euclidean).unwrap();
        assert_eq!(directed, vec![vec![1], vec![0], vec![1]]);
        let g = build_knn_graph(&reps, 1, Metric::Euclidean).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_identical_points_tie_break() {
        let reps = Tensor2::from_vec(4, 2, vec![1.0f64, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let directed = knn_directed(&reps, 1, Metric::Euclidean).unwrap();
        assert_eq!(directed, vec![vec![1], vec![0], vec![0], vec![0]]);
    }

    #[test]
    fn knn_exact_out_degree_and_brute_force_agreement() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100;
        let reps = Tensor2::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let directed = knn_directed(&reps, 5, metric).unwrap();
            for (i, nbrs) in directed.iter().enumerate() {
                assert_eq!(nbrs.len(), 5, "out-degree of {i}");
                // brute force: no excluded candidate can be strictly closer
                // than the farthest pick
                let worst = nbrs
                    .iter()
                    .map(|&j| metric.distance(reps.row(i), reps.row(j as usize)))
                    .fold(f64::NEG_INFINITY, f64::max);
                for j in 0..n {
                    if j != i && !nbrs.contains(&(j as u32)) {
                        let d = metric.distance(reps.row(i), reps.row(j));
                        assert!(d >= worst - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn knn_rejects_k_ge_n() {
        let reps = Tensor2::<f64>::zeros(3, 2);
        assert!(knn_directed(&reps, 3, Metric::Euclidean).is_err());
    }

    #[test]
    fn symmetrized_graph_is_symmetric() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = Tensor2::from_fn(30, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let g = build_knn_graph(&reps, 3, Metric::Cosine).unwrap();
        for i in 0..30 {
            for &j in g.neighbors_of(i) {
                assert!(g.neighbors_of(j as usize).contains(&(i as u32)));
            }
        }
    }

    #[test]
    fn row_normalized_mean_simple() {
        // node 0 has neighbors with features [2] and [4] -> [3]
        let g = graph_from_lists(vec![vec![1, 2], vec![0], vec![0]], 1);
        let z = Tensor2::from_vec(3, 1, vec![0.0f64, 2.0, 4.0]);
        let m = aggregate_mean(&g, &z);
        assert_eq!(m.get(0, 0), 3.0);
    }

    #[test]
    fn adjacency_row_normalization() {
        // adjacency row [1,1,0] -> normalized [0.5, 0.5, 0]: checked via the
        // aggregated value of one-hot features
        let g = graph_from_lists(vec![vec![1, 2], vec![0], vec![0]], 1);
        for (feat_node, want) in [(1usize, 0.5), (2, 0.5), (0, 0.0)] {
            let mut z = Tensor2::zeros(3, 1);
            z.set(feat_node, 0, 1.0f64);
            let m = aggregate_mean(&g, &z);
            assert_eq!(m.get(0, 0), want);
        }
    }

    #[test]
    fn aggregate_layer_matches_dense_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reps = Tensor2::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let g = build_knn_graph(&reps, 2, Metric::Euclidean).unwrap();
        let layer = CellLayer {
            weight: uniform_init(3, 4, &mut rng),
            mlp: MlpParams::init(&[4, 4, 4], &mut rng),
        };
        let z = Tensor2::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0f64));
        let got = aggregate_layer(&layer, &g, &z).unwrap();

        // dense D^-1 A Z W through the MLP
        let mut a = vec![vec![0.0f64; 5]; 5];
        for i in 0..5 {
            for &j in g.neighbors_of(i) {
                a[i][j as usize] = 1.0;
            }
        }
        let mut dz = Tensor2::zeros(5, 3);
        for i in 0..5 {
            let deg: f64 = a[i].iter().sum();
            for j in 0..5 {
                if a[i][j] != 0.0 {
                    for c in 0..3 {
                        let v = dz.get(i, c) + z.get(j, c) / deg;
                        dz.set(i, c, v);
                    }
                }
            }
        }
        let want = layer.mlp.forward(&dz.matmul(&layer.weight)).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                assert!((got.get(r, c) - want.get(r, c)).abs() < 1e-12);
            }
        }
    }

    fn toy_setup(
        n: usize,
        t: usize,
        c: usize,
        seed: u64,
    ) -> (CellModelParams<f64>, CellGraph, Tensor2<f64>, Tensor2<f64>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut config = CellModelConfig::standard(t, c, 6);
        config.layer_width = 8;
        config.hidden_width = 6;
        let params = CellModelParams::init(config, &mut rng).unwrap();
        let h = Tensor2::from_fn(n, 6, |_, _| rng.gen_range(-1.0..1.0));
        let x = Tensor2::from_fn(n, t, |_, _| rng.gen_range(0.0..2.0f64));
        let g = build_knn_graph(&h, 2, Metric::Euclidean).unwrap();
        (params, g, x, h)
    }

    #[test]
    fn isolated_node_uses_self_fallback() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut config = CellModelConfig::standard(4, 2, 3);
        config.layer_width = 5;
        config.hidden_width = 4;
        let params = CellModelParams::<f64>::init(config, &mut rng).unwrap();
        let g = graph_from_lists(vec![vec![]], 1);
        let x = Tensor2::from_fn(1, 4, |_, _| rng.gen_range(0.0..1.0));
        let h = Tensor2::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
        let out = cell_forward(&params, &g, &x, &h).unwrap();
        assert!(out.logits.is_finite());

        // with self-fallback, aggregation of a single isolated node equals
        // feeding z^(0) straight through every layer
        let z0 = &out.layer_outputs[0];
        let z1_direct = params.layers[0]
            .mlp
            .forward(&z0.matmul(&params.layers[0].weight))
            .unwrap();
        assert_eq!(out.layer_outputs[1], z1_direct);
    }

    #[test]
    fn disconnected_components_are_independent() {
        // permuting one component's features permutes its outputs identically
        let (params, _, x, h) = toy_setup(4, 4, 2, 31);
        let g = graph_from_lists(vec![vec![1], vec![0], vec![3], vec![2]], 1);
        let out1 = cell_forward(&params, &g, &x, &h).unwrap();

        // swap nodes 2 and 3 (both in the second component)
        let perm = [0usize, 1, 3, 2];
        let xp = Tensor2::from_fn(4, x.cols(), |r, c| x.get(perm[r], c));
        let hp = Tensor2::from_fn(4, h.cols(), |r, c| h.get(perm[r], c));
        let out2 = cell_forward(&params, &g, &xp, &hp).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                assert!((out1.logits.get(perm[r], c) - out2.logits.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_full_graph() {
        let (params, g, x, h) = toy_setup(6, 4, 3, 32);
        let out1 = cell_forward(&params, &g, &x, &h).unwrap();

        // relabel cells by a permutation
        let perm = [2usize, 0, 5, 1, 4, 3]; // new index r holds old cell perm[r]
        let xp = Tensor2::from_fn(6, x.cols(), |r, c| x.get(perm[r], c));
        let hp = Tensor2::from_fn(6, h.cols(), |r, c| h.get(perm[r], c));
        let mut inv = [0usize; 6];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let lists: Vec<Vec<u32>> = (0..6)
            .map(|r| {
                let mut l: Vec<u32> = g
                    .neighbors_of(perm[r])
                    .iter()
                    .map(|&j| inv[j as usize] as u32)
                    .collect();
                l.sort_unstable();
                l
            })
            .collect();
        let gp = graph_from_lists(lists, g.k);
        let out2 = cell_forward(&params, &gp, &xp, &hp).unwrap();
        for r in 0..6 {
            for c in 0..3 {
                assert!((out1.logits.get(perm[r], c) - out2.logits.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cell_gradients_match_central_differences() {
        let (mut params, g, x, h) = toy_setup(5, 4, 3, 33);
        let targets = Tensor2::from_vec(
            5,
            3,
            vec![
                1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.4, 0.3, 0.3, 0.0, 1.0, 0.0,
            ],
        );
        let weights = vec![0.25f64, 0.25, 0.25, 0.0, 0.25]; // one excluded cell
        let (_, analytic) = cell_backward(&params, &g, &x, &h, &targets, &weights).unwrap();
        let max_rel = grad_check(&mut params, &analytic, 1e-5, |m| {
            cell_backward(m, &g, &x, &h, &targets, &weights).map(|(l, _)| l)
        })
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let (params, _, _, _) = toy_setup(4, 4, 2, 34);
        let gene_ids: Vec<String> = (0..4).map(|g| format!("g{g}")).collect();
        let ckpt = CellCheckpoint::new(params, vec!["x".into(), "y".into()], &gene_ids);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = CellCheckpoint::<f64>::load(&path).unwrap();
        assert_eq!(param_checksum(&ckpt.params), param_checksum(&loaded.params));
        assert_eq!(ckpt.params, loaded.params);
    }
}
