//! Gene-level model `q_phi`: per-cell self-attention over the expressed
//! genes, pooled into a cell representation and classified.
//!
//! Per cell, each expressed gene gets an input embedding
//! `e_ij = e_gene[j] + count_mlp(x_ij)`. A stack of self-attention layers
//! transforms the `T_i x d` embedding matrix; a read-out (average or
//! learned per-gene weights) pools the final gene representations into
//! `h_i`, which an MLP classifier maps to class logits.

use crate::data_ingest::ProcessedMatrix;
use crate::error::{Error, Result};
use crate::io_util::{id_list_hash, BinReader, BinWriter};
use crate::numerics::cross_entropy_with_grad;
use crate::numerics::{
    softmax_rows_inplace, uniform_init, MlpCache, MlpParams, Parameterized, Scalar, Tensor2,
};
use rand::Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Magic bytes opening a gene-model checkpoint.
pub const GENE_CKPT_MAGIC: &[u8] = b"SCBG-G1";

/// Cells per work unit when a batch is processed in parallel. Fixed so the
/// accumulation order (and therefore the result) is independent of the
/// worker count.
const GRAD_CHUNK: usize = 64;

/// Architecture of the gene-level model.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneModelConfig {
    /// Number of kept genes T.
    pub n_genes: usize,
    pub n_classes: usize,
    /// Input embedding width d_g.
    pub embed_dim: usize,
    /// Output width of every attention layer.
    pub layer_width: usize,
    /// Hidden width of all MLPs.
    pub hidden_width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Learned per-gene read-out weights instead of average pooling.
    pub learned_readout: bool,
    /// Divide attention logits by sqrt(head width) before the softmax.
    /// Disable for strict conformance with the unscaled product.
    pub scaled_attention: bool,
}

impl GeneModelConfig {
    /// Two layers, one head each, average pooling.
    pub fn standard(n_genes: usize, n_classes: usize) -> Self {
        GeneModelConfig {
            n_genes,
            n_classes,
            embed_dim: 32,
            layer_width: 32,
            hidden_width: 32,
            n_layers: 2,
            n_heads: 1,
            learned_readout: false,
            scaled_attention: true,
        }
    }

    /// One layer with four attention heads and a learned read-out.
    pub fn one_layer_four_heads(n_genes: usize, n_classes: usize) -> Self {
        GeneModelConfig {
            n_layers: 1,
            n_heads: 4,
            learned_readout: true,
            ..Self::standard(n_genes, n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genes == 0 || self.n_classes < 2 {
            return Err(Error::Validation("need T >= 1 and C >= 2".into()));
        }
        if self.n_heads == 0 && self.n_layers > 0 {
            return Err(Error::Validation("heads must be >= 1".into()));
        }
        if self.n_layers > 0 && self.layer_width % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "layer width {} not divisible by {} heads",
                self.layer_width, self.n_heads
            )));
        }
        Ok(())
    }

    /// Width of the pooled cell representation h_i.
    pub fn repr_width(&self) -> usize {
        if self.n_layers == 0 {
            self.embed_dim
        } else {
            self.layer_width
        }
    }
}

/// One self-attention layer: per-head projection matrices plus the
/// post-aggregation MLP applied to the concatenated head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<S> {
    pub head_projs: Vec<Tensor2<S>>,
    pub mlp: MlpParams<S>,
}

/// Read-out weights: average pooling or one learnable weight per gene.
#[derive(Clone, Debug, PartialEq)]
pub enum Readout<S> {
    Average,
    Learned(Vec<S>),
}

/// All learnable state of the gene-level model (phi).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneModelParams<S> {
    pub config: GeneModelConfig,
    /// T x d_g table, one learnable vector per gene.
    pub gene_embeddings: Tensor2<S>,
    /// Maps one expression value to a d_g-dimensional count embedding.
    pub count_mlp: MlpParams<S>,
    pub layers: Vec<AttentionLayer<S>>,
    pub readout: Readout<S>,
    pub classifier: MlpParams<S>,
}

impl<S: Scalar> GeneModelParams<S> {
    pub fn init(config: GeneModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let gene_embeddings = uniform_init(config.n_genes, d, rng);
        // zero output layer: E_i starts as the gene embeddings alone, and
        // the count path grows during training. Log-normalized counts are
        // O(10), which would otherwise drown the embedding signal and
        // saturate the first attention softmax at init.
        let mut count_mlp = MlpParams::init(&[1, config.hidden_width, d], rng);
        let last = count_mlp.weights.len() - 1;
        count_mlp.weights[last].scale(S::zero());
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut in_width = d;
        for _ in 0..config.n_layers {
            let d_head = config.layer_width / config.n_heads;
            let head_projs = (0..config.n_heads)
                .map(|_| uniform_init(in_width, d_head, rng))
                .collect();
            let mlp = MlpParams::init(
                &[config.layer_width, config.hidden_width, config.layer_width],
                rng,
            );
            layers.push(AttentionLayer { head_projs, mlp });
            in_width = config.layer_width;
        }
        let readout = if config.learned_readout {
            Readout::Learned(vec![S::from_f64(1.0 / config.n_genes as f64); config.n_genes])
        } else {
            Readout::Average
        };
        let classifier = MlpParams::init(
            &[config.repr_width(), config.hidden_width, config.n_classes],
            rng,
        );
        Ok(GeneModelParams {
            config,
            gene_embeddings,
            count_mlp,
            layers,
            readout,
            classifier,
        })
    }

    /// All-zero parameters for the given architecture (gradient accumulators
    /// and checkpoint loading).
    pub fn zeros(config: GeneModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let d_head = if config.n_layers > 0 {
            config.layer_width / config.n_heads
        } else {
            0
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut in_width = d;
        for _ in 0..config.n_layers {
            layers.push(AttentionLayer {
                head_projs: (0..config.n_heads)
                    .map(|_| Tensor2::zeros(in_width, d_head))
                    .collect(),
                mlp: MlpParams::zeros(&[
                    config.layer_width,
                    config.hidden_width,
                    config.layer_width,
                ]),
            });
            in_width = config.layer_width;
        }
        let readout = if config.learned_readout {
            Readout::Learned(vec![S::zero(); config.n_genes])
        } else {
            Readout::Average
        };
        Ok(GeneModelParams {
            gene_embeddings: Tensor2::zeros(config.n_genes, d),
            count_mlp: MlpParams::zeros(&[1, config.hidden_width, d]),
            classifier: MlpParams::zeros(&[
                config.repr_width(),
                config.hidden_width,
                config.n_classes,
            ]),
            layers,
            readout,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        GeneModelParams {
            config: self.config.clone(),
            gene_embeddings: Tensor2::zeros(
                self.gene_embeddings.rows(),
                self.gene_embeddings.cols(),
            ),
            count_mlp: self.count_mlp.zeros_like(),
            layers: self
                .layers
                .iter()
                .map(|l| AttentionLayer {
                    head_projs: l
                        .head_projs
                        .iter()
                        .map(|p| Tensor2::zeros(p.rows(), p.cols()))
                        .collect(),
                    mlp: l.mlp.zeros_like(),
                })
                .collect(),
            readout: match &self.readout {
                Readout::Average => Readout::Average,
                Readout::Learned(a) => Readout::Learned(vec![S::zero(); a.len()]),
            },
            classifier: self.classifier.zeros_like(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> GeneModelParams<T> {
        GeneModelParams {
            config: self.config.clone(),
            gene_embeddings: self.gene_embeddings.cast(),
            count_mlp: MlpParams {
                weights: self.count_mlp.weights.iter().map(|w| w.cast()).collect(),
                biases: self
                    .count_mlp
                    .biases
                    .iter()
                    .map(|b| b.iter().map(|v| T::from_f64(v.as_f64())).collect())
                    .collect(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| AttentionLayer {
                    head_projs: l.head_projs.iter().map(|p| p.cast()).collect(),
                    mlp: MlpParams {
                        weights: l.mlp.weights.iter().map(|w| w.cast()).collect(),
                        biases: l
                            .mlp
                            .biases
                            .iter()
                            .map(|b| b.iter().map(|v| T::from_f64(v.as_f64())).collect())
                            .collect(),
                    },
                })
                .collect(),
            readout: match &self.readout {
                Readout::Average => Readout::Average,
                Readout::Learned(a) => {
                    Readout::Learned(a.iter().map(|v| T::from_f64(v.as_f64())).collect())
                }
            },
            classifier: MlpParams {
                weights: self.classifier.weights.iter().map(|w| w.cast()).collect(),
                biases: self
                    .classifier
                    .biases
                    .iter()
                    .map(|b| b.iter().map(|v| T::from_f64(v.as_f64())).collect())
                    .collect(),
            },
        }
    }
}

impl<S: Scalar> Parameterized<S> for GeneModelParams<S> {
    fn blocks(&self) -> Vec<&[S]> {
        let mut out = vec![self.gene_embeddings.data()];
        out.extend(self.count_mlp.blocks());
        for layer in &self.layers {
            for p in &layer.head_projs {
                out.push(p.data());
            }
            out.extend(layer.mlp.blocks());
        }
        if let Readout::Learned(a) = &self.readout {
            out.push(a.as_slice());
        }
        out.extend(self.classifier.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = vec![self.gene_embeddings.data_mut()];
        out.extend(self.count_mlp.blocks_mut());
        for layer in &mut self.layers {
            for p in &mut layer.head_projs {
                out.push(p.data_mut());
            }
            out.extend(layer.mlp.blocks_mut());
        }
        if let Readout::Learned(a) = &mut self.readout {
            out.push(a.as_mut_slice());
        }
        out.extend(self.classifier.blocks_mut());
        out
    }
}

// ── Forward pieces ─────────────────────────────────────────────────────────

/// Input embedding matrix `E_i` for one cell: row t is the gene embedding
/// of the t-th expressed gene plus the count embedding of its value.
pub fn embed_cell<S: Scalar>(
    params: &GeneModelParams<S>,
    gene_idx: &[u32],
    values: &[f64],
) -> Result<Tensor2<S>> {
    Ok(embed_cell_cached(params, gene_idx, values)?.0)
}

fn embed_cell_cached<S: Scalar>(
    params: &GeneModelParams<S>,
    gene_idx: &[u32],
    values: &[f64],
) -> Result<(Tensor2<S>, MlpCache<S>)> {
    if gene_idx.is_empty() {
        return Err(Error::Validation("empty expression list".into()));
    }
    if gene_idx.len() != values.len() {
        return Err(Error::Shape("gene index / value length mismatch".into()));
    }
    let t_i = gene_idx.len();
    let d = params.config.embed_dim;
    let counts = Tensor2::from_vec(t_i, 1, values.iter().map(|&v| S::from_f64(v)).collect());
    let (count_emb, cache) = params.count_mlp.forward_cached(&counts)?;
    let mut e = Tensor2::zeros(t_i, d);
    for (t, &g) in gene_idx.iter().enumerate() {
        let g = g as usize;
        if g >= params.config.n_genes {
            return Err(Error::Validation(format!(
                "gene index {g} out of range (T={})",
                params.config.n_genes
            )));
        }
        let row = e.row_mut(t);
        row.copy_from_slice(params.gene_embeddings.row(g));
        for (r, &c) in row.iter_mut().zip(count_emb.row(t)) {
            *r += c;
        }
    }
    Ok((e, cache))
}

/// Cache of one attention layer's forward pass.
struct LayerCache<S> {
    input: Tensor2<S>,
    projs: Vec<Tensor2<S>>,
    attn: Vec<Tensor2<S>>,
    mlp_cache: MlpCache<S>,
}

/// One self-attention layer: per head, `S_h = softmax(P_h P_h^T / scale)`
/// with `P_h = F W_h`, head outputs `S_h P_h` are concatenated and passed
/// through the layer MLP. Returns the output and the per-head attention
/// matrices (row-stochastic, retrievable for analysis).
pub fn attention_layer<S: Scalar>(
    layer: &AttentionLayer<S>,
    f: &Tensor2<S>,
) -> Result<(Tensor2<S>, Vec<Tensor2<S>>)> {
    let (out, cache) = attention_layer_cached(layer, f, true)?;
    Ok((out, cache.attn))
}

fn attention_layer_cached<S: Scalar>(
    layer: &AttentionLayer<S>,
    f: &Tensor2<S>,
    scaled: bool,
) -> Result<(Tensor2<S>, LayerCache<S>)> {
    let in_width = layer.head_projs[0].rows();
    if f.cols() != in_width {
        return Err(Error::Shape(format!(
            "attention input width {} != projection rows {in_width}",
            f.cols()
        )));
    }
    f.ensure_finite("attention layer input")?;
    let t_i = f.rows();
    let n_heads = layer.head_projs.len();
    let d_head = layer.head_projs[0].cols();

    let mut projs = Vec::with_capacity(n_heads);
    let mut attn = Vec::with_capacity(n_heads);
    let mut concat = Tensor2::zeros(t_i, n_heads * d_head);
    for (h, w) in layer.head_projs.iter().enumerate() {
        let p = f.matmul(w);
        let mut logits = p.matmul_transpose_rhs(&p);
        if scaled {
            logits.scale(S::from_f64(1.0 / (d_head as f64).sqrt()));
        }
        softmax_rows_inplace(&mut logits);
        let head_out = logits.matmul(&p);
        concat.set_columns(h * d_head, &head_out);
        projs.push(p);
        attn.push(logits);
    }
    let (out, mlp_cache) = layer.mlp.forward_cached(&concat)?;
    out.ensure_finite("attention layer output")?;
    Ok((
        out,
        LayerCache {
            input: f.clone(),
            projs,
            attn,
            mlp_cache,
        },
    ))
}

/// Backprop through one attention layer. Returns (head projection grads,
/// MLP grads, gradient w.r.t. the layer input).
fn attention_layer_backward<S: Scalar>(
    layer: &AttentionLayer<S>,
    cache: &LayerCache<S>,
    d_out: &Tensor2<S>,
    scaled: bool,
) -> (Vec<Tensor2<S>>, MlpParams<S>, Tensor2<S>) {
    let n_heads = layer.head_projs.len();
    let d_head = layer.head_projs[0].cols();
    let (mlp_grads, d_concat) = layer.mlp.backward(&cache.mlp_cache, d_out);

    let mut d_input = Tensor2::zeros(cache.input.rows(), cache.input.cols());
    let mut proj_grads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let p = &cache.projs[h];
        let s = &cache.attn[h];
        let d_head_out = d_concat.columns(h * d_head, (h + 1) * d_head);

        // head_out = S · P
        let d_s = d_head_out.matmul_transpose_rhs(p);
        let mut d_p = s.transposed_matmul(&d_head_out);

        // softmax rows: dL[r] = (dS[r] - <dS[r], S[r]>) ⊙ S[r]
        let mut d_logits = Tensor2::zeros(d_s.rows(), d_s.cols());
        for r in 0..d_s.rows() {
            let sr = s.row(r);
            let dr = d_s.row(r);
            let dot: S = sr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            let out = d_logits.row_mut(r);
            for c in 0..sr.len() {
                out[c] = (dr[c] - dot) * sr[c];
            }
        }

        // logits = P Pᵀ / scale: dP += (dL + dLᵀ) P / scale
        let d_sym = {
            let mut m = d_logits.clone();
            let t = d_logits.transpose();
            m.add_scaled(&t, S::one());
            m
        };
        let inv_scale = if scaled {
            S::from_f64(1.0 / (d_head as f64).sqrt())
        } else {
            S::one()
        };
        let mut extra = d_sym.matmul(p);
        extra.scale(inv_scale);
        d_p.add_scaled(&extra, S::one());

        // P = F · W_h
        d_input.add_scaled(&d_p.matmul_transpose_rhs(&layer.head_projs[h]), S::one());
        proj_grads.push(cache.input.transposed_matmul(&d_p));
    }
    (proj_grads, mlp_grads, d_input)
}

/// Weighted-sum read-out over the final gene representations:
/// `h_i = Σ_t alpha(g_t) · f_t`, with `alpha = 1/T_i` in average mode.
pub fn read_out<S: Scalar>(
    readout: &Readout<S>,
    gene_reps: &Tensor2<S>,
    gene_idx: &[u32],
) -> Vec<S> {
    let t_i = gene_reps.rows();
    let mut h = vec![S::zero(); gene_reps.cols()];
    for t in 0..t_i {
        let alpha = match readout {
            Readout::Average => S::from_f64(1.0 / t_i as f64),
            Readout::Learned(a) => a[gene_idx[t] as usize],
        };
        for (hv, &f) in h.iter_mut().zip(gene_reps.row(t)) {
            *hv += alpha * f;
        }
    }
    h
}

// ── Whole-model forward/backward ───────────────────────────────────────────

/// Per-cell attention matrices captured for analysis: one row-stochastic
/// `T_i x T_i` matrix per (layer, head), together with the cell's expressed
/// gene indices.
#[derive(Clone, Debug)]
pub struct CellAttention<S> {
    pub gene_idx: Vec<u32>,
    pub matrices: Vec<Tensor2<S>>,
}

/// Output of a batched forward pass.
pub struct GeneBatchOutput<S> {
    /// One pooled representation h_i per cell (B x repr_width).
    pub h: Tensor2<S>,
    /// Class logits (B x C); `softmax` rows give q_phi(y|x).
    pub logits: Tensor2<S>,
    /// Attention matrices, present when capture was requested.
    pub attention: Option<Vec<CellAttention<S>>>,
}

struct CellForward<S> {
    e_cache: MlpCache<S>,
    layer_caches: Vec<LayerCache<S>>,
    final_reps: Tensor2<S>,
    h: Vec<S>,
    clf_cache: MlpCache<S>,
    logits: Vec<S>,
}

fn forward_one_cell<S: Scalar>(
    params: &GeneModelParams<S>,
    gene_idx: &[u32],
    values: &[f64],
    cell: usize,
) -> Result<CellForward<S>> {
    let (e, e_cache) = embed_cell_cached(params, gene_idx, values)
        .map_err(|err| Error::Validation(format!("cell {cell}: {err}")))?;
    let mut cur = e;
    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = attention_layer_cached(layer, &cur, params.config.scaled_attention)?;
        layer_caches.push(cache);
        cur = out;
    }
    let h = read_out(&params.readout, &cur, gene_idx);
    let h_row = Tensor2::from_vec(1, h.len(), h.clone());
    let (logits_row, clf_cache) = params.classifier.forward_cached(&h_row)?;
    logits_row.ensure_finite("classifier logits")?;
    Ok(CellForward {
        e_cache,
        layer_caches,
        final_reps: cur,
        h,
        clf_cache,
        logits: logits_row.row(0).to_vec(),
    })
}

/// Runs the model over `cells` (indices into `data`). Identical cells give
/// identical logits; set `capture_attention` to retrieve the per-layer
/// attention matrices for analysis.
pub fn gene_forward<S: Scalar>(
    params: &GeneModelParams<S>,
    data: &ProcessedMatrix,
    cells: &[usize],
    capture_attention: bool,
) -> Result<GeneBatchOutput<S>> {
    if cells.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let results: Vec<Result<(Vec<S>, Vec<S>, Option<CellAttention<S>>)>> = cells
        .par_iter()
        .with_min_len(GRAD_CHUNK)
        .map(|&ci| {
            let (gene_idx, values) = data.cell(ci);
            let fwd = forward_one_cell(params, gene_idx, values, ci)?;
            let att = capture_attention.then(|| CellAttention {
                gene_idx: gene_idx.to_vec(),
                matrices: fwd
                    .layer_caches
                    .iter()
                    .flat_map(|c| c.attn.iter().cloned())
                    .collect(),
            });
            Ok((fwd.h, fwd.logits, att))
        })
        .collect();

    let mut h = Tensor2::zeros(cells.len(), params.config.repr_width());
    let mut logits = Tensor2::zeros(cells.len(), params.config.n_classes);
    let mut attention = capture_attention.then(Vec::new);
    for (b, res) in results.into_iter().enumerate() {
        let (hc, lc, att) = res?;
        h.row_mut(b).copy_from_slice(&hc);
        logits.row_mut(b).copy_from_slice(&lc);
        if let (Some(list), Some(a)) = (attention.as_mut(), att) {
            list.push(a);
        }
    }
    Ok(GeneBatchOutput {
        h,
        logits,
        attention,
    })
}

fn backward_one_cell<S: Scalar>(
    params: &GeneModelParams<S>,
    gene_idx: &[u32],
    fwd: &CellForward<S>,
    d_logits: &[S],
    grads: &mut GeneModelParams<S>,
) {
    // classifier
    let d_logits_row = Tensor2::from_vec(1, d_logits.len(), d_logits.to_vec());
    let (clf_grads, d_h_row) = params.classifier.backward(&fwd.clf_cache, &d_logits_row);
    grads.classifier.add_assign_from(&clf_grads);
    let d_h = d_h_row.row(0);

    // read-out
    let t_i = gene_idx.len();
    let mut d_reps = Tensor2::zeros(t_i, fwd.final_reps.cols());
    match (&params.readout, &mut grads.readout) {
        (Readout::Average, _) => {
            let alpha = S::from_f64(1.0 / t_i as f64);
            for t in 0..t_i {
                for (d, &g) in d_reps.row_mut(t).iter_mut().zip(d_h) {
                    *d = alpha * g;
                }
            }
        }
        (Readout::Learned(alpha), Readout::Learned(d_alpha)) => {
            for t in 0..t_i {
                let g = gene_idx[t] as usize;
                let a = alpha[g];
                let rep = fwd.final_reps.row(t);
                let mut dot = S::zero();
                for ((d, &dh), &f) in d_reps.row_mut(t).iter_mut().zip(d_h).zip(rep) {
                    *d = a * dh;
                    dot += dh * f;
                }
                d_alpha[g] += dot;
            }
        }
        _ => unreachable!("readout/grad variant mismatch"),
    }

    // attention stack, last layer first
    let mut d_cur = d_reps;
    for (li, (layer, cache)) in params
        .layers
        .iter()
        .zip(&fwd.layer_caches)
        .enumerate()
        .rev()
    {
        let (proj_grads, mlp_grads, d_input) =
            attention_layer_backward(layer, cache, &d_cur, params.config.scaled_attention);
        for (pg, acc) in proj_grads.iter().zip(&mut grads.layers[li].head_projs) {
            acc.add_scaled(pg, S::one());
        }
        grads.layers[li].mlp.add_assign_from(&mlp_grads);
        d_cur = d_input;
    }

    // embedding: dE flows into the gene table and the count MLP
    for (t, &g) in gene_idx.iter().enumerate() {
        let row = grads.gene_embeddings.row_mut(g as usize);
        for (r, &d) in row.iter_mut().zip(d_cur.row(t)) {
            *r += d;
        }
    }
    let (cm_grads, _) = params.count_mlp.backward(&fwd.e_cache, &d_cur);
    grads.count_mlp.add_assign_from(&cm_grads);
}

/// Gradients of the weighted cross-entropy over a batch w.r.t. every
/// parameter. `weights[b]` multiplies cell b's loss term; pass
/// `1/batch_len` everywhere for a plain mean. Returns (loss, gradients).
pub fn gene_backward<S: Scalar>(
    params: &GeneModelParams<S>,
    data: &ProcessedMatrix,
    cells: &[usize],
    targets: &Tensor2<S>,
    weights: &[S],
) -> Result<(S, GeneModelParams<S>)> {
    if cells.len() != targets.rows() || cells.len() != weights.len() {
        return Err(Error::Shape("batch / target / weight length mismatch".into()));
    }
    let tuples: Vec<(usize, usize)> = cells.iter().copied().enumerate().collect();
    let partials: Vec<Result<(S, GeneModelParams<S>)>> = tuples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = params.zeros_like();
            let mut loss = S::zero();
            for &(b, ci) in chunk {
                let (gene_idx, values) = data.cell(ci);
                let fwd = forward_one_cell(params, gene_idx, values, ci)?;
                let logits = Tensor2::from_vec(1, fwd.logits.len(), fwd.logits.clone());
                let target = Tensor2::from_vec(1, targets.cols(), targets.row(b).to_vec());
                let (l, d_logits) =
                    cross_entropy_with_grad(&logits, &target, Some(&[weights[b]]))?;
                loss += l;
                backward_one_cell(params, gene_idx, &fwd, d_logits.row(0), &mut grads);
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = params.zeros_like();
    let mut loss = S::zero();
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("gene model loss".into()));
    }
    Ok((loss, total))
}

// small helper so accumulation reads naturally above
trait AddAssignFrom {
    fn add_assign_from(&mut self, other: &Self);
}
impl<S: Scalar> AddAssignFrom for MlpParams<S> {
    fn add_assign_from(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, S::one());
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

// ── Checkpointing ──────────────────────────────────────────────────────────

/// Gene-model checkpoint: parameters plus the metadata prediction needs
/// (class names and a hash of the kept-gene ids for provenance checks).
pub struct GeneCheckpoint<S> {
    pub params: GeneModelParams<S>,
    pub class_names: Vec<String>,
    pub gene_id_hash: u64,
}

impl<S: Scalar> GeneCheckpoint<S> {
    pub fn new(params: GeneModelParams<S>, class_names: Vec<String>, gene_ids: &[String]) -> Self {
        GeneCheckpoint {
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
        w.bytes(GENE_CKPT_MAGIC).map_err(io)?;
        for v in [
            cfg.n_genes as u32,
            cfg.embed_dim as u32,
            cfg.n_layers as u32,
            cfg.n_heads as u32,
            cfg.n_classes as u32,
            cfg.layer_width as u32,
            cfg.hidden_width as u32,
            u32::from(cfg.learned_readout),
            u32::from(cfg.scaled_attention),
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
        r.expect_magic(GENE_CKPT_MAGIC)?;
        let n_genes = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let layer_width = r.u32()? as usize;
        let hidden_width = r.u32()? as usize;
        let learned_readout = r.u32()? != 0;
        let scaled_attention = r.u32()? != 0;
        let class_names = r.str_list()?;
        let gene_id_hash = r.u64()?;

        let config = GeneModelConfig {
            n_genes,
            n_classes,
            embed_dim,
            layer_width,
            hidden_width,
            n_layers,
            n_heads,
            learned_readout,
            scaled_attention,
        };
        let mut params = GeneModelParams::<S>::zeros(config)?;
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
        if class_names.len() != n_classes {
            return Err(Error::Validation("class name count != C".into()));
        }
        Ok(GeneCheckpoint {
            params,
            class_names,
            gene_id_hash,
        })
    }
}
