//! Loading raw expression matrices and labels, normalization, top-T
//! variable-gene selection, and stratified fold splitting.
//!
//! Two input formats are supported: matrix-market coordinate files
//! (`%%MatrixMarket matrix coordinate integer general`, rows = cells,
//! columns = genes) and dense CSV (first row gene ids, first column cell
//! ids). Matrix-market files carry no identifiers, so `cell_{i}` /
//! `gene_{j}` names are synthesized (0-based).

use crate::error::{Error, Result};
use crate::io_util::{BinReader, BinWriter};
use crate::numerics::{Scalar, Tensor2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Default scaling constant `s` in the per-cell normalization.
pub const DEFAULT_SCALING: f64 = 1e6;

/// Magic bytes opening a processed-matrix artifact.
pub const ARTIFACT_MAGIC: &[u8] = b"SCBG1";

// ── Raw matrix ─────────────────────────────────────────────────────────────

/// Sparse cells×genes count matrix with gene and cell identifiers.
/// Entries are sorted by (cell, gene) and duplicate-free; counts are
/// nonnegative. Cells whose rows were entirely zero are dropped at load
/// time (`dropped_cells` records how many).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    pub n_cells: usize,
    pub n_genes: usize,
    entries: Vec<(u32, u32, f64)>,
    pub gene_ids: Vec<String>,
    pub cell_ids: Vec<String>,
    pub dropped_cells: usize,
}

impl ExpressionMatrix {
    /// Validates and canonicalizes a triplet list (sorts, checks bounds,
    /// rejects duplicates and negative counts, drops all-zero cells).
    pub fn new(
        n_cells: usize,
        n_genes: usize,
        mut entries: Vec<(u32, u32, f64)>,
        gene_ids: Vec<String>,
        cell_ids: Vec<String>,
    ) -> Result<Self> {
        if gene_ids.len() != n_genes || cell_ids.len() != n_cells {
            return Err(Error::Validation("id list length != declared dimension".into()));
        }
        for &(c, g, v) in &entries {
            if c as usize >= n_cells || g as usize >= n_genes {
                return Err(Error::Validation(format!("entry ({c},{g}) out of bounds")));
            }
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("negative or non-finite count at ({c},{g}): {v}")));
            }
        }
        entries.sort_unstable_by_key(|&(c, g, _)| (c, g));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Validation(format!(
                    "duplicate entry for (cell {}, gene {})",
                    w[0].0, w[0].1
                )));
            }
        }
        // zero-valued entries carry no information; drop them so "expressed"
        // always means count > 0
        entries.retain(|&(_, _, v)| v > 0.0);

        let mut has_count = vec![false; n_cells];
        for &(c, _, _) in &entries {
            has_count[c as usize] = true;
        }
        let dropped = has_count.iter().filter(|&&h| !h).count();
        if dropped > 0 {
            log::warn!("dropping {dropped} all-zero cell rows at load time");
            let mut remap = vec![u32::MAX; n_cells];
            let mut kept_ids = Vec::with_capacity(n_cells - dropped);
            let mut next = 0u32;
            for (i, &keep) in has_count.iter().enumerate() {
                if keep {
                    remap[i] = next;
                    next += 1;
                    kept_ids.push(cell_ids[i].clone());
                }
            }
            let entries = entries
                .into_iter()
                .map(|(c, g, v)| (remap[c as usize], g, v))
                .collect();
            return Ok(ExpressionMatrix {
                n_cells: n_cells - dropped,
                n_genes,
                entries,
                gene_ids,
                cell_ids: kept_ids,
                dropped_cells: dropped,
            });
        }
        Ok(ExpressionMatrix {
            n_cells,
            n_genes,
            entries,
            gene_ids,
            cell_ids,
            dropped_cells: 0,
        })
    }

    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Sum of counts per cell row.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cells];
        for &(c, _, v) in &self.entries {
            sums[c as usize] += v;
        }
        sums
    }
}

/// Supported on-disk layouts for raw matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    /// `%%MatrixMarket matrix coordinate integer general`, 1-indexed triplets.
    MatrixMarket,
    /// Dense CSV: header row of gene ids, first column cell ids.
    DenseCsv,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads an expression matrix from disk.
pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<ExpressionMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        MatrixFormat::MatrixMarket => load_matrix_market(reader, path),
        MatrixFormat::DenseCsv => load_dense_csv(reader, path),
    }
}

fn load_matrix_market(reader: impl BufRead, path: &Path) -> Result<ExpressionMatrix> {
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let head_fields: Vec<&str> = header.split_whitespace().collect();
    if head_fields.len() < 4
        || !head_fields[0].eq_ignore_ascii_case("%%MatrixMarket")
        || !head_fields[1].eq_ignore_ascii_case("matrix")
        || !head_fields[2].eq_ignore_ascii_case("coordinate")
        || !(head_fields[3].eq_ignore_ascii_case("integer")
            || head_fields[3].eq_ignore_ascii_case("real"))
    {
        return Err(parse_err(
            path,
            1,
            format!("expected '%%MatrixMarket matrix coordinate integer|real general' header, found '{header}'"),
        ));
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(u32, u32, f64)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if dims.is_none() {
            if fields.len() != 3 {
                return Err(parse_err(path, lineno, "size line must be 'rows cols nnz'"));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad integer '{s}'")))
            };
            dims = Some((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
            continue;
        }
        if fields.len() != 3 {
            return Err(parse_err(path, lineno, "entry line must be 'row col value'"));
        }
        let (n_cells, n_genes, _) = dims.unwrap();
        let row: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad row index '{}'", fields[0])))?;
        let col: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad column index '{}'", fields[1])))?;
        let val: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad value '{}'", fields[2])))?;
        if row == 0 || col == 0 || row > n_cells || col > n_genes {
            return Err(parse_err(path, lineno, format!("index ({row},{col}) out of bounds (1-indexed)")));
        }
        if val < 0.0 {
            return Err(parse_err(path, lineno, format!("negative count {val}")));
        }
        entries.push(((row - 1) as u32, (col - 1) as u32, val));
    }

    let (n_cells, n_genes, nnz) = dims.ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    if entries.len() != nnz {
        log::warn!(
            "{}: size line declared {nnz} entries, found {}",
            path.display(),
            entries.len()
        );
    }
    let gene_ids = (0..n_genes).map(|j| format!("gene_{j}")).collect();
    let cell_ids = (0..n_cells).map(|i| format!("cell_{i}")).collect();
    ExpressionMatrix::new(n_cells, n_genes, entries, gene_ids, cell_ids)
}

fn load_dense_csv(reader: impl BufRead, path: &Path) -> Result<ExpressionMatrix> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    if header.trim().is_empty() {
        return Err(parse_err(path, 1, "empty header row"));
    }
    let mut gene_ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if gene_ids.len() < 2 {
        return Err(parse_err(path, 1, "header must contain at least one gene id"));
    }
    gene_ids.remove(0); // corner field above the cell-id column
    let n_genes = gene_ids.len();

    let mut cell_ids = Vec::new();
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let cell_id = fields
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing cell id"))?
            .trim()
            .to_string();
        let row = cell_ids.len() as u32;
        let mut n_vals = 0usize;
        for (j, field) in fields.enumerate() {
            n_vals += 1;
            if j >= n_genes {
                break;
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad count '{}'", field.trim())))?;
            if v < 0.0 {
                return Err(parse_err(path, lineno, format!("negative count {v}")));
            }
            if v != 0.0 {
                entries.push((row, j as u32, v));
            }
        }
        if n_vals != n_genes {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {n_genes} counts, found {n_vals}"),
            ));
        }
        cell_ids.push(cell_id);
    }
    if cell_ids.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let n_cells = cell_ids.len();
    ExpressionMatrix::new(n_cells, n_genes, entries, gene_ids, cell_ids)
}

/// Writes a matrix back out in matrix-market form (counts formatted as
/// integers when they are integral). Used for round-trip checks and
/// fixture generation.
pub fn write_matrix_market(x: &ExpressionMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    };
    write(&mut w, "%%MatrixMarket matrix coordinate integer general\n".into())?;
    write(&mut w, format!("{} {} {}\n", x.n_cells, x.n_genes, x.nnz()))?;
    for &(c, g, v) in &x.entries {
        if v.fract() == 0.0 {
            write(&mut w, format!("{} {} {}\n", c + 1, g + 1, v as i64))?;
        } else {
            write(&mut w, format!("{} {} {}\n", c + 1, g + 1, v))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ── Normalization and gene selection ───────────────────────────────────────

/// Per-entry normalized values `ln(1 + s * X_ij / Σ_m X_im)`, aligned with
/// `x.entries()`. Zero counts stay zero, so the sparsity pattern is
/// untouched.
pub fn normalize(x: &ExpressionMatrix, s: f64) -> Result<Vec<f64>> {
    if s <= 0.0 {
        return Err(Error::Validation(format!("scaling s must be positive, got {s}")));
    }
    let sums = x.row_sums();
    for (i, &sum) in sums.iter().enumerate() {
        if sum <= 0.0 {
            return Err(Error::Validation(format!(
                "cell '{}' has all-zero counts; filter it before normalizing",
                x.cell_ids[i]
            )));
        }
    }
    Ok(x
        .entries
        .iter()
        .map(|&(c, _, v)| (s * v / sums[c as usize]).ln_1p())
        .collect())
}

/// Sparse normalized matrix restricted to the selected genes, stored CSR by
/// cell. Kept genes are ordered by descending variance (ties by ascending
/// original index) and re-indexed 0..T-1 in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedMatrix {
    pub n_cells: usize,
    pub n_genes_kept: usize,
    pub scaling: f64,
    pub kept_gene_ids: Vec<String>,
    pub cell_ids: Vec<String>,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl ProcessedMatrix {
    /// Builds a processed matrix over an explicit kept-gene list (original
    /// gene indices, in kept order) from a raw matrix and its normalized
    /// values.
    pub fn from_parts(
        x: &ExpressionMatrix,
        normalized: &[f64],
        kept: &[u32],
        scaling: f64,
    ) -> Result<Self> {
        if normalized.len() != x.nnz() {
            return Err(Error::Shape(
                "normalized values do not align with entries".into(),
            ));
        }
        let mut remap = vec![u32::MAX; x.n_genes];
        for (new_idx, &old_idx) in kept.iter().enumerate() {
            if old_idx as usize >= x.n_genes {
                return Err(Error::Validation(format!("kept gene {old_idx} out of range")));
            }
            remap[old_idx as usize] = new_idx as u32;
        }

        let mut per_cell: Vec<Vec<(u32, f64)>> = vec![Vec::new(); x.n_cells];
        for (&(c, g, _), &v) in x.entries.iter().zip(normalized) {
            let ng = remap[g as usize];
            if ng != u32::MAX {
                per_cell[c as usize].push((ng, v));
            }
        }
        let mut row_ptr = Vec::with_capacity(x.n_cells + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        let mut empty_cells = 0usize;
        for cell in &mut per_cell {
            cell.sort_unstable_by_key(|&(g, _)| g);
            if cell.is_empty() {
                empty_cells += 1;
            }
            for &(g, v) in cell.iter() {
                col_idx.push(g);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        if empty_cells > 0 {
            log::warn!("{empty_cells} cells express none of the kept genes");
        }

        Ok(ProcessedMatrix {
            n_cells: x.n_cells,
            n_genes_kept: kept.len(),
            scaling,
            kept_gene_ids: kept
                .iter()
                .map(|&g| x.gene_ids[g as usize].clone())
                .collect(),
            cell_ids: x.cell_ids.clone(),
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Gene indices (strictly increasing) and normalized values expressed in
    /// cell `i`.
    pub fn cell(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Densifies all cells into an `n_cells x n_genes_kept` matrix.
    pub fn to_dense<S: Scalar>(&self) -> Tensor2<S> {
        let mut out = Tensor2::zeros(self.n_cells, self.n_genes_kept);
        for i in 0..self.n_cells {
            let (cols, vals) = self.cell(i);
            let row = out.row_mut(i);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] = S::from_f64(v);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BinWriter::new(BufWriter::new(file));
        let io = |e: std::io::Error| Error::io(path, e);
        w.bytes(ARTIFACT_MAGIC).map_err(io)?;
        w.u64(self.n_cells as u64).map_err(io)?;
        w.u32(self.n_genes_kept as u32).map_err(io)?;
        w.f64(self.scaling).map_err(io)?;
        w.str_list(&self.kept_gene_ids).map_err(io)?;
        w.str_list(&self.cell_ids).map_err(io)?;
        w.u64(self.values.len() as u64).map_err(io)?;
        for &p in &self.row_ptr {
            w.u64(p as u64).map_err(io)?;
        }
        for &c in &self.col_idx {
            w.u32(c).map_err(io)?;
        }
        w.f64_slice(&self.values).map_err(io)?;
        w.into_inner().flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BinReader::new(BufReader::new(file), path);
        r.expect_magic(ARTIFACT_MAGIC)?;
        let n_cells = r.u64()? as usize;
        let n_genes_kept = r.u32()? as usize;
        let scaling = r.f64()?;
        let kept_gene_ids = r.str_list()?;
        let cell_ids = r.str_list()?;
        let nnz = r.u64()? as usize;
        let mut row_ptr = Vec::with_capacity(n_cells + 1);
        for _ in 0..=n_cells {
            row_ptr.push(r.u64()? as usize);
        }
        let mut col_idx = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            col_idx.push(r.u32()?);
        }
        let values = r.f64_vec(nnz)?;
        if kept_gene_ids.len() != n_genes_kept
            || cell_ids.len() != n_cells
            || row_ptr.last() != Some(&nnz)
        {
            return Err(Error::Validation(format!(
                "artifact {} is internally inconsistent",
                path.display()
            )));
        }
        Ok(ProcessedMatrix {
            n_cells,
            n_genes_kept,
            scaling,
            kept_gene_ids,
            cell_ids,
            row_ptr,
            col_idx,
            values,
        })
    }
}

/// Ranks genes by population variance of their normalized values across all
/// cells and keeps the top `t` (zero-variance genes are never kept). Returns
/// the processed matrix over the kept genes.
///
/// `normalized` must align with `x.entries()` (see [`normalize`]).
pub fn select_top_variance(
    x: &ExpressionMatrix,
    normalized: &[f64],
    t: usize,
    scaling: f64,
) -> Result<ProcessedMatrix> {
    if t == 0 {
        return Err(Error::Validation("T must be >= 1".into()));
    }
    if normalized.len() != x.nnz() {
        return Err(Error::Shape("normalized values do not align with entries".into()));
    }
    let kept = rank_genes_by_variance(x, normalized, t, x.n_cells)?;
    ProcessedMatrix::from_parts(x, normalized, &kept, scaling)
}

/// Original gene indices ranked by descending variance, truncated to `t`.
fn rank_genes_by_variance(
    x: &ExpressionMatrix,
    normalized: &[f64],
    t: usize,
    n_cells: usize,
) -> Result<Vec<u32>> {
    let mut sum = vec![0.0f64; x.n_genes];
    let mut sum_sq = vec![0.0f64; x.n_genes];
    for (&(_, g, _), &v) in x.entries.iter().zip(normalized) {
        sum[g as usize] += v;
        sum_sq[g as usize] += v * v;
    }
    let n = n_cells as f64;
    let mut ranked: Vec<(u32, f64)> = (0..x.n_genes)
        .filter_map(|g| {
            let mean = sum[g] / n;
            let var = (sum_sq[g] / n - mean * mean).max(0.0);
            // genes never expressed, or expressed with identical value in
            // every cell, carry no signal
            if var > 0.0 {
                Some((g as u32, var))
            } else {
                None
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if t > ranked.len() {
        log::warn!(
            "requested T={t} genes but only {} have nonzero variance; keeping all",
            ranked.len()
        );
    }
    ranked.truncate(t);
    Ok(ranked.into_iter().map(|(g, _)| g).collect())
}

// ── Labels ─────────────────────────────────────────────────────────────────

/// Class names plus a per-cell assignment (`None` = unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub classes: Vec<String>,
    assignments: Vec<Option<u32>>,
}

impl LabelSet {
    pub fn new(classes: Vec<String>, assignments: Vec<Option<u32>>) -> Result<Self> {
        let c = classes.len() as u32;
        for a in assignments.iter().flatten() {
            if *a >= c {
                return Err(Error::Validation(format!("class index {a} out of range (C={c})")));
            }
        }
        Ok(LabelSet { classes, assignments })
    }

    pub fn n_cells(&self) -> usize {
        self.assignments.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn label_of(&self, cell: usize) -> Option<u32> {
        self.assignments[cell]
    }

    pub fn labeled_cells(&self) -> Vec<usize> {
        (0..self.n_cells()).filter(|&i| self.assignments[i].is_some()).collect()
    }

    pub fn unlabeled_cells(&self) -> Vec<usize> {
        (0..self.n_cells()).filter(|&i| self.assignments[i].is_none()).collect()
    }

    /// Copy with the given cells forced to unlabeled (fold held out as test).
    pub fn mask_unlabeled(&self, cells: &[usize]) -> LabelSet {
        let mut assignments = self.assignments.clone();
        for &c in cells {
            assignments[c] = None;
        }
        LabelSet {
            classes: self.classes.clone(),
            assignments,
        }
    }
}

/// Reads a `cell_id,class_name` CSV and matches rows against `cell_ids` by
/// exact string comparison. Unknown or duplicate cell ids are hard errors;
/// cells absent from the file end up unlabeled.
pub fn load_labels(path: &Path, cell_ids: &[String]) -> Result<LabelSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut index_of = std::collections::HashMap::with_capacity(cell_ids.len());
    for (i, id) in cell_ids.iter().enumerate() {
        index_of.insert(id.as_str(), i);
    }

    let mut pairs: Vec<(usize, String)> = Vec::new();
    let mut seen = vec![false; cell_ids.len()];
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (cell, class) = trimmed
            .split_once(',')
            .ok_or_else(|| parse_err(path, lineno, "expected 'cell_id,class_name'"))?;
        let cell = cell.trim();
        let class = class.trim();
        if lineno == 1 && !index_of.contains_key(cell) && cell.eq_ignore_ascii_case("cell_id") {
            continue; // optional header row
        }
        let &i = index_of.get(cell).ok_or_else(|| {
            parse_err(path, lineno, format!("cell id '{cell}' not present in the matrix"))
        })?;
        if seen[i] {
            return Err(parse_err(path, lineno, format!("cell id '{cell}' labeled twice")));
        }
        seen[i] = true;
        if class.is_empty() {
            return Err(parse_err(path, lineno, "empty class name"));
        }
        pairs.push((i, class.to_string()));
    }

    let mut classes: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
    classes.sort();
    classes.dedup();
    let class_idx = |name: &str| classes.iter().position(|c| c == name).unwrap() as u32;

    let mut assignments = vec![None; cell_ids.len()];
    for (i, class) in &pairs {
        assignments[*i] = Some(class_idx(class));
    }
    LabelSet::new(classes, assignments)
}

/// Writes a `cell_id,class_name` CSV (fixture generation and round trips).
pub fn write_labels(labels: &LabelSet, cell_ids: &[String], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, id) in cell_ids.iter().enumerate() {
        if let Some(c) = labels.label_of(i) {
            writeln!(w, "{},{}", id, labels.classes[c as usize]).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ── Fold splitting ─────────────────────────────────────────────────────────

/// Stratified fold assignment: one fold index per cell. Cells of each class
/// are shuffled and dealt round-robin so per-class fold sizes differ by at
/// most one; unlabeled cells form their own stratum.
pub fn split_folds(labels: &LabelSet, k_folds: usize, seed: u64) -> Result<Vec<u32>> {
    if k_folds < 2 {
        return Err(Error::Validation(format!("k_folds must be >= 2, got {k_folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u32; labels.n_cells()];

    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); labels.n_classes() + 1];
    for i in 0..labels.n_cells() {
        match labels.label_of(i) {
            Some(c) => strata[c as usize].push(i),
            None => strata[labels.n_classes()].push(i),
        }
    }

    for (si, stratum) in strata.iter_mut().enumerate() {
        if si < labels.n_classes() && !stratum.is_empty() && stratum.len() < k_folds {
            log::warn!(
                "class '{}' has only {} members for {k_folds} folds; distributing best-effort",
                labels.classes[si],
                stratum.len()
            );
        }
        stratum.shuffle(&mut rng);
        // rotate the starting fold per stratum so small strata do not all
        // land in fold 0
        for (j, &cell) in stratum.iter().enumerate() {
            assignment[cell] = ((j + si) % k_folds) as u32;
        }
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn tiny_csv() -> &'static str {
        "cell_id,gA,gB,gC\nc1,1,0,2\nc2,0,0,5\n"
    }

    #[test]
    fn dense_csv_sparse_entries() {
        let m = load_dense_csv(Cursor::new(tiny_csv()), Path::new("t.csv")).unwrap();
        assert_eq!(m.n_cells, 2);
        assert_eq!(m.n_genes, 3);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.entries(), &[(0, 0, 1.0), (0, 2, 2.0), (1, 2, 5.0)]);
        assert_eq!(m.gene_ids, vec!["gA", "gB", "gC"]);
    }

    #[test]
    fn empty_file_is_parse_error() {
        let err = load_dense_csv(Cursor::new(""), Path::new("t.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = load_matrix_market(Cursor::new(""), Path::new("t.mtx")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn negative_count_rejected() {
        let csv = "id,g1\nc1,-3\n";
        assert!(load_dense_csv(Cursor::new(csv), Path::new("t.csv")).is_err());
    }

    #[test]
    fn matrix_market_round_trip() {
        let mm = "%%MatrixMarket matrix coordinate integer general\n% comment\n3 4 3\n1 1 5\n2 3 1\n3 4 2\n";
        let m = load_matrix_market(Cursor::new(mm), Path::new("t.mtx")).unwrap();
        assert_eq!(m.n_cells, 3);
        assert_eq!(m.n_genes, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.mtx");
        write_matrix_market(&m, &path).unwrap();
        let m2 = load_matrix(&path, MatrixFormat::MatrixMarket).unwrap();
        assert_eq!(m.entries(), m2.entries());
    }

    #[test]
    fn all_zero_cells_dropped_at_load() {
        let csv = "id,g1,g2\nc1,1,0\nc2,0,0\nc3,0,3\n";
        let m = load_dense_csv(Cursor::new(csv), Path::new("t.csv")).unwrap();
        assert_eq!(m.n_cells, 2);
        assert_eq!(m.dropped_cells, 1);
        assert_eq!(m.cell_ids, vec!["c1", "c3"]);
        assert_eq!(m.entries(), &[(0, 0, 1.0), (1, 1, 3.0)]);
    }

    #[test]
    fn normalize_formula_frozen_value() {
        // cell row sums to 100, entry 10, s=1e6 -> ln(1 + 1e5)
        let m = ExpressionMatrix::new(
            1,
            2,
            vec![(0, 0, 10.0), (0, 1, 90.0)],
            vec!["a".into(), "b".into()],
            vec!["c".into()],
        )
        .unwrap();
        let v = normalize(&m, 1e6).unwrap();
        assert!((v[0] - 100001f64.ln()).abs() < 1e-12);
        assert!((v[0] - 11.51293546492023).abs() < 1e-10);
    }

    #[test]
    fn normalize_equal_counts_equal_values() {
        let m = ExpressionMatrix::new(
            1,
            3,
            vec![(0, 0, 4.0), (0, 1, 4.0), (0, 2, 2.0)],
            vec!["a".into(), "b".into(), "c".into()],
            vec!["c0".into()],
        )
        .unwrap();
        let v = normalize(&m, 1e6).unwrap();
        assert_eq!(v[0], v[1]);
        assert!(v[2] < v[0], "monotone within cell");
    }

    #[test]
    fn normalize_rejects_zero_row() {
        // bypass the loader's dropping by constructing directly
        let m = ExpressionMatrix {
            n_cells: 2,
            n_genes: 1,
            entries: vec![(0, 0, 1.0)],
            gene_ids: vec!["g".into()],
            cell_ids: vec!["c0".into(), "dead".into()],
            dropped_cells: 0,
        };
        let err = normalize(&m, 1e6).unwrap_err();
        assert!(err.to_string().contains("dead"));
    }

    fn matrix_from_dense(rows: &[&[f64]]) -> ExpressionMatrix {
        let n_cells = rows.len();
        let n_genes = rows[0].len();
        let mut entries = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    entries.push((i as u32, j as u32, v));
                }
            }
        }
        ExpressionMatrix::new(
            n_cells,
            n_genes,
            entries,
            (0..n_genes).map(|j| format!("g{j}")).collect(),
            (0..n_cells).map(|i| format!("c{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_variance_gene_excluded() {
        // gene 0 constant everywhere, gene 1 varying; T=1 keeps gene 1
        let m = matrix_from_dense(&[&[5.0, 1.0], &[5.0, 9.0]]);
        let norm = normalize(&m, 100.0).unwrap();
        let p = select_top_variance(&m, &norm, 1, 100.0).unwrap();
        assert_eq!(p.kept_gene_ids, vec!["g1"]);
    }

    #[test]
    fn variance_tie_breaks_by_ascending_index() {
        // genes 1 and 2 identical variance (mirrored columns), gene 0 lower
        let m = matrix_from_dense(&[
            &[4.0, 9.0, 1.0],
            &[5.0, 1.0, 9.0],
            &[4.0, 9.0, 1.0],
            &[5.0, 1.0, 9.0],
        ]);
        let norm = normalize(&m, 10.0).unwrap();
        let p = select_top_variance(&m, &norm, 2, 10.0).unwrap();
        assert_eq!(p.kept_gene_ids, vec!["g1", "g2"]);
    }

    #[test]
    fn selection_invariant_to_gene_permutation() {
        let m = matrix_from_dense(&[&[1.0, 7.0, 3.0], &[2.0, 1.0, 8.0], &[1.5, 4.0, 5.0]]);
        let norm = normalize(&m, 1e4).unwrap();
        let p = select_top_variance(&m, &norm, 2, 1e4).unwrap();

        // permute gene columns: swap 0 and 2
        let m2 = matrix_from_dense(&[&[3.0, 7.0, 1.0], &[8.0, 1.0, 2.0], &[5.0, 4.0, 1.5]]);
        let m2 = ExpressionMatrix {
            gene_ids: vec!["g2".into(), "g1".into(), "g0".into()],
            ..m2
        };
        let norm2 = normalize(&m2, 1e4).unwrap();
        let p2 = select_top_variance(&m2, &norm2, 2, 1e4).unwrap();
        let mut a = p.kept_gene_ids.clone();
        let mut b = p2.kept_gene_ids.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn t_larger_than_surviving_keeps_all() {
        let m = matrix_from_dense(&[&[1.0, 2.0], &[3.0, 2.0]]);
        let norm = normalize(&m, 10.0).unwrap();
        // gene 1 has equal normalized values? counts equal but row sums differ
        // -> normalized values differ, so both genes survive
        let p = select_top_variance(&m, &norm, 10, 10.0).unwrap();
        assert!(p.n_genes_kept <= 2);
    }

    #[test]
    fn artifact_round_trip_is_exact() {
        let m = matrix_from_dense(&[&[1.0, 7.0, 3.0], &[2.0, 1.0, 8.0]]);
        let norm = normalize(&m, 1e6).unwrap();
        let p = select_top_variance(&m, &norm, 3, 1e6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.scbg");
        p.save(&path).unwrap();
        let q = ProcessedMatrix::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn labels_round_trip_and_matching() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, "c1,beta\nc3,alpha\n").unwrap();
        let cell_ids = vec!["c1".to_string(), "c2".to_string(), "c3".to_string()];
        let l = load_labels(&path, &cell_ids).unwrap();
        assert_eq!(l.classes, vec!["alpha", "beta"]);
        assert_eq!(l.label_of(0), Some(1));
        assert_eq!(l.label_of(1), None);
        assert_eq!(l.label_of(2), Some(0));
        assert_eq!(l.labeled_cells(), vec![0, 2]);
        assert_eq!(l.unlabeled_cells(), vec![1]);
    }

    #[test]
    fn unknown_cell_id_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, "ghost,beta\n").unwrap();
        let err = load_labels(&path, &["c1".to_string()]).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn exact_stratification_two_classes() {
        // 10 cells, 2 classes of 5, k=5 -> each fold has one of each class
        let assignments: Vec<Option<u32>> =
            (0..10).map(|i| Some((i % 2) as u32)).collect();
        let labels = LabelSet::new(vec!["a".into(), "b".into()], assignments).unwrap();
        let folds = split_folds(&labels, 5, 42).unwrap();
        for f in 0..5u32 {
            let members: Vec<usize> = (0..10).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 2);
            let classes: Vec<u32> = members.iter().map(|&i| labels.label_of(i).unwrap()).collect();
            assert!(classes.contains(&0) && classes.contains(&1));
        }
    }

    #[test]
    fn folds_deterministic_given_seed() {
        let assignments: Vec<Option<u32>> = (0..37).map(|i| Some((i % 3) as u32)).collect();
        let labels =
            LabelSet::new(vec!["a".into(), "b".into(), "c".into()], assignments).unwrap();
        let f1 = split_folds(&labels, 5, 7).unwrap();
        let f2 = split_folds(&labels, 5, 7).unwrap();
        assert_eq!(f1, f2);
        let f3 = split_folds(&labels, 5, 8).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn folds_partition_cells_exactly() {
        let assignments: Vec<Option<u32>> = (0..100)
            .map(|i| if i % 7 == 0 { None } else { Some((i % 4) as u32) })
            .collect();
        let labels = LabelSet::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            assignments,
        )
        .unwrap();
        let folds = split_folds(&labels, 5, 3).unwrap();
        assert_eq!(folds.len(), 100);
        assert!(folds.iter().all(|&f| f < 5));
        // every cell in exactly one fold is implied by the Vec representation;
        // check sizes are balanced within one
        let mut sizes = [0usize; 5];
        for &f in &folds {
            sizes[f as usize] += 1;
        }
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(max - min <= 5, "sizes {sizes:?}");
    }
}
