//! Synthetic benchmark data: Gaussian-style cluster classes mapped to
//! sparse counts. Used by the examples, the integration tests, and anyone
//! who wants a quick end-to-end run without real data.

use crate::data_ingest::{ExpressionMatrix, LabelSet};
use crate::error::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Knobs for the generator. Defaults give three well-separated classes with
/// per-cell library-size variation and Poisson noise.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_classes: usize,
    /// Baseline expression rate for non-marker genes.
    pub base_rate: f64,
    /// Rate of a class's marker genes.
    pub marker_rate: f64,
    /// Stddev of the per-cell log library-size factor.
    pub library_sigma: f64,
    /// Fraction of genes that fire at `noise_rate` in a random per-cell
    /// subset, independent of class (technical noise).
    pub noise_fraction: f64,
    pub noise_rate: f64,
    /// Per-cell probability that a marker gene is silenced (dropout).
    pub marker_dropout: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_cells: 600,
            n_genes: 100,
            n_classes: 3,
            base_rate: 0.3,
            marker_rate: 3.0,
            library_sigma: 0.3,
            noise_fraction: 0.0,
            noise_rate: 2.0,
            marker_dropout: 0.0,
        }
    }
}

/// Poisson sampling by inversion (Knuth); exact and fine for the small
/// rates used here.
fn poisson(rng: &mut impl Rng, lambda: f64) -> u64 {
    let l = (-lambda).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a fully labeled synthetic dataset. Each class elevates its own
/// block of marker genes (`n_genes / n_classes` of them) above the baseline;
/// counts are Poisson draws scaled by a per-cell library factor. Every cell
/// is guaranteed at least one nonzero count.
pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<(ExpressionMatrix, LabelSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let markers_per_class = config.n_genes / config.n_classes;

    let mut entries = Vec::new();
    let mut assignments = Vec::with_capacity(config.n_cells);
    for cell in 0..config.n_cells {
        let class = cell % config.n_classes;
        assignments.push(Some(class as u32));
        let library = (config.library_sigma * normal(&mut rng)).exp();
        let marker_lo = class * markers_per_class;
        let marker_hi = marker_lo + markers_per_class;

        let mut any = false;
        for gene in 0..config.n_genes {
            let is_marker = gene >= marker_lo && gene < marker_hi;
            let mut rate = if is_marker {
                if config.marker_dropout > 0.0 && rng.gen::<f64>() < config.marker_dropout {
                    config.base_rate
                } else {
                    config.marker_rate
                }
            } else {
                config.base_rate
            };
            // class-independent technical noise on a random per-cell subset
            if config.noise_fraction > 0.0 && rng.gen::<f64>() < config.noise_fraction {
                rate = rate.max(config.noise_rate);
            }
            let count = poisson(&mut rng, library * rate);
            if count > 0 {
                entries.push((cell as u32, gene as u32, count as f64));
                any = true;
            }
        }
        if !any {
            // force one marker count so normalization stays defined
            entries.push((cell as u32, marker_lo as u32, 1.0));
        }
    }

    let matrix = ExpressionMatrix::new(
        config.n_cells,
        config.n_genes,
        entries,
        (0..config.n_genes).map(|g| format!("gene_{g}")).collect(),
        (0..config.n_cells).map(|c| format!("cell_{c}")).collect(),
    )?;
    let classes = (0..config.n_classes).map(|c| format!("type_{c}")).collect();
    let labels = LabelSet::new(classes, assignments)?;
    Ok((matrix, labels))
}

/// Keeps a stratified `fraction` of the labels and marks the rest unlabeled;
/// returns the masked label set plus the hidden ground truth indices.
pub fn mask_labels(
    labels: &LabelSet,
    fraction: f64,
    seed: u64,
) -> (LabelSet, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut hidden = Vec::new();
    for class in 0..labels.n_classes() as u32 {
        let mut members: Vec<usize> = (0..labels.n_cells())
            .filter(|&i| labels.label_of(i) == Some(class))
            .collect();
        members.shuffle(&mut rng);
        let n_keep = ((members.len() as f64) * fraction).round().max(1.0) as usize;
        hidden.extend(members.into_iter().skip(n_keep));
    }
    hidden.sort_unstable();
    let masked = labels.mask_unlabeled(&hidden);
    (masked, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let cfg = SyntheticConfig {
            n_cells: 30,
            n_genes: 20,
            ..Default::default()
        };
        let (m1, l1) = generate(&cfg, 7).unwrap();
        let (m2, l2) = generate(&cfg, 7).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        let (m3, _) = generate(&cfg, 8).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn every_cell_expresses_something() {
        let cfg = SyntheticConfig {
            n_cells: 50,
            n_genes: 10,
            base_rate: 0.05,
            marker_rate: 0.2,
            ..Default::default()
        };
        let (m, _) = generate(&cfg, 3).unwrap();
        assert_eq!(m.n_cells, 50);
        assert_eq!(m.dropped_cells, 0);
    }

    #[test]
    fn mask_keeps_stratified_fraction() {
        let cfg = SyntheticConfig {
            n_cells: 90,
            ..Default::default()
        };
        let (_, labels) = generate(&cfg, 1).unwrap();
        let (masked, hidden) = mask_labels(&labels, 0.1, 1);
        assert_eq!(masked.labeled_cells().len(), 9);
        assert_eq!(hidden.len(), 81);
        for class in 0..3u32 {
            let kept = masked
                .labeled_cells()
                .iter()
                .filter(|&&i| masked.label_of(i) == Some(class))
                .count();
            assert_eq!(kept, 3);
        }
    }
}
