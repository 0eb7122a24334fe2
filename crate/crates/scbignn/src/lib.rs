//! Bilevel graph learning for cell type classification on scRNA-seq
//! expression matrices.
//!
//! Two models are trained alternately under an EM scheme and exchange
//! pseudo-labels:
//!
//! - a **gene-level model** (`q_phi`, [`gene_gnn`]) runs self-attention over
//!   each cell's expressed genes and pools them into a cell representation;
//! - a **cell-level model** (`p_theta`, [`cell_gnn`]) aggregates features
//!   over a kNN graph built from those representations.
//!
//! [`data_ingest`] loads and normalizes expression matrices, [`em_trainer`]
//! orchestrates pretraining and the alternating E/M phases, [`analysis`]
//! computes gene-importance and homophily reports, and [`numerics`] provides
//! the framework-free tensor/optimizer layer everything sits on.
//!
//! Start with the runnable programs in `examples/` — there is one per major
//! capability — or the `scbignn` binary for the file-based pipeline.

pub mod analysis;
pub mod cell_gnn;
pub mod cli;
pub mod data_ingest;
pub mod em_trainer;
pub mod error;
pub mod gene_gnn;
mod io_util;
pub mod numerics;
pub mod synthetic;

pub use error::{Error, Result};
