//! Expression preprocessing: log2 fold change against a control group
//! and top-gene selection by mean absolute fold change.

use crate::error::{Error, Result};

/// `lfc_i = log2((sample_i + pseudo) / (mean_j control_ji + pseudo))`.
pub fn log2_fold_change(sample: &[f64], control: &[Vec<f64>], pseudo: f64) -> Result<Vec<f64>> {
    if pseudo <= 0.0 {
        return Err(Error::Parameter(format!("pseudo-count must be positive, got {pseudo}")));
    }
    if control.is_empty() {
        return Err(Error::Input("control group must contain at least one sample".into()));
    }
    for row in control {
        if row.len() != sample.len() {
            return Err(Error::dim("control gene count", sample.len(), row.len()));
        }
    }
    if sample.iter().chain(control.iter().flatten()).any(|&v| v < 0.0) {
        return Err(Error::Input("raw intensities must be nonnegative".into()));
    }
    let n = control.len() as f64;
    Ok(sample
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mean: f64 = control.iter().map(|row| row[i]).sum::<f64>() / n;
            ((s + pseudo) / (mean + pseudo)).log2()
        })
        .collect())
}

/// Rank genes by mean absolute log2 fold change across samples
/// (descending, ties by gene index) and return the top `k` indices.
pub fn select_top_genes(lfc_matrix: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if lfc_matrix.is_empty() {
        return Err(Error::Input("need at least one sample".into()));
    }
    let n_genes = lfc_matrix[0].len();
    for row in lfc_matrix {
        if row.len() != n_genes {
            return Err(Error::dim("gene count", n_genes, row.len()));
        }
    }
    if k > n_genes {
        return Err(Error::Parameter(format!("k={k} exceeds gene count {n_genes}")));
    }
    let n = lfc_matrix.len() as f64;
    let mut scored: Vec<(usize, f64)> = (0..n_genes)
        .map(|g| {
            let mean_abs = lfc_matrix.iter().map(|row| row[g].abs()).sum::<f64>() / n;
            (g, mean_abs)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(g, _)| g).collect())
}
