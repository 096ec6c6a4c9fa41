//! Post-hoc analysis: RankMe smooth rank of an embedding matrix,
//! Integrated Gradients gene attribution through the expression
//! encoder, top-gene frequency tables, and attention heatmap export.

use crate::dataio::formats::ExpressionProfile;
use crate::encoders::expression_graph;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::training::ModelCheckpoint;
use std::io::Write;
use std::path::Path;

/// Smooth-rank report for an n×d embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub smooth_rank: f64,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix; returns
/// eigenvalues in descending order.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let d = a.len();
    if d == 1 {
        return vec![a[0][0]];
    }
    let frob: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-15 * frob.max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= tol / (d as f64) {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// RankMe: exp of the entropy of the L1-normalized singular values of
/// the embedding matrix, each shifted by `epsilon`.
pub fn rankme(embeddings: &Tensor<f64>, epsilon: f64) -> Result<RankReport> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if d == 0 || n <= d {
        return Err(Error::Input(format!(
            "rankme requires n > d ≥ 1, got n = {n}, d = {d}"
        )));
    }
    if !embeddings.all_finite() {
        return Err(Error::Numeric("rankme: embedding matrix contains non-finite values".into()));
    }
    if embeddings.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Input("rankme: all-zero embedding matrix has no spectrum".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    // d×d Gram matrix HᵀH; its eigenvalues are the squared singular values
    let mut gram = vec![vec![0.0f64; d]; d];
    for i in 0..n {
        let row = embeddings.row(i);
        for p in 0..d {
            for q in p..d {
                gram[p][q] += row[p] * row[q];
            }
        }
    }
    for p in 0..d {
        for q in 0..p {
            gram[p][q] = gram[q][p];
        }
    }
    let singular_values: Vec<f64> =
        jacobi_eigenvalues(gram).into_iter().map(|l| l.max(0.0).sqrt()).collect();
    let l1: f64 = singular_values.iter().sum();
    let mut entropy = 0.0;
    for &s in &singular_values {
        let p = s / l1 + epsilon;
        entropy -= p * p.ln();
    }
    Ok(RankReport { smooth_rank: entropy.exp(), singular_values, n, d })
}

pub fn rank_report_csv(report: &RankReport) -> String {
    let mut out = format!("n,d,smooth_rank\n{},{},{}\n", report.n, report.d, report.smooth_rank);
    out.push_str("k,singular_value\n");
    for (k, s) in report.singular_values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, s));
    }
    out
}

/// Scalar functional of the expression-encoder output used as the IG
/// target.
#[derive(Debug, Clone, PartialEq)]
pub enum IgTarget {
    /// Cosine similarity between φ(x) and a reference slide embedding.
    CosineToReference(Vec<f64>),
    /// Projection of φ(x) onto a fixed direction (normalized here).
    Projection(Vec<f64>),
}

impl IgTarget {
    fn describe(&self) -> String {
        match self {
            IgTarget::CosineToReference(_) => "cosine_to_reference".into(),
            IgTarget::Projection(_) => "projection".into(),
        }
    }
}

/// Per-gene attribution scores for one expression profile.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionVector {
    pub gene_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub baseline: ExpressionProfile,
    pub steps: usize,
    pub target: String,
    /// |Σ scores − (F(input) − F(baseline))|.
    pub completeness_residual: f64,
}

/// Midpoint-rule Integrated Gradients for an arbitrary differentiable
/// scalar `f` returning (value, gradient). Returns the per-coordinate
/// attributions and the completeness residual.
pub fn integrated_gradients_fn(
    f: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    input: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<(Vec<f64>, f64)> {
    if steps == 0 {
        return Err(Error::Parameter("integrated_gradients: steps must be ≥ 1".into()));
    }
    if input.len() != baseline.len() {
        return Err(Error::dim("integrated_gradients input length", baseline.len(), input.len()));
    }
    let n = input.len();
    let mut avg_grad = vec![0.0f64; n];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let x: Vec<f64> =
            input.iter().zip(baseline).map(|(t, b)| b + alpha * (t - b)).collect();
        let (_, grad) = f(&x)?;
        if grad.len() != n {
            return Err(Error::dim("integrated_gradients gradient length", n, grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient on the integration path at step {s}"
            )));
        }
        for (a, g) in avg_grad.iter_mut().zip(&grad) {
            *a += g / steps as f64;
        }
    }
    let scores: Vec<f64> = input
        .iter()
        .zip(baseline)
        .zip(&avg_grad)
        .map(|((t, b), g)| (t - b) * g)
        .collect();
    let (ft, _) = f(input)?;
    let (fb, _) = f(baseline)?;
    let residual = (scores.iter().sum::<f64>() - (ft - fb)).abs();
    Ok((scores, residual))
}

/// Value and input gradient of the target functional applied to the
/// expression encoder output.
fn target_eval(
    expr: &crate::encoders::ExpressionMlpParams<f64>,
    target: &IgTarget,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut tape: Tape<f64> = Tape::new();
    let vars = expr.register(&mut tape, false);
    let input = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?, true);
    let g = expression_graph(&mut tape, &vars, input)?;
    let d = tape.value(g).cols();
    let scalar = match target {
        IgTarget::CosineToReference(r) => {
            if r.len() != d {
                return Err(Error::dim("IG reference embedding dimension", d, r.len()));
            }
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm == 0.0 {
                return Err(Error::Input("IG reference embedding has zero norm".into()));
            }
            let rleaf = tape.leaf(Tensor::matrix(1, d, r.clone())?, false);
            let prod = tape.mul(g, rleaf)?;
            let dot = tape.sum_all(prod);
            let gn = tape.row_norms(g);
            // keep the functional finite when φ(x) vanishes (e.g. the
            // zero baseline through an untrained encoder)
            let scaled = tape.scale(gn, rnorm);
            let eps = tape.leaf(Tensor::new(vec![1], vec![1e-12])?, false);
            let denom = tape.add(scaled, eps)?;
            tape.div(dot, denom)?
        }
        IgTarget::Projection(u) => {
            if u.len() != d {
                return Err(Error::dim("IG projection direction dimension", d, u.len()));
            }
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Input("IG projection direction has zero norm".into()));
            }
            let unit: Vec<f64> = u.iter().map(|v| v / norm).collect();
            let uleaf = tape.leaf(Tensor::matrix(1, d, unit)?, false);
            let prod = tape.mul(g, uleaf)?;
            tape.sum_all(prod)
        }
    };
    let value = tape.value(scalar).item();
    let grads = tape.backward(scalar)?;
    let grad = grads
        .get(input)
        .ok_or_else(|| Error::Numeric("no gradient for the expression input".into()))?
        .data()
        .to_vec();
    Ok((value, grad))
}

/// Gene-level Integrated Gradients through the expression encoder of a
/// trained checkpoint.
pub fn integrated_gradients(
    ckpt: &ModelCheckpoint,
    profile: &ExpressionProfile,
    baseline: &ExpressionProfile,
    steps: usize,
    target: &IgTarget,
) -> Result<AttributionVector> {
    if profile.gene_ids != baseline.gene_ids {
        return Err(Error::Input(
            "integrated_gradients: profile and baseline gene sets differ".into(),
        ));
    }
    let expr = ckpt.model.cast::<f64>().expr;
    if profile.len() != expr.gene_count() {
        return Err(Error::dim(
            "integrated_gradients gene count",
            expr.gene_count(),
            profile.len(),
        ));
    }
    let input: Vec<f64> = profile.values.iter().map(|&v| v as f64).collect();
    let base: Vec<f64> = baseline.values.iter().map(|&v| v as f64).collect();
    let f = |x: &[f64]| target_eval(&expr, target, x);
    let (scores, completeness_residual) = integrated_gradients_fn(&f, &input, &base, steps)?;
    Ok(AttributionVector {
        gene_ids: profile.gene_ids.clone(),
        scores,
        baseline: baseline.clone(),
        steps,
        target: target.describe(),
        completeness_residual,
    })
}

/// Zero log2 fold change baseline: no deviation from the control group.
pub fn zero_baseline(gene_ids: &[String]) -> ExpressionProfile {
    ExpressionProfile { gene_ids: gene_ids.to_vec(), values: vec![0.0; gene_ids.len()] }
}

/// Percentage of samples in which each gene ranks in the top `k` by
/// absolute attribution. Sorted by frequency descending, ties by
/// gene_id.
pub fn top_gene_frequency(
    attributions: &[AttributionVector],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if attributions.is_empty() {
        return Err(Error::Input("top_gene_frequency: empty attribution list".into()));
    }
    let genes = &attributions[0].gene_ids;
    if k > genes.len() {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds gene count {}",
            genes.len()
        )));
    }
    let mut counts = vec![0usize; genes.len()];
    for a in attributions {
        if &a.gene_ids != genes {
            return Err(Error::Input("top_gene_frequency: inconsistent gene sets".into()));
        }
        let mut order: Vec<usize> = (0..genes.len()).collect();
        order.sort_by(|&i, &j| {
            a.scores[j].abs().total_cmp(&a.scores[i].abs()).then(i.cmp(&j))
        });
        for &i in order.iter().take(k) {
            counts[i] += 1;
        }
    }
    let n = attributions.len() as f64;
    let mut table: Vec<(String, f64)> = genes
        .iter()
        .zip(&counts)
        .map(|(g, &c)| (g.clone(), 100.0 * c as f64 / n))
        .collect();
    table.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(table)
}

pub fn frequency_table_csv(table: &[(String, f64)]) -> String {
    let mut out = String::from("gene_id,percent\n");
    for (g, p) in table {
        out.push_str(&format!("{g},{p}\n"));
    }
    out
}

/// Write the attention heatmap CSV `x,y,attention,attention_percentile`.
/// The percentile of a patch is the percentage of patches with
/// attention less than or equal to its own.
pub fn export_attention(
    coords: &[[f32; 2]],
    attention: &[f32],
    path: &Path,
) -> Result<()> {
    if coords.len() != attention.len() {
        return Err(Error::dim("export_attention length", coords.len(), attention.len()));
    }
    if attention.is_empty() {
        return Err(Error::Input("export_attention: empty attention vector".into()));
    }
    let n = attention.len() as f64;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "x,y,attention,attention_percentile")?;
    for (c, &a) in coords.iter().zip(attention) {
        let le = attention.iter().filter(|&&b| b <= a).count() as f64;
        writeln!(w, "{},{},{},{}", c[0], c[1], a, 100.0 * le / n)?;
    }
    w.flush()?;
    Ok(())
}
