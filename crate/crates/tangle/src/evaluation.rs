//! Downstream protocols: slide embedding inference, few-shot linear
//! probing with macro-AUC, prototype classification, and retrieval
//! with Recall@k.

use crate::dataio::formats::PatchEmbeddingSet;
use crate::encoders::{abmil_forward, Mode};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::RngKey;
use crate::training::ModelCheckpoint;
use serde::{Deserialize, Serialize};

/// One slide embedding with its labels, ready for probing or retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub slide_id: String,
    pub embedding: Vec<f64>,
    /// Binary indicator per class; one-hot in the multi-class setting.
    pub labels: Vec<u8>,
    pub group_id: Option<String>,
}

/// Infer-mode forward pass over ALL patches of a slide (no subsampling
/// at inference). Returns the embedding and per-patch attention in the
/// encoder's canonical patch order.
pub fn embed_slide(ckpt: &ModelCheckpoint, set: &PatchEmbeddingSet) -> Result<(Tensor<f32>, Vec<f32>)> {
    abmil_forward(&ckpt.model.abmil, &set.embeddings, Mode::Infer, RngKey::new(0))
}

/// Mean over patch embeddings; the pooling-free baseline.
pub fn mean_pool(set: &PatchEmbeddingSet) -> Result<Tensor<f32>> {
    if set.n_patches() == 0 {
        return Err(Error::Input("mean_pool: empty patch set".into()));
    }
    let d = set.dim();
    let n = set.n_patches() as f32;
    let mut acc = vec![0.0f32; d];
    for i in 0..set.n_patches() {
        for (a, &x) in acc.iter_mut().zip(set.embeddings.row(i)) {
            *a += x;
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    Tensor::matrix(1, d, acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub k_per_class: usize,
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { k_per_class: 10, l2_penalty: 1e-4, max_iters: 5000, lr: 1.0, seed: 0 }
    }
}

/// One-vs-rest L2-regularized logistic regression classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// L×d weight rows.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Classes whose few-shot draw had no positives or no negatives;
    /// they always score 0.5.
    pub degenerate: Vec<bool>,
    /// Training-set indices used for the draw (into the input slice).
    pub support: Vec<usize>,
}

fn check_consistent(items: &[LabeledEmbedding]) -> Result<(usize, usize)> {
    if items.is_empty() {
        return Err(Error::Input("empty embedding collection".into()));
    }
    let d = items[0].embedding.len();
    let l = items[0].labels.len();
    for it in items {
        if it.embedding.len() != d {
            return Err(Error::dim(
                &format!("embedding dimension of slide {}", it.slide_id),
                d,
                it.embedding.len(),
            ));
        }
        if it.labels.len() != l {
            return Err(Error::dim(
                &format!("label count of slide {}", it.slide_id),
                l,
                it.labels.len(),
            ));
        }
    }
    Ok((d, l))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn fit_logistic(
    x: &[&[f64]],
    y: &[f64],
    cfg: &ProbeConfig,
) -> (Vec<f64>, f64) {
    let n = x.len();
    let d = x[0].len();
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    // Lipschitz bound of the gradient gives a safe fixed step
    let msq = x.iter().map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
    let step = cfg.lr / (0.25 * msq + cfg.l2_penalty);
    let mut gw = vec![0.0f64; d];
    for _ in 0..cfg.max_iters {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let p = sigmoid(w.iter().zip(*xi).map(|(a, c)| a * c).sum::<f64>() + b);
            let r = p - yi;
            for (g, &c) in gw.iter_mut().zip(*xi) {
                *g += r * c;
            }
            gb += r;
        }
        let mut max_g = (gb / n as f64).abs();
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g = *g / n as f64 + cfg.l2_penalty * wv;
            max_g = max_g.max(g.abs());
        }
        if max_g < 1e-10 {
            break;
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        b -= step * gb / n as f64;
    }
    (w, b)
}

/// Fit a one-vs-rest probe on a seeded draw of `k_per_class` positives
/// per class. The union of drawn slides is the training set for every
/// class head.
pub fn linear_probe(train: &[LabeledEmbedding], cfg: &ProbeConfig) -> Result<LinearProbe> {
    use rand::seq::SliceRandom;
    if cfg.k_per_class == 0 {
        return Err(Error::Parameter("k_per_class must be positive".into()));
    }
    let (d, l) = check_consistent(train)?;
    let key = RngKey::new(cfg.seed);
    let mut support: Vec<usize> = Vec::new();
    for c in 0..l {
        let mut pos: Vec<usize> =
            (0..train.len()).filter(|&i| train[i].labels[c] == 1).collect();
        if pos.len() < cfg.k_per_class {
            return Err(Error::Input(format!(
                "class {c} has {} positives, fewer than k_per_class = {}",
                pos.len(),
                cfg.k_per_class
            )));
        }
        pos.shuffle(&mut key.child(c as u64).rng());
        support.extend(pos.into_iter().take(cfg.k_per_class));
    }
    support.sort_unstable();
    support.dedup();

    let x: Vec<&[f64]> = support.iter().map(|&i| train[i].embedding.as_slice()).collect();
    let mut weights = Vec::with_capacity(l);
    let mut bias = Vec::with_capacity(l);
    let mut degenerate = Vec::with_capacity(l);
    for c in 0..l {
        let y: Vec<f64> = support.iter().map(|&i| train[i].labels[c] as f64).collect();
        let n_pos = y.iter().filter(|&&v| v == 1.0).count();
        if n_pos == 0 || n_pos == y.len() {
            weights.push(vec![0.0; d]);
            bias.push(0.0);
            degenerate.push(true);
            continue;
        }
        let (w, b) = fit_logistic(&x, &y, cfg);
        weights.push(w);
        bias.push(b);
        degenerate.push(false);
    }
    Ok(LinearProbe { weights, bias, degenerate, support })
}

impl LinearProbe {
    /// Per-class probabilities for one embedding; degenerate heads
    /// score 0.5.
    pub fn predict(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let d = self.weights[0].len();
        if embedding.len() != d {
            return Err(Error::dim("probe input dimension", d, embedding.len()));
        }
        Ok((0..self.weights.len())
            .map(|c| {
                if self.degenerate[c] {
                    0.5
                } else {
                    sigmoid(
                        self.weights[c].iter().zip(embedding).map(|(w, x)| w * x).sum::<f64>()
                            + self.bias[c],
                    )
                }
            })
            .collect())
    }

    pub fn predict_all(&self, items: &[LabeledEmbedding]) -> Result<Vec<Vec<f64>>> {
        items.iter().map(|it| self.predict(&it.embedding)).collect()
    }
}

/// Macro-averaged one-vs-rest ROC-AUC via the rank statistic with
/// tie-averaged ranks. Classes lacking a positive or a negative are
/// excluded and returned.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(f64, Vec<usize>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Input(format!(
            "macro_auc: {} score rows vs {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let l = labels[0].len();
    for (s, y) in scores.iter().zip(labels) {
        if s.len() != l || y.len() != l {
            return Err(Error::dim("macro_auc class count", l, s.len().max(y.len())));
        }
    }
    let n = scores.len();
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut excluded = Vec::new();
    for c in 0..l {
        let n_pos = labels.iter().filter(|y| y[c] == 1).count();
        if n_pos == 0 || n_pos == n {
            excluded.push(c);
            continue;
        }
        // tie-averaged ranks of the class scores
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a][c].total_cmp(&scores[b][c]));
        let mut ranks = vec![0.0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && scores[order[j + 1]][c] == scores[order[i]][c] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..n).filter(|&i| labels[i][c] == 1).map(|i| ranks[i]).sum();
        let p = n_pos as f64;
        let q = (n - n_pos) as f64;
        total += (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Metric("macro_auc: no class with both positives and negatives".into()));
    }
    Ok((total / valid as f64, excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeKind {
    Positive,
    Normal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub kind: PrototypeKind,
    pub embedding: Vec<f64>,
    pub k_used: usize,
}

/// Arithmetic mean of the given slide embeddings.
pub fn build_prototype(kind: PrototypeKind, embeddings: &[Vec<f64>]) -> Result<Prototype> {
    if embeddings.is_empty() {
        return Err(Error::Input("build_prototype: empty embedding list".into()));
    }
    let d = embeddings[0].len();
    let mut acc = vec![0.0f64; d];
    for e in embeddings {
        if e.len() != d {
            return Err(Error::dim("prototype embedding dimension", d, e.len()));
        }
        for (a, v) in acc.iter_mut().zip(e) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= embeddings.len() as f64;
    }
    Ok(Prototype { kind, embedding: acc, k_used: embeddings.len() })
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Score = ‖q − p⁰‖₂ − ‖q − p⁺‖₂; positive iff score > 0, exact ties
/// are labeled normal.
pub fn prototype_classify(
    query: &[f64],
    pos: &Prototype,
    normal: &Prototype,
) -> Result<(f64, PrototypeKind)> {
    if pos.embedding.len() != query.len() || normal.embedding.len() != query.len() {
        return Err(Error::dim(
            "prototype dimension",
            query.len(),
            pos.embedding.len().max(normal.embedding.len()),
        ));
    }
    let score = l2_dist(query, &normal.embedding) - l2_dist(query, &pos.embedding);
    let label = if score > 0.0 { PrototypeKind::Positive } else { PrototypeKind::Normal };
    Ok((score, label))
}

/// Ranked retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Top-k slide ids by descending cosine similarity.
    pub ranked: Vec<String>,
    /// Zero-norm index entries; always ranked after every scored entry.
    pub flagged: Vec<String>,
}

/// Rank the index against `query_id` by cosine similarity on the raw
/// (unnormalized) embeddings; the query itself is excluded and ties
/// break by slide_id.
pub fn retrieve(query_id: &str, index: &[LabeledEmbedding], k: usize) -> Result<Retrieval> {
    check_consistent(index)?;
    if k + 1 > index.len() {
        return Err(Error::Parameter(format!(
            "k = {k} but the index holds only {} other slides",
            index.len().saturating_sub(1)
        )));
    }
    let query = index
        .iter()
        .find(|it| it.slide_id == query_id)
        .ok_or_else(|| Error::Input(format!("query slide {query_id} not in index")))?;
    let qn = query.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::Input(format!("query slide {query_id} has a zero-norm embedding")));
    }
    let mut scored: Vec<(f64, &str)> = Vec::new();
    let mut flagged: Vec<&str> = Vec::new();
    for it in index {
        if it.slide_id == query_id {
            continue;
        }
        let n = it.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            flagged.push(&it.slide_id);
            continue;
        }
        let dot: f64 = it.embedding.iter().zip(&query.embedding).map(|(a, b)| a * b).sum();
        scored.push((dot / (n * qn), &it.slide_id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    flagged.sort_unstable();
    let ranked: Vec<String> = scored
        .iter()
        .map(|(_, id)| id.to_string())
        .chain(flagged.iter().map(|id| id.to_string()))
        .take(k)
        .collect();
    Ok(Retrieval { ranked, flagged: flagged.iter().map(|s| s.to_string()).collect() })
}

/// |top-k ∩ relevant| / |relevant|.
pub fn recall_at_k(ranked: &[String], relevant: &[String], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Metric("recall_at_k: empty relevant set".into()));
    }
    let rel: std::collections::HashSet<&str> = relevant.iter().map(|s| s.as_str()).collect();
    let hits = ranked.iter().take(k).filter(|id| rel.contains(id.as_str())).count();
    Ok(hits as f64 / rel.len() as f64)
}
