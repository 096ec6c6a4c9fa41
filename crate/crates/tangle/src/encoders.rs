//! The two modality encoders and the reconstruction head: a
//! gated-attention MIL encoder pooling patch embeddings into one slide
//! embedding, a 3-layer MLP projecting gene expression into the same
//! space, and an MLP regressor mapping slide embeddings back to
//! expression.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::rng::RngKey;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Architecture hyperparameters. Defaults follow the reference ABMIL
/// widths (768 / 512 / 768); synthetic runs shrink everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Patch embedding dimension d_H.
    pub patch_dim: usize,
    /// Gene count N_G fed to the expression MLP.
    pub n_genes: usize,
    /// Joint embedding dimension d.
    pub embed_dim: usize,
    pub pre_attn_hidden: usize,
    pub gate_hidden: usize,
    pub expr_hidden: usize,
    pub recon_hidden: usize,
    pub dropout_pre: f64,
    pub dropout_attn: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_dim: 768,
            n_genes: 1000,
            embed_dim: 768,
            pre_attn_hidden: 768,
            gate_hidden: 512,
            expr_hidden: 512,
            recon_hidden: 512,
            dropout_pre: 0.1,
            dropout_attn: 0.25,
        }
    }
}

// ── parameter containers ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T: Scalar> {
    /// in×out weight matrix.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn init(fan_in: usize, fan_out: usize, key: RngKey) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = key.rng();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Affine {
            weight: Tensor::matrix(fan_in, fan_out, data).unwrap(),
            bias: Tensor::vector(vec![T::ZERO; fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::vector(vec![T::ZERO; fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(n: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::vector(vec![T::ONE; n]),
            beta: Tensor::vector(vec![T::ZERO; n]),
        }
    }
}

/// Gated attention-based MIL encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilParams<T: Scalar> {
    pub pre1: Affine<T>,
    pub ln1: LayerNormParams<T>,
    pub pre2: Affine<T>,
    pub ln2: LayerNormParams<T>,
    pub gate_v: Affine<T>,
    pub gate_u: Affine<T>,
    pub attn_w: Affine<T>,
    pub post: Affine<T>,
    pub dropout_pre: f64,
    pub dropout_attn: f64,
}

impl<T: Scalar> AbmilParams<T> {
    pub fn init(cfg: &ModelConfig, key: RngKey) -> Self {
        let h = cfg.pre_attn_hidden;
        AbmilParams {
            pre1: Affine::init(cfg.patch_dim, h, key.child(0)),
            ln1: LayerNormParams::identity(h),
            pre2: Affine::init(h, h, key.child(1)),
            ln2: LayerNormParams::identity(h),
            gate_v: Affine::init(h, cfg.gate_hidden, key.child(2)),
            gate_u: Affine::init(h, cfg.gate_hidden, key.child(3)),
            attn_w: Affine::init(cfg.gate_hidden, 1, key.child(4)),
            post: Affine::init(h, cfg.embed_dim, key.child(5)),
            dropout_pre: cfg.dropout_pre,
            dropout_attn: cfg.dropout_attn,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.pre1.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.post.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("abmil.pre1.weight".into(), &self.pre1.weight),
            ("abmil.pre1.bias".into(), &self.pre1.bias),
            ("abmil.ln1.gamma".into(), &self.ln1.gamma),
            ("abmil.ln1.beta".into(), &self.ln1.beta),
            ("abmil.pre2.weight".into(), &self.pre2.weight),
            ("abmil.pre2.bias".into(), &self.pre2.bias),
            ("abmil.ln2.gamma".into(), &self.ln2.gamma),
            ("abmil.ln2.beta".into(), &self.ln2.beta),
            ("abmil.gate_v.weight".into(), &self.gate_v.weight),
            ("abmil.gate_v.bias".into(), &self.gate_v.bias),
            ("abmil.gate_u.weight".into(), &self.gate_u.weight),
            ("abmil.gate_u.bias".into(), &self.gate_u.bias),
            ("abmil.attn_w.weight".into(), &self.attn_w.weight),
            ("abmil.attn_w.bias".into(), &self.attn_w.bias),
            ("abmil.post.weight".into(), &self.post.weight),
            ("abmil.post.bias".into(), &self.post.bias),
        ]
    }
}

/// 3-layer expression MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMlpParams<T: Scalar> {
    pub layers: Vec<Affine<T>>,
}

impl<T: Scalar> ExpressionMlpParams<T> {
    pub fn init(cfg: &ModelConfig, key: RngKey) -> Self {
        let dims = [cfg.n_genes, cfg.expr_hidden, cfg.expr_hidden, cfg.embed_dim];
        let layers = (0..3)
            .map(|i| Affine::init(dims[i], dims[i + 1], key.child(i as u64)))
            .collect();
        ExpressionMlpParams { layers }
    }

    pub fn gene_count(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("expr.l{i}.weight"), &l.weight));
            out.push((format!("expr.l{i}.bias"), &l.bias));
        }
        out
    }
}

/// MLP regressor mapping slide embeddings back to expression space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconHeadParams<T: Scalar> {
    pub l1: Affine<T>,
    pub l2: Affine<T>,
}

impl<T: Scalar> ReconHeadParams<T> {
    pub fn init(cfg: &ModelConfig, key: RngKey) -> Self {
        ReconHeadParams {
            l1: Affine::init(cfg.embed_dim, cfg.recon_hidden, key.child(0)),
            l2: Affine::init(cfg.recon_hidden, cfg.n_genes, key.child(1)),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("recon.l1.weight".into(), &self.l1.weight),
            ("recon.l1.bias".into(), &self.l1.bias),
            ("recon.l2.weight".into(), &self.l2.weight),
            ("recon.l2.bias".into(), &self.l2.bias),
        ]
    }
}

/// All trainable parameters of one pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct TangleModel<T: Scalar> {
    pub abmil: AbmilParams<T>,
    pub expr: ExpressionMlpParams<T>,
    pub recon: Option<ReconHeadParams<T>>,
}

impl<T: Scalar> TangleModel<T> {
    pub fn init(cfg: &ModelConfig, with_recon: bool, key: RngKey) -> Self {
        TangleModel {
            abmil: AbmilParams::init(cfg, key.child(1)),
            expr: ExpressionMlpParams::init(cfg, key.child(2)),
            recon: with_recon.then(|| ReconHeadParams::init(cfg, key.child(3))),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.abmil.named_params();
        out.extend(self.expr.named_params());
        if let Some(r) = &self.recon {
            out.extend(r.named_params());
        }
        out
    }

    /// Mutable views over every parameter tensor, in the same order as
    /// [`TangleModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let a = &mut self.abmil;
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("abmil.pre1.weight".into(), &mut a.pre1.weight),
            ("abmil.pre1.bias".into(), &mut a.pre1.bias),
            ("abmil.ln1.gamma".into(), &mut a.ln1.gamma),
            ("abmil.ln1.beta".into(), &mut a.ln1.beta),
            ("abmil.pre2.weight".into(), &mut a.pre2.weight),
            ("abmil.pre2.bias".into(), &mut a.pre2.bias),
            ("abmil.ln2.gamma".into(), &mut a.ln2.gamma),
            ("abmil.ln2.beta".into(), &mut a.ln2.beta),
            ("abmil.gate_v.weight".into(), &mut a.gate_v.weight),
            ("abmil.gate_v.bias".into(), &mut a.gate_v.bias),
            ("abmil.gate_u.weight".into(), &mut a.gate_u.weight),
            ("abmil.gate_u.bias".into(), &mut a.gate_u.bias),
            ("abmil.attn_w.weight".into(), &mut a.attn_w.weight),
            ("abmil.attn_w.bias".into(), &mut a.attn_w.bias),
            ("abmil.post.weight".into(), &mut a.post.weight),
            ("abmil.post.bias".into(), &mut a.post.bias),
        ];
        for (i, l) in self.expr.layers.iter_mut().enumerate() {
            out.push((format!("expr.l{i}.weight"), &mut l.weight));
            out.push((format!("expr.l{i}.bias"), &mut l.bias));
        }
        if let Some(r) = &mut self.recon {
            out.push(("recon.l1.weight".into(), &mut r.l1.weight));
            out.push(("recon.l1.bias".into(), &mut r.l1.bias));
            out.push(("recon.l2.weight".into(), &mut r.l2.weight));
            out.push(("recon.l2.bias".into(), &mut r.l2.bias));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> TangleModel<U> {
        let cast_affine = |a: &Affine<T>| Affine::<U> {
            weight: a.weight.cast(),
            bias: a.bias.cast(),
        };
        TangleModel {
            abmil: AbmilParams {
                pre1: cast_affine(&self.abmil.pre1),
                ln1: LayerNormParams { gamma: self.abmil.ln1.gamma.cast(), beta: self.abmil.ln1.beta.cast() },
                pre2: cast_affine(&self.abmil.pre2),
                ln2: LayerNormParams { gamma: self.abmil.ln2.gamma.cast(), beta: self.abmil.ln2.beta.cast() },
                gate_v: cast_affine(&self.abmil.gate_v),
                gate_u: cast_affine(&self.abmil.gate_u),
                attn_w: cast_affine(&self.abmil.attn_w),
                post: cast_affine(&self.abmil.post),
                dropout_pre: self.abmil.dropout_pre,
                dropout_attn: self.abmil.dropout_attn,
            },
            expr: ExpressionMlpParams {
                layers: self.expr.layers.iter().map(cast_affine).collect(),
            },
            recon: self.recon.as_ref().map(|r| ReconHeadParams {
                l1: cast_affine(&r.l1),
                l2: cast_affine(&r.l2),
            }),
        }
    }
}

// ── graph construction ────────────────────────────────────────────────

pub struct AffineVars {
    pub w: NodeId,
    pub b: NodeId,
}

fn register_affine<T: Scalar>(tape: &mut Tape<T>, a: &Affine<T>, rg: bool) -> AffineVars {
    AffineVars {
        w: tape.leaf(a.weight.clone(), rg),
        b: tape.leaf(a.bias.clone(), rg),
    }
}

fn apply_affine<T: Scalar>(tape: &mut Tape<T>, v: &AffineVars, x: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, v.w)?;
    tape.add_row_bias(y, v.b)
}

pub struct AbmilVars {
    pre1: AffineVars,
    ln1: (NodeId, NodeId),
    pre2: AffineVars,
    ln2: (NodeId, NodeId),
    gate_v: AffineVars,
    gate_u: AffineVars,
    attn_w: AffineVars,
    post: AffineVars,
    dropout_pre: f64,
    dropout_attn: f64,
}

impl<T: Scalar> AbmilParams<T> {
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> AbmilVars {
        AbmilVars {
            pre1: register_affine(tape, &self.pre1, requires_grad),
            ln1: (
                tape.leaf(self.ln1.gamma.clone(), requires_grad),
                tape.leaf(self.ln1.beta.clone(), requires_grad),
            ),
            pre2: register_affine(tape, &self.pre2, requires_grad),
            ln2: (
                tape.leaf(self.ln2.gamma.clone(), requires_grad),
                tape.leaf(self.ln2.beta.clone(), requires_grad),
            ),
            gate_v: register_affine(tape, &self.gate_v, requires_grad),
            gate_u: register_affine(tape, &self.gate_u, requires_grad),
            attn_w: register_affine(tape, &self.attn_w, requires_grad),
            post: register_affine(tape, &self.post, requires_grad),
            dropout_pre: self.dropout_pre,
            dropout_attn: self.dropout_attn,
        }
    }
}

impl AbmilVars {
    /// Leaf ids in [`TangleModel::params_mut`] order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![
            self.pre1.w, self.pre1.b, self.ln1.0, self.ln1.1,
            self.pre2.w, self.pre2.b, self.ln2.0, self.ln2.1,
            self.gate_v.w, self.gate_v.b, self.gate_u.w, self.gate_u.b,
            self.attn_w.w, self.attn_w.b, self.post.w, self.post.b,
        ]
    }

    /// Rebuild the var set from 16 existing leaf ids in
    /// [`TangleModel::params_mut`] order, e.g. for gradient checking
    /// against externally registered leaves.
    pub fn from_param_ids(ids: &[NodeId], dropout_pre: f64, dropout_attn: f64) -> Result<Self> {
        if ids.len() != 16 {
            return Err(Error::dim("AbmilVars::from_param_ids", 16usize, ids.len()));
        }
        Ok(AbmilVars {
            pre1: AffineVars { w: ids[0], b: ids[1] },
            ln1: (ids[2], ids[3]),
            pre2: AffineVars { w: ids[4], b: ids[5] },
            ln2: (ids[6], ids[7]),
            gate_v: AffineVars { w: ids[8], b: ids[9] },
            gate_u: AffineVars { w: ids[10], b: ids[11] },
            attn_w: AffineVars { w: ids[12], b: ids[13] },
            post: AffineVars { w: ids[14], b: ids[15] },
            dropout_pre,
            dropout_attn,
        })
    }
}

const LN_EPS: f64 = 1e-5;

/// Build the gated-attention forward pass on `tape`.
///
/// `patches` is an N_H×d_H node. Returns the slide embedding (1×d) and
/// the attention weights (1×N_H). Dropout is active only in train mode
/// and fully determined by `key`.
pub fn abmil_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &AbmilVars,
    patches: NodeId,
    mode: Mode,
    key: RngKey,
) -> Result<(NodeId, NodeId)> {
    if tape.value(patches).rows() == 0 || tape.value(patches).is_empty() {
        return Err(Error::Input("abmil_forward: empty patch set".into()));
    }
    // pre-attention MLP: two affine→LN→GELU→dropout blocks
    let mut z = apply_affine(tape, &vars.pre1, patches)?;
    z = tape.layer_norm(z, vars.ln1.0, vars.ln1.1, LN_EPS)?;
    z = tape.gelu(z);
    if mode == Mode::Train {
        z = tape.dropout(z, vars.dropout_pre, key.child(0))?;
    }
    z = apply_affine(tape, &vars.pre2, z)?;
    z = tape.layer_norm(z, vars.ln2.0, vars.ln2.1, LN_EPS)?;
    z = tape.gelu(z);
    if mode == Mode::Train {
        z = tape.dropout(z, vars.dropout_pre, key.child(1))?;
    }

    // gated attention scores over patches
    let v = apply_affine(tape, &vars.gate_v, z)?;
    let v = tape.tanh(v);
    let u = apply_affine(tape, &vars.gate_u, z)?;
    let u = tape.sigmoid(u);
    let mut gated = tape.mul(v, u)?;
    if mode == Mode::Train {
        // dropout on the gated pre-score features keeps Σa = 1
        gated = tape.dropout(gated, vars.dropout_attn, key.child(2))?;
    }
    let scores = apply_affine(tape, &vars.attn_w, gated)?; // N_H×1
    let scores_row = tape.transpose(scores); // 1×N_H
    let attn = tape.softmax_rows(scores_row, 1.0)?;

    // attention-weighted pooling over pre-attention features
    let pooled = tape.matmul(attn, z)?; // 1×hidden
    let h = apply_affine(tape, &vars.post, pooled)?; // 1×d
    Ok((h, attn))
}

/// Canonical patch order: rows sorted lexicographically by value, which
/// makes every downstream reduction independent of input permutation.
fn canonical_row_order<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let mut idx: Vec<usize> = (0..patches.rows()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (patches.row(a), patches.row(b));
        for (x, y) in ra.iter().zip(rb) {
            match x.to_f64().total_cmp(&y.to_f64()) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut data = Vec::with_capacity(patches.len());
    for i in &idx {
        data.extend_from_slice(patches.row(*i));
    }
    Tensor::matrix(patches.rows(), patches.cols(), data).unwrap()
}

/// Evaluate the gated-attention encoder on one slide.
///
/// In infer mode the patches are first brought into a canonical order,
/// so any permutation of the input yields a bitwise-identical embedding.
/// The returned attention weights follow the canonical order as well.
pub fn abmil_forward<T: Scalar>(
    params: &AbmilParams<T>,
    patches: &Tensor<T>,
    mode: Mode,
    key: RngKey,
) -> Result<(Tensor<T>, Vec<T>)> {
    if patches.rows() == 0 || patches.is_empty() {
        return Err(Error::Input("abmil_forward: empty patch set".into()));
    }
    if patches.cols() != params.patch_dim() {
        return Err(Error::dim("abmil_forward patch dimension", params.patch_dim(), patches.cols()));
    }
    let input = match mode {
        Mode::Infer => canonical_row_order(patches),
        Mode::Train => patches.clone(),
    };
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let p = tape.leaf(input, false);
    let (h, a) = abmil_graph(&mut tape, &vars, p, mode, key)?;
    Ok((tape.value(h).clone(), tape.value(a).data().to_vec()))
}

pub struct ExpressionVars {
    layers: Vec<AffineVars>,
}

impl ExpressionVars {
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Rebuild the var set from weight/bias leaf id pairs.
    pub fn from_param_ids(ids: &[NodeId]) -> Result<Self> {
        if ids.is_empty() || ids.len() % 2 != 0 {
            return Err(Error::Input(format!(
                "ExpressionVars::from_param_ids needs an even, positive id count, got {}",
                ids.len()
            )));
        }
        Ok(ExpressionVars {
            layers: ids.chunks(2).map(|c| AffineVars { w: c[0], b: c[1] }).collect(),
        })
    }
}

impl<T: Scalar> ExpressionMlpParams<T> {
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ExpressionVars {
        ExpressionVars {
            layers: self.layers.iter().map(|l| register_affine(tape, l, requires_grad)).collect(),
        }
    }
}

/// 3-layer MLP with GELU between layers; `x` is M×N_G.
pub fn expression_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ExpressionVars,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    let last = vars.layers.len() - 1;
    for (i, l) in vars.layers.iter().enumerate() {
        h = apply_affine(tape, l, h)?;
        if i != last {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

pub fn expression_forward<T: Scalar>(
    params: &ExpressionMlpParams<T>,
    t: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t.cols() != params.gene_count() {
        return Err(Error::dim("expression_forward gene count", params.gene_count(), t.cols()));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.leaf(t.clone(), false);
    let g = expression_graph(&mut tape, &vars, x)?;
    Ok(tape.value(g).clone())
}

pub struct ReconVars {
    l1: AffineVars,
    l2: AffineVars,
}

impl ReconVars {
    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }

    /// Rebuild the var set from 4 leaf ids in `param_ids` order.
    pub fn from_param_ids(ids: &[NodeId]) -> Result<Self> {
        if ids.len() != 4 {
            return Err(Error::dim("ReconVars::from_param_ids", 4usize, ids.len()));
        }
        Ok(ReconVars {
            l1: AffineVars { w: ids[0], b: ids[1] },
            l2: AffineVars { w: ids[2], b: ids[3] },
        })
    }
}

impl<T: Scalar> ReconHeadParams<T> {
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ReconVars {
        ReconVars {
            l1: register_affine(tape, &self.l1, requires_grad),
            l2: register_affine(tape, &self.l2, requires_grad),
        }
    }
}

pub fn recon_graph<T: Scalar>(tape: &mut Tape<T>, vars: &ReconVars, h: NodeId) -> Result<NodeId> {
    let y = apply_affine(tape, &vars.l1, h)?;
    let y = tape.gelu(y);
    apply_affine(tape, &vars.l2, y)
}

pub fn recon_forward<T: Scalar>(params: &ReconHeadParams<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let d = params.l1.weight.shape()[0];
    if h.cols() != d {
        return Err(Error::dim("recon_forward embedding dimension", d, h.cols()));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.leaf(h.clone(), false);
    let y = recon_graph(&mut tape, &vars, x)?;
    Ok(tape.value(y).clone())
}
