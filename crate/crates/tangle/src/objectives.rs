//! Pretraining objectives: the symmetric cross-modal contrastive loss,
//! the expression reconstruction loss, the intra-modality contrastive
//! loss, and their weighted combination (including the L1/L2 distance
//! ablations of the contrastive term).

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceVariant {
    /// Softmax contrastive term (the default objective).
    Symcl,
    /// Mean per-sample L1 distance between paired embeddings.
    L1,
    /// Mean per-sample squared L2 distance between paired embeddings.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraVariant {
    Both,
    LocalGlobal,
    LocalLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub symcl: f64,
    pub rec: f64,
    pub intra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Inverse temperature: similarities are multiplied by tau before the
    /// softmax.
    pub tau: f64,
    pub weights: LossWeights,
    /// Unit-normalize embedding rows before any dot product or distance.
    pub normalize_embeddings: bool,
    /// Use both contrastive directions (slide→expression and back).
    pub symmetric: bool,
    pub distance_variant: DistanceVariant,
    pub intra_variant: IntraVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 1.0 / 0.07,
            weights: LossWeights { symcl: 1.0, rec: 0.0, intra: 0.0 },
            normalize_embeddings: true,
            symmetric: true,
            distance_variant: DistanceVariant::Symcl,
            intra_variant: IntraVariant::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let w = &self.weights;
        if w.symcl < 0.0 || w.rec < 0.0 || w.intra < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if w.symcl == 0.0 && w.rec == 0.0 && w.intra == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// One batch of paired embeddings (all M×d where present).
#[derive(Debug, Clone)]
pub struct BatchEmbeddings<T: Scalar> {
    pub slide: Tensor<T>,
    pub expression: Option<Tensor<T>>,
    pub slide_view2: Option<Tensor<T>>,
    pub mean_patch: Option<Tensor<T>>,
}

impl<T: Scalar> BatchEmbeddings<T> {
    pub fn paired(slide: Tensor<T>, expression: Tensor<T>) -> Result<Self> {
        let b = BatchEmbeddings { slide, expression: Some(expression), slide_view2: None, mean_patch: None };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        let m = self.slide.rows();
        let d = self.slide.cols();
        if m == 0 {
            return Err(Error::Input("batch must contain at least one pair".into()));
        }
        for (name, t) in [
            ("expression", &self.expression),
            ("slide_view2", &self.slide_view2),
            ("mean_patch", &self.mean_patch),
        ] {
            if let Some(t) = t {
                if t.rows() != m || t.cols() != d {
                    return Err(Error::dim(
                        format!("batch field {name}"),
                        format!("{m}×{d}"),
                        format!("{}×{}", t.rows(), t.cols()),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn maybe_normalize<T: Scalar>(tape: &mut Tape<T>, x: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    if cfg.normalize_embeddings {
        tape.l2_normalize_rows(x, NORM_EPS)
    } else {
        Ok(x)
    }
}

/// In-batch contrastive term with positives on the diagonal:
/// −(1/m)·Σᵢ log softmaxᵢ(τ·a_i·b_·), plus the transposed direction when
/// `symmetric`, each direction then weighted by 1/2.
fn contrastive_pair<T: Scalar>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
    tau: f64,
    symmetric: bool,
) -> Result<NodeId> {
    let m = tape.value(a).rows() as f64;
    let bt = tape.transpose(b);
    let sims = tape.matmul(a, bt)?;
    let ls = tape.log_softmax_rows(sims, tau)?;
    let d1 = tape.diag_sum(ls)?;
    if symmetric {
        let simst = tape.transpose(sims);
        let ls2 = tape.log_softmax_rows(simst, tau)?;
        let d2 = tape.diag_sum(ls2)?;
        let s = tape.add(d1, d2)?;
        Ok(tape.scale(s, -1.0 / (2.0 * m)))
    } else {
        Ok(tape.scale(d1, -1.0 / m))
    }
}

/// Graph form of the symmetric cross-modal contrastive loss.
pub fn symcl_graph<T: Scalar>(
    tape: &mut Tape<T>,
    slide: NodeId,
    expression: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let h = maybe_normalize(tape, slide, cfg)?;
    let g = maybe_normalize(tape, expression, cfg)?;
    contrastive_pair(tape, h, g, cfg.tau, cfg.symmetric)
}

pub fn symcl_loss<T: Scalar>(batch: &BatchEmbeddings<T>, cfg: &LossConfig) -> Result<T> {
    batch.check()?;
    let expr = batch
        .expression
        .as_ref()
        .ok_or_else(|| Error::Input("symcl_loss requires expression embeddings".into()))?;
    let mut tape = Tape::new();
    let h = tape.leaf(batch.slide.clone(), false);
    let g = tape.leaf(expr.clone(), false);
    let l = symcl_graph(&mut tape, h, g, cfg)?;
    Ok(tape.value(l).item())
}

/// Graph form of the reconstruction loss: mean per-sample Euclidean norm
/// (not squared) of the residual rows.
pub fn rec_graph<T: Scalar>(tape: &mut Tape<T>, targets: NodeId, preds: NodeId) -> Result<NodeId> {
    let tv = tape.value(targets);
    let pv = tape.value(preds);
    if tv.shape() != pv.shape() {
        return Err(Error::dim(
            "rec_loss shapes",
            format!("{:?}", tv.shape()),
            format!("{:?}", pv.shape()),
        ));
    }
    let m = tv.rows() as f64;
    let diff = tape.sub(targets, preds)?;
    let norms = tape.row_norms(diff);
    let s = tape.sum_all(norms);
    Ok(tape.scale(s, 1.0 / m))
}

pub fn rec_loss<T: Scalar>(targets: &Tensor<T>, preds: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let t = tape.leaf(targets.clone(), false);
    let p = tape.leaf(preds.clone(), false);
    let l = rec_graph(&mut tape, t, p)?;
    Ok(tape.value(l).item())
}

/// Graph form of the intra-modality loss. The local–global term
/// contrasts the first subset view against the mean-patch embeddings,
/// the local–local term against the second subset view.
pub fn intra_graph<T: Scalar>(
    tape: &mut Tape<T>,
    slide_view1: NodeId,
    slide_view2: Option<NodeId>,
    mean_patch: Option<NodeId>,
    cfg: &LossConfig,
    variant: IntraVariant,
) -> Result<NodeId> {
    let h1 = maybe_normalize(tape, slide_view1, cfg)?;
    let need = |field: Option<NodeId>, name: &str| {
        field.ok_or_else(|| Error::Input(format!("intra_loss variant requires {name}")))
    };
    match variant {
        IntraVariant::LocalGlobal => {
            let hb = need(mean_patch, "mean_patch")?;
            let hb = maybe_normalize(tape, hb, cfg)?;
            contrastive_pair(tape, h1, hb, cfg.tau, cfg.symmetric)
        }
        IntraVariant::LocalLocal => {
            let h2 = need(slide_view2, "slide_view2")?;
            let h2 = maybe_normalize(tape, h2, cfg)?;
            contrastive_pair(tape, h1, h2, cfg.tau, cfg.symmetric)
        }
        IntraVariant::Both => {
            let hb = need(mean_patch, "mean_patch")?;
            let h2 = need(slide_view2, "slide_view2")?;
            let hb = maybe_normalize(tape, hb, cfg)?;
            let h2 = maybe_normalize(tape, h2, cfg)?;
            let lg = contrastive_pair(tape, h1, hb, cfg.tau, cfg.symmetric)?;
            let ll = contrastive_pair(tape, h1, h2, cfg.tau, cfg.symmetric)?;
            let s = tape.add(lg, ll)?;
            // matched 1/2M scaling: both terms average to the mean of the
            // two single-variant values
            Ok(tape.scale(s, 0.5))
        }
    }
}

pub fn intra_loss<T: Scalar>(
    batch: &BatchEmbeddings<T>,
    cfg: &LossConfig,
    variant: IntraVariant,
) -> Result<T> {
    batch.check()?;
    let mut tape = Tape::new();
    let h1 = tape.leaf(batch.slide.clone(), false);
    let h2 = batch.slide_view2.as_ref().map(|t| tape.leaf(t.clone(), false));
    let hb = batch.mean_patch.as_ref().map(|t| tape.leaf(t.clone(), false));
    let l = intra_graph(&mut tape, h1, h2, hb, cfg, variant)?;
    Ok(tape.value(l).item())
}

/// Mean per-sample L1 or squared-L2 distance between paired rows.
fn distance_graph<T: Scalar>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
    cfg: &LossConfig,
    squared: bool,
) -> Result<NodeId> {
    let (m, d) = (tape.value(a).rows() as f64, tape.value(a).cols() as f64);
    let an = maybe_normalize(tape, a, cfg)?;
    let bn = maybe_normalize(tape, b, cfg)?;
    let diff = tape.sub(an, bn)?;
    let v = if squared { tape.mul(diff, diff)? } else { tape.abs(diff) };
    let s = tape.sum_all(v);
    Ok(tape.scale(s, 1.0 / (m * d)))
}

pub struct CombinedNodes {
    pub total: NodeId,
    pub symcl: Option<NodeId>,
    pub rec: Option<NodeId>,
    pub intra: Option<NodeId>,
}

/// Weighted combination of the active objectives on an existing tape.
pub fn combined_graph<T: Scalar>(
    tape: &mut Tape<T>,
    slide: NodeId,
    expression: Option<NodeId>,
    slide_view2: Option<NodeId>,
    mean_patch: Option<NodeId>,
    expr_targets: Option<NodeId>,
    expr_preds: Option<NodeId>,
    cfg: &LossConfig,
) -> Result<CombinedNodes> {
    cfg.validate()?;
    let w = cfg.weights;
    let mut parts: Vec<NodeId> = Vec::new();

    let symcl = if w.symcl > 0.0 {
        let g = expression
            .ok_or_else(|| Error::Config("symcl weight is positive but expression embeddings are missing".into()))?;
        let term = match cfg.distance_variant {
            DistanceVariant::Symcl => symcl_graph(tape, slide, g, cfg)?,
            DistanceVariant::L1 => distance_graph(tape, slide, g, cfg, false)?,
            DistanceVariant::L2 => distance_graph(tape, slide, g, cfg, true)?,
        };
        parts.push(tape.scale(term, w.symcl));
        Some(term)
    } else {
        None
    };

    let rec = if w.rec > 0.0 {
        let (t, p) = match (expr_targets, expr_preds) {
            (Some(t), Some(p)) => (t, p),
            _ => {
                return Err(Error::Config(
                    "rec weight is positive but expression targets/predictions are missing".into(),
                ))
            }
        };
        let term = rec_graph(tape, t, p)?;
        parts.push(tape.scale(term, w.rec));
        Some(term)
    } else {
        None
    };

    let intra = if w.intra > 0.0 {
        let term = intra_graph(tape, slide, slide_view2, mean_patch, cfg, cfg.intra_variant)
            .map_err(|e| Error::Config(format!("intra weight is positive but inputs are missing: {e}")))?;
        parts.push(tape.scale(term, w.intra));
        Some(term)
    } else {
        None
    };

    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    Ok(CombinedNodes { total, symcl, rec, intra })
}

/// Per-term values of one combined loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub symcl: f64,
    pub rec: f64,
    pub intra: f64,
}

pub fn combined_loss<T: Scalar>(
    batch: &BatchEmbeddings<T>,
    expr_targets: Option<&Tensor<T>>,
    expr_preds: Option<&Tensor<T>>,
    cfg: &LossConfig,
) -> Result<(T, LossReport)> {
    batch.check()?;
    let mut tape = Tape::new();
    let slide = tape.leaf(batch.slide.clone(), false);
    let expression = batch.expression.as_ref().map(|t| tape.leaf(t.clone(), false));
    let view2 = batch.slide_view2.as_ref().map(|t| tape.leaf(t.clone(), false));
    let meanp = batch.mean_patch.as_ref().map(|t| tape.leaf(t.clone(), false));
    let targets = expr_targets.map(|t| tape.leaf(t.clone(), false));
    let preds = expr_preds.map(|t| tape.leaf(t.clone(), false));
    let nodes = combined_graph(&mut tape, slide, expression, view2, meanp, targets, preds, cfg)?;
    let term = |n: Option<NodeId>| n.map(|id| tape.value(id).item().to_f64()).unwrap_or(0.0);
    let report = LossReport {
        total: tape.value(nodes.total).item().to_f64(),
        symcl: term(nodes.symcl),
        rec: term(nodes.rec),
        intra: term(nodes.intra),
    };
    Ok((tape.value(nodes.total).item(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn cfg_tau1() -> LossConfig {
        LossConfig { tau: 1.0, normalize_embeddings: false, ..LossConfig::default() }
    }

    fn rand_matrix(rng: &mut impl Rng, m: usize, n: usize) -> Tensor<f64> {
        Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn symcl_single_pair_is_zero() {
        let b = BatchEmbeddings::paired(
            Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap(),
            Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(symcl_loss(&b, &cfg_tau1()).unwrap(), 0.0);
    }

    #[test]
    fn symcl_orthonormal_pairs() {
        let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = BatchEmbeddings::paired(e.clone(), e).unwrap();
        let v = symcl_loss(&b, &cfg_tau1()).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn symcl_identical_embeddings() {
        let e = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let b = BatchEmbeddings::paired(e.clone(), e).unwrap();
        let v = symcl_loss(&b, &cfg_tau1()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn symcl_symmetry_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_matrix(&mut rng, 4, 3);
        let b = rand_matrix(&mut rng, 4, 3);
        let cfg = LossConfig { tau: 3.0, ..LossConfig::default() };
        let ab = symcl_loss(&BatchEmbeddings::paired(a.clone(), b.clone()).unwrap(), &cfg).unwrap();
        let ba = symcl_loss(&BatchEmbeddings::paired(b, a).unwrap(), &cfg).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn symcl_batch_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_matrix(&mut rng, 5, 4);
        let b = rand_matrix(&mut rng, 5, 4);
        let cfg = LossConfig::default();
        let base = symcl_loss(&BatchEmbeddings::paired(a.clone(), b.clone()).unwrap(), &cfg).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let ap = Tensor::stack_rows(&perm.map(|i| Tensor::vector(a.row(i).to_vec()))).unwrap();
        let bp = Tensor::stack_rows(&perm.map(|i| Tensor::vector(b.row(i).to_vec()))).unwrap();
        let v = symcl_loss(&BatchEmbeddings::paired(ap, bp).unwrap(), &cfg).unwrap();
        assert!((base - v).abs() < 1e-6);
    }

    #[test]
    fn symcl_decreases_as_diagonal_similarity_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = cfg_tau1();
        for _ in 0..10 {
            let h = rand_matrix(&mut rng, 4, 3);
            let g = rand_matrix(&mut rng, 4, 3);
            let base = symcl_loss(&BatchEmbeddings::paired(h.clone(), g.clone()).unwrap(), &cfg).unwrap();
            // nudge every g_i toward its matched h_i: raises diagonal dot
            // products while off-diagonals move arbitrarily less
            let boosted = Tensor::stack_rows(
                &(0..4)
                    .map(|i| {
                        Tensor::vector(
                            g.row(i).iter().zip(h.row(i)).map(|(gv, hv)| gv + 0.5 * hv).collect(),
                        )
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let b2 = symcl_loss(&BatchEmbeddings::paired(h, boosted).unwrap(), &cfg).unwrap();
            assert!(b2 < base, "{b2} !< {base}");
        }
    }

    #[test]
    fn rec_examples() {
        let t = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(rec_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(rec_loss(&t, &z).unwrap(), 5.0);

        let t2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let z2 = Tensor::zeros(vec![2, 2]);
        assert_eq!(rec_loss(&t2, &z2).unwrap(), 2.0);
    }

    #[test]
    fn rec_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = rand_matrix(&mut rng, 3, 4);
        let p = rand_matrix(&mut rng, 3, 4);
        let base = rec_loss(&t, &p).unwrap();
        // random orthogonal matrix via QR
        let raw = nalgebra::DMatrix::<f64>::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let q = raw.qr().q();
        let rot = |x: &Tensor<f64>| {
            let m = nalgebra::DMatrix::from_row_slice(3, 4, x.data());
            let r = m * &q;
            let mut data = Vec::with_capacity(12);
            for i in 0..3 {
                for j in 0..4 {
                    data.push(r[(i, j)]);
                }
            }
            Tensor::matrix(3, 4, data).unwrap()
        };
        let v = rec_loss(&rot(&t), &rot(&p)).unwrap();
        assert!((base - v).abs() < 1e-6);
    }

    #[test]
    fn rec_shape_mismatch() {
        let t = Tensor::<f64>::zeros(vec![2, 3]);
        let p = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(rec_loss(&t, &p).is_err());
    }

    fn intra_batch(m: usize, d: usize, seed: u64) -> BatchEmbeddings<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BatchEmbeddings {
            slide: rand_matrix(&mut rng, m, d),
            expression: None,
            slide_view2: Some(rand_matrix(&mut rng, m, d)),
            mean_patch: Some(rand_matrix(&mut rng, m, d)),
        }
    }

    #[test]
    fn intra_single_pair_is_zero() {
        let b = intra_batch(1, 3, 20);
        for v in [IntraVariant::Both, IntraVariant::LocalGlobal, IntraVariant::LocalLocal] {
            assert_eq!(intra_loss(&b, &cfg_tau1(), v).unwrap(), 0.0);
        }
    }

    #[test]
    fn intra_orthonormal_construction() {
        let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = BatchEmbeddings {
            slide: e.clone(),
            expression: None,
            slide_view2: Some(e.clone()),
            mean_patch: Some(e),
        };
        let expect = (1.0 + (-1.0f64).exp()).ln();
        for v in [IntraVariant::Both, IntraVariant::LocalGlobal, IntraVariant::LocalLocal] {
            let l = intra_loss(&b, &cfg_tau1(), v).unwrap();
            assert!((l - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn intra_both_is_mean_of_singles() {
        let b = intra_batch(4, 3, 21);
        let cfg = cfg_tau1();
        let both = intra_loss(&b, &cfg, IntraVariant::Both).unwrap();
        let lg = intra_loss(&b, &cfg, IntraVariant::LocalGlobal).unwrap();
        let ll = intra_loss(&b, &cfg, IntraVariant::LocalLocal).unwrap();
        assert!((both - 0.5 * (lg + ll)).abs() < 1e-12);
    }

    #[test]
    fn intra_missing_field_rejected() {
        let mut b = intra_batch(3, 3, 22);
        b.mean_patch = None;
        assert!(intra_loss(&b, &cfg_tau1(), IntraVariant::LocalGlobal).is_err());
        assert!(intra_loss(&b, &cfg_tau1(), IntraVariant::LocalLocal).is_ok());
    }

    #[test]
    fn combined_projection_and_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b = BatchEmbeddings::paired(rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4)).unwrap();
        let targets = rand_matrix(&mut rng, 3, 6);
        let preds = rand_matrix(&mut rng, 3, 6);

        let only_symcl = LossConfig {
            tau: 1.0,
            normalize_embeddings: false,
            weights: LossWeights { symcl: 1.0, rec: 0.0, intra: 0.0 },
            ..LossConfig::default()
        };
        let (v, rep) = combined_loss(&b, None, None, &only_symcl).unwrap();
        assert_eq!(v, symcl_loss(&b, &only_symcl).unwrap());
        assert_eq!(rep.total, rep.symcl);

        let only_rec = LossConfig {
            weights: LossWeights { symcl: 0.0, rec: 1.0, intra: 0.0 },
            ..only_symcl.clone()
        };
        let (v, _) = combined_loss(&b, Some(&targets), Some(&targets), &only_rec).unwrap();
        assert_eq!(v, 0.0);

        let both = LossConfig {
            weights: LossWeights { symcl: 1.0, rec: 1.0, intra: 0.0 },
            ..only_symcl.clone()
        };
        let (v, _) = combined_loss(&b, Some(&targets), Some(&preds), &both).unwrap();
        let s = symcl_loss(&b, &only_symcl).unwrap();
        let r = rec_loss(&targets, &preds).unwrap();
        assert!((v - (s + r)).abs() < 1e-12);
    }

    #[test]
    fn combined_missing_inputs_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let b = BatchEmbeddings {
            slide: rand_matrix(&mut rng, 3, 4),
            expression: None,
            slide_view2: None,
            mean_patch: None,
        };
        let cfg = LossConfig::default(); // symcl weight 1 but no expression
        assert!(matches!(combined_loss(&b, None, None, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn all_losses_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let cfg = LossConfig { tau: 2.0, ..LossConfig::default() };
        let (m, d, g) = (4usize, 5usize, 6usize);
        let slide = rand_matrix(&mut rng, m, d);
        let expr = rand_matrix(&mut rng, m, d);
        let view2 = rand_matrix(&mut rng, m, d);
        let meanp = rand_matrix(&mut rng, m, d);
        let targets = rand_matrix(&mut rng, m, g);
        let preds = rand_matrix(&mut rng, m, g);

        let c = cfg.clone();
        let err = grad_check(
            move |tape, ids| symcl_graph(tape, ids[0], ids[1], &c),
            &[slide.clone(), expr.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "symcl err = {err}");

        let err = grad_check(
            |tape, ids| rec_graph(tape, ids[0], ids[1]),
            &[targets.clone(), preds.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rec err = {err}");

        let c = cfg.clone();
        let err = grad_check(
            move |tape, ids| intra_graph(tape, ids[0], Some(ids[1]), Some(ids[2]), &c, IntraVariant::Both),
            &[slide, view2, meanp],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "intra err = {err}");
    }
}
