//! Pretraining loop: per-epoch patch subsampling, batched contrastive
//! optimization with AdamW under a warmup+cosine schedule, and binary
//! checkpoint serialization.

use crate::dataio::formats::{CountingReader, PairDataset, PatchEmbeddingSet};
use crate::encoders::{abmil_graph, expression_graph, recon_graph, Mode, ModelConfig, TangleModel};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::objectives::{combined_graph, LossConfig};
use crate::rng::RngKey;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"TNGL";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub patches_per_slide: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 50,
            warmup_epochs: 5,
            lr_start: 1e-8,
            lr_peak: 1e-4,
            lr_final: 1e-8,
            patches_per_slide: 4096,
            loss: LossConfig::default(),
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be smaller than epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.patches_per_slide == 0 {
            return Err(Error::Config("batch_size and patches_per_slide must be positive".into()));
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_peak", self.lr_peak), ("lr_final", self.lr_final)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.loss.validate()
    }
}

/// Draw exactly `n` patches: a uniform subset without replacement when
/// the slide has at least `n`, otherwise all patches plus uniform
/// resampling with replacement up to `n`. Order is randomized.
pub fn sample_patches(set: &PatchEmbeddingSet, n: usize, key: RngKey) -> Result<PatchEmbeddingSet> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    if n == 0 {
        return Err(Error::Parameter("sample_patches: n must be positive".into()));
    }
    let total = set.n_patches();
    if total == 0 {
        return Err(Error::Input("sample_patches: empty slide".into()));
    }
    let mut rng = key.rng();
    let idx: Vec<usize> = if total >= n {
        rand::seq::index::sample(&mut rng, total, n).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..total).collect();
        idx.extend((total..n).map(|_| rng.gen_range(0..total)));
        idx.shuffle(&mut rng);
        idx
    };
    let d = set.dim();
    let mut data = Vec::with_capacity(n * d);
    for &i in &idx {
        data.extend_from_slice(set.embeddings.row(i));
    }
    Ok(PatchEmbeddingSet {
        embeddings: Tensor::matrix(n, d, data)?,
        coords: set.coords.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
    })
}

/// Learning rate at a global step: linear warmup `lr_start → lr_peak`
/// over the warmup epochs, then cosine decay `lr_peak → lr_final`.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warmup {
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step as f64 / warmup as f64;
    }
    // last step lands exactly on lr_final
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 || step + 1 >= total {
        return cfg.lr_final;
    }
    let t = (step - warmup) as f64 / span as f64;
    cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW first/second moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn init(shapes: &[Vec<usize>]) -> Self {
        OptimizerState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adamw_step gradient count", params.len(), grads.len()));
    }
    if params.len() != state.m.len() {
        return Err(Error::dim("adamw_step optimizer state size", params.len(), state.m.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::ONE;
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * cfg.weight_decay);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);

    for (pi, (name, p)) in params.iter_mut().enumerate() {
        let g = &grads[pi];
        if g.shape() != p.shape() {
            return Err(Error::dim(
                &format!("adamw_step gradient shape for {name}"),
                p.len(),
                g.len(),
            ));
        }
        if !g.all_finite() {
            return Err(Error::Train(format!("non-finite gradient for parameter {name}")));
        }
        let m = state.m[pi].data_mut();
        let v = state.v[pi].data_mut();
        let pd = p.data_mut();
        for e in 0..pd.len() {
            let ge = g.data()[e];
            m[e] = b1 * m[e] + (one - b1) * ge;
            v[e] = b2 * v[e] + (one - b2) * ge * ge;
            let mhat = m[e] * inv_bc1;
            let vhat = v[e] * inv_bc2;
            pd[e] = pd[e] - lr_t * mhat / (vhat.sqrt() + eps) - decay * pd[e];
        }
    }
    Ok(())
}

/// Trained parameters plus the configuration and seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: TangleModel<f32>,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: u64,
}

/// One loss-log line; serialized as CSV
/// `epoch,step,lr,loss_total,loss_symcl,loss_rec,loss_intra`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub symcl: f64,
    pub rec: f64,
    pub intra: f64,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("epoch,step,lr,loss_total,loss_symcl,loss_rec,loss_intra\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.total, r.symcl, r.rec, r.intra
        ));
    }
    out
}

fn mean_patch_row(set: &PatchEmbeddingSet) -> Tensor<f32> {
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
    Tensor::matrix(1, d, acc).unwrap()
}

/// Run the full pretraining loop and return the checkpoint with the
/// per-step loss log. Deterministic given (dataset, cfg): identical
/// inputs produce bitwise-identical checkpoints.
pub fn pretrain(dataset: &PairDataset, cfg: &TrainConfig) -> Result<(ModelCheckpoint, Vec<LossRow>)> {
    use rand::seq::SliceRandom;
    cfg.validate()?;
    let w = cfg.loss.weights;
    let needs_expr = w.symcl > 0.0 || w.rec > 0.0;
    let needs_intra = w.intra > 0.0;
    let contrastive = w.symcl > 0.0 || needs_intra;
    if contrastive && cfg.batch_size < 2 {
        return Err(Error::Config(
            "contrastive objectives need batch_size ≥ 2; a single-slide batch has a degenerate loss".into(),
        ));
    }
    let n = dataset.records.len();
    if n < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {n} records, fewer than one batch of {}",
            cfg.batch_size
        )));
    }
    for rec in &dataset.records {
        if rec.patches.dim() != cfg.model.patch_dim {
            return Err(Error::dim(
                &format!("patch dimension of slide {}", rec.slide_id),
                cfg.model.patch_dim,
                rec.patches.dim(),
            ));
        }
        if needs_expr {
            match &rec.expression {
                None => {
                    return Err(Error::Config(format!(
                        "slide {} has no expression profile but the loss requires one",
                        rec.slide_id
                    )))
                }
                Some(e) if e.len() != cfg.model.n_genes => {
                    return Err(Error::dim(
                        &format!("gene count of slide {}", rec.slide_id),
                        cfg.model.n_genes,
                        e.len(),
                    ))
                }
                _ => {}
            }
        }
    }

    let root = RngKey::new(cfg.seed);
    let mut model: TangleModel<f32> = TangleModel::init(&cfg.model, w.rec > 0.0, root.child(0));
    let mut shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    if !needs_expr {
        // only the slide encoder is trained; keep state aligned with it
        shapes.truncate(16);
    }
    let mut opt = OptimizerState::<f32>::init(&shapes);
    let steps_per_epoch = n / cfg.batch_size;
    let shuffle_key = root.child(1);
    let sample_key = root.child(2);
    let dropout_key = root.child(3);

    let mut log = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_key.child(epoch as u64).rng());
        let esk = sample_key.child(epoch as u64);

        for batch_idx in 0..steps_per_epoch {
            let members = &order[batch_idx * cfg.batch_size..(batch_idx + 1) * cfg.batch_size];
            let lr = lr_at(global_step, cfg, steps_per_epoch);
            let dk = dropout_key.child(global_step as u64);

            let mut tape: Tape<f32> = Tape::new();
            let abmil_vars = model.abmil.register(&mut tape, true);
            let expr_vars = needs_expr.then(|| model.expr.register(&mut tape, true));
            let recon_vars = model.recon.as_ref().map(|r| r.register(&mut tape, true));

            let mut h_rows: Vec<NodeId> = Vec::with_capacity(members.len());
            let mut view2_rows: Vec<NodeId> = Vec::new();
            let mut mean_rows: Vec<NodeId> = Vec::new();
            let mut expr_data: Vec<f32> = Vec::new();
            for (bi, &ri) in members.iter().enumerate() {
                let rec = &dataset.records[ri];
                let sk = esk.child(ri as u64);
                let view1 = sample_patches(&rec.patches, cfg.patches_per_slide, sk.child(0))?;
                let p1 = tape.leaf(view1.embeddings, false);
                let (h1, _) = abmil_graph(&mut tape, &abmil_vars, p1, Mode::Train, dk.child(bi as u64 * 3))?;
                h_rows.push(h1);
                if needs_intra {
                    let view2 = sample_patches(&rec.patches, cfg.patches_per_slide, sk.child(1))?;
                    let p2 = tape.leaf(view2.embeddings, false);
                    let (h2, _) =
                        abmil_graph(&mut tape, &abmil_vars, p2, Mode::Train, dk.child(bi as u64 * 3 + 1))?;
                    view2_rows.push(h2);
                    // global view: the encoder applied to the one-patch bag
                    // holding the mean over the slide's full patch set
                    let pm = tape.leaf(mean_patch_row(&rec.patches), false);
                    let (hm, _) =
                        abmil_graph(&mut tape, &abmil_vars, pm, Mode::Train, dk.child(bi as u64 * 3 + 2))?;
                    mean_rows.push(hm);
                }
                if needs_expr {
                    expr_data.extend_from_slice(rec.expression.as_ref().unwrap());
                }
            }
            let slide = tape.concat_rows(&h_rows)?;
            let view2 = if needs_intra { Some(tape.concat_rows(&view2_rows)?) } else { None };
            let meanp = if needs_intra { Some(tape.concat_rows(&mean_rows)?) } else { None };
            let (expression, targets, preds) = if needs_expr {
                let x = tape.leaf(
                    Tensor::matrix(members.len(), cfg.model.n_genes, expr_data)?,
                    false,
                );
                let g = expression_graph(&mut tape, expr_vars.as_ref().unwrap(), x)?;
                let (t, p) = if let Some(rv) = &recon_vars {
                    (Some(x), Some(recon_graph(&mut tape, rv, slide)?))
                } else {
                    (None, None)
                };
                (Some(g), t, p)
            } else {
                (None, None, None)
            };

            let nodes = combined_graph(&mut tape, slide, expression, view2, meanp, targets, preds, &cfg.loss)?;
            let total = tape.value(nodes.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, step {global_step}"
                )));
            }
            let grads = tape.backward(nodes.total)?;

            let mut ids = abmil_vars.param_ids();
            if let Some(ev) = &expr_vars {
                ids.extend(ev.param_ids());
            }
            if let Some(rv) = &recon_vars {
                ids.extend(rv.param_ids());
            }
            let grad_tensors: Vec<Tensor<f32>> = ids
                .iter()
                .map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec())))
                .collect();
            let term = |nd: Option<NodeId>| nd.map(|id| tape.value(id).item() as f64).unwrap_or(0.0);
            let row = LossRow {
                epoch,
                step: global_step,
                lr,
                total,
                symcl: term(nodes.symcl),
                rec: term(nodes.rec),
                intra: term(nodes.intra),
            };

            let mut params = model.params_mut();
            if needs_expr {
                adamw_step(&mut params, &grad_tensors, &mut opt, lr, cfg)?;
            } else {
                // only the slide encoder is in the graph; update its slice
                adamw_step(&mut params[..16], &grad_tensors, &mut opt, lr, cfg)?;
            }
            drop(params);
            log.push(row);
            global_step += 1;
        }
    }

    let ckpt = ModelCheckpoint {
        model,
        config: cfg.clone(),
        seed: cfg.seed,
        step: global_step as u64,
    };
    Ok((ckpt, log))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    seed: u64,
    step: u64,
    with_recon: bool,
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let meta = CheckpointMeta {
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        with_recon: ckpt.model.recon.is_some(),
    };
    let blob = serde_json::to_vec(&meta)?;
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(&blob)?;
    for (name, tensor) in ckpt.model.named_params() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let mut r = CountingReader { inner: BufReader::new(std::fs::File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"TNGL\"") });
    }
    let version = r.u16("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}, expected {CKPT_VERSION}"),
        });
    }
    let blob_len = r.u32("config length")? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact_at(&mut blob, "config blob")?;
    let meta: CheckpointMeta = serde_json::from_slice(&blob).map_err(|e| Error::Format {
        offset: 10,
        message: format!("invalid config blob: {e}"),
    })?;
    meta.config.validate()?;

    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        let start = r.offset;
        match r.inner.read(&mut len_buf) {
            Ok(0) => break,
            Ok(4) => r.offset += 4,
            _ => {
                return Err(Error::Format {
                    offset: start,
                    message: "truncated while reading tensor record header".into(),
                })
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact_at(&mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: start,
            message: "tensor name is not valid UTF-8".into(),
        })?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dimension")? as usize);
        }
        let count = shape.iter().product::<usize>();
        let data = r.f32_block(count, &format!("payload of tensor {name}"))?;
        tensors.push((name, Tensor::new(shape, data)?));
    }

    let mut model: TangleModel<f32> = TangleModel::init(&meta.config.model, meta.with_recon, RngKey::new(0));
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for (name, param) in model.params_mut() {
        let loaded = by_name.remove(&name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("checkpoint is missing tensor {name}"),
        })?;
        if loaded.shape() != param.shape() {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    param.shape()
                ),
            });
        }
        *param = loaded;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format {
            offset: 0,
            message: format!("checkpoint contains unknown tensor {extra}"),
        });
    }
    Ok(ModelCheckpoint { model, config: meta.config, seed: meta.seed, step: meta.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{synth_generate, SynthConfig};
    use rand::Rng;

    fn tiny_set(n: usize, d: usize, seed: u64) -> PatchEmbeddingSet {
        let mut rng = RngKey::new(seed).rng();
        let data = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        PatchEmbeddingSet { embeddings: Tensor::matrix(n, d, data).unwrap(), coords: None }
    }

    #[test]
    fn sample_exact_count_is_permutation() {
        let set = tiny_set(7, 3, 1);
        let out = sample_patches(&set, 7, RngKey::new(2)).unwrap();
        let mut orig: Vec<Vec<u32>> = (0..7).map(|i| set.embeddings.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut got: Vec<Vec<u32>> = (0..7).map(|i| out.embeddings.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        orig.sort();
        got.sort();
        assert_eq!(orig, got);
    }

    #[test]
    fn oversampling_covers_all_rows() {
        let set = tiny_set(3, 4, 3);
        let out = sample_patches(&set, 5, RngKey::new(4)).unwrap();
        assert_eq!(out.n_patches(), 5);
        for i in 0..3 {
            let want: Vec<u32> = set.embeddings.row(i).iter().map(|v| v.to_bits()).collect();
            let found = (0..5).any(|j| {
                out.embeddings.row(j).iter().map(|v| v.to_bits()).collect::<Vec<u32>>() == want
            });
            assert!(found, "row {i} missing after oversampling");
        }
    }

    #[test]
    fn sampling_determinism() {
        let set = tiny_set(20, 4, 5);
        let a = sample_patches(&set, 8, RngKey::new(6)).unwrap();
        let b = sample_patches(&set, 8, RngKey::new(6)).unwrap();
        let c = sample_patches(&set, 8, RngKey::new(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn sched_cfg() -> TrainConfig {
        TrainConfig { epochs: 50, warmup_epochs: 5, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = sched_cfg();
        let spe = 10;
        assert_eq!(lr_at(0, &cfg, spe), 1e-8);
        assert!((lr_at(5 * spe, &cfg, spe) - 1e-4).abs() < 1e-18);
        assert!((lr_at(50 * spe - 1, &cfg, spe) - 1e-8).abs() < 1e-12);
    }

    #[test]
    fn schedule_continuous_at_warmup_boundary() {
        let cfg = sched_cfg();
        let spe = 13;
        let warmup = cfg.warmup_epochs * spe;
        let before = cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * warmup as f64 / warmup as f64;
        assert!((lr_at(warmup, &cfg, spe) - before).abs() < 1e-12);
        // warmup is monotone increasing
        for s in 1..warmup {
            assert!(lr_at(s, &cfg, spe) > lr_at(s - 1, &cfg, spe));
        }
    }

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn adamw_zero_grad_identity_and_decay() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_param(1.5);
        let mut state = OptimizerState::init(&[vec![1]]);
        let mut params = vec![("p".to_string(), &mut p)];
        adamw_step(&mut params, &[scalar_param(0.0)], &mut state, 0.1, &cfg).unwrap();
        drop(params);
        assert_eq!(p.item(), 1.5);

        let cfg = TrainConfig { weight_decay: 0.5, ..TrainConfig::default() };
        let mut state = OptimizerState::init(&[vec![1]]);
        let mut params = vec![("p".to_string(), &mut p)];
        adamw_step(&mut params, &[scalar_param(0.0)], &mut state, 0.1, &cfg).unwrap();
        drop(params);
        assert!((p.item() - 1.5 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, adam_eps: 1e-12, ..TrainConfig::default() };
        let mut p = scalar_param(2.0);
        let mut state = OptimizerState::init(&[vec![1]]);
        let mut params = vec![("p".to_string(), &mut p)];
        adamw_step(&mut params, &[scalar_param(-3.7)], &mut state, 0.01, &cfg).unwrap();
        drop(params);
        assert!((p.item() - 2.01).abs() < 1e-9, "got {}", p.item());
    }

    #[test]
    fn adamw_matches_scripted_adam_three_steps() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let (b1, b2, eps, lr) = (cfg.beta1, cfg.beta2, cfg.adam_eps, 0.05);
        let grads = [0.4, -1.1, 0.7];

        let mut p = scalar_param(1.0);
        let mut state = OptimizerState::init(&[vec![1]]);
        for g in grads {
            let mut params = vec![("p".to_string(), &mut p)];
            adamw_step(&mut params, &[scalar_param(g)], &mut state, lr, &cfg).unwrap();
        }

        // reference closed form
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!((p.item() - x).abs() < 1e-10, "adamw {} vs oracle {x}", p.item());
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param(1.0);
        let mut state = OptimizerState::init(&[vec![1]]);
        let mut params = vec![("layer.weight".to_string(), &mut p)];
        let err = adamw_step(&mut params, &[scalar_param(f64::NAN)], &mut state, 0.1, &cfg).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }

    fn tiny_train_setup() -> (tempfile::TempDir, PairDataset, TrainConfig) {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            n_slides: 16,
            n_classes: 2,
            latent_dim: 4,
            patch_dim: 6,
            n_genes: 12,
            patches_min: 8,
            patches_max: 12,
            n_groups_per_class: 2,
            seed: 11,
            ..SynthConfig::default()
        };
        let manifest = synth_generate(&synth, dir.path()).unwrap();
        let ds = PairDataset::load(&manifest).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 6,
            warmup_epochs: 1,
            lr_peak: 1e-3,
            patches_per_slide: 8,
            seed: 3,
            model: ModelConfig {
                patch_dim: 6,
                n_genes: 12,
                embed_dim: 5,
                pre_attn_hidden: 8,
                gate_hidden: 6,
                expr_hidden: 8,
                recon_hidden: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        (dir, ds, cfg)
    }

    #[test]
    fn pretrain_loss_decreases_and_is_deterministic() {
        let (_dir, ds, cfg) = tiny_train_setup();
        let (ckpt1, log) = pretrain(&ds, &cfg).unwrap();
        let epoch_mean = |e: usize| {
            let rows: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        assert!(
            epoch_mean(cfg.epochs - 1) < epoch_mean(0),
            "final epoch {} vs first {}",
            epoch_mean(cfg.epochs - 1),
            epoch_mean(0)
        );

        let (ckpt2, _) = pretrain(&ds, &cfg).unwrap();
        let d = tempfile::tempdir().unwrap();
        let (p1, p2) = (d.path().join("a.tngl"), d.path().join("b.tngl"));
        save_checkpoint(&ckpt1, &p1).unwrap();
        save_checkpoint(&ckpt2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pretrain_rejects_degenerate_contrastive_batch() {
        let (_dir, ds, mut cfg) = tiny_train_setup();
        cfg.batch_size = 1;
        assert!(matches!(pretrain(&ds, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_rejects_undersized_dataset() {
        let (_dir, ds, mut cfg) = tiny_train_setup();
        cfg.batch_size = 64;
        assert!(matches!(pretrain(&ds, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let cfg = TrainConfig {
            model: ModelConfig {
                patch_dim: 5,
                n_genes: 7,
                embed_dim: 4,
                pre_attn_hidden: 6,
                gate_hidden: 4,
                expr_hidden: 6,
                recon_hidden: 6,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let ckpt = ModelCheckpoint {
            model: TangleModel::init(&cfg.model, true, RngKey::new(42)),
            config: cfg,
            seed: 42,
            step: 17,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tngl");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let path2 = dir.path().join("c2.tngl");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_truncation_and_version_errors() {
        let cfg = TrainConfig {
            model: ModelConfig {
                patch_dim: 3,
                n_genes: 4,
                embed_dim: 3,
                pre_attn_hidden: 4,
                gate_hidden: 3,
                expr_hidden: 4,
                recon_hidden: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let ckpt = ModelCheckpoint {
            model: TangleModel::init(&cfg.model, false, RngKey::new(1)),
            config: cfg,
            seed: 1,
            step: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tngl");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let mut bumped = bytes.clone();
        bumped[4] = CKPT_VERSION as u8 + 1;
        std::fs::write(&path, &bumped).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version"), "{err}");
    }
}
