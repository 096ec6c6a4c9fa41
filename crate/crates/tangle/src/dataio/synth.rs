//! Synthetic coupled slide/expression dataset generator.
//!
//! Each slide draws a latent vector from its class anchor plus a group
//! offset; signal patches are a linear image of that latent, while a
//! configurable fraction of background patches comes from a shared
//! class-independent distribution plus a per-slide nuisance vector.
//! Expression is a second linear image of the same latent, so the two
//! modalities are coupled exactly through the latent.

use super::formats::{save_embeddings, save_expression, ExpressionProfile, Manifest, ManifestRecord, PatchEmbeddingSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::RngKey;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub patch_dim: usize,
    pub n_genes: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    /// Per-patch additive noise.
    pub patch_noise: f64,
    /// Additive noise on the expression vector.
    pub expr_noise: f64,
    /// Per-slide latent jitter around the class/group anchor.
    pub latent_noise: f64,
    /// Mean fraction of background patches per slide.
    pub background_fraction: f64,
    /// Scale of the per-slide nuisance shared by its background patches.
    pub background_nuisance: f64,
    /// Strength of the latent→expression map; 0 decouples expression.
    pub coupling: f64,
    pub n_groups_per_class: usize,
    /// Scale of per-group latent offsets.
    pub group_scale: f64,
    /// Scale of class anchors.
    pub anchor_scale: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides: 440,
            n_classes: 2,
            latent_dim: 8,
            patch_dim: 32,
            n_genes: 120,
            patches_min: 96,
            patches_max: 160,
            patch_noise: 0.3,
            expr_noise: 0.2,
            latent_noise: 0.4,
            background_fraction: 0.7,
            background_nuisance: 1.0,
            coupling: 1.0,
            n_groups_per_class: 4,
            group_scale: 0.8,
            anchor_scale: 2.0,
            train_fraction: 0.55,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 || self.n_classes == 0 {
            return Err(Error::Config("n_slides and n_classes must be positive".into()));
        }
        if self.latent_dim > self.patch_dim.min(self.n_genes) {
            return Err(Error::Config(format!(
                "latent_dim {} must not exceed min(patch_dim, n_genes) = {}",
                self.latent_dim,
                self.patch_dim.min(self.n_genes)
            )));
        }
        if self.n_classes > self.latent_dim {
            return Err(Error::Config("n_classes must not exceed latent_dim (orthogonal anchors)".into()));
        }
        if self.patches_min == 0 || self.patches_min > self.patches_max {
            return Err(Error::Config("need 1 ≤ patches_min ≤ patches_max".into()));
        }
        for (name, v) in [
            ("patch_noise", self.patch_noise),
            ("expr_noise", self.expr_noise),
            ("latent_noise", self.latent_noise),
            ("background_nuisance", self.background_nuisance),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if !(0.0..=0.95).contains(&self.background_fraction) {
            return Err(Error::Config("background_fraction must be in [0, 0.95]".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must be in [0, 1]".into()));
        }
        if self.n_groups_per_class == 0 {
            return Err(Error::Config("n_groups_per_class must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale).collect()
}

/// Generate the dataset under `out_dir` and return the manifest path.
/// Fully seeded: identical configs produce byte-identical directories.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("embeddings"))?;
    std::fs::create_dir_all(out_dir.join("expression"))?;

    let root = RngKey::new(cfg.seed);
    let r = cfg.latent_dim;

    // fixed linear maps latent → patch space / expression space
    let a_map = gaussian_vec(&mut root.child(1).rng(), cfg.patch_dim * r, 1.0 / (r as f64).sqrt());
    let b_map = gaussian_vec(&mut root.child(2).rng(), cfg.n_genes * r, 1.0 / (r as f64).sqrt());
    let background_anchor = gaussian_vec(&mut root.child(3).rng(), cfg.patch_dim, cfg.anchor_scale);
    let group_offsets: Vec<Vec<f64>> = {
        let mut rng = root.child(4).rng();
        (0..cfg.n_classes * cfg.n_groups_per_class)
            .map(|_| gaussian_vec(&mut rng, r, cfg.group_scale))
            .collect()
    };

    // seeded train/test assignment
    let n_train = (cfg.train_fraction * cfg.n_slides as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_slides).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut root.child(5).rng());
    }
    let mut is_train = vec![false; cfg.n_slides];
    for &i in order.iter().take(n_train) {
        is_train[i] = true;
    }

    let gene_ids: Vec<String> = (0..cfg.n_genes).map(|g| format!("g{g:05}")).collect();
    let mut records = Vec::with_capacity(cfg.n_slides);
    let mut latents_csv = String::from("slide_id,class,group_id,split");
    for j in 0..r {
        latents_csv.push_str(&format!(",z{j}"));
    }
    latents_csv.push('\n');

    for i in 0..cfg.n_slides {
        let class = i % cfg.n_classes;
        let bucket = (i / cfg.n_classes) % cfg.n_groups_per_class;
        let group_id = format!("c{class}_g{bucket}");
        let slide_id = format!("slide_{i:05}");
        let key = root.child(1000 + i as u64);

        // latent: orthogonal class anchor + group offset + jitter
        let mut z = vec![0.0f64; r];
        z[class] = cfg.anchor_scale;
        let off = &group_offsets[class * cfg.n_groups_per_class + bucket];
        for (zv, ov) in z.iter_mut().zip(off) {
            *zv += ov;
        }
        let jitter = gaussian_vec(&mut key.child(0).rng(), r, cfg.latent_noise);
        for (zv, jv) in z.iter_mut().zip(&jitter) {
            *zv += jv;
        }

        // patches
        let mut prng = key.child(1).rng();
        let n_patches = prng.gen_range(cfg.patches_min..=cfg.patches_max);
        let frac_bg = (cfg.background_fraction + prng.gen_range(-0.15..0.15)).clamp(0.0, 0.95);
        let nuisance = gaussian_vec(&mut key.child(2).rng(), cfg.patch_dim, cfg.background_nuisance);
        let signal: Vec<f64> = (0..cfg.patch_dim)
            .map(|p| (0..r).map(|q| a_map[p * r + q] * z[q]).sum())
            .collect();
        let mut emb = Vec::with_capacity(n_patches * cfg.patch_dim);
        let mut coords = Vec::with_capacity(n_patches);
        for pidx in 0..n_patches {
            // keep at least one signal patch per slide
            let background = pidx != 0 && prng.gen::<f64>() < frac_bg;
            let noise = gaussian_vec(&mut prng, cfg.patch_dim, cfg.patch_noise);
            for p in 0..cfg.patch_dim {
                let base = if background {
                    background_anchor[p] + nuisance[p]
                } else {
                    signal[p]
                };
                emb.push((base + noise[p]) as f32);
            }
            coords.push([(pidx % 16) as f32, (pidx / 16) as f32]);
        }
        let set = PatchEmbeddingSet {
            embeddings: Tensor::matrix(n_patches, cfg.patch_dim, emb)?,
            coords: Some(coords),
        };
        let emb_rel = format!("embeddings/{slide_id}.temb");
        save_embeddings(&out_dir.join(&emb_rel), &set)?;

        // expression
        let enoise = gaussian_vec(&mut key.child(3).rng(), cfg.n_genes, cfg.expr_noise);
        let values: Vec<f32> = (0..cfg.n_genes)
            .map(|g| {
                let coupled: f64 = (0..r).map(|q| b_map[g * r + q] * z[q]).sum();
                (cfg.coupling * coupled + enoise[g]) as f32
            })
            .collect();
        let expr_rel = format!("expression/{slide_id}.csv");
        save_expression(
            &out_dir.join(&expr_rel),
            &ExpressionProfile { gene_ids: gene_ids.clone(), values },
        )?;

        let mut labels = vec![0u8; cfg.n_classes];
        labels[class] = 1;
        let split = if is_train[i] { "train" } else { "test" };
        records.push(ManifestRecord {
            slide_id: slide_id.clone(),
            embedding_path: emb_rel,
            expression_path: Some(expr_rel),
            labels,
            group_id: Some(group_id.clone()),
            split: split.into(),
        });

        latents_csv.push_str(&format!("{slide_id},{class},{group_id},{split}"));
        for zv in &z {
            latents_csv.push_str(&format!(",{zv}"));
        }
        latents_csv.push('\n');
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    Manifest::save(&manifest_path, &records)?;
    let mut f = std::fs::File::create(out_dir.join("latents.csv"))?;
    f.write_all(latents_csv.as_bytes())?;
    Ok(manifest_path)
}
