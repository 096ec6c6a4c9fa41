//! On-disk carriers: the binary patch-embedding file, the expression
//! CSV, and the JSON-lines manifest.
//!
//! Embedding file layout (little-endian):
//! - magic "TEMB", u16 version, u8 dtype (0 = f32)
//! - u32 n_patches, u32 dim, u8 has_coords
//! - n_patches×dim f32 payload, row-major
//! - optional n_patches×2 f32 coordinate block

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const EMB_MAGIC: &[u8; 4] = b"TEMB";
pub const EMB_VERSION: u16 = 1;

/// Patch embeddings for one slide, with optional patch coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingSet {
    pub embeddings: Tensor<f32>,
    pub coords: Option<Vec<[f32; 2]>>,
}

impl PatchEmbeddingSet {
    pub fn n_patches(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

pub(crate) struct CountingReader<R> {
    pub(crate) inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub(crate) fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: start,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_at(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b, what)?;
        Ok(b[0])
    }

    pub(crate) fn f32_block(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact_at(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn save_embeddings(path: &Path, set: &PatchEmbeddingSet) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    w.write_all(&EMB_VERSION.to_le_bytes())?;
    w.write_all(&[0u8])?; // dtype f32
    w.write_all(&(set.n_patches() as u32).to_le_bytes())?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    w.write_all(&[set.coords.is_some() as u8])?;
    for v in set.embeddings.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(coords) = &set.coords {
        if coords.len() != set.n_patches() {
            return Err(Error::dim("coordinate count", set.n_patches(), coords.len()));
        }
        for c in coords {
            w.write_all(&c[0].to_le_bytes())?;
            w.write_all(&c[1].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<PatchEmbeddingSet> {
    let mut r = CountingReader { inner: BufReader::new(std::fs::File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != EMB_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"TEMB\"") });
    }
    let version = r.u16("version")?;
    if version != EMB_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {EMB_VERSION}"),
        });
    }
    let dtype = r.u8("dtype")?;
    if dtype != 0 {
        return Err(Error::Format { offset: 6, message: format!("unsupported dtype {dtype}, expected 0 (f32)") });
    }
    let n_patches = r.u32("n_patches")? as usize;
    let dim = r.u32("dim")? as usize;
    let has_coords = r.u8("has_coords")?;
    if n_patches == 0 {
        return Err(Error::Input(format!("embedding file {} describes an empty slide", path.display())));
    }
    let payload = r.f32_block(n_patches * dim, "embedding payload")?;
    let coords = match has_coords {
        0 => None,
        1 => {
            let raw = r.f32_block(n_patches * 2, "coordinate block")?;
            Some(raw.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        }
        other => {
            return Err(Error::Format { offset: 15, message: format!("invalid has_coords flag {other}") });
        }
    };
    Ok(PatchEmbeddingSet {
        embeddings: Tensor::matrix(n_patches, dim, payload)?,
        coords,
    })
}

/// One slide's gene expression vector with gene identifiers, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionProfile {
    pub gene_ids: Vec<String>,
    pub values: Vec<f32>,
}

impl ExpressionProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn save_expression(path: &Path, profile: &ExpressionProfile) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "gene_id,value")?;
    for (id, v) in profile.gene_ids.iter().zip(&profile.values) {
        writeln!(w, "{id},{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_expression(path: &Path) -> Result<ExpressionProfile> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut gene_ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "gene_id,value" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header \"gene_id,value\", got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, raw) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: "expected two comma-separated fields".into(),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("duplicate gene_id {id:?}"),
            });
        }
        let value: f32 = raw.trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            message: format!("non-numeric value {raw:?} for gene {id:?}"),
        })?;
        gene_ids.push(id.to_string());
        values.push(value);
    }
    Ok(ExpressionProfile { gene_ids, values })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub slide_id: String,
    pub embedding_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_path: Option<String>,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory the manifest was loaded from; relative paths resolve here.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut records: Vec<ManifestRecord> = Vec::new();
        let mut ids = std::collections::HashSet::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: format!("invalid manifest record: {e}"),
            })?;
            if !ids.insert(rec.slide_id.clone()) {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("duplicate slide_id {:?}", rec.slide_id),
                });
            }
            records.push(rec);
        }
        let m = Manifest { records, base_dir };
        for rec in &m.records {
            let p = m.resolve(&rec.embedding_path);
            if !p.exists() {
                return Err(Error::Input(format!(
                    "manifest references missing embedding file {}",
                    p.display()
                )));
            }
            if let Some(ep) = &rec.expression_path {
                let p = m.resolve(ep);
                if !p.exists() {
                    return Err(Error::Input(format!(
                        "manifest references missing expression file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(path: &Path, records: &[ManifestRecord]) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for rec in records {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// A fully loaded (slide, expression, labels, group) record.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub slide_id: String,
    pub patches: PatchEmbeddingSet,
    pub expression: Option<Vec<f32>>,
    pub labels: Vec<u8>,
    pub group_id: Option<String>,
    pub split: String,
}

/// In-memory dataset backing pretraining and evaluation.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub gene_ids: Vec<String>,
}

impl PairDataset {
    pub fn load(manifest_path: &Path) -> Result<PairDataset> {
        let manifest = Manifest::load(manifest_path)?;
        let mut records = Vec::with_capacity(manifest.records.len());
        let mut gene_ids: Vec<String> = Vec::new();
        for rec in &manifest.records {
            let patches = load_embeddings(&manifest.resolve(&rec.embedding_path))?;
            let expression = match &rec.expression_path {
                None => None,
                Some(ep) => {
                    let profile = load_expression(&manifest.resolve(ep))?;
                    if gene_ids.is_empty() {
                        gene_ids = profile.gene_ids.clone();
                    } else if gene_ids != profile.gene_ids {
                        return Err(Error::Input(format!(
                            "inconsistent gene set in {} (slide {})",
                            ep, rec.slide_id
                        )));
                    }
                    Some(profile.values)
                }
            };
            records.push(PairRecord {
                slide_id: rec.slide_id.clone(),
                patches,
                expression,
                labels: rec.labels.clone(),
                group_id: rec.group_id.clone(),
                split: rec.split.clone(),
            });
        }
        Ok(PairDataset { records, gene_ids })
    }

    pub fn split(&self, tag: &str) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.split == tag).collect()
    }
}
