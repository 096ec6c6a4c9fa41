//! Command-line entry point. Every subcommand writes its outputs and a
//! resolved-config snapshot into the run directory, and all randomness
//! derives from the seed, so runs are exactly reproducible.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage failure.

use crate::analysis::{
    export_attention, integrated_gradients, rank_report_csv, rankme, zero_baseline, IgTarget,
};
use crate::dataio::formats::{load_expression, PairDataset};
use crate::dataio::synth::{synth_generate, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_prototype, embed_slide, linear_probe, macro_auc, mean_pool, prototype_classify,
    recall_at_k, retrieve, LabeledEmbedding, ProbeConfig, PrototypeKind,
};
use crate::numerics::Tensor;
use crate::training::{load_checkpoint, loss_log_csv, pretrain, save_checkpoint, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "tangle", version, about = "Transcriptomics-guided slide representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining of the slide encoder on (slide, expression) pairs
    Pretrain(PretrainArgs),
    /// Embed every slide of a manifest with a trained checkpoint
    Embed(EmbedArgs),
    /// Few-shot linear probing with macro-AUC
    Probe(ProbeArgs),
    /// Prototype classification by L2 distance
    Prototype(PrototypeArgs),
    /// Slide retrieval with Recall@k over sample groups
    Retrieve(RetrieveArgs),
    /// RankMe smooth-rank analysis of an embedding table
    Rank(RankArgs),
    /// Integrated Gradients gene attribution
    Attribute(AttributeArgs),
    /// Generate a synthetic coupled dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Training configuration JSON (flags override file keys)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest split to train on
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct EmbedArgs {
    /// Required unless --pool mean
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// tangle (attention pooling via checkpoint) or mean
    #[arg(long, default_value = "tangle")]
    pool: String,
    /// Also write per-slide attention heatmap CSVs (tangle pool only)
    #[arg(long)]
    attention: bool,
}

#[derive(Args)]
struct ProbeArgs {
    /// Directory holding embeddings.csv from `embed`
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Checkpoint for on-the-fly embedding (with --manifest)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Optional manifest supplying labels, overriding the embedding table
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Shots per class
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Seeded repetitions
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrototypeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Comma-separated slide ids for the positive prototype
    #[arg(long)]
    pos_ids: String,
    /// Comma-separated slide ids for the normal prototype
    #[arg(long)]
    normal_ids: String,
    /// Use only the first k ids of each list
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Relevance definition; only `group` is supported
    #[arg(long, default_value = "group")]
    groups: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Expression CSV to attribute
    #[arg(long)]
    expression: PathBuf,
    #[arg(long, default_value_t = 128)]
    steps: usize,
    /// Baseline expression CSV; zero log2 fold change when omitted
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Reference slide embedding (comma-separated floats) for the cosine
    /// target; omitted → projection onto the uniform direction
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthConfig JSON (flags override file keys)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parse argv and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = check_thread_env() {
        eprintln!("error: {msg}");
        return 2;
    }
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Prototype(a) => cmd_prototype(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(Error::Parameter(msg)) if msg.starts_with("usage:") => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// `TANGLE_THREADS` caps internal parallelism; all current code paths
/// are single-threaded, so the value is validated and recorded only.
fn check_thread_env() -> std::result::Result<(), String> {
    match std::env::var("TANGLE_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("TANGLE_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn usage(msg: &str) -> Error {
    Error::Parameter(format!("usage: {msg}"))
}

fn init_run_dir(out: &Path, snapshot: &impl serde::Serialize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(snapshot)?;
    std::fs::write(out.join("resolved_config.json"), json + "\n")?;
    Ok(())
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("invalid config file {}: {e}", p.display())))
        }
    }
}

// ── subcommands ───────────────────────────────────────────────────────

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_json_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    init_run_dir(&a.out, &cfg)?;
    let dataset = PairDataset::load(&a.manifest)?;
    let selected: Vec<_> = dataset.split(&a.split).into_iter().cloned().collect();
    if selected.is_empty() {
        return Err(Error::Input(format!("manifest has no records with split {:?}", a.split)));
    }
    let train_set = PairDataset { records: selected, gene_ids: dataset.gene_ids.clone() };
    let (ckpt, log) = pretrain(&train_set, &cfg)?;
    save_checkpoint(&ckpt, &a.out.join("checkpoint.tngl"))?;
    write_file(&a.out.join("loss_log.csv"), &loss_log_csv(&log))?;
    Ok(())
}

const EMB_TABLE: &str = "embeddings.csv";

fn format_embedding_row(
    slide_id: &str,
    split: &str,
    group_id: &Option<String>,
    labels: &[u8],
    values: &[f32],
) -> String {
    let labels: Vec<String> = labels.iter().map(|v| v.to_string()).collect();
    let mut row = format!(
        "{slide_id},{split},{},{}",
        group_id.as_deref().unwrap_or(""),
        labels.join(";")
    );
    for v in values {
        row.push_str(&format!(",{v}"));
    }
    row.push('\n');
    row
}

#[derive(Debug, Clone)]
struct EmbeddingRow {
    item: LabeledEmbedding,
    split: String,
}

fn load_embedding_table(dir: &Path) -> Result<Vec<EmbeddingRow>> {
    let path = dir.join(EMB_TABLE);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::Input(format!("no embedding table at {}", path.display())))?;
    let mut rows = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "expected slide_id,split,group_id,labels,<embedding...>".into(),
            });
        }
        let labels: Vec<u8> = fields[3]
            .split(';')
            .map(|v| v.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid label field {:?}", fields[3]),
            })?;
        let embedding: Vec<f64> = fields[4..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: lineno + 1,
                message: "non-numeric embedding value".into(),
            })?;
        if *dim.get_or_insert(embedding.len()) != embedding.len() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "inconsistent embedding dimension".into(),
            });
        }
        rows.push(EmbeddingRow {
            item: LabeledEmbedding {
                slide_id: fields[0].to_string(),
                embedding,
                labels,
                group_id: (!fields[2].is_empty()).then(|| fields[2].to_string()),
            },
            split: fields[1].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("embedding table {} is empty", path.display())));
    }
    Ok(rows)
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Snapshot<'a> {
        ckpt: Option<&'a Path>,
        manifest: &'a Path,
        pool: &'a str,
        attention: bool,
    }
    if a.pool != "tangle" && a.pool != "mean" {
        return Err(usage("--pool must be tangle or mean"));
    }
    if a.pool == "tangle" && a.ckpt.is_none() {
        return Err(usage("--ckpt is required unless --pool mean"));
    }
    init_run_dir(
        &a.out,
        &Snapshot { ckpt: a.ckpt.as_deref(), manifest: &a.manifest, pool: &a.pool, attention: a.attention },
    )?;
    let ckpt = a.ckpt.as_ref().map(|p| load_checkpoint(p)).transpose()?;
    let dataset = PairDataset::load(&a.manifest)?;
    if a.attention {
        std::fs::create_dir_all(a.out.join("attention"))?;
    }
    let mut table = String::from("slide_id,split,group_id,labels,embedding\n");
    for rec in &dataset.records {
        let values: Vec<f32> = if a.pool == "mean" {
            mean_pool(&rec.patches)?.data().to_vec()
        } else {
            let ckpt = ckpt.as_ref().unwrap();
            let (h, attn) = embed_slide(ckpt, &rec.patches)?;
            if a.attention {
                match &rec.patches.coords {
                    Some(coords) => export_attention(
                        coords,
                        &attn,
                        &a.out.join("attention").join(format!("{}.csv", rec.slide_id)),
                    )?,
                    None => eprintln!(
                        "slide {} has no patch coordinates; skipping attention export",
                        rec.slide_id
                    ),
                }
            }
            h.data().to_vec()
        };
        table.push_str(&format_embedding_row(
            &rec.slide_id,
            &rec.split,
            &rec.group_id,
            &rec.labels,
            &values,
        ));
    }
    write_file(&a.out.join(EMB_TABLE), &table)?;
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Snapshot {
        k: usize,
        runs: usize,
        seed: u64,
    }
    if a.embeddings.is_none() && (a.ckpt.is_none() || a.manifest.is_none()) {
        return Err(usage(
            "probe needs --embeddings, or --ckpt with --manifest to embed on the fly",
        ));
    }
    init_run_dir(&a.out, &Snapshot { k: a.k, runs: a.runs, seed: a.seed })?;
    let rows = match (&a.embeddings, &a.ckpt, &a.manifest) {
        (Some(dir), _, _) => load_embedding_table(dir)?,
        (None, Some(ckpt), Some(manifest)) => {
            let ckpt = load_checkpoint(ckpt)?;
            let dataset = PairDataset::load(manifest)?;
            dataset
                .records
                .iter()
                .map(|rec| {
                    let (h, _) = embed_slide(&ckpt, &rec.patches)?;
                    Ok(EmbeddingRow {
                        item: LabeledEmbedding {
                            slide_id: rec.slide_id.clone(),
                            embedding: h.data().iter().map(|&v| v as f64).collect(),
                            labels: rec.labels.clone(),
                            group_id: rec.group_id.clone(),
                        },
                        split: rec.split.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => unreachable!("validated above"),
    };
    let rows = apply_label_override(rows, &a.labels)?;
    let train: Vec<LabeledEmbedding> =
        rows.iter().filter(|r| r.split == "train").map(|r| r.item.clone()).collect();
    let test: Vec<LabeledEmbedding> =
        rows.iter().filter(|r| r.split == "test").map(|r| r.item.clone()).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("probe needs both train and test splits".into()));
    }
    let mut csv = String::from("task,k,run,metric,value\n");
    let mut aucs = Vec::with_capacity(a.runs);
    for run in 0..a.runs {
        let cfg = ProbeConfig {
            k_per_class: a.k,
            seed: a.seed.wrapping_add(run as u64),
            ..ProbeConfig::default()
        };
        let probe = linear_probe(&train, &cfg)?;
        let scores = probe.predict_all(&test)?;
        let labels: Vec<Vec<u8>> = test.iter().map(|t| t.labels.clone()).collect();
        let (auc, _) = macro_auc(&scores, &labels)?;
        csv.push_str(&format!("probe,{},{run},macro_auc,{auc}\n", a.k));
        aucs.push(auc);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let var = aucs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / aucs.len() as f64;
    csv.push_str(&format!("probe,{},all,macro_auc_mean,{mean}\n", a.k));
    csv.push_str(&format!("probe,{},all,macro_auc_std,{}\n", a.k, var.sqrt()));
    write_file(&a.out.join("probe_results.csv"), &csv)?;
    Ok(())
}

fn apply_label_override(
    mut rows: Vec<EmbeddingRow>,
    labels: &Option<PathBuf>,
) -> Result<Vec<EmbeddingRow>> {
    let Some(path) = labels else { return Ok(rows) };
    let manifest = crate::dataio::formats::Manifest::load(path)?;
    let by_id: std::collections::HashMap<&str, &Vec<u8>> =
        manifest.records.iter().map(|r| (r.slide_id.as_str(), &r.labels)).collect();
    for row in &mut rows {
        let labels = by_id.get(row.item.slide_id.as_str()).ok_or_else(|| {
            Error::Input(format!("label manifest is missing slide {}", row.item.slide_id))
        })?;
        row.item.labels = (*labels).clone();
    }
    Ok(rows)
}

fn parse_id_list(raw: &str, k: Option<usize>) -> Vec<String> {
    let ids: Vec<String> =
        raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    match k {
        Some(k) => ids.into_iter().take(k).collect(),
        None => ids,
    }
}

fn cmd_prototype(a: PrototypeArgs) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Snapshot<'a> {
        pos_ids: &'a str,
        normal_ids: &'a str,
        k: Option<usize>,
    }
    init_run_dir(&a.out, &Snapshot { pos_ids: &a.pos_ids, normal_ids: &a.normal_ids, k: a.k })?;
    let rows = load_embedding_table(&a.embeddings)?;
    let by_id: std::collections::HashMap<&str, &LabeledEmbedding> =
        rows.iter().map(|r| (r.item.slide_id.as_str(), &r.item)).collect();
    let collect = |ids: &[String]| -> Result<Vec<Vec<f64>>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|e| e.embedding.clone())
                    .ok_or_else(|| Error::Input(format!("prototype slide {id} not in table")))
            })
            .collect()
    };
    let pos_ids = parse_id_list(&a.pos_ids, a.k);
    let normal_ids = parse_id_list(&a.normal_ids, a.k);
    let pos = build_prototype(PrototypeKind::Positive, &collect(&pos_ids)?)?;
    let normal = build_prototype(PrototypeKind::Normal, &collect(&normal_ids)?)?;
    let mut csv = String::from("slide_id,score,label\n");
    for row in &rows {
        if pos_ids.contains(&row.item.slide_id) || normal_ids.contains(&row.item.slide_id) {
            continue;
        }
        let (score, label) = prototype_classify(&row.item.embedding, &pos, &normal)?;
        let tag = match label {
            PrototypeKind::Positive => "positive",
            PrototypeKind::Normal => "normal",
        };
        csv.push_str(&format!("{},{score},{tag}\n", row.item.slide_id));
    }
    write_file(&a.out.join("prototype_results.csv"), &csv)?;
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Snapshot<'a> {
        groups: &'a str,
        k: usize,
    }
    if a.groups != "group" {
        return Err(usage("--groups only supports `group` (relevance = same group_id)"));
    }
    init_run_dir(&a.out, &Snapshot { groups: &a.groups, k: a.k })?;
    let rows = load_embedding_table(&a.embeddings)?;
    let index: Vec<LabeledEmbedding> = rows.iter().map(|r| r.item.clone()).collect();
    let mut csv = String::from("query_id,relevant,recall_at_k\n");
    let mut recalls = Vec::new();
    for q in &index {
        let Some(group) = &q.group_id else { continue };
        let relevant: Vec<String> = index
            .iter()
            .filter(|o| o.slide_id != q.slide_id && o.group_id.as_ref() == Some(group))
            .map(|o| o.slide_id.clone())
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let result = retrieve(&q.slide_id, &index, a.k.min(index.len() - 1))?;
        let recall = recall_at_k(&result.ranked, &relevant, a.k)?;
        csv.push_str(&format!("{},{},{recall}\n", q.slide_id, relevant.len()));
        recalls.push(recall);
    }
    if recalls.is_empty() {
        return Err(Error::Input("no query has group-mates to retrieve".into()));
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    csv.push_str(&format!("all,,{mean}\n"));
    write_file(&a.out.join("retrieval_results.csv"), &csv)?;
    Ok(())
}

fn cmd_rank(a: RankArgs) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Snapshot {
        epsilon: f64,
    }
    init_run_dir(&a.out, &Snapshot { epsilon: 1e-7 })?;
    let rows = load_embedding_table(&a.embeddings)?;
    let n = rows.len();
    let d = rows[0].item.embedding.len();
    let mut data = Vec::with_capacity(n * d);
    for r in &rows {
        data.extend_from_slice(&r.item.embedding);
    }
    let report = rankme(&Tensor::matrix(n, d, data)?, 1e-7)?;
    write_file(&a.out.join("rank_report.csv"), &rank_report_csv(&report))?;
    Ok(())
}

fn cmd_attribute(a: AttributeArgs) -> Result<()> {
    #[derive(serde::Serialize)]
    struct Snapshot<'a> {
        expression: &'a Path,
        steps: usize,
        baseline: Option<&'a Path>,
        reference: Option<&'a Path>,
    }
    init_run_dir(
        &a.out,
        &Snapshot {
            expression: &a.expression,
            steps: a.steps,
            baseline: a.baseline.as_deref(),
            reference: a.reference.as_deref(),
        },
    )?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let profile = load_expression(&a.expression)?;
    let baseline = match &a.baseline {
        Some(p) => load_expression(p)?,
        None => zero_baseline(&profile.gene_ids),
    };
    let d = ckpt.config.model.embed_dim;
    let target = match &a.reference {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let reference: Vec<f64> = text
                .trim()
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Input(format!("invalid reference embedding in {}", p.display())))?;
            IgTarget::CosineToReference(reference)
        }
        None => IgTarget::Projection(vec![1.0 / (d as f64).sqrt(); d]),
    };
    let attribution = integrated_gradients(&ckpt, &profile, &baseline, a.steps, &target)?;
    let mut csv = String::from("gene_id,score\n");
    for (g, s) in attribution.gene_ids.iter().zip(&attribution.scores) {
        csv.push_str(&format!("{g},{s}\n"));
    }
    write_file(&a.out.join("attributions.csv"), &csv)?;
    write_file(
        &a.out.join("attribution_summary.csv"),
        &format!(
            "target,steps,completeness_residual\n{},{},{}\n",
            attribution.target, attribution.steps, attribution.completeness_residual
        ),
    )?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_json_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    init_run_dir(&a.out, &cfg)?;
    synth_generate(&cfg, &a.out)?;
    Ok(())
}
