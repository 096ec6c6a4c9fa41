//! Command-line behavior: exit codes, run-directory artifacts, and the
//! synth → pretrain → embed → evaluate pipeline.

use std::path::Path;
use tangle::cli::run;

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once("tangle".to_string())
        .chain(parts.iter().map(|s| s.to_string()))
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(argv(&["no-such-command"])), 2);
    assert_eq!(run(argv(&["synth", "--unknown-flag"])), 2);
    // probe without an embedding source is a usage error
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe");
    assert_eq!(run(argv(&["probe", "--out", out.to_str().unwrap()])), 2);
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(argv(&[
        "pretrain",
        "--manifest",
        dir.path().join("missing.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 1);
}

#[test]
fn synth_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.json");
    std::fs::write(
        &cfg,
        r#"{"n_slides":14,"n_classes":2,"latent_dim":4,"patch_dim":6,"n_genes":10,
            "patches_min":5,"patches_max":9,"n_groups_per_class":2}"#,
    )
    .unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&d1, &d2] {
        let code = run(argv(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
            "--seed",
            "7",
        ]));
        assert_eq!(code, 0);
        assert!(d.join("resolved_config.json").exists());
    }
    assert_eq!(dir_bytes(&d1), dir_bytes(&d2));
}

#[test]
fn end_to_end_pipeline_emits_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");

    let synth_cfg = dir.path().join("synth.json");
    std::fs::write(
        &synth_cfg,
        r#"{"n_slides":200,"n_classes":2,"latent_dim":4,"patch_dim":8,"n_genes":24,
            "patches_min":12,"patches_max":20,"n_groups_per_class":2,
            "train_fraction":0.5,"seed":5}"#,
    )
    .unwrap();
    assert_eq!(
        run(argv(&["synth", "--config", synth_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()])),
        0
    );
    let manifest = data.join("manifest.jsonl");

    let train_cfg = dir.path().join("train.json");
    std::fs::write(
        &train_cfg,
        r#"{"batch_size":25,"epochs":3,"warmup_epochs":1,"lr_peak":0.001,
            "patches_per_slide":12,"seed":1,
            "model":{"patch_dim":8,"n_genes":24,"embed_dim":6,"pre_attn_hidden":12,
                     "gate_hidden":8,"expr_hidden":12,"recon_hidden":12}}"#,
    )
    .unwrap();
    let train_out = dir.path().join("pretrain");
    assert_eq!(
        run(argv(&[
            "pretrain",
            "--config",
            train_cfg.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ])),
        0
    );
    let ckpt = train_out.join("checkpoint.tngl");
    assert!(ckpt.exists());
    let loss_log = std::fs::read_to_string(train_out.join("loss_log.csv")).unwrap();
    assert!(loss_log.starts_with("epoch,step,lr,loss_total,loss_symcl,loss_rec,loss_intra"));

    let emb_out = dir.path().join("embed");
    assert_eq!(
        run(argv(&[
            "embed",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            emb_out.to_str().unwrap(),
            "--attention",
        ])),
        0
    );
    assert!(emb_out.join("embeddings.csv").exists());
    assert!(emb_out.join("attention").join("slide_00000.csv").exists());

    let probe_out = dir.path().join("probe");
    assert_eq!(
        run(argv(&[
            "probe",
            "--embeddings",
            emb_out.to_str().unwrap(),
            "--k",
            "10",
            "--runs",
            "2",
            "--out",
            probe_out.to_str().unwrap(),
        ])),
        0
    );
    let results = std::fs::read_to_string(probe_out.join("probe_results.csv")).unwrap();
    assert!(results.starts_with("task,k,run,metric,value"));
    assert!(results.contains("macro_auc_mean"));

    let retrieve_out = dir.path().join("retrieve");
    assert_eq!(
        run(argv(&[
            "retrieve",
            "--embeddings",
            emb_out.to_str().unwrap(),
            "--k",
            "10",
            "--out",
            retrieve_out.to_str().unwrap(),
        ])),
        0
    );
    assert!(retrieve_out.join("retrieval_results.csv").exists());

    let rank_out = dir.path().join("rank");
    assert_eq!(
        run(argv(&["rank", "--embeddings", emb_out.to_str().unwrap(), "--out", rank_out.to_str().unwrap()])),
        0
    );
    let report = std::fs::read_to_string(rank_out.join("rank_report.csv")).unwrap();
    assert!(report.starts_with("n,d,smooth_rank"));

    let proto_out = dir.path().join("prototype");
    assert_eq!(
        run(argv(&[
            "prototype",
            "--embeddings",
            emb_out.to_str().unwrap(),
            "--pos-ids",
            "slide_00000,slide_00002,slide_00004",
            "--normal-ids",
            "slide_00001,slide_00003,slide_00005",
            "--out",
            proto_out.to_str().unwrap(),
        ])),
        0
    );
    let proto = std::fs::read_to_string(proto_out.join("prototype_results.csv")).unwrap();
    assert!(proto.starts_with("slide_id,score,label"));
    // prototype members are excluded from classification
    assert!(!proto.contains("slide_00000,"));

    let attr_out = dir.path().join("attribute");
    assert_eq!(
        run(argv(&[
            "attribute",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--expression",
            data.join("expression").join("slide_00000.csv").to_str().unwrap(),
            "--steps",
            "32",
            "--out",
            attr_out.to_str().unwrap(),
        ])),
        0
    );
    let attr = std::fs::read_to_string(attr_out.join("attributions.csv")).unwrap();
    assert_eq!(attr.lines().count(), 25); // header + 24 genes
    assert!(attr_out.join("attribution_summary.csv").exists());
}
