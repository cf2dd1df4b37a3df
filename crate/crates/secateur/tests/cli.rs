//! End-to-end checks of the command-line surface: exit codes, file
//! artifacts, flag precedence, and the IDX data path.

use std::path::Path;

use secateur::cli::cli_main;
use secateur::data::load_idx;
use secateur::train::load_checkpoint;

fn args(parts: &[&str]) -> Vec<String> {
    std::iter::once("secateur")
        .chain(parts.iter().copied())
        .map(String::from)
        .collect()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "train": { "epochs": 2, "policy_stop_epoch": 1, "batch_size": 16, "seed": 3,
             "network": { "arch": "vgg", "plan": [4], "fc_width": 8 } },
  "data": { "source": "synth", "seed": 4, "train_n": 48, "eval_n": 24,
            "classes": 4, "channels": 1, "height": 8, "width": 8 }
}"#,
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(cli_main(&args(&["frobnicate"])), 2);
    assert_eq!(cli_main(&args(&["train", "--no-such-flag"])), 2);
    assert_eq!(cli_main(&args(&["--help"])), 0);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    assert_eq!(
        cli_main(&args(&["eval", "--checkpoint", "/nonexistent/x.json"])),
        1
    );
}

#[test]
fn train_writes_artifacts_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("model.json");
    let metrics = dir.path().join("metrics.csv");
    let code = cli_main(&args(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "99",
        "--lambda",
        "7.5",
        "--out",
        ckpt.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let loaded = load_checkpoint(&ckpt).unwrap();
    // flags win over the config file
    assert_eq!(loaded.config.seed, 99);
    assert_eq!(loaded.config.penalty, 7.5);
    assert_eq!(loaded.config.epochs, 2);
    assert_eq!(loaded.epoch, 2);
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with(
        "epoch,batch,loss,train_acc,mean_R_acc,mean_R_C,kept_fraction,eval_acc\n"
    ));
    assert!(csv.lines().count() > 2);
}

#[test]
fn prune_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("model.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])),
        0
    );

    let report = dir.path().join("report.json");
    let layers = dir.path().join("layers.csv");
    let pruned_ckpt = dir.path().join("pruned.json");
    assert_eq!(
        cli_main(&args(&[
            "prune",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
            "--per-layer-csv",
            layers.to_str().unwrap(),
            "--out-checkpoint",
            pruned_ckpt.to_str().unwrap(),
        ])),
        0
    );
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(doc["report"]["params_before"].as_u64().unwrap() > 0);
    assert!(doc["config"]["epochs"].as_u64().is_some(), "config echoed");
    assert!(std::fs::read_to_string(&layers)
        .unwrap()
        .starts_with("node,kind,channels_before,channels_after\n"));
    assert!(load_checkpoint(&pruned_ckpt).is_ok());

    // compare the two checkpoints via the report subcommand
    let cmp = dir.path().join("cmp.json");
    assert_eq!(
        cli_main(&args(&[
            "report",
            "--original",
            ckpt.to_str().unwrap(),
            "--pruned",
            pruned_ckpt.to_str().unwrap(),
            "--out",
            cmp.to_str().unwrap(),
        ])),
        0
    );
    let cmp_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cmp).unwrap()).unwrap();
    assert_eq!(
        cmp_doc["report"]["params_after"],
        doc["report"]["params_after"]
    );

    // eval runs on the original, masked, and pruned variants
    for extra in [&[][..], &["--masked"][..], &["--pruned"][..]] {
        let mut parts = vec![
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ];
        parts.extend_from_slice(extra);
        assert_eq!(cli_main(&args(&parts)), 0);
    }
}

#[test]
fn search_satisfies_budget_and_writes_audit_trail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("model.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])),
        0
    );
    let out = dir.path().join("search.json");
    let searched = dir.path().join("searched.json");
    assert_eq!(
        cli_main(&args(&[
            "search",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--max-bytes",
            "400",
            "--fine-tune-epochs",
            "2",
            "--out",
            out.to_str().unwrap(),
            "--out-checkpoint",
            searched.to_str().unwrap(),
        ])),
        0
    );
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["satisfied"], serde_json::Value::Bool(true));
    assert!(doc["measured"].as_u64().unwrap() <= 400);
    assert!(!doc["removal_order"].as_array().unwrap().is_empty());
    let loaded = load_checkpoint(&searched).unwrap();
    assert!(secateur::prune::count_params(&loaded.graph) * 4 <= 400);

    // both budget flags at once is a usage error
    assert_eq!(
        cli_main(&args(&[
            "search",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--max-bytes",
            "400",
            "--max-flops",
            "1000",
            "--out",
            out.to_str().unwrap(),
        ])),
        2
    );
}

#[test]
fn ablate_appends_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("model.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])),
        0
    );
    let csv = dir.path().join("ablation.csv");
    for (k, order) in [("1", "highest"), ("2", "lowest")] {
        assert_eq!(
            cli_main(&args(&[
                "ablate",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--k",
                k,
                "--order",
                order,
                "--ablation-csv",
                csv.to_str().unwrap(),
            ])),
            0
        );
    }
    let content = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = content.lines().collect();
    assert_eq!(lines[0], "k,order,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,highest,"));
    assert!(lines[2].starts_with("2,lowest,"));
}

#[test]
fn sweep_reports_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep.csv");
    assert_eq!(
        cli_main(&args(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--lambdas",
            "5,500",
            "--seeds",
            "0,1",
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    let content = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = content.lines().collect();
    assert_eq!(
        lines[0],
        "penalty,seed,accuracy_before,accuracy_after,params_pruned_rate,flops_pruned_rate"
    );
    assert_eq!(lines.len(), 5, "2 lambdas x 2 seeds");
}

#[test]
fn synth_data_roundtrips_through_idx_training() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("train-images.idx");
    let lbls = dir.path().join("train-labels.idx");
    assert_eq!(
        cli_main(&args(&[
            "synth-data",
            "--seed",
            "11",
            "--n",
            "48",
            "--classes",
            "4",
            "--height",
            "8",
            "--width",
            "8",
            "--out-images",
            imgs.to_str().unwrap(),
            "--out-labels",
            lbls.to_str().unwrap(),
        ])),
        0
    );
    let ds = load_idx(&imgs, &lbls).unwrap();
    assert_eq!(ds.len(), 48);
    assert_eq!(ds.input_shape(), (1, 8, 8));

    // a config pointing at the files drives training end to end
    let cfg = dir.path().join("idx-config.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
  "train": {{ "epochs": 2, "policy_stop_epoch": 1, "batch_size": 16,
             "network": {{ "arch": "vgg", "plan": [4], "fc_width": 8 }} }},
  "data": {{ "source": "idx",
            "train_images": "{}", "train_labels": "{}",
            "eval_images": "{}", "eval_labels": "{}" }}
}}"#,
            imgs.display(),
            lbls.display(),
            imgs.display(),
            lbls.display()
        ),
    )
    .unwrap();
    let ckpt = dir.path().join("idx-model.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ])),
        0
    );
    assert!(load_checkpoint(&ckpt).is_ok());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "4",
            "--out",
            full.to_str().unwrap(),
        ])),
        0
    );
    let half = dir.path().join("half.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "2",
            "--out",
            half.to_str().unwrap(),
        ])),
        0
    );
    let resumed = dir.path().join("resumed.json");
    assert_eq!(
        cli_main(&args(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "4",
            "--resume",
            half.to_str().unwrap(),
            "--out",
            resumed.to_str().unwrap(),
        ])),
        0
    );
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&resumed).unwrap()
    );
}
