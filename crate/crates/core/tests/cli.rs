use std::fs;
use std::path::Path;
use std::process::Command;

use molora::checkpoint::read_checkpoint;
use molora::cli::{load_config, restore, run};
use molora::config::RunConfig;
use molora::model::DecoderModel;
use molora::taskgen::{encode, mixture};
use molora::train::evaluate;
use molora::Error;

const SMALL: &str = r#"
[model]
model_dim = 16
n_layers = 2
n_heads = 2
max_seq_len = 16

[model.adapter]
rank = 2
alpha = 4.0
n_experts = 4
top_k = 2

[train]
lr = 5e-3
batch_size = 4
epochs = 1

[data]
samples_per_task = 20
alphabet_size = 8
min_len = 3
max_len = 4
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn molora(args: &[&str]) -> Result<String, Error> {
    let mut out = Vec::new();
    let mut argv = vec!["molora"];
    argv.extend_from_slice(args);
    run(argv, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

#[test]
fn train_writes_checkpoint_metrics_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let report = molora(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--trace"]).unwrap();
    assert!(report.contains("exact_match"), "{report}");
    for f in [
        "checkpoint.mlra",
        "metrics.csv",
        "config.toml",
        "held_out.tsv",
        "trace.csv",
        "routing_summary.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,lr,loss"));
    assert_eq!(metrics.lines().count(), 1 + 72usize.div_ceil(4));
    let saved = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved, RunConfig::from_toml(SMALL).unwrap());
}

#[test]
fn zero_epochs_saves_a_checkpoint_equal_to_the_base_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("epochs = 1", "epochs = 0"));
    let out = dir.path().join("init");
    molora(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]).unwrap();
    let (model, meta) = restore(&out.join("checkpoint.mlra"), false).unwrap();
    assert_eq!(meta.seed, 3);
    let base = DecoderModel::<f32>::new(meta.model.clone(), 11).unwrap();
    for prompt in ["Cabc=", "A12+34=", "Rdcb="] {
        let tokens = encode(prompt).unwrap();
        assert_eq!(
            model.forward(&tokens).unwrap().to_vec(),
            base.forward_base(&tokens).unwrap().to_vec()
        );
    }
}

#[test]
fn eval_of_untrained_model_matches_library_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &SMALL.replace("epochs = 1", "epochs = 0"));
    let out = dir.path().join("init");
    molora(&["train", "--config", &cfg_path, "--out", out.to_str().unwrap()]).unwrap();
    let ckpt = out.join("checkpoint.mlra");
    let report = molora(&["eval", "--config", &cfg_path, "--checkpoint", ckpt.to_str().unwrap()]).unwrap();

    let cfg = load_config(Some(Path::new(&cfg_path))).unwrap();
    let split = mixture([cfg.data.samples_per_task; 4], &cfg.data.gen(), cfg.data.seed).unwrap();
    let (model, _) = restore(&ckpt, false).unwrap();
    let m = evaluate(&model, &split.held_out).unwrap();
    assert!(m.overall_exact_match() <= 0.1, "{m:?}");
    assert!(
        report.contains(&format!("overall  {:<5} {:.4}", 8, m.overall_exact_match())),
        "{report}"
    );
    assert!(report.contains(&format!("loss {:.6}", m.loss)), "{report}");
}

#[test]
fn merge_matches_pre_merge_forward_and_refuses_molora_slots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    molora(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).unwrap();
    let ckpt = out.join("checkpoint.mlra");
    let report = molora(&[
        "merge",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();
    assert!(report.contains("skipped 6 MoLoRA slots"), "{report}");
    assert!(report.contains("layers.1.ffn.down"), "{report}");

    let (model, _) = restore(&ckpt, false).unwrap();
    let (merged, _) = model.merge_lora().unwrap();
    let export = read_checkpoint(&out.join("merged.mlra")).unwrap();
    assert_eq!(export.tensors.len(), 8);
    for (e, (name, t)) in export.tensors.iter().zip(merged.dense_slots()) {
        assert_eq!(e.name, name);
        assert_eq!(e.data, t.to_vec());
    }
    for prompt in ["Cabc=", "A12+34=", "Sdcab=", "Rab="] {
        let tokens = encode(prompt).unwrap();
        let a = model.forward(&tokens).unwrap().to_vec();
        let b = merged.forward(&tokens).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    let err = molora(&[
        "merge",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--slot",
        "layers.0.ffn.up",
    ])
    .unwrap_err();
    assert!(
        matches!(&err, Error::MergeRefused { slots } if slots == &["layers.0.ffn.up"]),
        "{err}"
    );
}

#[test]
fn generate_and_stats_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    molora(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).unwrap();
    let ckpt = out.join("checkpoint.mlra");
    let a = molora(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "Cabc="]).unwrap();
    let b = molora(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "Cabc="]).unwrap();
    assert_eq!(a, b);
    assert!(molora(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "C#="]).is_err());

    let stats_dir = dir.path().join("stats");
    let table = molora(&[
        "stats",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        stats_dir.to_str().unwrap(),
        "--no-renorm",
    ])
    .unwrap();
    assert!(table.contains("gate"));
    let summary = fs::read_to_string(stats_dir.join("routing_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
}

#[test]
fn training_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    molora(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]).unwrap();
    molora(&["train", "--config", &cfg, "--out", b.to_str().unwrap()]).unwrap();
    for f in ["metrics.csv", "checkpoint.mlra"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("top_k = 2", "top_k = 5"));
    let err = molora(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]).unwrap_err();
    assert!(
        matches!(&err, Error::Config { key, .. } if key == "model.adapter.top_k"),
        "{err}"
    );
    let cfg = write_config(dir.path(), &SMALL.replace("lr = 5e-3", "learning_rate = 5e-3"));
    let err = molora(&["train", "--config", &cfg]).unwrap_err();
    assert!(
        matches!(&err, Error::Config { key, .. } if key == "train.learning_rate"),
        "{err}"
    );
    assert!(molora(&["train", "--config", "/nonexistent/run.toml"]).is_err());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_molora");
    let ok = Command::new(bin).arg("--help").output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("merge"));
    let bad = Command::new(bin)
        .args(["eval", "--checkpoint", "/nonexistent.mlra"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}
