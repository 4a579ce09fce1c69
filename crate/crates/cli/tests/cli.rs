use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
num_identities = 200

[encoder]
hidden_dim = 8
num_heads = 2
text_layers = 2
image_layers = 1
cross_layers = 1
ffn_mult = 2
embed_dim = 4
init_std = 0.2

[objectives]
queue_capacity = 16

[train]
epochs = 1
batch_size = 8
seed = 3

[eval]
test_identities = 100
ablation_seeds = 2
"#;

fn aga(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aga"))
        .args(args)
        .env("AGA_RUN_ROOT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn aga")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn config_file(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn run_directories_are_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path());
    let root = tmp.path().join("runs");
    let out = aga(&root, &["gen-corpus", "-c", &cfg, "--name", "corpus"]);
    ok(&out);
    let run = root.join("corpus");
    for f in ["config.toml", "seed", "manifest.json", "corpus/corpus.txt", "corpus/patches.bin", "corpus/vocab.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("seed")).unwrap(), "3\n");
    let manifest: serde_json::Value = serde_json::from_slice(&read(run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "gen-corpus");
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["formats"]["checkpoint"]["version"].is_u64());
    let effective = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(effective.contains("num_identities = 200"));
    assert!(effective.contains("beta = 0.95"));
}

#[test]
fn training_is_reproducible_and_reads_generated_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&aga(&a, &["train", "-c", &cfg, "--name", "run"]));
    ok(&aga(&b, &["train", "-c", &cfg, "--name", "run", "--sequential"]));
    for f in ["model.ckpt", "train_log.csv", "masks.jsonl", "replacements.jsonl", "config.toml", "manifest.json"] {
        assert_eq!(read(a.join("run").join(f)), read(b.join("run").join(f)), "{f}");
    }
    let log = std::fs::read_to_string(a.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("step,itc,itc_distill,itm,mlm,total,mask_rate,ratio_v,tem_accept_rate\n"));

    ok(&aga(&a, &["gen-corpus", "-c", &cfg, "--name", "data"]));
    let corpus = a.join("data/corpus");
    let corpus = corpus.to_str().unwrap();
    ok(&aga(&a, &["train", "-c", &cfg, "--name", "from-files", "--corpus", corpus]));
    assert_eq!(read(a.join("run/model.ckpt")), read(a.join("from-files/model.ckpt")));
}

#[test]
fn untrained_checkpoint_retrieves_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path());
    let root = tmp.path().join("runs");
    ok(&aga(&root, &["train", "-c", &cfg, "--set", "train.epochs=0", "--name", "init"]));
    let ckpt = root.join("init/model.ckpt");
    ok(&aga(&root, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--name", "eval"]));
    let metrics = std::fs::read_to_string(root.join("eval/metrics.csv")).unwrap();
    let value = |key: &str| -> f64 {
        metrics
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (r1, q) = (value("r1"), value("queries"));
    assert_eq!(q, 300.0);
    let p = 0.01;
    assert!((r1 - p).abs() <= 3.0 * (p * (1.0 - p) / q).sqrt(), "{r1}");
}

#[test]
fn ablation_reports_every_strategy_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path());
    let root = tmp.path().join("runs");
    let out = aga(&root, &["ablate", "-c", &cfg, "--set", "corpus.num_identities=60", "--set", "eval.test_identities=20"]);
    ok(&out);
    let report = std::fs::read_to_string(root.join("ablate-seed3/ablation_report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "strategy,seed,ratio_v,r1,r5,r10,map,retried,failed");
    let cells: Vec<&str> = lines[1..].iter().copied().filter(|l| !l.contains(",mean,") && !l.contains(",std,")).collect();
    assert_eq!(cells.len(), 8);
    for s in ["baseline", "picked", "random", "agm"] {
        assert_eq!(cells.iter().filter(|l| l.starts_with(&format!("{s},"))).count(), 2);
    }
    assert!(cells.iter().any(|l| l.starts_with("picked,3,1,")));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Ratio_v"));
}

#[test]
fn analyze_masks_writes_attention_and_token_records() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_file(tmp.path());
    let root = tmp.path().join("runs");
    ok(&aga(&root, &["train", "-c", &cfg, "--name", "t"]));
    let ckpt = root.join("t/model.ckpt");
    ok(&aga(&root, &["analyze-masks", "--checkpoint", ckpt.to_str().unwrap(), "--limit", "12", "--name", "m"]));
    let attention = std::fs::read_to_string(root.join("m/attention_dump.txt")).unwrap();
    let tokens = std::fs::read_to_string(root.join("m/masks.jsonl")).unwrap();
    let masked = tokens
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["masked"] == true)
        .count();
    assert_eq!(attention.lines().count(), masked);
    for line in attention.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let sum: f64 = v["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(v["abar"].is_f64() && v["p"].is_f64());
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[agm]\nbeta = 1.5\n").unwrap();
    let out = aga(&root, &["train", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("agm.beta"));

    let out = aga(&root, &["gen-corpus", "--set", "train.epochz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochz"));

    let out = aga(&root, &["train", "-c", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let out = aga(&root, &["eval", "--checkpoint", tmp.path().join("nope.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));

    let cfg = config_file(tmp.path());
    let out = aga(&root, &["train", "-c", &cfg, "--corpus", tmp.path().join("no-corpus").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!root.join("train-seed3").exists());
}
