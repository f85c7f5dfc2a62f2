//! End-to-end runs of the `semspeech` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semspeech_cli::manifest;
use semspeech_cli::stats::{sample_std, AblationRow};

const TINY: &str = r#"
seed = 3

[corpus.counts]
train = 16
dev = 8
test = 8
text_only = 200

[lm.pretrain]
epochs = 1

[lm.pretrain.model]
d_model = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
ff_dim = 32

[gan]
steps = 30
eval_every = 10
select_every = 10
select_utterances = 8
restarts = 2

[fusion]
heads = 2

[task]
variants = ["acoustic_only", "ssp_tune"]
seeds = [1, 2, 3]

[optimizer]
steps = 10
eval_every = 5
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semspeech"))
}

fn setup(dir: &Path, extra: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("exp.toml");
    fs::write(&path, format!("output = {:?}\n{TINY}{extra}", dir.join("out"))).unwrap();
    path
}

fn run(cmd: &str, config: &Path, args: &[&str]) -> Output {
    bin().arg(cmd).arg("--config").arg(config).args(args).output().unwrap()
}

fn ok(cmd: &str, config: &Path, args: &[&str]) -> String {
    let out = run(cmd, config, args);
    assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn single(dir: &Path, prefix: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(hits.len(), 1, "{prefix} in {}", dir.display());
    hits.pop().unwrap()
}

#[test]
fn corpus_stage_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (setup(&tmp.path().join("a"), ""), setup(&tmp.path().join("b"), ""));
    ok("gen-corpus", &a, &[]);
    ok("gen-corpus", &b, &[]);
    let da = single(&tmp.path().join("a/out"), "corpus-");
    for f in ["spec.json", "train.json", "dev.json", "test.json", "text.jsonl"] {
        assert!(da.join(f).is_file(), "{f}");
    }
    let db = single(&tmp.path().join("b/out"), "corpus-");
    assert_eq!(manifest::hash_tree(&da).unwrap(), manifest::hash_tree(&db).unwrap());
    // A rerun reuses the stage and keeps the manifest append-only.
    ok("gen-corpus", &a, &[]);
    let entries = manifest::read(&tmp.path().join("a/out")).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].stage, "corpus");
    assert_eq!(entries[0].outputs, manifest::hash_tree(&da).unwrap());
    // The config text is echoed verbatim.
    assert_eq!(fs::read_to_string(tmp.path().join("a/out/config.toml")).unwrap(), fs::read_to_string(&a).unwrap());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = bin().args(["gen-corpus", "--output"]).arg(blocker.join("out")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("creating output directory"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "\n[gan.discriminator]\ndepth = 3\n");
    let out = run("gen-corpus", &cfg, &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn finetune_before_bridge_names_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    ok("gen-corpus", &cfg, &[]);
    ok("train-lm", &cfg, &[]);
    let out = run("finetune", &cfg, &["--variant", "ssp_base"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bridge checkpoint missing"));
    // The acoustic baseline needs no upstream model.
    ok("finetune", &cfg, &["--variant", "acoustic_only"]);
}

#[test]
fn oracle_decode_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    ok("gen-corpus", &cfg, &[]);
    let line = ok("decode", &cfg, &["--oracle", "--split", "test"]);
    assert!(line.starts_with("WER 0.0000 PER 0.0000"), "{line}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/decode-test-oracle.json")).unwrap()).unwrap();
    assert_eq!(summary["per"], 0.0);
    assert_eq!(summary["wer"], 0.0);
}

/// Runs the whole workflow into `dir`.
fn full_pipeline(dir: &Path) -> PathBuf {
    let cfg = setup(dir, "");
    ok("gen-corpus", &cfg, &[]);
    ok("train-lm", &cfg, &[]);
    ok("train-bridge", &cfg, &[]);
    ok("finetune", &cfg, &[]);
    ok("eval", &cfg, &["--split", "dev"]);
    ok("ablate", &cfg, &[]);
    ok("decode", &cfg, &[]);
    dir.join("out")
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = full_pipeline(&tmp.path().join("a"));
    let b = full_pipeline(&tmp.path().join("b"));

    let log = fs::read_to_string(single(&a, "bridge-").join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for col in ["gan", "gp", "sp", "pd", "ss"] {
        assert!(first[col].is_number(), "missing {col}");
    }
    assert_eq!(log.lines().count(), 60);

    // Every stage directory hashes identically across the two runs.
    for prefix in ["corpus-", "lm-", "bridge-", "ablate-"] {
        let (x, y) = (single(&a, prefix), single(&b, prefix));
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(manifest::hash_tree(&x).unwrap(), manifest::hash_tree(&y).unwrap(), "{prefix}");
    }
    let finetunes = |root: &Path| -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = fs::read_dir(root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("finetune-"))
            .collect();
        v.sort();
        v
    };
    let (fa, fb) = (finetunes(&a), finetunes(&b));
    assert_eq!(fa.len(), 6);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(manifest::hash_tree(x).unwrap(), manifest::hash_tree(y).unwrap());
    }
    let ma = manifest::read(&a).unwrap();
    let mb = manifest::read(&b).unwrap();
    assert_eq!(ma.len(), mb.len());
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!((&x.stage, &x.key, &x.inputs, &x.outputs), (&y.stage, &y.key, &y.inputs, &y.outputs));
    }

    // Ablation: two variants, one metric each, sample std over three seeds.
    let ablate = single(&a, "ablate-");
    let rows: Vec<AblationRow> = serde_json::from_str(&fs::read_to_string(ablate.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.seeds, vec![1, 2, 3]);
        let m = r.values.iter().sum::<f64>() / 3.0;
        let hand = (r.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 2.0).sqrt();
        assert!((r.std - hand).abs() < 1e-12);
        assert!((r.std - sample_std(&r.values)).abs() < 1e-12);
    }
    let csv = fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    // The configured single run (seed 3) is recorded alongside the ablation seeds.
    assert!(ma.iter().any(|e| e.stage == "finetune" && e.seed == 3));
    assert!(fs::read_dir(&a).unwrap().any(|e| e.unwrap().path().join("eval-dev.json").is_file()));
}
