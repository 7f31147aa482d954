use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use stp_core::evaluation::PredictionRecord;
use stp_core::features::read_dataset;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn minimal() -> PathBuf {
    configs().join("minimal.conf")
}

fn stp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stp"))
        .args(args)
        .env("STP_LOG", "warn")
        .output()
        .expect("spawn stp")
}

fn ok(args: &[&str]) -> String {
    let out = stp(args);
    assert!(
        out.status.success(),
        "stp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = stp(args);
    assert!(!out.status.success(), "stp {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` except the manifest, as (relative path, bytes).
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_config(tmp: &Path, epochs: usize) -> PathBuf {
    let text = fs::read_to_string(minimal()).unwrap();
    let text = text
        .lines()
        .map(|l| match l.split_once('=') {
            Some((k, _)) if k.trim() == "train.epochs" => format!("train.epochs = {epochs}"),
            Some((k, _)) if k.trim() == "train.eval_every" => "train.eval_every = 2".into(),
            Some((k, _)) if k.trim() == "data.clips" => "data.clips = 4".into(),
            Some((k, _)) if k.trim() == "train.batch_size" => "train.batch_size = 2".into(),
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = tmp.join("small.conf");
    fs::write(&path, text).unwrap();
    path
}

fn gen(tmp: &Path, cfg: &Path) -> PathBuf {
    let data = tmp.join("data");
    ok(&["gen", "-c", s(cfg), "-o", s(&data)]);
    data
}

fn read_metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "-c", s(&minimal()), "-o", s(&a)]);
    ok(&["gen", "-c", s(&minimal()), "-o", s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
    assert!(a.join("manifest.json").is_file());
}

#[test]
fn seed_flag_changes_the_dataset() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "-c", s(&minimal()), "-o", s(&a)]);
    ok(&["--seed", "7", "gen", "-c", s(&minimal()), "-o", s(&b)]);
    assert_ne!(tree(&a), tree(&b));
}

#[test]
fn gen_refuses_existing_directory_without_force() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    ok(&["gen", "-c", s(&minimal()), "-o", s(&out)]);
    let msg = err(&["gen", "-c", s(&minimal()), "-o", s(&out)]);
    assert!(msg.contains("--force"), "{msg}");
    ok(&["gen", "-c", s(&minimal()), "-o", s(&out), "--force"]);
}

#[test]
fn missing_key_names_key_and_file() {
    let tmp = TempDir::new().unwrap();
    let text: String = fs::read_to_string(minimal())
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("loss.gamma"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = tmp.path().join("broken.conf");
    fs::write(&cfg, text).unwrap();
    let msg = err(&["gen", "-c", s(&cfg), "-o", s(&tmp.path().join("d"))]);
    assert!(msg.contains("loss.gamma"), "{msg}");
    assert!(msg.contains("broken.conf"), "{msg}");
}

#[test]
fn default_dataset_generates_quickly() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    ok(&["gen", "-c", s(&configs().join("default.conf")), "-o", s(&tmp.path().join("d"))]);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "gen took {secs:.1}s");
    assert_eq!(read_dataset(&tmp.path().join("d")).unwrap().len(), 200);
}

#[test]
fn shipped_configs_load() {
    for name in ["default", "toy", "minimal"] {
        let loaded = stp_core::StpConfig::load(&configs().join(format!("{name}.conf"))).unwrap();
        assert_eq!(loaded, stp_core::StpConfig::preset(name).unwrap(), "{name}");
    }
}

#[test]
fn train_writes_run_directory_and_ablation_log() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2);
    let data = gen(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&run)]);
    for f in ["config.conf", "train_log_full.csv", "checkpoint.stpk", "model.stpk", "manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log_full.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let abl = tmp.path().join("abl");
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&abl), "--ablate", "no_causal_mask"]);
    assert!(abl.join("train_log_no_causal_mask.csv").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(abl.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ablation"], "no_causal_mask");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let msg = err(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&tmp.path().join("x")), "--ablate", "bogus"]);
    assert!(msg.contains("bogus"), "{msg}");
}

#[test]
fn interrupted_and_resumed_training_matches_uninterrupted() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 4);
    let data = gen(tmp.path(), &cfg);
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&full)]);
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&split), "--until-epoch", "2"]);
    assert!(!split.join("model.stpk").exists());
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&split), "--resume"]);
    assert_eq!(fs::read(full.join("model.stpk")).unwrap(), fs::read(split.join("model.stpk")).unwrap());
    assert_eq!(
        fs::read_to_string(full.join("train_log_full.csv")).unwrap(),
        fs::read_to_string(split.join("train_log_full.csv")).unwrap()
    );
}

#[test]
fn resume_rejects_changed_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2);
    let data = gen(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&run), "--until-epoch", "1"]);
    let msg = err(&["--seed", "9", "train", "-c", s(&cfg), "--data", s(&data), "-o", s(&run), "--resume"]);
    assert!(msg.contains("config differs"), "{msg}");
}

#[test]
fn training_reruns_are_metric_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2);
    let data = gen(tmp.path(), &cfg);
    let mut metrics = Vec::new();
    for name in ["r1", "r2"] {
        let run = tmp.path().join(name);
        ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&run)]);
        let m = tmp.path().join(format!("m_{name}"));
        ok(&["eval", "--checkpoint", s(&run.join("model.stpk")), "--data", s(&data), "-o", s(&m)]);
        metrics.push(read_metrics(&m));
    }
    for key in ["ao_score", "top1", "mean1"] {
        let (a, b) = (metrics[0][key].as_f64().unwrap(), metrics[1][key].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9, "{key}: {a} vs {b}");
    }
}

fn ground_truth_records(data: &Path) -> Vec<PredictionRecord> {
    read_dataset(data)
        .unwrap()
        .iter()
        .flat_map(|c| c.ground_truth.iter().map(|g| PredictionRecord::new(&c.video_id, g)))
        .collect()
}

#[test]
fn ground_truth_scored_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), &minimal());
    let preds = tmp.path().join("gt.json");
    fs::write(&preds, serde_json::to_string(&ground_truth_records(&data)).unwrap()).unwrap();
    let out = tmp.path().join("m");
    ok(&["eval", "--predictions", s(&preds), "--data", s(&data), "-o", s(&out)]);
    let m = read_metrics(&out);
    assert_eq!(m["ao_score"].as_f64().unwrap(), 1.0);
    assert_eq!(m["top1"].as_f64().unwrap(), 1.0);
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn empty_predictions_score_zero() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), &minimal());
    let preds = tmp.path().join("empty.json");
    fs::write(&preds, "").unwrap();
    let out = tmp.path().join("m");
    ok(&["eval", "--predictions", s(&preds), "--data", s(&data), "-o", s(&out)]);
    let m = read_metrics(&out);
    assert_eq!(m["ao_score"].as_f64().unwrap(), 0.0);
    assert_eq!(m["predictions"].as_u64().unwrap(), 0);
}

#[test]
fn metrics_match_the_published_schema() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), &minimal());
    let preds = tmp.path().join("gt.json");
    fs::write(&preds, serde_json::to_string(&ground_truth_records(&data)).unwrap()).unwrap();
    let out = tmp.path().join("m");
    ok(&["eval", "--predictions", s(&preds), "--data", s(&data), "-o", s(&out)]);
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/metrics.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(schema_path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let metrics = read_metrics(&out);
    let errors: Vec<String> = validator.iter_errors(&metrics).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn failed_eval_leaves_no_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), &minimal());
    let preds = tmp.path().join("bad.json");
    let bad = vec![PredictionRecord { video_id: "no_such_clip".into(), start: 0.0, end: 1.0, class: 0, score: 1.0 }];
    fs::write(&preds, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = tmp.path().join("m");
    let msg = err(&["eval", "--predictions", s(&preds), "--data", s(&data), "-o", s(&out)]);
    assert!(msg.contains("no_such_clip"), "{msg}");
    assert!(!out.join("metrics.json").exists());
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn infer_output_scores_like_checkpoint_eval() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2);
    let data = gen(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&run)]);
    let model = run.join("model.stpk");
    let preds = tmp.path().join("preds.json");
    ok(&["infer", "--checkpoint", s(&model), "--data", s(&data), "-o", s(&preds)]);
    let (a, b) = (tmp.path().join("ma"), tmp.path().join("mb"));
    ok(&["eval", "--checkpoint", s(&model), "--data", s(&data), "-o", s(&a)]);
    ok(&["eval", "--predictions", s(&preds), "-c", s(&cfg), "--data", s(&data), "-o", s(&b)]);
    assert_eq!(read_metrics(&a), read_metrics(&b));
}

#[test]
fn bench_reports_hash_and_parameter_count() {
    let tmp = TempDir::new().unwrap();
    let json = tmp.path().join("bench.json");
    let out = ok(&["bench", "-c", s(&minimal()), "--runs", "3", "--json", s(&json)]);
    assert!(out.contains("config_hash"), "{out}");
    assert!(out.contains("not comparable"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let params = report["params"].as_u64().unwrap();
    assert!(params > 0);
    let again = ok(&["--report-params", "gradcheck"]);
    assert!(again.contains(&format!("params: {params}")), "{again}");
}

#[test]
fn gradcheck_passes_on_minimal_model() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("max relative error"), "{out}");
}

#[test]
fn infer_rejects_clips_shorter_than_stride() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 1);
    let data = gen(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    ok(&["train", "-c", s(&cfg), "--data", s(&data), "-o", s(&run)]);
    let text = fs::read_to_string(&cfg).unwrap().replace("data.stride = 1", "data.stride = 64");
    let strided = tmp.path().join("strided.conf");
    fs::write(&strided, text).unwrap();
    let msg = err(&[
        "infer",
        "--checkpoint",
        s(&run.join("model.stpk")),
        "-c",
        s(&strided),
        "--data",
        s(&data),
        "-o",
        s(&tmp.path().join("p.json")),
    ]);
    assert!(msg.contains("stride") || msg.contains("frames"), "{msg}");
}
