use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use stp_core::config::Ablation;
use stp_core::decoder::{build_mask_with, dense_masked_attention};
use stp_core::evaluation::{AoOptions, MetricsReport, PredictionRecord};
use stp_core::features::{generate_clip, generate_synthetic_dataset, read_dataset, write_dataset, SyntheticClip};
use stp_core::model::{candidates, clip_loss, infer_batch, init_params, param_count};
use stp_core::numerics::grad_check;
use stp_core::training::{load_model, log_file_name, write_atomic, Trainer, CHECKPOINT_FILE, MODEL_FILE};
use stp_core::{Graph, StpConfig, Tensor};

use crate::manifest::{config_hash, RunManifest};
use crate::{Cli, Command};

pub const RUN_CONFIG_FILE: &str = "config.conf";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { config, out, force } => {
            let cfg = load_config(&config.config, cli)?;
            gen(&cfg, out, *force)
        }
        Command::Train { config, data, out, ablate, resume, until_epoch, force } => {
            let mut cfg = load_config(&config.config, cli)?;
            if let Some(name) = ablate {
                cfg.ablation = Ablation::preset(name)?;
            }
            train(&cfg, data, out, *resume, *until_epoch, *force)
        }
        Command::Eval { checkpoint, predictions, config, data, out } => {
            eval(cli, checkpoint.as_deref(), predictions.as_deref(), config.as_deref(), data, out)
        }
        Command::Infer { checkpoint, config, data, out } => {
            let cfg = run_config(cli, checkpoint, config.as_deref())?;
            infer(&cfg, checkpoint, data, out)
        }
        Command::Bench { config, runs, json } => {
            let cfg = load_config(&config.config, cli)?;
            bench(&cfg, *runs, json.as_deref())
        }
        Command::Gradcheck { config, eps, tolerance } => {
            let cfg = match config {
                Some(path) => load_config(path, cli)?,
                None => with_overrides(StpConfig::minimal(), cli)?,
            };
            gradcheck(&cfg, *eps, *tolerance)
        }
    }
}

fn with_overrides(mut cfg: StpConfig, cli: &Cli) -> Result<StpConfig> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.report_params {
        println!("params: {}", param_count(&cfg)?);
    }
    Ok(cfg)
}

fn load_config(path: &Path, cli: &Cli) -> Result<StpConfig> {
    with_overrides(StpConfig::load(path)?, cli)
}

/// Explicit config, else the one saved next to the checkpoint.
fn run_config(cli: &Cli, checkpoint: &Path, config: Option<&Path>) -> Result<StpConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG_FILE),
    };
    load_config(&path, cli).with_context(|| format!("loading config for {}", checkpoint.display()))
}

/// Create `dir`, refusing to touch an existing non-empty one unless `force`.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true);
    if occupied {
        if !force {
            bail!("{} already exists; pass --force to replace it", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen(cfg: &StpConfig, out: &Path, force: bool) -> Result<()> {
    let manifest = RunManifest::start("gen", cfg);
    fresh_dir(out, force)?;
    let start = Instant::now();
    let clips = generate_synthetic_dataset(&cfg.data, cfg.seed)?;
    write_dataset(out, &clips)?;
    let segments: usize = clips.iter().map(|c| c.ground_truth.len()).sum();
    log::info!("wrote {} clips ({segments} segments) in {:.2}s", clips.len(), start.elapsed().as_secs_f64());
    manifest.finish(out, clips.iter().map(|c| PathBuf::from(&c.video_id)).collect())?;
    println!("{}", out.display());
    Ok(())
}

fn train(cfg: &StpConfig, data: &Path, out: &Path, resume: bool, until: Option<usize>, force: bool) -> Result<()> {
    let clips = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let manifest = RunManifest::start("train", cfg);
    let mut trainer = if resume {
        let checkpoint = out.join(CHECKPOINT_FILE);
        let saved = StpConfig::load(&out.join(RUN_CONFIG_FILE))?;
        ensure!(
            config_hash(&saved) == config_hash(cfg),
            "config differs from the one the run in {} was started with",
            out.display()
        );
        let t = Trainer::resume(cfg.clone(), &checkpoint)
            .with_context(|| format!("resuming from {}", checkpoint.display()))?;
        log::info!("resuming after epoch {} (step {})", t.epoch, t.optimizer.step);
        t
    } else {
        fresh_dir(out, force)?;
        fs::write(out.join(RUN_CONFIG_FILE), cfg.to_text())?;
        Trainer::new(cfg.clone())?
    };
    log::info!("{} clips, {} parameters, ablation {}", clips.len(), trainer.store.num_scalars(), cfg.ablation.label());
    trainer.run_until(&clips, Some(out), until.unwrap_or(cfg.train.epochs))?;
    let mut outputs = vec![RUN_CONFIG_FILE.to_string(), log_file_name(cfg), CHECKPOINT_FILE.into()];
    if trainer.is_finished() {
        outputs.push(MODEL_FILE.into());
        println!("{}", out.join(MODEL_FILE).display());
    } else {
        println!("{}", out.join(CHECKPOINT_FILE).display());
    }
    manifest.finish(out, outputs.into_iter().map(PathBuf::from).collect())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    serde_json::from_str(&text).with_context(|| format!("parsing predictions {}", path.display()))
}

fn group_predictions(clips: &[SyntheticClip], records: &[PredictionRecord]) -> Result<Vec<Vec<stp_core::ActionSegment>>> {
    let mut grouped = vec![Vec::new(); clips.len()];
    for r in records {
        let idx = clips
            .iter()
            .position(|c| c.video_id == r.video_id)
            .with_context(|| format!("prediction for unknown clip `{}`", r.video_id))?;
        ensure!(
            r.start.is_finite() && r.end.is_finite() && r.start <= r.end,
            "prediction for `{}` has invalid span [{}, {}]",
            r.video_id,
            r.start,
            r.end
        );
        grouped[idx].push(r.segment());
    }
    Ok(grouped)
}

fn eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let clips = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let (preds, classes, opts) = match (checkpoint, predictions) {
        (Some(ckpt), _) => {
            let cfg = run_config(cli, ckpt, config)?;
            let store = load_model(ckpt, &cfg)?;
            let preds = infer_batch(&clips, &store, &cfg)?;
            (preds, cfg.data.classes, AoOptions { allow_reuse: cfg.eval.allow_reuse })
        }
        (None, Some(path)) => {
            let records = read_predictions(path)?;
            let (classes, opts) = match config {
                Some(p) => {
                    let cfg = load_config(p, cli)?;
                    (cfg.data.classes, AoOptions { allow_reuse: cfg.eval.allow_reuse })
                }
                None => {
                    let max_gt = clips.iter().flat_map(|c| c.ground_truth.iter().map(|g| g.class)).max();
                    let max_pred = records.iter().map(|r| r.class).max();
                    (max_gt.max(max_pred).map_or(1, |m| m + 1), AoOptions::default())
                }
            };
            (group_predictions(&clips, &records)?, classes, opts)
        }
        (None, None) => bail!("either --checkpoint or --predictions is required"),
    };
    let pairs: Vec<_> = preds.into_iter().zip(&clips).map(|(p, c)| (p, c.ground_truth.clone())).collect();
    let report = MetricsReport::compute(&pairs, classes, opts)?;
    fs::create_dir_all(out)?;
    // Both files are rendered before either is written.
    let json = report.to_json()?;
    let csv = report.to_csv()?;
    write_atomic(&out.join(METRICS_CSV), csv.as_bytes())?;
    write_atomic(&out.join(METRICS_JSON), json.as_bytes())?;
    println!("ao_score {:.6} top1 {:.6} mean1 {:.6}", report.ao_score, report.top1, report.mean1);
    Ok(())
}

fn infer(cfg: &StpConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let clips = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let store = load_model(checkpoint, cfg)?;
    let preds = infer_batch(&clips, &store, cfg)?;
    let records: Vec<PredictionRecord> = clips
        .iter()
        .zip(&preds)
        .flat_map(|(c, p)| p.iter().map(|s| PredictionRecord::new(&c.video_id, s)))
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(out, (serde_json::to_string_pretty(&records)? + "\n").as_bytes())?;
    log::info!("{} segments over {} clips", records.len(), clips.len());
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Latency {
    mean_ms: f64,
    p50_ms: f64,
    p99_ms: f64,
}

impl Latency {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let pick = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
        Self { mean_ms: ms.iter().sum::<f64>() / ms.len() as f64, p50_ms: pick(0.5), p99_ms: pick(0.99) }
    }
}

#[derive(Serialize)]
struct BenchReport {
    note: &'static str,
    config_hash: String,
    params: usize,
    runs: usize,
    frames: usize,
    forward: Latency,
    cross_attention_prefix: Latency,
    cross_attention_dense: Latency,
}

fn time_ms(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<Latency> {
    f()?;
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Latency::from_samples(samples))
}

fn bench(cfg: &StpConfig, runs: usize, json: Option<&Path>) -> Result<()> {
    ensure!(runs > 0, "--runs must be positive");
    let store = init_params(cfg, cfg.seed)?;
    let mut spec = cfg.data.clone();
    spec.clips = 1;
    let clip = generate_clip(&spec, cfg.seed, 0)?;
    let forward = time_ms(runs, || candidates(&clip, &store, cfg).map(|_| ()).map_err(Into::into))?;

    // One head of masked cross-attention over random projections.
    let (n, nq, d) = (clip.frames(), cfg.decoder.num_queries, cfg.decoder.dim / cfg.decoder.heads);
    let mask = build_mask_with(cfg.mask_rule(), n, nq)?;
    let mut rng = stp_core::rng::stream_rng(cfg.seed, "bench", 0);
    let mut rand_t = |r: usize, c: usize| -> Result<Tensor> {
        use rand::Rng;
        Ok(Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())?)
    };
    let (q, k, v) = (rand_t(nq, d)?, rand_t(n, d)?, rand_t(n, d)?);
    let scale = 1.0 / (d as f64).sqrt();
    let attn = |dense: bool| {
        let (q, k, v, mask) = (&q, &k, &v, &mask);
        move || -> Result<()> {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            if dense {
                dense_masked_attention(&mut g, qv, kv, vv, mask, scale)?;
            } else {
                g.prefix_attention(qv, kv, vv, mask.prefix_arc(), scale)?;
            }
            Ok(())
        }
    };
    let prefix_lat = time_ms(runs, attn(false))?;
    let dense_lat = time_ms(runs, attn(true))?;

    let report = BenchReport {
        note: "model only: pretrained feature and pose backbones are excluded, so these figures are not comparable to full-system latency",
        config_hash: config_hash(cfg),
        params: store.num_scalars(),
        runs,
        frames: n,
        forward,
        cross_attention_prefix: prefix_lat,
        cross_attention_dense: dense_lat,
    };
    println!("config_hash {}", report.config_hash);
    println!("params {}", report.params);
    println!(
        "forward ({} frames, {runs} runs): mean {:.3} ms  p50 {:.3} ms  p99 {:.3} ms",
        n, report.forward.mean_ms, report.forward.p50_ms, report.forward.p99_ms
    );
    for (name, l) in [("prefix", &report.cross_attention_prefix), ("dense", &report.cross_attention_dense)] {
        println!("cross-attention {name:6}: mean {:.4} ms  p50 {:.4} ms  p99 {:.4} ms", l.mean_ms, l.p50_ms, l.p99_ms);
    }
    println!("note: {}", report.note);
    if let Some(path) = json {
        write_atomic(path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    }
    Ok(())
}

fn gradcheck(cfg: &StpConfig, eps: f64, tolerance: f64) -> Result<()> {
    let mut spec = cfg.data.clone();
    spec.clips = 1;
    let clip = generate_clip(&spec, cfg.seed, 0)?;
    let store = init_params(cfg, cfg.seed)?;
    let start = Instant::now();
    let err = grad_check(|g, s| Ok(clip_loss(g, &clip, s, cfg)?.parts.total), &store, eps)?;
    println!(
        "max relative error {err:.3e} over {} scalars in {:.2}s",
        store.num_scalars(),
        start.elapsed().as_secs_f64()
    );
    ensure!(err < tolerance, "gradient check failed: {err:.3e} ≥ {tolerance:.1e}");
    Ok(())
}
