//! `mnvton` — train, sample, evaluate, and analyze the attention variants on
//! the synthetic garment-placement task.
//!
//! Every command takes a JSON run configuration (see `configs/`) and writes
//! only under its output directory. Exit codes: 2 for configuration
//! problems, 3 for numerical failures, 4 for I/O errors, 1 otherwise; the
//! last line on stderr is then a one-line JSON object describing the error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use mnvton_core::analysis::{attention_cost, pca_project, variant_ablation, StreamLens};
use mnvton_core::blocks::BlockVariant;
use mnvton_core::checkpoint;
use mnvton_core::config::RunConfig;
use mnvton_core::diffusion::{ddim_sample, linear_schedule, q_sample};
use mnvton_core::io::{append_jsonl, write_json_pretty, write_ppm, RunDir};
use mnvton_core::model::{build_inputs, ModelParams};
use mnvton_core::rng::{streams, SplitMix64};
use mnvton_core::toytask::{eval_run, gen_sample, to_unit, EvalSettings};
use mnvton_core::train::train_run_with;
use mnvton_core::{grad_check, Error, Result, Tape, Tensor, GRAD_CHECK_H};

#[derive(Parser)]
#[command(name = "mnvton", version, about = "Single-network multimodal attention on a toy try-on task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render task samples (targets, conditioning, garments) as PPM images.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// How many samples to render.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, metrics, and config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate images from a trained checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a trained checkpoint on fresh samples.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Writes report.json here if given.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Worker threads (default: MNVTON_THREADS or 1).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every variant x seed combination and compare scores.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        /// Comma-separated variant names.
        #[arg(long, default_value = "mn_v1,mn_v2,mn_v3")]
        variants: String,
        #[arg(long, default_value_t = 12)]
        eval_samples: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check analytical gradients against finite differences for all variants.
    Gradcheck {
        /// Run config; defaults to a built-in micro configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report parameter counts and attention FLOPs for all variants.
    Cost {
        #[arg(long)]
        config: PathBuf,
        /// Writes cost.json here if given.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project per-block garment features onto their first principal component.
    Pca {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Task sample to analyze.
        #[arg(long, default_value_t = 11)]
        sample_seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.cmd) {
        let kind = match &err {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Vocab { .. } => "vocab",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        };
        let line = serde_json::json!({ "kind": kind, "error": err.to_string() });
        eprintln!("{line}");
        let code = match &err {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
            _ => 1,
        };
        std::process::exit(code);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out, samples, seed } => gen_data(&config, &out, samples, seed),
        Cmd::Train { config, out } => train(&config, out),
        Cmd::Sample { config, ckpt, out, samples, seed } => {
            sample_cmd(&config, &ckpt, &out, samples, seed)
        }
        Cmd::Eval { config, ckpt, out, samples, threads, seed } => {
            eval_cmd(&config, &ckpt, out, samples, threads, seed)
        }
        Cmd::Ablate { config, out, seeds, variants, eval_samples, threads } => {
            ablate(&config, &out, &seeds, &variants, eval_samples, threads)
        }
        Cmd::Gradcheck { config } => gradcheck(config),
        Cmd::Cost { config, out } => cost_cmd(&config, out),
        Cmd::Pca { config, ckpt, out, sample_seed } => pca_cmd(&config, &ckpt, &out, sample_seed),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn default_threads() -> usize {
    std::env::var("MNVTON_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn parse_variant(name: &str) -> Result<BlockVariant> {
    BlockVariant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = BlockVariant::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!("unknown variant {name:?}; known: {}", known.join(", ")))
        })
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<ModelParams> {
    checkpoint::load(path, cfg.variant, cfg.dims(), &cfg.content_hash()?)
}

fn schedule_of(cfg: &RunConfig) -> Result<mnvton_core::diffusion::DiffusionSchedule> {
    linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

/// Writes every frame of a grid as `<stem>_f<frame>.ppm` (plain `<stem>.ppm`
/// for single images).
fn write_frames(dir: &Path, stem: &str, grid: &Tensor) -> Result<()> {
    let frames = grid.shape()[0];
    for f in 0..frames {
        let name = if frames == 1 {
            format!("{stem}.ppm")
        } else {
            format!("{stem}_f{f}.ppm")
        };
        write_ppm(&dir.join(name), grid, f)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn gen_data(config: &Path, out: &Path, samples: usize, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    fs::create_dir_all(out)?;
    // Same stream the training loop draws sample seeds from, so this
    // previews exactly what a training run with this seed would see.
    let mut rng = SplitMix64::split(seed, streams::TRAIN_DATA);
    let mut index = Vec::new();
    for i in 0..samples {
        let sample_seed = rng.next_u64();
        let s = gen_sample(sample_seed, &cfg.task)?;
        let stem = |kind: &str| format!("s{i:03}_{kind}");
        write_frames(out, &stem("target"), &to_unit(&s.target))?;
        write_frames(out, &stem("agnostic"), &to_unit(&s.agnostic))?;
        write_frames(out, &stem("garment"), &to_unit(&s.garment))?;
        write_frames(out, &stem("mask"), &s.mask)?;
        index.push(serde_json::json!({
            "index": i,
            "seed": sample_seed,
            "label": s.label,
            "translations": s.translations,
        }));
        println!("sample {i}: seed {sample_seed} label {:?}", s.label);
    }
    write_json_pretty(&out.join("index.json"), &index)?;
    println!("wrote {samples} samples to {}", out.display());
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .ok_or_else(|| Error::config("no output directory: pass --out or set out_dir"))?;
    let run_dir = RunDir::new(out);
    run_dir.ensure()?;
    write_json_pretty(&run_dir.config_json(), &cfg)?;
    let metrics_path = run_dir.metrics();
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }

    let hash = cfg.content_hash()?;
    println!(
        "training {} on seed {} ({} steps, config {hash})",
        cfg.variant.name(),
        cfg.seed,
        cfg.train.steps
    );
    let started = Instant::now();
    let total = cfg.train.steps;
    let mut log_err = None;
    let output = train_run_with(&cfg, &mut |row| {
        if log_err.is_none() {
            if let Err(e) = append_jsonl(&metrics_path, row) {
                log_err = Some(e);
            }
        }
        println!(
            "step {:>6}/{total}  loss {:<9.4} {:>8.1}s",
            row.step,
            row.loss,
            started.elapsed().as_secs_f64()
        );
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    checkpoint::save(&run_dir.checkpoint(), &output.params, &hash)?;
    println!("wrote {}", run_dir.checkpoint().display());
    Ok(())
}

fn sample_cmd(
    config: &Path,
    ckpt: &Path,
    out: &Path,
    samples: usize,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let params = load_checkpoint(&cfg, ckpt)?;
    let sched = schedule_of(&cfg)?;
    fs::create_dir_all(out)?;
    let seed = seed.unwrap_or(cfg.seed);
    // Matches the evaluation stream: sample i here is eval sample i.
    let mut rng = SplitMix64::split(seed, streams::EVAL);
    for i in 0..samples {
        let (sample_seed, noise_seed) = (rng.next_u64(), rng.next_u64());
        let s = gen_sample(sample_seed, &cfg.task)?;
        let ids = s.text_ids(cfg.task.text_tokens);
        let mut noise_rng = SplitMix64::split(noise_seed, streams::SAMPLE_NOISE);
        let gen = ddim_sample(&params, &sched, &s.condition(&ids), cfg.sample.steps, &mut noise_rng)?;
        let stem = |kind: &str| format!("s{i:03}_{kind}");
        write_frames(out, &stem("generated"), &to_unit(&gen))?;
        write_frames(out, &stem("target"), &to_unit(&s.target))?;
        write_frames(out, &stem("agnostic"), &to_unit(&s.agnostic))?;
        write_frames(out, &stem("garment"), &to_unit(&s.garment))?;
        println!("sample {i}: seed {sample_seed} label {:?}", s.label);
    }
    println!("wrote {samples} generations to {}", out.display());
    Ok(())
}

fn eval_cmd(
    config: &Path,
    ckpt: &Path,
    out: Option<PathBuf>,
    samples: usize,
    threads: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let params = load_checkpoint(&cfg, ckpt)?;
    let sched = schedule_of(&cfg)?;
    let settings = EvalSettings {
        samples,
        sample_steps: cfg.sample.steps,
        threads: threads.unwrap_or_else(default_threads),
        seed: seed.unwrap_or(cfg.seed),
    };
    let report = eval_run(&params, &sched, &cfg.task, &settings)?;
    println!(
        "eval over {} samples: ssim {:.4}  masked_l2 {:.4}  psnr {}",
        report.samples,
        report.mean_ssim,
        report.mean_masked_l2,
        match report.mean_psnr_db {
            Some(db) => format!("{db:.1} dB"),
            None => "exact".to_string(),
        }
    );
    if let Some(out) = out {
        fs::create_dir_all(&out)?;
        let path = out.join("report.json");
        write_json_pretty(&path, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn ablate(
    config: &Path,
    out: &Path,
    seeds: &str,
    variants: &str,
    eval_samples: usize,
    threads: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds: Vec<u64> = parse_list(seeds, "seed")?;
    let variants: Vec<BlockVariant> = variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_variant)
        .collect::<Result<_>>()?;
    let eval = EvalSettings {
        samples: eval_samples,
        sample_steps: cfg.sample.steps,
        threads: threads.unwrap_or_else(default_threads),
        seed: cfg.seed.wrapping_add(0x5eed),
    };
    fs::create_dir_all(out)?;
    let started = Instant::now();
    let total = seeds.len() * variants.len();
    let mut done = 0usize;
    let report = variant_ablation(&cfg, &variants, &seeds, &eval, &mut |v, s, score| {
        done += 1;
        println!(
            "[{done}/{total}] {:<12} seed {s}  loss {:.4}  ssim {:.4}  ({:.0}s)",
            v.name(),
            score.final_loss,
            score.mean_ssim,
            started.elapsed().as_secs_f64()
        );
    })?;
    let table = report.render_table();
    print!("{table}");
    write_json_pretty(&out.join("ablation.json"), &report)?;
    fs::write(out.join("ablation.txt"), &table)?;
    println!("wrote {}", out.join("ablation.json").display());
    Ok(())
}

fn gradcheck(config: Option<PathBuf>) -> Result<()> {
    let cfg = match config {
        Some(path) => load_config(&path)?,
        None => mnvton_core::config::tiny_gradcheck(),
    };
    let dims = cfg.dims();
    let sched = schedule_of(&cfg)?;
    let sample = gen_sample(cfg.seed, &cfg.task)?;
    let mut rng = SplitMix64::split(cfg.seed, streams::TRAIN_NOISE);
    let t = sched.len() / 2;
    let eps = Tensor::randn(sample.target.shape(), 1.0, &mut rng);
    let x_t = q_sample(&sample.target, t, &eps, &sched)?;
    let ids = sample.text_ids(cfg.task.text_tokens);
    let inputs = build_inputs(&sample.condition(&ids), &x_t, dims.patch)?;

    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    for variant in BlockVariant::ALL {
        // Unconstrained init: random gates exercise every gradient path the
        // zero-initialized release model would mask.
        let params =
            ModelParams::init_unconstrained(variant, dims, 0.25, &mut SplitMix64::new(cfg.seed))?;
        let target = Tensor::randn(
            &[inputs.target_grid.len(), dims.out_width()],
            0.5,
            &mut SplitMix64::new(cfg.seed + 1),
        );
        let flat = params.flatten();
        let err = grad_check(
            |tape: &mut Tape, flat_v| {
                let bound = params.bind_from_flat(tape, flat_v)?;
                let (pred, _) = bound.forward(tape, &inputs, t, false)?;
                let tv = tape.constant(&target)?;
                tape.mse(pred, tv)
            },
            &flat,
            GRAD_CHECK_H,
        )?;
        worst = worst.max(err);
        println!(
            "{:<12} {:>6} params  max rel err {err:.3e}  {}",
            variant.name(),
            params.num_params(),
            if err < tol { "ok" } else { "FAIL" }
        );
    }
    if worst >= tol {
        return Err(Error::numeric(format!(
            "gradient check failed: worst relative error {worst:.3e} >= {tol:e}"
        )));
    }
    println!("all variants within {tol:e}");
    Ok(())
}

fn cost_cmd(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let lens = StreamLens::from_task(&cfg.task, cfg.model.patch)?;
    let mut reports = Vec::new();
    println!(
        "{:<12} {:>9} {:>16} {:>12}",
        "variant", "params", "attention flops", "peak scores"
    );
    for variant in BlockVariant::ALL {
        let r = attention_cost(variant, cfg.dims(), lens)?;
        println!(
            "{:<12} {:>9} {:>16} {:>12}",
            r.variant, r.params, r.attention_flops, r.peak_score_elements
        );
        reports.push(r);
    }
    if let Some(out) = out {
        fs::create_dir_all(&out)?;
        let path = out.join("cost.json");
        write_json_pretty(&path, &reports)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn pca_cmd(config: &Path, ckpt: &Path, out: &Path, sample_seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let params = load_checkpoint(&cfg, ckpt)?;
    let sched = schedule_of(&cfg)?;
    let sample = gen_sample(sample_seed, &cfg.task)?;
    let report = pca_project(&params, &sched, &cfg.task, &sample, cfg.seed)?;
    fs::create_dir_all(out)?;
    for b in &report.blocks {
        // Normalize the score map to [0, 1] for the heatmap image.
        let flat: Vec<f64> = b.scores.iter().flatten().copied().collect();
        let (lo, hi) = flat
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = (hi - lo).max(1e-12);
        let rows = b.scores.len();
        let cols = b.scores[0].len();
        let norm: Vec<f64> = flat.iter().map(|v| (v - lo) / span).collect();
        let img = Tensor::new(vec![1, rows, cols, 1], norm)?;
        write_ppm(&out.join(format!("block{}_scores.ppm", b.block)), &img, 0)?;
        println!(
            "block {}: explained variance {:.3}  autocorr row {:.3} col {:.3}",
            b.block, b.explained_variance_ratio, b.autocorr_row, b.autocorr_col
        );
    }
    write_json_pretty(&out.join("pca.json"), &report)?;
    println!("wrote {}", out.join("pca.json").display());
    Ok(())
}
