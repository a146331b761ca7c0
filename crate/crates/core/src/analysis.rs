//! Cost accounting and model introspection: parameter counts, analytical
//! attention FLOPs, principal-component maps of garment features, and the
//! variant ablation driver.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockVariant;
use crate::config::RunConfig;
use crate::diffusion::{linear_schedule, q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::linalg::eigh_symmetric;
use crate::modality::ModalityTag;
use crate::model::{build_inputs, ModelDims, ModelParams};
use crate::rng::{streams, SplitMix64};
use crate::toytask::{eval_run, EvalSettings, TaskConfig, ToySample};
use crate::train::train_run;
use crate::{Tape, Tensor};

/// Total trainable parameters for a variant at given dimensions.
pub fn param_count(variant: BlockVariant, dims: ModelDims) -> Result<usize> {
    let params = ModelParams::init(variant, dims, &mut SplitMix64::new(0))?;
    Ok(params.num_params())
}

// ---------------------------------------------------------------------------
// attention cost
// ---------------------------------------------------------------------------

/// Token-stream lengths entering the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamLens {
    pub text: usize,
    pub garment: usize,
    pub target: usize,
}

impl StreamLens {
    /// Lengths implied by a task geometry and patch size.
    pub fn from_task(task: &TaskConfig, patch: usize) -> Result<StreamLens> {
        task.validate()?;
        for (name, h, w) in [
            ("garment", task.garment_height, task.garment_width),
            ("target", task.height, task.width),
        ] {
            if h % patch != 0 || w % patch != 0 {
                return Err(Error::config(format!(
                    "{name} grid {h}x{w} not divisible by patch {patch}"
                )));
            }
        }
        Ok(StreamLens {
            text: task.text_tokens,
            garment: (task.garment_height / patch) * (task.garment_width / patch),
            target: task.frames * (task.height / patch) * (task.width / patch),
        })
    }

    pub fn total(&self) -> usize {
        self.text + self.garment + self.target
    }
}

/// Multiply-accumulates of one attention layer: Q/K/V/output projections
/// plus the two score/value matmuls. `lq` query rows attend over `lkv` rows.
fn attention_layer_mults(lq: usize, lkv: usize, d: usize) -> usize {
    (2 * lq + 2 * lkv) * d * d + 2 * lq * lkv * d
}

/// Analytical cost of the attention path (projections + attention matmuls;
/// the MLP is identical across variants and excluded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub lens: StreamLens,
    pub params: usize,
    /// Twice the multiply-accumulates over all layers (and both stacks for
    /// the dual-network variant).
    pub attention_flops: usize,
    /// Largest single attention score matrix, in elements.
    pub peak_score_elements: usize,
}

/// Computes [`CostReport`] for one variant.
pub fn attention_cost(
    variant: BlockVariant,
    dims: ModelDims,
    lens: StreamLens,
) -> Result<CostReport> {
    let d = dims.d;
    let n = dims.layers;
    let (lt, lg, ltg) = (lens.text, lens.garment, lens.target);
    let full = lt + lg + ltg;
    let main_only = lt + ltg;
    let (mults, peak) = match variant {
        // Queries restrict to text+target in every layer; after the first
        // layer the stream itself has shrunk to those rows.
        BlockVariant::NaiveSplit => {
            let first = attention_layer_mults(main_only, full, d);
            let rest = attention_layer_mults(main_only, main_only, d);
            (first + (n - 1) * rest, dims.heads * main_only * full)
        }
        // Reference stack runs garment-only attention; its per-layer output
        // joins the main stack as extra key/value rows.
        BlockVariant::DualNet => {
            let main = attention_layer_mults(main_only, main_only + lg, d);
            let reference = attention_layer_mults(lg, lg, d);
            (
                n * (main + reference),
                dims.heads * (main_only * (main_only + lg)).max(lg * lg),
            )
        }
        // Single shared stream: full self-attention every layer.
        _ => (n * attention_layer_mults(full, full, d), dims.heads * full * full),
    };
    Ok(CostReport {
        variant: variant.name().to_string(),
        d,
        heads: dims.heads,
        layers: n,
        lens,
        params: param_count(variant, dims)?,
        attention_flops: 2 * mults,
        peak_score_elements: peak,
    })
}

// ---------------------------------------------------------------------------
// garment-feature PCA
// ---------------------------------------------------------------------------

/// First principal component of one block's garment features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockPca {
    pub block: usize,
    /// Share of feature variance captured by the first component.
    pub explained_variance_ratio: f64,
    /// `[rows][cols]` score map over the garment patch grid.
    pub scores: Vec<Vec<f64>>,
    /// |Pearson correlation| of the score map with itself shifted one row.
    pub autocorr_row: f64,
    /// Same, shifted one column.
    pub autocorr_col: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaReport {
    pub variant: String,
    pub sample_seed: u64,
    /// Timestep at which the noisy input was formed.
    pub t: usize,
    pub blocks: Vec<BlockPca>,
}

fn pearson_abs(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).abs()
}

/// Runs the model once on a mid-schedule noisy version of `sample` and
/// projects each block's garment features onto their first principal
/// component. For the dual-network variant the features come from the
/// reference stack; the query-restricted baseline drops garment rows after
/// the first block, so it has no garment features to project.
pub fn pca_project(
    params: &ModelParams,
    sched: &DiffusionSchedule,
    task: &TaskConfig,
    sample: &ToySample,
    seed: u64,
) -> Result<PcaReport> {
    if params.variant == BlockVariant::NaiveSplit {
        return Err(Error::contract(
            "the query-restricted baseline discards garment rows after block 1; \
             no garment features exist to project",
        ));
    }
    let t = sched.len() / 2;
    let mut rng = SplitMix64::split(seed, streams::PCA);
    let eps = Tensor::randn(sample.target.shape(), 1.0, &mut rng);
    let x_t = q_sample(&sample.target, t, &eps, sched)?;
    let ids = sample.text_ids(task.text_tokens);
    let inputs = build_inputs(&sample.condition(&ids), &x_t, params.dims.patch)?;

    let mut tape = Tape::new();
    let mut order = Vec::new();
    let bound = params.bind(&mut tape, &mut order)?;
    let (_, trace) = bound.forward(&mut tape, &inputs, t, true)?;
    let trace = trace.expect("trace requested");

    let grid = inputs.garment_grid;
    let (rows, cols) = (grid.rows, grid.cols);
    let use_reference = params.variant.uses_reference_net();
    let stack = if use_reference { &trace.reference } else { &trace.main };
    let mut blocks = Vec::new();
    for (bi, bt) in stack.iter().enumerate() {
        let features = if use_reference {
            bt.output.clone()
        } else {
            let r = bt.out_layout.range(ModalityTag::Garment);
            slice_rows(&bt.output, r.start, r.end)?
        };
        let (lg, d) = features.dims2()?;
        if lg != rows * cols {
            return Err(Error::shape(format!(
                "block {bi}: {lg} garment rows for a {rows}x{cols} patch grid"
            )));
        }
        if lg < 2 {
            return Err(Error::contract("need at least two garment tokens for a PCA"));
        }

        // Column-centered covariance.
        let mut centered = features.clone();
        for j in 0..d {
            let mean = (0..lg).map(|i| features.get2(i, j)).sum::<f64>() / lg as f64;
            for i in 0..lg {
                let v = centered.get2(i, j) - mean;
                centered.set2(i, j, v);
            }
        }
        let cov = centered.transpose2()?.matmul(&centered)?.scale(1.0 / (lg - 1) as f64);
        let (evals, evecs) = eigh_symmetric(&cov)?;
        let total: f64 = evals.iter().map(|&l| l.max(0.0)).sum();
        let evr = if total > 0.0 { evals[0].max(0.0) / total } else { 0.0 };

        // First component, sign fixed so its largest-magnitude loading is
        // positive (eigenvector sign is otherwise arbitrary).
        let mut v1: Vec<f64> = (0..d).map(|j| evecs.get2(0, j)).collect();
        let lead = v1
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v1[lead] < 0.0 {
            for v in &mut v1 {
                *v = -*v;
            }
        }

        let flat: Vec<f64> = (0..lg)
            .map(|i| (0..d).map(|j| centered.get2(i, j) * v1[j]).sum())
            .collect();
        let scores: Vec<Vec<f64>> =
            (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect();

        let row_pairs_a: Vec<f64> = (0..rows - 1)
            .flat_map(|r| scores[r].iter().copied().collect::<Vec<_>>())
            .collect();
        let row_pairs_b: Vec<f64> = (1..rows)
            .flat_map(|r| scores[r].iter().copied().collect::<Vec<_>>())
            .collect();
        let col_pairs_a: Vec<f64> = (0..rows)
            .flat_map(|r| scores[r][..cols - 1].to_vec())
            .collect();
        let col_pairs_b: Vec<f64> =
            (0..rows).flat_map(|r| scores[r][1..].to_vec()).collect();

        blocks.push(BlockPca {
            block: bi,
            explained_variance_ratio: evr,
            scores,
            autocorr_row: pearson_abs(&row_pairs_a, &row_pairs_b),
            autocorr_col: pearson_abs(&col_pairs_a, &col_pairs_b),
        });
    }
    Ok(PcaReport {
        variant: params.variant.name().to_string(),
        sample_seed: sample.seed,
        t,
        blocks,
    })
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (rows, cols) = t.dims2()?;
    if start > end || end > rows {
        return Err(Error::shape(format!("row slice {start}..{end} of {rows}")));
    }
    let data = t.data()[start * cols..end * cols].to_vec();
    Tensor::new(vec![end - start, cols], data)
}

// ---------------------------------------------------------------------------
// variant ablation
// ---------------------------------------------------------------------------

/// Scores of one trained run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: u64,
    pub final_loss: f64,
    pub mean_ssim: f64,
    pub mean_masked_l2: f64,
}

/// One variant's runs across all seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub mean_masked_l2: f64,
    pub runs: Vec<RunScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    /// Hash of the base configuration (variant/seed columns vary per run).
    pub config_hash: String,
    pub train_steps: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn summary(&self, variant: BlockVariant) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == variant.name())
    }

    /// Plain-text table, one row per variant.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>12}   per-seed ssim\n",
            "variant", "ssim", "ssim sd", "masked l2"
        ));
        for v in &self.variants {
            let per_seed: Vec<String> =
                v.runs.iter().map(|r| format!("{:.3}", r.mean_ssim)).collect();
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>10.4} {:>12.4}   {}\n",
                v.variant,
                v.mean_ssim,
                v.std_ssim,
                v.mean_masked_l2,
                per_seed.join(" ")
            ));
        }
        out
    }
}

/// Trains every `variant` x `seed` combination from `base` and scores each
/// run on the same evaluation batch (fixed by `eval.seed`). `on_run` fires
/// after each run completes.
pub fn variant_ablation(
    base: &RunConfig,
    variants: &[BlockVariant],
    seeds: &[u64],
    eval: &EvalSettings,
    on_run: &mut dyn FnMut(BlockVariant, u64, &RunScore),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one variant and one seed"));
    }
    base.validate()?;
    let sched = linear_schedule(
        base.schedule.steps,
        base.schedule.beta_start,
        base.schedule.beta_end,
    )?;
    let mut summaries = Vec::new();
    for &variant in variants {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = base.with_variant(variant).with_seed(seed);
            let out = train_run(&cfg)?;
            let mut settings = *eval;
            settings.sample_steps = cfg.sample.steps;
            let report = eval_run(&out.params, &sched, &cfg.task, &settings)?;
            let score = RunScore {
                seed,
                final_loss: out.metrics.last().map(|r| r.loss).unwrap_or(f64::NAN),
                mean_ssim: report.mean_ssim,
                mean_masked_l2: report.mean_masked_l2,
            };
            on_run(variant, seed, &score);
            runs.push(score);
        }
        let n = runs.len() as f64;
        let mean_ssim = runs.iter().map(|r| r.mean_ssim).sum::<f64>() / n;
        let var = runs.iter().map(|r| (r.mean_ssim - mean_ssim).powi(2)).sum::<f64>() / n;
        let mean_masked_l2 = runs.iter().map(|r| r.mean_masked_l2).sum::<f64>() / n;
        summaries.push(VariantSummary {
            variant: variant.name().to_string(),
            mean_ssim,
            std_ssim: var.sqrt(),
            mean_masked_l2,
            runs,
        });
    }
    Ok(AblationReport {
        config_hash: base.content_hash()?,
        train_steps: base.train.steps,
        eval_samples: eval.samples,
        eval_seed: eval.seed,
        seeds: seeds.to_vec(),
        variants: summaries,
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
