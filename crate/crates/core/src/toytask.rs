//! Synthetic garment-placement inpainting task.
//!
//! Every sample is fully determined by a seed: a smooth two-color background,
//! a small textured garment patch (stripes, checker, or gradient), and a
//! binary mask covering the upper or lower half of the frame depending on the
//! text label. The ground-truth target tiles the garment texture across the
//! masked region; video samples translate the tiling per frame by a seeded
//! integer offset, with frame 0 always at zero offset. The model sees the
//! background with the masked region zeroed, the mask itself, the garment
//! patch, and the label token — everything it needs to reconstruct the
//! target, which keeps the task solvable at desk scale.
//!
//! Grids are in model range `[-1, 1]`; metrics convert to `[0, 1]` via
//! [`to_unit`].

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::metrics::{masked_l2, psnr, ssim};
use crate::model::{ConditionSet, TEXT_LOWER, TEXT_PAD, TEXT_UPPER};
use crate::rng::{streams, SplitMix64};
use crate::Tensor;

/// Geometry of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub garment_height: usize,
    pub garment_width: usize,
    /// Text stream length; position 0 carries the label, the rest padding.
    pub text_tokens: usize,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.height == 0
            || self.width == 0
            || self.channels == 0
            || self.garment_height == 0
            || self.garment_width == 0
        {
            return Err(Error::config("task dimensions must be positive"));
        }
        if self.height % 2 != 0 {
            return Err(Error::config(format!(
                "height {} must be even so the mask can cover exactly half the rows",
                self.height
            )));
        }
        if self.text_tokens == 0 {
            return Err(Error::config(
                "text_tokens must be at least 1 to carry the placement label",
            ));
        }
        Ok(())
    }
}

/// Garment placement label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Upper,
    Lower,
}

impl Label {
    pub fn swapped(self) -> Label {
        match self {
            Label::Upper => Label::Lower,
            Label::Lower => Label::Upper,
        }
    }

    pub fn text_id(self) -> usize {
        match self {
            Label::Upper => TEXT_UPPER,
            Label::Lower => TEXT_LOWER,
        }
    }

    /// First row of the masked half for a given frame height.
    fn mask_top(self, height: usize) -> usize {
        match self {
            Label::Upper => 0,
            Label::Lower => height / 2,
        }
    }
}

/// One fully generated task sample.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub seed: u64,
    pub label: Label,
    /// `[1, gh, gw, c]` garment patch.
    pub garment: Tensor,
    /// `[f, h, w, c]` ground-truth frames.
    pub target: Tensor,
    /// `[f, h, w, c]` background with the masked region zeroed.
    pub agnostic: Tensor,
    /// `[f, h, w, 1]` mask, 1 inside the region to fill.
    pub mask: Tensor,
    /// `[f, h, w, c]` clean background (diagnostic; not shown to the model).
    pub background: Tensor,
    /// Per-frame `(dx, dy)` tiling offsets; frame 0 is always `(0, 0)`.
    pub translations: Vec<(usize, usize)>,
}

impl ToySample {
    /// Token ids for the text stream: label first, padding after.
    pub fn text_ids(&self, text_tokens: usize) -> Vec<usize> {
        let mut ids = vec![TEXT_PAD; text_tokens];
        if !ids.is_empty() {
            ids[0] = self.label.text_id();
        }
        ids
    }

    /// Borrowed conditioning view; `ids` usually comes from [`Self::text_ids`].
    pub fn condition<'a>(&'a self, ids: &'a [usize]) -> ConditionSet<'a> {
        ConditionSet {
            text_ids: ids,
            garment: &self.garment,
            agnostic: &self.agnostic,
            mask: &self.mask,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TextureFamily {
    Stripes,
    Checker,
    Gradient,
}

/// Seeded texture parameters; value is defined for any integer coordinate.
struct Texture {
    family: TextureFamily,
    color_a: Vec<f64>,
    color_b: Vec<f64>,
    period: usize,
    phase: usize,
    /// true: pattern varies along rows; false: along columns.
    along_rows: bool,
    gh: usize,
    gw: usize,
}

impl Texture {
    fn value(&self, r: usize, c: usize, ch: usize) -> f64 {
        let a = self.color_a[ch];
        let b = self.color_b[ch];
        match self.family {
            TextureFamily::Stripes => {
                let u = if self.along_rows { r } else { c };
                if ((u + self.phase) / self.period) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
            TextureFamily::Checker => {
                let i = (r + self.phase) / self.period + (c + self.phase) / self.period;
                if i % 2 == 0 {
                    a
                } else {
                    b
                }
            }
            TextureFamily::Gradient => {
                let (u, len) = if self.along_rows { (r, self.gh) } else { (c, self.gw) };
                let span = (len - 1).max(1) as f64;
                let t = ((u + self.phase) % len) as f64 / span;
                a + (b - a) * t
            }
        }
    }
}

/// Generates the sample determined by `seed`.
pub fn gen_sample(seed: u64, cfg: &TaskConfig) -> Result<ToySample> {
    gen_sample_with_label(seed, cfg, None)
}

/// Same as [`gen_sample`] but with the label overridden after the label draw,
/// so all other random choices (background, texture, motion) are identical to
/// the unforced sample with the same seed.
pub fn gen_sample_with_label(seed: u64, cfg: &TaskConfig, force: Option<Label>) -> Result<ToySample> {
    cfg.validate()?;
    let (f, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let (gh, gw) = (cfg.garment_height, cfg.garment_width);
    let mut rng = SplitMix64::new(seed);

    let drawn = if rng.next_bool() { Label::Upper } else { Label::Lower };
    let label = force.unwrap_or(drawn);

    let draw_colors = |rng: &mut SplitMix64| -> Vec<f64> {
        (0..c).map(|_| rng.next_range_f64(-1.0, 1.0)).collect()
    };
    let bg0 = draw_colors(&mut rng);
    let bg1 = draw_colors(&mut rng);

    let family = match rng.next_below(3) {
        0 => TextureFamily::Stripes,
        1 => TextureFamily::Checker,
        _ => TextureFamily::Gradient,
    };
    let color_a = draw_colors(&mut rng);
    let color_b = draw_colors(&mut rng);
    let period = 2 + rng.next_below(3);
    let phase = rng.next_below(period);
    let along_rows = rng.next_bool();
    let tex = Texture { family, color_a, color_b, period, phase, along_rows, gh, gw };

    // Per-frame translation strides, drawn even for single images so the
    // stream layout does not depend on the frame count.
    let sdx = rng.next_below(gw);
    let sdy = rng.next_below(gh);
    let translations: Vec<(usize, usize)> =
        (0..f).map(|fi| ((fi * sdx) % gw, (fi * sdy) % gh)).collect();

    // Background: a fixed diagonal blend, identical in every frame.
    let diag = (h + w - 2).max(1) as f64;
    let mut background = Tensor::full(&[f, h, w, c], 0.0);
    for fi in 0..f {
        for r in 0..h {
            for col in 0..w {
                let t = (r + col) as f64 / diag;
                for ch in 0..c {
                    let v = bg0[ch] + (bg1[ch] - bg0[ch]) * t;
                    background.data_mut()[((fi * h + r) * w + col) * c + ch] = v;
                }
            }
        }
    }

    let mut garment = Tensor::full(&[1, gh, gw, c], 0.0);
    for r in 0..gh {
        for col in 0..gw {
            for ch in 0..c {
                garment.data_mut()[(r * gw + col) * c + ch] = tex.value(r, col, ch);
            }
        }
    }

    let top = label.mask_top(h);
    let half = h / 2;
    let mut mask = Tensor::full(&[f, h, w, 1], 0.0);
    let mut target = background.clone();
    let mut agnostic = background.clone();
    for fi in 0..f {
        let (dx, dy) = translations[fi];
        for r in top..top + half {
            for col in 0..w {
                mask.data_mut()[(fi * h + r) * w + col] = 1.0;
                for ch in 0..c {
                    let tr = (r - top + dy) % gh;
                    let tc = (col + dx) % gw;
                    let idx = ((fi * h + r) * w + col) * c + ch;
                    target.data_mut()[idx] = tex.value(tr, tc, ch);
                    agnostic.data_mut()[idx] = 0.0;
                }
            }
        }
    }

    Ok(ToySample { seed, label, garment, target, agnostic, mask, background, translations })
}

/// Maps model range `[-1, 1]` to metric range `[0, 1]`, clamping overshoot.
pub fn to_unit(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Evaluation batch settings.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub samples: usize,
    /// Sampler steps per generation.
    pub sample_steps: usize,
    pub threads: usize,
    pub seed: u64,
}

/// Metrics for one generated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub seed: u64,
    pub ssim: f64,
    /// `None` when the generation matched the target exactly.
    pub psnr_db: Option<f64>,
    pub masked_l2: f64,
}

/// Aggregate metrics over an evaluation batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_ssim: f64,
    /// Mean over finite per-sample values; `None` if every sample was exact.
    pub mean_psnr_db: Option<f64>,
    pub psnr_infinite_count: usize,
    pub mean_masked_l2: f64,
    pub per_sample: Vec<SampleEval>,
}

fn eval_one<P: NoisePredictor + ?Sized>(
    predictor: &P,
    sched: &DiffusionSchedule,
    cfg: &TaskConfig,
    sample_seed: u64,
    noise_seed: u64,
    steps: usize,
) -> Result<SampleEval> {
    let sample = gen_sample(sample_seed, cfg)?;
    let ids = sample.text_ids(cfg.text_tokens);
    let cond = sample.condition(&ids);
    let mut noise_rng = SplitMix64::split(noise_seed, streams::SAMPLE_NOISE);
    let gen = ddim_sample(predictor, sched, &cond, steps, &mut noise_rng)?;
    let gen01 = to_unit(&gen);
    let tgt01 = to_unit(&sample.target);
    Ok(SampleEval {
        seed: sample_seed,
        ssim: ssim(&gen01, &tgt01)?,
        psnr_db: psnr(&gen01, &tgt01)?,
        masked_l2: masked_l2(&gen01, &tgt01, &sample.mask)?,
    })
}

/// Generates and scores `samples` fresh samples. Work is split across
/// `threads` OS threads; per-sample seeds are pre-drawn sequentially, so the
/// result is identical for any thread count.
pub fn eval_run<P: NoisePredictor + Sync + ?Sized>(
    predictor: &P,
    sched: &DiffusionSchedule,
    cfg: &TaskConfig,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    cfg.validate()?;
    if settings.samples == 0 {
        return Err(Error::config("eval needs at least one sample"));
    }
    let n = settings.samples;
    let mut master = SplitMix64::split(settings.seed, streams::EVAL);
    let seeds: Vec<(u64, u64)> = (0..n).map(|_| (master.next_u64(), master.next_u64())).collect();

    let threads = settings.threads.max(1).min(n);
    let mut slots: Vec<Option<Result<SampleEval>>> = Vec::new();
    slots.resize_with(n, || None);
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<SampleEval>>] = &mut slots;
        let mut offset = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let seeds = &seeds;
            scope.spawn(move || {
                for (j, slot) in head.iter_mut().enumerate() {
                    let (ss, ns) = seeds[offset + j];
                    *slot = Some(eval_one(predictor, sched, cfg, ss, ns, settings.sample_steps));
                }
            });
            rest = tail;
            offset += take;
        }
    });

    let mut per_sample = Vec::with_capacity(n);
    for slot in slots {
        per_sample.push(slot.expect("all slots filled")?);
    }
    let mean_ssim = per_sample.iter().map(|s| s.ssim).sum::<f64>() / n as f64;
    let mean_masked = per_sample.iter().map(|s| s.masked_l2).sum::<f64>() / n as f64;
    let finite: Vec<f64> = per_sample.iter().filter_map(|s| s.psnr_db).collect();
    let psnr_infinite_count = n - finite.len();
    let mean_psnr_db = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    Ok(EvalReport {
        samples: n,
        mean_ssim,
        mean_psnr_db,
        psnr_infinite_count,
        mean_masked_l2: mean_masked,
        per_sample,
    })
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
