//! Full denoiser assembly: token embedding, conditioning, block stacks, and
//! the output head, for every attention-wiring variant.
//!
//! A single-network variant embeds text, garment, and target tokens into one
//! stream and runs the shared block stack over it. The dual-network variant
//! keeps garment tokens in a separate reference stack whose per-layer outputs
//! are appended to the main stack's keys and values. The reference stack
//! mirrors the main stack's block structure (including both conditioning
//! maps) but has no text table, timestep embedder, or output head; it shares
//! the main network's conditioning vector.
//!
//! Visual tokens from both streams pass through one shared input projection.
//! Every patch token carries `2c + 1` channels per pixel: for target tokens
//! these are noisy target, inpainting background, and mask; garment tokens
//! fill the garment colors into the first `c` channels and zero the rest.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    block_forward, unpack_row, BlockInput, BlockParams, BlockTrace, BlockVariant, BoundBlock,
    BoundLinear, Linear, QueryRows, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::modality::{axis_sincos, build_pos_embed, GridShape, ModalityLayout, ModalityTag, PatchGrid};
use crate::rng::SplitMix64;
use crate::tape::TVar;
use crate::{Tape, Tensor};

/// Text vocabulary: a padding id plus one id per garment placement label.
pub const VOCAB_SIZE: usize = 3;
pub const TEXT_PAD: usize = 0;
pub const TEXT_UPPER: usize = 1;
pub const TEXT_LOWER: usize = 2;

/// Architecture hyperparameters as they appear in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Patch side length for visual tokens.
    pub patch: usize,
}

/// Resolved dimensions shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: usize,
    /// Color channels of the task grids.
    pub channels: usize,
}

impl ModelDims {
    pub fn new(model: &ModelConfig, channels: usize) -> Self {
        ModelDims {
            d: model.d,
            heads: model.heads,
            layers: model.layers,
            patch: model.patch,
            channels,
        }
    }

    /// Channels per pixel of a raw visual token: noisy target, background,
    /// and mask planes side by side.
    pub fn token_channels(&self) -> usize {
        2 * self.channels + 1
    }

    /// Width of a raw visual token.
    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.token_channels()
    }

    /// Width of one predicted output token.
    pub fn out_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible into {} heads",
                self.d, self.heads
            )));
        }
        if self.d % 6 != 0 {
            return Err(Error::config(format!(
                "width {} must be divisible by 6 so the three positional axes split into sin/cos halves",
                self.d
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of a diffusion timestep, shaped `[1, d]`.
pub fn timestep_features(t: usize, d: usize) -> Tensor {
    let v: Vec<f64> = axis_sincos(t as f64, d);
    Tensor::new(vec![1, d], v).expect("sincos length matches d")
}

/// Two-layer timestep embedder.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimestepEmbedder {
    fn init(d: usize, std: f64, rng: &mut SplitMix64) -> Self {
        TimestepEmbedder {
            fc1: Linear::init(d, d, true, std, rng),
            fc2: Linear::init(d, d, true, std, rng),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Parameters of the main network.
#[derive(Debug, Clone)]
pub struct NetParams {
    /// `[VOCAB_SIZE, d]` text embedding table.
    pub text_table: Tensor,
    /// `[3, d]` per-modality additive embedding, indexed by modality.
    pub seg_table: Tensor,
    /// Shared projection of raw visual tokens into the model width.
    pub visual_proj: Linear,
    pub t_embed: TimestepEmbedder,
    pub blocks: Vec<BlockParams>,
    /// `[d, 2d]` conditioning map for the output head's shift/scale.
    pub final_mod: Linear,
    /// `[d, out_width]` output projection; zero at init so the untrained
    /// model predicts zero noise.
    pub final_proj: Linear,
}

/// Parameters of the reference network used by the dual-network variant.
/// Structurally mirrors the main stack's blocks but has no text table,
/// timestep embedder, or output head.
#[derive(Debug, Clone)]
pub struct ReferenceNetParams {
    pub seg_table: Tensor,
    pub visual_proj: Linear,
    pub blocks: Vec<BlockParams>,
}

/// A complete model: variant tag, dimensions, main net, optional reference.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub variant: BlockVariant,
    pub dims: ModelDims,
    pub net: NetParams,
    pub reference: Option<ReferenceNetParams>,
}

impl ModelParams {
    /// Standard initialization: normal weights (std 0.02), zero gates, zero
    /// output projection.
    pub fn init(variant: BlockVariant, dims: ModelDims, rng: &mut SplitMix64) -> Result<Self> {
        Self::build(variant, dims, rng, false, crate::blocks::DEFAULT_INIT_STD)
    }

    /// Everything random, including gates and the output projection. Only
    /// for gradient checks, where zero-initialized paths carry no signal.
    pub fn init_unconstrained(
        variant: BlockVariant,
        dims: ModelDims,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Self::build(variant, dims, rng, true, std)
    }

    // Dimensions are not re-validated here; `ModelDims::validate` runs when a
    // run config is loaded. Widths that cannot host positional embeddings
    // (d % 6 != 0) still construct fine for parameter accounting.
    fn build(
        variant: BlockVariant,
        dims: ModelDims,
        rng: &mut SplitMix64,
        unconstrained: bool,
        std: f64,
    ) -> Result<Self> {
        let d = dims.d;
        let groups = variant.grouping().group_count();
        let mk_blocks = |rng: &mut SplitMix64| -> Result<Vec<BlockParams>> {
            (0..dims.layers)
                .map(|_| {
                    if unconstrained {
                        BlockParams::init_unconstrained(groups, d, d, dims.heads, std, rng)
                    } else {
                        BlockParams::init(groups, d, d, dims.heads, rng)
                    }
                })
                .collect()
        };
        let net = NetParams {
            text_table: Tensor::randn(&[VOCAB_SIZE, d], std, rng),
            seg_table: Tensor::randn(&[3, d], std, rng),
            visual_proj: Linear::init(dims.token_width(), d, true, std, rng),
            t_embed: TimestepEmbedder::init(d, std, rng),
            blocks: mk_blocks(rng)?,
            final_mod: Linear::init(d, 2 * d, true, std, rng),
            final_proj: if unconstrained {
                let mut l = Linear::init(d, dims.out_width(), true, std, rng);
                if let Some(b) = &mut l.bias {
                    for v in b.data_mut() {
                        *v = rng.next_normal() * std;
                    }
                }
                l
            } else {
                Linear::zeros(d, dims.out_width(), true)
            },
        };
        let reference = if variant.uses_reference_net() {
            Some(ReferenceNetParams {
                seg_table: Tensor::randn(&[3, d], std, rng),
                visual_proj: Linear::init(dims.token_width(), d, true, std, rng),
                blocks: mk_blocks(rng)?,
            })
        } else {
            None
        };
        Ok(ModelParams { variant, dims, net, reference })
    }

    /// Walks every parameter tensor in canonical order with dotted names.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("text_table".into(), &self.net.text_table);
        f("seg_table".into(), &self.net.seg_table);
        self.net.visual_proj.visit("visual_proj", f);
        self.net.t_embed.visit("t_embed", f);
        for (i, b) in self.net.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.net.final_mod.visit("final_mod", f);
        self.net.final_proj.visit("final_proj", f);
        if let Some(r) = &self.reference {
            f("reference.seg_table".into(), &r.seg_table);
            r.visual_proj.visit("reference.visual_proj", f);
            for (i, b) in r.blocks.iter().enumerate() {
                b.visit(&format!("reference.blocks.{i}"), f);
            }
        }
    }

    /// Same walk with mutable access, in the same canonical order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("text_table".into(), &mut self.net.text_table);
        f("seg_table".into(), &mut self.net.seg_table);
        self.net.visual_proj.visit_mut("visual_proj", f);
        self.net.t_embed.visit_mut("t_embed", f);
        for (i, b) in self.net.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.net.final_mod.visit_mut("final_mod", f);
        self.net.final_proj.visit_mut("final_proj", f);
        if let Some(r) = &mut self.reference {
            f("reference.seg_table".into(), &mut r.seg_table);
            r.visual_proj.visit_mut("reference.visual_proj", f);
            for (i, b) in r.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("reference.blocks.{i}"), f);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Parameter shapes in canonical order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut s = Vec::new();
        self.visit(&mut |_, t| s.push(t.shape().to_vec()));
        s
    }

    /// All parameters flattened into one row tensor, canonical order.
    pub fn flatten(&self) -> Tensor {
        let mut flat = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| flat.extend_from_slice(t.data()));
        Tensor::new(vec![1, flat.len()], flat).expect("flat length consistent")
    }

    /// Overwrites every parameter from a flat row in canonical order.
    pub fn unflatten(&mut self, flat: &Tensor) -> Result<()> {
        if flat.numel() != self.num_params() {
            return Err(Error::shape(format!(
                "unflatten: {} values for {} parameters",
                flat.numel(),
                self.num_params()
            )));
        }
        let mut off = 0;
        let data = flat.data().to_vec();
        self.visit_mut(&mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&data[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Binds every parameter as a tape leaf, in canonical order, appending
    /// the created variables to `order`.
    pub fn bind(&self, tape: &mut Tape, order: &mut Vec<TVar>) -> Result<BoundModel> {
        let mut tensors: Vec<&Tensor> = Vec::new();
        self.visit(&mut |_, t| tensors.push(t));
        let start = order.len();
        for t in tensors {
            order.push(tape.leaf(t)?);
        }
        let mut it = order[start..].iter().copied();
        self.bind_vars(&mut it)
    }

    /// Structures pre-made tape variables (canonical order) into a bound
    /// model. Used together with [`unpack_row`] to treat the whole parameter
    /// set as one differentiable vector.
    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = TVar>) -> Result<BoundModel> {
        let next = |vars: &mut dyn Iterator<Item = TVar>| -> Result<TVar> {
            vars.next().ok_or_else(|| Error::contract("bind_vars: ran out of bound variables"))
        };
        let text_table = next(vars)?;
        let seg_table = next(vars)?;
        let visual_proj = self.net.visual_proj.bind_vars(vars)?;
        let t_fc1 = self.net.t_embed.fc1.bind_vars(vars)?;
        let t_fc2 = self.net.t_embed.fc2.bind_vars(vars)?;
        let blocks = self
            .net
            .blocks
            .iter()
            .map(|b| b.bind_vars(vars))
            .collect::<Result<Vec<_>>>()?;
        let final_mod = self.net.final_mod.bind_vars(vars)?;
        let final_proj = self.net.final_proj.bind_vars(vars)?;
        let reference = match &self.reference {
            Some(r) => Some(BoundReference {
                seg_table: next(vars)?,
                visual_proj: r.visual_proj.bind_vars(vars)?,
                blocks: r.blocks.iter().map(|b| b.bind_vars(vars)).collect::<Result<Vec<_>>>()?,
            }),
            None => None,
        };
        Ok(BoundModel {
            variant: self.variant,
            dims: self.dims,
            text_table,
            seg_table,
            visual_proj,
            t_fc1,
            t_fc2,
            blocks,
            final_mod,
            final_proj,
            reference,
        })
    }

    /// Binds the whole model from a single flat `[1, P]` tape variable.
    pub fn bind_from_flat(&self, tape: &mut Tape, flat: TVar) -> Result<BoundModel> {
        let pieces = unpack_row(tape, flat, &self.shapes())?;
        let mut it = pieces.into_iter();
        self.bind_vars(&mut it)
    }
}

#[derive(Debug, Clone)]
pub struct BoundReference {
    pub seg_table: TVar,
    pub visual_proj: BoundLinear,
    pub blocks: Vec<BoundBlock>,
}

/// Model parameters bound onto a tape, plus the metadata needed to run them.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub variant: BlockVariant,
    pub dims: ModelDims,
    pub text_table: TVar,
    pub seg_table: TVar,
    pub visual_proj: BoundLinear,
    pub t_fc1: BoundLinear,
    pub t_fc2: BoundLinear,
    pub blocks: Vec<BoundBlock>,
    pub final_mod: BoundLinear,
    pub final_proj: BoundLinear,
    pub reference: Option<BoundReference>,
}

// ---------------------------------------------------------------------------
// input assembly
// ---------------------------------------------------------------------------

/// Borrowed view over the conditioning data for one sample.
#[derive(Debug, Clone, Copy)]
pub struct ConditionSet<'a> {
    pub text_ids: &'a [usize],
    /// `[1, gh, gw, c]` garment colors in model range.
    pub garment: &'a Tensor,
    /// `[f, h, w, c]` background with the masked region zeroed.
    pub agnostic: &'a Tensor,
    /// `[f, h, w, 1]` inpainting mask, 1 inside the region to fill.
    pub mask: &'a Tensor,
}

/// Tokenized inputs for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub text_ids: Vec<usize>,
    /// `[Lg, token_width]` raw garment tokens.
    pub garment_tokens: Tensor,
    /// `[Lt, token_width]` raw target tokens (noisy target + conditioning).
    pub target_tokens: Tensor,
    pub garment_grid: PatchGrid,
    pub target_grid: PatchGrid,
    /// Stream layout for single-network variants (the dual-network main
    /// stream simply has zero garment rows).
    pub layout: ModalityLayout,
}

fn grid_dims(t: &Tensor, what: &str) -> Result<GridShape> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("{what}: expected rank-4 grid, got {s:?}")));
    }
    Ok(GridShape::new(s[0], s[1], s[2], s[3]))
}

/// Interleaves grids along the channel axis: output channel blocks follow
/// the order of `parts`.
fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let g0 = grid_dims(parts[0], "concat_channels")?;
    let total_c: usize = {
        let mut c = 0;
        for p in parts {
            let g = grid_dims(p, "concat_channels")?;
            if (g.frames, g.height, g.width) != (g0.frames, g0.height, g0.width) {
                return Err(Error::shape(format!(
                    "concat_channels: grid {:?} disagrees with {:?}",
                    p.shape(),
                    parts[0].shape()
                )));
            }
            c += g.channels;
        }
        c
    };
    let pixels = g0.frames * g0.height * g0.width;
    let mut data = Vec::with_capacity(pixels * total_c);
    for px in 0..pixels {
        for p in parts {
            let c = p.shape()[3];
            data.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![g0.frames, g0.height, g0.width, total_c], data)
}

/// Builds raw token matrices from one sample's grids plus the current noisy
/// target. Garment tokens zero-fill the non-garment channel slots so both
/// streams share the input projection.
pub fn build_inputs(cond: &ConditionSet, x_noisy: &Tensor, patch: usize) -> Result<ModelInputs> {
    let tgt_shape = grid_dims(x_noisy, "build_inputs: noisy target")?;
    let ag_shape = grid_dims(cond.agnostic, "build_inputs: agnostic")?;
    let mask_shape = grid_dims(cond.mask, "build_inputs: mask")?;
    let g_shape = grid_dims(cond.garment, "build_inputs: garment")?;
    let c = tgt_shape.channels;
    if ag_shape != tgt_shape {
        return Err(Error::shape(format!(
            "build_inputs: agnostic grid {:?} does not match target {:?}",
            cond.agnostic.shape(),
            x_noisy.shape()
        )));
    }
    if (mask_shape.frames, mask_shape.height, mask_shape.width, mask_shape.channels)
        != (tgt_shape.frames, tgt_shape.height, tgt_shape.width, 1)
    {
        return Err(Error::shape(format!(
            "build_inputs: mask grid {:?} does not match target {:?}",
            cond.mask.shape(),
            x_noisy.shape()
        )));
    }
    if g_shape.frames != 1 || g_shape.channels != c {
        return Err(Error::shape(format!(
            "build_inputs: garment grid {:?} must be [1, gh, gw, {c}]",
            cond.garment.shape()
        )));
    }

    let target_combined = concat_channels(&[x_noisy, cond.agnostic, cond.mask])?;
    let g_zero_c = Tensor::full(&[1, g_shape.height, g_shape.width, c], 0.0);
    let g_zero_1 = Tensor::full(&[1, g_shape.height, g_shape.width, 1], 0.0);
    let garment_combined = concat_channels(&[cond.garment, &g_zero_c, &g_zero_1])?;

    let token_channels = 2 * c + 1;
    let target_shape = GridShape::new(tgt_shape.frames, tgt_shape.height, tgt_shape.width, token_channels);
    let garment_shape = GridShape::new(1, g_shape.height, g_shape.width, token_channels);
    let target_grid = target_shape.patch_grid(patch)?;
    let garment_grid = garment_shape.patch_grid(patch)?;
    let target_tokens = crate::modality::patchify(&target_combined, target_shape, patch)?;
    let garment_tokens = crate::modality::patchify(&garment_combined, garment_shape, patch)?;

    let layout = ModalityLayout::from_lengths(cond.text_ids.len(), garment_grid.len(), target_grid.len());
    Ok(ModelInputs {
        text_ids: cond.text_ids.to_vec(),
        garment_tokens,
        target_tokens,
        garment_grid,
        target_grid,
        layout,
    })
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// Captured per-block intermediates from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub main: Vec<BlockTrace>,
    pub reference: Vec<BlockTrace>,
}

impl BoundModel {
    /// Predicts per-token noise for the target stream. Returns a
    /// `[Lt, out_width]` tape variable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        inputs: &ModelInputs,
        t: usize,
        want_trace: bool,
    ) -> Result<(TVar, Option<ForwardTrace>)> {
        let d = self.dims.d;
        if self.variant.uses_reference_net() != self.reference.is_some() {
            return Err(Error::contract(
                "forward: reference parameters inconsistent with variant",
            ));
        }

        // Conditioning vector from the timestep.
        let tfeat = timestep_features(t, d);
        let tv = tape.constant(&tfeat)?;
        let h = self.t_fc1.apply(tape, tv)?;
        let h = tape.silu(h)?;
        let cond = self.t_fc2.apply(tape, h)?;

        let seg_row = |tape: &mut Tape, table: TVar, tag: ModalityTag| -> Result<TVar> {
            let s = tape.slice_rows(table, tag.index(), tag.index() + 1)?;
            tape.reshape(s, &[d])
        };

        // Text tokens.
        let text_e = {
            let g = tape.gather_rows(self.text_table, &inputs.text_ids)?;
            let sr = seg_row(tape, self.seg_table, ModalityTag::Text)?;
            tape.row_add(g, sr)?
        };

        // Visual tokens: shared projection, then positional and modality
        // embeddings.
        let embed_visual = |tape: &mut Tape,
                            proj: &BoundLinear,
                            seg: TVar,
                            tokens: &Tensor,
                            grid: PatchGrid|
         -> Result<TVar> {
            let raw = tape.constant(tokens)?;
            let prj = proj.apply(tape, raw)?;
            let pos = build_pos_embed::<f64>(grid, d)?;
            let posv = tape.constant(&pos)?;
            let with_pos = tape.add(prj, posv)?;
            tape.row_add(with_pos, seg)
        };
        let tgt_seg = seg_row(tape, self.seg_table, ModalityTag::Target)?;
        let target_e =
            embed_visual(tape, &self.visual_proj, tgt_seg, &inputs.target_tokens, inputs.target_grid)?;

        let grouping = self.variant.grouping();
        let queries = self.variant.query_rows();
        let mut trace = want_trace.then(ForwardTrace::default);

        let (mut x, mut layout) = if self.variant.uses_reference_net() {
            (
                tape.concat_rows(&[text_e, target_e])?,
                ModalityLayout::from_lengths(inputs.text_ids.len(), 0, inputs.target_grid.len()),
            )
        } else {
            let g_seg = seg_row(tape, self.seg_table, ModalityTag::Garment)?;
            let garment_e = embed_visual(
                tape,
                &self.visual_proj,
                g_seg,
                &inputs.garment_tokens,
                inputs.garment_grid,
            )?;
            (tape.concat_rows(&[text_e, garment_e, target_e])?, inputs.layout)
        };

        if let Some(r) = &self.reference {
            // Reference stack advances one block ahead of the main stack;
            // the output of reference block l feeds main block l as extra
            // key/value rows.
            let rg_seg = seg_row(tape, r.seg_table, ModalityTag::Garment)?;
            let mut ref_x = embed_visual(
                tape,
                &r.visual_proj,
                rg_seg,
                &inputs.garment_tokens,
                inputs.garment_grid,
            )?;
            let mut ref_layout = ModalityLayout::from_lengths(0, inputs.garment_grid.len(), 0);
            for l in 0..self.dims.layers {
                let rin = BlockInput {
                    x: ref_x,
                    layout: ref_layout,
                    cond,
                    extra_kv: None,
                    queries: QueryRows::All,
                };
                let (rx, rlay, rtr) =
                    block_forward(tape, &r.blocks[l], &grouping, &rin, want_trace)?;
                ref_x = rx;
                ref_layout = rlay;
                let min = BlockInput { x, layout, cond, extra_kv: Some(ref_x), queries };
                let (nx, nlay, tr) = block_forward(tape, &self.blocks[l], &grouping, &min, want_trace)?;
                x = nx;
                layout = nlay;
                if let Some(trc) = trace.as_mut() {
                    trc.reference.push(rtr.expect("trace requested"));
                    trc.main.push(tr.expect("trace requested"));
                }
            }
        } else {
            for l in 0..self.dims.layers {
                let input = BlockInput { x, layout, cond, extra_kv: None, queries };
                let (nx, nlay, tr) = block_forward(tape, &self.blocks[l], &grouping, &input, want_trace)?;
                x = nx;
                layout = nlay;
                if let Some(trc) = trace.as_mut() {
                    trc.main.push(tr.expect("trace requested"));
                }
            }
        }

        // Output head over target rows only.
        let trange = layout.range(ModalityTag::Target);
        if trange.is_empty() {
            return Err(Error::contract("forward: no target tokens in final stream"));
        }
        let tgt = tape.slice_rows(x, trange.start, trange.end)?;
        let n = tape.layer_norm(tgt, LAYER_NORM_EPS)?;
        let sc = tape.silu(cond)?;
        let fm = self.final_mod.apply(tape, sc)?;
        let shift = {
            let s = tape.slice_cols(fm, 0, d)?;
            tape.reshape(s, &[d])?
        };
        let scale = {
            let s = tape.slice_cols(fm, d, 2 * d)?;
            tape.reshape(s, &[d])?
        };
        let scale1p = tape.add_scalar(scale, 1.0)?;
        let scaled = tape.row_mul(n, scale1p)?;
        let moded = tape.row_add(scaled, shift)?;
        let out = self.final_proj.apply(tape, moded)?;
        Ok((out, trace))
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{grad_check, GRAD_CHECK_H};

    fn dims(d: usize, layers: usize) -> ModelDims {
        ModelDims { d, heads: 2, layers, patch: 2, channels: 3 }
    }

    fn rng(seed: u64) -> SplitMix64 {
        SplitMix64::new(seed)
    }

    /// A small condition set: 4x4 garment, 8x8 target, `f` frames.
    struct Cond {
        garment: Tensor,
        agnostic: Tensor,
        mask: Tensor,
        ids: Vec<usize>,
    }

    impl Cond {
        fn new(frames: usize, seed: u64) -> Self {
            let mut r = rng(seed);
            Cond {
                garment: Tensor::randn(&[1, 4, 4, 3], 0.5, &mut r),
                agnostic: Tensor::randn(&[frames, 8, 8, 3], 0.5, &mut r),
                mask: {
                    let mut m = Tensor::full(&[frames, 8, 8, 1], 0.0);
                    for i in 0..m.numel() / 2 {
                        m.data_mut()[i] = 1.0;
                    }
                    m
                },
                ids: vec![TEXT_UPPER, TEXT_PAD],
            }
        }

        fn set(&self) -> ConditionSet<'_> {
            ConditionSet {
                text_ids: &self.ids,
                garment: &self.garment,
                agnostic: &self.agnostic,
                mask: &self.mask,
            }
        }
    }

    fn inputs_for(frames: usize, seed: u64) -> (Cond, Tensor) {
        let cond = Cond::new(frames, seed);
        let noisy = Tensor::randn(&[frames, 8, 8, 3], 1.0, &mut rng(seed + 1));
        (cond, noisy)
    }

    // ---- parameter accounting -----------------------------------------

    #[test]
    fn parameter_counts_are_frozen() {
        // Hand accounting, d=8, two layers, two groups, 28-channel tokens:
        //   tables 48 + input proj 232 + timestep embedder 144
        //   + 2 blocks x 1672 + output mod 144 + output proj 108 = 4020.
        // The reference stack re-adds proj + table + blocks = 3600.
        let cases = [
            (8, BlockVariant::MnV3, 4020),
            (8, BlockVariant::DualNet, 7620),
            (12, BlockVariant::MnV3, 8520),
            (12, BlockVariant::DualNet, 16224),
        ];
        for (d, variant, want) in cases {
            let p = ModelParams::init(variant, dims(d, 2), &mut rng(1)).unwrap();
            assert_eq!(p.num_params(), want, "{} at d={d}", variant.name());
        }
        let single = ModelParams::init(BlockVariant::MnV3, dims(8, 2), &mut rng(1)).unwrap();
        let dual = ModelParams::init(BlockVariant::DualNet, dims(8, 2), &mut rng(1)).unwrap();
        let ratio = dual.num_params() as f64 / single.num_params() as f64;
        assert!((1.8..=2.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn visit_and_bind_agree_on_order() {
        let p = ModelParams::init(BlockVariant::DualNet, dims(12, 2), &mut rng(2)).unwrap();
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        p.visit(&mut |n, t| {
            names.push(n);
            shapes.push(t.shape().to_vec());
        });
        // Names are unique.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"blocks.0.w_q".to_string()));
        assert!(names.contains(&"blocks.1.ada.1.bias".to_string()));
        assert!(names.contains(&"reference.blocks.0.mlp_fc1.weight".to_string()));

        // Binding creates leaves with the same shapes in the same order.
        let mut tape = Tape::new();
        let mut order = Vec::new();
        p.bind(&mut tape, &mut order).unwrap();
        assert_eq!(order.len(), shapes.len());
        for (v, s) in order.iter().zip(&shapes) {
            assert_eq!(tape.value(*v).shape(), &s[..]);
        }
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut p = ModelParams::init(BlockVariant::MnV2, dims(6, 1), &mut rng(3)).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.numel(), p.num_params());
        let mut q = ModelParams::init(BlockVariant::MnV2, dims(6, 1), &mut rng(99)).unwrap();
        q.unflatten(&flat).unwrap();
        let flat2 = q.flatten();
        assert_eq!(
            flat.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            flat2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let bad = Tensor::full(&[1, 3], 0.0);
        assert!(p.unflatten(&bad).is_err());
    }

    // ---- input assembly ------------------------------------------------

    #[test]
    fn build_inputs_shapes_and_layout() {
        let (cond, noisy) = inputs_for(1, 10);
        let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        // 8x8 target at patch 2 -> 16 tokens; 4x4 garment -> 4 tokens.
        assert_eq!(mi.target_tokens.shape(), &[16, 28]);
        assert_eq!(mi.garment_tokens.shape(), &[4, 28]);
        assert_eq!(mi.layout, ModalityLayout::from_lengths(2, 4, 16));

        let (cond5, noisy5) = inputs_for(5, 11);
        let mi5 = build_inputs(&cond5.set(), &noisy5, 2).unwrap();
        assert_eq!(mi5.target_tokens.shape(), &[80, 28]);
        assert_eq!(mi5.target_grid.frames, 5);
    }

    #[test]
    fn garment_tokens_zero_fill_condition_channels() {
        let (cond, noisy) = inputs_for(1, 12);
        let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        // Per-pixel channel layout is [garment c | zeros c | zero]; with
        // patchify's (row, col, channel) in-token order every pixel's last
        // 2c+1-c entries inside the token are zero.
        for row in 0..4 {
            for px in 0..4 {
                let base = px * 7;
                for ch in 3..7 {
                    assert_eq!(mi.garment_tokens.get2(row, base + ch), 0.0);
                }
            }
        }
    }

    #[test]
    fn build_inputs_validates_grids() {
        let (cond, _) = inputs_for(1, 13);
        let bad_noisy = Tensor::full(&[1, 8, 9, 3], 0.0);
        assert!(build_inputs(&cond.set(), &bad_noisy, 2).is_err());
        let noisy = Tensor::full(&[1, 8, 8, 3], 0.0);
        let mut cs = cond.set();
        let bad_mask = Tensor::full(&[1, 8, 8, 3], 0.0);
        cs.mask = &bad_mask;
        assert!(build_inputs(&cs, &noisy, 2).is_err());
        // Patch must divide the grid.
        assert!(matches!(build_inputs(&cond.set(), &noisy, 3), Err(Error::Config(_))));
    }

    // ---- forward --------------------------------------------------------

    #[test]
    fn fresh_model_predicts_zero_noise() {
        for variant in BlockVariant::ALL {
            let p = ModelParams::init(variant, dims(12, 2), &mut rng(20)).unwrap();
            let (cond, noisy) = inputs_for(1, 21);
            let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let bound = p.bind(&mut tape, &mut order).unwrap();
            let (out, _) = bound.forward(&mut tape, &mi, 7, false).unwrap();
            assert_eq!(tape.value(out).shape(), &[16, 12]);
            assert!(tape.value(out).data().iter().all(|&v| v == 0.0), "{}", variant.name());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let p = ModelParams::init_unconstrained(BlockVariant::MnV1, dims(12, 2), 0.1, &mut rng(22))
            .unwrap();
        let (cond, noisy) = inputs_for(1, 23);
        let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let bound = p.bind(&mut tape, &mut order).unwrap();
            let (out, _) = bound.forward(&mut tape, &mi, 3, false).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dual_variant_keeps_garment_out_of_main_stream() {
        let p = ModelParams::init_unconstrained(BlockVariant::DualNet, dims(12, 2), 0.1, &mut rng(24))
            .unwrap();
        let (cond, noisy) = inputs_for(1, 25);
        let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let bound = p.bind(&mut tape, &mut order).unwrap();
        let (_, trace) = bound.forward(&mut tape, &mi, 5, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.main.len(), 2);
        assert_eq!(trace.reference.len(), 2);
        // Main stream: 2 text + 16 target rows; its keys gained 4 extra rows.
        assert_eq!(trace.main[0].out_layout.len(ModalityTag::Garment), 0);
        assert_eq!(trace.main[0].output.shape(), &[18, 12]);
        assert_eq!(trace.main[0].keys.shape(), &[22, 12]);
        assert_eq!(trace.reference[0].output.shape(), &[4, 12]);
    }

    #[test]
    fn naive_variant_shrinks_the_stream_once() {
        let p =
            ModelParams::init_unconstrained(BlockVariant::NaiveSplit, dims(12, 2), 0.1, &mut rng(26))
                .unwrap();
        let (cond, noisy) = inputs_for(1, 27);
        let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let bound = p.bind(&mut tape, &mut order).unwrap();
        let (out, trace) = bound.forward(&mut tape, &mi, 5, true).unwrap();
        let trace = trace.unwrap();
        // Block 1 sees 22 rows and keeps 18; block 2 keys shrink to 18.
        assert_eq!(trace.main[0].keys.shape(), &[22, 12]);
        assert_eq!(trace.main[0].output.shape(), &[18, 12]);
        assert_eq!(trace.main[1].keys.shape(), &[18, 12]);
        assert_eq!(tape.value(out).shape(), &[16, 12]);
    }

    #[test]
    fn unknown_text_id_rejected() {
        let p = ModelParams::init(BlockVariant::MnV3, dims(12, 1), &mut rng(28)).unwrap();
        let (cond, noisy) = inputs_for(1, 29);
        let mut mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        mi.text_ids = vec![7, 0];
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let bound = p.bind(&mut tape, &mut order).unwrap();
        let err = bound.forward(&mut tape, &mi, 0, false);
        assert!(matches!(err, Err(Error::Vocab { id: 7, vocab: 3 })));
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims { d: 12, heads: 5, layers: 1, patch: 2, channels: 3 }.validate().is_err());
        assert!(ModelDims { d: 8, heads: 2, layers: 1, patch: 2, channels: 3 }.validate().is_err());
        assert!(ModelDims { d: 12, heads: 2, layers: 0, patch: 2, channels: 3 }.validate().is_err());
        assert!(dims(12, 2).validate().is_ok());
    }

    // ---- end-to-end gradients ------------------------------------------

    fn model_grad_err(variant: BlockVariant) -> f64 {
        let dm = dims(12, 1);
        let p = ModelParams::init_unconstrained(variant, dm, 0.25, &mut rng(40)).unwrap();
        let (cond, noisy) = inputs_for(1, 41);
        let mi = build_inputs(&cond.set(), &noisy, 2).unwrap();
        let target = Tensor::randn(&[16, 12], 0.5, &mut rng(42));
        let flat = p.flatten();
        grad_check(
            |tape, flat_v| {
                let bound = p.bind_from_flat(tape, flat_v)?;
                let (out, _) = bound.forward(tape, &mi, 9, false)?;
                let tv = tape.constant(&target)?;
                tape.mse(out, tv)
            },
            &flat,
            GRAD_CHECK_H,
        )
        .unwrap()
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // The two structurally distinct paths; the block-level check already
        // covers every grouping.
        for variant in [BlockVariant::MnV3, BlockVariant::DualNet] {
            let err = model_grad_err(variant);
            assert!(err < 1e-4, "{}: rel err {err:e}", variant.name());
        }
    }
}
