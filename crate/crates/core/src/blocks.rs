//! Transformer block with per-group normalization over a mixed token stream.
//!
//! The stream carries text, garment, and target tokens concatenated along the
//! row axis. A [`Grouping`] assigns each modality to a normalization group;
//! every group gets its own conditioning-driven shift/scale/gate parameters,
//! while the attention and MLP weights are shared across groups. Attention is
//! always joint over the full stream (plus optional externally supplied
//! key/value rows), so grouping changes only how tokens are normalized and
//! modulated, never who attends to whom.
//!
//! The same forward function also covers two baselines:
//! - a query restriction ([`QueryRows::TextAndTarget`]) that drops garment
//!   rows from the query side, shrinking the output stream, and
//! - `extra_kv` rows, which a second network can append to keys and values
//!   without touching the query side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalityLayout, ModalityTag};
use crate::rng::SplitMix64;
use crate::tape::TVar;
use crate::{Tape, Tensor};

/// Divisor floor used by token normalization. The per-token standard
/// deviation is clamped from below by this value rather than smoothed inside
/// a square root, which keeps normalization exactly scale-invariant for any
/// token whose spread is comfortably above the floor.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Standard deviation for weight initialization.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// MLP hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

// ---------------------------------------------------------------------------
// variants and groupings
// ---------------------------------------------------------------------------

/// Attention wiring variants under comparison.
///
/// The three `Mn*` variants share one network and differ only in how the
/// modalities are partitioned into normalization groups. `DualNet` adds a
/// second network that feeds garment keys/values into the main one.
/// `NaiveSplit` shares one network and one normalization but restricts
/// queries to text and target rows, so its output stream shrinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// Two networks; garment features enter the main stack as extra K/V rows.
    DualNet,
    /// One network, one shared normalization, queries restricted to
    /// text and target rows.
    NaiveSplit,
    /// One network, groups {text, garment} and {target}.
    MnV1,
    /// One network, groups {text}, {garment}, {target}.
    MnV2,
    /// One network, groups {text} and {garment, target}.
    MnV3,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 5] = [
        BlockVariant::DualNet,
        BlockVariant::NaiveSplit,
        BlockVariant::MnV1,
        BlockVariant::MnV2,
        BlockVariant::MnV3,
    ];

    /// Modality-to-group assignment for the main token stream.
    pub fn grouping(self) -> Grouping {
        let assignment = match self {
            // The dual-network main stream has no garment tokens; the garment
            // slot shares the target group so the assignment stays compact.
            BlockVariant::DualNet => [0, 1, 1],
            BlockVariant::NaiveSplit => [0, 0, 0],
            BlockVariant::MnV1 => [0, 0, 1],
            BlockVariant::MnV2 => [0, 1, 2],
            BlockVariant::MnV3 => [0, 1, 1],
        };
        Grouping::new(assignment).expect("built-in grouping is compact")
    }

    pub fn uses_reference_net(self) -> bool {
        matches!(self, BlockVariant::DualNet)
    }

    /// Which rows of the stream act as queries.
    pub fn query_rows(self) -> QueryRows {
        match self {
            BlockVariant::NaiveSplit => QueryRows::TextAndTarget,
            _ => QueryRows::All,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::DualNet => "dual_net",
            BlockVariant::NaiveSplit => "naive_split",
            BlockVariant::MnV1 => "mn_v1",
            BlockVariant::MnV2 => "mn_v2",
            BlockVariant::MnV3 => "mn_v3",
        }
    }
}

/// Assignment of the three modalities (text, garment, target — in that
/// order) to normalization groups. Group ids must be compact: the first
/// occurrence of each id must be exactly one past the previous maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grouping {
    assignment: [usize; 3],
}

impl Grouping {
    pub fn new(assignment: [usize; 3]) -> Result<Self> {
        let mut seen = 0usize;
        for &g in &assignment {
            if g > seen {
                return Err(Error::config(format!(
                    "grouping {assignment:?} is not compact: id {g} appears before {seen}"
                )));
            }
            if g == seen {
                seen += 1;
            }
        }
        Ok(Grouping { assignment })
    }

    pub fn single() -> Self {
        Grouping { assignment: [0, 0, 0] }
    }

    pub fn group_of(&self, tag: ModalityTag) -> usize {
        self.assignment[tag.index()]
    }

    pub fn group_count(&self) -> usize {
        self.assignment.iter().copied().max().unwrap_or(0) + 1
    }
}

/// One maximal run of adjacent stream rows that share a normalization group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub group: usize,
    pub start: usize,
    pub end: usize,
}

/// Splits a token stream into contiguous per-group segments, merging
/// adjacent modalities that share a group and skipping empty ones.
pub fn group_segments(layout: &ModalityLayout, grouping: &Grouping) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::new();
    for tag in ModalityTag::ALL {
        let r = layout.range(tag);
        if r.is_empty() {
            continue;
        }
        let g = grouping.group_of(tag);
        if let Some(last) = segs.last_mut() {
            if last.group == g && last.end == r.start {
                last.end = r.end;
                continue;
            }
        }
        segs.push(Segment { group: g, start: r.start, end: r.end });
    }
    segs
}

// ---------------------------------------------------------------------------
// parameter structs
// ---------------------------------------------------------------------------

/// Dense layer parameters.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`.
    pub weight: Tensor,
    /// `[out]` when present.
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::full(&[in_dim, out_dim], 0.0),
            bias: bias.then(|| Tensor::full(&[out_dim], 0.0)),
        }
    }

    /// Normal-weight, zero-bias initialization.
    pub fn init(in_dim: usize, out_dim: usize, bias: bool, std: f64, rng: &mut SplitMix64) -> Self {
        Linear {
            weight: Tensor::randn(&[in_dim, out_dim], std, rng),
            bias: bias.then(|| Tensor::full(&[out_dim], 0.0)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = TVar>) -> Result<BoundLinear> {
        let weight = next_var(vars)?;
        let bias = if self.bias.is_some() { Some(next_var(vars)?) } else { None };
        Ok(BoundLinear { weight, bias })
    }
}

fn next_var(vars: &mut dyn Iterator<Item = TVar>) -> Result<TVar> {
    vars.next().ok_or_else(|| Error::contract("bind_vars: ran out of bound variables"))
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: TVar,
    pub bias: Option<TVar>,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: TVar) -> Result<TVar> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Per-group conditioning maps producing shift/scale/gate vectors.
///
/// Each group owns a `[cond_dim, 6 d]` map whose output columns are laid out
/// as `[shift1 | scale1 | gate1 | shift2 | scale2 | gate2]`. Gate columns and
/// biases start at zero so a freshly initialized block is an exact identity.
#[derive(Debug, Clone)]
pub struct AdaZero {
    pub maps: Vec<Linear>,
}

impl AdaZero {
    pub fn init(groups: usize, cond_dim: usize, d: usize, rng: &mut SplitMix64) -> Self {
        let mut maps = Vec::with_capacity(groups);
        for _ in 0..groups {
            let mut m = Linear::init(cond_dim, 6 * d, true, DEFAULT_INIT_STD, rng);
            for r in 0..cond_dim {
                for c in 0..d {
                    m.weight.set2(r, 2 * d + c, 0.0);
                    m.weight.set2(r, 5 * d + c, 0.0);
                }
            }
            maps.push(m);
        }
        AdaZero { maps }
    }

    /// Fully random maps (gates included) for gradient checking, where an
    /// identity block would hide most of the backward graph.
    pub fn init_unconstrained(groups: usize, cond_dim: usize, d: usize, std: f64, rng: &mut SplitMix64) -> Self {
        let maps = (0..groups)
            .map(|_| {
                let mut m = Linear::init(cond_dim, 6 * d, true, std, rng);
                if let Some(b) = &mut m.bias {
                    for v in b.data_mut() {
                        *v = rng.next_normal() * std;
                    }
                }
                m
            })
            .collect();
        AdaZero { maps }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, m) in self.maps.iter().enumerate() {
            m.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, m) in self.maps.iter_mut().enumerate() {
            m.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = TVar>) -> Result<Vec<BoundLinear>> {
        self.maps.iter().map(|m| m.bind_vars(vars)).collect()
    }
}

/// Parameters of one attention + MLP block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub heads: usize,
    /// `[d, d]` projections, no bias.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub mlp_fc1: Linear,
    pub mlp_fc2: Linear,
    pub ada: AdaZero,
}

impl BlockParams {
    pub fn init(groups: usize, d: usize, cond_dim: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(BlockParams {
            heads,
            w_q: Tensor::randn(&[d, d], DEFAULT_INIT_STD, rng),
            w_k: Tensor::randn(&[d, d], DEFAULT_INIT_STD, rng),
            w_v: Tensor::randn(&[d, d], DEFAULT_INIT_STD, rng),
            w_o: Tensor::randn(&[d, d], DEFAULT_INIT_STD, rng),
            mlp_fc1: Linear::init(d, MLP_RATIO * d, true, DEFAULT_INIT_STD, rng),
            mlp_fc2: Linear::init(MLP_RATIO * d, d, true, DEFAULT_INIT_STD, rng),
            ada: AdaZero::init(groups, cond_dim, d, rng),
        })
    }

    /// Random everything, including gates and biases. Only for tests that
    /// need full gradient flow through an untrained block.
    pub fn init_unconstrained(
        groups: usize,
        d: usize,
        cond_dim: usize,
        heads: usize,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        let bias_rand = |mut l: Linear, rng: &mut SplitMix64| {
            if let Some(b) = &mut l.bias {
                for v in b.data_mut() {
                    *v = rng.next_normal() * std;
                }
            }
            l
        };
        Ok(BlockParams {
            heads,
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            w_o: Tensor::randn(&[d, d], std, rng),
            mlp_fc1: bias_rand(Linear::init(d, MLP_RATIO * d, true, std, rng), rng),
            mlp_fc2: bias_rand(Linear::init(MLP_RATIO * d, d, true, std, rng), rng),
            ada: AdaZero::init_unconstrained(groups, cond_dim, d, std, rng),
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        self.mlp_fc1.visit(&format!("{prefix}.mlp_fc1"), f);
        self.mlp_fc2.visit(&format!("{prefix}.mlp_fc2"), f);
        self.ada.visit(&format!("{prefix}.ada"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        self.mlp_fc1.visit_mut(&format!("{prefix}.mlp_fc1"), f);
        self.mlp_fc2.visit_mut(&format!("{prefix}.mlp_fc2"), f);
        self.ada.visit_mut(&format!("{prefix}.ada"), f);
    }

    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = TVar>) -> Result<BoundBlock> {
        Ok(BoundBlock {
            heads: self.heads,
            d: self.d(),
            w_q: next_var(vars)?,
            w_k: next_var(vars)?,
            w_v: next_var(vars)?,
            w_o: next_var(vars)?,
            mlp_fc1: self.mlp_fc1.bind_vars(vars)?,
            mlp_fc2: self.mlp_fc2.bind_vars(vars)?,
            ada: self.ada.bind_vars(vars)?,
        })
    }

    /// Binds every tensor as a tape leaf, appending the created variables to
    /// `order` in visit order (the canonical parameter order).
    pub fn bind(&self, tape: &mut Tape, order: &mut Vec<TVar>) -> Result<BoundBlock> {
        let mut tensors: Vec<&Tensor> = Vec::new();
        self.visit("", &mut |_, t| tensors.push(t));
        let start = order.len();
        for t in tensors {
            order.push(tape.leaf(t)?);
        }
        let mut it = order[start..].iter().copied();
        self.bind_vars(&mut it)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible into {heads} heads")));
    }
    Ok(())
}

/// A block's parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub heads: usize,
    pub d: usize,
    pub w_q: TVar,
    pub w_k: TVar,
    pub w_v: TVar,
    pub w_o: TVar,
    pub mlp_fc1: BoundLinear,
    pub mlp_fc2: BoundLinear,
    pub ada: Vec<BoundLinear>,
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// Which stream rows produce queries (and therefore outputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryRows {
    All,
    /// Garment rows still feed keys and values but issue no queries, so the
    /// output stream drops them.
    TextAndTarget,
}

/// Inputs to a single block application.
pub struct BlockInput {
    /// `[L, d]` token stream.
    pub x: TVar,
    /// Rows per modality in `x`.
    pub layout: ModalityLayout,
    /// `[1, cond_dim]` conditioning vector, pre-activation.
    pub cond: TVar,
    /// Optional `[M, d]` rows appended to the key/value input only.
    pub extra_kv: Option<TVar>,
    pub queries: QueryRows,
}

/// Captured intermediate values, for tests and feature analysis.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Per-token normalized stream before shift/scale.
    pub normalized: Tensor,
    /// Normalized stream after per-group shift/scale (the attention input).
    pub modulated: Tensor,
    /// `[L + M, d]` keys.
    pub keys: Tensor,
    /// `[L + M, d]` values.
    pub values: Tensor,
    /// Block output.
    pub output: Tensor,
    pub out_layout: ModalityLayout,
}

struct ModVectors {
    shift1: TVar,
    scale1p: TVar,
    gate1: TVar,
    shift2: TVar,
    scale2p: TVar,
    gate2: TVar,
}

struct OutSeg {
    group: usize,
    x_start: usize,
    x_end: usize,
    out_start: usize,
    out_end: usize,
}

/// Runs one block over a mixed-modality stream.
///
/// Returns the output stream, its layout (shrunk when queries are
/// restricted), and optionally a trace of intermediates.
pub fn block_forward(
    tape: &mut Tape,
    block: &BoundBlock,
    grouping: &Grouping,
    input: &BlockInput,
    want_trace: bool,
) -> Result<(TVar, ModalityLayout, Option<BlockTrace>)> {
    let d = block.d;
    let (l_total, width) = tape.value(input.x).dims2()?;
    if width != d {
        return Err(Error::shape(format!(
            "block_forward: stream width {width} does not match block width {d}"
        )));
    }
    input.layout.check_total(l_total)?;
    if grouping.group_count() > block.ada.len() {
        return Err(Error::contract(format!(
            "block_forward: grouping needs {} conditioning maps, block has {}",
            grouping.group_count(),
            block.ada.len()
        )));
    }

    let segs = group_segments(&input.layout, grouping);
    if segs.is_empty() {
        return Err(Error::contract("block_forward: empty token stream"));
    }

    // Conditioning vectors for each group that actually owns tokens.
    let silu_cond = tape.silu(input.cond)?;
    let mut mods: Vec<Option<ModVectors>> = Vec::new();
    mods.resize_with(grouping.group_count(), || None);
    for seg in &segs {
        if mods[seg.group].is_some() {
            continue;
        }
        let y = block.ada[seg.group].apply(tape, silu_cond)?;
        let piece = |tape: &mut Tape, i: usize| -> Result<TVar> {
            let s = tape.slice_cols(y, i * d, (i + 1) * d)?;
            tape.reshape(s, &[d])
        };
        let shift1 = piece(tape, 0)?;
        let scale1 = piece(tape, 1)?;
        let gate1 = piece(tape, 2)?;
        let shift2 = piece(tape, 3)?;
        let scale2 = piece(tape, 4)?;
        let gate2 = piece(tape, 5)?;
        mods[seg.group] = Some(ModVectors {
            shift1,
            scale1p: tape.add_scalar(scale1, 1.0)?,
            gate1,
            shift2,
            scale2p: tape.add_scalar(scale2, 1.0)?,
            gate2,
        });
    }
    let modv = |g: usize| -> &ModVectors { mods[g].as_ref().expect("modulation built per segment") };

    // Normalize and modulate per segment, then restitch the stream.
    let mut norm_parts = Vec::with_capacity(segs.len());
    let mut fprime_parts = Vec::with_capacity(segs.len());
    for seg in &segs {
        let xs = tape.slice_rows(input.x, seg.start, seg.end)?;
        let n = tape.layer_norm(xs, LAYER_NORM_EPS)?;
        let m = modv(seg.group);
        let scaled = tape.row_mul(n, m.scale1p)?;
        let shifted = tape.row_add(scaled, m.shift1)?;
        norm_parts.push(n);
        fprime_parts.push(shifted);
    }
    let f_prime = tape.concat_rows(&fprime_parts)?;

    let kv_in = match input.extra_kv {
        Some(extra) => tape.concat_rows(&[f_prime, extra])?,
        None => f_prime,
    };

    // Query rows and the mapping from output rows back to input rows.
    let (q_in, out_segments, out_layout) = match input.queries {
        QueryRows::All => {
            let out_segments = segs
                .iter()
                .map(|s| OutSeg {
                    group: s.group,
                    x_start: s.start,
                    x_end: s.end,
                    out_start: s.start,
                    out_end: s.end,
                })
                .collect::<Vec<_>>();
            (f_prime, out_segments, input.layout)
        }
        QueryRows::TextAndTarget => {
            let tr = input.layout.range(ModalityTag::Text);
            let gr = input.layout.range(ModalityTag::Target);
            let mut parts = Vec::new();
            let mut out_segments = Vec::new();
            let mut cursor = 0usize;
            for (range, tag) in [(tr, ModalityTag::Text), (gr, ModalityTag::Target)] {
                if range.is_empty() {
                    continue;
                }
                parts.push(tape.slice_rows(f_prime, range.start, range.end)?);
                out_segments.push(OutSeg {
                    group: grouping.group_of(tag),
                    x_start: range.start,
                    x_end: range.end,
                    out_start: cursor,
                    out_end: cursor + range.len(),
                });
                cursor += range.len();
            }
            if parts.is_empty() {
                return Err(Error::contract(
                    "block_forward: query restriction left no query rows",
                ));
            }
            let q_in = tape.concat_rows(&parts)?;
            let out_layout = input.layout.without(ModalityTag::Garment);
            (q_in, out_segments, out_layout)
        }
    };

    // Joint attention over the full key/value stream.
    let q = tape.matmul(q_in, block.w_q)?;
    let k = tape.matmul(kv_in, block.w_k)?;
    let v = tape.matmul(kv_in, block.w_v)?;
    let dh = d / block.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scores = tape.scale(logits, inv_sqrt)?;
        let weights = tape.softmax(scores)?;
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
    let attn = tape.matmul(merged, block.w_o)?;

    // Gated residual into the (possibly shrunk) output stream.
    let mut x2_parts = Vec::with_capacity(out_segments.len());
    for os in &out_segments {
        let xr = tape.slice_rows(input.x, os.x_start, os.x_end)?;
        let ar = tape.slice_rows(attn, os.out_start, os.out_end)?;
        let gated = tape.row_mul(ar, modv(os.group).gate1)?;
        x2_parts.push(tape.add(xr, gated)?);
    }
    let x2 = tape.concat_rows(&x2_parts)?;

    // MLP with the second modulation set, same per-group treatment.
    let mut mlp_in_parts = Vec::with_capacity(out_segments.len());
    for os in &out_segments {
        let xs = tape.slice_rows(x2, os.out_start, os.out_end)?;
        let n = tape.layer_norm(xs, LAYER_NORM_EPS)?;
        let m = modv(os.group);
        let scaled = tape.row_mul(n, m.scale2p)?;
        mlp_in_parts.push(tape.row_add(scaled, m.shift2)?);
    }
    let mlp_in = tape.concat_rows(&mlp_in_parts)?;
    let hidden = block.mlp_fc1.apply(tape, mlp_in)?;
    let hidden = tape.gelu(hidden)?;
    let mlp_out = block.mlp_fc2.apply(tape, hidden)?;

    let mut out_parts = Vec::with_capacity(out_segments.len());
    for os in &out_segments {
        let xr = tape.slice_rows(x2, os.out_start, os.out_end)?;
        let mr = tape.slice_rows(mlp_out, os.out_start, os.out_end)?;
        let gated = tape.row_mul(mr, modv(os.group).gate2)?;
        out_parts.push(tape.add(xr, gated)?);
    }
    let out = tape.concat_rows(&out_parts)?;

    let trace = if want_trace {
        let normalized = tape.concat_rows(&norm_parts)?;
        Some(BlockTrace {
            normalized: tape.value(normalized).clone(),
            modulated: tape.value(f_prime).clone(),
            keys: tape.value(k).clone(),
            values: tape.value(v).clone(),
            output: tape.value(out).clone(),
            out_layout,
        })
    } else {
        None
    };

    Ok((out, out_layout, trace))
}

/// Splits a flat `[1, total]` row into tape views with the given shapes, in
/// order. Used to expose a whole parameter set as one differentiable vector.
pub fn unpack_row(tape: &mut Tape, flat: TVar, shapes: &[Vec<usize>]) -> Result<Vec<TVar>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let (rows, cols) = tape.value(flat).dims2()?;
    if rows != 1 || cols != total {
        return Err(Error::shape(format!(
            "unpack_row: flat shape {:?} does not hold {total} elements in one row",
            tape.value(flat).shape()
        )));
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0usize;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let s = tape.slice_cols(flat, off, off + n)?;
        out.push(tape.reshape(s, shape)?);
        off += n;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{grad_check, GRAD_CHECK_H};

    fn layout_std() -> ModalityLayout {
        ModalityLayout::from_lengths(2, 3, 4)
    }

    fn rng(seed: u64) -> SplitMix64 {
        SplitMix64::new(seed)
    }

    fn bound_block(
        tape: &mut Tape,
        groups: usize,
        d: usize,
        heads: usize,
        seed: u64,
    ) -> (BlockParams, BoundBlock) {
        let params = BlockParams::init(groups, d, d, heads, &mut rng(seed)).unwrap();
        let mut order = Vec::new();
        let bound = params.bind(tape, &mut order).unwrap();
        (params, bound)
    }

    fn stream(tape: &mut Tape, l: usize, d: usize, seed: u64) -> TVar {
        let t = Tensor::randn(&[l, d], 1.0, &mut rng(seed));
        tape.leaf(&t).unwrap()
    }

    fn cond(tape: &mut Tape, d: usize, seed: u64) -> TVar {
        let t = Tensor::randn(&[1, d], 1.0, &mut rng(seed));
        tape.leaf(&t).unwrap()
    }

    // ---- groupings ----------------------------------------------------

    #[test]
    fn variant_groupings_are_fixed() {
        let g = |v: BlockVariant| v.grouping();
        assert_eq!(g(BlockVariant::MnV1), Grouping::new([0, 0, 1]).unwrap());
        assert_eq!(g(BlockVariant::MnV2), Grouping::new([0, 1, 2]).unwrap());
        assert_eq!(g(BlockVariant::MnV3), Grouping::new([0, 1, 1]).unwrap());
        assert_eq!(g(BlockVariant::DualNet), Grouping::new([0, 1, 1]).unwrap());
        assert_eq!(g(BlockVariant::NaiveSplit), Grouping::single());
        assert_eq!(g(BlockVariant::MnV1).group_count(), 2);
        assert_eq!(g(BlockVariant::MnV2).group_count(), 3);
        assert_eq!(g(BlockVariant::MnV3).group_count(), 2);
        assert_eq!(g(BlockVariant::NaiveSplit).group_count(), 1);
        assert!(BlockVariant::DualNet.uses_reference_net());
        assert!(!BlockVariant::MnV3.uses_reference_net());
        assert_eq!(BlockVariant::NaiveSplit.query_rows(), QueryRows::TextAndTarget);
        assert_eq!(BlockVariant::MnV2.query_rows(), QueryRows::All);
    }

    #[test]
    fn grouping_rejects_non_compact_ids() {
        assert!(Grouping::new([0, 0, 2]).is_err());
        assert!(Grouping::new([1, 0, 0]).is_err());
        assert!(Grouping::new([0, 2, 1]).is_err());
    }

    #[test]
    fn variant_serde_names() {
        let json = serde_json::to_string(&BlockVariant::MnV3).unwrap();
        assert_eq!(json, "\"mn_v3\"");
        let back: BlockVariant = serde_json::from_str("\"dual_net\"").unwrap();
        assert_eq!(back, BlockVariant::DualNet);
        for v in BlockVariant::ALL {
            let s = serde_json::to_string(&v).unwrap();
            assert_eq!(s.trim_matches('"'), v.name());
        }
    }

    #[test]
    fn segments_merge_adjacent_groups() {
        let layout = layout_std();
        let segs = group_segments(&layout, &BlockVariant::MnV3.grouping());
        assert_eq!(
            segs,
            vec![
                Segment { group: 0, start: 0, end: 2 },
                Segment { group: 1, start: 2, end: 9 },
            ]
        );
        let segs1 = group_segments(&layout, &BlockVariant::MnV1.grouping());
        assert_eq!(
            segs1,
            vec![
                Segment { group: 0, start: 0, end: 5 },
                Segment { group: 1, start: 5, end: 9 },
            ]
        );
        let empty_text = ModalityLayout::from_lengths(0, 3, 4);
        let segs2 = group_segments(&empty_text, &BlockVariant::MnV2.grouping());
        assert_eq!(
            segs2,
            vec![
                Segment { group: 1, start: 0, end: 3 },
                Segment { group: 2, start: 3, end: 7 },
            ]
        );
    }

    // ---- forward behaviors --------------------------------------------

    #[test]
    fn freshly_initialized_block_is_identity() {
        let d = 8;
        let mut tape = Tape::new();
        let (_, bound) = bound_block(&mut tape, 3, d, 2, 1);
        let x = stream(&mut tape, 9, d, 2);
        let c = cond(&mut tape, d, 3);
        let input = BlockInput {
            x,
            layout: layout_std(),
            cond: c,
            extra_kv: None,
            queries: QueryRows::All,
        };
        let (out, out_layout, _) =
            block_forward(&mut tape, &bound, &BlockVariant::MnV2.grouping(), &input, false).unwrap();
        assert_eq!(out_layout, layout_std());
        let xin = tape.value(x).data().to_vec();
        let xout = tape.value(out).data();
        for (a, b) in xin.iter().zip(xout) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn modulation_is_local_to_each_group() {
        // Perturbing the target group's conditioning map must not move any
        // text or garment feature.
        let d = 8;
        let grouping = BlockVariant::MnV2.grouping();
        let mut params = BlockParams::init_unconstrained(3, d, d, 2, 0.2, &mut rng(4)).unwrap();
        let run = |params: &BlockParams| {
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let bound = params.bind(&mut tape, &mut order).unwrap();
            let x = stream(&mut tape, 9, d, 5);
            let c = cond(&mut tape, d, 6);
            let input = BlockInput {
                x,
                layout: layout_std(),
                cond: c,
                extra_kv: None,
                queries: QueryRows::All,
            };
            let (_, _, trace) = block_forward(&mut tape, &bound, &grouping, &input, true).unwrap();
            trace.unwrap()
        };
        let before = run(&params);
        for v in params.ada.maps[2].weight.data_mut() {
            *v += 0.5;
        }
        let after = run(&params);
        // Rows 0..5 (text + garment) of the modulated stream are untouched.
        for i in 0..5 * d {
            assert_eq!(before.modulated.data()[i].to_bits(), after.modulated.data()[i].to_bits());
        }
        // Target rows moved.
        let tgt_changed = (5 * d..9 * d)
            .any(|i| before.modulated.data()[i] != after.modulated.data()[i]);
        assert!(tgt_changed);
    }

    #[test]
    fn normalization_is_scale_invariant_per_group() {
        let d = 8;
        let grouping = BlockVariant::MnV3.grouping();
        let params = BlockParams::init_unconstrained(2, d, d, 2, 0.2, &mut rng(7)).unwrap();
        let base = Tensor::randn(&[9, d], 1.0, &mut rng(8));
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let bound = params.bind(&mut tape, &mut order).unwrap();
            let xv = tape.leaf(x).unwrap();
            let c = cond(&mut tape, d, 9);
            let input = BlockInput {
                x: xv,
                layout: layout_std(),
                cond: c,
                extra_kv: None,
                queries: QueryRows::All,
            };
            let (_, _, trace) = block_forward(&mut tape, &bound, &grouping, &input, true).unwrap();
            trace.unwrap().normalized
        };
        let reference = run(&base);
        for a in [0.1, 10.0] {
            // Scale the garment+target group only (rows 2..9).
            let mut scaled = base.clone();
            for r in 2..9 {
                for c in 0..d {
                    let v = scaled.get2(r, c);
                    scaled.set2(r, c, v * a);
                }
            }
            let got = run(&scaled);
            for i in 0..9 * d {
                let diff = (got.data()[i] - reference.data()[i]).abs();
                assert!(diff < 1e-9, "a={a} idx={i} diff={diff:e}");
            }
        }
    }

    #[test]
    fn query_restriction_shrinks_stream_and_ties_kv() {
        // With a single shared normalization, the restricted-query run and
        // the full run see identical K/V, and shared query rows match bitwise.
        let d = 8;
        let layout = layout_std();
        let grouping = Grouping::single();
        let params = BlockParams::init_unconstrained(1, d, d, 2, 0.2, &mut rng(10)).unwrap();
        let x0 = Tensor::randn(&[9, d], 1.0, &mut rng(11));
        let c0 = Tensor::randn(&[1, d], 1.0, &mut rng(12));
        let run = |queries: QueryRows| {
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let bound = params.bind(&mut tape, &mut order).unwrap();
            let x = tape.leaf(&x0).unwrap();
            let c = tape.leaf(&c0).unwrap();
            let input = BlockInput { x, layout, cond: c, extra_kv: None, queries };
            let (out, out_layout, trace) =
                block_forward(&mut tape, &bound, &grouping, &input, true).unwrap();
            (tape.value(out).clone(), out_layout, trace.unwrap())
        };
        let (full_out, full_layout, full_trace) = run(QueryRows::All);
        let (restr_out, restr_layout, restr_trace) = run(QueryRows::TextAndTarget);

        assert_eq!(full_layout.total(), 9);
        assert_eq!(restr_layout.total(), 6);
        assert_eq!(restr_layout.len(ModalityTag::Garment), 0);
        assert_eq!(restr_out.shape(), &[6, d]);

        // Keys/values bit-identical: garment tokens still feed attention.
        assert_eq!(full_trace.keys.shape(), restr_trace.keys.shape());
        for (a, b) in full_trace.keys.data().iter().zip(restr_trace.keys.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in full_trace.values.data().iter().zip(restr_trace.values.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // Surviving rows (text 0..2, target 5..9) match the full run bitwise.
        for (out_r, full_r) in (0..2).chain(5..9).enumerate().map(|(i, r)| (i, r)) {
            for col in 0..d {
                assert_eq!(
                    restr_out.get2(out_r, col).to_bits(),
                    full_out.get2(full_r, col).to_bits(),
                    "row {out_r} vs {full_r}"
                );
            }
        }
    }

    #[test]
    fn extra_kv_rows_participate_in_attention() {
        let d = 8;
        let grouping = BlockVariant::MnV3.grouping();
        let params = BlockParams::init_unconstrained(2, d, d, 2, 0.2, &mut rng(13)).unwrap();
        let x0 = Tensor::randn(&[9, d], 1.0, &mut rng(14));
        let c0 = Tensor::randn(&[1, d], 1.0, &mut rng(15));
        let extra = Tensor::randn(&[3, d], 1.0, &mut rng(16));
        let zeros = Tensor::full(&[3, d], 0.0);
        let run = |extra_t: Option<&Tensor>| {
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let bound = params.bind(&mut tape, &mut order).unwrap();
            let x = tape.leaf(&x0).unwrap();
            let c = tape.leaf(&c0).unwrap();
            let extra_kv = extra_t.map(|t| tape.leaf(t).unwrap());
            let input = BlockInput {
                x,
                layout: layout_std(),
                cond: c,
                extra_kv,
                queries: QueryRows::All,
            };
            let (out, _, trace) = block_forward(&mut tape, &bound, &grouping, &input, true).unwrap();
            (tape.value(out).clone(), trace.unwrap())
        };
        let (none_out, none_trace) = run(None);
        let (some_out, some_trace) = run(Some(&extra));
        assert_eq!(none_trace.keys.shape(), &[9, d]);
        assert_eq!(some_trace.keys.shape(), &[12, d]);
        assert!(none_out.data().iter().zip(some_out.data()).any(|(a, b)| a != b));
        // Even all-zero extra rows shift the attention normalizer.
        let (zero_out, _) = run(Some(&zeros));
        assert!(none_out.data().iter().zip(zero_out.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn extra_kv_width_checked() {
        let d = 8;
        let mut tape = Tape::new();
        let (_, bound) = bound_block(&mut tape, 2, d, 2, 17);
        let x = stream(&mut tape, 9, d, 18);
        let c = cond(&mut tape, d, 19);
        let bad = Tensor::randn(&[2, d + 1], 1.0, &mut rng(20));
        let extra = tape.leaf(&bad).unwrap();
        let input = BlockInput {
            x,
            layout: layout_std(),
            cond: c,
            extra_kv: Some(extra),
            queries: QueryRows::All,
        };
        let err = block_forward(&mut tape, &bound, &BlockVariant::MnV3.grouping(), &input, false);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn empty_stream_rejected() {
        let d = 8;
        let mut tape = Tape::new();
        let (_, bound) = bound_block(&mut tape, 2, d, 2, 21);
        let x = tape.leaf(&Tensor::full(&[0, d], 0.0)).unwrap();
        let c = cond(&mut tape, d, 22);
        let input = BlockInput {
            x,
            layout: ModalityLayout::from_lengths(0, 0, 0),
            cond: c,
            extra_kv: None,
            queries: QueryRows::All,
        };
        let err = block_forward(&mut tape, &bound, &BlockVariant::MnV3.grouping(), &input, false);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    // ---- gradients -----------------------------------------------------

    /// Flattens a parameter set, reruns the forward from the flat vector, and
    /// compares tape gradients against central finite differences.
    fn block_stack_grad_err(variant: BlockVariant, layers: usize) -> f64 {
        let d = 8;
        let heads = 2;
        let grouping = variant.grouping();
        let layout = if variant.uses_reference_net() {
            ModalityLayout::from_lengths(2, 0, 4)
        } else {
            layout_std()
        };
        let params: Vec<BlockParams> = (0..layers)
            .map(|i| {
                BlockParams::init_unconstrained(
                    grouping.group_count(),
                    d,
                    d,
                    heads,
                    0.3,
                    &mut rng(100 + i as u64),
                )
                .unwrap()
            })
            .collect();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        let mut flat: Vec<f64> = Vec::new();
        for p in &params {
            p.visit("", &mut |_, t| {
                shapes.push(t.shape().to_vec());
                flat.extend_from_slice(t.data());
            });
        }
        let flat = Tensor::new(vec![1, flat.len()], flat).unwrap();

        let l = layout.total();
        let x0 = Tensor::randn(&[l, d], 0.8, &mut rng(200));
        let c0 = Tensor::randn(&[1, d], 0.8, &mut rng(201));
        let extra0 = Tensor::randn(&[3, d], 0.8, &mut rng(202));
        let queries = variant.query_rows();
        let wants_extra = variant.uses_reference_net();

        grad_check(
            |tape, flat_v| {
                let pieces = unpack_row(tape, flat_v, &shapes)?;
                let mut it = pieces.into_iter();
                let mut x = tape.constant(&x0)?;
                let c = tape.constant(&c0)?;
                let mut layout_now = layout;
                for p in &params {
                    let bound = p.bind_vars(&mut it)?;
                    let extra_kv = if wants_extra { Some(tape.constant(&extra0)?) } else { None };
                    let input = BlockInput { x, layout: layout_now, cond: c, extra_kv, queries };
                    let (out, next_layout, _) = block_forward(tape, &bound, &grouping, &input, false)?;
                    x = out;
                    layout_now = next_layout;
                }
                let sq = tape.mul(x, x)?;
                tape.mean_all(sq)
            },
            &flat,
            GRAD_CHECK_H,
        )
        .unwrap()
    }

    #[test]
    fn block_stack_gradients_match_finite_differences() {
        for variant in BlockVariant::ALL {
            let err = block_stack_grad_err(variant, 2);
            assert!(err < 1e-4, "{}: max grad rel err {err:e}", variant.name());
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        // Same check but differentiating the token stream instead of params.
        let d = 8;
        let grouping = BlockVariant::MnV3.grouping();
        let params = BlockParams::init_unconstrained(2, d, d, 2, 0.3, &mut rng(300)).unwrap();
        let c0 = Tensor::randn(&[1, d], 0.8, &mut rng(301));
        let x0 = Tensor::randn(&[9, d], 0.8, &mut rng(302));
        let err = grad_check(
            |tape, x| {
                let mut order = Vec::new();
                let bound_block = {
                    let mut tensors: Vec<&Tensor> = Vec::new();
                    params.visit("", &mut |_, t| tensors.push(t));
                    for t in tensors {
                        order.push(tape.constant(t)?);
                    }
                    let mut itr = order.iter().copied();
                    params.bind_vars(&mut itr)?
                };
                let c = tape.constant(&c0)?;
                let input = BlockInput {
                    x,
                    layout: layout_std(),
                    cond: c,
                    extra_kv: None,
                    queries: QueryRows::All,
                };
                let (out, _, _) = block_forward(tape, &bound_block, &grouping, &input, false)?;
                let sq = tape.mul(out, out)?;
                tape.mean_all(sq)
            },
            &x0,
            GRAD_CHECK_H,
        )
        .unwrap();
        assert!(err < 1e-4, "input grad rel err {err:e}");
    }

    #[test]
    fn unpack_row_shapes_checked() {
        let mut tape = Tape::new();
        let flat = tape.leaf(&Tensor::full(&[1, 5], 1.0)).unwrap();
        let err = unpack_row(&mut tape, flat, &[vec![2, 3]]);
        assert!(matches!(err, Err(Error::Shape(_))));
        let ok = unpack_row(&mut tape, flat, &[vec![5]]).unwrap();
        assert_eq!(tape.value(ok[0]).shape(), &[5]);
    }
}
