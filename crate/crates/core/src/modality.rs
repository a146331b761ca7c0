//! Token-stream structure: modality tags, grid patchification and positional
//! embeddings.
//!
//! The model consumes one flat token sequence per sample, laid out in the
//! canonical order Text | Garment | Target. [`ModalityLayout`] records the
//! three contiguous row ranges. Visual grids are `[frames, height, width,
//! channels]` tensors; [`patchify`] flattens them into per-patch tokens in
//! frames-major order so that an image (f=1) is exactly the frame-0 prefix of
//! the matching video encoding.
//!
//! Positional embeddings are factorized sin/cos over the frame, row and column
//! patch axes (d/3 dims each). Images and videos share one encoding because
//! the frame axis is always present; frame index 0 contributes sin 0 / cos 1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    Text,
    Garment,
    Target,
}

impl ModalityTag {
    /// Canonical order of modalities inside the flat sequence.
    pub const ALL: [ModalityTag; 3] = [ModalityTag::Text, ModalityTag::Garment, ModalityTag::Target];

    pub fn index(self) -> usize {
        match self {
            ModalityTag::Text => 0,
            ModalityTag::Garment => 1,
            ModalityTag::Target => 2,
        }
    }
}

/// Pixel-level grid shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        GridShape { frames, height, width, channels }
    }

    pub fn tensor_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    /// Patch-level grid for patch size `p`; errors unless `p` divides both
    /// spatial extents.
    pub fn patch_grid(&self, p: usize) -> Result<PatchGrid> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::config(format!(
                "patch size {p} does not divide grid {}x{}",
                self.height, self.width
            )));
        }
        Ok(PatchGrid { frames: self.frames, rows: self.height / p, cols: self.width / p })
    }
}

/// Patch-level grid extents (frame x patch-row x patch-col).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contiguous row ranges of the three modalities inside a flat sequence.
/// Construction from lengths guarantees the partition invariant: disjoint,
/// contiguous, covering `[0, total)` in canonical order. Empty ranges are
/// legal (e.g. an empty text prefix, or the garment segment after a
/// query-restricted block dropped it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityLayout {
    lens: [usize; 3],
}

impl ModalityLayout {
    pub fn from_lengths(text: usize, garment: usize, target: usize) -> Self {
        ModalityLayout { lens: [text, garment, target] }
    }

    pub fn len(&self, tag: ModalityTag) -> usize {
        self.lens[tag.index()]
    }

    pub fn range(&self, tag: ModalityTag) -> std::ops::Range<usize> {
        let mut start = 0;
        for t in ModalityTag::ALL {
            if t == tag {
                return start..start + self.lens[t.index()];
            }
            start += self.lens[t.index()];
        }
        unreachable!()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Layout after dropping one modality (used by query-restricted blocks).
    pub fn without(&self, tag: ModalityTag) -> Self {
        let mut lens = self.lens;
        lens[tag.index()] = 0;
        ModalityLayout { lens }
    }

    /// Validates the layout against a token count, naming both on failure.
    pub fn check_total(&self, rows: usize) -> Result<()> {
        if self.total() != rows {
            return Err(Error::contract(format!(
                "layout lengths {:?} cover {} rows, sequence has {rows}",
                self.lens,
                self.total()
            )));
        }
        Ok(())
    }
}

// ---- patchify ----

/// Flattens a `[f, h, w, c]` grid into `[f*(h/p)*(w/p), p*p*c]` tokens.
/// Token order: frames major, then patch rows, then patch columns; within a
/// token, pixel rows major, then pixel columns, then channels.
pub fn patchify<F: Scalar>(grid: &TensorBase<F>, shape: GridShape, p: usize) -> Result<TensorBase<F>> {
    if grid.shape() != shape.tensor_shape() {
        return Err(Error::shape(format!(
            "patchify: tensor shape {:?} vs declared grid {:?}",
            grid.shape(),
            shape.tensor_shape()
        )));
    }
    let pg = shape.patch_grid(p)?;
    let width = p * p * shape.channels;
    let mut data = Vec::with_capacity(pg.len() * width);
    for f in 0..pg.frames {
        for pr in 0..pg.rows {
            for pc in 0..pg.cols {
                for dr in 0..p {
                    for dc in 0..p {
                        for ch in 0..shape.channels {
                            data.push(grid.at(&[f, pr * p + dr, pc * p + dc, ch]));
                        }
                    }
                }
            }
        }
    }
    TensorBase::new(vec![pg.len(), width], data)
}

/// Inverse of [`patchify`]; bit-exact round trip.
pub fn unpatchify<F: Scalar>(
    tokens: &TensorBase<F>,
    shape: GridShape,
    p: usize,
) -> Result<TensorBase<F>> {
    let pg = shape.patch_grid(p)?;
    let width = p * p * shape.channels;
    let (rows, cols) = tokens.dims2()?;
    if rows != pg.len() || cols != width {
        return Err(Error::shape(format!(
            "unpatchify: token shape {:?} vs expected [{}, {width}] for grid {:?} p={p}",
            tokens.shape(),
            pg.len(),
            shape.tensor_shape()
        )));
    }
    let mut out = TensorBase::zeros(&shape.tensor_shape());
    let mut tok = 0;
    for f in 0..pg.frames {
        for pr in 0..pg.rows {
            for pc in 0..pg.cols {
                let mut k = 0;
                for dr in 0..p {
                    for dc in 0..p {
                        for ch in 0..shape.channels {
                            *out.at_mut(&[f, pr * p + dr, pc * p + dc, ch]) =
                                tokens.get2(tok, k);
                            k += 1;
                        }
                    }
                }
                tok += 1;
            }
        }
    }
    Ok(out)
}

// ---- positional embeddings ----

/// Number of factorized axes (frame, row, col).
pub const POS_AXES: usize = 3;

/// Sin/cos features of one axis position at `dim` width (first half sin,
/// second half cos, frequencies 10000^(-j/(dim/2))).
pub fn axis_sincos<F: Scalar>(pos: f64, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let omega = 10_000f64.powf(-(j as f64) / half as f64);
        out.push(F::from_f64_c((pos * omega).sin()));
    }
    for j in 0..half {
        let omega = 10_000f64.powf(-(j as f64) / half as f64);
        out.push(F::from_f64_c((pos * omega).cos()));
    }
    out
}

/// Factorized sin/cos embedding table for a patch grid: `[grid.len(), d]`,
/// laid out `[frame | row | col]` with `d/3` dims per axis. Requires
/// `d % (POS_AXES * 2) == 0`.
pub fn build_pos_embed<F: Scalar>(grid: PatchGrid, d: usize) -> Result<TensorBase<F>> {
    if d == 0 || d % (POS_AXES * 2) != 0 {
        return Err(Error::config(format!(
            "pos embed width {d} must be a positive multiple of {}",
            POS_AXES * 2
        )));
    }
    let d_ax = d / POS_AXES;
    let mut data = Vec::with_capacity(grid.len() * d);
    for f in 0..grid.frames {
        let fe = axis_sincos::<F>(f as f64, d_ax);
        for r in 0..grid.rows {
            let re = axis_sincos::<F>(r as f64, d_ax);
            for c in 0..grid.cols {
                let ce = axis_sincos::<F>(c as f64, d_ax);
                data.extend_from_slice(&fe);
                data.extend_from_slice(&re);
                data.extend_from_slice(&ce);
            }
        }
    }
    TensorBase::new(vec![grid.len(), d], data)
}

#[inline]
fn lerp<F: Scalar>(a: F, b: F, t: F) -> F {
    a + t * (b - a)
}

/// Corner-aligned source coordinate for destination index `i`.
fn corner_coord(i: usize, n_dst: usize, n_src: usize) -> f64 {
    if n_dst <= 1 || n_src <= 1 {
        0.0
    } else {
        (i * (n_src - 1)) as f64 / (n_dst - 1) as f64
    }
}

/// Resamples an embedding table from one patch grid to another: bilinear over
/// rows/columns within a frame, linear across frames, corner-aligned. Used for
/// image/video joint operation when grids differ; same-grid interpolation is
/// the identity (bit-exact), and corner embeddings are preserved exactly.
pub fn interpolate_pos_embed<F: Scalar>(
    src: &TensorBase<F>,
    src_grid: PatchGrid,
    dst_grid: PatchGrid,
) -> Result<TensorBase<F>> {
    let (rows, d) = src.dims2()?;
    if rows != src_grid.len() {
        return Err(Error::shape(format!(
            "interpolate_pos_embed: table has {rows} rows, source grid {src_grid:?} needs {}",
            src_grid.len()
        )));
    }
    if src_grid.is_empty() || dst_grid.is_empty() {
        return Err(Error::contract("interpolate_pos_embed: empty grid"));
    }
    let at = |f: usize, r: usize, c: usize, k: usize| {
        src.get2((f * src_grid.rows + r) * src_grid.cols + c, k)
    };
    let mut data = Vec::with_capacity(dst_grid.len() * d);
    for fd in 0..dst_grid.frames {
        let sf = corner_coord(fd, dst_grid.frames, src_grid.frames);
        let f0 = sf.floor() as usize;
        let f1 = (f0 + 1).min(src_grid.frames - 1);
        let tf = F::from_f64_c(sf - f0 as f64);
        for rd in 0..dst_grid.rows {
            let sr = corner_coord(rd, dst_grid.rows, src_grid.rows);
            let r0 = sr.floor() as usize;
            let r1 = (r0 + 1).min(src_grid.rows - 1);
            let tr = F::from_f64_c(sr - r0 as f64);
            for cd in 0..dst_grid.cols {
                let sc = corner_coord(cd, dst_grid.cols, src_grid.cols);
                let c0 = sc.floor() as usize;
                let c1 = (c0 + 1).min(src_grid.cols - 1);
                let tc = F::from_f64_c(sc - c0 as f64);
                for k in 0..d {
                    let plane = |f: usize| {
                        lerp(
                            lerp(at(f, r0, c0, k), at(f, r0, c1, k), tc),
                            lerp(at(f, r1, c0, k), at(f, r1, c1, k), tc),
                            tr,
                        )
                    };
                    data.push(lerp(plane(f0), plane(f1), tf));
                }
            }
        }
    }
    TensorBase::new(vec![dst_grid.len(), d], data)
}
