//! Image-space quality metrics: SSIM, PSNR, masked mean squared error.
//!
//! All metrics take rank-4 grids shaped `[frames, height, width, channels]`
//! with values expected in `[0, 1]`. Videos are scored as the mean of
//! per-frame scores; a single image is the one-frame special case.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Side length of the SSIM sliding window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn dims4<F: Scalar>(t: &TensorBase<F>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "{what}: expected rank-4 [frames, height, width, channels], got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn same_shape<F: Scalar>(a: &TensorBase<F>, b: &TensorBase<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn gaussian_kernel<F: Scalar>() -> Vec<F> {
    let half = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k.into_iter().map(F::from_f64_c).collect()
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
/// Output is `(h - 10) x (w - 10)`.
fn gauss_valid<F: Scalar>(plane: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut horiz = vec![F::zero(); h * ow];
    for r in 0..h {
        for j in 0..ow {
            let mut acc = F::zero();
            for (k, &g) in kernel.iter().enumerate() {
                acc = acc + g * plane[r * w + j + k];
            }
            horiz[r * ow + j] = acc;
        }
    }
    let mut out = vec![F::zero(); oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = F::zero();
            for (k, &g) in kernel.iter().enumerate() {
                acc = acc + g * horiz[(i + k) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

fn extract_plane<F: Scalar>(t: &TensorBase<F>, f: usize, ch: usize, h: usize, w: usize, c: usize) -> Vec<F> {
    let mut p = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            p.push(t.data()[((f * h + r) * w + col) * c + ch]);
        }
    }
    p
}

/// Structural similarity between two grids.
///
/// Gaussian-weighted 11x11 windows (sigma 1.5), valid mode (no padding), with
/// the standard stabilizers for unit data range. The score is the mean window
/// SSIM per channel, averaged over channels, then over frames. Requires
/// height and width of at least 11.
pub fn ssim<F: Scalar>(a: &TensorBase<F>, b: &TensorBase<F>) -> Result<F> {
    same_shape(a, b, "ssim")?;
    let (fr, h, w, c) = dims4(a, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: grid {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    if fr == 0 || c == 0 {
        return Err(Error::contract("ssim: empty grid"));
    }
    let kernel = gaussian_kernel::<F>();
    let c1 = F::from_f64_c(SSIM_C1);
    let c2 = F::from_f64_c(SSIM_C2);
    let two = F::from_f64_c(2.0);

    let mut frame_acc = F::zero();
    for f in 0..fr {
        let mut chan_acc = F::zero();
        for ch in 0..c {
            let x = extract_plane(a, f, ch, h, w, c);
            let y = extract_plane(b, f, ch, h, w, c);
            let xx: Vec<F> = x.iter().map(|&v| v * v).collect();
            let yy: Vec<F> = y.iter().map(|&v| v * v).collect();
            let xy: Vec<F> = x.iter().zip(&y).map(|(&u, &v)| u * v).collect();
            let mu_x = gauss_valid(&x, h, w, &kernel);
            let mu_y = gauss_valid(&y, h, w, &kernel);
            let m_xx = gauss_valid(&xx, h, w, &kernel);
            let m_yy = gauss_valid(&yy, h, w, &kernel);
            let m_xy = gauss_valid(&xy, h, w, &kernel);
            let mut acc = F::zero();
            for i in 0..mu_x.len() {
                let sx = m_xx[i] - mu_x[i] * mu_x[i];
                let sy = m_yy[i] - mu_y[i] * mu_y[i];
                let sxy = m_xy[i] - mu_x[i] * mu_y[i];
                let num = (two * (mu_x[i] * mu_y[i]) + c1) * (two * sxy + c2);
                let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (sx + sy + c2);
                acc = acc + num / den;
            }
            chan_acc = chan_acc + acc / F::from_usize_c(mu_x.len());
        }
        frame_acc = frame_acc + chan_acc / F::from_usize_c(c);
    }
    Ok(frame_acc / F::from_usize_c(fr))
}

/// Peak signal-to-noise ratio in dB for unit data range.
/// Returns `None` when the inputs are identical (infinite PSNR).
pub fn psnr<F: Scalar>(a: &TensorBase<F>, b: &TensorBase<F>) -> Result<Option<F>> {
    same_shape(a, b, "psnr")?;
    if a.numel() == 0 {
        return Err(Error::contract("psnr: empty grid"));
    }
    let mut acc = F::zero();
    for (&u, &v) in a.data().iter().zip(b.data()) {
        let d = u - v;
        acc = acc + d * d;
    }
    let mse = acc / F::from_usize_c(a.numel());
    if mse == F::zero() {
        return Ok(None);
    }
    Ok(Some(-F::from_f64_c(10.0) * mse.log10()))
}

/// Mean squared error restricted to masked pixels.
///
/// `mask` is `[frames, height, width, 1]` with values treated as on when
/// above 0.5; the mean runs over (masked pixel, channel) pairs across all
/// frames. A mask with no active pixel is a contract violation.
pub fn masked_l2<F: Scalar>(a: &TensorBase<F>, b: &TensorBase<F>, mask: &TensorBase<F>) -> Result<F> {
    same_shape(a, b, "masked_l2")?;
    let (fr, h, w, c) = dims4(a, "masked_l2")?;
    let (mf, mh, mw, mc) = dims4(mask, "masked_l2 mask")?;
    if (mf, mh, mw, mc) != (fr, h, w, 1) {
        return Err(Error::shape(format!(
            "masked_l2: mask shape {:?} does not match grid [{fr}, {h}, {w}, 1]",
            mask.shape()
        )));
    }
    let half = F::from_f64_c(0.5);
    let mut acc = F::zero();
    let mut count = 0usize;
    for f in 0..fr {
        for r in 0..h {
            for col in 0..w {
                if mask.data()[(f * h + r) * w + col] > half {
                    for ch in 0..c {
                        let idx = ((f * h + r) * w + col) * c + ch;
                        let d = a.data()[idx] - b.data()[idx];
                        acc = acc + d * d;
                    }
                    count += c;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("masked_l2: mask has no active pixels"));
    }
    Ok(acc / F::from_usize_c(count))
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
