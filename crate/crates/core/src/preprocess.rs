//! Turns a raw CSI sequence into the real matrix consumed by the model.
//!
//! Row `n` is `[tau(t_n), |x_n|, cos(arg x_n), sin(arg x_n)]` where `tau` is a
//! trigonometric time embedding and `x_n` holds, per (subcarrier, tx) and
//! non-reference Rx antenna, the normalized product with the conjugate of the
//! first Rx antenna. The product cancels any phase error common to all Rx
//! chains of a packet.

use num_complex::Complex64;

use crate::autodiff::Mat;
use crate::csi_sim::{CsiLayout, CsiSequence};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPORAL_LEN: usize = 16;

/// Model input: `N x L_P` with `L_P = L_T + 3 * L_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedSequence {
    pub x: Mat,
    pub temporal_len: usize,
}

impl PreprocessedSequence {
    pub fn n_rows(&self) -> usize {
        self.x.rows
    }

    pub fn width(&self) -> usize {
        self.x.cols
    }
}

pub fn input_width(layout: &CsiLayout, temporal_len: usize) -> usize {
    temporal_len + 3 * layout.conj_len()
}

/// Time embedding: element `j` (1-based) is `sin(t / T^(j/L_T))` for even `j`
/// and `cos(t / T^((j-1)/L_T))` for odd `j`.
pub fn temporal_embed(t: f64, duration: f64, len: usize) -> Result<Vec<f64>> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::InvalidArgument(format!("temporal length must be even and >= 2, got {len}")));
    }
    if !(t >= 0.0 && t <= duration) {
        return Err(Error::OutOfWindow { t, duration });
    }
    Ok((1..=len)
        .map(|j| {
            if j % 2 == 0 {
                (t / duration.powf(j as f64 / len as f64)).sin()
            } else {
                (t / duration.powf((j - 1) as f64 / len as f64)).cos()
            }
        })
        .collect())
}

/// `h[rx=r] * conj(h[rx=0])` for every (subcarrier, tx) and `r = 1..n_rx`,
/// ordered `((subcarrier * n_tx) + tx) * (n_rx - 1) + (r - 1)`.
pub fn conjugate_multiply(h: &[Complex64], layout: &CsiLayout) -> Result<Vec<Complex64>> {
    if layout.n_rx < 2 {
        return Err(Error::Shape(format!("need n_rx >= 2, got {}", layout.n_rx)));
    }
    if h.len() != layout.len() {
        return Err(Error::Shape(format!("sample length {} != L_H {}", h.len(), layout.len())));
    }
    let mut out = Vec::with_capacity(layout.conj_len());
    for k in 0..layout.n_subcarriers {
        for tx in 0..layout.n_tx {
            let reference = h[layout.index(k, tx, 0)].conj();
            for r in 1..layout.n_rx {
                out.push(h[layout.index(k, tx, r)] * reference);
            }
        }
    }
    Ok(out)
}

/// Subtracts the complex mean, then divides by the largest remaining modulus.
/// A constant series maps to zeros.
pub fn normalize(series: &[Complex64]) -> Vec<Complex64> {
    if series.is_empty() {
        return Vec::new();
    }
    let mean = series.iter().sum::<Complex64>() / series.len() as f64;
    let mut out: Vec<Complex64> = series.iter().map(|v| v - mean).collect();
    let max = out.iter().map(|v| v.norm()).fold(0.0, f64::max);
    // relative floor: residue after removing a constant is rounding noise
    let scale = series.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if max <= scale * 1e-12 || max == 0.0 {
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
    } else {
        out.iter_mut().for_each(|v| *v /= max);
    }
    out
}

/// `(|x|, cos arg x, sin arg x)`; zero maps to `(0, 1, 0)`.
pub fn complex_to_real(x: Complex64) -> (f64, f64, f64) {
    let m = x.norm();
    if m == 0.0 {
        (0.0, 1.0, 0.0)
    } else {
        (m, x.re / m, x.im / m)
    }
}

pub fn preprocess_sequence(
    seq: &CsiSequence,
    layout: &CsiLayout,
    duration: f64,
    temporal_len: usize,
) -> Result<PreprocessedSequence> {
    seq.validate(duration)?;
    if seq.l_h != layout.len() {
        return Err(Error::Shape(format!("sequence L_H {} != layout {}", seq.l_h, layout.len())));
    }
    let n = seq.len();
    let lx = layout.conj_len();
    // channel-major: products[c][n]
    let mut products = vec![Vec::with_capacity(n); lx];
    for i in 0..n {
        for (c, v) in conjugate_multiply(seq.sample(i), layout)?.into_iter().enumerate() {
            products[c].push(v);
        }
    }
    let normalized: Vec<Vec<Complex64>> = products.iter().map(|s| normalize(s)).collect();

    let width = input_width(layout, temporal_len);
    let mut x = Mat::zeros(n, width);
    for i in 0..n {
        let row = x.row_mut(i);
        row[..temporal_len].copy_from_slice(&temporal_embed(seq.timestamps[i], duration, temporal_len)?);
        for c in 0..lx {
            let (m, co, si) = complex_to_real(normalized[c][i]);
            row[temporal_len + c] = m;
            row[temporal_len + lx + c] = co;
            row[temporal_len + 2 * lx + c] = si;
        }
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("preprocessed sequence".into()));
    }
    Ok(PreprocessedSequence { x, temporal_len })
}
