//! Brute-force references for checking the tape and the texture pipeline.
//!
//! Nothing here calls into the modules it validates: convolution, histogramming,
//! resampling and the DFT are written out as direct loops over `f64` slices.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("function returned a non-finite value at coordinate {coord} ({value})")]
    NonFinite { coord: usize, value: f64 },
    #[error("analytic and numeric gradients differ in length ({analytic} vs {numeric})")]
    LengthMismatch { analytic: usize, numeric: usize },
}

/// Central differences `(f(x + h·eᵢ) - f(x - h·eᵢ)) / 2h` for every coordinate of `x`.
pub fn finite_diff<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>, OracleError>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(OracleError::NonFinite { coord: i, value: v });
            }
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::new(x.shape().to_vec(), grad).expect("same shape as x"))
}

/// Worst-case agreement between an analytic and a numeric gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    /// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn compare(label: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Result<Self, OracleError> {
        if analytic.len() != numeric.len() {
            return Err(OracleError::LengthMismatch { analytic: analytic.len(), numeric: numeric.len() });
        }
        let mut report = Self {
            label: label.into(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: analytic.first().copied().unwrap_or(0.0),
            numeric: numeric.first().copied().unwrap_or(0.0),
            checked: analytic.len(),
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = relative_error(a, n);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
        Ok(report)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Folds several reports into the one with the largest error, keeping `label`.
    pub fn worst_of(label: impl Into<String>, reports: &[GradReport]) -> GradReport {
        let mut worst = reports
            .iter()
            .cloned()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap_or(GradReport {
                label: String::new(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                checked: 0,
            });
        worst.checked = reports.iter().map(|r| r.checked).sum();
        worst.label = label.into();
        worst
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} checked={:<5} max_rel_err={:.3e} at [{}] analytic={:+.6e} numeric={:+.6e}",
            self.label, self.checked, self.max_rel_err, self.worst_index, self.analytic, self.numeric
        )
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Direct cross-correlation, `input[c_in×h×w]`, `kernel[c_out×c_in×k×k]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> Vec<f64> {
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input[(ci * h + iy as usize) * w + ix as usize]
                                * kernel[((co * c_in + ci) * k + ki) * k + kj];
                        }
                    }
                }
                out[(co * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    out
}

/// Hard histogram: each value lying within `tol` of a level counts toward it;
/// other values are ignored. Normalized to sum 1 (all zeros if nothing counted).
pub fn naive_histogram(values: &[f64], levels: &[f64], tol: f64) -> Vec<f64> {
    let mut counts = vec![0.0; levels.len()];
    for &v in values {
        if let Some(m) = levels.iter().position(|&l| (l - v).abs() <= tol) {
            counts[m] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Bilinear sample of a single-channel `h×w` image at output pixel `(i, j)` of an
/// `out×out` zoom of the box `[x0,x1]×[y0,y1]` (fractions of the image), pixel-center
/// aligned: source coordinate `y0·h + (i + ½)·(y1 - y0)·h / out - ½`, clamped to the image.
#[allow(clippy::too_many_arguments)]
pub fn naive_bilinear(image: &[f64], h: usize, w: usize, bx: [f64; 4], out: usize, i: usize, j: usize) -> f64 {
    let [x0, y0, x1, y1] = bx;
    let sy = (y0 * h as f64 + (i as f64 + 0.5) * (y1 - y0) * h as f64 / out as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let sx = (x0 * w as f64 + (j as f64 + 0.5) * (x1 - x0) * w as f64 / out as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let (fy, fx) = (sy.floor(), sx.floor());
    let (ty, tx) = (sy - fy, sx - fx);
    let (r0, c0) = (fy as usize, fx as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let p = |r: usize, c: usize| image[r * w + c];
    (1.0 - ty) * ((1.0 - tx) * p(r0, c0) + tx * p(r0, c1)) + ty * ((1.0 - tx) * p(r1, c0) + tx * p(r1, c1))
}

/// Direct 2-D DFT of a real `n×n` image.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub n: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

pub fn dft2(image: &[f64], n: usize) -> Spectrum {
    assert_eq!(image.len(), n * n, "dft2 expects a square image");
    let mut re = vec![0.0; n * n];
    let mut im = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let phase = -2.0 * PI * ((u * y) as f64 / n as f64 + (v * x) as f64 / n as f64);
                    let val = image[y * n + x];
                    sr += val * phase.cos();
                    si += val * phase.sin();
                }
            }
            re[u * n + v] = sr;
            im[u * n + v] = si;
        }
    }
    Spectrum { n, re, im }
}

impl Spectrum {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Spectrum of `self + i·other` for two real images, by linearity.
    pub fn combine_as_complex(&self, other: &Spectrum) -> Spectrum {
        Spectrum {
            n: self.n,
            re: self.re.iter().zip(&other.im).map(|(a, b)| a - b).collect(),
            im: self.im.iter().zip(&other.re).map(|(a, b)| a + b).collect(),
        }
    }

    /// Signed frequency in cycles/pixel of bin index `k`.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        let n = self.n as isize;
        let k = k as isize;
        let s = if k >= (n + 1) / 2 { k - n } else { k };
        s as f64 / self.n as f64
    }

    /// `(fx, fy)` in cycles/pixel of the largest-magnitude bin (first on ties).
    pub fn peak(&self, skip_dc: bool) -> (f64, f64) {
        let mag = self.magnitude();
        let mut best = (0, f64::NEG_INFINITY);
        for (idx, &m) in mag.iter().enumerate() {
            if skip_dc && idx == 0 {
                continue;
            }
            if m > best.1 {
                best = (idx, m);
            }
        }
        let (u, v) = (best.0 / self.n, best.0 % self.n);
        (self.bin_frequency(v), self.bin_frequency(u))
    }
}

/// Fraction of a 1-D Gaussian's mass within `±alpha·σ`, by composite Simpson quadrature.
pub fn gaussian_mass_quadrature(alpha: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let (a, b) = (-alpha, alpha);
    let step = (b - a) / n as f64;
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    let mut acc = pdf(a) + pdf(b);
    for k in 1..n {
        let z = a + k as f64 * step;
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(z);
    }
    acc * step / 3.0
}
