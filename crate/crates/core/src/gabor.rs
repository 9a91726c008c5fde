//! Constrained Gabor filter banks.
//!
//! A filter is `(1/(2πσxσy))·exp(-½(x̃²/σx² + ỹ²/σy²))·exp(2πjW·x̃)` with
//! `x̃ = x cosθ + y sinθ`, `ỹ = -x sinθ + y cosθ`, `x` along columns and `y` along
//! rows, both measured from the kernel center. Each of the four parameters is a raw
//! unbounded value squashed into its valid range by `l + (u - l)·sigmoid(raw)`.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Column order of the `[N×4]` raw parameter tensor.
pub const SIGMA_X: usize = 0;
pub const SIGMA_Y: usize = 1;
pub const THETA: usize = 2;
pub const FREQ: usize = 3;

/// Multiple of σ that the valid ranges reserve on each side of the envelope.
pub const ENVELOPE_ALPHA: f64 = 2.5;

/// Smoothing added under the square root of the response modulus.
pub const INTENSITY_EPS: f64 = 1e-12;

/// Parameter bounds for a given zoomed region size.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidRanges<T> {
    pub region_size: usize,
    pub theta: (T, T),
    pub sigma_y: (T, T),
    pub w_full: (T, T),
    pub w_low: (T, T),
    pub w_high: (T, T),
    /// Upper bound for σx; its lower bound depends on W, see [`ValidRanges::sigma_x_lower`].
    pub sigma_x_upper: T,
}

impl<T: Scalar> ValidRanges<T> {
    /// `5 / (2π(1 - 2W))`
    pub fn sigma_x_lower(&self, w: T) -> T {
        T::lit(5.0) / (T::lit(2.0 * PI) * (T::one() - T::lit(2.0) * w))
    }

    pub fn w_band(&self, band: Band) -> (T, T) {
        match band {
            Band::Low => self.w_low,
            Band::High => self.w_high,
        }
    }
}

pub fn valid_ranges<T: Scalar>(region_size: usize) -> Result<ValidRanges<T>> {
    if region_size < 16 {
        return Err(Error::RegionTooSmall(region_size));
    }
    let s = region_size as f64;
    let w_max = (2.0 * PI * s - 25.0) / (4.0 * PI * s);
    let ranges = ValidRanges {
        region_size,
        theta: (T::zero(), T::PI()),
        sigma_y: (T::lit(5.0 / (2.0 * PI)), T::lit(s / 5.0)),
        w_full: (T::zero(), T::lit(w_max)),
        w_low: (T::zero(), T::lit(w_max / 2.0)),
        w_high: (T::lit(w_max / 2.0), T::lit(w_max)),
        sigma_x_upper: T::lit(s / 5.0),
    };
    for (lo, hi) in [ranges.theta, ranges.sigma_y, ranges.w_low, ranges.w_high] {
        if lo >= hi {
            return Err(Error::InvalidBounds { lower: lo.to_f64_lossy(), upper: hi.to_f64_lossy() });
        }
    }
    // σx's lower bound reaches its upper bound only at the excluded endpoint W = w_max
    let at_mid = ranges.sigma_x_lower(ranges.w_high.0);
    if at_mid >= ranges.sigma_x_upper {
        return Err(Error::InvalidBounds { lower: at_mid.to_f64_lossy(), upper: s / 5.0 });
    }
    Ok(ranges)
}

/// Fraction of a 1-D Gaussian's energy within `±alpha·σ`: `erf(alpha/√2)`.
pub fn subtended_energy(alpha: f64) -> f64 {
    libm::erf(alpha / std::f64::consts::SQRT_2)
}

/// Odd kernel side `min(odd(S/2 + 1), 33)`.
pub fn kernel_size(region_size: usize) -> usize {
    let k = region_size / 2 + 1;
    let k = if k % 2 == 0 { k + 1 } else { k };
    k.min(33)
}

/// Raw value plus bounds; its value is `lower + (upper - lower)·sigmoid(raw)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstrainedParam<T> {
    pub raw: T,
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> ConstrainedParam<T> {
    pub fn new(raw: T, lower: T, upper: T) -> Result<Self> {
        if lower >= upper || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidBounds { lower: lower.to_f64_lossy(), upper: upper.to_f64_lossy() });
        }
        Ok(Self { raw, lower, upper })
    }

    pub fn value(&self) -> T {
        self.lower + (self.upper - self.lower) * sigmoid(self.raw)
    }
}

pub fn constrain<T: Scalar>(raw: T, lower: T, upper: T) -> Result<T> {
    ConstrainedParam::new(raw, lower, upper).map(|p| p.value())
}

/// `lower + (upper - lower)·sigmoid(raw)` with all three as tape variables.
pub fn constrain_on_tape<T: Scalar>(tape: &mut Tape<T>, raw: Var, lower: Var, upper: Var) -> Result<Var> {
    let s = tape.sigmoid(raw)?;
    let span = tape.sub(upper, lower)?;
    let scaled = tape.mul(span, s)?;
    Ok(tape.add(lower, scaled)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Low,
    High,
}

/// Concrete parameters of one filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborFilterSpec<T> {
    pub sigma_x: T,
    pub sigma_y: T,
    pub theta: T,
    pub w: T,
    pub band: Band,
    pub kernel_size: usize,
}

/// Real and imaginary planes, each `kernel_size²`, row-major.
pub fn synthesize<T: Scalar>(spec: &GaborFilterSpec<T>) -> (Vec<T>, Vec<T>) {
    let k = spec.kernel_size;
    let c = (k / 2) as isize;
    let two_pi = T::lit(2.0 * PI);
    let norm = T::one() / (two_pi * spec.sigma_x * spec.sigma_y);
    let (sin, cos) = spec.theta.sin_cos();
    let mut re = Vec::with_capacity(k * k);
    let mut im = Vec::with_capacity(k * k);
    for i in 0..k as isize {
        for j in 0..k as isize {
            let (x, y) = (T::lit((j - c) as f64), T::lit((i - c) as f64));
            let xt = x * cos + y * sin;
            let yt = -x * sin + y * cos;
            let env = norm
                * (T::lit(-0.5)
                    * (xt * xt / (spec.sigma_x * spec.sigma_x) + yt * yt / (spec.sigma_y * spec.sigma_y)))
                    .exp();
            let (s, co) = (two_pi * spec.w * xt).sin_cos();
            re.push(env * co);
            im.push(env * s);
        }
    }
    (re, im)
}

/// Gaussian frequency response centered on `(W, 0)` in the filter's rotated frame.
pub fn frequency_response<T: Scalar>(spec: &GaborFilterSpec<T>, u: T, v: T) -> T {
    let (sin, cos) = spec.theta.sin_cos();
    let ur = u * cos + v * sin;
    let vr = -u * sin + v * cos;
    let four_pi2 = T::lit(4.0 * PI * PI);
    let du = ur - spec.w;
    (T::lit(-0.5) * (four_pi2 * spec.sigma_x * spec.sigma_x * du * du + four_pi2 * spec.sigma_y * spec.sigma_y * vr * vr))
        .exp()
}

/// `N` filters, the first half pinned to the low W band and the second half to the high band.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T> {
    pub ranges: ValidRanges<T>,
    pub kernel_size: usize,
    /// `[N×4]`; raw values when constrained, parameter values otherwise.
    pub raw: Tensor<T>,
    pub constrained: bool,
}

impl<T: Scalar> FilterBank<T> {
    /// Raw values drawn uniformly from `[-1, 1]`.
    pub fn new<R: Rng + ?Sized>(region_size: usize, n_filters: usize, rng: &mut R) -> Result<Self> {
        if n_filters == 0 || n_filters % 2 != 0 {
            return Err(Error::FilterCount(n_filters));
        }
        let ranges = valid_ranges(region_size)?;
        let data = (0..n_filters * 4).map(|_| T::lit(rng.gen_range(-1.0..=1.0))).collect();
        Ok(Self {
            ranges,
            kernel_size: kernel_size(region_size),
            raw: Tensor::new(vec![n_filters, 4], data)?,
            constrained: true,
        })
    }

    /// Same starting filters, but the stored values are used directly with no squashing.
    pub fn into_unconstrained(self) -> Self {
        if !self.constrained {
            return self;
        }
        let values: Vec<T> = self.specs().iter().flat_map(|s| [s.sigma_x, s.sigma_y, s.theta, s.w]).collect();
        let n = self.len();
        Self { raw: Tensor::new(vec![n, 4], values).expect("same shape"), constrained: false, ..self }
    }

    pub fn len(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn band(&self, n: usize) -> Band {
        if n < self.len() / 2 {
            Band::Low
        } else {
            Band::High
        }
    }

    pub fn specs(&self) -> Vec<GaborFilterSpec<T>> {
        let r = &self.ranges;
        (0..self.len())
            .map(|n| {
                let raw = &self.raw.data()[n * 4..n * 4 + 4];
                let band = self.band(n);
                let (sigma_x, sigma_y, theta, w) = if self.constrained {
                    let (wl, wh) = r.w_band(band);
                    let w = wl + (wh - wl) * sigmoid(raw[FREQ]);
                    let lo = r.sigma_x_lower(w);
                    let sx = lo + (r.sigma_x_upper - lo) * sigmoid(raw[SIGMA_X]);
                    let sy = r.sigma_y.0 + (r.sigma_y.1 - r.sigma_y.0) * sigmoid(raw[SIGMA_Y]);
                    let th = r.theta.0 + (r.theta.1 - r.theta.0) * sigmoid(raw[THETA]);
                    (sx, sy, th, w)
                } else {
                    (raw[SIGMA_X], raw[SIGMA_Y], raw[THETA], raw[FREQ])
                };
                GaborFilterSpec { sigma_x, sigma_y, theta, w, band, kernel_size: self.kernel_size }
            })
            .collect()
    }

    /// Records the parameter mapping and kernel synthesis for `raw` (a `[N×4]` variable).
    pub fn on_tape(&self, tape: &mut Tape<T>, raw: Var) -> Result<BankVars> {
        let n = self.len();
        let k = self.kernel_size;
        let c = (k / 2) as isize;
        let xs: Vec<T> = (0..k * k).map(|p| T::lit((p % k) as isize as f64 - c as f64)).collect();
        let ys: Vec<T> = (0..k * k).map(|p| T::lit((p / k) as isize as f64 - c as f64)).collect();
        let xs = tape.constant(Tensor::from_vec(xs));
        let ys = tape.constant(Tensor::from_vec(ys));
        let r = &self.ranges;

        let mut rows = Vec::with_capacity(n);
        let mut re_planes = Vec::with_capacity(n);
        let mut im_planes = Vec::with_capacity(n);
        for f in 0..n {
            let pick = |tape: &mut Tape<T>, col: usize| tape.index(raw, f * 4 + col);
            let (rx, ry, rt, rw) = (pick(tape, SIGMA_X)?, pick(tape, SIGMA_Y)?, pick(tape, THETA)?, pick(tape, FREQ)?);
            let (sx, sy, th, w) = if self.constrained {
                let (wl, wh) = r.w_band(self.band(f));
                let (wl, wh) = (tape.scalar(wl), tape.scalar(wh));
                let w = constrain_on_tape(tape, rw, wl, wh)?;
                let one_minus = tape.scale(w, T::lit(-2.0))?;
                let one_minus = tape.add_scalar(one_minus, T::one())?;
                let denom = tape.scale(one_minus, T::lit(2.0 * PI))?;
                let five = tape.scalar(T::lit(5.0));
                let sx_lo = tape.div(five, denom)?;
                let sx_hi = tape.scalar(r.sigma_x_upper);
                let sx = constrain_on_tape(tape, rx, sx_lo, sx_hi)?;
                let (yl, yh) = (tape.scalar(r.sigma_y.0), tape.scalar(r.sigma_y.1));
                let sy = constrain_on_tape(tape, ry, yl, yh)?;
                let (tl, th) = (tape.scalar(r.theta.0), tape.scalar(r.theta.1));
                let th = constrain_on_tape(tape, rt, tl, th)?;
                (sx, sy, th, w)
            } else {
                (rx, ry, rt, rw)
            };
            rows.push(tape.stack(&[sx, sy, th, w])?);

            let (cos, sin) = (tape.cos(th)?, tape.sin(th)?);
            let a = tape.mul(xs, cos)?;
            let b = tape.mul(ys, sin)?;
            let xt = tape.add(a, b)?;
            let a = tape.mul(ys, cos)?;
            let b = tape.mul(xs, sin)?;
            let yt = tape.sub(a, b)?;
            let (xt2, yt2) = (tape.square(xt)?, tape.square(yt)?);
            let (sx2, sy2) = (tape.square(sx)?, tape.square(sy)?);
            let qa = tape.div(xt2, sx2)?;
            let qb = tape.div(yt2, sy2)?;
            let q = tape.add(qa, qb)?;
            let q = tape.scale(q, T::lit(-0.5))?;
            let gauss = tape.exp(q)?;
            let area = tape.mul(sx, sy)?;
            let area = tape.scale(area, T::lit(2.0 * PI))?;
            let env = tape.div(gauss, area)?;
            let phase = tape.mul(xt, w)?;
            let phase = tape.scale(phase, T::lit(2.0 * PI))?;
            let (pc, ps) = (tape.cos(phase)?, tape.sin(phase)?);
            re_planes.push(tape.mul(env, pc)?);
            im_planes.push(tape.mul(env, ps)?);
        }
        let params = tape.concat(&rows)?;
        let params = tape.reshape(params, &[n, 4])?;
        re_planes.extend(im_planes);
        let kernel = tape.concat(&re_planes)?;
        let kernel = tape.reshape(kernel, &[2 * n, 1, k, k])?;
        Ok(BankVars { params, kernel, n_filters: n })
    }
}

/// Tape handles produced by [`FilterBank::on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    /// `[N×4]` parameter values in `(σx, σy, θ, W)` order.
    pub params: Var,
    /// `[2N×1×k×k]`: all real planes, then all imaginary planes.
    pub kernel: Var,
    pub n_filters: usize,
}

/// Same-size filtering of a `[1×S×S]` region; returns `[N×S×S]` intensities
/// `sqrt(re² + im² + ε)`.
pub fn apply_bank<T: Scalar>(tape: &mut Tape<T>, bank: &BankVars, region: Var, region_size: usize) -> Result<Var> {
    let numel = tape.value(region).numel();
    if tape.shape(region) != [1, region_size, region_size] {
        return Err(Error::RegionSizeMismatch { expected: region_size, got: numel });
    }
    let k = tape.shape(bank.kernel)[2];
    let resp = tape.conv2d(region, bank.kernel, k / 2, 1)?;
    let n = bank.n_filters;
    let re = tape.slice_axis0(resp, 0, n)?;
    let im = tape.slice_axis0(resp, n, 2 * n)?;
    let re2 = tape.square(re)?;
    let im2 = tape.square(im)?;
    let energy = tape.add(re2, im2)?;
    let energy = tape.add_scalar(energy, T::lit(INTENSITY_EPS))?;
    Ok(tape.sqrt(energy)?)
}

/// One filter's `S×S` response modulus.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap<T> {
    pub size: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> IntensityMap<T> {
    /// Splits an `[N×S×S]` tensor into per-filter maps.
    pub fn split(maps: &Tensor<T>) -> Vec<Self> {
        let s = maps.shape()[1];
        maps.data().chunks(s * s).map(|c| Self { size: s, values: c.to_vec() }).collect()
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::from_usize_lossy(self.values.len())
    }
}

/// Evaluates the bank on a plain `S×S` image without keeping a tape around.
pub fn intensity_maps<T: Scalar>(bank: &FilterBank<T>, region: &[T]) -> Result<Vec<IntensityMap<T>>> {
    let s = bank.ranges.region_size;
    if region.len() != s * s {
        return Err(Error::RegionSizeMismatch { expected: s, got: region.len() });
    }
    let mut tape = Tape::new();
    let raw = tape.constant(bank.raw.clone());
    let vars = bank.on_tape(&mut tape, raw)?;
    let img = tape.constant(Tensor::new(vec![1, s, s], region.to_vec())?);
    let maps = apply_bank(&mut tape, &vars, img, s)?;
    Ok(IntensityMap::split(tape.value(maps)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn spec(sx: f64, sy: f64, th: f64, w: f64, k: usize) -> GaborFilterSpec<f64> {
        GaborFilterSpec { sigma_x: sx, sigma_y: sy, theta: th, w, band: Band::Low, kernel_size: k }
    }

    #[test]
    fn ranges_for_112() {
        let r = valid_ranges::<f64>(112).unwrap();
        assert!((r.w_full.1 - 0.482_237_171_53).abs() < 1e-9);
        assert!((r.sigma_y.0 - 0.795_775).abs() < 1e-6);
        assert_eq!(r.sigma_y.1, 22.4);
        assert_eq!(r.theta, (0.0, PI));
        assert_eq!(r.w_low.1, r.w_high.0);
        assert!(matches!(valid_ranges::<f64>(15), Err(Error::RegionTooSmall(15))));
    }

    #[test]
    fn sigma_x_lower_meets_upper_at_w_max() {
        let r = valid_ranges::<f64>(32).unwrap();
        assert!((r.sigma_x_lower(r.w_full.1) - r.sigma_x_upper).abs() < 1e-12);
        assert!((r.sigma_x_lower(0.0) - 5.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn constrain_examples() {
        assert!((constrain(0.0f64, 0.0, PI).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((constrain(3f64.ln(), 0.0, 1.0).unwrap() - 0.75).abs() < 1e-15);
        assert!((constrain(40.0f64, 2.0, 5.0).unwrap() - 5.0).abs() < 1e-6);
        assert!(matches!(constrain(0.0f64, 1.0, 1.0), Err(Error::InvalidBounds { .. })));
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(kernel_size(16), 9);
        assert_eq!(kernel_size(32), 17);
        assert_eq!(kernel_size(34), 19);
        assert_eq!(kernel_size(112), 33);
    }

    #[test]
    fn energy_fraction() {
        assert!((subtended_energy(2.5) * 100.0 - 98.76).abs() < 0.01);
    }

    #[test]
    fn kernel_origin_and_symmetry() {
        let s = spec(3.0, 2.0, 0.0, 0.2, 9);
        let (re, im) = synthesize(&s);
        let center = 4 * 9 + 4;
        assert!((re[center] - 1.0 / (2.0 * PI * 6.0)).abs() < 1e-15);
        assert_eq!(im[center], 0.0);
        for i in 0..9 {
            for j in 0..9 {
                assert!((re[i * 9 + j] - re[(8 - i) * 9 + j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn frequency_response_examples() {
        let s = spec(3.0, 2.0, 0.0, 0.2, 9);
        assert_eq!(frequency_response(&s, 0.2, 0.0), 1.0);
        assert!(frequency_response(&s, 0.2, 1e3) < 1e-300);
        let du = 2.5 / (2.0 * PI * 3.0);
        let expect = (-0.5f64 * 2.5 * 2.5).exp();
        assert!((frequency_response(&s, 0.2 + du, 0.0) - expect).abs() < 1e-12);
        let rotated = spec(3.0, 2.0, PI / 3.0, 0.2, 9);
        let (u, v) = (0.2 * (PI / 3.0).cos(), 0.2 * (PI / 3.0).sin());
        assert!((frequency_response(&rotated, u, v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_synthesis_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = FilterBank::<f64>::new(16, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let raw = tape.constant(bank.raw.clone());
        let vars = bank.on_tape(&mut tape, raw).unwrap();
        let kernel = tape.value(vars.kernel).data().to_vec();
        let k2 = bank.kernel_size * bank.kernel_size;
        for (n, s) in bank.specs().iter().enumerate() {
            let (re, im) = synthesize(s);
            for p in 0..k2 {
                assert!((kernel[n * k2 + p] - re[p]).abs() < 1e-14);
                assert!((kernel[(4 + n) * k2 + p] - im[p]).abs() < 1e-14);
            }
            let row = &tape.value(vars.params).data()[n * 4..n * 4 + 4];
            assert_eq!(row, &[s.sigma_x, s.sigma_y, s.theta, s.w]);
        }
    }

    #[test]
    fn bands_split_evenly_and_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = FilterBank::<f64>::new(32, 8, &mut rng).unwrap();
        let specs = bank.specs();
        assert_eq!(specs.iter().filter(|s| s.band == Band::Low).count(), 4);
        for s in &specs {
            let (lo, hi) = bank.ranges.w_band(s.band);
            assert!(s.w > lo && s.w < hi);
            assert!(s.sigma_x > bank.ranges.sigma_x_lower(s.w) && s.sigma_x < bank.ranges.sigma_x_upper);
        }
        assert!(matches!(FilterBank::<f64>::new(32, 3, &mut rng), Err(Error::FilterCount(3))));
    }

    #[test]
    fn unconstrained_bank_starts_at_the_same_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = FilterBank::<f64>::new(16, 2, &mut rng).unwrap();
        let free = bank.clone().into_unconstrained();
        assert!(!free.constrained);
        assert_eq!(bank.specs(), free.specs());
    }

    #[test]
    fn zero_image_gives_floor_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = FilterBank::<f64>::new(16, 2, &mut rng).unwrap();
        for map in intensity_maps(&bank, &[0.0; 256]).unwrap() {
            assert!(map.values.iter().all(|&v| (v - 1e-6).abs() < 1e-18));
        }
        assert!(matches!(intensity_maps(&bank, &[0.0; 255]), Err(Error::RegionSizeMismatch { .. })));
    }
}
