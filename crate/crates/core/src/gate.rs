//! Region proposals, FPN fusion, RoI pooling and the hard selection gate.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::{sigmoid, Scalar};

/// Box in fractional image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionProposal {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RegionProposal {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1;
        if !ok {
            return Err(Error::DegenerateBox([x0, y0, x1, y1]));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn whole() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// `image_id k x0 y0 x1 y1`
    pub fn export_line(&self, image_id: &str, k: usize) -> String {
        format!("{image_id} {k} {} {} {} {}", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Sliding windows of side `scale` and stride `scale/2` for every scale, scale-major then row-major.
pub fn make_proposals(scales: &[f64]) -> Result<Vec<RegionProposal>> {
    let mut out = Vec::new();
    for &s in scales {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Config(format!("proposal scale {s} outside (0, 1]")));
        }
        let stride = s / 2.0;
        let steps = ((1.0 - s) / stride + 1e-9).floor() as usize + 1;
        for r in 0..steps {
            for c in 0..steps {
                let (x0, y0) = (c as f64 * stride, r as f64 * stride);
                out.push(RegionProposal::new(x0, y0, (x0 + s).min(1.0), (y0 + s).min(1.0))?);
            }
        }
    }
    Ok(out)
}

pub const DEFAULT_SCALES: [f64; 2] = [0.5, 0.25];

/// Averaging map from an `h×w` feature grid to one value per proposal: each proposal
/// takes the mean of the cells whose centers lie inside it, or the cell nearest its
/// center when none do.
pub fn roi_pool_map<T: Scalar>(proposals: &[RegionProposal], h: usize, w: usize) -> SparseMap<T> {
    let mut entries = Vec::new();
    for (k, r) in proposals.iter().enumerate() {
        let mut cells = Vec::new();
        for i in 0..h {
            let cy = (i as f64 + 0.5) / h as f64;
            if cy < r.y0 || cy > r.y1 {
                continue;
            }
            for j in 0..w {
                let cx = (j as f64 + 0.5) / w as f64;
                if cx >= r.x0 && cx <= r.x1 {
                    cells.push(i * w + j);
                }
            }
        }
        if cells.is_empty() {
            let i = ((0.5 * (r.y0 + r.y1) * h as f64) as usize).min(h - 1);
            let j = ((0.5 * (r.x0 + r.x1) * w as f64) as usize).min(w - 1);
            cells.push(i * w + j);
        }
        let weight = T::one() / T::from_usize_lossy(cells.len());
        entries.extend(cells.into_iter().map(|c| (k, c, weight)));
    }
    SparseMap { n_in: h * w, n_out: proposals.len(), entries }
}

/// `[C×h×w]` features to `[K×C]` pooled proposal vectors.
pub fn roi_pool<T: Scalar>(tape: &mut Tape<T>, features: Var, map: &Arc<SparseMap<T>>) -> Result<Var> {
    let pooled = tape.sparse_map(features, map.clone(), &[map.n_out])?;
    Ok(tape.transpose(pooled)?)
}

/// Nearest-neighbour upsampling map from `h×w` to `h·fy × w·fx`.
fn upsample_map<T: Scalar>(h: usize, w: usize, fy: usize, fx: usize) -> SparseMap<T> {
    let (ho, wo) = (h * fy, w * fx);
    let entries = (0..ho * wo).map(|p| (p, (p / wo / fy) * w + (p % wo) / fx, T::one())).collect();
    SparseMap { n_in: h * w, n_out: ho * wo, entries }
}

/// Per-level 1×1 projections to a shared width.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub channels: usize,
    pub proj: Vec<(ParamId, ParamId)>,
}

impl Fpn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_channels: &[usize],
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let proj = in_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let w = store.add_scaled_normal(format!("fpn.{l}.w"), &[channels, c], c, rng);
                let b = store.add_zeros(format!("fpn.{l}.b"), &[channels]);
                (w, b)
            })
            .collect();
        Self { channels, proj }
    }
}

/// Projects every `[Cᵢ×Hᵢ×Wᵢ]` level to the FPN width, upsamples to the finest level and sums.
pub fn fpn_fuse<T: Scalar>(tape: &mut Tape<T>, levels: &[Var], fpn: &Fpn, bound: &Bound) -> Result<Var> {
    if levels.len() < 2 || levels.len() != fpn.proj.len() {
        return Err(Error::Config(format!("fpn expects {} levels, got {}", fpn.proj.len(), levels.len())));
    }
    let dims: Vec<(usize, usize, usize)> = levels
        .iter()
        .map(|&v| match tape.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::FpnAlignment(s.to_vec())),
        })
        .collect::<Result<_>>()?;
    let (hf, wf) = dims.iter().map(|&(_, h, w)| (h, w)).max().expect("non-empty");
    let aligned = dims.iter().all(|&(_, h, w)| {
        hf % h == 0 && wf % w == 0 && (hf / h).is_power_of_two() && (wf / w).is_power_of_two()
    });
    if !aligned {
        return Err(Error::FpnAlignment(dims.iter().flat_map(|&(_, h, w)| [h, w]).collect()));
    }
    let mut acc: Option<Var> = None;
    for (&v, (&(c, h, w), &(pw, pb))) in levels.iter().zip(dims.iter().zip(&fpn.proj)) {
        let flat = tape.reshape(v, &[c, h * w])?;
        let y = tape.matmul(bound.var(pw), flat)?;
        let y = tape.add_along(y, bound.var(pb), 0)?;
        let y = if (h, w) == (hf, wf) {
            y
        } else {
            let map = Arc::new(upsample_map::<T>(h, w, hf / h, wf / w));
            tape.sparse_map(y, map, &[hf * wf])?
        };
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    let fused = acc.expect("at least two levels");
    Ok(tape.reshape(fused, &[fpn.channels, hf, wf])?)
}

/// Affine scorer from pooled features to one score per proposal.
#[derive(Clone, Copy, Debug)]
pub struct Scorer {
    pub w: ParamId,
    pub b: ParamId,
}

impl Scorer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, channels: usize, bias: f64, rng: &mut R) -> Self {
        let w = store.add_scaled_normal("gate.score.w", &[channels, 1], channels, rng);
        let b = store.add("gate.score.b", Tensor::scalar(T::lit(bias)));
        Self { w, b }
    }

    /// `[K×C]` pooled features to `[K]` scores.
    pub fn score<T: Scalar>(&self, tape: &mut Tape<T>, pooled: Var, bound: &Bound) -> Result<Var> {
        let k = tape.shape(pooled)[0];
        let s = tape.affine(pooled, bound.var(self.w), bound.var(self.b))?;
        Ok(tape.reshape(s, &[k])?)
    }
}

/// `max(0, min(1, 1.2·sigmoid(x) - 0.1))`
pub fn saturating_sigmoid<T: Scalar>(x: T) -> T {
    (T::lit(1.2) * sigmoid(x) - T::lit(0.1)).max(T::zero()).min(T::one())
}

pub fn saturating_sigmoid_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.sigmoid(x)?;
    let s = tape.scale(s, T::lit(1.2))?;
    let s = tape.add_scalar(s, T::lit(-0.1))?;
    Ok(tape.clamp(s, T::zero(), T::one())?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision<T> {
    pub s: T,
    pub s_hat: T,
    pub c: T,
    pub d: bool,
}

/// How the gate turns scores into decisions.
#[derive(Clone, Debug, PartialEq)]
pub enum GateMode<T> {
    /// `ŝ = s + ε` with the given noise; forward `d = 1(ŝ > 0)`, backward through `c`.
    Train { noise: Vec<T> },
    /// `d = 1(s > 0)`, no noise.
    Infer,
    /// Forward `c(ŝ) + offset`, with the decisions and offsets `d - c` captured at a
    /// reference point. Smooth in the scores, so finite differences see the surrogate path.
    Frozen { noise: Vec<T>, decisions: Vec<bool>, offsets: Vec<T> },
}

impl<T: Scalar> GateMode<T> {
    pub fn sample_train<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        GateMode::Train { noise: (0..k).map(|_| T::lit(StandardNormal.sample(rng))).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct GateOutput<T> {
    /// `[K]` gate values used in the forward pass.
    pub d: Var,
    pub decisions: Vec<GateDecision<T>>,
}

impl<T: Scalar> GateOutput<T> {
    pub fn selected(&self) -> Vec<usize> {
        self.decisions.iter().enumerate().filter(|(_, g)| g.d).map(|(k, _)| k).collect()
    }
}

pub fn gate<T: Scalar>(tape: &mut Tape<T>, scores: Var, mode: &GateMode<T>) -> Result<GateOutput<T>> {
    let k = tape.value(scores).numel();
    let s_vals = tape.value(scores).data().to_vec();
    let check_len = |n: usize| {
        if n != k {
            Err(Error::Config(format!("gate noise has {n} entries for {k} proposals")))
        } else {
            Ok(())
        }
    };
    match mode {
        GateMode::Infer => {
            let decisions: Vec<GateDecision<T>> = s_vals
                .iter()
                .map(|&s| GateDecision { s, s_hat: s, c: saturating_sigmoid(s), d: s > T::zero() })
                .collect();
            let hard = Tensor::new(vec![k], decisions.iter().map(|g| if g.d { T::one() } else { T::zero() }).collect())?;
            let d = tape.constant(hard);
            Ok(GateOutput { d, decisions })
        }
        GateMode::Train { noise } => {
            check_len(noise.len())?;
            let eps = tape.constant(Tensor::new(vec![k], noise.clone())?);
            let s_hat = tape.add(scores, eps)?;
            let c = saturating_sigmoid_on_tape(tape, s_hat)?;
            let decisions: Vec<GateDecision<T>> = s_vals
                .iter()
                .zip(noise)
                .zip(tape.value(c).data())
                .map(|((&s, &e), &c)| GateDecision { s, s_hat: s + e, c, d: s + e > T::zero() })
                .collect();
            let hard = Tensor::new(vec![k], decisions.iter().map(|g| if g.d { T::one() } else { T::zero() }).collect())?;
            let d = tape.straight_through(c, hard)?;
            Ok(GateOutput { d, decisions })
        }
        GateMode::Frozen { noise, decisions, offsets } => {
            check_len(noise.len())?;
            check_len(offsets.len())?;
            check_len(decisions.len())?;
            let eps = tape.constant(Tensor::new(vec![k], noise.clone())?);
            let s_hat = tape.add(scores, eps)?;
            let c = saturating_sigmoid_on_tape(tape, s_hat)?;
            let off = tape.constant(Tensor::new(vec![k], offsets.clone())?);
            let d = tape.add(c, off)?;
            let decisions = s_vals
                .iter()
                .zip(noise)
                .zip(tape.value(c).data())
                .zip(decisions)
                .map(|(((&s, &e), &c), &d)| GateDecision { s, s_hat: s + e, c, d })
                .collect();
            Ok(GateOutput { d, decisions })
        }
    }
}

/// Freezes a training-mode gate at its current point (see [`GateMode::Frozen`]).
pub fn freeze<T: Scalar>(noise: Vec<T>, decisions: &[GateDecision<T>]) -> GateMode<T> {
    let offsets = decisions.iter().map(|g| if g.d { T::one() - g.c } else { -g.c }).collect();
    GateMode::Frozen { noise, decisions: decisions.iter().map(|g| g.d).collect(), offsets }
}
