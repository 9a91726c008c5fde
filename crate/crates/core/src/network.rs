//! Two-branch model: a small CNN semantic branch plus gated Gabor texture features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::data::{read_tensor, write_tensor, Sample};
use crate::error::{Error, Result};
use crate::gabor::{apply_bank, FilterBank, IntensityMap};
use crate::gate::{fpn_fuse, gate, make_proposals, roi_pool, roi_pool_map, Fpn, GateMode, GateOutput, RegionProposal, Scorer};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::stats::{fcm, lho, position_table, Fcm, Lho, QuantMode};

pub const METRICS_HEADER: &str = "step,loss,ce,reg,acc,mean_regions";
pub const CHECKPOINT_HEADER: &str = "header.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Side of a zoomed region (`S`).
    pub region_size: usize,
    pub n_filters: usize,
    pub levels: usize,
    /// Feature width `C` shared by the semantic head, LHO and FCM.
    pub channels: usize,
    pub heads: usize,
    pub fpn_channels: usize,
    pub semantic_widths: [usize; 4],
    pub lambda: f64,
    /// Steps over which the sparsity weight ramps linearly from 0 to `lambda`; 0 applies it at once.
    pub lambda_warmup: usize,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay: f64,
    pub quant_mode: QuantMode,
    /// Squash Gabor parameters into their valid ranges; `false` uses them raw.
    pub constrained: bool,
    /// Texture branch and region gate; `false` leaves the semantic branch alone.
    pub texture: bool,
    pub proposal_scales: Vec<f64>,
    /// Mean initial region score once the scorer is standardized; negative starts the gate mostly closed.
    pub gate_bias: f64,
    /// Training samples used for the data-dependent feature standardization; 0 disables it.
    pub init_samples: usize,
    /// Global gradient-norm ceiling applied before each update; 0 disables it.
    pub grad_clip: f64,
    pub threads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            region_size: 32,
            n_filters: 16,
            levels: 8,
            channels: 32,
            heads: 4,
            fpn_channels: 32,
            semantic_widths: [8, 16, 32, 32],
            lambda: 0.2,
            lambda_warmup: 40,
            lr: 1e-3,
            momentum: 0.9,
            steps: 200,
            batch: 8,
            seed: 0,
            lr_decay_steps: vec![120],
            lr_decay: 0.1,
            quant_mode: QuantMode::Verbatim,
            constrained: true,
            texture: true,
            proposal_scales: crate::gate::DEFAULT_SCALES.to_vec(),
            gate_bias: -1.5,
            init_samples: 64,
            grad_clip: 5.0,
            threads: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if self.n_filters == 0 || self.n_filters % 2 != 0 {
            return Err(Error::FilterCount(self.n_filters));
        }
        if self.levels < 2 {
            return Err(Error::LevelCount(self.levels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::HeadSplit { channels: self.channels, heads: self.heads });
        }
        if self.channels % 4 != 0 {
            return bad(format!("channels {} must be a multiple of 4", self.channels));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip {} must be non-negative", self.grad_clip));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.batch == 0 || self.threads == 0 || self.semantic_widths.contains(&0) || self.fpn_channels == 0 {
            return bad("batch, threads, widths and fpn_channels must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} must be positive and momentum {} in [0, 1)", self.lr, self.momentum));
        }
        crate::gabor::valid_ranges::<f64>(self.region_size)?;
        Ok(())
    }

    /// Sparsity weight in effect at `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if step >= self.lambda_warmup {
            self.lambda
        } else {
            self.lambda * step as f64 / self.lambda_warmup as f64
        }
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.lr_decay_steps.iter().filter(|&&s| step >= s).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

/// Bilinear resampling of box `r` of an `h×w` image to `out×out`, pixel-center aligned.
pub fn zoom_map<T: Scalar>(h: usize, w: usize, r: &RegionProposal, out: usize) -> Result<SparseMap<T>> {
    let (bw, bh) = ((r.x1 - r.x0) * w as f64, (r.y1 - r.y0) * h as f64);
    if !(bw > 0.0 && bh > 0.0) || out == 0 {
        return Err(Error::DegenerateBox(r.as_array()));
    }
    let axis = |start: f64, len: f64, extent: usize, o: usize| {
        let src = (start * extent as f64 + (o as f64 + 0.5) * len / out as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, src - lo as f64)
    };
    let mut entries = Vec::with_capacity(out * out * 4);
    for i in 0..out {
        let (y0, y1, ty) = axis(r.y0, bh, h, i);
        for j in 0..out {
            let (x0, x1, tx) = axis(r.x0, bw, w, j);
            let o = i * out + j;
            for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                    if wy * wx != 0.0 {
                        entries.push((o, y * w + x, T::lit(wy * wx)));
                    }
                }
            }
        }
    }
    Ok(SparseMap { n_in: h * w, n_out: out * out, entries })
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
}

/// Four `3×3 conv → bias → ReLU → 2×2 average pool` blocks and an affine head.
#[derive(Clone, Debug)]
pub struct SemanticBranch {
    blocks: Vec<ConvBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl SemanticBranch {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, widths: [usize; 4], channels: usize, rng: &mut R) -> Self {
        let mut c_in = 1;
        let mut blocks = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            // He-style scale for ReLU: std sqrt(2 / fan_in)
            let w = store.add_scaled_normal(format!("semantic.{i}.w"), &[c, c_in, 3, 3], (9 * c_in).div_ceil(2), rng);
            let b = store.add_zeros(format!("semantic.{i}.b"), &[c]);
            blocks.push(ConvBlock { w, b });
            c_in = c;
        }
        let head_w = store.add_scaled_normal("semantic.head.w", &[c_in, channels], c_in, rng);
        let head_b = store.add_zeros("semantic.head.b", &[channels]);
        Self { blocks, head_w, head_b }
    }

    /// Pre-activation `[C×H×W]` of block `upto`.
    fn pre_activation<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: Var, upto: usize) -> Result<Var> {
        let mut x = image;
        for (i, blk) in self.blocks.iter().enumerate() {
            let y = tape.conv2d(x, bound.var(blk.w), 1, 1)?;
            let y = tape.add_along(y, bound.var(blk.b), 0)?;
            if i == upto {
                return Ok(y);
            }
            let y = tape.relu(y)?;
            x = tape.avg_pool2(y)?;
        }
        Err(Error::Config(format!("no semantic block {upto}")))
    }

    /// `[1×H×W]` image to the `[1×C]` semantic feature and the outputs of blocks 2–4.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<(Var, Vec<Var>)> {
        let mut x = image;
        let mut inter = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let y = tape.conv2d(x, bound.var(blk.w), 1, 1)?;
            let y = tape.add_along(y, bound.var(blk.b), 0)?;
            let y = tape.relu(y)?;
            x = tape.avg_pool2(y)?;
            if i >= 1 {
                inter.push(x);
            }
        }
        let (c, h, w) = match tape.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::Config(format!("unexpected semantic output shape {s:?}"))),
        };
        let flat = tape.reshape(x, &[c, h * w])?;
        let pooled = tape.sum_axis(flat, 1)?;
        let pooled = tape.scale(pooled, T::one() / T::from_usize_lossy(h * w))?;
        let pooled = tape.reshape(pooled, &[1, c])?;
        let m = tape.affine(pooled, bound.var(self.head_w), bound.var(self.head_b))?;
        Ok((m, inter))
    }
}

/// Numeric health of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Largest `|ΣC - 1|` over non-degenerate maps.
    pub max_count_err: f64,
    /// Largest `|row sum - 1|` over all attention matrices.
    pub max_attention_err: f64,
    pub maps: usize,
    pub degenerate_maps: usize,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.max_count_err = self.max_count_err.max(other.max_count_err);
        self.max_attention_err = self.max_attention_err.max(other.max_attention_err);
        self.maps += other.maps;
        self.degenerate_maps += other.degenerate_maps;
    }
}

pub struct ForwardOutput<T> {
    /// `[classes]`
    pub logits: Var,
    pub gate: Option<GateOutput<T>>,
    /// `(proposal index, [C] texture feature)` for every selected region.
    pub textures: Vec<(usize, Var)>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: Vec<T>,
    pub selected: Vec<usize>,
    pub decisions: Vec<bool>,
}

impl<T: Scalar> Prediction<T> {
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn probabilities(&self) -> Vec<T> {
        let mx = self.logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = self.logits.iter().map(|&v| (v - mx).exp()).collect();
        let total: T = e.iter().copied().sum();
        e.into_iter().map(|v| v / total).collect()
    }
}

pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// `Σ_k d^k`, or a zero constant without a gate.
    pub regions: Var,
}

/// `cross_entropy(logits, label) + λ·Σ_k d^k`
pub fn loss<T: Scalar>(tape: &mut Tape<T>, out: &ForwardOutput<T>, label: usize, lambda: T) -> Result<LossParts> {
    let ce = tape.cross_entropy(out.logits, label)?;
    let regions = match &out.gate {
        Some(g) => tape.sum(g.d)?,
        None => tape.scalar(T::zero()),
    };
    let reg = tape.scale(regions, lambda)?;
    let total = tape.add(ce, reg)?;
    Ok(LossParts { total, ce, regions })
}

/// `v ← μ·v + g; p ← p - lr·v`
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = grads.iter().flatten().map(|&g| g * g).sum::<T>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Momentum SGD over a whole [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: T) -> Self {
        Self { momentum, velocity: store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: T) {
        for (id, (g, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads.iter().zip(&mut self.velocity)) {
            sgd_step(store.get_mut(id).data_mut(), g, v, lr, self.momentum);
        }
    }
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub classes: usize,
    pub store: ParamStore<T>,
    semantic: SemanticBranch,
    fpn: Fpn,
    scorer: Scorer,
    /// Ranges and layout; the live raw values sit in `store` under `bank_raw`.
    bank: FilterBank<T>,
    bank_raw: ParamId,
    lho: Lho,
    fcm: Fcm,
    cls_w: ParamId,
    cls_b: ParamId,
    pe: Tensor<T>,
    proposals: Vec<RegionProposal>,
    zoom: Vec<Arc<SparseMap<T>>>,
    roi: Arc<SparseMap<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let semantic = SemanticBranch::new(&mut store, config.semantic_widths, c, &mut rng);
        let w = config.semantic_widths;
        let fpn = Fpn::new(&mut store, &[w[1], w[2], w[3]], config.fpn_channels, &mut rng);
        let scorer = Scorer::new(&mut store, config.fpn_channels, config.gate_bias, &mut rng);
        let mut bank = FilterBank::new(config.region_size, config.n_filters, &mut rng)?;
        if !config.constrained {
            bank = bank.into_unconstrained();
        }
        let bank_raw = store.add("gabor.raw", bank.raw.clone());
        let lho = Lho::new(&mut store, config.levels, c, config.heads, config.quant_mode, &mut rng)?;
        let fcm = Fcm::new(&mut store, c, config.heads, &mut rng)?;
        let cls_w = store.add_scaled_normal("classifier.w", &[c, classes], c, &mut rng);
        let cls_b = store.add_zeros("classifier.b", &[classes]);

        let s = config.region_size;
        // Scaled by 1/S² so the position term is a pixel average rather than a pixel sum.
        let pe_scale = T::one() / T::from_usize_lossy(s * s);
        let pe = position_table(s, c)?.map(|v| v * pe_scale);
        let proposals = make_proposals(&config.proposal_scales)?;
        let zoom = proposals
            .iter()
            .map(|r| zoom_map(config.image_size, config.image_size, r, s).map(Arc::new))
            .collect::<Result<_>>()?;
        let fpn_side = config.image_size / 4;
        let roi = Arc::new(roi_pool_map(&proposals, fpn_side, fpn_side));
        Ok(Self {
            config,
            classes,
            store,
            semantic,
            fpn,
            scorer,
            bank,
            bank_raw,
            lho,
            fcm,
            cls_w,
            cls_b,
            pe,
            proposals,
            zoom,
            roi,
        })
    }

    pub fn proposals(&self) -> &[RegionProposal] {
        &self.proposals
    }

    /// Filter bank with the current trained values.
    pub fn bank(&self) -> FilterBank<T> {
        FilterBank { raw: self.store.get(self.bank_raw).clone(), ..self.bank.clone() }
    }

    pub fn bank_param(&self) -> ParamId {
        self.bank_raw
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: &[T], mode: &GateMode<T>) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let side = cfg.image_size;
        if image.len() != side * side {
            return Err(Error::RegionSizeMismatch { expected: side, got: image.len() });
        }
        let img = tape.constant(Tensor::new(vec![1, side, side], image.to_vec())?);
        let (mut fused, inter) = self.semantic.forward(tape, bound, img)?;
        let mut diagnostics = Diagnostics::default();
        let mut textures = Vec::new();
        let mut gate_out = None;
        if cfg.texture {
            let features = fpn_fuse(tape, &inter, &self.fpn, bound)?;
            let pooled = roi_pool(tape, features, &self.roi)?;
            let scores = self.scorer.score(tape, pooled, bound)?;
            let g = gate(tape, scores, mode)?;
            let selected = g.selected();
            if !selected.is_empty() {
                let s = cfg.region_size;
                let pe = tape.constant(self.pe.clone());
                let bank = self.bank.on_tape(tape, bound.var(self.bank_raw))?;
                for &k in &selected {
                    let region = tape.sparse_map(img, self.zoom[k].clone(), &[s, s])?;
                    let maps = apply_bank(tape, &bank, region, s)?;
                    let mut stats = Vec::with_capacity(cfg.n_filters);
                    for n in 0..cfg.n_filters {
                        let map = tape.slice_axis0(maps, n, n + 1)?;
                        let o = lho(tape, map, pe, &self.lho, bound)?;
                        record(tape, &o.attention, Some((o.counts, o.degenerate)), &mut diagnostics);
                        stats.push(o.stat);
                    }
                    let t = fcm(tape, &stats, bank.params, &self.fcm, bound)?;
                    let dk = tape.index(g.d, k)?;
                    let weighted = tape.mul(t, dk)?;
                    let weighted = tape.reshape(weighted, &[1, cfg.channels])?;
                    fused = tape.add(fused, weighted)?;
                    textures.push((k, t));
                }
            }
            gate_out = Some(g);
        }
        let logits = tape.affine(fused, bound.var(self.cls_w), bound.var(self.cls_b))?;
        let logits = tape.reshape(logits, &[self.classes])?;
        Ok(ForwardOutput { logits, gate: gate_out, textures, diagnostics })
    }

    /// Data-dependent initialization over `samples`, run once before training.
    ///
    /// Rescales, per output channel, the semantic head, the FPN projections (as seen
    /// through RoI pooling), the LHO level embedding and the FCM output projection to zero
    /// mean and unit variance; then shifts the scorer so proposal scores have unit variance
    /// and mean `gate_bias`. Texture statistics are taken on proposal `i mod K` of sample `i`.
    pub fn standardize_features(&mut self, samples: &[Sample]) -> Result<()> {
        if samples.is_empty() {
            return Ok(());
        }
        let k_total = self.proposals.len();
        let side = self.config.image_size;
        let images: Vec<Vec<T>> = samples.iter().map(|s| s.image.iter().map(|&v| T::lit(v)).collect()).collect();
        for i in 0..self.semantic.blocks.len() {
            let mut rows = Vec::new();
            for image in &images {
                let mut tape = Tape::new();
                let bound = self.store.bind_frozen(&mut tape);
                let img = tape.constant(Tensor::new(vec![1, side, side], image.clone())?);
                let y = self.semantic.pre_activation(&mut tape, &bound, img, i)?;
                let v = tape.value(y);
                let (c, hw) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
                rows.extend((0..hw).map(|p| (0..c).map(|q| v.data()[q * hw + p]).collect::<Vec<T>>()));
            }
            let blk = self.semantic.blocks[i];
            for (c, (mean, inv)) in column_moments(&rows).into_iter().enumerate() {
                let w = self.store.get_mut(blk.w);
                let per = w.numel() / w.shape()[0];
                w.data_mut()[c * per..(c + 1) * per].iter_mut().for_each(|v| *v *= inv);
                let bv = &mut self.store.get_mut(blk.b).data_mut()[c];
                *bv = (*bv - mean) * inv;
            }
        }
        let mut sem = Vec::new();
        let mut pooled = Vec::new();
        for image in &images {
            let mut tape = Tape::new();
            let bound = self.store.bind_frozen(&mut tape);
            let img = tape.constant(Tensor::new(vec![1, side, side], image.clone())?);
            let (m, inter) = self.semantic.forward(&mut tape, &bound, img)?;
            sem.push(tape.value(m).data().to_vec());
            if self.config.texture {
                let features = fpn_fuse(&mut tape, &inter, &self.fpn, &bound)?;
                let p = roi_pool(&mut tape, features, &self.roi)?;
                pooled.extend(tape.value(p).data().chunks(self.config.fpn_channels).map(<[T]>::to_vec));
            }
        }
        standardize_columns(&mut self.store, self.semantic.head_w, self.semantic.head_b, &sem);
        if !self.config.texture {
            return Ok(());
        }
        for (c, (mean, inv)) in column_moments(&pooled).into_iter().enumerate() {
            for (l, &(w, b)) in self.fpn.proj.iter().enumerate() {
                let cols = self.store.get(w).shape()[1];
                self.store.get_mut(w).data_mut()[c * cols..(c + 1) * cols].iter_mut().for_each(|v| *v *= inv);
                let bv = &mut self.store.get_mut(b).data_mut()[c];
                *bv = if l == 0 { (*bv - mean) * inv } else { *bv * inv };
            }
            pooled.iter_mut().for_each(|r| r[c] = (r[c] - mean) * inv);
        }
        let (sw, sb) = (self.scorer.w, self.scorer.b);
        let (wv, bv) = (self.store.get(sw).data().to_vec(), self.store.get(sb).data()[0]);
        let scores: Vec<Vec<T>> =
            pooled.iter().map(|r| vec![r.iter().zip(&wv).map(|(&x, &w)| x * w).sum::<T>() + bv]).collect();
        standardize_columns(&mut self.store, sw, sb, &scores);
        self.store.get_mut(sb).data_mut()[0] += T::lit(self.config.gate_bias);

        let m = self.config.levels;
        let (pw, pb) = (self.lho.phi_w, self.lho.phi_b);
        let (w, b) = (self.store.get(pw).data().to_vec(), self.store.get(pb).data().to_vec());
        let ch = b.len();
        let mut level_rows = Vec::new();
        for (i, image) in images.iter().enumerate() {
            let (maps, counts) = self.region_maps(image, i % k_total)?;
            for (map, c) in maps.iter().zip(&counts) {
                let lo = map.values.iter().copied().fold(T::infinity(), T::min);
                let hi = map.values.iter().copied().fold(T::neg_infinity(), T::max);
                for j in 0..m {
                    let l = lo + (hi - lo) * T::from_usize_lossy(j + 1) / T::from_usize_lossy(m);
                    level_rows.push((0..ch).map(|q| c[j] * w[q] + l * w[ch + q] + b[q]).collect::<Vec<T>>());
                }
            }
        }
        standardize_columns(&mut self.store, pw, pb, &level_rows);

        let mut tex = Vec::new();
        for (i, image) in images.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = self.store.bind_frozen(&mut tape);
            let k = i % k_total;
            let mode = GateMode::Frozen {
                noise: vec![T::zero(); k_total],
                decisions: (0..k_total).map(|j| j == k).collect(),
                offsets: vec![T::zero(); k_total],
            };
            let out = self.forward(&mut tape, &bound, image, &mode)?;
            tex.extend(out.textures.iter().map(|(_, t)| tape.value(*t).data().to_vec()));
        }
        standardize_columns(&mut self.store, self.fcm.attn.wo, self.fcm.attn.bo, &tex);
        Ok(())
    }
    /// Inference-mode prediction; no gradients are recorded.
    pub fn predict(&self, image: &[T]) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, image, &GateMode::Infer)?;
        let (selected, decisions) = match &out.gate {
            Some(g) => (g.selected(), g.decisions.iter().map(|d| d.d).collect()),
            None => (Vec::new(), Vec::new()),
        };
        Ok(Prediction { logits: tape.value(out.logits).data().to_vec(), selected, decisions })
    }

    /// Intensity maps and counting features of proposal `k` of `image`.
    pub fn region_maps(&self, image: &[T], k: usize) -> Result<(Vec<IntensityMap<T>>, Vec<Vec<T>>)> {
        let zoom = self.zoom.get(k).ok_or_else(|| Error::Config(format!("no proposal {k}")))?;
        let side = self.config.image_size;
        if image.len() != side * side {
            return Err(Error::RegionSizeMismatch { expected: side, got: image.len() });
        }
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let img = tape.constant(Tensor::new(vec![1, side, side], image.to_vec())?);
        let s = self.config.region_size;
        let region = tape.sparse_map(img, zoom.clone(), &[s, s])?;
        let bank = self.bank.on_tape(&mut tape, bound.var(self.bank_raw))?;
        let maps = apply_bank(&mut tape, &bank, region, s)?;
        let pe = tape.constant(self.pe.clone());
        let mut counts = Vec::new();
        for n in 0..self.config.n_filters {
            let map = tape.slice_axis0(maps, n, n + 1)?;
            let o = lho(&mut tape, map, pe, &self.lho, &bound)?;
            counts.push(tape.value(o.counts).data().to_vec());
        }
        Ok((IntensityMap::split(tape.value(maps)), counts))
    }
}

/// Rewrites `y = x·W + b` as `(y - μ)/σ` per output column, with μ and σ taken from `rows`.
fn standardize_columns<T: Scalar>(store: &mut ParamStore<T>, w: ParamId, b: ParamId, rows: &[Vec<T>]) {
    let cols = store.get(b).numel();
    for (c, (mean, inv)) in column_moments(rows).into_iter().enumerate().take(cols) {
        for row in store.get_mut(w).data_mut().chunks_mut(cols) {
            row[c] *= inv;
        }
        let bv = &mut store.get_mut(b).data_mut()[c];
        *bv = (*bv - mean) * inv;
    }
}

/// Per-column mean and inverse standard deviation of `rows`.
///
/// Near-constant columns get an inverse of 1: they are only centered, since rescaling
/// them would amplify noise.
fn column_moments<T: Scalar>(rows: &[Vec<T>]) -> Vec<(T, T)> {
    let n = T::from_usize_lossy(rows.len().max(1));
    let cols = rows.first().map_or(0, Vec::len);
    (0..cols)
        .map(|c| {
            let mean = rows.iter().map(|r| r[c]).sum::<T>() / n;
            let sd = (rows.iter().map(|r| (r[c] - mean) * (r[c] - mean)).sum::<T>() / n).sqrt();
            (mean, if sd > T::lit(1e-2) { T::one() / sd } else { T::one() })
        })
        .collect()
}

fn record<T: Scalar>(tape: &Tape<T>, attention: &[Var], counts: Option<(Var, bool)>, diag: &mut Diagnostics) {
    for &a in attention {
        let v = tape.value(a);
        let cols = v.shape()[1];
        for row in v.data().chunks(cols) {
            let err = (row.iter().copied().sum::<T>() - T::one()).abs().to_f64_lossy();
            diag.max_attention_err = diag.max_attention_err.max(err);
        }
    }
    if let Some((c, degenerate)) = counts {
        diag.maps += 1;
        if degenerate {
            diag.degenerate_maps += 1;
        } else {
            let err = (tape.value(c).data().iter().copied().sum::<T>() - T::one()).abs().to_f64_lossy();
            diag.max_count_err = diag.max_count_err.max(err);
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub reg: f64,
    pub acc: f64,
    pub mean_regions: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
    /// First step whose loss or gradients were not finite; training stops there.
    pub diverged_at: Option<usize>,
    pub diagnostics: Diagnostics,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.history {
            let _ = writeln!(out, "{},{},{},{},{},{}", m.step, m.loss, m.ce, m.reg, m.acc, m.mean_regions);
        }
        out
    }

    /// Population standard deviation of the loss over steps `from..to`.
    pub fn loss_std(&self, from: usize, to: usize) -> Option<f64> {
        let xs: Vec<f64> = self.history.iter().filter(|m| m.step >= from && m.step < to).map(|m| m.loss).collect();
        if xs.is_empty() {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
    }

    /// Mean of `mean_regions` over the last `n` steps.
    pub fn tail_regions(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|m| m.mean_regions).sum::<f64>() / tail.len() as f64
    }
}

struct SampleResult<T> {
    grads: Vec<Vec<T>>,
    loss: f64,
    ce: f64,
    regions: f64,
    correct: bool,
    diagnostics: Diagnostics,
}

fn gate_rng(seed: u64, step: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((2u64 << 56) | ((step as u64) << 24) | i as u64);
    rng
}

fn run_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

impl<T: Scalar> Model<T> {
    fn sample_step(&self, sample: &Sample, step: usize, i: usize) -> Result<SampleResult<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut rng = gate_rng(self.config.seed, step, i);
        let mode = GateMode::sample_train(self.proposals.len(), &mut rng);
        let image: Vec<T> = sample.image.iter().map(|&v| T::lit(v)).collect();
        let out = self.forward(&mut tape, &bound, &image, &mode)?;
        let parts = loss(&mut tape, &out, sample.label, T::lit(self.config.lambda_at(step)))?;
        tape.backward(parts.total)?;
        let logits = tape.value(out.logits).data();
        let pred = Prediction { logits: logits.to_vec(), selected: vec![], decisions: vec![] }.class();
        Ok(SampleResult {
            grads: bound.grads(&tape),
            loss: tape.item(parts.total).to_f64_lossy(),
            ce: tape.item(parts.ce).to_f64_lossy(),
            regions: tape.item(parts.regions).to_f64_lossy(),
            correct: pred == sample.label,
            diagnostics: out.diagnostics,
        })
    }

    /// Mini-batch momentum SGD for `config.steps` steps over `train`.
    ///
    /// Per-sample gradients are summed in batch order, so results do not depend on `threads`.
    pub fn train(&mut self, train: &[Sample]) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if let Some(s) = train.iter().find(|s| s.label >= self.classes) {
            return Err(Error::Config(format!("sample {} has label {} of {}", s.name, s.label, self.classes)));
        }
        let cfg = self.config.clone();
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(1);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        if cfg.init_samples > 0 && cfg.steps > 0 {
            let n = cfg.init_samples.min(train.len());
            let picks: Vec<Sample> = (0..n).map(|i| train[i * train.len() / n].clone()).collect();
            self.standardize_features(&picks)?;
        }
        let mut sgd = Sgd::new(&self.store, T::lit(cfg.momentum));
        let mut report = TrainReport::default();
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch {
                if cursor == order.len() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let results: Vec<Result<SampleResult<T>>> = {
                let this = &*self;
                run_pool(cfg.threads, || {
                    batch.par_iter().enumerate().map(|(i, &idx)| this.sample_step(&train[idx], step, i)).collect()
                })?
            };
            let mut grads: Vec<Vec<T>> = self.store.ids().map(|id| vec![T::zero(); self.store.get(id).numel()]).collect();
            let (mut l, mut ce, mut regions, mut correct) = (0.0, 0.0, 0.0, 0usize);
            for r in results {
                let r = r?;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                l += r.loss;
                ce += r.ce;
                regions += r.regions;
                correct += usize::from(r.correct);
                report.diagnostics.merge(&r.diagnostics);
            }
            let n = cfg.batch as f64;
            let inv = T::one() / T::from_usize_lossy(cfg.batch);
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let finite = l.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
            report.history.push(StepMetrics {
                step,
                loss: l / n,
                ce: ce / n,
                reg: cfg.lambda_at(step) * regions / n,
                acc: correct as f64 / n,
                mean_regions: regions / n,
            });
            if !finite {
                report.diverged_at = Some(step);
                break;
            }
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, T::lit(cfg.grad_clip));
            }
            sgd.step(&mut self.store, &grads, T::lit(cfg.lr_at(step)));
        }
        Ok(report)
    }

    /// Inference-mode accuracy and mean selected-region count.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalReport<T>> {
        let preds: Vec<Result<Prediction<T>>> = run_pool(self.config.threads, || {
            samples
                .par_iter()
                .map(|s| self.predict(&s.image.iter().map(|&v| T::lit(v)).collect::<Vec<_>>()))
                .collect()
        })?;
        let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
        let correct = preds.iter().zip(samples).filter(|(p, s)| p.class() == s.label).count();
        let regions: usize = preds.iter().map(|p| p.selected.len()).sum();
        let n = samples.len().max(1) as f64;
        Ok(EvalReport { accuracy: correct as f64 / n, mean_regions: regions as f64 / n, predictions: preds })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport<T> {
    pub accuracy: f64,
    pub mean_regions: f64,
    pub predictions: Vec<Prediction<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub classes: Vec<String>,
    pub config: ModelConfig,
    pub params: Vec<CheckpointEntry>,
}

impl<T: Scalar> Model<T> {
    /// Writes every parameter as a tensor file plus `header.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, class_names: &[String]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut params = Vec::new();
        for (i, (name, t)) in self.store.iter().enumerate() {
            let file = format!("{i:03}_{name}.tnsr");
            write_tensor(dir.join(&file), t)?;
            params.push(CheckpointEntry { name: name.to_string(), file, shape: t.shape().to_vec() });
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            classes: class_names.to_vec(),
            config: self.config.clone(),
            params,
        };
        let path = dir.join(CHECKPOINT_HEADER);
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds a model from `dir`, returning it with the stored class names.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_HEADER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(&path, format!("unsupported checkpoint version {}", header.version)));
        }
        let mut model = Self::new(header.config.clone(), header.classes.len())?;
        if header.params.len() != model.store.len() {
            return Err(Error::format(&path, "parameter list does not match the configured model"));
        }
        for entry in &header.params {
            let id = model.store.find(&entry.name).ok_or_else(|| Error::format(&path, format!("unknown parameter {}", entry.name)))?;
            let t: Tensor<T> = read_tensor(dir.join(&entry.file))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::format(dir.join(&entry.file), format!("shape {:?} does not match {:?}", t.shape(), entry.shape)));
            }
            *model.store.get_mut(id) = t;
        }
        Ok((model, header.classes))
    }
}
