//! Learnable histogram operator (LHO) and filter correlation module (FCM).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Ranges narrower than this are treated as constant maps.
pub const DEGENERATE_RANGE: f64 = 1e-9;

/// Spire variant used by [`quantize`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// `1 - |L - I|` inside half a spacing of each level.
    #[default]
    Verbatim,
    /// Levels moved down by half a spacing and the spire rescaled to reach 0 at the bin edge.
    Centered,
}

#[derive(Clone, Copy, Debug)]
pub struct QuantizationLevels {
    /// `[M]`
    pub levels: Var,
    /// Scalar `(max - min) / M`.
    pub spacing: Var,
    pub m: usize,
}

/// `L^m = min + (max - min)/M·m` for `m = 1..M`.
///
/// The extremes stay on the gradient path, routed to the arg-extreme pixel.
pub fn compute_levels<T: Scalar>(tape: &mut Tape<T>, map: Var, m: usize) -> Result<QuantizationLevels> {
    if m < 2 {
        return Err(Error::LevelCount(m));
    }
    let lo = tape.min(map)?;
    let hi = tape.max(map)?;
    let range = tape.sub(hi, lo)?;
    if tape.item(range) < T::lit(DEGENERATE_RANGE) {
        return Err(Error::DegenerateMap);
    }
    let spacing = tape.scale(range, T::one() / T::from_usize_lossy(m))?;
    let steps = tape.constant(Tensor::from_vec((1..=m).map(T::from_usize_lossy).collect()));
    let offsets = tape.mul(steps, spacing)?;
    let levels = tape.add(offsets, lo)?;
    Ok(QuantizationLevels { levels, spacing, m })
}

/// Soft assignment `[P×M]` of every map entry to the levels.
pub fn quantize<T: Scalar>(tape: &mut Tape<T>, map: Var, levels: &QuantizationLevels, mode: QuantMode) -> Result<Var> {
    let half = tape.scale(levels.spacing, T::lit(0.5))?;
    let flat = tape.reshape(map, &[tape.value(map).numel()])?;
    let v = match mode {
        QuantMode::Verbatim => tape.spire(flat, levels.levels, half, false)?,
        QuantMode::Centered => {
            let shifted = tape.sub(levels.levels, half)?;
            tape.spire(flat, shifted, half, true)?
        }
    };
    Ok(v)
}

/// Normalized per-level mass `[M]` of a quantized volume.
pub fn count<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let per_level = tape.sum_axis(v, 0)?;
    let total = tape.sum(per_level)?;
    if tape.item(total) <= T::zero() {
        return Err(Error::DegenerateMap);
    }
    Ok(tape.div(per_level, total)?)
}

/// Fixed 2-D sinusoidal encoding `[S²×C]`: the first `C/2` channels encode the row,
/// the rest the column, as sin/cos pairs with wavelengths geometric from 2 to `2S`.
pub fn position_table<T: Scalar>(size: usize, channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Config(format!("position encoding needs a multiple of 4 channels, got {channels}")));
    }
    let half = channels / 2;
    let pairs = half / 2;
    let wavelengths: Vec<f64> = (0..pairs)
        .map(|k| {
            let t = if pairs > 1 { k as f64 / (pairs - 1) as f64 } else { 0.0 };
            2.0 * (size as f64).powf(t)
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * channels);
    for i in 0..size {
        for j in 0..size {
            for pos in [i, j] {
                for &lam in &wavelengths {
                    let a = 2.0 * PI * pos as f64 / lam;
                    data.push(T::lit(a.sin()));
                    data.push(T::lit(a.cos()));
                }
            }
        }
    }
    Ok(Tensor::new(vec![size * size, channels], data)?)
}

/// `P^m = Σ_ij V^{ij,m}·PE(i,j)`, shape `[M×C]`.
pub fn position_feature<T: Scalar>(tape: &mut Tape<T>, v: Var, pe: Var) -> Result<Var> {
    let vt = tape.transpose(v)?;
    Ok(tape.matmul(vt, pe)?)
}

/// `F^m = φ([C^m, L^m]) + P^m`, shape `[M×C]`.
pub fn level_features<T: Scalar>(
    tape: &mut Tape<T>,
    counts: Var,
    levels: Var,
    position: Var,
    phi_w: Var,
    phi_b: Var,
) -> Result<Var> {
    let m = tape.value(counts).numel();
    let c = tape.reshape(counts, &[m, 1])?;
    let l = tape.reshape(levels, &[m, 1])?;
    let pair = tape.concat_cols(&[c, l])?;
    let emb = tape.affine(pair, phi_w, phi_b)?;
    Ok(tape.add(emb, position)?)
}

/// Parameter handles of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct Mha {
    pub heads: usize,
    pub channels: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl Mha {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::HeadSplit { channels, heads });
        }
        let mut proj = |name: &str| {
            let w = store.add_scaled_normal(format!("{prefix}.w{name}"), &[channels, channels], channels, rng);
            let b = store.add_zeros(format!("{prefix}.b{name}"), &[channels]);
            (w, b)
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        Ok(Self { heads, channels, wq, bq, wk, bk, wv, bv, wo, bo })
    }
}

/// Output of [`mha`]: the projected tokens and each head's `[K×K]` attention weights.
#[derive(Clone, Debug)]
pub struct MhaOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention over `tokens[K×C]`, no masking.
pub fn mha<T: Scalar>(tape: &mut Tape<T>, tokens: Var, block: &Mha, bound: &Bound) -> Result<MhaOutput> {
    let c = tape.shape(tokens).get(1).copied().unwrap_or(0);
    if c != block.channels || c % block.heads != 0 {
        return Err(Error::HeadSplit { channels: c, heads: block.heads });
    }
    let d = c / block.heads;
    let q = tape.affine(tokens, bound.var(block.wq), bound.var(block.bq))?;
    let k = tape.affine(tokens, bound.var(block.wk), bound.var(block.bk))?;
    let v = tape.affine(tokens, bound.var(block.wv), bound.var(block.bv))?;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let mut heads = Vec::with_capacity(block.heads);
    let mut attention = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let qh = tape.slice_cols(q, h * d, (h + 1) * d)?;
        let kh = tape.slice_cols(k, h * d, (h + 1) * d)?;
        let vh = tape.slice_cols(v, h * d, (h + 1) * d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let a = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(a, vh)?);
        attention.push(a);
    }
    let joined = tape.concat_cols(&heads)?;
    let out = tape.affine(joined, bound.var(block.wo), bound.var(block.bo))?;
    Ok(MhaOutput { out, attention })
}

/// Handles for the LHO's learnable pieces.
#[derive(Clone, Copy, Debug)]
pub struct Lho {
    pub levels: usize,
    pub mode: QuantMode,
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub attn: Mha,
}

impl Lho {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        levels: usize,
        channels: usize,
        heads: usize,
        mode: QuantMode,
        rng: &mut R,
    ) -> Result<Self> {
        if levels < 2 {
            return Err(Error::LevelCount(levels));
        }
        let phi_w = store.add_scaled_normal("lho.phi.w", &[2, channels], 2, rng);
        let phi_b = store.add_zeros("lho.phi.b", &[channels]);
        let attn = Mha::new(store, "lho.mha", channels, heads, rng)?;
        Ok(Self { levels, mode, phi_w, phi_b, attn })
    }
}

#[derive(Clone, Debug)]
pub struct LhoOutput {
    /// `[C]` statistical feature.
    pub stat: Var,
    /// `[M]` counting feature.
    pub counts: Var,
    pub degenerate: bool,
    pub attention: Vec<Var>,
}

/// Full LHO on one `[S×S]` (or flat) intensity map; `pe` is the `[S²×C]` table on the tape.
pub fn lho<T: Scalar>(tape: &mut Tape<T>, map: Var, pe: Var, block: &Lho, bound: &Bound) -> Result<LhoOutput> {
    let m = block.levels;
    let flat = tape.reshape(map, &[tape.value(map).numel()])?;
    let channels = block.attn.channels;
    let quantized = match compute_levels(tape, flat, m) {
        Ok(q) => {
            let v = quantize(tape, flat, &q, block.mode)?;
            match count(tape, v) {
                Ok(counts) => Some((counts, q.levels, v)),
                Err(Error::DegenerateMap) => None,
                Err(e) => return Err(e),
            }
        }
        Err(Error::DegenerateMap) => None,
        Err(e) => return Err(e),
    };
    let (counts, levels, position, degenerate) = match quantized {
        Some((counts, levels, v)) => {
            let position = position_feature(tape, v, pe)?;
            (counts, levels, position, false)
        }
        None => {
            let counts = tape.constant(Tensor::full(&[m], T::one() / T::from_usize_lossy(m)));
            let lo = tape.min(flat)?;
            let zeros = tape.constant(Tensor::zeros(&[m]));
            let levels = tape.add(zeros, lo)?;
            let position = tape.constant(Tensor::zeros(&[m, channels]));
            (counts, levels, position, true)
        }
    };
    let f = level_features(tape, counts, levels, position, bound.var(block.phi_w), bound.var(block.phi_b))?;
    let att = mha(tape, f, &block.attn, bound)?;
    let stat = tape.mean_rows(att.out)?;
    Ok(LhoOutput { stat, counts, degenerate, attention: att.attention })
}

/// Handles for the FCM's learnable pieces.
#[derive(Clone, Copy, Debug)]
pub struct Fcm {
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub attn: Mha,
}

impl Fcm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let phi_w = store.add_scaled_normal("fcm.phi.w", &[4, channels], 4, rng);
        let phi_b = store.add_zeros("fcm.phi.b", &[channels]);
        let attn = Mha::new(store, "fcm.mha", channels, heads, rng)?;
        Ok(Self { phi_w, phi_b, attn })
    }
}

/// `T = mean_n MHA({S^n + φ₄(σxⁿ, σyⁿ, θⁿ, Wⁿ)})`; `filter_params` is `[N×4]`.
pub fn fcm<T: Scalar>(tape: &mut Tape<T>, stats: &[Var], filter_params: Var, block: &Fcm, bound: &Bound) -> Result<Var> {
    let n = tape.shape(filter_params)[0];
    if stats.len() != n || stats.is_empty() {
        return Err(Error::CountMismatch { stats: stats.len(), specs: n });
    }
    let s = tape.stack(stats)?;
    let emb = tape.affine(filter_params, bound.var(block.phi_w), bound.var(block.phi_b))?;
    let tokens = tape.add(s, emb)?;
    let att = mha(tape, tokens, &block.attn, bound)?;
    Ok(tape.mean_rows(att.out)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn levels_for(values: &[f64], m: usize) -> (Tape<f64>, Var, QuantizationLevels) {
        let mut t = Tape::new();
        let map = t.constant(Tensor::from_vec(values.to_vec()));
        let q = compute_levels(&mut t, map, m).unwrap();
        (t, map, q)
    }

    #[test]
    fn level_examples() {
        let (t, _, q) = levels_for(&[0.0, 0.3, 1.0, 0.7], 4);
        assert_eq!(t.value(q.levels).data(), &[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(t.item(q.spacing), 0.25);
        let mut t = Tape::new();
        let map = t.constant(Tensor::from_vec(vec![2.0; 5]));
        assert!(matches!(compute_levels(&mut t, map, 4), Err(Error::DegenerateMap)));
        assert!(matches!(compute_levels(&mut t, map, 1), Err(Error::LevelCount(1))));
    }

    #[test]
    fn quantize_examples() {
        let (mut t, map, q) = levels_for(&[0.0, 1.0, 0.6, 0.05, 0.5], 4);
        let v = quantize(&mut t, map, &q, QuantMode::Verbatim).unwrap();
        let v = t.value(v).data();
        assert_eq!(&v[4..8], &[0.0, 0.0, 0.0, 1.0]);
        assert!((v[9] - 0.9).abs() < 1e-15);
        assert_eq!(v[8] + v[10] + v[11], 0.0);
        assert!(v[12..16].iter().all(|&x| x == 0.0));
        assert_eq!(&v[16..20], &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn centered_mode_uses_bin_centers() {
        let values = [0.0, 0.1, 0.26, 0.49, 0.51, 0.77, 0.999, 1.0];
        let (mut t, map, q) = levels_for(&values, 4);
        let v = quantize(&mut t, map, &q, QuantMode::Centered).unwrap();
        let v = t.value(v).data().to_vec();
        for (p, row) in v.chunks(4).enumerate() {
            assert!(row.iter().filter(|&&x| x > 0.0).count() <= 1, "pixel {p}");
        }
        // pixel 0.1 sits 0.025 from the first bin center 0.125: weight 1 - 0.025/0.125
        assert!((v[4] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn counts_sum_to_one_and_one_hot() {
        let (mut t, map, q) = levels_for(&[0.0, 0.5, 0.5, 0.5, 1.0], 4);
        let v = quantize(&mut t, map, &q, QuantMode::Verbatim).unwrap();
        let c = count(&mut t, v).unwrap();
        let c = t.value(c).data();
        assert_eq!(c, &[0.0, 0.75, 0.0, 0.25]);
    }

    #[test]
    fn position_table_layout() {
        let pe = position_table::<f64>(4, 8).unwrap();
        assert_eq!(pe.shape(), &[16, 8]);
        // pixel (1, 2): row channels then column channels; shortest wavelength 2, longest 8
        let row = &pe.data()[(4 + 2) * 8..(4 + 2) * 8 + 8];
        assert!((row[1] - (PI).cos()).abs() < 1e-15);
        assert!((row[2] - (2.0 * PI / 8.0).sin()).abs() < 1e-15);
        assert!((row[6] - (2.0 * PI * 2.0 / 8.0).sin()).abs() < 1e-15);
        assert!(position_table::<f64>(4, 6).is_err());
    }

    #[test]
    fn position_feature_of_delta_is_table_row() {
        let pe = position_table::<f64>(4, 8).unwrap();
        let mut t = Tape::new();
        let mut v = vec![0.0; 16 * 3];
        v[5 * 3 + 1] = 1.0;
        let v = t.constant(Tensor::new(vec![16, 3], v).unwrap());
        let pv = t.constant(pe.clone());
        let p = position_feature(&mut t, v, pv).unwrap();
        let p = t.value(p).data();
        assert!(p[0..8].iter().all(|&x| x == 0.0));
        assert_eq!(&p[8..16], &pe.data()[40..48]);
    }

    #[test]
    fn mha_single_token_and_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = Mha::new(&mut store, "m", 8, 2, &mut rng).unwrap();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let tok: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let x = t.constant(Tensor::new(vec![1, 8], tok.clone()).unwrap());
        let out = mha(&mut t, x, &block, &b).unwrap();
        let v = t.affine(x, b.var(block.wv), b.var(block.bv)).unwrap();
        let expect = t.affine(v, b.var(block.wo), b.var(block.bo)).unwrap();
        for (a, e) in t.value(out.out).data().iter().zip(t.value(expect).data()) {
            assert!((a - e).abs() < 1e-14);
        }
        let same = t.constant(Tensor::new(vec![3, 8], [tok.clone(), tok.clone(), tok].concat()).unwrap());
        let out = mha(&mut t, same, &block, &b).unwrap();
        let o = t.value(out.out).data();
        assert_eq!(&o[0..8], &o[8..16]);
        assert_eq!(&o[0..8], &o[16..24]);
        assert!(matches!(Mha::new(&mut store, "bad", 6, 4, &mut rng), Err(Error::HeadSplit { .. })));
    }

    #[test]
    fn lho_shape_and_degenerate_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let block = Lho::new(&mut store, 4, 8, 2, QuantMode::Verbatim, &mut rng).unwrap();
        let pe = position_table::<f64>(4, 8).unwrap();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let pv = t.constant(pe);
        let map = t.constant(Tensor::full(&[4, 4], 0.3));
        let out = lho(&mut t, map, pv, &block, &b).unwrap();
        assert!(out.degenerate);
        assert_eq!(t.shape(out.stat), &[8]);
        assert_eq!(t.value(out.counts).data(), &[0.25; 4]);
    }
}
