//! Finite-difference gradient checks for every differentiable stage of the pipeline.
//!
//! Each check reduces the stage output to a scalar with fixed random weights and compares
//! the tape gradient of every input with central differences. Probe points whose
//! perturbations change the tape's branch signature (a relu, min/max, clamp or spire
//! switching branch) are rejected, so differences never straddle a kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gabor::{apply_bank, constrain_on_tape, FilterBank};
use crate::gate::{freeze, gate, saturating_sigmoid_on_tape, GateMode};
use crate::network::{loss, Model, ModelConfig};
use crate::oracle::{finite_diff, GradReport};
use crate::params::{Bound, ParamStore};
use crate::stats::{fcm, lho, Fcm, Lho, QuantMode};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Relative-error threshold every check must stay under.
pub const TOLERANCE: f64 = 1e-4;
/// Reference points tried per check before giving up on finding one clear of kinks.
const ATTEMPTS: u64 = 8;

/// Named, owned inputs of one check; `build` sees them as tape variables in this order.
type Inputs = Vec<(String, Tensor<f64>)>;

/// All reports of one stage.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: &'static str,
    pub tensors: Vec<GradReport>,
}

impl StageReport {
    pub fn worst(&self) -> GradReport {
        GradReport::worst_of(self.stage, &self.tensors)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.tensors.iter().all(|r| r.passed(tol))
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Compares tape and numeric gradients of `w · build(store, inputs)` for every parameter in
/// `store` and every entry of `inputs`.
///
/// Fails with [`Error::Config`] when a perturbation changes the branch signature.
fn check_point<F>(store: &ParamStore<f64>, inputs: &Inputs, seed: u64, build: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let eval = |tape: &mut Tape<f64>, bound: &Bound, vars: &[Var], weights: &Tensor<f64>| -> Result<Var> {
        let out = build(tape, bound, vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod)?)
    };

    let weights = {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let vs: Vec<Var> = inputs.iter().map(|(_, x)| t.constant(x.clone())).collect();
        let out = build(&mut t, &b, &vs)?;
        uniform(t.shape(out), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = eval(&mut tape, &bound, &vars, &weights)?;
    let signature = tape.branch_signature();
    tape.backward(root)?;
    let param_grads = bound.grads(&tape);
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let numeric = |store: &ParamStore<f64>, inputs: &Inputs| -> Result<f64> {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let vs: Vec<Var> = inputs.iter().map(|(_, x)| t.constant(x.clone())).collect();
        let l = eval(&mut t, &b, &vs, &weights)?;
        if t.branch_signature() != signature {
            return Err(Error::Config("probe crossed a kink".into()));
        }
        Ok(t.item(l))
    };
    let mut failure = None;
    let mut reports = Vec::new();
    for (i, id) in store.ids().enumerate() {
        if is_shift_invariant(store.name(id)) {
            continue;
        }
        let mut probe = store.clone();
        let num = finite_diff(
            |x| {
                *probe.get_mut(id) = x.clone();
                numeric(&probe, inputs).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    0.0
                })
            },
            store.get(id),
            STEP,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        reports.push(compare(store.name(id), &param_grads[i], num.data())?);
    }
    for (j, (name, x)) in inputs.iter().enumerate() {
        let mut probe = inputs.clone();
        let num = finite_diff(
            |x| {
                probe[j].1 = x.clone();
                numeric(store, &probe).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    0.0
                })
            },
            x,
            STEP,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        reports.push(compare(name, &input_grads[j], num.data())?);
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

/// Attention key biases add the same amount to every logit of a softmax row, so their
/// gradient is zero by construction and only rounding noise is left to compare.
fn is_shift_invariant(name: &str) -> bool {
    name.ends_with(".bk")
}

fn compare(label: &str, analytic: &[f64], numeric: &[f64]) -> Result<GradReport> {
    GradReport::compare(label, analytic, numeric).map_err(|e| Error::Config(e.to_string()))
}

/// Retries `attempt` with fresh seeds until it yields a point clear of kinks.
fn retry(stage: &'static str, seed: u64, attempt: impl Fn(u64) -> Result<Vec<GradReport>>) -> Result<StageReport> {
    let mut last = None;
    for a in 0..ATTEMPTS {
        match attempt(seed.wrapping_add(a * 7919)) {
            Ok(tensors) => return Ok(StageReport { stage, tensors }),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Config(format!("{stage}: no kink-free reference point ({})", last.map(|e| e.to_string()).unwrap_or_default())))
}

/// Sigmoid reparameterization into `[lower, upper]`, differentiated in all three.
pub fn check_constrain(seed: u64) -> Result<StageReport> {
    retry("constrain", seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let raw = uniform(&[6], -3.0, 3.0, &mut rng);
        let lower = uniform(&[6], -2.0, 0.0, &mut rng);
        let upper = uniform(&[6], 0.5, 3.0, &mut rng);
        let inputs = vec![("raw".into(), raw), ("lower".into(), lower), ("upper".into(), upper)];
        check_point(&ParamStore::new(), &inputs, s, |t, _, v| constrain_on_tape(t, v[0], v[1], v[2]))
    })
}

/// Parameter mapping, kernel synthesis and filtering of a `16×16` region with two filters.
pub fn check_bank(seed: u64) -> Result<StageReport> {
    retry("synthesize+apply_bank", seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let bank = FilterBank::<f64>::new(16, 2, &mut rng)?;
        let region = uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let inputs = vec![("bank.raw".into(), bank.raw.clone()), ("region".into(), region)];
        check_point(&ParamStore::new(), &inputs, s, |t, _, v| {
            let vars = bank.on_tape(t, v[0])?;
            apply_bank(t, &vars, v[1], 16)
        })
    })
}

/// Levels, spire quantization, counting, level and position embeddings, attention and mean.
pub fn check_lho(seed: u64) -> Result<StageReport> {
    retry("lho", seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let block = Lho::new(&mut store, 4, 8, 2, QuantMode::Verbatim, &mut rng)?;
        let map = uniform(&[16, 16], 0.05, 1.0, &mut rng);
        let pe = crate::stats::position_table::<f64>(16, 8)?.map(|v| v / 256.0);
        let inputs = vec![("map".into(), map)];
        check_point(&store, &inputs, s, |t, b, v| {
            let pe = t.constant(pe.clone());
            Ok(lho(t, v[0], pe, &block, b)?.stat)
        })
    })
}

/// Filter-correlation attention over two statistical features and their filter parameters.
pub fn check_fcm(seed: u64) -> Result<StageReport> {
    retry("fcm", seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut store = ParamStore::new();
        let block = Fcm::new(&mut store, 8, 2, &mut rng)?;
        let inputs = vec![
            ("stat.0".into(), uniform(&[8], -1.0, 1.0, &mut rng)),
            ("stat.1".into(), uniform(&[8], -1.0, 1.0, &mut rng)),
            ("filter_params".into(), uniform(&[2, 4], 0.1, 3.0, &mut rng)),
        ];
        check_point(&store, &inputs, s, |t, b, v| fcm(t, &v[..2], v[2], &block, b))
    })
}

/// `clamp(1.2·sigmoid(x) - 0.1, 0, 1)` over both saturated and sloped inputs.
pub fn check_saturating_sigmoid(seed: u64) -> Result<StageReport> {
    retry("saturating_sigmoid", seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut x = uniform(&[8], -2.2, 2.2, &mut rng);
        x.data_mut()[0] = -4.0;
        x.data_mut()[7] = 4.0;
        check_point(&ParamStore::new(), &vec![("x".into(), x)], s, |t, _, v| saturating_sigmoid_on_tape(t, v[0]))
    })
}

/// Gate values frozen at a noisy training-mode point; the backward pass follows the surrogate.
pub fn check_gate(seed: u64) -> Result<StageReport> {
    retry("straight_through", seed, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let scores = uniform(&[6], -1.5, 1.5, &mut rng);
        let mode = GateMode::<f64>::sample_train(6, &mut rng);
        let frozen = {
            let mut t = Tape::new();
            let sv = t.constant(scores.clone());
            let g = gate(&mut t, sv, &mode)?;
            let GateMode::Train { noise } = mode else { unreachable!() };
            freeze(noise, &g.decisions)
        };
        check_point(&ParamStore::new(), &vec![("scores".into(), scores)], s, |t, _, v| Ok(gate(t, v[0], &frozen)?.d))
    })
}

/// Desk configuration of the end-to-end check: `16×16` input, two filters, four levels.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        region_size: 16,
        n_filters: 2,
        levels: 4,
        channels: 8,
        heads: 2,
        fpn_channels: 4,
        semantic_widths: [2, 4, 4, 4],
        gate_bias: -2.0,
        seed,
        ..ModelConfig::default()
    }
}

/// Cross-entropy plus the sparsity term, with the gate frozen at a training-mode point
/// that selects at least one region; every model parameter is checked.
pub fn check_end_to_end(seed: u64) -> Result<StageReport> {
    retry("end_to_end", seed, |s| {
        let cfg = tiny_config(s);
        let lambda = cfg.lambda;
        let model = Model::<f64>::new(cfg, 3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let image: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let k = model.proposals().len();
        let mode = GateMode::<f64>::sample_train(k, &mut rng);
        let frozen = {
            let mut t = Tape::new();
            let b = model.store.bind_frozen(&mut t);
            let out = model.forward(&mut t, &b, &image, &mode)?;
            let g = out.gate.ok_or_else(|| Error::Config("gate missing".into()))?;
            let chosen = g.selected().len();
            if chosen == 0 || chosen > 3 {
                return Err(Error::Config(format!("{chosen} regions selected")));
            }
            let GateMode::Train { noise } = mode else { unreachable!() };
            freeze(noise, &g.decisions)
        };
        let label = s as usize % 3;
        check_point(&model.store, &Vec::new(), s, |t, b, _| {
            let out = model.forward(t, b, &image, &frozen)?;
            Ok(loss(t, &out, label, lambda)?.total)
        })
    })
}

/// Runs every check in pipeline order.
pub fn gradient_suite(seed: u64) -> Result<Vec<StageReport>> {
    Ok(vec![
        check_constrain(seed)?,
        check_bank(seed)?,
        check_lho(seed)?,
        check_fcm(seed)?,
        check_saturating_sigmoid(seed)?,
        check_gate(seed)?,
        check_end_to_end(seed)?,
    ])
}
