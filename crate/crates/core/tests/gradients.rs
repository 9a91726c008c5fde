use gabor_texture::autodiff::Tape;
use gabor_texture::checks::{gradient_suite, tiny_config, TOLERANCE};
use gabor_texture::gate::GateMode;
use gabor_texture::network::{loss, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_stage_matches_finite_differences() {
    for report in gradient_suite(0).unwrap() {
        let worst = report.worst();
        assert!(report.passed(TOLERANCE), "{}: {} at {}", report.stage, worst.max_rel_err, worst.label);
    }
}

#[test]
fn classification_loss_reaches_the_filter_parameters() {
    let model = Model::<f64>::new(tiny_config(2), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
    let k = model.proposals().len();
    let noise = (0..k).map(|j| if j == 3 { 40.0 } else { -40.0 }).collect();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &image, &GateMode::Train { noise }).unwrap();
    assert_eq!(out.gate.as_ref().unwrap().selected(), vec![3]);
    let parts = loss(&mut tape, &out, 1, 0.0).unwrap();
    tape.backward(parts.ce).unwrap();
    let grads = bound.grads(&tape);
    let raw = &grads[model.bank_param().index()];
    assert!(raw.iter().all(|g| g.is_finite()));
    assert!(raw.iter().any(|g| g.abs() > 1e-12), "{raw:?}");
}
