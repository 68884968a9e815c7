mod common;

use common::*;
use walknoise::nn::build_model;
use walknoise::{Domain, InjectionPlan, NoiseSpec, Phase, RngStream};

#[test]
fn gradients_match_finite_differences() {
    for (name, report) in run_gradcheck_suite() {
        assert!(report.checked > 0, "{name}");
        assert!(report.worst < REL_TOL, "{name}: {report:?}");
    }
}

#[test]
fn replayed_additive_noise_keeps_gradients_exact() {
    for (name, spec) in gradcheck_cases() {
        let mut model = build_model::<f64>(&spec, 4).unwrap();
        let (x, y) = random_batch(spec.input, 5, spec.classes, 9);
        let plan = InjectionPlan::global(NoiseSpec::additive(0.3).unwrap(), Phase::TrainAndInference);
        let report = check_gradients(&mut model, &x, &y, Some(&plan), 32);
        assert!(report.worst < REL_TOL, "{name}: {report:?}");
    }
}

#[test]
fn noisy_losses_replay_and_differ_by_stream() {
    let (_, spec) = gradcheck_cases().swap_remove(1);
    let model = build_model::<f64>(&spec, 1).unwrap();
    let (x, y) = random_batch(spec.input, 5, spec.classes, 2);
    let plan = InjectionPlan::global(NoiseSpec::additive(0.5).unwrap(), Phase::TrainAndInference);
    let rng = RngStream::new(3, Domain::Noise).epoch(1).batch(2);
    let a = model.training_loss(&x, &y, Some(&plan), rng).unwrap();
    let b = model.training_loss(&x, &y, Some(&plan), rng).unwrap();
    let c = model.training_loss(&x, &y, Some(&plan), rng.batch(3)).unwrap();
    let clean = model.training_loss(&x, &y, None, rng).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, clean);
}

#[test]
fn batchnorm_normalizes_and_tracks_running_statistics() {
    check_batchnorm().unwrap();
}

#[test]
fn inference_only_noise_is_off_during_training() {
    let (_, spec) = gradcheck_cases().swap_remove(1);
    let model = build_model::<f64>(&spec, 1).unwrap();
    let (x, y) = random_batch(spec.input, 5, spec.classes, 2);
    let plan = InjectionPlan::global(NoiseSpec::additive(0.5).unwrap(), Phase::InferenceOnly);
    let rng = RngStream::new(3, Domain::Noise);
    assert_eq!(
        model.training_loss(&x, &y, Some(&plan), rng).unwrap(),
        model.training_loss(&x, &y, None, rng).unwrap()
    );
}
