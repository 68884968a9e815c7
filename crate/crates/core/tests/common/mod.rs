#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walknoise::nn::{build_model, LayerKind, Model, ModelSpec};
use walknoise::{Domain, InjectionPlan, RngStream, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for gradients that vanish exactly (a bias feeding
/// batch norm); finite-difference roundoff there is about 1e-10.
pub const ABS_FLOOR: f64 = 1e-5;

pub fn spec(name: &str, input: [usize; 3], classes: usize, layers: Vec<LayerKind>) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        input,
        classes,
        layers,
    }
}

pub fn random_batch(input: [usize; 3], n: usize, classes: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let len = n * input.iter().product::<usize>();
    let data: Vec<f64> = (0..len).map(|_| g.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    (Tensor::new(vec![n, input[0], input[1], input[2]], data).unwrap(), labels)
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: (usize, usize),
}

/// Central finite differences against the analytic gradients for up to
/// `per_tensor` entries of every parameter tensor.
pub fn check_gradients(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    y: &[usize],
    plan: Option<&InjectionPlan>,
    per_tensor: usize,
) -> GradReport {
    let rng = RngStream::new(11, Domain::Noise);
    let (_, grads) = model.loss_and_gradients(x, y, plan, rng).unwrap();
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
        worst_at: (0, 0),
    };
    for (t, g) in grads.iter().enumerate() {
        let n = g.len();
        let stride = n.div_ceil(per_tensor).max(1);
        for i in (0..n).step_by(stride) {
            let orig = model.params()[t].data()[i];
            model.params_mut()[t].data_mut()[i] = orig + FD_STEP;
            let up = model.training_loss(x, y, plan, rng).unwrap();
            model.params_mut()[t].data_mut()[i] = orig - FD_STEP;
            let down = model.training_loss(x, y, plan, rng).unwrap();
            model.params_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[i];
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if rel > report.worst {
                report.worst = rel;
                report.worst_at = (t, i);
            }
        }
    }
    report
}

/// Small networks that together cover every layer kind.
pub fn gradcheck_cases() -> Vec<(&'static str, ModelSpec)> {
    use LayerKind::*;
    let img = [2, 6, 6];
    vec![
        ("dense", spec("dense", [1, 1, 5], 3, vec![Flatten, FullyConnected { inputs: 5, outputs: 3 }])),
        (
            "dense+relu",
            spec(
                "dense-relu",
                [1, 1, 5],
                3,
                vec![Flatten, FullyConnected { inputs: 5, outputs: 7 }, Relu, FullyConnected { inputs: 7, outputs: 3 }],
            ),
        ),
        (
            "conv",
            spec(
                "conv",
                img,
                3,
                vec![
                    Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 0 },
                    Flatten,
                    FullyConnected { inputs: 3 * 4 * 4, outputs: 3 },
                ],
            ),
        ),
        (
            "conv stride+pad",
            spec(
                "conv-sp",
                img,
                3,
                vec![
                    Conv2d { in_channels: 2, out_channels: 2, kernel: 3, stride: 2, padding: 1 },
                    Flatten,
                    FullyConnected { inputs: 2 * 3 * 3, outputs: 3 },
                ],
            ),
        ),
        (
            "maxpool",
            spec(
                "pool",
                img,
                3,
                vec![
                    Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                    MaxPool2d { kernel: 2, stride: 2 },
                    Flatten,
                    FullyConnected { inputs: 3 * 3 * 3, outputs: 3 },
                ],
            ),
        ),
        (
            "batchnorm dense",
            spec(
                "bn-dense",
                [1, 1, 5],
                3,
                vec![
                    Flatten,
                    FullyConnected { inputs: 5, outputs: 6 },
                    BatchNorm { features: 6 },
                    Relu,
                    FullyConnected { inputs: 6, outputs: 3 },
                ],
            ),
        ),
        (
            "batchnorm conv",
            spec(
                "bn-conv",
                img,
                3,
                vec![
                    Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 0 },
                    BatchNorm { features: 3 },
                    Relu,
                    Flatten,
                    FullyConnected { inputs: 3 * 4 * 4, outputs: 3 },
                ],
            ),
        ),
        (
            "explicit injection point",
            spec(
                "inject",
                [1, 1, 5],
                3,
                vec![
                    Flatten,
                    FullyConnected { inputs: 5, outputs: 6 },
                    InjectionPoint { id: 0 },
                    Relu,
                    FullyConnected { inputs: 6, outputs: 3 },
                ],
            ),
        ),
    ]
}

/// Runs every case (plus LeNet-5 with batch norm, subsampled), returning
/// `(name, report)` pairs.
pub fn run_gradcheck_suite() -> Vec<(String, GradReport)> {
    let mut out = Vec::new();
    for (name, spec) in gradcheck_cases() {
        let mut model = build_model::<f64>(&spec, 3).unwrap();
        let (x, y) = random_batch(spec.input, 6, spec.classes, 5);
        out.push((name.to_string(), check_gradients(&mut model, &x, &y, None, 64)));
    }
    let lenet = ModelSpec::lenet5([1, 28, 28], 10, true);
    let mut model = build_model::<f64>(&lenet, 3).unwrap();
    let (x, y) = random_batch(lenet.input, 4, 10, 5);
    out.push(("lenet5-bn".to_string(), check_gradients(&mut model, &x, &y, None, 12)));
    out
}

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Batch statistics in training, running-statistic updates (momentum 0.1,
/// unbiased variance), and running statistics in evaluation.
pub fn check_batchnorm() -> Result<(), String> {
    use std::collections::BTreeSet;
    use walknoise::nn::{Optimizer, OptimizerKind, PassOptions};
    use LayerKind::*;

    let spec = spec(
        "bn-probe",
        [1, 1, 5],
        3,
        vec![
            Flatten,
            FullyConnected { inputs: 5, outputs: 4 },
            BatchNorm { features: 4 },
            InjectionPoint { id: 0 },
            FullyConnected { inputs: 4, outputs: 3 },
        ],
    );
    let mut model = build_model::<f64>(&spec, 8).map_err(|e| e.to_string())?;
    let (x, y) = random_batch(spec.input, 32, 3, 1);
    let capture = BTreeSet::from([0]);
    let rng = RngStream::new(0, Domain::Noise);
    let train_opts = PassOptions {
        training: true,
        capture: Some(&capture),
        ..PassOptions::eval(None, rng)
    };
    let z = model.run(&x, &train_opts, false).map_err(|e| e.to_string())?.captured[&0].clone();
    let pre = {
        let fc_only = ModelSpec {
            layers: spec.layers[..2].iter().copied().chain([InjectionPoint { id: 0 }]).collect(),
            classes: 4,
            ..spec.clone()
        };
        let mut m = build_model::<f64>(&fc_only, 8).map_err(|e| e.to_string())?;
        for (dst, src) in m.params_mut().into_iter().zip(model.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let opts = PassOptions {
            capture: Some(&capture),
            ..PassOptions::eval(None, rng)
        };
        m.run(&x, &opts, false).map_err(|e| e.to_string())?.captured[&0].clone()
    };
    let n = 32;
    let column = |t: &Tensor<f64>, f: usize| -> Vec<f64> { (0..n).map(|i| t.data()[i * 4 + f]).collect() };
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n as f64;
        (m, v.iter().map(|a| (a - m).powi(2)).sum::<f64>())
    };
    for f in 0..4 {
        let (mean, ss) = moments(&column(&z, f));
        let var = ss / n as f64;
        ensure(mean.abs() < 1e-12, || format!("feature {f}: batch mean {mean}"))?;
        let (_, raw_ss) = moments(&column(&pre, f));
        let rv = raw_ss / n as f64;
        let expected = rv / (rv + 1e-5);
        ensure((var - expected).abs() < 1e-10, || format!("feature {f}: var {var} vs {expected}"))?;
    }

    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.0);
    model.backward_and_step(&x, &y, None, rng, &mut opt, false).map_err(|e| e.to_string())?;
    let (running_mean, running_var) = model.bn_state()[0];
    for f in 0..4 {
        let (m, ss) = moments(&column(&pre, f));
        let unbiased = ss / (n - 1) as f64;
        ensure((running_mean.data()[f] - 0.1 * m).abs() < 1e-12, || format!("feature {f}: running mean"))?;
        ensure((running_var.data()[f] - (0.9 + 0.1 * unbiased)).abs() < 1e-12, || format!("feature {f}: running var"))?;
    }

    let eval_opts = PassOptions {
        capture: Some(&capture),
        ..PassOptions::eval(None, rng)
    };
    let ze = model.run(&x, &eval_opts, false).map_err(|e| e.to_string())?.captured[&0].clone();
    for f in 0..4 {
        let (rm, rv) = (running_mean.data()[f], running_var.data()[f]);
        for i in 0..n {
            let expected = (pre.data()[i * 4 + f] - rm) / (rv + 1e-5).sqrt();
            ensure((ze.data()[i * 4 + f] - expected).abs() < 1e-10, || format!("feature {f} row {i}: eval output"))?;
        }
    }
    Ok(())
}
