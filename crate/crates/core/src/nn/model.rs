//! Realized models: parameters, injection points, forward and backward passes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache, BN_MOMENTUM};
use super::optim::Optimizer;
use super::spec::{LayerKind, ModelSpec};
use crate::error::{Error, Result};
use crate::noise::{apply_noise_averaged, InjectionPlan, Placement};
use crate::rng::{Domain, RngStream};
use crate::tensor::{Real, Tensor};

/// One position on the activation path where noise may act.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointInfo {
    pub id: usize,
    /// `in`, `fc1`, `relu2`, ...; the last point also carries `(out)`.
    pub name: String,
    /// Index into `ModelSpec::layers` of the layer this point follows;
    /// `None` for the input point.
    pub after_layer: Option<usize>,
    /// Per-sample activation shape at this point.
    pub shape: Vec<usize>,
}

impl PointInfo {
    /// `"<id>:<name>"`, the label used in every per-layer report.
    pub fn label(&self) -> String {
        format!("{}:{}", self.id, self.name)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Real> {
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Flatten,
    Inject(usize),
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T: Real> {
    pub op: Op<T>,
    pub spec_index: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    seed: u64,
    pub(crate) nodes: Vec<Node<T>>,
    points: Vec<PointInfo>,
}

/// Hook run on the (post-noise) activations of an injection point.
pub type PointHook<'a, T> = &'a (dyn Fn(usize, &mut [T]) + Sync);

/// Knobs of a single forward pass.
#[derive(Clone, Copy)]
pub struct PassOptions<'a, T: Real> {
    pub plan: Option<&'a InjectionPlan>,
    /// Noise stream for this pass; the layer coordinate is set per point.
    pub rng: RngStream,
    /// Batch statistics in batch norm, and phase gating of the plan.
    pub training: bool,
    /// Per-point repetition counts for multi-execution (index = point id).
    pub repetitions: Option<&'a [usize]>,
    pub capture: Option<&'a BTreeSet<usize>>,
    pub hook: Option<PointHook<'a, T>>,
}

impl<'a, T: Real> PassOptions<'a, T> {
    pub fn eval(plan: Option<&'a InjectionPlan>, rng: RngStream) -> Self {
        PassOptions {
            plan,
            rng,
            training: false,
            repetitions: None,
            capture: None,
            hook: None,
        }
    }
}

pub struct PassOutput<T: Real> {
    pub logits: Tensor<T>,
    pub captured: BTreeMap<usize, Tensor<T>>,
    tape: Option<Tape<T>>,
}

enum Cache<T: Real> {
    Input(Tensor<T>),
    Conv { cols: Vec<T>, x_shape: Vec<usize> },
    Output(Tensor<T>),
    Pool { arg: Vec<u32>, x_shape: Vec<usize> },
    Bn(BnCache<T>, layers::BnBatchStats),
    Shape(Vec<usize>),
    None,
}

struct Tape<T: Real> {
    caches: Vec<Cache<T>>,
}

/// Gradients aligned with [`Model::params`].
pub type Gradients<T> = Vec<Tensor<T>>;

/// Builds a model, inserting injection points at the input and after every
/// layer except batch norm and flatten, unless the spec already lists its
/// own `InjectionPoint`s. Parameters are He-uniform (weights), zero (biases),
/// and `gamma = 1`, `beta = 0` for batch norm, all derived from `seed`.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    if spec.classes < 2 {
        return Err(Error::Spec(format!("need at least 2 classes, got {}", spec.classes)));
    }
    let explicit: Vec<usize> = spec
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerKind::InjectionPoint { id } => Some(*id),
            _ => None,
        })
        .collect();
    if explicit.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Spec(format!(
            "injection point ids must be unique and increasing: {explicit:?}"
        )));
    }
    let auto = explicit.is_empty();

    let mut nodes = Vec::new();
    let mut points = Vec::new();
    let mut shape = spec.input.to_vec();
    let mut counters: BTreeMap<&'static str, usize> = BTreeMap::new();

    let push_point = |nodes: &mut Vec<Node<T>>, points: &mut Vec<PointInfo>, id, name, after, shape: &[usize]| {
        nodes.push(Node {
            op: Op::Inject(id),
            spec_index: None,
        });
        points.push(PointInfo {
            id,
            name,
            after_layer: after,
            shape: shape.to_vec(),
        });
    };

    if auto {
        push_point(&mut nodes, &mut points, 0, "in".to_string(), None, &shape);
    }

    for (index, kind) in spec.layers.iter().enumerate() {
        let out = kind.output_shape(&shape).map_err(|detail| Error::LayerShape {
            index,
            layer: kind.to_string(),
            detail,
        })?;
        let tag = kind.tag();
        *counters.entry(tag).or_default() += 1;
        let ordinal = counters[tag];
        let init = RngStream::new(seed, Domain::Init).layer(index as u32);
        let op = match *kind {
            LayerKind::FullyConnected { inputs, outputs } => Op::Dense {
                weight: he_uniform(&[outputs, inputs], inputs, &init),
                bias: Tensor::zeros(&[outputs]),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let fan_in = in_channels * kernel * kernel;
                Op::Conv {
                    weight: he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, &init),
                    bias: Tensor::zeros(&[out_channels]),
                    stride,
                    padding,
                }
            }
            LayerKind::Relu => Op::Relu,
            LayerKind::MaxPool2d { kernel, stride } => Op::MaxPool { kernel, stride },
            LayerKind::BatchNorm { features } => Op::BatchNorm {
                gamma: Tensor::full(&[features], T::ONE),
                beta: Tensor::zeros(&[features]),
                running_mean: Tensor::zeros(&[features]),
                running_var: Tensor::full(&[features], T::ONE),
            },
            LayerKind::Flatten => Op::Flatten,
            LayerKind::InjectionPoint { id } => {
                let name = if index == 0 {
                    "in".to_string()
                } else {
                    format!("noise{ordinal}")
                };
                push_point(&mut nodes, &mut points, id, name, index.checked_sub(1), &out);
                shape = out;
                continue;
            }
        };
        nodes.push(Node {
            op,
            spec_index: Some(index),
        });
        shape = out;
        if auto && kind.gets_injection_point() {
            let id = points.len();
            push_point(&mut nodes, &mut points, id, format!("{tag}{ordinal}"), Some(index), &shape);
        }
    }

    if shape != [spec.classes] {
        return Err(Error::LayerShape {
            index: spec.layers.len().saturating_sub(1),
            layer: spec.layers.last().map(|l| l.to_string()).unwrap_or_default(),
            detail: format!("network output {shape:?} does not match {} classes", spec.classes),
        });
    }
    // the final point sits on the logits
    if let Some(last) = points.last_mut() {
        if matches!(nodes.last().map(|n| &n.op), Some(Op::Inject(_))) {
            last.name.push_str("(out)");
        }
    }

    Ok(Model {
        spec: spec.clone(),
        seed,
        nodes,
        points,
    })
}

fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, stream: &RngStream) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut g = stream.generator();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(g.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl<T: Real> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn points(&self) -> &[PointInfo] {
        &self.points
    }

    pub fn point(&self, id: usize) -> Option<&PointInfo> {
        self.points.iter().find(|p| p.id == id)
    }

    pub fn point_ids(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.id).collect()
    }

    fn max_point_id(&self) -> usize {
        self.points.iter().map(|p| p.id).max().unwrap_or(0)
    }

    /// Spec indices of the conv/FC layers, in order.
    pub fn learnable_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_learnable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Dense { weight, bias } | Op::Conv { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Dense { weight, bias } | Op::Conv { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    /// `(running_mean, running_var)` per batch norm layer, in order.
    pub fn bn_state(&self) -> Vec<(&Tensor<T>, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                } => Some((running_mean, running_var)),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn bn_state_mut(&mut self) -> Vec<(&mut Tensor<T>, &mut Tensor<T>)> {
        self.nodes
            .iter_mut()
            .filter_map(|n| match &mut n.op {
                Op::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                } => Some((running_mean, running_var)),
                _ => None,
            })
            .collect()
    }

    /// Weight tensor of a conv/FC layer, by spec index.
    pub fn weight(&self, layer: usize) -> Result<&Tensor<T>> {
        self.nodes
            .iter()
            .find(|n| n.spec_index == Some(layer))
            .and_then(|n| match &n.op {
                Op::Dense { weight, .. } | Op::Conv { weight, .. } => Some(weight),
                _ => None,
            })
            .ok_or(Error::NotLearnable(layer))
    }

    /// Projects every conv/FC weight into `[-1, 1]`. Biases and batch norm
    /// affine parameters are left alone.
    pub fn clamp_weights(&mut self) {
        for node in &mut self.nodes {
            if let Op::Dense { weight, .. } | Op::Conv { weight, .. } = &mut node.op {
                for w in weight.data_mut() {
                    *w = w.max(-T::ONE).min(T::ONE);
                }
            }
        }
    }

    /// Mean |w| over the weight tensor of a conv/FC layer (spec index).
    pub fn average_weight_magnitude(&self, layer: usize) -> Result<f64> {
        Ok(self.weight(layer)?.mean_abs())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != self.spec.input {
            return Err(Error::InvalidArgument(format!(
                "batch shape {:?} does not match model input [N, {:?}]",
                x.shape(),
                self.spec.input
            )));
        }
        Ok(())
    }

    fn check_plan(&self, plan: Option<&InjectionPlan>, repetitions: Option<&[usize]>) -> Result<()> {
        if let Some(plan) = plan {
            plan.spec.validate()?;
            if let Placement::WalkingAt(id) = plan.placement {
                if self.point(id).is_none() {
                    return Err(Error::InjectionPoint {
                        id,
                        count: self.points.len(),
                    });
                }
            }
        }
        if let Some(reps) = repetitions {
            if reps.len() <= self.max_point_id() {
                return Err(Error::InvalidArgument(format!(
                    "repetition plan covers {} points, model has {}",
                    reps.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    /// Evaluation-mode forward pass. Captured activations are post-noise.
    pub fn forward(
        &self,
        batch: &Tensor<T>,
        plan: Option<&InjectionPlan>,
        rng: RngStream,
        capture: Option<&BTreeSet<usize>>,
    ) -> Result<(Tensor<T>, BTreeMap<usize, Tensor<T>>)> {
        let opts = PassOptions {
            capture,
            ..PassOptions::eval(plan, rng)
        };
        let out = self.run(batch, &opts, false)?;
        Ok((out.logits, out.captured))
    }

    pub fn run(&self, x: &Tensor<T>, opts: &PassOptions<'_, T>, record: bool) -> Result<PassOutput<T>> {
        self.check_input(x)?;
        self.check_plan(opts.plan, opts.repetitions)?;
        let mut caches = Vec::with_capacity(if record { self.nodes.len() } else { 0 });
        let mut captured = BTreeMap::new();
        let mut cur = x.clone();
        for node in &self.nodes {
            let (next, cache) = match &node.op {
                Op::Dense { weight, bias } => {
                    let y = layers::dense_forward(&cur, weight, bias);
                    (y, if record { Cache::Input(cur) } else { Cache::None })
                }
                Op::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (y, cols) = layers::conv_forward(&cur, weight, bias, *stride, *padding, record);
                    let x_shape = cur.shape().to_vec();
                    (y, if record { Cache::Conv { cols, x_shape } } else { Cache::None })
                }
                Op::Relu => {
                    let y = layers::relu_forward(&cur);
                    let c = if record { Cache::Output(y.clone()) } else { Cache::None };
                    (y, c)
                }
                Op::MaxPool { kernel, stride } => {
                    let (y, arg) = layers::maxpool_forward(&cur, *kernel, *stride);
                    let x_shape = cur.shape().to_vec();
                    (y, if record { Cache::Pool { arg, x_shape } } else { Cache::None })
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    if opts.training {
                        let (y, c, stats) = layers::bn_forward_train(&cur, gamma, beta);
                        (y, if record { Cache::Bn(c, stats) } else { Cache::None })
                    } else {
                        let y = layers::bn_forward_eval(&cur, gamma, beta, running_mean, running_var);
                        (y, Cache::None)
                    }
                }
                Op::Flatten => {
                    let n = cur.batch();
                    let shape = cur.shape().to_vec();
                    let item = cur.item_len();
                    (cur.reshape(vec![n, item])?, Cache::Shape(shape))
                }
                Op::Inject(id) => {
                    let mut y = cur;
                    if let Some(plan) = opts.plan {
                        if plan.targets(*id) && plan.active(opts.training) {
                            let reps = opts.repetitions.map_or(1, |r| r[*id].max(1));
                            let stream = opts.rng.layer(*id as u32);
                            apply_noise_averaged(y.data_mut(), &plan.spec, &stream, reps);
                        }
                    }
                    if let Some(hook) = opts.hook {
                        hook(*id, y.data_mut());
                    }
                    if opts.capture.is_some_and(|c| c.contains(id)) {
                        captured.insert(*id, y.clone());
                    }
                    (y, Cache::None)
                }
            };
            cur = next;
            if record {
                caches.push(cache);
            }
        }
        Ok(PassOutput {
            logits: cur,
            captured,
            tape: record.then_some(Tape { caches }),
        })
    }

    fn backward(&self, tape: &Tape<T>, dlogits: Tensor<T>) -> Gradients<T> {
        let mut per_node: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.nodes.len()];
        let mut dy = dlogits;
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let cache = &tape.caches[i];
            dy = match (&node.op, cache) {
                (Op::Dense { weight, .. }, Cache::Input(x)) => {
                    let (dx, dw, db) = layers::dense_backward(&dy, x, weight);
                    per_node[i] = vec![dw, db];
                    dx
                }
                (Op::Conv { weight, stride, padding, .. }, Cache::Conv { cols, x_shape }) => {
                    let (dx, dw, db) = layers::conv_backward(&dy, cols, x_shape, weight, *stride, *padding);
                    per_node[i] = vec![dw, db];
                    dx
                }
                (Op::Relu, Cache::Output(y)) => layers::relu_backward(&dy, y),
                (Op::MaxPool { .. }, Cache::Pool { arg, x_shape }) => {
                    layers::maxpool_backward(&dy, arg, x_shape)
                }
                (Op::BatchNorm { gamma, .. }, Cache::Bn(c, _)) => {
                    let (dx, dg, db) = layers::bn_backward(&dy, c, gamma);
                    per_node[i] = vec![dg, db];
                    dx
                }
                (Op::Flatten, Cache::Shape(shape)) => dy.reshape(shape.clone()).expect("flatten grad"),
                // straight-through: injected noise is the identity for gradients
                (Op::Inject(_), _) => dy,
                _ => unreachable!("backward requires a training tape"),
            };
        }
        per_node.into_iter().flatten().collect()
    }

    /// Noisy forward in training mode, cross-entropy loss and gradients,
    /// without touching parameters or running statistics.
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        plan: Option<&InjectionPlan>,
        rng: RngStream,
    ) -> Result<(f64, Gradients<T>)> {
        let (loss, grads, _) = self.loss_grads_stats(batch, labels, plan, rng)?;
        Ok((loss, grads))
    }

    /// Loss only, on the same training-mode pass (used by gradient checks).
    pub fn training_loss(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        plan: Option<&InjectionPlan>,
        rng: RngStream,
    ) -> Result<f64> {
        self.check_labels(labels, batch.batch())?;
        let opts = PassOptions {
            training: true,
            ..PassOptions::eval(plan, rng)
        };
        let out = self.run(batch, &opts, false)?;
        Ok(layers::softmax_cross_entropy(&out.logits, labels).0)
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.spec.classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.spec.classes
            )));
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn loss_grads_stats(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        plan: Option<&InjectionPlan>,
        rng: RngStream,
    ) -> Result<(f64, Gradients<T>, Vec<(Vec<f64>, Vec<f64>)>)> {
        self.check_labels(labels, batch.batch())?;
        let opts = PassOptions {
            training: true,
            ..PassOptions::eval(plan, rng)
        };
        let out = self.run(batch, &opts, true)?;
        let (loss, dlogits) = layers::softmax_cross_entropy(&out.logits, labels);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: rng.id.epoch as usize,
                batch: rng.id.batch as usize,
            });
        }
        let tape = out.tape.expect("recorded tape");
        let grads = self.backward(&tape, dlogits);
        let stats = tape
            .caches
            .into_iter()
            .filter_map(|c| match c {
                Cache::Bn(_, s) => Some((s.mean, s.var_unbiased)),
                _ => None,
            })
            .collect();
        Ok((loss, grads, stats))
    }

    /// One optimization step on a noisy batch: straight-through gradients,
    /// parameter update, running-statistics update and optional clamping.
    pub fn backward_and_step(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        plan: Option<&InjectionPlan>,
        rng: RngStream,
        optimizer: &mut Optimizer,
        clamp: bool,
    ) -> Result<f64> {
        let (loss, grads, stats) = self.loss_grads_stats(batch, labels, plan, rng)?;
        optimizer.step(&mut self.params_mut(), &grads);
        for ((rm, rv), (mean, var)) in self.bn_state_mut().into_iter().zip(stats) {
            for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                *r = T::from_f64((1.0 - BN_MOMENTUM) * r.to_f64() + BN_MOMENTUM * m);
            }
            for (r, v) in rv.data_mut().iter_mut().zip(var) {
                *r = T::from_f64((1.0 - BN_MOMENTUM) * r.to_f64() + BN_MOMENTUM * v);
            }
        }
        if clamp {
            self.clamp_weights();
        }
        Ok(loss)
    }

    /// Predicted class per row of the logits.
    pub fn predict(logits: &Tensor<T>) -> Vec<usize> {
        let k = logits.item_len();
        logits.data().chunks(k).map(layers::argmax).collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                spec_index: n.spec_index,
                op: match &n.op {
                    Op::Dense { weight, bias } => Op::Dense {
                        weight: weight.cast(),
                        bias: bias.cast(),
                    },
                    Op::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => Op::Conv {
                        weight: weight.cast(),
                        bias: bias.cast(),
                        stride: *stride,
                        padding: *padding,
                    },
                    Op::Relu => Op::Relu,
                    Op::MaxPool { kernel, stride } => Op::MaxPool {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    Op::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => Op::BatchNorm {
                        gamma: gamma.cast(),
                        beta: beta.cast(),
                        running_mean: running_mean.cast(),
                        running_var: running_var.cast(),
                    },
                    Op::Flatten => Op::Flatten,
                    Op::Inject(id) => Op::Inject(*id),
                },
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            seed: self.seed,
            nodes,
            points: self.points.clone(),
        }
    }
}
