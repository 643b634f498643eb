//! Feed-forward softmax classifier shared by every participant of the federation.
//!
//! Parameters live in a single flat [`ParameterVector`] so that they can be
//! exchanged and averaged without knowing the layer structure. For every layer
//! the weight matrix (row-major, `fan_out x fan_in`) is stored first, followed
//! by its bias vector.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledInstance;
use crate::error::{Error, Result};
use crate::seed;

/// Hidden-layer nonlinearity. The output layer is always softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

impl ModelArch {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            layer_sizes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least an input and an output layer, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn slots(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect()
    }
}

/// Flat vector of every weight and bias of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    arch: ModelArch,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(arch: ModelArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::Input(format!(
                "architecture {:?} needs {} parameters, got {}",
                arch.layer_sizes,
                arch.param_count(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("parameter {i} is not finite")));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: ModelArch) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of bias entries within [`values`](Self::values).
    pub fn bias_indices(&self) -> Vec<usize> {
        self.arch
            .slots()
            .into_iter()
            .flat_map(|s| s.biases..s.biases + s.fan_out)
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
}

/// Local optimisation settings shared by both federated algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Local epochs `E` per round.
    pub epochs: usize,
    /// SGD step size. Deliberately has no default.
    pub learning_rate: f64,
    /// Rehearsal rounds `R` run after each newly collected concept.
    pub rounds_per_concept: usize,
    /// Minimum amount of data `L` per concept; the per-class quota is `ceil(L / 2M)`.
    pub min_train_data: usize,
}

impl TrainConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.rounds_per_concept == 0 {
            return Err(Error::Config(
                "batch_size, epochs and rounds_per_concept must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be a positive finite number, got {}",
                self.learning_rate
            )));
        }
        if self.min_train_data < 2 * class_count {
            return Err(Error::Config(format!(
                "min_train_data {} must be at least 2 x class count ({})",
                self.min_train_data,
                2 * class_count
            )));
        }
        Ok(())
    }
}

/// Draws initial parameters: weights from `N(0, gain / fan_in)`, biases zero.
///
/// The gain is 2 for ReLU networks and 1 otherwise.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<ParameterVector> {
    arch.validate()?;
    let mut rng = seed::rng(seed);
    let mut params = ParameterVector::zeros(arch.clone());
    let slots = arch.slots();
    let last = slots.len() - 1;
    for (l, slot) in slots.into_iter().enumerate() {
        let gain = if l < last && arch.activation == Activation::Relu {
            2.0
        } else {
            1.0
        };
        let std = (gain / slot.fan_in as f64).sqrt();
        let weights = &mut params.values[slot.weights..slot.biases];
        for w in weights {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
    }
    Ok(params)
}

fn check_features(arch: &ModelArch, x: &[f64]) -> Result<()> {
    if x.len() != arch.input_dim() {
        return Err(Error::Input(format!(
            "feature vector has dimension {}, model expects {}",
            x.len(),
            arch.input_dim()
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("feature {i} is not finite")));
    }
    Ok(())
}

/// Pre-activations and activations of every layer for one input.
struct ForwardTrace {
    /// `pre[l]` are the pre-activations of layer `l + 1`.
    pre: Vec<Vec<f64>>,
    /// `post[0]` is the input; `post[l]` the output of layer `l`.
    post: Vec<Vec<f64>>,
}

fn forward(params: &ParameterVector, x: &[f64]) -> ForwardTrace {
    let arch = &params.arch;
    let slots = arch.slots();
    let last = slots.len() - 1;
    let mut pre = Vec::with_capacity(slots.len());
    let mut post = Vec::with_capacity(slots.len() + 1);
    post.push(x.to_vec());
    for (l, slot) in slots.iter().enumerate() {
        let input = &post[l];
        let w = &params.values[slot.weights..slot.biases];
        let b = &params.values[slot.biases..slot.biases + slot.fan_out];
        let z: Vec<f64> = (0..slot.fan_out)
            .map(|o| {
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let a = if l == last {
            softmax(&z)
        } else {
            z.iter().map(|&v| arch.activation.apply(v)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    ForwardTrace { pre, post }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class posterior probabilities for `x`.
pub fn predict_proba(params: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    check_features(&params.arch, x)?;
    let mut trace = forward(params, x);
    Ok(trace.post.pop().expect("at least one layer"))
}

/// Most likely class and its probability. Ties go to the smallest class index.
pub fn predict(params: &ParameterVector, x: &[f64]) -> Result<Prediction> {
    let probs = predict_proba(params, x)?;
    let mut label = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[label] {
            label = c;
        }
    }
    Ok(Prediction {
        label,
        confidence: probs[label],
    })
}

fn check_instance(arch: &ModelArch, inst: &LabeledInstance) -> Result<()> {
    check_features(arch, &inst.features)?;
    if inst.label >= arch.class_count() {
        return Err(Error::Input(format!(
            "label {} outside [0, {})",
            inst.label,
            arch.class_count()
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over `batch`.
pub fn loss(params: &ParameterVector, batch: &[&LabeledInstance]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for inst in batch {
        check_instance(&params.arch, inst)?;
        let trace = forward(params, &inst.features);
        let logits = trace.pre.last().expect("output layer");
        total += log_sum_exp(logits) - logits[inst.label];
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy over `batch` and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    params: &ParameterVector,
    batch: &[&LabeledInstance],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("gradient of an empty batch".into()));
    }
    let arch = &params.arch;
    let slots = arch.slots();
    let mut grad = vec![0.0; params.values.len()];
    let mut total = 0.0;
    for inst in batch {
        check_instance(arch, inst)?;
        let trace = forward(params, &inst.features);
        let logits = trace.pre.last().expect("output layer");
        total += log_sum_exp(logits) - logits[inst.label];

        let mut delta = trace.post.last().expect("output layer").clone();
        delta[inst.label] -= 1.0;
        for l in (0..slots.len()).rev() {
            let slot = slots[l];
            let input = &trace.post[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[slot.biases + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &params.values[slot.weights..slot.biases];
            let z_prev = &trace.pre[l - 1];
            delta = (0..slot.fan_in)
                .map(|i| {
                    let back: f64 = delta
                        .iter()
                        .enumerate()
                        .map(|(o, d)| d * w[o * slot.fan_in + i])
                        .sum();
                    back * arch.activation.derivative(z_prev[i], input[i])
                })
                .collect();
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Runs `cfg.epochs` epochs of minibatch SGD over `data`, starting from `params`.
///
/// The data is shuffled once with `seed` and split into batches of
/// `cfg.batch_size` (the trailing partial batch is kept); every epoch walks the
/// same batches in order.
pub fn local_train(
    params: &ParameterVector,
    data: &[LabeledInstance],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParameterVector> {
    if data.is_empty() {
        return Err(Error::Precondition("local training needs data".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for inst in data {
        check_instance(&params.arch, inst)?;
    }
    let mut order: Vec<&LabeledInstance> = data.iter().collect();
    order.shuffle(&mut seed::rng(seed));

    let mut out = params.clone();
    for _ in 0..cfg.epochs {
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = loss_and_gradient(&out, batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical { batch: b });
            }
            for (w, g) in out.values.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
            if out.values.iter().any(|w| !w.is_finite()) {
                return Err(Error::Numerical { batch: b });
            }
        }
    }
    Ok(out)
}

/// Fraction of `data` classified correctly.
pub fn evaluate(params: &ParameterVector, data: &[LabeledInstance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for inst in data {
        if predict(params, &inst.features)?.label == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(features: Vec<f64>, label: usize) -> LabeledInstance {
        LabeledInstance { features, label }
    }

    fn cfg(batch_size: usize, epochs: usize, learning_rate: f64) -> TrainConfig {
        TrainConfig {
            batch_size,
            epochs,
            learning_rate,
            rounds_per_concept: 5,
            min_train_data: 14,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = ModelArch::new(vec![2, 3], Activation::Relu).unwrap();
        let a = init_params(&arch, 7).unwrap();
        let b = init_params(&arch, 7).unwrap();
        assert_eq!(a, b);
        for i in a.bias_indices() {
            assert_eq!(a.values()[i], 0.0);
        }
        let c = init_params(&arch, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_fan_in_fan_out() {
        let arch = ModelArch::new(vec![4, 8, 3], Activation::Tanh).unwrap();
        assert_eq!(arch.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(init_params(&arch, 1).unwrap().len(), 67);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(matches!(
            ModelArch::new(vec![4, 0, 3], Activation::Relu),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ModelArch::new(vec![4], Activation::Relu),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_network_is_uniform() {
        let arch = ModelArch::new(vec![3, 5, 7], Activation::Relu).unwrap();
        let p = ParameterVector::zeros(arch);
        let pred = predict(&p, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(pred.label, 0);
        assert!((pred.confidence - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_linear_forward_pass() {
        // logits = [x0, -x0]; at x = [1, 0] confidence = e/(e + 1/e)
        let arch = ModelArch::new(vec![2, 2], Activation::Relu).unwrap();
        let p = ParameterVector::new(arch, vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let pred = predict(&p, &[1.0, 0.0]).unwrap();
        assert_eq!(pred.label, 0);
        let e = std::f64::consts::E;
        assert!((pred.confidence - e / (e + 1.0 / e)).abs() < 1e-12);
        assert!((pred.confidence - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn predict_rejects_bad_input() {
        let arch = ModelArch::new(vec![2, 2], Activation::Relu).unwrap();
        let p = ParameterVector::zeros(arch);
        assert!(matches!(predict(&p, &[1.0]), Err(Error::Input(_))));
        assert!(matches!(predict(&p, &[1.0, f64::NAN]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_step_leaves_params_unchanged() {
        let arch = ModelArch::new(vec![2, 4, 3], Activation::Tanh).unwrap();
        let p = init_params(&arch, 3).unwrap();
        let data = vec![inst(vec![0.1, 0.2], 0), inst(vec![-1.0, 0.5], 2)];
        let mut c = cfg(1, 3, 1.0);
        c.learning_rate = 0.0;
        let out = local_train(&p, &data, &c, 9).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn single_sample_step_is_one_gradient_step() {
        let arch = ModelArch::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let p = init_params(&arch, 11).unwrap();
        let data = vec![inst(vec![0.4, -0.7, 1.1], 1)];
        let eta = 0.3;
        let out = local_train(&p, &data, &cfg(1, 1, eta), 0).unwrap();

        // central finite differences of the loss
        let h = 1e-6;
        let refs: Vec<&LabeledInstance> = data.iter().collect();
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let g = (loss(&plus, &refs).unwrap() - loss(&minus, &refs).unwrap()) / (2.0 * h);
            let expected = p.values()[i] - eta * g;
            let step = p.values()[i] - out.values()[i];
            let fd_step = p.values()[i] - expected;
            let rel = (step - fd_step).abs() / step.abs().max(fd_step.abs()).max(1e-6);
            assert!(rel < 1e-4, "coordinate {i}: {step} vs {fd_step}");
        }
    }

    #[test]
    fn fits_separable_toy_set() {
        let arch = ModelArch::new(vec![2, 2], Activation::Relu).unwrap();
        let p = init_params(&arch, 5).unwrap();
        let data = vec![
            inst(vec![1.0, 1.0], 0),
            inst(vec![2.0, 0.5], 0),
            inst(vec![-1.0, -1.0], 1),
            inst(vec![-0.5, -2.0], 1),
        ];
        let out = local_train(&p, &data, &cfg(2, 50, 0.5), 1).unwrap();
        assert_eq!(evaluate(&out, &data).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic_and_pure() {
        let arch = ModelArch::new(vec![2, 6, 3], Activation::Relu).unwrap();
        let p = init_params(&arch, 5).unwrap();
        let before = p.clone();
        let data: Vec<_> = (0..37)
            .map(|i| inst(vec![(i as f64).sin(), (i as f64 * 0.7).cos()], i % 3))
            .collect();
        let a = local_train(&p, &data, &cfg(8, 3, 0.1), 42).unwrap();
        let b = local_train(&p, &data, &cfg(8, 3, 0.1), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, before);
        assert!(local_train(&p, &[], &cfg(8, 3, 0.1), 42).is_err());
    }

    #[test]
    fn divergence_is_reported_with_batch_index() {
        let arch = ModelArch::new(vec![1, 2], Activation::Relu).unwrap();
        let p = ParameterVector::new(arch, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let data = vec![inst(vec![1e200], 1)];
        let err = local_train(&p, &data, &cfg(1, 2, 1e200), 0).unwrap_err();
        assert!(matches!(err, Error::Numerical { batch: 0 }), "{err:?}");
    }

    #[test]
    fn evaluate_counts_matches() {
        let arch = ModelArch::new(vec![2, 3], Activation::Relu).unwrap();
        let p = ParameterVector::zeros(arch);
        let all_zero = vec![inst(vec![1.0, 2.0], 0), inst(vec![0.0, 0.0], 0)];
        assert_eq!(evaluate(&p, &all_zero).unwrap(), 1.0);
        let half = vec![inst(vec![1.0, 2.0], 0), inst(vec![0.0, 0.0], 2)];
        assert_eq!(evaluate(&p, &half).unwrap(), 0.5);
        assert!(matches!(evaluate(&p, &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn train_config_validation() {
        assert!(cfg(10, 1, 0.1).validate(7).is_ok());
        assert!(cfg(10, 1, 0.1).validate(8).is_err());
        assert!(cfg(0, 1, 0.1).validate(2).is_err());
        assert!(cfg(10, 1, -0.1).validate(2).is_err());
    }
}
