//! A small, deterministic CNN trainer used as the fitness evaluator.
//!
//! Plain mini-batch SGD on softmax cross-entropy. A [`TrainedNet`] carries
//! its random stream, so training can stop at the partial-epoch checkpoint
//! and later continue to the full budget with exactly the result an
//! uninterrupted run would have produced.

pub mod data;
mod layers;
mod tensor;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::phenotype::{infer_shapes, Architecture, PhenotypeError};
pub use data::{Dataset, DatasetSplit, SyntheticSpec};
use layers::{Layer, Mode};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] PhenotypeError),
    #[error("input shape {found} does not match network input {expected}")]
    InputMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("dataset split is empty")]
    EmptySplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub partial_epochs: usize,
    pub full_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            partial_epochs: 2,
            full_epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0 < self.partial_epochs && self.partial_epochs < self.full_epochs) {
            return Err(NetError::Config(format!(
                "need 0 < partial_epochs ({}) < full_epochs ({})",
                self.partial_epochs, self.full_epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Class probabilities flattened sample-major: `num_classes` entries per
/// evaluation sample, samples in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticsVector(pub Vec<f64>);

impl SemanticsVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedNet {
    pub architecture: Architecture,
    layers: Vec<Layer>,
    pub epochs_completed: usize,
    rng: ChaCha8Rng,
}

impl PartialEq for TrainedNet {
    fn eq(&self, other: &Self) -> bool {
        self.architecture == other.architecture
            && self.epochs_completed == other.epochs_completed
            && self.parameters() == other.parameters()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Row-major `n x num_classes`.
    pub probabilities: Vec<f64>,
    pub num_classes: usize,
}

fn softmax_rows(logits: &mut [f64], k: usize) {
    for row in logits.chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gather(split: &DatasetSplit, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let s = split.shape;
    let mut data = Vec::with_capacity(idx.len() * s.size());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(split.image(i));
        labels.push(split.labels[i]);
    }
    (Tensor::new(vec![idx.len(), s.channels, s.height, s.width], data), labels)
}

impl TrainedNet {
    /// Freshly initialised network. Initial weights depend only on the
    /// architecture and `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self, NetError> {
        let shapes = infer_shapes(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = arch.input_shape;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (spec, out) in arch.layers.iter().zip(&shapes) {
            layers.push(Layer::build(spec, input, &mut rng));
            input = *out;
        }
        Ok(Self {
            architecture: arch.clone(),
            layers,
            epochs_completed: 0,
            rng,
        })
    }

    /// All trainable parameters, flattened in layer order.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.value.len()).sum()
    }

    fn check_input(&self, split: &DatasetSplit) -> Result<(), NetError> {
        if split.shape != self.architecture.input_shape || split.num_classes != self.architecture.num_classes {
            return Err(NetError::InputMismatch {
                expected: format!("{} / {} classes", self.architecture.input_shape, self.architecture.num_classes),
                found: format!("{} / {} classes", split.shape, split.num_classes),
            });
        }
        Ok(())
    }

    /// Forward pass returning softmax probabilities.
    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let mut t = x;
        for layer in &mut self.layers {
            t = layer.forward(t, mode, &mut self.rng);
        }
        let k = self.architecture.num_classes;
        softmax_rows(&mut t.data, k);
        t
    }

    /// Mean cross-entropy of a forward pass, then backpropagation into the
    /// parameter gradients.
    fn loss_and_backward(&mut self, x: Tensor, labels: &[usize], mode: Mode) -> f64 {
        for p in self.layers.iter_mut().flat_map(|l| l.params_mut()) {
            p.grad.fill(0.0);
        }
        let probs = self.forward(x, mode);
        let k = self.architecture.num_classes;
        let n = labels.len() as f64;
        let mut loss = 0.0;
        let mut grad = probs.clone();
        for (i, &label) in labels.iter().enumerate() {
            loss -= probs.data[i * k + label].max(f64::MIN_POSITIVE).ln();
            grad.data[i * k + label] -= 1.0;
        }
        for g in &mut grad.data {
            *g /= n;
        }
        let mut g = Some(grad);
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(g.expect("gradient chain broken"), i > 0);
        }
        loss / n
    }

    fn sgd_step(&mut self, lr: f64) {
        for p in self.layers.iter_mut().flat_map(|l| l.params_mut()) {
            for (v, g) in p.value.iter_mut().zip(&p.grad) {
                *v -= lr * g;
            }
        }
    }

    /// Continues training until `upto_epochs` epochs have been completed.
    pub fn train_until(
        &mut self,
        data: &DatasetSplit,
        cfg: &TrainConfig,
        upto_epochs: usize,
    ) -> Result<(), NetError> {
        cfg.validate()?;
        self.check_input(data)?;
        if data.is_empty() {
            return Err(NetError::EmptySplit);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        while self.epochs_completed < upto_epochs {
            let epoch = self.epochs_completed;
            order.sort_unstable();
            order.shuffle(&mut self.rng);
            for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
                let (x, labels) = gather(data, idx);
                let loss = self.loss_and_backward(x, &labels, Mode::Train);
                if !loss.is_finite() {
                    return Err(NetError::NonFiniteLoss { epoch, batch });
                }
                self.sgd_step(cfg.learning_rate);
            }
            if !self.parameters().iter().all(|v| v.is_finite()) {
                return Err(NetError::NonFinite(format!("parameters after epoch {epoch}")));
            }
            self.epochs_completed += 1;
        }
        Ok(())
    }

    pub fn evaluate(&mut self, split: &DatasetSplit) -> Result<Evaluation, NetError> {
        self.check_input(split)?;
        if split.is_empty() {
            return Err(NetError::EmptySplit);
        }
        let k = self.architecture.num_classes;
        let mut probabilities = Vec::with_capacity(split.len() * k);
        let all: Vec<usize> = (0..split.len()).collect();
        for idx in all.chunks(64) {
            let (x, _) = gather(split, idx);
            let p = self.forward(x, Mode::Infer);
            p.check_finite("output probabilities")?;
            probabilities.extend_from_slice(&p.data);
        }
        let correct = probabilities
            .chunks(k)
            .zip(&split.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        Ok(Evaluation {
            accuracy: correct as f64 / split.len() as f64,
            probabilities,
            num_classes: k,
        })
    }

    pub fn extract_semantics(&mut self, split: &DatasetSplit) -> Result<SemanticsVector, NetError> {
        Ok(SemanticsVector(self.evaluate(split)?.probabilities))
    }
}

/// Trains a fresh network for `upto_epochs` epochs.
pub fn train(
    arch: &Architecture,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    upto_epochs: usize,
) -> Result<TrainedNet, NetError> {
    cfg.validate()?;
    if upto_epochs > cfg.full_epochs {
        return Err(NetError::Config(format!(
            "upto_epochs {upto_epochs} exceeds full_epochs {}",
            cfg.full_epochs
        )));
    }
    let mut net = TrainedNet::init(arch, cfg.seed)?;
    net.train_until(data, cfg, upto_epochs)?;
    Ok(net)
}

/// Largest relative disagreement between backpropagated gradients and
/// central finite differences, over `n_params` randomly chosen parameters.
///
/// Runs in training mode with batch statistics and dropout disabled, so
/// repeated checks give identical results.
pub fn gradient_check(
    arch: &Architecture,
    batch: &DatasetSplit,
    epsilon: f64,
    n_params: usize,
    seed: u64,
) -> Result<f64, NetError> {
    let mut net = TrainedNet::init(arch, seed)?;
    net.check_input(batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (x, labels) = gather(batch, &idx);
    net.loss_and_backward(x.clone(), &labels, Mode::TrainNoDropout);

    // (layer, param, element) for every scalar parameter
    let mut slots = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        for (pi, p) in layer.params().iter().enumerate() {
            slots.extend((0..p.value.len()).map(|e| (li, pi, e)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let chosen = index::sample(&mut rng, slots.len(), n_params.min(slots.len()));
    let analytic: Vec<f64> = chosen
        .iter()
        .map(|s| {
            let (li, pi, e) = slots[s];
            net.layers[li].params()[pi].grad[e]
        })
        .collect();

    let loss_at = |net: &mut TrainedNet, slot: (usize, usize, usize), value: f64| {
        let (li, pi, e) = slot;
        net.layers[li].params_mut()[pi].value[e] = value;
        let probs = net.forward(x.clone(), Mode::TrainNoDropout);
        let k = net.architecture.num_classes;
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs.data[i * k + l].ln())
            .sum::<f64>()
            / labels.len() as f64
    };

    let mut worst: f64 = 0.0;
    for (s, a) in chosen.iter().zip(analytic) {
        let slot = slots[s];
        let (li, pi, e) = slot;
        let w = net.layers[li].params()[pi].value[e];
        let plus = loss_at(&mut net, slot, w + epsilon);
        let minus = loss_at(&mut net, slot, w - epsilon);
        loss_at(&mut net, slot, w);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-10 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phenotype::{LayerSpec, Shape3};

    fn arch(layers: Vec<LayerSpec>, shape: Shape3, classes: usize) -> Architecture {
        let mut layers = layers;
        layers.push(LayerSpec::DenseOutput { units: classes });
        Architecture {
            input_shape: shape,
            num_classes: classes,
            layers,
        }
    }

    fn tiny_data(seed: u64, n: usize) -> Dataset {
        SyntheticSpec {
            height: 8,
            width: 8,
            samples: n,
            noise: 0.2,
            seed,
            ..Default::default()
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_untrained() {
        let ds = tiny_data(1, 80);
        let a = arch(vec![LayerSpec::Conv { filters: 32, kernel: 3 }], ds.shape(), 2);
        let cfg = TrainConfig::default();
        let mut net = train(&a, &ds.train, &cfg, 0).unwrap();
        assert_eq!(net.epochs_completed, 0);
        assert_eq!(net, TrainedNet::init(&a, cfg.seed).unwrap());
        let acc = net.evaluate(&ds.validation).unwrap().accuracy;
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn resume_equals_straight_run() {
        let ds = tiny_data(2, 60);
        let a = arch(
            vec![
                LayerSpec::Conv { filters: 32, kernel: 3 },
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::MaxPool,
                LayerSpec::BatchNorm,
            ],
            ds.shape(),
            2,
        );
        let cfg = TrainConfig { batch_size: 8, seed: 99, ..Default::default() };
        let mut resumed = train(&a, &ds.train, &cfg, 2).unwrap();
        resumed.train_until(&ds.train, &cfg, 5).unwrap();
        let straight = train(&a, &ds.train, &cfg, 5).unwrap();
        assert_eq!(resumed.parameters(), straight.parameters());
        assert_eq!(resumed, straight);
        let (mut r, mut s) = (resumed, straight);
        assert_eq!(r.evaluate(&ds.test).unwrap(), s.evaluate(&ds.test).unwrap());
    }

    #[test]
    fn learns_separable_data() {
        let ds = SyntheticSpec { noise: 0.0, samples: 400, seed: 3, ..Default::default() }
            .generate()
            .unwrap();
        let a = arch(
            vec![
                LayerSpec::Conv { filters: 32, kernel: 3 },
                LayerSpec::MaxPool,
                LayerSpec::BatchNorm,
                LayerSpec::MaxPool,
            ],
            ds.shape(),
            2,
        );
        let cfg = TrainConfig { seed: 4, ..Default::default() };
        let mut net = train(&a, &ds.train, &cfg, cfg.full_epochs).unwrap();
        let acc = net.evaluate(&ds.validation).unwrap().accuracy;
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn semantics_are_row_stochastic() {
        let ds = tiny_data(5, 60);
        let a = arch(vec![LayerSpec::AvgPool, LayerSpec::Conv { filters: 32, kernel: 5 }], ds.shape(), 2);
        let mut net = train(&a, &ds.train, &TrainConfig::default(), 2).unwrap();
        let s = net.extract_semantics(&ds.validation).unwrap();
        assert_eq!(s.len(), ds.validation.len() * 2);
        for block in s.0.chunks(2) {
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(block.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn mismatched_split_is_rejected() {
        let ds = tiny_data(6, 40);
        let a = arch(vec![LayerSpec::BatchNorm], Shape3::new(4, 4, 1), 2);
        let mut net = TrainedNet::init(&a, 0).unwrap();
        assert!(matches!(net.evaluate(&ds.validation), Err(NetError::InputMismatch { .. })));
    }

    #[test]
    fn bad_configs() {
        let c = TrainConfig { partial_epochs: 3, full_epochs: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let ds = tiny_data(7, 40);
        let a = arch(vec![], ds.shape(), 2);
        assert!(train(&a, &ds.train, &TrainConfig::default(), 11).is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_non_finite_loss() {
        let ds = tiny_data(8, 60);
        let a = arch(vec![LayerSpec::Conv { filters: 32, kernel: 5 }], ds.shape(), 2);
        let cfg = TrainConfig { learning_rate: 1e200, ..Default::default() };
        let err = train(&a, &ds.train, &cfg, 3).unwrap_err();
        assert!(matches!(err, NetError::NonFiniteLoss { .. } | NetError::NonFinite(_)), "{err:?}");
    }

    #[test]
    fn gradient_check_zero_subset() {
        let ds = tiny_data(9, 40);
        let a = arch(vec![LayerSpec::Conv { filters: 32, kernel: 3 }], ds.shape(), 2);
        assert_eq!(gradient_check(&a, &ds.train.head(4), 1e-5, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn gradient_check_every_layer_kind() {
        let ds = tiny_data(10, 40);
        let batch = ds.train.head(6);
        for layers in [
            vec![LayerSpec::Conv { filters: 32, kernel: 3 }, LayerSpec::MaxPool],
            vec![LayerSpec::Conv { filters: 32, kernel: 5 }, LayerSpec::AvgPool, LayerSpec::BatchNorm],
            vec![LayerSpec::BatchNorm, LayerSpec::Conv { filters: 32, kernel: 3 }, LayerSpec::Dropout { rate: 0.5 }],
        ] {
            let a = arch(layers, ds.shape(), 2);
            let e1 = gradient_check(&a, &batch, 1e-5, 60, 3).unwrap();
            let e2 = gradient_check(&a, &batch, 1e-5, 60, 3).unwrap();
            assert_eq!(e1, e2);
            assert!(e1 < 1e-5, "{:?}: {e1}", a.layers);
        }
    }
}
