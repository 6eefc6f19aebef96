//! Domain-adversarial heads: a shared multi-layer discriminator fed through
//! a gradient-reversal layer, applied at two levels of the model.
//!
//! Query level: every aggregated query feature of an augmented image is
//! classified into its augmentation domain. Feature level: each block's
//! refined feature map is summarized by a small conv extractor and classified
//! the same way. Both losses reverse gradients into the model so it learns
//! features the discriminator cannot separate. Images without an
//! augmentation domain are excluded; a batch with none yields a constant
//! zero loss and no gradients.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_rows, Tensor};
use crate::backbone::FeatureMap;
use crate::boq::ModelOutput;
use crate::config::{AdversarialConfig, ModelConfig};
use crate::nn::{Conv2d, Linear, ParamList};

/// Three-layer ReLU MLP classifier shared by both adversarial levels.
pub struct Discriminator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl Discriminator {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, classes: usize) -> Self {
        Discriminator {
            fc1: Linear::new(rng, in_dim, hidden, true),
            fc2: Linear::new(rng, hidden, hidden, true),
            fc3: Linear::new(rng, hidden, classes, true),
        }
    }

    /// `[n, in] -> [n, classes]` logits.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.fc1.forward(x).relu();
        let h = self.fc2.forward(&h).relu();
        self.fc3.forward(&h)
    }

    /// Sets every weight and bias to zero (uniform logits for any input).
    pub fn zero(&self) {
        for lin in [&self.fc1, &self.fc2, &self.fc3] {
            let shape = lin.weight.shape();
            lin.weight
                .set_value(ndarray::ArrayD::zeros(ndarray::IxDyn(&shape)));
            if let Some(b) = &lin.bias {
                let shape = b.shape();
                b.set_value(ndarray::ArrayD::zeros(ndarray::IxDyn(&shape)));
            }
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
        self.fc3.collect_params(&format!("{prefix}.fc3"), out);
    }
}

/// Summarizes a `[N, d]` block feature map into one `d`-vector:
/// ReLU(conv3x3) -> 2x2 average pool -> ReLU(conv3x3) -> global average.
pub struct DomainExtractor {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl DomainExtractor {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        DomainExtractor {
            conv1: Conv2d::new(rng, dim, dim, 3),
            conv2: Conv2d::new(rng, dim, dim, 3),
        }
    }

    /// Requires the spatial grid to be at least 2x2 (for the pooling stage).
    pub fn forward(&self, fm: &FeatureMap) -> Tensor {
        let d = fm.x.shape()[1];
        let grid = fm.x.transpose().reshape(&[d, fm.h, fm.w]);
        let h = self.conv1.forward(&grid).relu().avg_pool2x2();
        let h = self.conv2.forward(&h).relu().global_avg_pool();
        h
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
    }
}

/// Both adversarial heads plus the reversal strength.
pub struct AdversarialHeads {
    pub lambda: f32,
    pub num_domains: usize,
    pub discriminator: Discriminator,
    /// One extractor per aggregation block.
    pub extractors: Vec<DomainExtractor>,
}

impl AdversarialHeads {
    pub fn new(rng: &mut ChaCha8Rng, model: &ModelConfig, adv: &AdversarialConfig) -> Self {
        AdversarialHeads {
            lambda: adv.lambda,
            num_domains: adv.num_domains,
            discriminator: Discriminator::new(
                rng,
                model.feature_dim,
                adv.hidden_dim,
                adv.num_domains,
            ),
            extractors: (0..model.num_blocks)
                .map(|_| DomainExtractor::new(rng, model.feature_dim))
                .collect(),
        }
    }

    /// Query-level loss: cross-entropy over every aggregated query feature
    /// of every augmented image. `domains[i]` is the augmentation domain of
    /// image `i`, or `None` for an unaugmented image.
    pub fn query_loss(&self, outputs: &[ModelOutput], domains: &[Option<u8>]) -> Tensor {
        assert_eq!(outputs.len(), domains.len());
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (out, dom) in outputs.iter().zip(domains) {
            let Some(dom) = dom else { continue };
            let m = out.query_features.shape()[0];
            feats.push(out.query_features.clone());
            labels.extend(std::iter::repeat_n(*dom as usize, m));
        }
        if feats.is_empty() {
            return Tensor::scalar(0.0);
        }
        let x = concat_rows(&feats).grl(self.lambda);
        self.discriminator.forward(&x).cross_entropy_mean(&labels)
    }

    /// Feature-level loss: per block, classify each augmented image's
    /// extracted map summary; average the per-block cross-entropies.
    pub fn feature_loss(&self, outputs: &[ModelOutput], domains: &[Option<u8>]) -> Tensor {
        assert_eq!(outputs.len(), domains.len());
        let aug: Vec<usize> = domains
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|_| i))
            .collect();
        if aug.is_empty() {
            return Tensor::scalar(0.0);
        }
        let labels: Vec<usize> = aug.iter().map(|&i| domains[i].unwrap() as usize).collect();
        let num_blocks = self.extractors.len();
        let mut per_block = Vec::with_capacity(num_blocks);
        for (l, extractor) in self.extractors.iter().enumerate() {
            let rows: Vec<Tensor> = aug
                .iter()
                .map(|&i| {
                    let fm = &outputs[i].block_maps[l];
                    let d = fm.x.shape()[1];
                    extractor.forward(fm).reshape(&[1, d])
                })
                .collect();
            let x = concat_rows(&rows).grl(self.lambda);
            per_block.push(self.discriminator.forward(&x).cross_entropy_mean(&labels));
        }
        let total = crate::autodiff::sum_tensors(&per_block);
        total.scale(1.0 / num_blocks as f32)
    }

    pub fn collect_params(&self, out: &mut ParamList) {
        self.discriminator.collect_params("disc", out);
        for (i, e) in self.extractors.iter().enumerate() {
            e.collect_params(&format!("ext{i}"), out);
        }
    }
}

/// Linear multinomial probe used to measure how separable the augmentation
/// domains remain in a feature space. Returns accuracy on the training set
/// after `steps` of full-batch gradient descent; lower accuracy means the
/// features carry less domain information.
pub fn domain_probe_accuracy(
    features: &Array2<f32>,
    labels: &[usize],
    classes: usize,
    steps: usize,
    lr: f32,
) -> f32 {
    let (n, d) = features.dim();
    assert_eq!(n, labels.len());
    assert!(n > 0);
    let mut w = Array2::<f32>::zeros((d, classes));
    let mut b = ndarray::Array1::<f32>::zeros(classes);
    for _ in 0..steps {
        let logits = features.dot(&w) + &b;
        // softmax - onehot, averaged
        let mut grad_logits = Array2::<f32>::zeros((n, classes));
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f32 = exps.iter().sum();
            for k in 0..classes {
                grad_logits[[i, k]] = exps[k] / sum;
            }
            grad_logits[[i, labels[i]]] -= 1.0;
        }
        grad_logits /= n as f32;
        let gw = features.t().dot(&grad_logits);
        let gb = grad_logits.sum_axis(ndarray::Axis(0));
        w -= &(gw * lr);
        b -= &(gb * lr);
    }
    let logits = features.dot(&w) + &b;
    let mut correct = 0usize;
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0usize;
        for k in 1..classes {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f32 / n as f32
}
