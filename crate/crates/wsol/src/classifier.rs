//! Standalone image classifier used at inference time: the same conv
//! backbone as the trunk with a single linear head on the pooled deepest
//! stage. Kept separate from the localization networks so classification
//! and localization stay decoupled.

use rand_chacha::ChaCha8Rng;
use wsol_tensor::{Tape, Tensor, Var};

use crate::config::Config;
use crate::error::{Result, WsolError};
use crate::nn::{bind_tensor, shuffled_batches, BoundConv, Conv2dLayer, Sgd};
use crate::seeding::{derive_rng, streams};
use crate::trunk::STAGE_CHANNELS;

#[derive(Debug, Clone)]
pub struct Classifier {
    pub stages: Vec<Conv2dLayer>,
    /// (deepest channels, num_classes); zero-initialized.
    pub head: Tensor<f32>,
    pub num_classes: usize,
}

pub struct BoundClassifier {
    stages: Vec<BoundConv>,
    head: Var,
    pub params: Vec<Var>,
}

impl Classifier {
    pub fn new(rng: &mut ChaCha8Rng, num_classes: usize) -> Self {
        let mut stages = Vec::with_capacity(STAGE_CHANNELS.len());
        let mut in_c = 3;
        for &out_c in &STAGE_CHANNELS {
            stages.push(Conv2dLayer::new(rng, in_c, out_c, 3, 2, 1));
            in_c = out_c;
        }
        Classifier {
            stages,
            head: Tensor::zeros(&[in_c, num_classes]),
            num_classes,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.head);
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), &s.weight));
            out.push((format!("stage{i}.bias"), &s.bias));
        }
        out.push(("head.weight".into(), &self.head));
        out
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> BoundClassifier {
        let mut params = Vec::new();
        let stages = self
            .stages
            .iter()
            .map(|s| s.bind(tape, trainable, &mut params))
            .collect();
        let head = bind_tensor(&self.head, tape, trainable, &mut params);
        BoundClassifier {
            stages,
            head,
            params,
        }
    }

    /// Logits (B, num_classes) for a batch (B, 3, S, S).
    pub fn predict_logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = bound.forward(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Per-image class ids ordered best-first. Ties break toward the
    /// lower class id, so ranking is fully deterministic.
    pub fn predict_ranks(&self, images: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
        let logits = self.predict_logits(images)?;
        Ok((0..logits.shape()[0])
            .map(|b| rank_logits(logits.slice_first(b).data()))
            .collect())
    }
}

impl BoundClassifier {
    pub fn forward(&self, tape: &mut Tape<f32>, images: Var) -> Result<Var> {
        let mut x = images;
        for conv in &self.stages {
            let pre = conv.forward(tape, x)?;
            x = tape.relu(pre)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let shape = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, vec![shape[0], shape[1]])?;
        Ok(tape.matmul(flat, self.head)?)
    }
}

/// Descending argsort with index ascending as the tie-break.
pub fn rank_logits(logits: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    order
}

/// Cross-entropy training of the standalone classifier.
pub fn train_classifier(
    images: &[Tensor<f32>],
    labels: &[usize],
    num_classes: usize,
    cfg: &Config,
) -> Result<(Classifier, Vec<f64>)> {
    assert_eq!(images.len(), labels.len());
    let mut init_rng = derive_rng(cfg.seed, streams::INIT_CLS, 0);
    let mut model = Classifier::new(&mut init_rng, num_classes);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs_cls {
        let mut rng = derive_rng(cfg.seed, streams::BATCH_CLS, epoch as u64);
        for batch in shuffled_batches(&mut rng, images.len(), cfg.batch_size) {
            let xs: Vec<Tensor<f32>> = batch.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&xs)?);
            let logits = bound.forward(&mut tape, x)?;
            let loss = tape.softmax_cross_entropy(logits, &ys)?;
            let loss_value = f64::from(tape.value(loss).item());
            if !loss_value.is_finite() {
                return Err(WsolError::NonFiniteLoss {
                    step: curve.len(),
                    value: loss_value,
                });
            }
            curve.push(loss_value);
            tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound
                .params
                .iter()
                .map(|v| tape.grad_tensor(*v).expect("trainable parameter has a gradient"))
                .collect();
            opt.step(model.params_mut(), &grads);
        }
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_are_a_permutation_ordered_by_logit() {
        assert_eq!(rank_logits(&[0.1, 0.9, -0.5, 0.3]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn rank_ties_break_toward_lower_class_id() {
        assert_eq!(rank_logits(&[0.5, 0.7, 0.5, 0.5]), vec![1, 0, 2, 3]);
    }

    fn color_dataset(n: usize, size: usize) -> (Vec<Tensor<f32>>, Vec<usize>) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            images.push(Tensor::from_fn(&[3, size, size], |j| {
                let c = j / (size * size);
                let hot = if label == 0 { 0 } else { 2 };
                if c == hot {
                    0.85
                } else {
                    0.15 + ((j % 9) as f32) / 90.0
                }
            }));
            labels.push(label);
        }
        (images, labels)
    }

    #[test]
    fn trains_to_high_accuracy_on_trivial_colors() {
        let (images, labels) = color_dataset(32, 32);
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg.epochs_cls = 30;
        let (model, curve) = train_classifier(&images, &labels, 2, &cfg).unwrap();
        assert!((curve[0] - (2.0f64).ln()).abs() < 1e-5);
        let ranks = model
            .predict_ranks(&Tensor::stack(&images).unwrap())
            .unwrap();
        let correct = ranks
            .iter()
            .zip(&labels)
            .filter(|(r, l)| r[0] == **l)
            .count();
        assert!(correct as f64 / labels.len() as f64 >= 0.99);
    }

    #[test]
    fn training_is_reproducible() {
        let (images, labels) = color_dataset(8, 32);
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg.epochs_cls = 2;
        cfg.batch_size = 8;
        let (_, a) = train_classifier(&images, &labels, 2, &cfg).unwrap();
        let (_, b) = train_classifier(&images, &labels, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
