//! Class-agnostic foreground segmentation: the shared trunk with a
//! 1-channel sigmoid head, trained on pseudo labels with a masked binary
//! cross-entropy. Nothing in this module accepts a class label, so the
//! model is class-agnostic by construction.

use rand_chacha::ChaCha8Rng;
use wsol_tensor::{Tape, Tensor, Var};

use crate::config::{Config, UpsampleKind};
use crate::error::{Result, WsolError};
use crate::gppl::PseudoLabel;
use crate::nn::{shuffled_batches, BoundConv, Conv2dLayer, Sgd};
use crate::seeding::{derive_rng, streams};
use crate::trunk::{BoundTrunk, Trunk};

#[derive(Debug, Clone)]
pub struct SegNet {
    pub trunk: Trunk,
    /// 1x1 conv, fused channels -> 1; zero-initialized so the initial
    /// prediction is exactly 0.5 everywhere.
    pub head: Conv2dLayer,
    pub upsample: UpsampleKind,
}

pub struct BoundSegNet {
    trunk: BoundTrunk,
    head: BoundConv,
    upsample: UpsampleKind,
    pub params: Vec<Var>,
}

impl SegNet {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config) -> Self {
        let trunk = Trunk::new(rng, cfg);
        let mut head = Conv2dLayer::new(rng, cfg.fuse_channels, 1, 1, 1, 0);
        head.weight = Tensor::zeros(head.weight.shape());
        head.bias = Tensor::zeros(head.bias.shape());
        SegNet {
            trunk,
            head,
            upsample: cfg.upsample,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = self.trunk.params_mut();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = self.trunk.named_params();
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> BoundSegNet {
        let trunk = self.trunk.bind(tape, trainable);
        let mut params = trunk.params.clone();
        let head = self.head.bind(tape, trainable, &mut params);
        BoundSegNet {
            trunk,
            head,
            upsample: self.upsample,
            params,
        }
    }

    /// Foreground probabilities (B, 1, S, S) for a batch (B, 3, S, S).
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let size = (images.shape()[2], images.shape()[3]);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = bound.forward(&mut tape, x, size)?;
        Ok(tape.value(out).clone())
    }

    /// Single-image convenience: (3, S, S) -> (S, S) probabilities.
    pub fn predict_mask(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        let probs = self.predict(&batch)?;
        let s = probs.shape().to_vec();
        Ok(probs.reshaped(vec![s[2], s[3]])?)
    }
}

impl BoundSegNet {
    /// Trunk -> 1x1 head -> sigmoid -> upsample to `out_size`.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        images: Var,
        out_size: (usize, usize),
    ) -> Result<Var> {
        let out = self.trunk.forward(tape, images)?;
        let logits = self.head.forward(tape, out.fused)?;
        let probs = tape.sigmoid(logits)?;
        let shape = tape.shape(probs);
        let v = if (shape[2], shape[3]) == out_size {
            probs
        } else {
            match self.upsample {
                UpsampleKind::Bilinear => tape.upsample_bilinear(probs, out_size.0, out_size.1)?,
                UpsampleKind::Nearest => tape.upsample_nearest(probs, out_size.0, out_size.1)?,
            }
        };
        Ok(v)
    }
}

/// Masked binary cross-entropy of a (1, 1, H, W) prediction against one
/// pseudo label: conflict pixels carry zero weight, the normalizer is the
/// full pixel count H·W.
pub fn masked_bce_loss(tape: &mut Tape<f32>, pred: Var, label: &PseudoLabel) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape != [1, 1, label.h, label.w] {
        return Err(WsolError::Format {
            what: "masked bce shapes",
            detail: format!("prediction {:?} vs label {}x{}", shape, label.h, label.w),
        });
    }
    let positive = Tensor::new(shape.clone(), label.positive_plane())?;
    let weight = Tensor::new(shape, label.weight_plane())?;
    Ok(tape.masked_bce(pred, &positive, &weight)?)
}

/// Trains the segmenter on (image, pseudo label) pairs. Images whose CAM
/// produced no label must already be filtered out by the caller.
pub fn train_segmenter(
    images: &[Tensor<f32>],
    labels: &[PseudoLabel],
    cfg: &Config,
) -> Result<(SegNet, Vec<f64>)> {
    assert_eq!(images.len(), labels.len());
    let size = cfg.image_size;
    for l in labels {
        if l.h != size || l.w != size {
            return Err(WsolError::Format {
                what: "pseudo label size",
                detail: format!("{}x{} vs image size {size}", l.h, l.w),
            });
        }
    }
    let mut init_rng = derive_rng(cfg.seed, streams::INIT_SEG, 0);
    let mut model = SegNet::new(&mut init_rng, cfg);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs_seg {
        let mut rng = derive_rng(cfg.seed, streams::BATCH_SEG, epoch as u64);
        for batch in shuffled_batches(&mut rng, images.len(), cfg.batch_size) {
            let xs: Vec<Tensor<f32>> = batch.iter().map(|&i| images[i].clone()).collect();
            let b = batch.len();
            let plane = size * size;
            let mut positive = vec![0.0f32; b * plane];
            let mut weight = vec![0.0f32; b * plane];
            for (k, &i) in batch.iter().enumerate() {
                positive[k * plane..(k + 1) * plane].copy_from_slice(&labels[i].positive_plane());
                weight[k * plane..(k + 1) * plane].copy_from_slice(&labels[i].weight_plane());
            }
            let positive = Tensor::new(vec![b, 1, size, size], positive)?;
            let weight = Tensor::new(vec![b, 1, size, size], weight)?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&xs)?);
            let pred = bound.forward(&mut tape, x, (size, size))?;
            let loss = tape.masked_bce(pred, &positive, &weight)?;
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
