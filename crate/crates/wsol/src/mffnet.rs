//! Classification-stage network: trunk plus classification and auxiliary
//! heads, the three fusion strategies as standalone operations, and CAM
//! extraction from the fused map.
//!
//! The fusion ops are generic over the element type so their gradient
//! contracts can be checked in 64-bit: multiplicative fusion couples the
//! branch gradients (the gradient w.r.t. one branch carries the other
//! branches' values), additive fusion yields a constant gradient.

use rand_chacha::ChaCha8Rng;
use wsol_tensor::{Element, Tape, Tensor, Var};

use crate::cam::{minmax_normalize, CamMap};
use crate::config::Config;
use crate::error::{Result, WsolError};
use crate::nn::{bind_tensor, shuffled_batches, Sgd};
use crate::seeding::{derive_rng, streams};
use crate::trunk::{multiplicative_attention, BoundTrunk, Trunk, STAGE_CHANNELS};

// ── Fusion operations ────────────────────────────────────────────────

/// Fused map plus its spatial mean, still on the tape.
pub struct FusedFeature {
    /// (B, C, H, W).
    pub fused_map: Var,
    /// (B, C): per-channel spatial mean of the fused map.
    pub pooled: Var,
}

fn pool_fused<T: Element>(tape: &mut Tape<T>, fused: Var) -> Result<FusedFeature> {
    let pooled = tape.global_avg_pool(fused)?;
    let shape = tape.shape(pooled).to_vec();
    let pooled = tape.reshape(pooled, vec![shape[0], shape[1]])?;
    Ok(FusedFeature {
        fused_map: fused,
        pooled,
    })
}

/// Elementwise product of three aligned branches. The gradient of any
/// pooled channel w.r.t. one branch element is the product of the other
/// two branches at that element divided by H·W.
pub fn fuse_multiplicative<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    z: Var,
) -> Result<FusedFeature> {
    let xy = tape.mul(x, y)?;
    let fused = tape.mul(xy, z)?;
    pool_fused(tape, fused)
}

/// Elementwise sum of three aligned branches. The gradient of any pooled
/// channel w.r.t. every branch element is the constant 1/(H·W).
pub fn fuse_additive<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    z: Var,
) -> Result<FusedFeature> {
    let xy = tape.add(x, y)?;
    let fused = tape.add(xy, z)?;
    pool_fused(tape, fused)
}

/// Channel concatenation of three aligned branches followed by a 1x1
/// projection back to the common width. `proj` is a (C_out, 3·C, 1, 1)
/// kernel.
pub fn fuse_concat<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    z: Var,
    proj: Var,
) -> Result<FusedFeature> {
    let cat = tape.concat_channels(&[x, y, z])?;
    let fused = tape.conv2d(cat, proj, 1, 0)?;
    pool_fused(tape, fused)
}

/// Channel attention over exactly three branches; see
/// [`multiplicative_attention`] for the computation. Each `squeeze[i]` is
/// (C_i, C'), each `expand[i]` is (C', C_i).
pub fn mca<T: Element>(
    tape: &mut Tape<T>,
    features: &[Var],
    squeeze: &[Var],
    expand: &[Var],
) -> Result<Vec<Var>> {
    if features.len() != 3 || squeeze.len() != 3 || expand.len() != 3 {
        return Err(WsolError::Config(format!(
            "channel attention takes exactly 3 branches, got {}",
            features.len()
        )));
    }
    multiplicative_attention(tape, features, squeeze, expand)
}

// ── Network ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MffNet {
    pub trunk: Trunk,
    /// (C_f, num_classes); zero-initialized so the first forward pass
    /// yields uniform logits.
    pub cls_weight: Tensor<f32>,
    /// (deepest channels, num_classes); zero-initialized.
    pub aux_weight: Tensor<f32>,
    pub num_classes: usize,
}

pub struct BoundMffNet {
    pub trunk: BoundTrunk,
    cls: Var,
    aux: Var,
    pub params: Vec<Var>,
}

/// Tape handles from one forward pass.
pub struct MffForward {
    pub fused: Var,
    pub pooled: Var,
    pub logits: Var,
    pub aux_logits: Var,
}

/// Plain-tensor forward results for inference.
pub struct FusionOutput {
    /// (B, C_f, S_f, S_f).
    pub fused_map: Tensor<f32>,
    /// (B, C_f).
    pub pooled: Tensor<f32>,
    /// (B, num_classes).
    pub logits: Tensor<f32>,
    pub aux_logits: Tensor<f32>,
}

impl MffNet {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config, num_classes: usize) -> Self {
        let trunk = Trunk::new(rng, cfg);
        let deep = *STAGE_CHANNELS.last().unwrap();
        MffNet {
            trunk,
            cls_weight: Tensor::zeros(&[cfg.fuse_channels, num_classes]),
            aux_weight: Tensor::zeros(&[deep, num_classes]),
            num_classes,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = self.trunk.params_mut();
        out.push(&mut self.cls_weight);
        out.push(&mut self.aux_weight);
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = self.trunk.named_params();
        out.push(("cls.weight".into(), &self.cls_weight));
        out.push(("aux.weight".into(), &self.aux_weight));
        out
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> BoundMffNet {
        let trunk = self.trunk.bind(tape, trainable);
        let mut params = trunk.params.clone();
        let cls = bind_tensor(&self.cls_weight, tape, trainable, &mut params);
        let aux = bind_tensor(&self.aux_weight, tape, trainable, &mut params);
        BoundMffNet {
            trunk,
            cls,
            aux,
            params,
        }
    }

    /// Inference pass without gradients.
    pub fn infer(&self, images: &Tensor<f32>) -> Result<FusionOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let f = bound.forward(&mut tape, x)?;
        Ok(FusionOutput {
            fused_map: tape.value(f.fused).clone(),
            pooled: tape.value(f.pooled).clone(),
            logits: tape.value(f.logits).clone(),
            aux_logits: tape.value(f.aux_logits).clone(),
        })
    }
}

impl BoundMffNet {
    pub fn forward(&self, tape: &mut Tape<f32>, images: Var) -> Result<MffForward> {
        let out = self.trunk.forward(tape, images)?;
        let feature = pool_fused(tape, out.fused)?;
        let logits = tape.matmul(feature.pooled, self.cls)?;
        let deep_pool = tape.global_avg_pool(out.deepest)?;
        let shape = tape.shape(deep_pool).to_vec();
        let deep_flat = tape.reshape(deep_pool, vec![shape[0], shape[1]])?;
        let aux_logits = tape.matmul(deep_flat, self.aux)?;
        Ok(MffForward {
            fused: out.fused,
            pooled: feature.pooled,
            logits,
            aux_logits,
        })
    }
}

// ── CAM extraction ───────────────────────────────────────────────────

/// Weights one image's fused map (C, H, W) by the classifier column of
/// `class_id`, rectifies, and min-max normalizes into [0, 1]. A map with
/// no positive response stays all zero.
pub fn compute_cam(
    fused: &Tensor<f32>,
    cls_weight: &Tensor<f32>,
    class_id: usize,
) -> Result<CamMap> {
    let shape = fused.shape();
    if shape.len() != 3 || cls_weight.ndim() != 2 || cls_weight.shape()[0] != shape[0] {
        return Err(WsolError::Format {
            what: "cam inputs",
            detail: format!(
                "fused {:?} vs weights {:?}",
                shape,
                cls_weight.shape()
            ),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert!(class_id < cls_weight.shape()[1], "class id out of range");
    let mut values = vec![0.0f32; h * w];
    for ch in 0..c {
        let weight = cls_weight.at2(ch, class_id);
        if weight == 0.0 {
            continue;
        }
        let plane = &fused.data()[ch * h * w..(ch + 1) * h * w];
        for (v, p) in values.iter_mut().zip(plane) {
            *v += weight * p;
        }
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    minmax_normalize(&mut values);
    Ok(CamMap::new(h, w, values, Some(class_id)))
}

// ── Training ─────────────────────────────────────────────────────────

/// Joint cross-entropy training of the classification network. Returns
/// the model and the per-step loss curve.
pub fn train_mffnet(
    images: &[Tensor<f32>],
    labels: &[usize],
    num_classes: usize,
    cfg: &Config,
) -> Result<(MffNet, Vec<f64>)> {
    assert_eq!(images.len(), labels.len());
    let mut init_rng = derive_rng(cfg.seed, streams::INIT_CAM, 0);
    let mut model = MffNet::new(&mut init_rng, cfg, num_classes);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs_cam {
        let mut rng = derive_rng(cfg.seed, streams::BATCH_CAM, epoch as u64);
        for batch in shuffled_batches(&mut rng, images.len(), cfg.batch_size) {
            let xs: Vec<Tensor<f32>> = batch.iter().map(|&i| images[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&xs)?);
            let f = bound.forward(&mut tape, x)?;
            let ce = tape.softmax_cross_entropy(f.logits, &ys)?;
            let loss = if cfg.aux {
                let ce_aux = tape.softmax_cross_entropy(f.aux_logits, &ys)?;
                tape.add(ce, ce_aux)?
            } else {
                ce
            };
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
