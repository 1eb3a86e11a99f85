//! Shared multi-stage convolutional trunk: backbone, multiplicative
//! channel attention over the fused branches, channel alignment, and the
//! configurable fusion of the last K stages. Both the classification
//! network and the segmentation network are this trunk plus a head.

use rand_chacha::ChaCha8Rng;
use wsol_tensor::{Tape, Tensor, Var};

use crate::config::{Config, Fusion, UpsampleKind};
use crate::error::Result;
use crate::nn::{bind_tensor, kaiming_uniform, BoundConv, Conv2dLayer};

/// Backbone stage output channels, shallow to deep. Each stage halves the
/// resolution, so stage i runs at input_size / 2^(i+1).
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone)]
pub struct Trunk {
    pub stages: Vec<Conv2dLayer>,
    /// Per fused branch: (C_i, latent) and (latent, C_i) projections.
    /// Empty when attention is disabled.
    pub mca_squeeze: Vec<Tensor<f32>>,
    pub mca_expand: Vec<Tensor<f32>>,
    /// 1x1 projections taking each fused branch to the common width.
    pub aligns: Vec<Conv2dLayer>,
    /// 1x1 projection after channel concatenation; `Concat` fusion only.
    pub concat_proj: Option<Conv2dLayer>,
    pub fusion: Fusion,
    pub fuse_k: usize,
    pub upsample: UpsampleKind,
    pub fuse_channels: usize,
}

/// Tape handles for one bound trunk. `params` lists every trainable
/// variable in the same order as [`Trunk::params_mut`].
pub struct BoundTrunk {
    stages: Vec<BoundConv>,
    mca_squeeze: Vec<Var>,
    mca_expand: Vec<Var>,
    aligns: Vec<BoundConv>,
    concat_proj: Option<BoundConv>,
    fusion: Fusion,
    fuse_k: usize,
    upsample: UpsampleKind,
    pub params: Vec<Var>,
}

/// Everything downstream consumers need from one trunk pass.
pub struct TrunkOutput {
    /// (B, C_f, S_f, S_f) at the shallowest fused resolution.
    pub fused: Var,
    /// Raw deepest stage output (B, 128, s, s), for the auxiliary head.
    pub deepest: Var,
}

impl Trunk {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &Config) -> Self {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_c = 3;
        for &out_c in &STAGE_CHANNELS {
            stages.push(Conv2dLayer::new(rng, in_c, out_c, 3, 2, 1));
            in_c = out_c;
        }
        let fused_channels = &STAGE_CHANNELS[NUM_STAGES - cfg.fuse_k..];
        let (mut mca_squeeze, mut mca_expand) = (Vec::new(), Vec::new());
        if cfg.mca {
            for &c in fused_channels {
                mca_squeeze.push(kaiming_uniform(rng, &[c, cfg.mca_latent], c));
                mca_expand.push(kaiming_uniform(rng, &[cfg.mca_latent, c], cfg.mca_latent));
            }
        }
        let aligns = fused_channels
            .iter()
            .map(|&c| Conv2dLayer::new(rng, c, cfg.fuse_channels, 1, 1, 0))
            .collect();
        let concat_proj = (cfg.fusion == Fusion::Concat).then(|| {
            Conv2dLayer::new(rng, cfg.fuse_k * cfg.fuse_channels, cfg.fuse_channels, 1, 1, 0)
        });
        Trunk {
            stages,
            mca_squeeze,
            mca_expand,
            aligns,
            concat_proj,
            fusion: cfg.fusion,
            fuse_k: cfg.fuse_k,
            upsample: cfg.upsample,
            fuse_channels: cfg.fuse_channels,
        }
    }

    pub fn mca_enabled(&self) -> bool {
        !self.mca_squeeze.is_empty()
    }

    /// Trainable parameters in canonical order. Must stay in lockstep with
    /// [`Trunk::bind`] and [`Trunk::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        for (sq, ex) in self.mca_squeeze.iter_mut().zip(&mut self.mca_expand) {
            out.push(sq);
            out.push(ex);
        }
        for a in &mut self.aligns {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        if let Some(p) = &mut self.concat_proj {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("trunk.stage{i}.weight"), &s.weight));
            out.push((format!("trunk.stage{i}.bias"), &s.bias));
        }
        for (i, (sq, ex)) in self.mca_squeeze.iter().zip(&self.mca_expand).enumerate() {
            out.push((format!("trunk.mca{i}.squeeze"), sq));
            out.push((format!("trunk.mca{i}.expand"), ex));
        }
        for (i, a) in self.aligns.iter().enumerate() {
            out.push((format!("trunk.align{i}.weight"), &a.weight));
            out.push((format!("trunk.align{i}.bias"), &a.bias));
        }
        if let Some(p) = &self.concat_proj {
            out.push(("trunk.concat_proj.weight".into(), &p.weight));
            out.push(("trunk.concat_proj.bias".into(), &p.bias));
        }
        out
    }

    /// Registers every parameter on the tape. Binding order defines the
    /// gradient collection order for the optimizer.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> BoundTrunk {
        let mut params = Vec::new();
        let stages = self
            .stages
            .iter()
            .map(|s| s.bind(tape, trainable, &mut params))
            .collect();
        let mca_squeeze = self
            .mca_squeeze
            .iter()
            .zip(&self.mca_expand)
            .flat_map(|(sq, ex)| {
                [
                    bind_tensor(sq, tape, trainable, &mut params),
                    bind_tensor(ex, tape, trainable, &mut params),
                ]
            })
            .collect::<Vec<_>>();
        // Interleaved (squeeze, expand) pairs; split back apart.
        let (mca_squeeze, mca_expand): (Vec<_>, Vec<_>) = mca_squeeze
            .chunks(2)
            .map(|pair| (pair[0], pair[1]))
            .unzip();
        let aligns = self
            .aligns
            .iter()
            .map(|a| a.bind(tape, trainable, &mut params))
            .collect();
        let concat_proj = self
            .concat_proj
            .as_ref()
            .map(|p| p.bind(tape, trainable, &mut params));
        BoundTrunk {
            stages,
            mca_squeeze,
            mca_expand,
            aligns,
            concat_proj,
            fusion: self.fusion,
            fuse_k: self.fuse_k,
            upsample: self.upsample,
            params,
        }
    }
}

impl BoundTrunk {
    /// Full pass over a batch of images (B, 3, S, S).
    pub fn forward(&self, tape: &mut Tape<f32>, images: Var) -> Result<TrunkOutput> {
        let mut x = images;
        let mut stage_outputs = Vec::with_capacity(NUM_STAGES);
        for conv in &self.stages {
            let pre = conv.forward(tape, x)?;
            x = tape.relu(pre)?;
            stage_outputs.push(x);
        }
        let deepest = *stage_outputs.last().unwrap();
        let branches: Vec<Var> = stage_outputs[NUM_STAGES - self.fuse_k..].to_vec();

        let branches = if self.mca_squeeze.is_empty() {
            branches
        } else {
            self.attend(tape, &branches)?
        };

        // Align channels, then upsample every branch to the shallowest
        // (largest) fused resolution.
        let target = {
            let s = tape.shape(branches[0]);
            (s[2], s[3])
        };
        let mut aligned = Vec::with_capacity(branches.len());
        for (branch, align) in branches.iter().zip(&self.aligns) {
            let a = align.forward(tape, *branch)?;
            let shape = tape.shape(a);
            let a = if (shape[2], shape[3]) == target {
                a
            } else {
                match self.upsample {
                    UpsampleKind::Bilinear => tape.upsample_bilinear(a, target.0, target.1)?,
                    UpsampleKind::Nearest => tape.upsample_nearest(a, target.0, target.1)?,
                }
            };
            aligned.push(a);
        }

        let fused = match self.fusion {
            Fusion::Mul => {
                let mut acc = aligned[0];
                for &b in &aligned[1..] {
                    acc = tape.mul(acc, b)?;
                }
                acc
            }
            Fusion::Add => {
                let mut acc = aligned[0];
                for &b in &aligned[1..] {
                    acc = tape.add(acc, b)?;
                }
                acc
            }
            Fusion::Concat => {
                let cat = tape.concat_channels(&aligned)?;
                self.concat_proj
                    .as_ref()
                    .expect("concat fusion built without projection")
                    .forward(tape, cat)?
            }
        };
        Ok(TrunkOutput { fused, deepest })
    }

    fn attend(&self, tape: &mut Tape<f32>, branches: &[Var]) -> Result<Vec<Var>> {
        multiplicative_attention(tape, branches, &self.mca_squeeze, &self.mca_expand)
    }
}

/// Multiplicative channel attention: per-branch squeeze of pooled channel
/// stats, elementwise product across branches as the shared latent,
/// per-branch expand and sigmoid gate. Output shapes equal input shapes.
pub fn multiplicative_attention<T: wsol_tensor::Element>(
    tape: &mut Tape<T>,
    branches: &[Var],
    squeeze: &[Var],
    expand: &[Var],
) -> Result<Vec<Var>> {
    assert_eq!(branches.len(), squeeze.len());
    assert_eq!(branches.len(), expand.len());
    let mut squeezed = Vec::with_capacity(branches.len());
    for (&b, &sq) in branches.iter().zip(squeeze) {
        let pooled = tape.global_avg_pool(b)?;
        let shape = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, vec![shape[0], shape[1]])?;
        squeezed.push(tape.matmul(flat, sq)?);
    }
    let mut latent = squeezed[0];
    for &s in &squeezed[1..] {
        latent = tape.mul(latent, s)?;
    }
    let mut out = Vec::with_capacity(branches.len());
    for (&b, &ex) in branches.iter().zip(expand) {
        let e = tape.matmul(latent, ex)?;
        let gate = tape.sigmoid(e)?;
        let shape = tape.shape(gate).to_vec();
        let gate = tape.reshape(gate, vec![shape[0], shape[1], 1, 1])?;
        out.push(tape.mul(b, gate)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;

    fn base_config() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 32;
        cfg
    }

    fn forward_once(cfg: &Config, images: Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = derive_rng(7, 99, 0);
        let trunk = Trunk::new(&mut rng, cfg);
        let mut tape = Tape::new();
        let bound = trunk.bind(&mut tape, false);
        let x = tape.constant(images);
        let out = bound.forward(&mut tape, x).unwrap();
        (tape.value(out.fused).clone(), tape.value(out.deepest).clone())
    }

    #[test]
    fn fused_output_is_at_shallowest_fused_resolution() {
        let cfg = base_config();
        let images = Tensor::zeros(&[2, 3, 32, 32]);
        let (fused, deepest) = forward_once(&cfg, images);
        // K=3 over a 32px input: stages run at 16/8/4/2, shallowest fused
        // stage is stage 2 at 8x8.
        assert_eq!(fused.shape(), &[2, 64, 8, 8]);
        assert_eq!(deepest.shape(), &[2, 128, 2, 2]);
    }

    #[test]
    fn fuse_k_one_uses_only_the_deepest_stage() {
        let mut cfg = base_config();
        cfg.fuse_k = 1;
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let (fused, _) = forward_once(&cfg, images);
        assert_eq!(fused.shape(), &[1, 64, 2, 2]);
    }

    #[test]
    fn concat_fusion_matches_mul_fusion_shape() {
        let mut cfg = base_config();
        cfg.fusion = Fusion::Concat;
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let (fused, _) = forward_once(&cfg, images);
        assert_eq!(fused.shape(), &[1, 64, 8, 8]);
    }

    #[test]
    fn zeroed_attention_projections_halve_nothing_but_gate_at_half() {
        // With zero squeeze/expand weights the latent and its expansion are
        // zero, the sigmoid gate is exactly 0.5, and attended branches are
        // half their inputs. Observable as the fused map scaling by
        // 0.5^K under multiplicative fusion with fixed align layers.
        let cfg = base_config();
        let mut rng = derive_rng(7, 99, 0);
        let mut trunk = Trunk::new(&mut rng, &cfg);
        let images = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 13 % 31) as f32) / 31.0 + 0.1);

        // Align with identity-free structure: keep biases zero so scaling
        // is observable through the 1x1 convs.
        for a in &mut trunk.aligns {
            a.bias = Tensor::zeros(&[cfg.fuse_channels]);
        }
        let run = |t: &Trunk| {
            let mut tape = Tape::new();
            let bound = t.bind(&mut tape, false);
            let x = tape.constant(images.clone());
            let out = bound.forward(&mut tape, x).unwrap();
            tape.value(out.fused).clone()
        };

        let mut zeroed = trunk.clone();
        for t in zeroed.mca_squeeze.iter_mut().chain(zeroed.mca_expand.iter_mut()) {
            *t = Tensor::zeros(t.shape());
        }
        let gated = run(&zeroed);

        let mut no_mca = trunk.clone();
        no_mca.mca_squeeze.clear();
        no_mca.mca_expand.clear();
        let plain = run(&no_mca);

        let scale = 0.5f32.powi(cfg.fuse_k as i32);
        for (g, p) in gated.data().iter().zip(plain.data()) {
            assert!((g - p * scale).abs() < 1e-5, "{g} vs {}", p * scale);
        }
    }

    #[test]
    fn attention_output_shapes_match_input_shapes() {
        let cfg = base_config();
        let mut rng = derive_rng(1, 99, 1);
        let trunk = Trunk::new(&mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = trunk.bind(&mut tape, false);
        let shapes = [[2usize, 32, 8, 8], [2, 64, 4, 4], [2, 128, 2, 2]];
        let branches: Vec<Var> = shapes
            .iter()
            .map(|s| tape.constant(Tensor::from_fn(s, |i| (i as f32 * 0.1).sin() * 0.5 + 0.5)))
            .collect();
        let out = bound.attend(&mut tape, &branches).unwrap();
        for (v, s) in out.iter().zip(&shapes) {
            assert_eq!(tape.shape(*v), s);
        }
    }

    #[test]
    fn bind_order_matches_params_mut_order() {
        for fusion in [Fusion::Mul, Fusion::Concat] {
            for mca in [true, false] {
                let mut cfg = base_config();
                cfg.fusion = fusion;
                cfg.mca = mca;
                let mut rng = derive_rng(3, 99, 2);
                let mut trunk = Trunk::new(&mut rng, &cfg);
                let mut tape = Tape::new();
                let bound = trunk.bind(&mut tape, true);
                let shapes: Vec<Vec<usize>> = bound
                    .params
                    .iter()
                    .map(|v| tape.shape(*v).to_vec())
                    .collect();
                let named_len = trunk.named_params().len();
                let params = trunk.params_mut();
                assert_eq!(params.len(), shapes.len());
                assert_eq!(params.len(), named_len);
                for (p, s) in params.iter().zip(&shapes) {
                    assert_eq!(p.shape(), s.as_slice());
                }
            }
        }
    }

    #[test]
    fn bound_values_track_mutated_params() {
        let cfg = base_config();
        let mut rng = derive_rng(5, 99, 3);
        let mut trunk = Trunk::new(&mut rng, &cfg);
        {
            let mut params = trunk.params_mut();
            let p = &mut params[4];
            let probe = Tensor::full(p.shape(), 0.125);
            **p = probe;
        }
        let mut tape = Tape::new();
        let bound = trunk.bind(&mut tape, true);
        assert!(tape
            .value(bound.params[4])
            .data()
            .iter()
            .all(|v| *v == 0.125));
    }
}
