//! Model architectures: residual encoder, transposed-convolution decoder and
//! the pooled classifier head.
//!
//! The default encoder is a reduced four-stage residual network (channels
//! 16/32/64/128, one block per stage); `ArchConfig::resnet18_like` selects a
//! deeper variant in the same family. Spatial size halves (ceiling division)
//! at every stage, so the default 4×295×166 window maps to 128×19×11
//! features. The decoder mirrors the stage geometry back to the input shape.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout_backward, dropout_forward, leaky_relu, leaky_relu_backward, BatchNorm1d, BatchNorm2d,
    Bn1dCache, BnCache, BnGrad, Conv2d, Conv2dGrad, Linear, LinearGrad, TConv2d, TConv2dGrad,
};
use super::scalar::Scalar;
use super::LearnError;

/// Fixed architectural hyperparameters shared by encoder, decoder and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    /// Output channels per stage; each stage downsamples by 2.
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage; the first block of a stage downsamples.
    pub blocks_per_stage: usize,
    pub classifier_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            input_hw: (295, 166),
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            classifier_hidden: 64,
            leaky_slope: 0.01,
        }
    }
}

impl ArchConfig {
    /// Parameter-count-comparable variant of the classic 18-layer residual
    /// network (~11 M parameters).
    pub fn resnet18_like() -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            classifier_hidden: 256,
            ..Self::default()
        }
    }

    /// Tiny configuration for whole-model finite-difference checks.
    pub fn tiny(in_channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            in_channels,
            input_hw,
            stage_channels: vec![3, 4],
            blocks_per_stage: 1,
            classifier_hidden: 6,
            leaky_slope: 0.01,
        }
    }

    /// Spatial sizes entering each stage, ending with the feature-map size.
    pub fn spatial_chain(&self) -> Vec<(usize, usize)> {
        let mut chain = vec![self.input_hw];
        for _ in &self.stage_channels {
            let (h, w) = *chain.last().unwrap();
            chain.push((h.div_ceil(2), w.div_ceil(2)));
        }
        chain
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        *self.spatial_chain().last().unwrap()
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    /// 1×1 strided projection shortcut; `None` for the identity shortcut.
    pub skip: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    slope: f64,
}

pub struct ResBlockCache<T: Scalar> {
    x: Array4<T>,
    bn1: BnCache<T>,
    bn2: BnCache<T>,
    skip_bn: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
pub struct ResBlockGrads<T: Scalar> {
    pub conv1: Conv2dGrad<T>,
    pub bn1: BnGrad<T>,
    pub conv2: Conv2dGrad<T>,
    pub bn2: BnGrad<T>,
    pub skip: Option<(Conv2dGrad<T>, BnGrad<T>)>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(
        in_c: usize,
        out_c: usize,
        stride: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new(in_c, out_c, 3, stride, 1, slope, rng);
        let bn1 = BatchNorm2d::new(out_c);
        let conv2 = Conv2d::new(out_c, out_c, 3, 1, 1, slope, rng);
        let bn2 = BatchNorm2d::new(out_c);
        let skip = if stride != 1 || in_c != out_c {
            Some((Conv2d::new(in_c, out_c, 1, stride, 0, slope, rng), BatchNorm2d::new(out_c)))
        } else {
            None
        };
        Self { conv1, bn1, conv2, bn2, skip, slope }
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, ResBlockCache<T>) {
        let c1 = self.conv1.forward(x);
        let (b1, bn1_cache) = self.bn1.forward_train(&c1);
        let h1 = leaky_relu(&b1, self.slope);
        let c2 = self.conv2.forward(&h1);
        let (b2, bn2_cache) = self.bn2.forward_train(&c2);
        let (shortcut, skip_cache) = match &mut self.skip {
            Some((conv_s, bn_s)) => {
                let s = conv_s.forward(x);
                let (so, sc) = bn_s.forward_train(&s);
                (so, Some(sc))
            }
            None => (x.clone(), None),
        };
        let pre = &b2 + &shortcut;
        let y = leaky_relu(&pre, self.slope);
        (y, ResBlockCache { x: x.clone(), bn1: bn1_cache, bn2: bn2_cache, skip_bn: skip_cache })
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let h1 = leaky_relu(&self.bn1.forward_eval(&self.conv1.forward(x)), self.slope);
        let b2 = self.bn2.forward_eval(&self.conv2.forward(&h1));
        let shortcut = match &self.skip {
            Some((conv_s, bn_s)) => bn_s.forward_eval(&conv_s.forward(x)),
            None => x.clone(),
        };
        leaky_relu(&(&b2 + &shortcut), self.slope)
    }

    pub fn backward(&self, cache: &ResBlockCache<T>, dy: &Array4<T>) -> (Array4<T>, ResBlockGrads<T>) {
        // recompute the pre-activation of the output from the caches
        let b2 = self.bn2.affine_of_xhat(&cache.bn2.xhat);
        let shortcut = match (&self.skip, &cache.skip_bn) {
            (Some((_, bn_s)), Some(sc)) => bn_s.affine_of_xhat(&sc.xhat),
            _ => cache.x.clone(),
        };
        let pre = &b2 + &shortcut;
        let dpre = leaky_relu_backward(&pre, dy, self.slope);

        // main branch
        let (dc2, bn2_grad) = self.bn2.backward_train(&dpre, &cache.bn2);
        let b1 = self.bn1.affine_of_xhat(&cache.bn1.xhat);
        let h1 = leaky_relu(&b1, self.slope);
        let (dh1, conv2_grad) = self.conv2.backward(&h1, &dc2);
        let db1 = leaky_relu_backward(&b1, &dh1, self.slope);
        let (dc1, bn1_grad) = self.bn1.backward_train(&db1, &cache.bn1);
        let (dx_main, conv1_grad) = self.conv1.backward(&cache.x, &dc1);

        // shortcut branch
        let (dx, skip_grad) = match (&self.skip, &cache.skip_bn) {
            (Some((conv_s, bn_s)), Some(sc)) => {
                let (ds, bn_s_grad) = bn_s.backward_train(&dpre, sc);
                let (dx_s, conv_s_grad) = conv_s.backward(&cache.x, &ds);
                (&dx_main + &dx_s, Some((conv_s_grad, bn_s_grad)))
            }
            _ => (&dx_main + &dpre, None),
        };
        (
            dx,
            ResBlockGrads {
                conv1: conv1_grad,
                bn1: bn1_grad,
                conv2: conv2_grad,
                bn2: bn2_grad,
                skip: skip_grad,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Residual feature encoder: `[B, C_in, H, W]` → `[B, C_f, ceil(H/2^S), ceil(W/2^S)]`.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub blocks: Vec<ResBlock<T>>,
    pub arch: ArchConfig,
}

pub struct EncoderCache<T: Scalar> {
    blocks: Vec<ResBlockCache<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads<T: Scalar> {
    pub blocks: Vec<ResBlockGrads<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = arch.in_channels;
        for &out_c in &arch.stage_channels {
            blocks.push(ResBlock::new(in_c, out_c, 2, arch.leaky_slope, rng));
            for _ in 1..arch.blocks_per_stage {
                blocks.push(ResBlock::new(out_c, out_c, 1, arch.leaky_slope, rng));
            }
            in_c = out_c;
        }
        Self { blocks, arch: arch.clone() }
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, EncoderCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &mut self.blocks {
            let (next, cache) = block.forward_train(&h);
            caches.push(cache);
            h = next;
        }
        (h, EncoderCache { blocks: caches })
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward_eval(&h);
        }
        h
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dfeat: &Array4<T>) -> (Array4<T>, EncoderGrads<T>) {
        let mut grads: Vec<ResBlockGrads<T>> = Vec::with_capacity(self.blocks.len());
        let mut dy = dfeat.clone();
        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dx, g) = block.backward(bcache, &dy);
            grads.push(g);
            dy = dx;
        }
        grads.reverse();
        (dy, EncoderGrads { blocks: grads })
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecStage<T: Scalar> {
    pub tconv: TConv2d<T>,
    /// `None` on the final (linear) reconstruction stage.
    pub bn: Option<BatchNorm2d<T>>,
}

/// Transposed-convolution decoder mirroring the encoder's stage geometry
/// back to the input window shape.
#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    pub stages: Vec<DecStage<T>>,
    slope: f64,
}

pub struct DecoderCache<T: Scalar> {
    stages: Vec<(Array4<T>, Option<BnCache<T>>)>,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads<T: Scalar> {
    pub stages: Vec<(TConv2dGrad<T>, Option<BnGrad<T>>)>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let chain = arch.spatial_chain();
        let n_stages = arch.stage_channels.len();
        let mut stages = Vec::with_capacity(n_stages);
        for i in 0..n_stages {
            let in_c = arch.stage_channels[n_stages - 1 - i];
            let (out_c, is_last) = if i + 1 == n_stages {
                (arch.in_channels, true)
            } else {
                (arch.stage_channels[n_stages - 2 - i], false)
            };
            let out_hw = chain[n_stages - 1 - i];
            let tconv = TConv2d::new(in_c, out_c, 3, 2, 1, out_hw, arch.leaky_slope, rng);
            let bn = if is_last { None } else { Some(BatchNorm2d::new(out_c)) };
            stages.push(DecStage { tconv, bn });
        }
        Self { stages, slope: arch.leaky_slope }
    }

    pub fn forward_train(&mut self, feat: &Array4<T>) -> (Array4<T>, DecoderCache<T>) {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut h = feat.clone();
        for stage in &mut self.stages {
            let x_in = h.clone();
            let t = stage.tconv.forward(&x_in);
            let (out, bn_cache) = match &mut stage.bn {
                Some(bn) => {
                    let (b, c) = bn.forward_train(&t);
                    (leaky_relu(&b, self.slope), Some(c))
                }
                None => (t, None),
            };
            caches.push((x_in, bn_cache));
            h = out;
        }
        (h, DecoderCache { stages: caches })
    }

    pub fn forward_eval(&self, feat: &Array4<T>) -> Array4<T> {
        let mut h = feat.clone();
        for stage in &self.stages {
            let t = stage.tconv.forward(&h);
            h = match &stage.bn {
                Some(bn) => leaky_relu(&bn.forward_eval(&t), self.slope),
                None => t,
            };
        }
        h
    }

    pub fn backward(&self, cache: &DecoderCache<T>, drecon: &Array4<T>) -> (Array4<T>, DecoderGrads<T>) {
        let mut grads: Vec<(TConv2dGrad<T>, Option<BnGrad<T>>)> =
            Vec::with_capacity(self.stages.len());
        let mut dy = drecon.clone();
        for (stage, (x_in, bn_cache)) in self.stages.iter().zip(&cache.stages).rev() {
            let dt = match (&stage.bn, bn_cache) {
                (Some(bn), Some(c)) => {
                    let pre = bn.affine_of_xhat(&c.xhat);
                    let dpre = leaky_relu_backward(&pre, &dy, self.slope);
                    let (dt, bn_grad) = bn.backward_train(&dpre, c);
                    let (dx, t_grad) = stage.tconv.backward(x_in, &dt);
                    grads.push((t_grad, Some(bn_grad)));
                    dy = dx;
                    continue;
                }
                _ => dy.clone(),
            };
            let (dx, t_grad) = stage.tconv.backward(x_in, &dt);
            grads.push((t_grad, None));
            dy = dx;
        }
        grads.reverse();
        (dy, DecoderGrads { stages: grads })
    }
}

// ---------------------------------------------------------------------------
// Classifier head
// ---------------------------------------------------------------------------

/// Pooled-feature classifier: fully connected → batch norm → leaky ReLU →
/// dropout → fully connected (logits).
#[derive(Debug, Clone)]
pub struct ClassifierHead<T: Scalar> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm1d<T>,
    pub fc2: Linear<T>,
    pub dropout_p: f64,
    slope: f64,
}

pub struct HeadCache<T: Scalar> {
    x: Array2<T>,
    bn: Bn1dCache<T>,
    drop_mask: Array2<T>,
    h_dropped: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads<T: Scalar> {
    pub fc1: LinearGrad<T>,
    pub bn: BnGrad<T>,
    pub fc2: LinearGrad<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(arch: &ArchConfig, n_classes: usize, dropout_p: f64, rng: &mut ChaCha8Rng) -> Self {
        let fc1 = Linear::new(arch.feature_channels(), arch.classifier_hidden, arch.leaky_slope, rng);
        let bn = BatchNorm1d::new(arch.classifier_hidden);
        let fc2 = Linear::new(arch.classifier_hidden, n_classes, arch.leaky_slope, rng);
        Self { fc1, bn, fc2, dropout_p, slope: arch.leaky_slope }
    }

    pub fn n_classes(&self) -> usize {
        self.fc2.bias.len()
    }

    pub fn forward_train(&mut self, x: &Array2<T>, rng: &mut ChaCha8Rng) -> (Array2<T>, HeadCache<T>) {
        let a1 = self.fc1.forward(x);
        let (b1, bn_cache) = self.bn.forward_train(&a1);
        let h = leaky_relu(&b1, self.slope);
        let (h_dropped, drop_mask) = dropout_forward(&h, self.dropout_p, rng);
        let logits = self.fc2.forward(&h_dropped);
        (logits, HeadCache { x: x.clone(), bn: bn_cache, drop_mask, h_dropped })
    }

    pub fn forward_eval(&self, x: &Array2<T>) -> Array2<T> {
        let h = leaky_relu(&self.bn.forward_eval(&self.fc1.forward(x)), self.slope);
        self.fc2.forward(&h)
    }

    pub fn backward(&self, cache: &HeadCache<T>, dlogits: &Array2<T>) -> (Array2<T>, HeadGrads<T>) {
        let (dhd, fc2_grad) = self.fc2.backward(&cache.h_dropped, dlogits);
        let dh = dropout_backward(&dhd, &cache.drop_mask);
        let b1 = self.bn.affine_of_xhat(&cache.bn.xhat);
        let db1 = leaky_relu_backward(&b1, &dh, self.slope);
        let (da1, bn_grad) = self.bn.backward_train(&db1, &cache.bn);
        let (dx, fc1_grad) = self.fc1.backward(&cache.x, &da1);
        (dx, HeadGrads { fc1: fc1_grad, bn: bn_grad, fc2: fc2_grad })
    }

    /// Gradient of a logit functional with respect to the pooled features,
    /// in eval mode (running stats, no dropout). Used for class activation
    /// mapping.
    pub fn input_gradient_eval(&self, x: &Array2<T>, dlogits: &Array2<T>) -> Array2<T> {
        let a1 = self.fc1.forward(x);
        let b1 = self.bn.forward_eval(&a1);
        let dh = dlogits.dot(&self.fc2.weight);
        let db1 = leaky_relu_backward(&b1, &dh, self.slope);
        let da1 = self.bn.backward_eval(&db1);
        da1.dot(&self.fc1.weight)
    }
}

// ---------------------------------------------------------------------------
// Parameter and state plumbing
// ---------------------------------------------------------------------------

/// Named tensors (shape + f32 data) for checkpointing.
pub type StateEntry = (String, Vec<usize>, Vec<f32>);

fn push_state<T: Scalar, D: ndarray::Dimension>(
    out: &mut Vec<StateEntry>,
    name: String,
    arr: &ndarray::Array<T, D>,
) {
    out.push((name, arr.shape().to_vec(), arr.iter().map(|v| v.as_f64() as f32).collect()));
}

fn take_state<T: Scalar, D: ndarray::Dimension>(
    map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    name: &str,
    arr: &mut ndarray::Array<T, D>,
) -> Result<(), LearnError> {
    let (shape, data) = map
        .get(name)
        .ok_or_else(|| LearnError::Checkpoint(format!("missing tensor '{name}'")))?;
    if shape.as_slice() != arr.shape() {
        return Err(LearnError::Checkpoint(format!(
            "tensor '{name}': shape {:?} does not match {:?}",
            shape,
            arr.shape()
        )));
    }
    for (dst, src) in arr.iter_mut().zip(data.iter()) {
        *dst = T::from_f64(*src as f64);
    }
    Ok(())
}

macro_rules! push_params {
    ($vec:expr, $($arr:expr),+ $(,)?) => {
        $( $vec.push($arr.as_slice_mut().expect("standard layout")); )+
    };
}

impl<T: Scalar> ResBlock<T> {
    fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        push_params!(v, self.conv1.weight, self.conv1.bias, self.bn1.gamma, self.bn1.beta);
        push_params!(v, self.conv2.weight, self.conv2.bias, self.bn2.gamma, self.bn2.beta);
        if let Some((conv_s, bn_s)) = &mut self.skip {
            push_params!(v, conv_s.weight, conv_s.bias, bn_s.gamma, bn_s.beta);
        }
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        push_state(out, format!("{prefix}.conv1.weight"), &self.conv1.weight);
        push_state(out, format!("{prefix}.conv1.bias"), &self.conv1.bias);
        push_state(out, format!("{prefix}.bn1.gamma"), &self.bn1.gamma);
        push_state(out, format!("{prefix}.bn1.beta"), &self.bn1.beta);
        push_state(out, format!("{prefix}.bn1.running_mean"), &self.bn1.running_mean);
        push_state(out, format!("{prefix}.bn1.running_var"), &self.bn1.running_var);
        push_state(out, format!("{prefix}.conv2.weight"), &self.conv2.weight);
        push_state(out, format!("{prefix}.conv2.bias"), &self.conv2.bias);
        push_state(out, format!("{prefix}.bn2.gamma"), &self.bn2.gamma);
        push_state(out, format!("{prefix}.bn2.beta"), &self.bn2.beta);
        push_state(out, format!("{prefix}.bn2.running_mean"), &self.bn2.running_mean);
        push_state(out, format!("{prefix}.bn2.running_var"), &self.bn2.running_var);
        if let Some((conv_s, bn_s)) = &self.skip {
            push_state(out, format!("{prefix}.skip.weight"), &conv_s.weight);
            push_state(out, format!("{prefix}.skip.bias"), &conv_s.bias);
            push_state(out, format!("{prefix}.skip_bn.gamma"), &bn_s.gamma);
            push_state(out, format!("{prefix}.skip_bn.beta"), &bn_s.beta);
            push_state(out, format!("{prefix}.skip_bn.running_mean"), &bn_s.running_mean);
            push_state(out, format!("{prefix}.skip_bn.running_var"), &bn_s.running_var);
        }
    }

    fn load(
        &mut self,
        prefix: &str,
        map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), LearnError> {
        take_state(map, &format!("{prefix}.conv1.weight"), &mut self.conv1.weight)?;
        take_state(map, &format!("{prefix}.conv1.bias"), &mut self.conv1.bias)?;
        take_state(map, &format!("{prefix}.bn1.gamma"), &mut self.bn1.gamma)?;
        take_state(map, &format!("{prefix}.bn1.beta"), &mut self.bn1.beta)?;
        take_state(map, &format!("{prefix}.bn1.running_mean"), &mut self.bn1.running_mean)?;
        take_state(map, &format!("{prefix}.bn1.running_var"), &mut self.bn1.running_var)?;
        take_state(map, &format!("{prefix}.conv2.weight"), &mut self.conv2.weight)?;
        take_state(map, &format!("{prefix}.conv2.bias"), &mut self.conv2.bias)?;
        take_state(map, &format!("{prefix}.bn2.gamma"), &mut self.bn2.gamma)?;
        take_state(map, &format!("{prefix}.bn2.beta"), &mut self.bn2.beta)?;
        take_state(map, &format!("{prefix}.bn2.running_mean"), &mut self.bn2.running_mean)?;
        take_state(map, &format!("{prefix}.bn2.running_var"), &mut self.bn2.running_var)?;
        if let Some((conv_s, bn_s)) = &mut self.skip {
            take_state(map, &format!("{prefix}.skip.weight"), &mut conv_s.weight)?;
            take_state(map, &format!("{prefix}.skip.bias"), &mut conv_s.bias)?;
            take_state(map, &format!("{prefix}.skip_bn.gamma"), &mut bn_s.gamma)?;
            take_state(map, &format!("{prefix}.skip_bn.beta"), &mut bn_s.beta)?;
            take_state(map, &format!("{prefix}.skip_bn.running_mean"), &mut bn_s.running_mean)?;
            take_state(map, &format!("{prefix}.skip_bn.running_var"), &mut bn_s.running_var)?;
        }
        Ok(())
    }
}

impl<T: Scalar> ResBlockGrads<T> {
    fn flat(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![
            self.conv1.weight.as_slice().unwrap(),
            self.conv1.bias.as_slice().unwrap(),
            self.bn1.gamma.as_slice().unwrap(),
            self.bn1.beta.as_slice().unwrap(),
            self.conv2.weight.as_slice().unwrap(),
            self.conv2.bias.as_slice().unwrap(),
            self.bn2.gamma.as_slice().unwrap(),
            self.bn2.beta.as_slice().unwrap(),
        ];
        if let Some((conv_s, bn_s)) = &self.skip {
            v.push(conv_s.weight.as_slice().unwrap());
            v.push(conv_s.bias.as_slice().unwrap());
            v.push(bn_s.gamma.as_slice().unwrap());
            v.push(bn_s.beta.as_slice().unwrap());
        }
        v
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        self.blocks.iter_mut().flat_map(|b| b.trainable_mut()).collect()
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.state(&format!("{prefix}.block{i}"), out);
        }
    }

    pub fn load(
        &mut self,
        prefix: &str,
        map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), LearnError> {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.load(&format!("{prefix}.block{i}"), map)?;
        }
        Ok(())
    }
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn flat(&self) -> Vec<&[T]> {
        self.blocks.iter().flat_map(|b| b.flat()).collect()
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for stage in &mut self.stages {
            push_params!(v, stage.tconv.weight, stage.tconv.bias);
            if let Some(bn) = &mut stage.bn {
                push_params!(v, bn.gamma, bn.beta);
            }
        }
        v
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        for (i, stage) in self.stages.iter().enumerate() {
            push_state(out, format!("{prefix}.stage{i}.tconv.weight"), &stage.tconv.weight);
            push_state(out, format!("{prefix}.stage{i}.tconv.bias"), &stage.tconv.bias);
            if let Some(bn) = &stage.bn {
                push_state(out, format!("{prefix}.stage{i}.bn.gamma"), &bn.gamma);
                push_state(out, format!("{prefix}.stage{i}.bn.beta"), &bn.beta);
                push_state(out, format!("{prefix}.stage{i}.bn.running_mean"), &bn.running_mean);
                push_state(out, format!("{prefix}.stage{i}.bn.running_var"), &bn.running_var);
            }
        }
    }

    pub fn load(
        &mut self,
        prefix: &str,
        map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), LearnError> {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            take_state(map, &format!("{prefix}.stage{i}.tconv.weight"), &mut stage.tconv.weight)?;
            take_state(map, &format!("{prefix}.stage{i}.tconv.bias"), &mut stage.tconv.bias)?;
            if let Some(bn) = &mut stage.bn {
                take_state(map, &format!("{prefix}.stage{i}.bn.gamma"), &mut bn.gamma)?;
                take_state(map, &format!("{prefix}.stage{i}.bn.beta"), &mut bn.beta)?;
                take_state(map, &format!("{prefix}.stage{i}.bn.running_mean"), &mut bn.running_mean)?;
                take_state(map, &format!("{prefix}.stage{i}.bn.running_var"), &mut bn.running_var)?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> DecoderGrads<T> {
    pub fn flat(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for (t_grad, bn_grad) in &self.stages {
            v.push(t_grad.weight.as_slice().unwrap());
            v.push(t_grad.bias.as_slice().unwrap());
            if let Some(bn) = bn_grad {
                v.push(bn.gamma.as_slice().unwrap());
                v.push(bn.beta.as_slice().unwrap());
            }
        }
        v
    }
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        push_params!(v, self.fc1.weight, self.fc1.bias, self.bn.gamma, self.bn.beta);
        push_params!(v, self.fc2.weight, self.fc2.bias);
        v
    }

    pub fn state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        push_state(out, format!("{prefix}.fc1.weight"), &self.fc1.weight);
        push_state(out, format!("{prefix}.fc1.bias"), &self.fc1.bias);
        push_state(out, format!("{prefix}.bn.gamma"), &self.bn.gamma);
        push_state(out, format!("{prefix}.bn.beta"), &self.bn.beta);
        push_state(out, format!("{prefix}.bn.running_mean"), &self.bn.running_mean);
        push_state(out, format!("{prefix}.bn.running_var"), &self.bn.running_var);
        push_state(out, format!("{prefix}.fc2.weight"), &self.fc2.weight);
        push_state(out, format!("{prefix}.fc2.bias"), &self.fc2.bias);
    }

    pub fn load(
        &mut self,
        prefix: &str,
        map: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), LearnError> {
        take_state(map, &format!("{prefix}.fc1.weight"), &mut self.fc1.weight)?;
        take_state(map, &format!("{prefix}.fc1.bias"), &mut self.fc1.bias)?;
        take_state(map, &format!("{prefix}.bn.gamma"), &mut self.bn.gamma)?;
        take_state(map, &format!("{prefix}.bn.beta"), &mut self.bn.beta)?;
        take_state(map, &format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean)?;
        take_state(map, &format!("{prefix}.bn.running_var"), &mut self.bn.running_var)?;
        take_state(map, &format!("{prefix}.fc2.weight"), &mut self.fc2.weight)?;
        take_state(map, &format!("{prefix}.fc2.bias"), &mut self.fc2.bias)?;
        Ok(())
    }
}

impl<T: Scalar> HeadGrads<T> {
    pub fn flat(&self) -> Vec<&[T]> {
        vec![
            self.fc1.weight.as_slice().unwrap(),
            self.fc1.bias.as_slice().unwrap(),
            self.bn.gamma.as_slice().unwrap(),
            self.bn.beta.as_slice().unwrap(),
            self.fc2.weight.as_slice().unwrap(),
            self.fc2.bias.as_slice().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_arch_feature_geometry() {
        let arch = ArchConfig::default();
        assert_eq!(arch.feature_channels(), 128);
        assert_eq!(arch.feature_hw(), (19, 11));
        assert_eq!(
            arch.spatial_chain(),
            vec![(295, 166), (148, 83), (74, 42), (37, 21), (19, 11)]
        );
    }

    #[test]
    fn encoder_output_shape_matches_arch() {
        let arch = ArchConfig::tiny(4, (33, 21));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::<f64>::new(&arch, &mut rng);
        let x = Array4::<f64>::zeros((2, 4, 33, 21));
        let (f, _) = enc.forward_train(&x);
        let (fh, fw) = arch.feature_hw();
        assert_eq!(f.shape(), &[2, arch.feature_channels(), fh, fw]);
        assert_eq!((fh, fw), (9, 6));
    }

    #[test]
    fn decoder_restores_window_shape() {
        let arch = ArchConfig::tiny(4, (33, 21));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dec = Decoder::<f64>::new(&arch, &mut rng);
        let (fh, fw) = arch.feature_hw();
        let feat = Array4::<f64>::from_elem((2, arch.feature_channels(), fh, fw), 0.3);
        let (recon, _) = dec.forward_train(&feat);
        assert_eq!(recon.shape(), &[2, 4, 33, 21]);
        // zero features, zero weights → zero reconstruction
        for stage in &mut dec.stages {
            stage.tconv.weight.fill(0.0);
            stage.tconv.bias.fill(0.0);
        }
        let zero = dec.forward_eval(&Array4::<f64>::zeros((1, arch.feature_channels(), fh, fw)));
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_eval_is_pure() {
        let arch = ArchConfig::tiny(3, (17, 12));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::<f64>::new(&arch, &mut rng);
        let x = Array4::from_shape_simple_fn((1, 3, 17, 12), || rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let a = enc.forward_eval(&x);
        let b = enc.forward_eval(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn head_outputs_logits_per_class() {
        let arch = ArchConfig::tiny(3, (17, 12));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = ClassifierHead::<f64>::new(&arch, 5, 0.2, &mut rng);
        let x = Array2::<f64>::from_elem((4, arch.feature_channels()), 0.5);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(4);
        let (logits, _) = head.forward_train(&x, &mut drop_rng);
        assert_eq!(logits.shape(), &[4, 5]);
        assert_eq!(head.n_classes(), 5);
    }

    #[test]
    fn params_and_grads_align() {
        let arch = ArchConfig::tiny(4, (33, 21));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = Encoder::<f64>::new(&arch, &mut rng);
        let mut dec = Decoder::<f64>::new(&arch, &mut rng);
        let mut head = ClassifierHead::<f64>::new(&arch, 3, 0.0, &mut rng);

        let x = Array4::<f64>::from_elem((2, 4, 33, 21), 0.1);
        let (feat, ecache) = enc.forward_train(&x);
        let (recon, dcache) = dec.forward_train(&feat);
        let (dfeat_dec, dgrads) = dec.backward(&dcache, &recon);
        let (_, egrads) = enc.backward(&ecache, &dfeat_dec);

        let ep = enc.trainable_mut();
        let eg = egrads.flat();
        assert_eq!(ep.len(), eg.len());
        for (p, g) in ep.iter().zip(&eg) {
            assert_eq!(p.len(), g.len());
        }
        let dp = dec.trainable_mut();
        let dg = dgrads.flat();
        assert_eq!(dp.len(), dg.len());
        for (p, g) in dp.iter().zip(&dg) {
            assert_eq!(p.len(), g.len());
        }

        let pooled = super::super::layers::global_avg_pool(&feat);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(6);
        let (logits, hcache) = head.forward_train(&pooled, &mut drop_rng);
        let (_, hgrads) = head.backward(&hcache, &logits);
        let hp = head.trainable_mut();
        let hg = hgrads.flat();
        assert_eq!(hp.len(), hg.len());
        for (p, g) in hp.iter().zip(&hg) {
            assert_eq!(p.len(), g.len());
        }
    }

    #[test]
    fn state_round_trip_restores_weights() {
        let arch = ArchConfig::tiny(4, (33, 21));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = Encoder::<f64>::new(&arch, &mut rng);
        let mut out = Vec::new();
        enc.state("enc", &mut out);
        let map: std::collections::BTreeMap<_, _> =
            out.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let mut enc2 = Encoder::<f64>::new(&arch, &mut ChaCha8Rng::seed_from_u64(99));
        enc2.load("enc", &map).unwrap();
        let x = Array4::<f64>::from_elem((1, 4, 33, 21), 0.25);
        let a = enc.forward_eval(&x);
        let b = enc2.forward_eval(&x);
        // f32 round-trip keeps f64 weights only to f32 precision
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
    }
}
