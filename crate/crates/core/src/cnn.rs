//! The embedded convolutional feature extractor and classification head.
//!
//! Architecture (fixed): input 3x64x64 -> conv 3x3 (3->8) -> ReLU -> 2x2
//! maxpool -> conv 3x3 (8->16) -> ReLU -> 2x2 maxpool -> conv 3x3 (16->32)
//! -> ReLU => probe layer z in R^{32x16x16} -> spatial mean -> linear ->
//! softmax over K classes. All convolutions use zero padding 1, which keeps
//! the boundary mechanism that lets position leak into late activations.
//!
//! Forward and backward passes are written analytically; there is no
//! autodiff. Maxpool ties break to the first index in row-major window
//! order, and ReLU passes no gradient at exactly zero.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const INPUT_SHAPE: [usize; 3] = [3, 64, 64];
pub const PROBE_SHAPE: [usize; 3] = [32, 16, 16];
pub const CONV2_SHAPE: [usize; 3] = [16, 32, 32];

pub const MODEL_MAGIC: &[u8; 4] = b"CAVM";
pub const MODEL_VERSION: u8 = 1;

/// Which post-ReLU activation map probes attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeLayer {
    Conv2,
    Conv3,
}

impl ProbeLayer {
    pub fn id(&self) -> &'static str {
        match self {
            ProbeLayer::Conv2 => "conv2",
            ProbeLayer::Conv3 => "conv3",
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        match self {
            ProbeLayer::Conv2 => CONV2_SHAPE,
            ProbeLayer::Conv3 => PROBE_SHAPE,
        }
    }
}

// ---------------------------------------------------------------------------
// layer primitives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    /// `[out_channels, in_channels, 3, 3]`
    pub weights: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

impl Conv3x3 {
    fn he_init(out_c: usize, in_c: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (in_c * 9) as f32).sqrt();
        let weights = crate::tensor::random_uniform(&[out_c, in_c, 3, 3], -bound, bound, rng);
        Conv3x3 {
            weights,
            bias: Tensor::zeros(&[out_c]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Same-size convolution with zero padding 1.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        debug_assert_eq!(ci, self.in_channels());
        let co = self.out_channels();
        let mut out = vec![0.0f32; co * h * w];
        let wdat = self.weights.data();
        let idat = input.data();
        for oc in 0..co {
            let plane = &mut out[oc * h * w..(oc + 1) * h * w];
            plane.fill(self.bias.data()[oc]);
            for icn in 0..ci {
                let iplane = &idat[icn * h * w..(icn + 1) * h * w];
                for kh in 0..3usize {
                    for kw in 0..3usize {
                        let wgt = wdat[((oc * ci + icn) * 3 + kh) * 3 + kw];
                        if wgt == 0.0 {
                            continue;
                        }
                        // output row y reads input row y + kh - 1
                        let y0 = 1usize.saturating_sub(kh);
                        let y1 = (h + 1 - kh).min(h);
                        let x0 = 1usize.saturating_sub(kw);
                        let x1 = (w + 1 - kw).min(w);
                        for y in y0..y1 {
                            let iy = y + kh - 1;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let src = &iplane[iy * w + x0 + kw - 1..iy * w + x1 + kw - 1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![co, h, w], out).expect("conv output shape")
    }

    /// Gradient with respect to the layer input.
    pub fn backward_input(&self, grad_out: &Tensor) -> Tensor {
        let (co, h, w) = (
            grad_out.shape()[0],
            grad_out.shape()[1],
            grad_out.shape()[2],
        );
        debug_assert_eq!(co, self.out_channels());
        let ci = self.in_channels();
        let mut gin = vec![0.0f32; ci * h * w];
        let wdat = self.weights.data();
        let gdat = grad_out.data();
        for oc in 0..co {
            let gplane = &gdat[oc * h * w..(oc + 1) * h * w];
            for icn in 0..ci {
                let iplane = &mut gin[icn * h * w..(icn + 1) * h * w];
                for kh in 0..3usize {
                    for kw in 0..3usize {
                        let wgt = wdat[((oc * ci + icn) * 3 + kh) * 3 + kw];
                        if wgt == 0.0 {
                            continue;
                        }
                        let y0 = 1usize.saturating_sub(kh);
                        let y1 = (h + 1 - kh).min(h);
                        let x0 = 1usize.saturating_sub(kw);
                        let x1 = (w + 1 - kw).min(w);
                        for y in y0..y1 {
                            let iy = y + kh - 1;
                            let dst = &mut iplane[iy * w + x0 + kw - 1..iy * w + x1 + kw - 1];
                            let src = &gplane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![ci, h, w], gin).expect("conv input-grad shape")
    }

    /// Gradients with respect to weights and bias, accumulated in f64.
    pub fn backward_params(&self, input: &Tensor, grad_out: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let co = self.out_channels();
        let mut gw = vec![0.0f64; co * ci * 9];
        let mut gb = vec![0.0f64; co];
        let idat = input.data();
        let gdat = grad_out.data();
        for oc in 0..co {
            let gplane = &gdat[oc * h * w..(oc + 1) * h * w];
            gb[oc] += gplane.iter().fold(0.0f64, |a, &x| a + x as f64);
            for icn in 0..ci {
                let iplane = &idat[icn * h * w..(icn + 1) * h * w];
                for kh in 0..3usize {
                    for kw in 0..3usize {
                        let y0 = 1usize.saturating_sub(kh);
                        let y1 = (h + 1 - kh).min(h);
                        let x0 = 1usize.saturating_sub(kw);
                        let x1 = (w + 1 - kw).min(w);
                        let mut acc = 0.0f64;
                        for y in y0..y1 {
                            let iy = y + kh - 1;
                            let g = &gplane[y * w + x0..y * w + x1];
                            let s = &iplane[iy * w + x0 + kw - 1..iy * w + x1 + kw - 1];
                            let mut row = 0.0f32;
                            for (gv, sv) in g.iter().zip(s) {
                                row += gv * sv;
                            }
                            acc += row as f64;
                        }
                        gw[((oc * ci + icn) * 3 + kh) * 3 + kw] += acc;
                    }
                }
            }
        }
        (gw, gb)
    }
}

fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the post-ReLU activation is zero.
fn relu_backward_inplace(grad: &mut Tensor, post: &Tensor) {
    for (g, &a) in grad.data_mut().iter_mut().zip(post.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling. Returns the pooled map and per-cell argmax in window
/// row-major order (0..4); ties keep the first index scanned.
fn maxpool2(input: &Tensor) -> (Tensor, Vec<u8>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut arg = vec![0u8; c * oh * ow];
    let idat = input.data();
    for ch in 0..c {
        let plane = &idat[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut best = plane[(2 * y) * w + 2 * x];
                let mut best_i = 0u8;
                for (i, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = plane[(2 * y + dy) * w + 2 * x + dx];
                    if v > best {
                        best = v;
                        best_i = (i + 1) as u8;
                    }
                }
                out[(ch * oh + y) * ow + x] = best;
                arg[(ch * oh + y) * ow + x] = best_i;
            }
        }
    }
    (
        Tensor::new(vec![c, oh, ow], out).expect("pool shape"),
        arg,
    )
}

fn maxpool2_backward(grad_out: &Tensor, arg: &[u8], in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = vec![0.0f32; c * h * w];
    let gdat = grad_out.data();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let o = (ch * oh + y) * ow + x;
                let a = arg[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                gin[(ch * h + 2 * y + dy) * w + 2 * x + dx] += gdat[o];
            }
        }
    }
    Tensor::new(vec![c, h, w], gin).expect("pool input-grad shape")
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MicroCnn {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub conv3: Conv3x3,
    /// `[num_classes, 32]`
    pub head_weights: Tensor,
    /// `[num_classes]`
    pub head_bias: Tensor,
    pub seed: u64,
    probe_layer: ProbeLayer,
}

/// Intermediates of one full forward pass, kept for the backward passes.
pub struct ForwardTrace {
    pub input: Tensor,
    pub relu1: Tensor,
    pub pool1: Tensor,
    arg1: Vec<u8>,
    pub relu2: Tensor,
    pub pool2: Tensor,
    arg2: Vec<u8>,
    pub relu3: Tensor,
    pub gap: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl MicroCnn {
    /// He-style scaled-uniform weights from the seeded generator; zero biases.
    pub fn init(seed: u64, num_classes: usize) -> Self {
        let mut rng = SplitMix64::new(derive_seed(seed, &[tag("microcnn-init")]));
        let conv1 = Conv3x3::he_init(8, 3, &mut rng);
        let conv2 = Conv3x3::he_init(16, 8, &mut rng);
        let conv3 = Conv3x3::he_init(32, 16, &mut rng);
        // zero head: the linear layer fits the random features first, and
        // conv gradients switch on smoothly as the head grows
        MicroCnn {
            conv1,
            conv2,
            conv3,
            head_weights: Tensor::zeros(&[num_classes, 32]),
            head_bias: Tensor::zeros(&[num_classes]),
            seed,
            probe_layer: ProbeLayer::Conv3,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head_weights.shape()[0]
    }

    pub fn probe_layer(&self) -> ProbeLayer {
        self.probe_layer
    }

    pub fn with_probe_layer(mut self, layer: ProbeLayer) -> Self {
        self.probe_layer = layer;
        self
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != INPUT_SHAPE {
            return Err(Error::ShapeMismatch {
                context: "microcnn input",
                expected: INPUT_SHAPE.to_vec(),
                got: x.shape().to_vec(),
            });
        }
        x.check_finite("microcnn input")
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut relu1 = self.conv1.forward(x);
        relu_inplace(&mut relu1);
        let (pool1, arg1) = maxpool2(&relu1);
        let mut relu2 = self.conv2.forward(&pool1);
        relu_inplace(&mut relu2);
        let (pool2, arg2) = maxpool2(&relu2);
        let mut relu3 = self.conv3.forward(&pool2);
        relu_inplace(&mut relu3);

        let (gap, logits, probs) = self.head_from_probe(&relu3);
        Ok(ForwardTrace {
            input: x.clone(),
            relu1,
            pool1,
            arg1,
            relu2,
            pool2,
            arg2,
            relu3,
            gap,
            logits,
            probs,
        })
    }

    fn head_from_probe(&self, z3: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (c, h, w) = (z3.shape()[0], z3.shape()[1], z3.shape()[2]);
        let hw = (h * w) as f64;
        let mut gap = vec![0.0f64; c];
        for ch in 0..c {
            let plane = &z3.data()[ch * h * w..(ch + 1) * h * w];
            gap[ch] = plane.iter().fold(0.0f64, |a, &v| a + v as f64) / hw;
        }
        let k = self.num_classes();
        let mut logits = vec![0.0f64; k];
        for j in 0..k {
            let mut acc = self.head_bias.data()[j] as f64;
            for ch in 0..c {
                acc += self.head_weights.data()[j * c + ch] as f64 * gap[ch];
            }
            logits[j] = acc;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs = exps.iter().map(|&e| e / z).collect();
        (gap, logits, probs)
    }

    /// Post-ReLU activations at the configured probe layer.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut relu1 = self.conv1.forward(x);
        relu_inplace(&mut relu1);
        let (pool1, _) = maxpool2(&relu1);
        let mut relu2 = self.conv2.forward(&pool1);
        relu_inplace(&mut relu2);
        if self.probe_layer == ProbeLayer::Conv2 {
            return Ok(relu2);
        }
        let (pool2, _) = maxpool2(&relu2);
        let mut relu3 = self.conv3.forward(&pool2);
        relu_inplace(&mut relu3);
        Ok(relu3)
    }

    fn check_probe_shape(&self, z: &Tensor) -> Result<()> {
        let want = self.probe_layer.shape();
        if z.shape() != want {
            return Err(Error::ShapeMismatch {
                context: "probe-layer activations",
                expected: want.to_vec(),
                got: z.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Softmax class probabilities from probe-layer activations.
    pub fn forward_head(&self, z: &Tensor) -> Result<Tensor> {
        self.check_probe_shape(z)?;
        let z3 = match self.probe_layer {
            ProbeLayer::Conv3 => z.clone(),
            ProbeLayer::Conv2 => {
                let (pool2, _) = maxpool2(z);
                let mut relu3 = self.conv3.forward(&pool2);
                relu_inplace(&mut relu3);
                relu3
            }
        };
        let (_, _, probs) = self.head_from_probe(&z3);
        Tensor::new(
            vec![self.num_classes()],
            probs.iter().map(|&p| p as f32).collect(),
        )
    }

    /// Analytic gradient of the class-k probability with respect to the
    /// probe-layer activations.
    pub fn grad_head_wrt_z(&self, z: &Tensor, class: usize) -> Result<Tensor> {
        self.check_probe_shape(z)?;
        let k = self.num_classes();
        if class >= k {
            return Err(Error::ClassIndexOutOfRange {
                index: class,
                num_classes: k,
            });
        }
        match self.probe_layer {
            ProbeLayer::Conv3 => {
                let (_, _, probs) = self.head_from_probe(z);
                Ok(self.grad_prob_wrt_z3(&probs, class, z.shape()))
            }
            ProbeLayer::Conv2 => {
                // chain through pool2 -> conv3 -> relu3 -> head
                let (pool2, arg2) = maxpool2(z);
                let mut relu3 = self.conv3.forward(&pool2);
                relu_inplace(&mut relu3);
                let (_, _, probs) = self.head_from_probe(&relu3);
                let mut g3 = self.grad_prob_wrt_z3(&probs, class, relu3.shape());
                relu_backward_inplace(&mut g3, &relu3);
                let gp2 = self.conv3.backward_input(&g3);
                Ok(maxpool2_backward(&gp2, &arg2, z.shape()))
            }
        }
    }

    /// dp_k/dz3 for a mean-pool + linear + softmax head: spatially uniform
    /// per channel by construction.
    fn grad_prob_wrt_z3(&self, probs: &[f64], class: usize, shape: &[usize]) -> Tensor {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = (h * w) as f64;
        let k = self.num_classes();
        let wdat = self.head_weights.data();
        let mut per_channel = vec![0.0f64; c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for j in 0..k {
                let delta = if j == class { 1.0 } else { 0.0 };
                acc += probs[class] * (delta - probs[j]) * wdat[j * c + ch] as f64;
            }
            per_channel[ch] = acc / hw;
        }
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            let v = per_channel[ch] as f32;
            out[ch * h * w..(ch + 1) * h * w].fill(v);
        }
        Tensor::new(vec![c, h, w], out).expect("grad shape")
    }

    /// Full backward pass from an upstream gradient at the probe layer down
    /// to the input image.
    pub fn grad_features_wrt_input(&self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        self.check_probe_shape(upstream)?;
        let trace = self.forward_trace(x)?;
        Ok(self.backprop_from_probe(&trace, upstream))
    }

    fn backprop_from_probe(&self, trace: &ForwardTrace, upstream: &Tensor) -> Tensor {
        let mut grad = upstream.clone();
        if self.probe_layer == ProbeLayer::Conv3 {
            relu_backward_inplace(&mut grad, &trace.relu3);
            let gp2 = self.conv3.backward_input(&grad);
            grad = maxpool2_backward(&gp2, &trace.arg2, trace.relu2.shape());
        }
        relu_backward_inplace(&mut grad, &trace.relu2);
        let gp1 = self.conv2.backward_input(&grad);
        grad = maxpool2_backward(&gp1, &trace.arg1, trace.relu1.shape());
        relu_backward_inplace(&mut grad, &trace.relu1);
        self.conv1.backward_input(&grad)
    }

    /// Hash of the active linear region: ReLU on/off bits and maxpool argmax
    /// choices. Two inputs in the same region see an identical piecewise
    /// linear feature map, which makes finite differences exact up to
    /// rounding.
    pub fn linear_region_signature(&self, x: &Tensor) -> Result<u64> {
        let trace = self.forward_trace(x)?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for t in [&trace.relu1, &trace.relu2, &trace.relu3] {
            for &v in t.data() {
                eat((v > 0.0) as u8);
            }
        }
        for a in [&trace.arg1, &trace.arg2] {
            for &b in a.iter() {
                eat(b);
            }
        }
        Ok(h)
    }

    // ---- persistence -------------------------------------------------------

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&[MODEL_VERSION])?;
        w.write_all(&self.seed.to_le_bytes())?;
        for t in [
            &self.conv1.weights,
            &self.conv1.bias,
            &self.conv2.weights,
            &self.conv2.bias,
            &self.conv3.weights,
            &self.conv3.bias,
            &self.head_weights,
            &self.head_bias,
        ] {
            t.write_cavt(&mut w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format {
                format: "cavm",
                message: format!("bad magic {magic:?}"),
            });
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != MODEL_VERSION {
            return Err(Error::Format {
                format: "cavm",
                message: format!("unsupported version {}", ver[0]),
            });
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let seed = u64::from_le_bytes(seed);
        let mut tensors = Vec::with_capacity(8);
        for _ in 0..8 {
            tensors.push(Tensor::read_cavt(&mut r)?);
        }
        let head_bias = tensors.pop().unwrap();
        let head_weights = tensors.pop().unwrap();
        let c3b = tensors.pop().unwrap();
        let c3w = tensors.pop().unwrap();
        let c2b = tensors.pop().unwrap();
        let c2w = tensors.pop().unwrap();
        let c1b = tensors.pop().unwrap();
        let c1w = tensors.pop().unwrap();
        let expect = [
            (c1w.shape(), vec![8, 3, 3, 3]),
            (c2w.shape(), vec![16, 8, 3, 3]),
            (c3w.shape(), vec![32, 16, 3, 3]),
        ];
        for (got, want) in expect {
            if got != want.as_slice() {
                return Err(Error::Format {
                    format: "cavm",
                    message: format!("weight shape {got:?}, expected {want:?}"),
                });
            }
        }
        Ok(MicroCnn {
            conv1: Conv3x3 {
                weights: c1w,
                bias: c1b,
            },
            conv2: Conv3x3 {
                weights: c2w,
                bias: c2b,
            },
            conv3: Conv3x3 {
                weights: c3w,
                bias: c3b,
            },
            head_weights,
            head_bias,
            seed,
            probe_layer: ProbeLayer::Conv3,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretrainTask {
    pub num_classes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainTask {
    fn default() -> Self {
        PretrainTask {
            num_classes: 8,
            epochs: 12,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainStats {
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub loss_per_epoch: Vec<f64>,
}

struct GradBuffers {
    c1w: Vec<f64>,
    c1b: Vec<f64>,
    c2w: Vec<f64>,
    c2b: Vec<f64>,
    c3w: Vec<f64>,
    c3b: Vec<f64>,
    hw: Vec<f64>,
    hb: Vec<f64>,
}

impl GradBuffers {
    fn zeros(model: &MicroCnn) -> Self {
        GradBuffers {
            c1w: vec![0.0; model.conv1.weights.len()],
            c1b: vec![0.0; model.conv1.bias.len()],
            c2w: vec![0.0; model.conv2.weights.len()],
            c2b: vec![0.0; model.conv2.bias.len()],
            c3w: vec![0.0; model.conv3.weights.len()],
            c3b: vec![0.0; model.conv3.bias.len()],
            hw: vec![0.0; model.head_weights.len()],
            hb: vec![0.0; model.head_bias.len()],
        }
    }

    fn add(dst: &mut [f64], src: &[f64]) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }

    fn scale(&mut self, s: f64) {
        for buf in [
            &mut self.c1w,
            &mut self.c1b,
            &mut self.c2w,
            &mut self.c2b,
            &mut self.c3w,
            &mut self.c3b,
            &mut self.hw,
            &mut self.hb,
        ] {
            buf.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Deterministic single-threaded Adam. Plain fixed-step SGD stalls on this
/// stack (the mean-pooled head makes conv and head gradient scales differ by
/// an order of magnitude), so pretraining uses per-parameter step sizes.
struct Adam {
    m: GradBuffers,
    v: GradBuffers,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &MicroCnn) -> Self {
        Adam {
            m: GradBuffers::zeros(model),
            v: GradBuffers::zeros(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MicroCnn, grad: &GradBuffers, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let mut update = |param: &mut Tensor, m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let p = param.data_mut();
                p[i] = (p[i] as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            }
        };
        update(&mut model.conv1.weights, &mut self.m.c1w, &mut self.v.c1w, &grad.c1w);
        update(&mut model.conv1.bias, &mut self.m.c1b, &mut self.v.c1b, &grad.c1b);
        update(&mut model.conv2.weights, &mut self.m.c2w, &mut self.v.c2w, &grad.c2w);
        update(&mut model.conv2.bias, &mut self.m.c2b, &mut self.v.c2b, &grad.c2b);
        update(&mut model.conv3.weights, &mut self.m.c3w, &mut self.v.c3w, &grad.c3w);
        update(&mut model.conv3.bias, &mut self.m.c3b, &mut self.v.c3b, &grad.c3b);
        update(&mut model.head_weights, &mut self.m.hw, &mut self.v.hw, &grad.hw);
        update(&mut model.head_bias, &mut self.m.hb, &mut self.v.hb, &grad.hb);
    }
}

/// Cross-entropy gradient accumulation for one labeled sample.
fn accumulate_sample_grads(model: &MicroCnn, trace: &ForwardTrace, label: usize, buf: &mut GradBuffers) -> f64 {
    let k = model.num_classes();
    let c = PROBE_SHAPE[0];
    let hw = (PROBE_SHAPE[1] * PROBE_SHAPE[2]) as f64;
    // d loss / d logits = p - onehot
    let mut dlogits = trace.probs.clone();
    dlogits[label] -= 1.0;
    for j in 0..k {
        buf.hb[j] += dlogits[j];
        for ch in 0..c {
            buf.hw[j * c + ch] += dlogits[j] * trace.gap[ch];
        }
    }
    // d loss / d gap, then uniform over spatial positions
    let wdat = model.head_weights.data();
    let mut dz3 = Tensor::zeros(&PROBE_SHAPE);
    {
        let data = dz3.data_mut();
        for ch in 0..c {
            let mut acc = 0.0f64;
            for j in 0..k {
                acc += dlogits[j] * wdat[j * c + ch] as f64;
            }
            let v = (acc / hw) as f32;
            data[ch * PROBE_SHAPE[1] * PROBE_SHAPE[2]..(ch + 1) * PROBE_SHAPE[1] * PROBE_SHAPE[2]]
                .fill(v);
        }
    }
    relu_backward_inplace(&mut dz3, &trace.relu3);
    let (g3w, g3b) = model.conv3.backward_params(&trace.pool2, &dz3);
    GradBuffers::add(&mut buf.c3w, &g3w);
    GradBuffers::add(&mut buf.c3b, &g3b);
    let gp2 = model.conv3.backward_input(&dz3);
    let mut g2 = maxpool2_backward(&gp2, &trace.arg2, trace.relu2.shape());
    relu_backward_inplace(&mut g2, &trace.relu2);
    let (g2w, g2b) = model.conv2.backward_params(&trace.pool1, &g2);
    GradBuffers::add(&mut buf.c2w, &g2w);
    GradBuffers::add(&mut buf.c2b, &g2b);
    let gp1 = model.conv2.backward_input(&g2);
    let mut g1 = maxpool2_backward(&gp1, &trace.arg1, trace.relu1.shape());
    relu_backward_inplace(&mut g1, &trace.relu1);
    let (g1w, g1b) = model.conv1.backward_params(&trace.input, &g1);
    GradBuffers::add(&mut buf.c1w, &g1w);
    GradBuffers::add(&mut buf.c1b, &g1b);

    -trace.probs[label].max(1e-300).ln()
}

/// Plain mini-batch SGD with a fixed step size, sequential and fully
/// deterministic in the seed. Returns the trained model and final train-set
/// statistics.
pub fn pretrain(
    task: &PretrainTask,
    images: &[Tensor],
    class_labels: &[usize],
) -> Result<(MicroCnn, PretrainStats)> {
    if task.num_classes < 4 {
        return Err(Error::InvalidConfig(
            "pretraining needs at least 4 classes".into(),
        ));
    }
    if images.is_empty() || images.len() != class_labels.len() {
        return Err(Error::InvalidConfig(format!(
            "pretraining needs labeled images: {} images, {} labels",
            images.len(),
            class_labels.len()
        )));
    }
    if let Some(&bad) = class_labels.iter().find(|&&l| l >= task.num_classes) {
        return Err(Error::ClassIndexOutOfRange {
            index: bad,
            num_classes: task.num_classes,
        });
    }
    let mut model = MicroCnn::init(task.seed, task.num_classes);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = SplitMix64::new(derive_seed(task.seed, &[tag("pretrain-shuffle")]));
    let mut loss_per_epoch = Vec::with_capacity(task.epochs);
    let mut opt = Adam::new(&model);
    for _epoch in 0..task.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(task.batch_size.max(1)) {
            let mut buf = GradBuffers::zeros(&model);
            for &i in batch {
                let trace = model.forward_trace(&images[i])?;
                epoch_loss += accumulate_sample_grads(&model, &trace, class_labels[i], &mut buf);
            }
            buf.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &buf, task.learning_rate);
        }
        loss_per_epoch.push(epoch_loss / images.len() as f64);
        if std::env::var_os("CAVLAB_PRETRAIN_LOG").is_some() {
            let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            eprintln!(
                "pretrain epoch {} loss {:.4} |hw|={:.4} |c3|={:.4} |c1|={:.4}",
                loss_per_epoch.len(),
                loss_per_epoch.last().unwrap(),
                norm(model.head_weights.data()),
                norm(model.conv3.weights.data()),
                norm(model.conv1.weights.data()),
            );
        }
    }
    let final_loss = loss_per_epoch.last().copied().unwrap_or(f64::NAN);
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(class_labels) {
        let z = model.forward_features(img)?;
        let probs = model.forward_head(&z)?;
        let mut best = 0usize;
        for j in 1..task.num_classes {
            if probs.data()[j] > probs.data()[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / images.len() as f64;
    if accuracy < 0.60 {
        return Err(Error::TrainingDiverged {
            accuracy,
            required: 0.60,
            epochs: task.epochs,
        });
    }
    Ok((
        model,
        PretrainStats {
            train_accuracy: accuracy,
            final_loss,
            epochs_run: task.epochs,
            loss_per_epoch,
        },
    ))
}
