//! The detector network: a four-stage convolutional feature extractor and
//! three per-cell prediction heads, with hand-written forward and backward
//! passes in `f64`.
//!
//! Layout convention: tensors are planar `[channel][row][col]`; convolution
//! kernels are 3x3 with padding 1; the three stride-2 stages give an overall
//! stride of 8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RgbImage;

pub const KERNEL: usize = 3;
const LEAKY_SLOPE: f64 = 0.1;
const INIT_STD: f64 = 0.05;

/// Planar `[c][h][w]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn from_image(img: &RgbImage) -> Self {
        let mut t = Tensor::zeros(3, img.height, img.width);
        for y in 0..img.height {
            for x in 0..img.width {
                let p = img.get(x, y);
                for c in 0..3 {
                    t.set(c, y, x, p[c]);
                }
            }
        }
        t
    }

    /// Per-channel global average.
    pub fn global_avg_pool(&self) -> Vec<f64> {
        let cells = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| {
                let base = c * self.height * self.width;
                self.data[base..base + self.height * self.width].iter().sum::<f64>() / cells
            })
            .collect()
    }
}

/// 3x3 convolution with padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    /// `[out_c][in_c][3][3]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn zeros(in_c: usize, out_c: usize, stride: usize) -> Self {
        Conv {
            in_c,
            out_c,
            stride,
            weight: vec![0.0; out_c * in_c * KERNEL * KERNEL],
            bias: vec![0.0; out_c],
        }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_c + i) * KERNEL + ky) * KERNEL + kx
    }

    /// Padding 1, kernel 3: `out = floor((n - 1) / stride) + 1`.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (oh, ow) = self.out_size(input.height, input.width);
        let mut out = Tensor::zeros(self.out_c, oh, ow);
        let (ih, iw) = (input.height, input.width);
        let s = self.stride;
        for o in 0..self.out_c {
            let ob = o * oh * ow;
            for v in &mut out.data[ob..ob + oh * ow] {
                *v = self.bias[o];
            }
            for i in 0..self.in_c {
                for ky in 0..KERNEL {
                    let w0 = self.weight[self.widx(o, i, ky, 0)];
                    let w1 = self.weight[self.widx(o, i, ky, 1)];
                    let w2 = self.weight[self.widx(o, i, ky, 2)];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as i64 - 1;
                        if iy < 0 || iy >= ih as i64 {
                            continue;
                        }
                        let in_row = (i * ih + iy as usize) * iw;
                        let out_row = ob + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * s) as i64 - 1;
                            let mut acc = 0.0;
                            if ix >= 0 {
                                acc += w0 * input.data[in_row + ix as usize];
                            }
                            let ix1 = ix + 1;
                            if ix1 < iw as i64 {
                                acc += w1 * input.data[in_row + ix1 as usize];
                            }
                            let ix2 = ix + 2;
                            if ix2 < iw as i64 {
                                acc += w2 * input.data[in_row + ix2 as usize];
                            }
                            out.data[out_row + ox] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(
        &self,
        input: &Tensor,
        dout: &Tensor,
        dweight: &mut [f64],
        dbias: &mut [f64],
    ) -> Tensor {
        let (ih, iw) = (input.height, input.width);
        let (oh, ow) = (dout.height, dout.width);
        let s = self.stride;
        let mut dinput = Tensor::zeros(self.in_c, ih, iw);
        for o in 0..self.out_c {
            let ob = o * oh * ow;
            dbias[o] += dout.data[ob..ob + oh * ow].iter().sum::<f64>();
            for i in 0..self.in_c {
                for ky in 0..KERNEL {
                    let mut dw = [0.0f64; KERNEL];
                    let w0 = self.weight[self.widx(o, i, ky, 0)];
                    let w1 = self.weight[self.widx(o, i, ky, 1)];
                    let w2 = self.weight[self.widx(o, i, ky, 2)];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as i64 - 1;
                        if iy < 0 || iy >= ih as i64 {
                            continue;
                        }
                        let in_row = (i * ih + iy as usize) * iw;
                        let out_row = ob + oy * ow;
                        for ox in 0..ow {
                            let g = dout.data[out_row + ox];
                            if g == 0.0 {
                                continue;
                            }
                            let ix = (ox * s) as i64 - 1;
                            if ix >= 0 {
                                dw[0] += g * input.data[in_row + ix as usize];
                                dinput.data[in_row + ix as usize] += g * w0;
                            }
                            let ix1 = ix + 1;
                            if ix1 < iw as i64 {
                                dw[1] += g * input.data[in_row + ix1 as usize];
                                dinput.data[in_row + ix1 as usize] += g * w1;
                            }
                            let ix2 = ix + 2;
                            if ix2 < iw as i64 {
                                dw[2] += g * input.data[in_row + ix2 as usize];
                                dinput.data[in_row + ix2 as usize] += g * w2;
                            }
                        }
                    }
                    for kx in 0..KERNEL {
                        dweight[self.widx(o, i, ky, kx)] += dw[kx];
                    }
                }
            }
        }
        dinput
    }
}

/// 1x1 convolution (a per-cell linear map).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    pub in_c: usize,
    pub out_c: usize,
    /// `[out_c][in_c]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1x1 {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        Conv1x1 { in_c, out_c, weight: vec![0.0; out_c * in_c], bias: vec![0.0; out_c] }
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (h, w) = (input.height, input.width);
        let cells = h * w;
        let mut out = Tensor::zeros(self.out_c, h, w);
        for o in 0..self.out_c {
            let ob = o * cells;
            for v in &mut out.data[ob..ob + cells] {
                *v = self.bias[o];
            }
            for i in 0..self.in_c {
                let wv = self.weight[o * self.in_c + i];
                if wv == 0.0 {
                    continue;
                }
                let ib = i * cells;
                for k in 0..cells {
                    out.data[ob + k] += wv * input.data[ib + k];
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        input: &Tensor,
        dout: &Tensor,
        dweight: &mut [f64],
        dbias: &mut [f64],
        dinput: &mut Tensor,
    ) {
        let cells = input.height * input.width;
        for o in 0..self.out_c {
            let ob = o * cells;
            dbias[o] += dout.data[ob..ob + cells].iter().sum::<f64>();
            for i in 0..self.in_c {
                let ib = i * cells;
                let mut dw = 0.0;
                let wv = self.weight[o * self.in_c + i];
                for k in 0..cells {
                    let g = dout.data[ob + k];
                    dw += g * input.data[ib + k];
                    dinput.data[ib + k] += g * wv;
                }
                dweight[o * self.in_c + i] += dw;
            }
        }
    }
}

/// Max-subtracted softmax.
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Architecture description; hashed into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Output channels of the four backbone stages.
    pub channels: [usize; 4],
    /// Strides of the four stages; their product is the detector stride.
    pub strides: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { num_classes: 3, channels: [32, 32, 64, 64], strides: [2, 2, 2, 1] }
    }
}

impl ModelConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[3]
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).unwrap();
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// All learnable parameters of the detector `f = heads ∘ backbone`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: ModelConfig,
    pub convs: Vec<Conv>,
    pub head_obj: Conv1x1,
    pub head_cls: Conv1x1,
    pub head_box: Conv1x1,
}

impl DetectorParams {
    /// Truncated-normal weights (std 0.05), zero biases, deterministic in the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(config);
        params.for_each_tensor_mut(|name, data| {
            if !name.ends_with(".bias") {
                for v in data.iter_mut() {
                    *v = truncated_normal(&mut rng, INIT_STD);
                }
            }
        });
        params
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.channels;
        let s = config.strides;
        let convs = vec![
            Conv::zeros(3, c[0], s[0]),
            Conv::zeros(c[0], c[1], s[1]),
            Conv::zeros(c[1], c[2], s[2]),
            Conv::zeros(c[2], c[3], s[3]),
        ];
        DetectorParams {
            config: config.clone(),
            convs,
            head_obj: Conv1x1::zeros(c[3], 1),
            head_cls: Conv1x1::zeros(c[3], config.num_classes),
            head_box: Conv1x1::zeros(c[3], 4),
        }
    }

    /// Visit every parameter tensor in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64], Vec<usize>)) {
        for (i, conv) in self.convs.iter().enumerate() {
            f(
                &format!("backbone.conv{}.weight", i + 1),
                &conv.weight,
                vec![conv.out_c, conv.in_c, KERNEL, KERNEL],
            );
            f(&format!("backbone.conv{}.bias", i + 1), &conv.bias, vec![conv.out_c]);
        }
        for (name, head) in [
            ("head.obj", &self.head_obj),
            ("head.cls", &self.head_cls),
            ("head.box", &self.head_box),
        ] {
            f(&format!("{name}.weight"), &head.weight, vec![head.out_c, head.in_c]);
            f(&format!("{name}.bias"), &head.bias, vec![head.out_c]);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>)) {
        for i in 0..self.convs.len() {
            let name_w = format!("backbone.conv{}.weight", i + 1);
            f(&name_w, &mut self.convs[i].weight);
            let name_b = format!("backbone.conv{}.bias", i + 1);
            f(&name_b, &mut self.convs[i].bias);
        }
        f("head.obj.weight", &mut self.head_obj.weight);
        f("head.obj.bias", &mut self.head_obj.bias);
        f("head.cls.weight", &mut self.head_cls.weight);
        f("head.cls.bias", &mut self.head_cls.bias);
        f("head.box.weight", &mut self.head_box.weight);
        f("head.box.bias", &mut self.head_box.bias);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, data, _| n += data.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, data, _| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    /// Pre-activation outputs of each backbone stage.
    pub pre: Vec<Tensor>,
    /// Post-activation outputs; `act.last()` is the feature map.
    pub act: Vec<Tensor>,
}

impl ForwardCache {
    pub fn features(&self) -> &Tensor {
        self.act.last().expect("cache holds four stages")
    }
}

/// Run the backbone, keeping activations.
pub fn backbone_forward(params: &DetectorParams, image: &RgbImage) -> Result<ForwardCache> {
    let stride = params.config.total_stride();
    if image.height % stride != 0 || image.width % stride != 0 {
        return Err(Error::config(format!(
            "image {}x{} not divisible by detector stride {stride}",
            image.height, image.width
        )));
    }
    let input = Tensor::from_image(image);
    let mut pre = Vec::with_capacity(params.convs.len());
    let mut act = Vec::with_capacity(params.convs.len());
    let mut cur = input.clone();
    for conv in &params.convs {
        let z = conv.forward(&cur);
        let mut a = z.clone();
        for v in &mut a.data {
            *v = leaky_relu(*v);
        }
        pre.push(z);
        act.push(a.clone());
        cur = a;
    }
    Ok(ForwardCache { input, pre, act })
}

/// Backpropagate a gradient on the final feature map through the backbone,
/// accumulating into the conv gradient slots.
pub fn backbone_backward(
    params: &DetectorParams,
    cache: &ForwardCache,
    dfeatures: &Tensor,
    conv_grads: &mut [(Vec<f64>, Vec<f64>)],
) {
    assert_eq!(conv_grads.len(), params.convs.len());
    let mut dact = dfeatures.clone();
    for li in (0..params.convs.len()).rev() {
        // Through the activation.
        let pre = &cache.pre[li];
        let mut dpre = dact;
        for (g, z) in dpre.data.iter_mut().zip(&pre.data) {
            *g *= leaky_relu_grad(*z);
        }
        let layer_input = if li == 0 { &cache.input } else { &cache.act[li - 1] };
        let (dw, db) = &mut conv_grads[li];
        dact = params.convs[li].backward(layer_input, &dpre, dw, db);
    }
}
