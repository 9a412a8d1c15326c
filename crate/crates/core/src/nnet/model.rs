//! The two-convolution classifier: forward pass, cached activations and
//! exact backpropagation.
//!
//! Layer stack: conv3×3(F1, pad 1) → ReLU → maxpool2 → conv3×3(F2, pad 1) →
//! ReLU → maxpool2 → flatten → dense(hidden) → ReLU → dense(classes).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::types::NUM_CLASSES;

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for Architecture {
    /// 64×64 grayscale input, 32 and 64 filters, 512 hidden units, 5 classes.
    fn default() -> Self {
        Architecture::simple_cnn(64, 64)
    }
}

impl Architecture {
    pub fn simple_cnn(width: usize, height: usize) -> Self {
        Architecture {
            in_channels: 1,
            in_height: height,
            in_width: width,
            conv1_filters: 32,
            conv2_filters: 64,
            hidden: 512,
            classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_height < 4 || self.in_width < 4 {
            return Err(Error::invalid(format!(
                "input {}x{} too small for two 2x2 poolings",
                self.in_width, self.in_height
            )));
        }
        if [self.in_channels, self.conv1_filters, self.conv2_filters, self.hidden, self.classes].contains(&0) {
            return Err(Error::invalid("every layer width must be positive"));
        }
        Ok(())
    }

    pub fn pool1_dims(&self) -> (usize, usize) {
        (self.in_height / 2, self.in_width / 2)
    }

    pub fn pool2_dims(&self) -> (usize, usize) {
        let (h, w) = self.pool1_dims();
        (h / 2, w / 2)
    }

    pub fn flat_len(&self) -> usize {
        let (h, w) = self.pool2_dims();
        self.conv2_filters * h * w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    /// Shapes of the parameter tensors, in [`PARAM_NAMES`] order.
    pub fn param_shapes(&self) -> [Vec<usize>; 8] {
        [
            vec![self.conv1_filters, self.in_channels, KERNEL, KERNEL],
            vec![self.conv1_filters],
            vec![self.conv2_filters, self.conv1_filters, KERNEL, KERNEL],
            vec![self.conv2_filters],
            vec![self.hidden, self.flat_len()],
            vec![self.hidden],
            vec![self.classes, self.hidden],
            vec![self.classes],
        ]
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "dense1.weight",
    "dense1.bias",
    "dense2.weight",
    "dense2.bias",
];

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const DENSE1_W: usize = 4;
const DENSE1_B: usize = 5;
const DENSE2_W: usize = 6;
const DENSE2_B: usize = 7;

/// Weights and biases of every layer, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(ModelParams {
            arch,
            tensors: arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    /// He-uniform weights for the ReLU layers, Glorot-uniform for the
    /// output layer, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = arch.in_channels;
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let bounds = [
            (CONV1_W, he(c * KERNEL * KERNEL)),
            (CONV2_W, he(arch.conv1_filters * KERNEL * KERNEL)),
            (DENSE1_W, he(arch.flat_len())),
            (DENSE2_W, (6.0 / (arch.hidden + arch.classes) as f64).sqrt()),
        ];
        for (idx, bound) in bounds {
            for w in p.tensors[idx].data_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let want = arch.param_shapes();
        if tensors.len() != want.len() {
            return Err(Error::invalid(format!("expected {} parameter tensors, got {}", want.len(), tensors.len())));
        }
        for ((name, shape), t) in PARAM_NAMES.iter().zip(&want).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(ModelParams { arch, tensors })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.tensors)
    }
}

/// Activations of one forward pass, kept for backpropagation and saliency.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub input: Vec<f64>,
    /// Post-ReLU conv1 output, `B×F1×H×W`.
    pub conv1: Vec<f64>,
    pub pool1: Vec<f64>,
    pool1_idx: Vec<usize>,
    /// Post-ReLU conv2 output, `B×F2×(H/2)×(W/2)`.
    pub conv2: Vec<f64>,
    pub pool2: Vec<f64>,
    pool2_idx: Vec<usize>,
    pub hidden: Vec<f64>,
    pub logits: Tensor,
}

/// Unfolds one `C×H×W` image into `(C·9)×(H·W)` patch columns (pad 1).
fn im2col(input: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ch * KERNEL + ky) * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        dst[x] = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch-column gradients into `out`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ch * KERNEL + ky) * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3×3 convolution plus bias and ReLU over a batch.
fn conv_relu(input: &[f64], batch: usize, c: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let f = weight.shape()[0];
    let hw = h * w;
    let k = c * KERNEL * KERNEL;
    let mut cols = vec![0.0; k * hw];
    let mut out = vec![0.0; batch * f * hw];
    for b in 0..batch {
        im2col(&input[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
        let o = &mut out[b * f * hw..(b + 1) * f * hw];
        for (fi, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[fi]);
        }
        gemm(f, k, hw, weight.data(), false, &cols, false, 1.0, o);
        for v in o.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling; records the flat source index of each max
/// (first maximum wins).
fn maxpool(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

const SMALL_BATCH: usize = 4;

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dense(input: &[f64], batch: usize, weight: &Tensor, bias: &Tensor, relu: bool) -> Vec<f64> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let mut out: Vec<f64> = (0..batch).flat_map(|_| bias.data().iter().copied()).collect();
    if batch <= SMALL_BATCH {
        // GEMM would first pack the whole weight matrix; for a few rows a
        // single streaming pass over the weights is much cheaper.
        for (x, o) in input.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
            for (row, v) in weight.data().chunks_exact(in_dim).zip(o.iter_mut()) {
                *v += dot(row, x);
            }
        }
    } else {
        gemm(batch, in_dim, out_dim, input, false, weight.data(), true, 1.0, &mut out);
    }
    if relu {
        for v in out.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

fn check_batch(model: &ModelParams, batch: &Tensor) -> Result<usize> {
    let a = &model.arch;
    let want = [a.in_channels, a.in_height, a.in_width];
    if batch.shape().len() != 4 || batch.shape()[1..] != want {
        return Err(Error::invalid(format!(
            "layer conv1 expects input B×{}×{}×{}, got {:?}",
            a.in_channels,
            a.in_height,
            a.in_width,
            batch.shape()
        )));
    }
    Ok(batch.shape()[0])
}

/// Runs the network and keeps every intermediate activation.
pub fn forward_cached(model: &ModelParams, batch: &Tensor) -> Result<ForwardCache> {
    let b = check_batch(model, batch)?;
    let a = &model.arch;
    let t = &model.tensors;
    let (h, w) = (a.in_height, a.in_width);
    let conv1 = conv_relu(batch.data(), b, a.in_channels, h, w, &t[CONV1_W], &t[CONV1_B]);
    let (pool1, pool1_idx) = maxpool(&conv1, b * a.conv1_filters, h, w);
    let (h2, w2) = a.pool1_dims();
    let conv2 = conv_relu(&pool1, b, a.conv1_filters, h2, w2, &t[CONV2_W], &t[CONV2_B]);
    let (pool2, pool2_idx) = maxpool(&conv2, b * a.conv2_filters, h2, w2);
    let hidden = dense(&pool2, b, &t[DENSE1_W], &t[DENSE1_B], true);
    let logits = dense(&hidden, b, &t[DENSE2_W], &t[DENSE2_B], false);
    Ok(ForwardCache {
        batch: b,
        input: batch.data().to_vec(),
        conv1,
        pool1,
        pool1_idx,
        conv2,
        pool2,
        pool2_idx,
        hidden,
        logits: Tensor::new(vec![b, a.classes], logits)?,
    })
}

/// Logits `B×classes` for a `B×C×H×W` batch.
pub fn forward(model: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_cached(model, batch)?.logits)
}

fn bias_grad(dout: &[f64], planes: usize, plane_len: usize, db: &mut [f64]) {
    for (i, plane) in dout.chunks_exact(plane_len).enumerate() {
        db[i % planes] += plane.iter().sum::<f64>();
    }
}

/// Exact gradients of `Σ dlogits·logits` with respect to every parameter.
pub fn backward(model: &ModelParams, cache: &ForwardCache, dlogits: &Tensor) -> Result<Gradients> {
    let a = &model.arch;
    let b = cache.batch;
    if dlogits.shape() != [b, a.classes] {
        return Err(Error::invalid(format!(
            "dlogits shape {:?} does not match logits [{b}, {}]",
            dlogits.shape(),
            a.classes
        )));
    }
    let t = &model.tensors;
    let mut g = ModelParams::zeros(*a)?;
    let dl = dlogits.data();

    // dense2
    gemm(a.classes, b, a.hidden, dl, true, &cache.hidden, false, 0.0, g.tensors[DENSE2_W].data_mut());
    bias_grad(dl, a.classes, 1, g.tensors[DENSE2_B].data_mut());
    let mut dh = vec![0.0; b * a.hidden];
    gemm(b, a.classes, a.hidden, dl, false, t[DENSE2_W].data(), false, 0.0, &mut dh);
    for (d, &hv) in dh.iter_mut().zip(&cache.hidden) {
        if hv <= 0.0 {
            *d = 0.0;
        }
    }

    // dense1
    let flat = a.flat_len();
    gemm(a.hidden, b, flat, &dh, true, &cache.pool2, false, 0.0, g.tensors[DENSE1_W].data_mut());
    bias_grad(&dh, a.hidden, 1, g.tensors[DENSE1_B].data_mut());
    let mut dflat = vec![0.0; b * flat];
    gemm(b, a.hidden, flat, &dh, false, t[DENSE1_W].data(), false, 0.0, &mut dflat);

    // pool2 + ReLU
    let mut dconv2 = vec![0.0; cache.conv2.len()];
    for (d, &i) in dflat.iter().zip(&cache.pool2_idx) {
        dconv2[i] += d;
    }
    for (d, &v) in dconv2.iter_mut().zip(&cache.conv2) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }

    // conv2
    let (h2, w2) = a.pool1_dims();
    let hw2 = h2 * w2;
    let k2 = a.conv1_filters * KERNEL * KERNEL;
    let mut cols = vec![0.0; k2 * hw2];
    let mut dcols = vec![0.0; k2 * hw2];
    let mut dpool1 = vec![0.0; cache.pool1.len()];
    bias_grad(&dconv2, a.conv2_filters, hw2, g.tensors[CONV2_B].data_mut());
    for s in 0..b {
        let inp = &cache.pool1[s * a.conv1_filters * hw2..(s + 1) * a.conv1_filters * hw2];
        let dout = &dconv2[s * a.conv2_filters * hw2..(s + 1) * a.conv2_filters * hw2];
        im2col(inp, a.conv1_filters, h2, w2, &mut cols);
        gemm(a.conv2_filters, hw2, k2, dout, false, &cols, true, 1.0, g.tensors[CONV2_W].data_mut());
        gemm(k2, a.conv2_filters, hw2, t[CONV2_W].data(), true, dout, false, 0.0, &mut dcols);
        col2im(
            &dcols,
            a.conv1_filters,
            h2,
            w2,
            &mut dpool1[s * a.conv1_filters * hw2..(s + 1) * a.conv1_filters * hw2],
        );
    }

    // pool1 + ReLU
    let mut dconv1 = vec![0.0; cache.conv1.len()];
    for (d, &i) in dpool1.iter().zip(&cache.pool1_idx) {
        dconv1[i] += d;
    }
    for (d, &v) in dconv1.iter_mut().zip(&cache.conv1) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }

    // conv1; the input gradient is not needed.
    let (h, w) = (a.in_height, a.in_width);
    let hw = h * w;
    let k1 = a.in_channels * KERNEL * KERNEL;
    let mut cols1 = vec![0.0; k1 * hw];
    bias_grad(&dconv1, a.conv1_filters, hw, g.tensors[CONV1_B].data_mut());
    for s in 0..b {
        let inp = &cache.input[s * a.in_channels * hw..(s + 1) * a.in_channels * hw];
        let dout = &dconv1[s * a.conv1_filters * hw..(s + 1) * a.conv1_filters * hw];
        im2col(inp, a.in_channels, h, w, &mut cols1);
        gemm(a.conv1_filters, hw, k1, dout, false, &cols1, true, 1.0, g.tensors[CONV1_W].data_mut());
    }

    Ok(g)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            in_channels: 1,
            in_height: 8,
            in_width: 8,
            conv1_filters: 2,
            conv2_filters: 2,
            hidden: 4,
            classes: 5,
        }
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = ModelParams::zeros(tiny_arch()).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| i as f64 / 128.0).collect()).unwrap();
        assert!(forward(&m, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let m = ModelParams::init(tiny_arch(), 3).unwrap();
        let one: Vec<f64> = (0..64).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let x = Tensor::new(vec![2, 1, 8, 8], [one.clone(), one].concat()).unwrap();
        let l = forward(&m, &x).unwrap();
        assert_eq!(l.row(0), l.row(1));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let m = ModelParams::zeros(tiny_arch()).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 9]);
        let err = forward(&m, &x).unwrap_err().to_string();
        assert!(err.contains("conv1"), "{err}");
    }

    #[test]
    fn hand_computed_single_pixel_net() {
        // 4×4 input, one filter whose only nonzero tap is the center (=2),
        // conv2 center tap 1, hidden = single unit reading the one pooled
        // cell, output logits = [h, -h, 0, 0, 0] + bias.
        let arch = Architecture {
            in_channels: 1,
            in_height: 4,
            in_width: 4,
            conv1_filters: 1,
            conv2_filters: 1,
            hidden: 1,
            classes: 5,
        };
        let mut m = ModelParams::zeros(arch).unwrap();
        m.tensors[CONV1_W].data_mut()[4] = 2.0;
        m.tensors[CONV1_B].data_mut()[0] = -0.1;
        m.tensors[CONV2_W].data_mut()[4] = 1.0;
        m.tensors[DENSE1_W].data_mut()[0] = 3.0;
        m.tensors[DENSE2_W].data_mut()[0] = 1.0;
        m.tensors[DENSE2_W].data_mut()[1] = -1.0;
        m.tensors[DENSE2_B].data_mut()[2] = 0.5;
        let px = [0.1, 0.2, 0.3, 0.4, 0.5, 0.9, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.7];
        let x = Tensor::new(vec![1, 1, 4, 4], px.to_vec()).unwrap();
        // conv1 = relu(2·x − 0.1); pool1 takes 2×2 maxima:
        //   top-left {0.1,0.2,0.5,0.9} → 1.7, top-right {0.3,0.4,0,0} → 0.7,
        //   bottom-left {0,0,0,0} → 0 (relu(−0.1)), bottom-right {0.2,0,0,0.7} → 1.3.
        // conv2 (center tap only) = pool1; pool2 = max = 1.7; hidden = 3·1.7 = 5.1.
        let h = 5.1;
        let expected = [h, -h, 0.5, 0.0, 0.0];
        let l = forward(&m, &x).unwrap();
        for (a, b) in l.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", l.data());
        }
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let m = ModelParams::init(tiny_arch(), 1).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], vec![0.3; 64]).unwrap();
        let cache = forward_cached(&m, &x).unwrap();
        let g = backward(&m, &cache, &Tensor::zeros(&[1, 5])).unwrap();
        assert!(g.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let m = ModelParams::init(tiny_arch(), 5).unwrap();
        let one: Vec<f64> = (0..64).map(|i| ((i * 5) % 17) as f64 / 17.0).collect();
        let dl = [0.3, -0.7, 0.1, 0.25, 0.05];
        let single = Tensor::new(vec![1, 1, 8, 8], one.clone()).unwrap();
        let double = Tensor::new(vec![2, 1, 8, 8], [one.clone(), one].concat()).unwrap();
        let g1 = backward(&m, &forward_cached(&m, &single).unwrap(), &Tensor::new(vec![1, 5], dl.to_vec()).unwrap()).unwrap();
        let g2 = backward(&m, &forward_cached(&m, &double).unwrap(), &Tensor::new(vec![2, 5], [dl, dl].concat()).unwrap()).unwrap();
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} {y}");
            }
        }
    }

    #[test]
    fn default_architecture_sizes() {
        let a = Architecture::default();
        assert_eq!(a.flat_len(), 64 * 16 * 16);
        let p = ModelParams::zeros(a).unwrap();
        assert!(ModelParams::from_tensors(a, p.tensors[..7].to_vec()).is_err());
        assert_eq!(ModelParams::from_tensors(a, p.tensors.clone()).unwrap(), p);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
