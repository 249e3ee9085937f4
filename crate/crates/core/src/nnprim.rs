//! Layers shared by all five networks: equalized-learning-rate convolution
//! and linear layers, pixel norm, modulated convolution, minibatch standard
//! deviation, residual blocks and ×2 resampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// ε for pixel norm, demodulation and minibatch stddev.
pub const NORM_EPS: f64 = 1e-8;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    EqualizedConv,
    EqualizedLinear,
    ModulatedConv,
    PixelNorm,
    MinibatchStddev,
    ResidualBlock,
    Upsample,
    Downsample,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
            Activation::None => x,
        }
    }
}

/// Static description of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 4, 7].contains(&self.kernel) {
            return Err(shape_err!("kernel {} not in {{1,3,4,7}}", self.kernel));
        }
        if ![1, 2].contains(&self.stride) {
            return Err(shape_err!("stride {} not in {{1,2}}", self.stride));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(shape_err!("channel counts must be ≥ 1"));
        }
        Ok(())
    }
}

/// Runtime multiplier for unit-variance stored weights: `gain / √fan_in`.
pub fn equalized_scale(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in.max(1) as f64).sqrt()
}

/// Normalize every location's channel vector (axis 1) to unit RMS.
pub fn pixel_norm<T: Scalar>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 || shape[1] == 0 {
        return Err(shape_err!("pixel norm needs a channel axis, got {:?}", shape));
    }
    let mut reduced = shape.clone();
    reduced[1] = 1;
    let sq = g.square(x);
    let s = g.sum_to(sq, &reduced)?;
    let mean = g.scale(s, 1.0 / shape[1] as f64);
    let m = g.add_scalar(mean, eps);
    let r = g.rsqrt(m);
    g.mul(x, r)
}

/// Append the batch-wide feature standard deviation, averaged to one value,
/// as a constant extra channel.
pub fn minibatch_stddev<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [n, c, h, w] = match shape[..] {
        [n, c, h, w] if n >= 1 => [n, c, h, w],
        _ => return Err(shape_err!("minibatch stddev wants N×C×H×W, got {:?}", shape)),
    };
    let per = [1, c, h, w];
    let s = g.sum_to(x, &per)?;
    let mu = g.scale(s, 1.0 / n as f64);
    let d = g.sub(x, mu)?;
    let d2 = g.square(d);
    let vs = g.sum_to(d2, &per)?;
    let var = g.scale(vs, 1.0 / n as f64);
    let ve = g.add_scalar(var, NORM_EPS);
    let sd = g.sqrt(ve);
    let tot = g.sum_to(sd, &[1, 1, 1, 1])?;
    let avg = g.scale(tot, 1.0 / (c * h * w) as f64);
    let chan = g.broadcast_to(avg, &[n, 1, h, w])?;
    g.concat_channels(x, chan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Up,
    Down,
}

/// ×2 bilinear upsampling or 2×2 average-pool downsampling.
pub fn resample<T: Scalar>(g: &mut Graph<T>, x: Var, mode: Resample) -> Result<Var> {
    match mode {
        Resample::Up => g.upsample2(x),
        Resample::Down => g.avgpool2(x),
    }
}

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.sample::<f64, _>(StandardNormal)))
}

fn add_channel_bias<T: Scalar>(g: &mut Graph<T>, y: Var, b: Var) -> Result<Var> {
    let c = g.shape(b)[0];
    let b4 = g.reshape(b, &[1, c, 1, 1])?;
    g.add(y, b4)
}

/// Convolution with runtime weight scaling and a zero-initialized bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EqConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub gain: f64,
}

impl EqConv {
    /// "Same" padding for odd kernels.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        EqConv {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn scale(&self) -> f64 {
        equalized_scale(self.cin * self.kernel * self.kernel, self.gain)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(
            self.weight_name(),
            normal_tensor(vec![self.cout, self.cin, self.kernel, self.kernel], rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(vec![self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        let ws = g.scale(w, self.scale());
        let y = g.conv2d(x, ws, self.stride, self.pad)?;
        add_channel_bias(g, y, b)
    }
}

/// Fully connected layer with runtime weight scaling; weight is `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct EqLinear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
    pub gain: f64,
    pub bias_init: f64,
}

impl EqLinear {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        EqLinear {
            name: name.into(),
            fin,
            fout,
            gain: std::f64::consts::SQRT_2,
            bias_init: 0.0,
        }
    }

    pub fn with_bias_init(mut self, b: f64) -> Self {
        self.bias_init = b;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(self.weight_name(), normal_tensor(vec![self.fout, self.fin], rng));
        store.insert(self.bias_name(), Tensor::full(vec![self.fout], T::c(self.bias_init)));
    }

    /// `x: N×in → N×out`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        let ws = g.scale(w, equalized_scale(self.fin, self.gain));
        let wt = g.transpose(ws)?;
        let y = g.matmul(x, wt)?;
        let b2 = g.reshape(b, &[1, self.fout])?;
        g.add(y, b2)
    }
}

/// Convolution whose weights are modulated per input channel by a style
/// derived from the age latent, then demodulated to unit norm per output
/// channel. No noise input.
#[derive(Clone, Debug, PartialEq)]
pub struct ModConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub affine: EqLinear,
}

impl ModConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, latent_dim: usize) -> Self {
        let name = name.into();
        let affine = EqLinear::new(format!("{name}.affine"), latent_dim, cin).with_bias_init(1.0);
        ModConv {
            name,
            cin,
            cout,
            kernel,
            affine,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn scale(&self) -> f64 {
        equalized_scale(self.cin * self.kernel * self.kernel, std::f64::consts::SQRT_2)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(
            self.weight_name(),
            normal_tensor(vec![self.cout, self.cin, self.kernel, self.kernel], rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(vec![self.cout]));
        self.affine.init(store, rng);
    }

    /// `x: N×Ci×H×W`, `w_age: N×L → N×Co×H×W`.
    ///
    /// Evaluated as `d ⊙ conv(s ⊙ x, w)`, which equals a convolution with the
    /// per-sample demodulated weight `d_j·s_i·w_ji` without materializing it.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, w_age: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.cin {
            return Err(shape_err!(
                "{}: input {:?}, expected {} channels",
                self.name,
                xs,
                self.cin
            ));
        }
        let n = xs[0];
        if g.shape(w_age)[0] != n {
            return Err(shape_err!(
                "{}: latent batch {} vs features {}",
                self.name,
                g.shape(w_age)[0],
                n
            ));
        }
        let s = self.affine.forward(g, p, w_age)?;
        let s4 = g.reshape(s, &[n, self.cin, 1, 1])?;
        let xm = g.mul(x, s4)?;

        let w = p.get(&self.weight_name())?;
        let wc = g.scale(w, self.scale());
        let y = g.conv2d(xm, wc, 1, self.kernel / 2)?;

        let wsq = g.square(wc);
        let wsum = g.sum_to(wsq, &[self.cout, self.cin, 1, 1])?;
        let w2 = g.reshape(wsum, &[self.cout, self.cin])?;
        let w2t = g.transpose(w2)?;
        let s2 = g.square(s);
        let energy = g.matmul(s2, w2t)?;
        let e = g.add_scalar(energy, NORM_EPS);
        let d = g.rsqrt(e);
        let d4 = g.reshape(d, &[n, self.cout, 1, 1])?;
        let y = g.mul(y, d4)?;

        let b = p.get(&self.bias_name())?;
        add_channel_bias(g, y, b)
    }
}

/// Effective weight of a modulated convolution for one style vector:
/// `w″_jik = d_j · s_i · c·w_jik`, `d_j = 1/√(Σ_ik (s_i·c·w_jik)² + ε)`.
pub fn demodulated_weights<T: Scalar>(weight: &Tensor<T>, style: &[f64], scale: f64, eps: f64) -> Result<Tensor<T>> {
    let [co, ci, kh, kw] = weight.dims4();
    if weight.shape().len() != 4 || style.len() != ci {
        return Err(shape_err!(
            "weight {:?} with style of length {}",
            weight.shape(),
            style.len()
        ));
    }
    let kk = kh * kw;
    let src = weight.data();
    let mut out = Vec::with_capacity(src.len());
    for j in 0..co {
        let modulated: Vec<f64> = (0..ci * kk)
            .map(|q| style[q / kk] * scale * src[j * ci * kk + q].f64())
            .collect();
        let d = 1.0 / (modulated.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        out.extend(modulated.into_iter().map(|v| T::c(v * d)));
    }
    Tensor::new(vec![co, ci, kh, kw], out)
}

/// Two 3×3 convolutions, each followed by ReLU and pixel norm, around an
/// identity skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: EqConv,
    pub conv2: EqConv,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        ResBlock {
            conv1: EqConv::new(format!("{name}.conv1"), channels, channels, 3, 1),
            conv2: EqConv::new(format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.conv1.cin || self.conv1.cin != self.conv2.cout {
            return Err(Error::Shape(format!(
                "residual block {}: input has {} channels, block maps {}→{}",
                self.conv1.name, c, self.conv1.cin, self.conv2.cout
            )));
        }
        let mut h = x;
        for conv in [&self.conv1, &self.conv2] {
            h = conv.forward(g, p, h)?;
            h = g.relu(h);
            h = pixel_norm(g, h, NORM_EPS)?;
        }
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn pixel_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(vec![2, 5, 3, 3]));
        let y = pixel_norm(&mut g, ones, NORM_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.0).abs() < 1e-7));

        let x = g.constant(t(&[1, 2, 1, 1], &[3.0, 4.0]));
        let y = pixel_norm(&mut g, x, 0.0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.848528137423857).abs() < 1e-12);
        assert!((d[1] - 1.131370849898476).abs() < 1e-12);

        let z = g.constant(Tensor::zeros(vec![1, 4, 2, 2]));
        let y = pixel_norm(&mut g, z, NORM_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equalized_scale_examples() {
        assert!((equalized_scale(100, 2f64.sqrt()) - 0.1414213562373095).abs() < 1e-15);
        assert_eq!(equalized_scale(1, 1.0), 1.0);
        assert!((equalized_scale(2, 2f64.sqrt()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn minibatch_stddev_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 1, 1, 1], &[0.0, 2.0]));
        let y = minibatch_stddev(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1, 1]);
        let d = g.value(y).data();
        assert_eq!((d[0], d[2]), (0.0, 2.0));
        assert!((d[1] - 1.0).abs() < 1e-8 && (d[3] - 1.0).abs() < 1e-8);

        let same = g.constant(Tensor::full(vec![3, 2, 2, 2], 0.7));
        let y = minibatch_stddev(&mut g, same).unwrap();
        let extra = tensor_channel(g.value(y), 2);
        assert!(extra.iter().all(|&v| v.abs() < 1e-3));

        let single = g.constant(t(&[1, 1, 1, 2], &[5.0, -3.0]));
        let y = minibatch_stddev(&mut g, single).unwrap();
        assert!(tensor_channel(g.value(y), 1).iter().all(|&v| v.abs() < 1e-3));
    }

    fn tensor_channel(x: &Tensor<f64>, c: usize) -> Vec<f64> {
        let [n, cs, h, w] = x.dims4();
        let mut out = Vec::new();
        for b in 0..n {
            for i in 0..h * w {
                out.push(x.data()[(b * cs + c) * h * w + i]);
            }
        }
        out
    }

    #[test]
    fn minibatch_stddev_permutation_invariant() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let mut permuted = data[12..].to_vec();
        permuted.extend_from_slice(&data[..12]);
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3, 2, 2], &data));
        let b = g.constant(t(&[2, 3, 2, 2], &permuted));
        let ya = minibatch_stddev(&mut g, a).unwrap();
        let yb = minibatch_stddev(&mut g, b).unwrap();
        assert_eq!(tensor_channel(g.value(ya), 3), tensor_channel(g.value(yb), 3));
    }

    #[test]
    fn modulated_conv_hand_case() {
        // 1×1 kernel, one channel, stored weight 2, style 3: effective weight ≈ 1.
        let layer = ModConv::new("m", 1, 1, 1, 1);
        let mut store = ParamStore::<f64>::new();
        store.insert(layer.weight_name(), t(&[1, 1, 1, 1], &[2.0]));
        store.insert(layer.bias_name(), t(&[1], &[0.0]));
        // affine: s = c·a·w + b with c = √2 for fan-in 1; choose a = 0, b = 3.
        store.insert(layer.affine.weight_name(), t(&[1, 1], &[0.0]));
        store.insert(layer.affine.bias_name(), t(&[1], &[3.0]));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(t(&[1, 1, 2, 2], &[0.5, -1.0, 2.0, 0.25]));
        let w = g.constant(t(&[1, 1], &[0.7]));
        let y = layer.forward(&mut g, &p, x, w).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-8);
        let eff = demodulated_weights(&t(&[1, 1, 1, 1], &[2.0]), &[3.0], layer.scale(), NORM_EPS).unwrap();
        assert!((eff.item() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn modulated_conv_matches_explicit_demodulated_weights() {
        let layer = ModConv::new("m", 3, 4, 3, 5);
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng());
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xt = Tensor::from_fn(vec![2, 3, 5, 5], |i| ((i * 31 % 23) as f64 / 23.0) - 0.5);
        let wt = Tensor::from_fn(vec![2, 5], |i| ((i * 17 % 13) as f64 / 13.0) - 0.5);
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let y = layer.forward(&mut g, &p, x, w).unwrap();
        let s = layer.affine.forward(&mut g, &p, w).unwrap();
        let styles = g.value(s).clone();
        for b in 0..2 {
            let style: Vec<f64> = styles.data()[b * 3..(b + 1) * 3].to_vec();
            let eff = demodulated_weights(
                store.get(&layer.weight_name()).unwrap(),
                &style,
                layer.scale(),
                NORM_EPS,
            )
            .unwrap();
            for j in 0..4 {
                let norm: f64 = eff.data()[j * 27..(j + 1) * 27].iter().map(|v| v * v).sum();
                assert!((norm - 1.0).abs() < 1e-5);
            }
            let direct = crate::tensor::conv2d(&xt.batch_item(b), &eff, 1, 1).unwrap();
            let ours = g.value(y).batch_item(b);
            assert!(direct.max_abs_diff(&ours) < 1e-10);
        }
    }

    #[test]
    fn unit_style_is_weight_normalized_conv() {
        let layer = ModConv::new("m", 2, 2, 3, 3);
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng());
        store.insert(layer.affine.weight_name(), Tensor::zeros(vec![2, 3]));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xt = Tensor::from_fn(vec![1, 2, 4, 4], |i| (i as f64 * 0.37).sin());
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::ones(vec![1, 3]));
        let y = layer.forward(&mut g, &p, x, w).unwrap();
        let eff = demodulated_weights(
            store.get(&layer.weight_name()).unwrap(),
            &[1.0, 1.0],
            layer.scale(),
            NORM_EPS,
        )
        .unwrap();
        let direct = crate::tensor::conv2d(&xt, &eff, 1, 1).unwrap();
        assert!(direct.max_abs_diff(g.value(y)) < 1e-10);
    }

    #[test]
    fn modulated_conv_rejects_channel_mismatch() {
        let layer = ModConv::new("m", 3, 4, 3, 5);
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng());
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 5]));
        assert!(matches!(layer.forward(&mut g, &p, x, w), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_block_zero_weights_is_identity() {
        let block = ResBlock::new("r", 4);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng());
        for (_, v) in store.iter_mut() {
            v.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xt = Tensor::from_fn(vec![1, 4, 3, 3], |i| (i as f64).cos());
        let x = g.param(xt.clone());
        let y = block.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &xt);
        // d(Σ y·v)/dx = v through the skip path alone
        let v = g.constant(Tensor::from_fn(vec![1, 4, 3, 3], |i| i as f64));
        let yv = g.mul(y, v).unwrap();
        let s = g.sum_all(yv).unwrap();
        let gx = g.grad(s, &[x], false).unwrap()[0];
        assert_eq!(g.value(gx), g.value(v));
    }

    #[test]
    fn residual_block_shape_and_mismatch() {
        let block = ResBlock::new("r", 8);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng());
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::ones(vec![1, 8, 6, 6]));
        let y = block.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 6, 6]);
        let bad = g.constant(Tensor::ones(vec![1, 4, 6, 6]));
        assert!(block.forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn resample_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(vec![1, 2, 3, 3], 0.42));
        let up = resample(&mut g, c, Resample::Up).unwrap();
        assert_eq!(g.shape(up), &[1, 2, 6, 6]);
        assert!(g.value(up).data().iter().all(|&v| (v - 0.42).abs() < 1e-15));
        let ones = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let down = resample(&mut g, ones, Resample::Down).unwrap();
        assert_eq!(g.value(down).data(), &[1.0]);
        let odd = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        assert!(resample(&mut g, odd, Resample::Down).is_err());
    }

    #[test]
    fn layer_spec_validation() {
        let ok = LayerSpec {
            kind: LayerKind::EqualizedConv,
            kernel: 7,
            stride: 1,
            in_channels: 3,
            out_channels: 64,
            activation: Activation::Relu,
        };
        assert!(ok.validate().is_ok());
        assert!(LayerSpec { kernel: 5, ..ok }.validate().is_err());
        assert!(LayerSpec { stride: 3, ..ok }.validate().is_err());
        assert!(LayerSpec { in_channels: 0, ..ok }.validate().is_err());
    }

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x0: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x).unwrap();
        let gx = g.grad(y, &[x], false).unwrap()[0];
        let analytic = g.value(gx).clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let f = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.param(xp);
                let y = build(&mut g, v).unwrap();
                g.value(y).item()
            };
            let num = (f(h) - f(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-3, "coord {i}: analytic {a} numeric {num}");
        }
    }

    fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let w = g.constant(Tensor::from_fn(shape, |i| ((i * 13 % 7) as f64) - 3.0));
        let p = g.mul(y, w)?;
        g.sum_all(p)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x0 = Tensor::from_fn(vec![2, 3, 4, 4], |i| ((i * 29 % 31) as f64 / 31.0) - 0.45);
        fd_check(
            |g, x| {
                let y = pixel_norm(g, x, NORM_EPS)?;
                weighted_sum(g, y)
            },
            x0.clone(),
        );
        fd_check(
            |g, x| {
                let y = minibatch_stddev(g, x)?;
                weighted_sum(g, y)
            },
            x0.clone(),
        );
        fd_check(
            |g, x| {
                let y = resample(g, x, Resample::Up)?;
                let y = resample(g, y, Resample::Down)?;
                let y = resample(g, y, Resample::Down)?;
                weighted_sum(g, y)
            },
            x0.clone(),
        );
        let layer = ModConv::new("m", 3, 2, 3, 4);
        let block = ResBlock::new("r", 3);
        let mut store = ParamStore::<f64>::new();
        layer.init(&mut store, &mut rng());
        block.init(&mut store, &mut rng());
        fd_check(
            |g, x| {
                let p = store.bind(g, false);
                let w = g.constant(Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.3).sin()));
                let y = layer.forward(g, &p, x, w)?;
                weighted_sum(g, y)
            },
            x0.clone(),
        );
        fd_check(
            |g, x| {
                let p = store.bind(g, false);
                let y = block.forward(g, &p, x)?;
                weighted_sum(g, y)
            },
            x0,
        );
    }
}
