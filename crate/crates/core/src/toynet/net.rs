//! Two 3×3 convolutions with rectifiers followed by a 1×1 classifier, with a
//! hand-written reverse pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor_io::Tensor3;

pub const INPUT_CHANNELS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 16;

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    pub input: usize,
    pub hidden: usize,
    pub features: usize,
    pub outputs: usize,
}

impl NetDims {
    pub fn new(features: usize, outputs: usize) -> Self {
        Self {
            input: INPUT_CHANNELS,
            hidden: DEFAULT_HIDDEN,
            features,
            outputs,
        }
    }

    fn sizes(&self) -> [usize; 6] {
        [
            self.hidden * self.input * 9,
            self.hidden,
            self.features * self.hidden * 9,
            self.features,
            self.outputs * self.features,
            self.outputs,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.sizes().iter().sum()
    }

    fn offsets(&self) -> [usize; 7] {
        let mut o = [0; 7];
        for (i, s) in self.sizes().iter().enumerate() {
            o[i + 1] = o[i] + s;
        }
        o
    }
}

/// Names of the parameter blocks, in storage order.
pub const BLOCK_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

/// Flat parameter vector `[conv1.w, conv1.b, conv2.w, conv2.b, head.w, head.b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetParams {
    dims: NetDims,
    params: Vec<f64>,
}

fn uniform_fill(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl ToyNetParams {
    pub fn from_params(dims: NetDims, params: Vec<f64>) -> Result<Self> {
        if params.len() != dims.num_params() {
            return Err(Error::Length {
                expected: dims.num_params(),
                found: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("network parameters must be finite".into()));
        }
        Ok(Self { dims, params })
    }

    /// He-uniform convolution weights, Glorot-uniform head, zero biases.
    pub fn init(dims: NetDims, rng: &mut impl Rng) -> Self {
        let mut params = Vec::with_capacity(dims.num_params());
        params.extend(uniform_fill(rng, dims.hidden * dims.input * 9, (6.0 / (dims.input * 9) as f64).sqrt()));
        params.extend(vec![0.0; dims.hidden]);
        params.extend(uniform_fill(rng, dims.features * dims.hidden * 9, (6.0 / (dims.hidden * 9) as f64).sqrt()));
        params.extend(vec![0.0; dims.features]);
        params.extend(head_rows(rng, dims.outputs, dims.features, dims.outputs));
        params.extend(vec![0.0; dims.outputs]);
        Self { dims, params }
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter block `i` in [`BLOCK_NAMES`] order.
    pub fn block(&self, i: usize) -> &[f64] {
        let o = self.dims.offsets();
        &self.params[o[i]..o[i + 1]]
    }

    /// Returns a copy whose head has `k` extra output rows, freshly
    /// initialized; existing rows are kept.
    pub fn widen_head(&self, k: usize, rng: &mut impl Rng) -> Self {
        let d = self.dims;
        let nd = NetDims {
            outputs: d.outputs + k,
            ..d
        };
        let o = d.offsets();
        let mut params = self.params[..o[4]].to_vec();
        params.extend_from_slice(self.block(4));
        params.extend(head_rows(rng, k, d.features, nd.outputs));
        params.extend_from_slice(self.block(5));
        params.extend(vec![0.0; k]);
        Self { dims: nd, params }
    }

    /// Parameter blocks as tensors: convolution weights as
    /// `out × in × 9`, head weight as `out × features × 1`, biases as `1 × 1 × n`.
    pub fn to_tensors(&self) -> Vec<(&'static str, Tensor3)> {
        let d = self.dims;
        let shapes = [
            (d.hidden, d.input, 9),
            (1, 1, d.hidden),
            (d.features, d.hidden, 9),
            (1, 1, d.features),
            (d.outputs, d.features, 1),
            (1, 1, d.outputs),
        ];
        BLOCK_NAMES
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (&name, (c, h, w)))| (name, Tensor3::from_f64(c, h, w, self.block(i)).expect("finite params")))
            .collect()
    }

    /// Inverse of [`ToyNetParams::to_tensors`]; widths are read from the shapes.
    pub fn from_tensors(blocks: &[Tensor3]) -> Result<Self> {
        if blocks.len() != 6 {
            return Err(Error::Shape(format!("expected 6 parameter blocks, got {}", blocks.len())));
        }
        let hidden = blocks[0].channels();
        let input = blocks[0].height();
        let features = blocks[2].channels();
        let outputs = blocks[4].channels();
        let dims = NetDims {
            input,
            hidden,
            features,
            outputs,
        };
        let expect = [
            (hidden, input, 9),
            (1, 1, hidden),
            (features, hidden, 9),
            (1, 1, features),
            (outputs, features, 1),
            (1, 1, outputs),
        ];
        let mut params = Vec::with_capacity(dims.num_params());
        for ((i, t), (c, h, w)) in blocks.iter().enumerate().zip(expect) {
            if (t.channels(), t.height(), t.width()) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "{} has shape {}x{}x{}, expected {c}x{h}x{w}",
                    BLOCK_NAMES[i],
                    t.channels(),
                    t.height(),
                    t.width()
                )));
            }
            params.extend(t.to_f64());
        }
        Self::from_params(dims, params)
    }

    /// Runs the network on a `3 × h × w` image stored channel-major.
    pub fn forward_raw(&self, image: &[f64], h: usize, w: usize) -> ForwardCache {
        let d = self.dims;
        assert_eq!(image.len(), d.input * h * w, "image size");
        let mut a1 = conv3x3(image, d.input, h, w, self.block(0), self.block(1), d.hidden);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut features = conv3x3(&a1, d.hidden, h, w, self.block(2), self.block(3), d.features);
        features.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = pointwise(&features, d.features, h * w, self.block(4), self.block(5), d.outputs);
        ForwardCache {
            height: h,
            width: w,
            input: image.to_vec(),
            a1,
            features,
            logits,
        }
    }

    /// Feature map `F` and logits `U` for a `3 × H × W` image.
    pub fn forward(&self, image: &Tensor3) -> Result<(Tensor3, Tensor3)> {
        if image.channels() != self.dims.input {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.dims.input,
                image.channels()
            )));
        }
        let (h, w) = (image.height(), image.width());
        let cache = self.forward_raw(&image.to_f64(), h, w);
        Ok((
            Tensor3::from_f64(self.dims.features, h, w, &cache.features)?,
            Tensor3::from_f64(self.dims.outputs, h, w, &cache.logits)?,
        ))
    }

    /// Accumulates parameter gradients given upstream gradients on the logits
    /// and/or directly on the feature map.
    pub fn backward(&self, cache: &ForwardCache, d_logits: Option<&[f64]>, d_features: Option<&[f64]>, grads: &mut [f64]) {
        let d = self.dims;
        let (h, w) = (cache.height, cache.width);
        let plane = h * w;
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let o = d.offsets();
        let mut d_f = match d_features {
            Some(g) => {
                assert_eq!(g.len(), d.features * plane, "feature gradient size");
                g.to_vec()
            }
            None => vec![0.0; d.features * plane],
        };
        if let Some(du) = d_logits {
            assert_eq!(du.len(), d.outputs * plane, "logit gradient size");
            let (head, rest) = grads[o[4]..o[6]].split_at_mut(d.outputs * d.features);
            let wh = self.block(4);
            for out in 0..d.outputs {
                let g = &du[out * plane..(out + 1) * plane];
                rest[out] += g.iter().sum::<f64>();
                for f in 0..d.features {
                    let feat = &cache.features[f * plane..(f + 1) * plane];
                    head[out * d.features + f] += dot(g, feat);
                    axpy(wh[out * d.features + f], g, &mut d_f[f * plane..(f + 1) * plane]);
                }
            }
        }
        // rectifier on conv2
        for (g, &v) in d_f.iter_mut().zip(&cache.features) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d_a1 = vec![0.0; d.hidden * plane];
        {
            let (gw, gb) = grads[o[2]..o[4]].split_at_mut(d.features * d.hidden * 9);
            conv3x3_backward(&cache.a1, d.hidden, h, w, self.block(2), d.features, &d_f, gw, gb, Some(&mut d_a1));
        }
        for (g, &v) in d_a1.iter_mut().zip(&cache.a1) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        let (gw, gb) = grads[o[0]..o[2]].split_at_mut(d.hidden * d.input * 9);
        conv3x3_backward(&cache.input, d.input, h, w, self.block(0), d.hidden, &d_a1, gw, gb, None);
    }
}

fn head_rows(rng: &mut impl Rng, rows: usize, features: usize, outputs: usize) -> Vec<f64> {
    uniform_fill(rng, rows * features, (6.0 / (features + outputs) as f64).sqrt())
}

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub height: usize,
    pub width: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    /// Rectified conv2 output `F`, channel-major.
    pub features: Vec<f64>,
    /// Head output `U`, channel-major.
    pub logits: Vec<f64>,
}

impl ForwardCache {
    /// Which rectifiers of both convolution layers are active.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.a1.iter().chain(&self.features).map(|&v| v > 0.0).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Valid output column range and input offset for kernel column `kx`.
fn span(kx: usize, w: usize) -> (usize, usize) {
    // output x reads input x + kx − 1
    let lo = usize::from(kx == 0);
    let hi = if kx == 2 { w - 1 } else { w };
    (lo, hi)
}

/// Stride-1, zero-padded 3×3 convolution; weights laid out `[out][in][ky][kx]`.
pub(crate) fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weights: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let (y_lo, y_hi) = span(ky, h);
                for kx in 0..3 {
                    let wv = weights[((o * cin + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = span(kx, w);
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * w + x_lo..y * w + x_hi];
                        let s = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                        axpy(wv, s, d);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    d_out: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
    mut d_in: Option<&mut [f64]>,
) {
    let plane = h * w;
    for o in 0..cout {
        let g = &d_out[o * plane..(o + 1) * plane];
        d_b[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let (y_lo, y_hi) = span(ky, h);
                for kx in 0..3 {
                    let idx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let (x_lo, x_hi) = span(kx, w);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + x_lo..y * w + x_hi];
                        let s = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                        acc += dot(gr, s);
                    }
                    d_w[idx] += acc;
                    if let Some(di) = d_in.as_deref_mut() {
                        let wv = weights[idx];
                        let dst = &mut di[i * plane..(i + 1) * plane];
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let gr = &g[y * w + x_lo..y * w + x_hi];
                            axpy(wv, gr, &mut dst[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1]);
                        }
                    }
                }
            }
        }
    }
}

fn pointwise(input: &[f64], cin: usize, plane: usize, weights: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            axpy(weights[o * cin + i], &input[i * plane..(i + 1) * plane], dst);
        }
    }
    out
}

/// Scatters a gradient on a region-pooled vector back onto the feature map.
pub fn pool_backward(d_pooled: &[f64], mask: &[bool], d_features: &mut [f64]) {
    let plane = mask.len();
    let n = mask.iter().filter(|&&b| b).count();
    if n == 0 {
        return;
    }
    let inv = 1.0 / n as f64;
    for (c, &g) in d_pooled.iter().enumerate() {
        let dst = &mut d_features[c * plane..(c + 1) * plane];
        for (d, &b) in dst.iter_mut().zip(mask) {
            if b {
                *d += g * inv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(input: &[f64], cin: usize, h: usize, w: usize, weights: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += weights[((o * cin + i) * 3 + ky) * 3 + kx] * input[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cin, cout, h, w) = (2, 3, 5, 7);
        let input: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let a = conv3x3(&input, cin, h, w, &weights, &bias, cout);
        let b = direct_conv(&input, cin, h, w, &weights, &bias, cout);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_image_reproduces_kernel() {
        let (h, w) = (5, 5);
        let mut input = vec![0.0; h * w];
        input[2 * w + 2] = 1.0;
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let out = conv3x3(&input, 1, h, w, &kernel, &[0.0], 1);
        // a delta at the centre produces the flipped kernel around it
        for ky in 0..3 {
            for kx in 0..3 {
                assert_eq!(out[(1 + ky) * w + 1 + kx], kernel[(2 - ky) * 3 + (2 - kx)]);
            }
        }
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let dims = NetDims::new(4, 3);
        let mut params = vec![0.0; dims.num_params()];
        let n = params.len();
        params[n - 3..].copy_from_slice(&[0.5, -1.0, 2.0]);
        let net = ToyNetParams::from_params(dims, params).unwrap();
        let img = Tensor3::filled(3, 4, 5, 0.7);
        let (f, u) = net.forward(&img).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        for c in 0..3 {
            assert!(u.channel(c).iter().all(|&v| v == [0.5, -1.0, 2.0][c] as f32));
        }
    }

    #[test]
    fn doubling_conv2_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ToyNetParams::init(NetDims::new(4, 2), &mut rng);
        let mut doubled = net.clone();
        let o = net.dims.offsets();
        doubled.params[o[2]..o[4]].iter_mut().for_each(|v| *v *= 2.0);
        let img: Vec<f64> = (0..3 * 36).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = net.forward_raw(&img, 6, 6);
        let b = doubled.forward_raw(&img, 6, 6);
        for (x, y) in a.features.iter().zip(&b.features) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_equivariance_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ToyNetParams::init(NetDims::new(4, 2), &mut rng);
        let (h, w) = (12, 12);
        let img: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut shifted = vec![0.0; img.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 1..w {
                    shifted[(c * h + y) * w + x] = img[(c * h + y) * w + x - 1];
                }
            }
        }
        let a = net.forward_raw(&img, h, w);
        let b = net.forward_raw(&shifted, h, w);
        for c in 0..2 {
            for y in 2..h - 2 {
                for x in 3..w - 2 {
                    let u = a.logits[(c * h + y) * w + x - 1];
                    let v = b.logits[(c * h + y) * w + x];
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ToyNetParams::init(NetDims::new(3, 2), &mut rng);
        let (h, w) = (4, 5);
        let img: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let du: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let df: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &ToyNetParams| {
            let c = p.forward_raw(&img, h, w);
            dot(&c.logits, &du) + dot(&c.features, &df)
        };
        let cache = net.forward_raw(&img, h, w);
        let mut grads = vec![0.0; net.params.len()];
        net.backward(&cache, Some(&du), Some(&df), &mut grads);
        let step = 1e-6;
        for i in 0..net.params.len() {
            let mut plus = net.clone();
            plus.params[i] += step;
            let mut minus = net.clone();
            minus.params[i] -= step;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * step);
            assert!((fd - grads[i]).abs() < 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ToyNetParams::init(NetDims::new(3, 2), &mut rng);
        let img = vec![0.5; 3 * 9];
        let cache = net.forward_raw(&img, 3, 3);
        let mut grads = vec![0.0; net.params.len()];
        net.backward(&cache, Some(&[0.0; 18]), None, &mut grads);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn widen_keeps_old_rows_and_tensors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ToyNetParams::init(NetDims::new(3, 2), &mut rng);
        let wide = net.widen_head(2, &mut rng);
        assert_eq!(wide.dims.outputs, 4);
        assert_eq!(&wide.block(4)[..6], net.block(4));
        assert_eq!(&wide.block(5)[..2], net.block(5));
        assert!(wide.block(4)[6..].iter().any(|&v| v != 0.0));
        let tensors: Vec<Tensor3> = wide.to_tensors().into_iter().map(|(_, t)| t).collect();
        let back = ToyNetParams::from_tensors(&tensors).unwrap();
        assert_eq!(back.dims, wide.dims);
        for (a, b) in back.params.iter().zip(&wide.params) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn pool_backward_spreads_evenly() {
        let mask = [true, false, true, true];
        let mut d = vec![0.0; 8];
        pool_backward(&[3.0, -6.0], &mask, &mut d);
        assert_eq!(d, vec![1.0, 0.0, 1.0, 1.0, -2.0, 0.0, -2.0, -2.0]);
    }
}
