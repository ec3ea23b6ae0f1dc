//! Differentiable building blocks: convolution (im2col), batch
//! normalization, fully connected layers, and ReLU, all in f64 with explicit
//! forward caches and hand-written backward passes.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView3, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub vel: ArrayD<f64>,
    /// Whether L2 regularization applies (false for batch-norm affine terms).
    pub decay: bool,
}

impl Param {
    pub fn new(name: &str, value: ArrayD<f64>, decay: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let vel = ArrayD::zeros(value.raw_dim());
        Param { name: name.to_string(), value, grad, vel, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, sd).unwrap();
    ArrayD::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Unrolls one image (C,H,W) into (C*k*k, Ho*Wo) patch columns.
pub fn im2col(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im(
    gcols: &Array2<f64>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let (c, h, w) = shape;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut gx = ndarray::Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] += gcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    gx
}

/// 2D convolution with square kernels and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    k: usize,
    in_channels: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * k * k;
        let w = Param::new(
            &format!("{name}.w"),
            he_normal(&[out_channels, in_channels, k, k], fan_in, rng),
            true,
        );
        let b = bias.then(|| {
            Param::new(&format!("{name}.b"), ArrayD::zeros(vec![out_channels]), false)
        });
        Conv2d { w, b, stride, pad: k / 2, k, in_channels, cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let cout = self.w.value.shape()[0];
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((cout, self.in_channels * self.k * self.k))
            .unwrap();
        let mut cols_cache = Vec::new();
        let mut out: Option<Array4<f64>> = None;
        for ni in 0..n {
            let (cols, ho, wo) = im2col(&x.index_axis(Axis(0), ni), self.k, self.stride, self.pad);
            let y = w2.dot(&cols); // (cout, ho*wo)
            let o = out.get_or_insert_with(|| Array4::zeros((n, cout, ho, wo)));
            let mut slot = o.index_axis_mut(Axis(0), ni);
            slot.assign(&y.into_shape_with_order((cout, ho, wo)).unwrap());
            if train {
                cols_cache.push(cols);
            }
        }
        let mut out = out.unwrap();
        if let Some(b) = &self.b {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for ci in 0..cout {
                out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bv[ci]);
            }
        }
        if train {
            self.cache = Some(ConvCache { cols: cols_cache, in_shape: (n, c, h, w) });
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("conv backward without forward");
        let (n, c, h, w) = cache.in_shape;
        let cout = self.w.value.shape()[0];
        let kk = self.in_channels * self.k * self.k;
        let w2 = self.w.value.view().into_shape_with_order((cout, kk)).unwrap().to_owned();
        let mut gw = Array2::<f64>::zeros((cout, kk));
        let mut gx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            let gyi = gy.index_axis(Axis(0), ni);
            let (_, ho, wo) = gyi.dim();
            let gy2 = gyi.into_shape_with_order((cout, ho * wo)).unwrap();
            gw = gw + gy2.dot(&cache.cols[ni].t());
            let gcols = w2.t().dot(&gy2);
            let gxi = col2im(&gcols, (c, h, w), self.k, self.stride, self.pad);
            gx.index_axis_mut(Axis(0), ni).assign(&gxi);
        }
        let gw = gw.into_shape_with_order(self.w.value.raw_dim()).unwrap();
        self.w.grad += &gw;
        if let Some(b) = &mut self.b {
            let mut gb = Array1::<f64>::zeros(cout);
            for ci in 0..cout {
                gb[ci] = gy.index_axis(Axis(1), ci).sum();
            }
            b.grad += &gb.into_dyn();
        }
        gx
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.w];
        if let Some(b) = &mut self.b {
            p.push(b);
        }
        p
    }
}

/// Per-channel batch normalization over (N, H, W) with running statistics
/// for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Array4<f64>, Array1<f64>)>, // (xhat, inv_std)
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::new(&format!("{name}.gamma"), ArrayD::ones(vec![channels]), false),
            beta: Param::new(&format!("{name}.beta"), ArrayD::zeros(vec![channels]), false),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (_, c, _, _) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.clone();
        if train {
            let mut xhat = x.clone();
            let mut inv_std = Array1::zeros(c);
            for ci in 0..c {
                let ch = x.index_axis(Axis(1), ci);
                let m = ch.len() as f64;
                let mean = ch.sum() / m;
                let var = ch.mapv(|v| (v - mean) * (v - mean)).sum() / m;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[ci] = is;
                xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mean) * is);
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
            }
            for ci in 0..c {
                let xh = xhat.index_axis(Axis(1), ci).to_owned();
                y.index_axis_mut(Axis(1), ci)
                    .assign(&xh.mapv(|v| gamma[ci] * v + beta[ci]));
            }
            self.cache = Some((xhat, inv_std));
        } else {
            for ci in 0..c {
                let mean = self.running_mean[ci];
                let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                y.index_axis_mut(Axis(1), ci)
                    .mapv_inplace(|v| gamma[ci] * (v - mean) * is + beta[ci]);
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let (xhat, inv_std) = self.cache.take().expect("bn backward without forward");
        let (_, c, _, _) = gy.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut gx = Array4::zeros(gy.raw_dim());
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ci in 0..c {
            let g = gy.index_axis(Axis(1), ci);
            let xh = xhat.index_axis(Axis(1), ci);
            let m = g.len() as f64;
            let sum_g = g.sum();
            let sum_gx = (&g * &xh).sum();
            dgamma[ci] = sum_gx;
            dbeta[ci] = sum_g;
            let coef = gamma[ci] * inv_std[ci] / m;
            let dx = g
                .to_owned()
                .mapv(|v| m * v)
                .into_iter()
                .zip(xh.iter())
                .map(|(mv, &x)| coef * (mv - sum_g - x * sum_gx))
                .collect::<Vec<f64>>();
            gx.index_axis_mut(Axis(1), ci)
                .assign(&ndarray::Array::from_shape_vec(g.raw_dim(), dx).unwrap());
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        gx
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Fully connected layer: y = x Wᵀ + b over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(
                &format!("{name}.w"),
                he_normal(&[out_features, in_features], in_features, rng),
                true,
            ),
            b: Param::new(&format!("{name}.b"), ArrayD::zeros(vec![out_features]), false),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward without forward");
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        self.w.grad += &gy.t().dot(&x).into_dyn();
        self.b.grad += &gy.sum_axis(Axis(0)).into_dyn();
        gy.dot(&w)
    }

    pub fn params(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// ReLU with cached output for the backward mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<ArrayD<f64>>,
}

impl Relu {
    pub fn forward_4d(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.cache = Some(y.clone().into_dyn());
        }
        y
    }

    pub fn backward_4d(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let y = self.cache.take().expect("relu backward without forward");
        let y = y.into_dimensionality::<ndarray::Ix4>().unwrap();
        gy * &y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn forward_2d(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.cache = Some(y.clone().into_dyn());
        }
        y
    }

    pub fn backward_2d(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let y = self.cache.take().expect("relu backward without forward");
        let y = y.into_dimensionality::<Ix2>().unwrap();
        gy * &y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }
}

/// Nearest-neighbour 2× upsampling (FPN top-down path).
pub fn upsample2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ni, ci, i, j]];
                    y[[ni, ci, 2 * i, 2 * j]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    y[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: 2×2 sum pooling of the gradient.
pub fn upsample2x_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[ni, ci, i, j]] = gy[[ni, ci, 2 * i, 2 * j]]
                        + gy[[ni, ci, 2 * i + 1, 2 * j]]
                        + gy[[ni, ci, 2 * i, 2 * j + 1]]
                        + gy[[ni, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}
