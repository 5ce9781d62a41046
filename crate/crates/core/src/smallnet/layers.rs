//! Forward/backward kernels for the layer kinds an architecture can contain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::phenotype::{LayerSpec, Shape3};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Train,
    /// Batch statistics like `Train`, but dropout is the identity. Used by
    /// gradient checking.
    TrainNoDropout,
    Infer,
}

impl Mode {
    fn is_train(self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn uniform(len: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            value: (0..len).map(|_| rng.gen_range(-limit..=limit)).collect(),
            grad: vec![0.0; len],
        }
    }

    fn filled(len: usize, v: f64) -> Self {
        Self {
            value: vec![v; len],
            grad: vec![0.0; len],
        }
    }
}

/// `c = a · b + beta · c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
    output: Option<Tensor>,
    cols: Vec<f64>,
}

impl Conv {
    fn new(input: Shape3, filters: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = input.channels * kernel * kernel;
        let limit = (6.0 / fan_in as f64).sqrt();
        Self {
            in_c: input.channels,
            out_c: filters,
            k: kernel,
            h: input.height,
            w: input.width,
            weight: Param::uniform(filters * fan_in, limit, rng),
            bias: Param::filled(filters, 0.0),
            input: None,
            output: None,
            cols: Vec::new(),
        }
    }

    fn ckk(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Unrolls one `[c, h, w]` sample into `[c*k*k, h*w]` patches with
    /// zero "same" padding.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.in_c {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad;
                        let out = &mut row[y * w..(y + 1) * w];
                        if iy < 0 || iy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (x, o) in out.iter_mut().enumerate() {
                            let ix = x as isize + kx as isize - pad;
                            *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.in_c {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    for y in 0..h {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for x in 0..w {
                            let ix = x as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[y * w + x];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let n = x.batch();
        let hw = self.h * self.w;
        let ckk = self.ckk();
        let mut out = Tensor::zeros(vec![n, self.out_c, self.h, self.w]);
        let mut cols = std::mem::take(&mut self.cols);
        cols.resize(ckk * hw, 0.0);
        let in_len = self.in_c * hw;
        let out_len = self.out_c * hw;
        for s in 0..n {
            self.im2col(&x.data[s * in_len..(s + 1) * in_len], &mut cols);
            let dst = &mut out.data[s * out_len..(s + 1) * out_len];
            gemm(self.out_c, ckk, hw, &self.weight.value, (ckk, 1), &cols, (hw, 1), 0.0, dst, (hw, 1));
            for (f, plane) in dst.chunks_mut(hw).enumerate() {
                let b = self.bias.value[f];
                for v in plane {
                    *v = (*v + b).max(0.0);
                }
            }
        }
        self.cols = cols;
        if mode.is_train() {
            self.input = Some(x);
            self.output = Some(out.clone());
        }
        out
    }

    fn backward(&mut self, mut dout: Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.input.take().expect("conv backward without forward");
        let out = self.output.take().expect("conv backward without forward");
        let n = x.batch();
        let hw = self.h * self.w;
        let ckk = self.ckk();
        let in_len = self.in_c * hw;
        let out_len = self.out_c * hw;
        let mut cols = std::mem::take(&mut self.cols);
        cols.resize(ckk * hw, 0.0);
        let mut dcols = if need_dx { vec![0.0; ckk * hw] } else { Vec::new() };
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape.clone()));
        for s in 0..n {
            let dpre = &mut dout.data[s * out_len..(s + 1) * out_len];
            for (d, &o) in dpre.iter_mut().zip(&out.data[s * out_len..(s + 1) * out_len]) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            for (f, plane) in dpre.chunks(hw).enumerate() {
                self.bias.grad[f] += plane.iter().sum::<f64>();
            }
            self.im2col(&x.data[s * in_len..(s + 1) * in_len], &mut cols);
            // dW += dpre · colsᵀ
            gemm(self.out_c, hw, ckk, dpre, (hw, 1), &cols, (1, hw), 1.0, &mut self.weight.grad, (ckk, 1));
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dpre
                gemm(ckk, self.out_c, hw, &self.weight.value, (1, ckk), dpre, (hw, 1), 0.0, &mut dcols, (hw, 1));
                self.col2im_add(&dcols, &mut dx.data[s * in_len..(s + 1) * in_len]);
            }
        }
        self.cols = cols;
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Pool {
    max: bool,
    c: usize,
    h: usize,
    w: usize,
    input_shape: Vec<usize>,
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

impl Pool {
    fn new(input: Shape3, max: bool) -> Self {
        Self {
            max,
            c: input.channels,
            h: input.height,
            w: input.width,
            input_shape: Vec::new(),
            argmax: Vec::new(),
        }
    }

    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let n = x.batch();
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut out = Tensor::zeros(vec![n, self.c, oh, ow]);
        if self.max && mode.is_train() {
            self.argmax.clear();
            self.argmax.reserve(out.data.len());
        }
        let mut o = 0;
        for plane in 0..n * self.c {
            let base = plane * self.h * self.w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i00 = base + 2 * y * self.w + 2 * xx;
                    let idx = [i00, i00 + 1, i00 + self.w, i00 + self.w + 1];
                    if self.max {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if x.data[i] > x.data[best] {
                                best = i;
                            }
                        }
                        out.data[o] = x.data[best];
                        if mode.is_train() {
                            self.argmax.push(best);
                        }
                    } else {
                        out.data[o] = idx.iter().map(|&i| x.data[i]).sum::<f64>() * 0.25;
                    }
                    o += 1;
                }
            }
        }
        if mode.is_train() {
            self.input_shape = x.shape;
        }
        out
    }

    fn backward(&mut self, dout: Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.input_shape.clone());
        if self.max {
            for (&i, &g) in self.argmax.iter().zip(&dout.data) {
                dx.data[i] += g;
            }
            return dx;
        }
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut o = 0;
        for plane in 0..dx.batch() * self.c {
            let base = plane * self.h * self.w;
            for y in 0..oh {
                for xx in 0..ow {
                    let g = dout.data[o] * 0.25;
                    let i00 = base + 2 * y * self.w + 2 * xx;
                    for i in [i00, i00 + 1, i00 + self.w, i00 + self.w + 1] {
                        dx.data[i] += g;
                    }
                    o += 1;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm {
    c: usize,
    hw: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    fn new(input: Shape3) -> Self {
        let c = input.channels;
        Self {
            c,
            hw: input.height * input.width,
            gamma: Param::filled(c, 1.0),
            beta: Param::filled(c, 0.0),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            xhat: Vec::new(),
            inv_std: Vec::new(),
        }
    }

    fn forward(&mut self, mut x: Tensor, mode: Mode) -> Tensor {
        let n = x.batch();
        let (c, hw) = (self.c, self.hw);
        let count = (n * hw) as f64;
        if !mode.is_train() {
            for s in 0..n {
                for ch in 0..c {
                    let inv = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
                    let (g, b, m) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean[ch]);
                    for v in &mut x.data[(s * c + ch) * hw..][..hw] {
                        *v = g * (*v - m) * inv + b;
                    }
                }
            }
            return x;
        }
        self.xhat.resize(x.data.len(), 0.0);
        self.inv_std.resize(c, 0.0);
        for ch in 0..c {
            let mut mean = 0.0;
            for s in 0..n {
                mean += x.data[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for s in 0..n {
                var += x.data[(s * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            self.inv_std[ch] = inv;
            self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean;
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data[i] - mean) * inv;
                    self.xhat[i] = xh;
                    x.data[i] = g * xh + b;
                }
            }
        }
        x
    }

    fn backward(&mut self, mut dout: Tensor) -> Tensor {
        let n = dout.batch();
        let (c, hw) = (self.c, self.hw);
        let count = (n * hw) as f64;
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy += dout.data[i];
                    sum_dy_xhat += dout.data[i] * self.xhat[i];
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let g = self.gamma.value[ch];
            let scale = g * self.inv_std[ch] / count;
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    dout.data[i] = scale * (count * dout.data[i] - sum_dy - self.xhat[i] * sum_dy_xhat);
                }
            }
        }
        dout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dropout {
    rate: f64,
    mask: Vec<f64>,
}

impl Dropout {
    fn forward(&mut self, mut x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor {
        self.mask.clear();
        if mode != Mode::Train || self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        self.mask.extend((0..x.data.len()).map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 }));
        for (v, m) in x.data.iter_mut().zip(&self.mask) {
            *v *= m;
        }
        x
    }

    fn backward(&mut self, mut dout: Tensor) -> Tensor {
        if !self.mask.is_empty() {
            for (g, m) in dout.data.iter_mut().zip(&self.mask) {
                *g *= m;
            }
        }
        dout
    }
}

/// Flatten followed by a fully connected layer producing logits.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    in_features: usize,
    units: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    fn new(input: Shape3, units: usize, rng: &mut ChaCha8Rng) -> Self {
        let in_features = input.size();
        let limit = (3.0 / in_features as f64).sqrt();
        Self {
            in_features,
            units,
            weight: Param::uniform(units * in_features, limit, rng),
            bias: Param::filled(units, 0.0),
            input: None,
        }
    }

    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let n = x.batch();
        let d = self.in_features;
        debug_assert_eq!(x.sample_len(), d);
        let mut out = Tensor::zeros(vec![n, self.units]);
        for row in out.data.chunks_mut(self.units) {
            row.copy_from_slice(&self.bias.value);
        }
        // logits = x · Wᵀ + b
        gemm(n, d, self.units, &x.data, (d, 1), &self.weight.value, (1, d), 1.0, &mut out.data, (self.units, 1));
        if mode.is_train() {
            self.input = Some(x);
        }
        out
    }

    fn backward(&mut self, dlogits: Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.input.take().expect("dense backward without forward");
        let n = x.batch();
        let (d, k) = (self.in_features, self.units);
        for row in dlogits.data.chunks(k) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        // dW += dlogitsᵀ · x
        gemm(k, n, d, &dlogits.data, (1, k), &x.data, (d, 1), 1.0, &mut self.weight.grad, (d, 1));
        need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape.clone());
            gemm(n, k, d, &dlogits.data, (k, 1), &self.weight.value, (d, 1), 0.0, &mut dx.data, (d, 1));
            dx
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(Conv),
    Pool(Pool),
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    Dense(Dense),
}

impl Layer {
    /// Builds a freshly initialised layer for `spec` applied to `input`.
    pub fn build(spec: &LayerSpec, input: Shape3, rng: &mut ChaCha8Rng) -> Self {
        match *spec {
            LayerSpec::Conv { filters, kernel } => Layer::Conv(Conv::new(input, filters, kernel, rng)),
            LayerSpec::MaxPool => Layer::Pool(Pool::new(input, true)),
            LayerSpec::AvgPool => Layer::Pool(Pool::new(input, false)),
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(input)),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout { rate, mask: Vec::new() }),
            LayerSpec::DenseOutput { units } => Layer::Dense(Dense::new(input, units, rng)),
        }
    }

    pub fn forward(&mut self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::Pool(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode, rng),
            Layer::Dense(l) => l.forward(x, mode),
        }
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_dx` (the first layer never needs one).
    pub fn backward(&mut self, dout: Tensor, need_dx: bool) -> Option<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(dout, need_dx),
            Layer::Pool(l) => Some(l.backward(dout)),
            Layer::BatchNorm(l) => Some(l.backward(dout)),
            Layer::Dropout(l) => Some(l.backward(dout)),
            Layer::Dense(l) => l.backward(dout, need_dx),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Pool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Pool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }
}
