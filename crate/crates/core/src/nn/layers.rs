//! Stateless layers with explicit backward passes.
//!
//! Layers own only their parameters. Callers keep the forward activations they
//! need and hand them back to `backward`, which accumulates parameter gradients
//! and returns the gradient with respect to the layer input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{col2im, gemm, im2col, Window};
use super::tensor::Tensor;

/// A learnable parameter with its gradient and Adam moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Vec<f32>) -> Self {
        let n = value.len();
        Self { name: name.into(), value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn uniform(name: impl Into<String>, len: usize, bound: f32, rng: &mut impl Rng) -> Self {
        Self::new(name, (0..len).map(|_| rng.random_range(-bound..bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.ensure_state();
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Restore gradient and moment buffers after deserialization.
    pub fn ensure_state(&mut self) {
        let n = self.value.len();
        for buf in [&mut self.grad, &mut self.m, &mut self.v] {
            if buf.len() != n {
                *buf = vec![0.0; n];
            }
        }
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in.max(1) as f32).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub win: WindowSpec,
    /// `out_ch × (in_ch·k·k)`
    pub weight: Param,
    pub bias: Param,
}

/// Serializable mirror of [`Window`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl From<WindowSpec> for Window {
    fn from(w: WindowSpec) -> Self {
        Window { kernel: w.kernel, stride: w.stride, pad: w.pad }
    }
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            win: WindowSpec { kernel, stride, pad },
            weight: Param::uniform(format!("{name}.weight"), out_ch * fan_in, he_bound(fan_in), rng),
            bias: Param::new(format!("{name}.bias"), vec![0.0; out_ch]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "conv input channel mismatch");
        let win: Window = self.win.into();
        let (ho, wo) = (win.out_len(x.h), win.out_len(x.w));
        let kk = self.in_ch * win.kernel * win.kernel;
        let mut out = Tensor::zeros(x.n, self.out_ch, ho, wo);
        let mut col = Vec::new();
        for i in 0..x.n {
            im2col(x.sample(i), x.c, x.h, x.w, win, &mut col);
            let y = out.sample_mut(i);
            for (oc, chunk) in y.chunks_mut(ho * wo).enumerate() {
                chunk.fill(self.bias.value[oc]);
            }
            gemm(self.out_ch, kk, ho * wo, &self.weight.value, false, &col, false, 1.0, y);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let win: Window = self.win.into();
        let hw = dy.h * dy.w;
        let kk = self.in_ch * win.kernel * win.kernel;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut col = Vec::new();
        let mut dcol = vec![0.0; kk * hw];
        for i in 0..x.n {
            im2col(x.sample(i), x.c, x.h, x.w, win, &mut col);
            let g = dy.sample(i);
            gemm(self.out_ch, hw, kk, g, false, &col, true, 1.0, &mut self.weight.grad);
            for (oc, chunk) in g.chunks(hw).enumerate() {
                self.bias.grad[oc] += chunk.iter().sum::<f32>();
            }
            gemm(kk, self.out_ch, hw, &self.weight.value, true, g, false, 0.0, &mut dcol);
            col2im(&dcol, x.c, x.h, x.w, win, dx.sample_mut(i));
        }
        dx
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution, the adjoint of [`Conv2d`] in its spatial action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub win: WindowSpec,
    /// `in_ch × (out_ch·k·k)`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        Self {
            in_ch,
            out_ch,
            win: WindowSpec { kernel, stride, pad },
            weight: Param::uniform(
                format!("{name}.weight"),
                in_ch * out_ch * kernel * kernel,
                he_bound(fan_in),
                rng,
            ),
            bias: Param::new(format!("{name}.bias"), vec![0.0; out_ch]),
        }
    }

    pub fn out_len(&self, input: usize) -> usize {
        (input - 1) * self.win.stride + self.win.kernel - 2 * self.win.pad
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_ch, "transposed conv input channel mismatch");
        let win: Window = self.win.into();
        let (ho, wo) = (self.out_len(x.h), self.out_len(x.w));
        let hw_in = x.h * x.w;
        let kk = self.out_ch * win.kernel * win.kernel;
        let mut out = Tensor::zeros(x.n, self.out_ch, ho, wo);
        let mut col = vec![0.0; kk * hw_in];
        for i in 0..x.n {
            gemm(kk, self.in_ch, hw_in, &self.weight.value, true, x.sample(i), false, 0.0, &mut col);
            let y = out.sample_mut(i);
            for (oc, chunk) in y.chunks_mut(ho * wo).enumerate() {
                chunk.fill(self.bias.value[oc]);
            }
            col2im(&col, self.out_ch, ho, wo, win, y);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let win: Window = self.win.into();
        let hw_in = x.h * x.w;
        let kk = self.out_ch * win.kernel * win.kernel;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut dcol = Vec::new();
        for i in 0..x.n {
            let g = dy.sample(i);
            for (oc, chunk) in g.chunks(dy.h * dy.w).enumerate() {
                self.bias.grad[oc] += chunk.iter().sum::<f32>();
            }
            im2col(g, self.out_ch, dy.h, dy.w, win, &mut dcol);
            gemm(self.in_ch, hw_in, kk, x.sample(i), false, &dcol, true, 1.0, &mut self.weight.grad);
            gemm(self.in_ch, kk, hw_in, &self.weight.value, false, &dcol, false, 0.0, dx.sample_mut(i));
        }
        dx
    }
}

impl Module for ConvTranspose2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer over the flattened sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::uniform(format!("{name}.weight"), inputs * outputs, he_bound(inputs), rng),
            bias: Param::new(format!("{name}.bias"), vec![0.0; outputs]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.inputs, "linear input size mismatch");
        let mut out = Tensor::zeros(x.n, self.outputs, 1, 1);
        for row in out.data.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(x.n, self.inputs, self.outputs, &x.data, false, &self.weight.value, true, 1.0, &mut out.data);
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        gemm(self.outputs, x.n, self.inputs, &dy.data, true, &x.data, false, 1.0, &mut self.weight.grad);
        for row in dy.data.chunks(self.outputs) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm(x.n, self.outputs, self.inputs, &dy.data, false, &self.weight.value, false, 0.0, &mut dx.data);
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its forward *output* (or input; the sign agrees).
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &s) in dx.data.iter_mut().zip(&y.data) {
        *d *= s * (1.0 - s);
    }
    dx
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> Tensor {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut out.data[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * x.w + 2 * ox;
                dst[oy * wo + ox] =
                    src[base].max(src[base + 1]).max(src[base + x.w]).max(src[base + x.w + 1]);
            }
        }
    }
    out
}

pub fn max_pool2_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    let (ho, wo) = (dy.h, dy.w);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let g = &dy.data[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * x.w + 2 * ox;
                let cands = [base, base + 1, base + x.w, base + x.w + 1];
                // first maximum wins, matching the forward scan order
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if src[c] > src[best] {
                        best = c;
                    }
                }
                dst[best] += g[oy * wo + ox];
            }
        }
    }
    dx
}

/// 2×2 average pooling; used for fixed input downsampling, no backward needed.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut out.data[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * x.w + 2 * ox;
                dst[oy * wo + ox] = 0.25 * (src[base] + src[base + 1] + src[base + x.w] + src[base + x.w + 1]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Scalar objective L = sum(y * probe), so dL/dy = probe.
    fn check_layer_grads<F, B>(x: &Tensor, probe: &Tensor, mut forward: F, mut backward: B, wrt_input: bool)
    where
        F: FnMut(&Tensor) -> Tensor,
        B: FnMut(&Tensor, &Tensor) -> Tensor,
    {
        let dx = backward(x, probe);
        let objective = |f: &mut F, t: &Tensor| -> f64 {
            f(t).data.iter().zip(&probe.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        if wrt_input {
            for idx in [0, x.len() / 3, x.len() / 2, x.len() - 1] {
                let eps = 1e-2;
                let mut xp = x.clone();
                xp.data[idx] += eps;
                let mut xm = x.clone();
                xm.data[idx] -= eps;
                let fd = (objective(&mut forward, &xp) - objective(&mut forward, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data[idx] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "input grad {idx}: fd {fd} vs {}", dx.data[idx]);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = random_tensor(&mut rng, 2, 2, 6, 5);
        let y = conv.forward(&x);
        let probe = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        conv.zero_grad();
        let frozen = conv.clone();
        check_layer_grads(&x, &probe, |t| frozen.forward(t), |t, g| conv.backward(t, g), true);
        // weight gradient at a few entries
        for idx in [0, 7, 20, conv.weight.len() - 1] {
            let eps = 1e-2;
            let mut cp = frozen.clone();
            cp.weight.value[idx] += eps;
            let mut cm = frozen.clone();
            cm.weight.value[idx] -= eps;
            let f = |c: &Conv2d| -> f32 { c.forward(&x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
            let fd = (f(&cp) - f(&cm)) / (2.0 * eps);
            assert!((fd - conv.weight.grad[idx]).abs() < 2e-2 * (1.0 + fd.abs()));
        }
        let bias_fd: f32 = probe.data.chunks(y.h * y.w).enumerate().filter(|(i, _)| i % 3 == 1).map(|(_, c)| c.iter().sum::<f32>()).sum();
        assert!((bias_fd - conv.bias.grad[1]).abs() < 1e-3);
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut deconv = ConvTranspose2d::new("d", 3, 2, 4, 2, 1, &mut rng);
        let x = random_tensor(&mut rng, 2, 3, 3, 4);
        let y = deconv.forward(&x);
        assert_eq!((y.h, y.w), (6, 8));
        let probe = random_tensor(&mut rng, y.n, y.c, y.h, y.w);
        deconv.zero_grad();
        let frozen = deconv.clone();
        check_layer_grads(&x, &probe, |t| frozen.forward(t), |t, g| deconv.backward(t, g), true);
        for idx in [0, 11, deconv.weight.len() - 1] {
            let eps = 1e-2;
            let mut cp = frozen.clone();
            cp.weight.value[idx] += eps;
            let mut cm = frozen.clone();
            cm.weight.value[idx] -= eps;
            let f = |c: &ConvTranspose2d| -> f32 { c.forward(&x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
            let fd = (f(&cp) - f(&cm)) / (2.0 * eps);
            assert!((fd - deconv.weight.grad[idx]).abs() < 2e-2 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fc = Linear::new("fc", 6, 4, &mut rng);
        let x = random_tensor(&mut rng, 3, 6, 1, 1);
        let probe = random_tensor(&mut rng, 3, 4, 1, 1);
        fc.zero_grad();
        let frozen = fc.clone();
        check_layer_grads(&x, &probe, |t| frozen.forward(t), |t, g| fc.backward(t, g), true);
        let eps = 1e-2;
        let mut cp = frozen.clone();
        cp.weight.value[5] += eps;
        let mut cm = frozen.clone();
        cm.weight.value[5] -= eps;
        let f = |c: &Linear| -> f32 { c.forward(&x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
        assert!(((f(&cp) - f(&cm)) / (2.0 * eps) - fc.weight.grad[5]).abs() < 1e-2);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]);
        let y = max_pool2(&x);
        assert_eq!(y.data, vec![0.9]);
        let dx = max_pool2_backward(&x, &Tensor::from_vec(1, 1, 1, 1, vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn module_counts_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 3, 16, 3, 1, 1, &mut rng);
        assert_eq!(conv.param_count(), 3 * 16 * 9 + 16);
    }
}
