//! Four-level U-Net without normalization layers: 3×3 double convolutions,
//! 2×2 max-pool downsampling, 2×2 stride-2 transposed-convolution upsampling
//! with channel-concatenated skips, and a 1×1 two-class head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    max_pool2, max_pool2_backward, relu, relu_backward, Conv2d, ConvTranspose2d, Module, Param, Tensor,
};

pub const UNET_DEPTH: usize = 4;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

struct DoubleConvCache {
    input: Tensor,
    mid: Tensor,
    out: Tensor,
}

impl DoubleConv {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Conv2d::new(&format!("{name}.0"), cin, cout, 3, 1, 1, rng),
            second: Conv2d::new(&format!("{name}.1"), cout, cout, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        relu(&self.second.forward(&relu(&self.first.forward(x))))
    }

    fn forward_train(&self, x: Tensor) -> DoubleConvCache {
        let mid = relu(&self.first.forward(&x));
        let out = relu(&self.second.forward(&mid));
        DoubleConvCache { input: x, mid, out }
    }

    fn backward(&mut self, cache: &DoubleConvCache, dy: &Tensor) -> Tensor {
        let g = relu_backward(&cache.out, dy);
        let g = self.second.backward(&cache.mid, &g);
        let g = relu_backward(&cache.mid, &g);
        self.first.backward(&cache.input, &g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UpBlock {
    up: ConvTranspose2d,
    conv: DoubleConv,
}

/// Compact U-Net producing per-pixel two-class logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompactUNet {
    pub in_channels: usize,
    pub base_channels: usize,
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<UpBlock>,
    head: Conv2d,
}

/// Activations retained for the backward pass.
pub struct UNetCache {
    levels: Vec<DoubleConvCache>,
    up_inputs: Vec<Tensor>,
    up_convs: Vec<DoubleConvCache>,
    head_input: Tensor,
}

impl CompactUNet {
    pub fn new(in_channels: usize, base_channels: usize, rng: &mut impl Rng) -> Self {
        let b = base_channels;
        let inc = DoubleConv::new("inc", in_channels, b, rng);
        let downs = (1..=UNET_DEPTH)
            .map(|l| DoubleConv::new(&format!("down{l}"), b << (l - 1), b << l, rng))
            .collect();
        let ups = (1..=UNET_DEPTH)
            .rev()
            .map(|l| UpBlock {
                up: ConvTranspose2d::new(&format!("up{l}.t"), b << l, b << (l - 1), 2, 2, 0, rng),
                conv: DoubleConv::new(&format!("up{l}.c"), b << l, b << (l - 1), rng),
            })
            .collect();
        let head = Conv2d::new("head", b, NUM_CLASSES, 1, 1, 0, rng);
        Self { in_channels, base_channels, inc, downs, ups, head }
    }

    /// Per-pixel logits, `n × 2 × h × w`. Spatial size must be divisible by 16.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut skips = vec![self.inc.forward(x)];
        for d in &self.downs {
            let pooled = max_pool2(skips.last().expect("non-empty"));
            skips.push(d.forward(&pooled));
        }
        let mut u = skips.pop().expect("bottleneck");
        for block in &self.ups {
            let skip = skips.pop().expect("matching skip");
            let t = block.up.forward(&u);
            u = block.conv.forward(&Tensor::concat_channels(&skip, &t));
        }
        self.head.forward(&u)
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, UNetCache) {
        let mut levels = vec![self.inc.forward_train(x.clone())];
        for d in &self.downs {
            let pooled = max_pool2(&levels.last().expect("non-empty").out);
            levels.push(d.forward_train(pooled));
        }
        let mut u = levels.last().expect("bottleneck").out.clone();
        let mut up_inputs = Vec::with_capacity(UNET_DEPTH);
        let mut up_convs = Vec::with_capacity(UNET_DEPTH);
        for (i, block) in self.ups.iter().enumerate() {
            let skip = &levels[UNET_DEPTH - 1 - i].out;
            let t = block.up.forward(&u);
            up_inputs.push(u);
            let cache = block.conv.forward_train(Tensor::concat_channels(skip, &t));
            u = cache.out.clone();
            up_convs.push(cache);
        }
        let logits = self.head.forward(&u);
        (logits, UNetCache { levels, up_inputs, up_convs, head_input: u })
    }

    /// Accumulates parameter gradients for `dlogits`.
    pub fn backward(&mut self, cache: &UNetCache, dlogits: &Tensor) {
        let mut g = self.head.backward(&cache.head_input, dlogits);
        // gradient flowing into each encoder level's output through its skip
        let mut skip_grads: Vec<Option<Tensor>> = (0..=UNET_DEPTH).map(|_| None).collect();
        for i in (0..UNET_DEPTH).rev() {
            let block = &mut self.ups[i];
            let gc = block.conv.backward(&cache.up_convs[i], &g);
            let skip_level = UNET_DEPTH - 1 - i;
            let (gskip, gt) = gc.split_channels(cache.levels[skip_level].out.c);
            skip_grads[skip_level] = Some(gskip);
            g = block.up.backward(&cache.up_inputs[i], &gt);
        }
        // g is now the gradient at the bottleneck output
        for level in (0..=UNET_DEPTH).rev() {
            if let Some(s) = skip_grads[level].take() {
                g.add_assign(&s);
            }
            let module = if level == 0 { &mut self.inc } else { &mut self.downs[level - 1] };
            let gin = module.backward(&cache.levels[level], &g);
            if level > 0 {
                g = max_pool2_backward(&cache.levels[level - 1].out, &gin);
            }
        }
    }

    /// Stable description of the layer stack, for equality checks across builds.
    pub fn signature(&self) -> String {
        self.params()
            .iter()
            .map(|p| format!("{}:{}", p.name, p.len()))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn has_normalization_layers(&self) -> bool {
        self.params().iter().any(|p| p.name.contains("norm") || p.name.contains("bn"))
    }
}

impl Module for CompactUNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.inc.params();
        for d in &self.downs {
            v.extend(d.params());
        }
        for u in &self.ups {
            v.extend(u.up.params());
            v.extend(u.conv.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.inc.params_mut();
        for d in &mut self.downs {
            v.extend(d.params_mut());
        }
        for u in &mut self.ups {
            v.extend(u.up.params_mut());
            v.extend(u.conv.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_matches_input_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = CompactUNet::new(3, 4, &mut rng);
        let x = Tensor::zeros(2, 3, 32, 32);
        let y = net.forward(&x);
        assert_eq!(y.shape(), [2, NUM_CLASSES, 32, 32]);
        let (yt, _) = net.forward_train(&x);
        assert_eq!(yt, y);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = CompactUNet::new(3, 2, &mut rng);
        let x = Tensor::from_vec(1, 3, 32, 32, (0..3072).map(|_| rng.random_range(0.0..1.0)).collect());
        let probe_data: Vec<f32> = (0..2 * 1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = Tensor::from_vec(1, 2, 32, 32, probe_data);
        let objective = |n: &CompactUNet| -> f64 {
            n.forward(&x).data.iter().zip(&probe.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        net.zero_grad();
        let frozen = net.clone();
        let (_, cache) = net.forward_train(&x);
        net.backward(&cache, &probe);
        // one entry per representative layer, including the deepest encoder path
        let grads: Vec<(String, f32)> = net.params().iter().map(|p| (p.name.clone(), p.grad[0])).collect();
        for target in ["inc.0.weight", "down3.1.bias", "up1.t.weight", "head.weight"] {
            // f32 objective noise and ReLU kinks make any single step size unreliable;
            // average the central difference over several
            let steps = [1e-2f32, 3e-3, 1e-3, 3e-4, 1e-4];
            let bump = |delta: f32| {
                let mut n = frozen.clone();
                n.params_mut().into_iter().find(|p| p.name == target).unwrap().value[0] += delta;
                objective(&n)
            };
            let fd = steps.iter().map(|&e| (bump(e) - bump(-e)) / (2.0 * e as f64)).sum::<f64>() / steps.len() as f64;
            let an = grads.iter().find(|(n, _)| n == target).unwrap().1 as f64;
            assert!((fd - an).abs() < 0.1 * (1.0 + fd.abs()), "{target}: fd {fd} vs analytic {an}");
        }
    }
}
