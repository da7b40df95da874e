//! Single-shot anchor detector: a small strided convolution stack over a
//! half-resolution tile, predicting per-cell objectness and box offsets for a
//! few square anchors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::image::RgbImage;
use crate::nn::{avg_pool2, relu, relu_backward, Adam, Conv2d, Module, Param, StepDownSchedule, Tensor};
use crate::tiling::{iou, nms, BoundingBox};

/// `(in, out, stride)` per 3×3 convolution.
const LAYERS: [(usize, usize, usize); 5] = [(3, 16, 2), (16, 32, 2), (32, 48, 2), (48, 48, 1), (48, 48, 1)];
/// Output stride in tile pixels: 2× input pooling then three stride-2 layers.
pub const CELL: usize = 16;
const VALUES_PER_ANCHOR: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Anchor side lengths in tile pixels.
    pub anchors: Vec<f64>,
    pub regression_weight: f32,
    pub seed: u64,
}

impl Default for NeuralTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 2e-3, batch_size: 4, anchors: vec![20.0, 48.0], regression_weight: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct NeuralNet {
    pub input_size: usize,
    pub anchors: Vec<f64>,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Module for NeuralNet {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }
}

/// A training tile with boxes in tile coordinates. `ignore` regions contribute
/// no objectness loss (e.g. lesions cut by the tile border).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledTile {
    pub pixels: RgbImage,
    pub boxes: Vec<BoundingBox>,
    pub ignore: Vec<BoundingBox>,
}

struct Target {
    obj: Vec<f32>,
    /// 1 = counted, 0 = ignored.
    obj_weight: Vec<f32>,
    reg: Vec<Option<[f32; 4]>>,
}

impl NeuralNet {
    pub fn new(input_size: usize, anchors: Vec<f64>, seed: u64) -> Result<Self> {
        if input_size == 0 || input_size % CELL != 0 {
            return Err(UdError::Config(format!("neural detector input size must be a multiple of {CELL}")));
        }
        if anchors.is_empty() || anchors.iter().any(|a| !(*a > 0.0)) {
            return Err(UdError::Config("neural detector needs positive anchor sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| Conv2d::new(&format!("det{i}"), cin, cout, 3, s, 1, &mut rng))
            .collect();
        let mut head = Conv2d::new("det_head", LAYERS[4].1, anchors.len() * VALUES_PER_ANCHOR, 1, 1, 0, &mut rng);
        head.weight.value.iter_mut().for_each(|v| *v *= 0.1);
        for a in 0..anchors.len() {
            // objectness prior of about 1%
            head.bias.value[a * VALUES_PER_ANCHOR] = -4.6;
        }
        Ok(Self { input_size, anchors, convs, head })
    }

    fn grid(&self) -> usize {
        self.input_size / CELL
    }

    fn prepare(&self, tiles: &[&RgbImage]) -> Tensor {
        let t: Vec<Tensor> = tiles.iter().map(|p| p.to_tensor()).collect();
        avg_pool2(&Tensor::stack(&t.iter().collect::<Vec<_>>()))
    }

    fn forward_train(&self, x: &Tensor) -> (Vec<Tensor>, Tensor) {
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let a = relu(&c.forward(acts.last().unwrap_or(x)));
            acts.push(a);
        }
        let out = self.head.forward(acts.last().expect("layers"));
        (acts, out)
    }

    fn backward(&mut self, x: &Tensor, acts: &[Tensor], dout: &Tensor) {
        let mut g = self.head.backward(acts.last().expect("layers"), dout);
        for i in (0..self.convs.len()).rev() {
            g = relu_backward(&acts[i], &g);
            let input = if i == 0 { x } else { &acts[i - 1] };
            g = self.convs[i].backward(input, &g);
        }
    }

    fn target(&self, tile: &LabelledTile) -> Target {
        let g = self.grid();
        let na = self.anchors.len();
        let cells = g * g * na;
        let mut t = Target { obj: vec![0.0; cells], obj_weight: vec![1.0; cells], reg: vec![None; cells] };
        let slot = |gy: usize, gx: usize, a: usize| (a * g + gy) * g + gx;
        // cells centered inside any lesion are ambiguous; only the assigned
        // center cell is trained as positive
        for b in tile.boxes.iter().chain(&tile.ignore) {
            for gy in 0..g {
                for gx in 0..g {
                    let (cx, cy) = ((gx as f64 + 0.5) * CELL as f64, (gy as f64 + 0.5) * CELL as f64);
                    if cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max {
                        for a in 0..na {
                            t.obj_weight[slot(gy, gx, a)] = 0.0;
                        }
                    }
                }
            }
        }
        for b in &tile.boxes {
            let (cx, cy) = b.center();
            let gx = ((cx / CELL as f64) as usize).min(g - 1);
            let gy = ((cy / CELL as f64) as usize).min(g - 1);
            let size = (b.width() * b.height()).sqrt();
            let a = (0..na)
                .min_by(|&i, &j| {
                    let di = (size / self.anchors[i]).ln().abs();
                    let dj = (size / self.anchors[j]).ln().abs();
                    di.total_cmp(&dj)
                })
                .expect("anchors");
            let s = slot(gy, gx, a);
            let anchor = self.anchors[a];
            t.obj[s] = 1.0;
            t.obj_weight[s] = 1.0;
            t.reg[s] = Some([
                ((cx - (gx as f64 + 0.5) * CELL as f64) / anchor) as f32,
                ((cy - (gy as f64 + 0.5) * CELL as f64) / anchor) as f32,
                (b.width() / anchor).ln() as f32,
                (b.height() / anchor).ln() as f32,
            ]);
        }
        t
    }

    /// Boxes with objectness ≥ `threshold`, tile coordinates, after per-tile NMS.
    pub fn predict(&self, tile: &RgbImage, threshold: f64, nms_iou: f64) -> Vec<BoundingBox> {
        let x = self.prepare(&[tile]);
        let (_, out) = self.forward_train(&x);
        let g = self.grid();
        let plane = g * g;
        let size = tile.width as f64;
        let mut boxes = Vec::new();
        for (a, &anchor) in self.anchors.iter().enumerate() {
            let base = a * VALUES_PER_ANCHOR * plane;
            for cell in 0..plane {
                let p = 1.0 / (1.0 + (-out.data[base + cell] as f64).exp());
                if p < threshold {
                    continue;
                }
                let v = |k: usize| out.data[base + k * plane + cell] as f64;
                let (gx, gy) = ((cell % g) as f64, (cell / g) as f64);
                let cx = (gx + 0.5) * CELL as f64 + v(1) * anchor;
                let cy = (gy + 0.5) * CELL as f64 + v(2) * anchor;
                let w = anchor * v(3).clamp(-4.0, 4.0).exp();
                let h = anchor * v(4).clamp(-4.0, 4.0).exp();
                let b = BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, p).clipped(size, size);
                if b.is_valid() {
                    boxes.push(b);
                }
            }
        }
        nms(&boxes, nms_iou)
    }
}

fn smooth_l1_grad(d: f32) -> (f32, f32) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Train on labelled tiles. Returns the net and per-epoch mean loss.
pub fn train(tiles: &[LabelledTile], input_size: usize, cfg: &NeuralTrainConfig) -> Result<(NeuralNet, Vec<f64>)> {
    if tiles.is_empty() {
        return Err(UdError::InvalidInput("neural detector training set is empty".into()));
    }
    if tiles.iter().all(|t| t.boxes.is_empty()) {
        return Err(UdError::InvalidInput("neural detector training set has no positive boxes".into()));
    }
    if let Some(t) = tiles.iter().find(|t| t.pixels.width != input_size || t.pixels.height != input_size) {
        return Err(UdError::InvalidInput(format!(
            "training tile is {}×{}, detector expects {input_size}×{input_size}",
            t.pixels.width, t.pixels.height
        )));
    }
    if cfg.batch_size == 0 {
        return Err(UdError::Config("detector batch_size must be positive".into()));
    }
    let mut net = NeuralNet::new(input_size, cfg.anchors.clone(), cfg.seed)?;
    let targets: Vec<Target> = tiles.iter().map(|t| net.target(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xde7ec7);
    let mut adam = Adam::new(cfg.learning_rate);
    let schedule = StepDownSchedule { base_lr: cfg.learning_rate, ..StepDownSchedule::default() };
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let plane = net.grid() * net.grid();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = schedule.lr_at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = net.prepare(&chunk.iter().map(|&i| &tiles[i].pixels).collect::<Vec<_>>());
            net.zero_grad();
            let (acts, out) = net.forward_train(&x);
            let mut dout = Tensor::zeros(out.n, out.c, out.h, out.w);
            let positives: usize =
                chunk.iter().map(|&i| targets[i].reg.iter().filter(|r| r.is_some()).count()).sum();
            let norm = positives.max(1) as f32;
            let mut loss = 0.0f64;
            for (s, &i) in chunk.iter().enumerate() {
                let t = &targets[i];
                let o = out.sample(s);
                let d = dout.sample_mut(s);
                for a in 0..net.anchors.len() {
                    let base = a * VALUES_PER_ANCHOR * plane;
                    for cell in 0..plane {
                        let ti = a * plane + cell;
                        let w = t.obj_weight[ti];
                        if w > 0.0 {
                            let z = o[base + cell];
                            let p = 1.0 / (1.0 + (-z).exp());
                            let y = t.obj[ti];
                            // numerically stable BCE with logits
                            loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) as f64 / norm as f64;
                            d[base + cell] = w * (p - y) / norm;
                        }
                        if let Some(r) = t.reg[ti] {
                            for k in 0..4 {
                                let idx = base + (k + 1) * plane + cell;
                                let (l, gr) = smooth_l1_grad(o[idx] - r[k]);
                                loss += (cfg.regression_weight * l / norm) as f64;
                                d[idx] = cfg.regression_weight * gr / norm;
                            }
                        }
                    }
                }
            }
            net.backward(&x, &acts, &dout);
            adam.step(net.params_mut());
            epoch_loss += loss;
        }
        history.push(epoch_loss / order.chunks(cfg.batch_size).len() as f64);
    }
    Ok((net, history))
}

/// Fraction of ground-truth boxes matched one-to-one at `iou ≥ min_iou`,
/// greedily in descending prediction confidence.
pub fn recall(predictions: &[Vec<BoundingBox>], truths: &[Vec<BoundingBox>], min_iou: f64) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (pred, truth) in predictions.iter().zip(truths) {
        total += truth.len();
        let mut used = vec![false; truth.len()];
        let mut sorted = pred.clone();
        sorted.sort_by(BoundingBox::nms_order);
        for p in &sorted {
            let best = truth
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, t)| (j, iou(p, t)))
                .filter(|(_, v)| *v >= min_iou)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = best {
                used[j] = true;
                hit += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}
