//! Convolutional β-VAE over 64×64 RGB lesion crops.
//!
//! Three training modes: self-training from scratch on one patient's lesions,
//! pretraining a base model on lesions pooled across patients, and fine-tuning
//! that base on one patient. Inference is deterministic: embeddings are the
//! encoder mean and reconstructions decode from the mean.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CHECKPOINT_FORMAT_VERSION};
use crate::error::{Result, UdError};
use crate::image::RgbImage;
use crate::nn::{relu, relu_backward, sigmoid, Adam, Conv2d, ConvTranspose2d, Linear, Module, Param, Tensor};
use crate::synthgen::LesionId;

pub const INPUT_SIZE: usize = 64;
pub const DEFAULT_LATENT_DIM: usize = 32;
pub const DEFAULT_BETA: f32 = 4.0;
pub const SCRATCH_EPOCHS: usize = 130;
pub const FINETUNE_EPOCHS: usize = 10;
const CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];
const HIDDEN: usize = 128;
/// Spatial side after four stride-2 convolutions.
const BOTTOM: usize = INPUT_SIZE >> 4;
const FLAT: usize = 64 * BOTTOM * BOTTOM;
const CHECKPOINT_KIND: &str = "vae";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeTag {
    Scratch,
    Base,
    Finetuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    #[default]
    Mse,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub beta: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub scratch_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_epochs: usize,
    pub recon_loss: ReconLoss,
    pub base_checkpoint: Option<String>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            beta: DEFAULT_BETA,
            learning_rate: 1e-3,
            batch_size: 8,
            scratch_epochs: SCRATCH_EPOCHS,
            finetune_epochs: FINETUNE_EPOCHS,
            pretrain_epochs: 30,
            recon_loss: ReconLoss::Mse,
            base_checkpoint: None,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(UdError::Config(format!("vae.latent_dim must be at least 2, got {}", self.latent_dim)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(UdError::Config(format!("vae.beta must be finite and non-negative, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(UdError::Config("vae.learning_rate and vae.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub lesion_id: LesionId,
    pub mu: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

/// Reconstruction MSE over all elements, KL as the batch mean of per-sample
/// sums over latent dimensions, and `total = reconstruction + beta * kl`.
pub fn vae_loss(input: &Tensor, recon: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f64) -> Result<VaeLossBreakdown> {
    if input.shape() != recon.shape() || mu.shape() != logvar.shape() || mu.n != input.n {
        return Err(UdError::InvalidInput("vae_loss: inconsistent shapes".into()));
    }
    for (t, name) in [(input, "input"), (recon, "reconstruction"), (mu, "mu"), (logvar, "log_var")] {
        if !t.all_finite() {
            return Err(UdError::NonFinite(name));
        }
    }
    let sq: f64 = input.data.iter().zip(&recon.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let reconstruction = sq / input.len().max(1) as f64;
    let kl = kl_divergence(&mu.data, &logvar.data) / mu.n.max(1) as f64;
    Ok(VaeLossBreakdown { reconstruction, kl, total: reconstruction + beta * kl })
}

/// `−½ Σ (1 + lv − mu² − exp(lv))` summed over every entry.
pub fn kl_divergence(mu: &[f32], logvar: &[f32]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            -0.5 * (1.0 + lv - m * m - lv.exp())
        })
        .sum()
}

/// Analytic gradient of `vae_loss(..).total` with respect to `mu` and `log_var`.
pub fn vae_loss_latent_grad(mu: &Tensor, logvar: &Tensor, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let scale = beta / mu.n.max(1) as f64;
    let dmu = mu.data.iter().map(|&m| scale * m as f64).collect();
    let dlv = logvar.data.iter().map(|&lv| scale * 0.5 * ((lv as f64).exp() - 1.0)).collect();
    (dmu, dlv)
}

/// Analytic gradient of `vae_loss(..).total` with respect to the reconstruction.
pub fn vae_loss_recon_grad(input: &Tensor, recon: &Tensor) -> Vec<f64> {
    let n = input.len().max(1) as f64;
    input.data.iter().zip(&recon.data).map(|(&x, &r)| 2.0 * (r as f64 - x as f64) / n).collect()
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub latent_dim: usize,
    pub beta: f32,
    pub mode_tag: ModeTag,
    pub epochs_trained: usize,
    enc: Vec<Conv2d>,
    enc_fc: Linear,
    fc_mu: Linear,
    fc_logvar: Linear,
    dec_fc1: Linear,
    dec_fc2: Linear,
    dec: Vec<ConvTranspose2d>,
}

struct Forward {
    enc: Vec<Tensor>,
    hidden: Tensor,
    mu: Tensor,
    logvar: Tensor,
    eps: Vec<f32>,
    z: Tensor,
    d1: Tensor,
    d2: Tensor,
    dec: Vec<Tensor>,
    out: Tensor,
}

pub fn build_vae(latent_dim: usize, beta: f32, seed: u64) -> Result<VaeModel> {
    VaeConfig { latent_dim, beta, ..VaeConfig::default() }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = (0..4)
        .map(|i| Conv2d::new(&format!("enc{i}"), CHANNELS[i], CHANNELS[i + 1], 4, 2, 1, &mut rng))
        .collect();
    let enc_fc = Linear::new("enc_fc", FLAT, HIDDEN, &mut rng);
    let fc_mu = Linear::new("fc_mu", HIDDEN, latent_dim, &mut rng);
    let fc_logvar = Linear::new("fc_logvar", HIDDEN, latent_dim, &mut rng);
    let dec_fc1 = Linear::new("dec_fc1", latent_dim, HIDDEN, &mut rng);
    let dec_fc2 = Linear::new("dec_fc2", HIDDEN, FLAT, &mut rng);
    let dec = (0..4)
        .rev()
        .map(|i| ConvTranspose2d::new(&format!("dec{i}"), CHANNELS[i + 1], CHANNELS[i], 4, 2, 1, &mut rng))
        .collect();
    let mut model = VaeModel {
        latent_dim,
        beta,
        mode_tag: ModeTag::Scratch,
        epochs_trained: 0,
        enc,
        enc_fc,
        fc_mu,
        fc_logvar,
        dec_fc1,
        dec_fc2,
        dec,
    };
    // start near the prior so early KL terms are small
    for p in [&mut model.fc_mu.weight, &mut model.fc_logvar.weight] {
        p.value.iter_mut().for_each(|v| *v *= 0.1);
    }
    // small latent fan-in: unused latent dims then inject little noise, so decoding mu stays in distribution
    model.dec_fc1.weight.value.iter_mut().for_each(|v| *v *= 0.1);
    Ok(model)
}

impl Module for VaeModel {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.enc.iter().flat_map(|l| l.params()).collect();
        for l in [&self.enc_fc, &self.fc_mu, &self.fc_logvar, &self.dec_fc1, &self.dec_fc2] {
            v.extend(l.params());
        }
        v.extend(self.dec.iter().flat_map(|l| l.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.enc.iter_mut().flat_map(|l| l.params_mut()).collect();
        for l in [&mut self.enc_fc, &mut self.fc_mu, &mut self.fc_logvar, &mut self.dec_fc1, &mut self.dec_fc2] {
            v.extend(l.params_mut());
        }
        v.extend(self.dec.iter_mut().flat_map(|l| l.params_mut()));
        v
    }
}

impl VaeModel {
    fn encode(&self, x: &Tensor) -> (Vec<Tensor>, Tensor, Tensor, Tensor) {
        let mut acts: Vec<Tensor> = Vec::with_capacity(4);
        for conv in &self.enc {
            let a = relu(&conv.forward(acts.last().unwrap_or(x)));
            acts.push(a);
        }
        let hidden = relu(&self.enc_fc.forward(acts.last().expect("four layers")));
        let mu = self.fc_mu.forward(&hidden);
        let logvar = self.fc_logvar.forward(&hidden);
        (acts, hidden, mu, logvar)
    }

    /// Returns `(d1, d2, deconv activations, pre-sigmoid output)`.
    fn decode(&self, z: &Tensor) -> (Tensor, Tensor, Vec<Tensor>, Tensor) {
        let d1 = relu(&self.dec_fc1.forward(z));
        let d2 = relu(&self.dec_fc2.forward(&d1)).reshaped(64, BOTTOM, BOTTOM);
        let mut acts: Vec<Tensor> = Vec::with_capacity(3);
        let last = self.dec.len() - 1;
        let mut logits = None;
        for (i, t) in self.dec.iter().enumerate() {
            let y = t.forward(acts.last().unwrap_or(&d2));
            if i == last {
                logits = Some(y);
            } else {
                acts.push(relu(&y));
            }
        }
        (d1, d2, acts, logits.expect("decoder layers"))
    }

    fn forward_train(&self, x: &Tensor, rng: &mut impl Rng) -> Forward {
        let (enc, hidden, mu, logvar) = self.encode(x);
        let eps: Vec<f32> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut z = mu.clone();
        for ((zi, lv), e) in z.data.iter_mut().zip(&logvar.data).zip(&eps) {
            *zi += (0.5 * lv.clamp(-20.0, 20.0)).exp() * e;
        }
        let (d1, d2, dec, logits) = self.decode(&z);
        let out = sigmoid(&logits);
        Forward { enc, hidden, mu, logvar, eps, z, d1, d2, dec, out }
    }

    /// Accumulate gradients of the per-sample objective
    /// `Σ_pixels recon + β·KL`, averaged over the batch.
    fn backward(&mut self, x: &Tensor, f: &Forward, recon: ReconLoss) {
        let n = x.n as f32;
        let mut g = f.out.clone();
        for ((gi, &y), &t) in g.data.iter_mut().zip(&f.out.data).zip(&x.data) {
            *gi = match recon {
                ReconLoss::Mse => 2.0 * (y - t) * y * (1.0 - y) / n,
                ReconLoss::Bce => (y - t) / n,
            };
        }
        let last = self.dec.len() - 1;
        for i in (0..=last).rev() {
            let input = if i == 0 { &f.d2 } else { &f.dec[i - 1] };
            g = self.dec[i].backward(input, &g);
            let a = if i == 0 { &f.d2 } else { &f.dec[i - 1] };
            g = relu_backward(a, &g);
        }
        let g = g.reshaped(FLAT, 1, 1);
        let g = self.dec_fc2.backward(&f.d1, &g);
        let g = relu_backward(&f.d1, &g);
        let dz = self.dec_fc1.backward(&f.z, &g);

        let beta = self.beta;
        let mut dmu = dz.clone();
        let mut dlv = dz;
        for i in 0..dmu.data.len() {
            let (m, lv) = (f.mu.data[i], f.logvar.data[i].clamp(-20.0, 20.0));
            let sigma = (0.5 * lv).exp();
            dmu.data[i] += beta * m / n;
            dlv.data[i] = dlv.data[i] * f.eps[i] * 0.5 * sigma + beta * 0.5 * (lv.exp() - 1.0) / n;
        }
        let mut g = self.fc_mu.backward(&f.hidden, &dmu);
        g.add_assign(&self.fc_logvar.backward(&f.hidden, &dlv));
        let g = relu_backward(&f.hidden, &g);
        let mut g = self.enc_fc.backward(&f.enc[3], &g);
        for i in (0..4).rev() {
            g = relu_backward(&f.enc[i], &g);
            let input = if i == 0 { x } else { &f.enc[i - 1] };
            g = self.enc[i].backward(input, &g);
        }
    }

    fn check_usable(&self) -> Result<()> {
        if self.mode_tag == ModeTag::Scratch && self.epochs_trained == 0 {
            return Err(UdError::Untrained("scratch-mode VAE has not been trained".into()));
        }
        Ok(())
    }

    /// Encoder means for a batch, one row per sample.
    pub fn encode_mu(&self, x: &Tensor) -> Vec<Vec<f32>> {
        let (_, _, mu, _) = self.encode(x);
        mu.data.chunks(self.latent_dim).map(<[f32]>::to_vec).collect()
    }

    /// Decoder output in [0,1] for the encoder mean.
    pub fn reconstruct(&self, x: &Tensor) -> Tensor {
        let (_, _, mu, _) = self.encode(x);
        let (_, _, _, logits) = self.decode(&mu);
        sigmoid(&logits)
    }

    fn sidecar(&self, fingerprint: Option<String>, seed: u64) -> VaeSidecar {
        VaeSidecar {
            latent_dim: self.latent_dim,
            beta: self.beta,
            mode_tag: self.mode_tag,
            training_corpus_fingerprint: fingerprint,
            epochs: self.epochs_trained,
            seed,
            format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    pub fn save(&self, path: &Path, fingerprint: Option<String>, seed: u64) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.params(), &self.sidecar(fingerprint, seed))
    }

    pub fn load(path: &Path) -> Result<(Self, VaeSidecar)> {
        let side: VaeSidecar = checkpoint::read_sidecar(path)?;
        if side.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(UdError::Checkpoint {
                path: path.to_owned(),
                reason: format!("format version {} not supported", side.format_version),
            });
        }
        let mut model = build_vae(side.latent_dim, side.beta, 0)?;
        checkpoint::load_into(&mut model, checkpoint::read_weights(path, CHECKPOINT_KIND)?, path)?;
        model.mode_tag = side.mode_tag;
        model.epochs_trained = side.epochs;
        Ok((model, side))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSidecar {
    pub latent_dim: usize,
    pub beta: f32,
    pub mode_tag: ModeTag,
    pub training_corpus_fingerprint: Option<String>,
    pub epochs: usize,
    pub seed: u64,
    pub format_version: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean pixel MSE (or BCE) per epoch, measured on the training batches.
    pub recon_per_epoch: Vec<f64>,
    pub kl_per_epoch: Vec<f64>,
    pub seconds: f64,
}

fn to_inputs(crops: &[RgbImage]) -> Result<Vec<Tensor>> {
    crops
        .iter()
        .map(|c| {
            if c.width != INPUT_SIZE || c.height != INPUT_SIZE {
                return Err(UdError::InvalidInput(format!(
                    "VAE input must be {INPUT_SIZE}×{INPUT_SIZE}, got {}×{}",
                    c.width, c.height
                )));
            }
            Ok(c.to_tensor())
        })
        .collect()
}

fn fit(model: &mut VaeModel, data: &[Tensor], epochs: usize, cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> TrainLog {
    let start = Instant::now();
    for p in model.params_mut() {
        p.ensure_state();
        p.m.iter_mut().for_each(|v| *v = 0.0);
        p.v.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Tensor::stack(&chunk.iter().map(|&i| &data[i]).collect::<Vec<_>>());
            model.zero_grad();
            let f = model.forward_train(&batch, rng);
            let n = batch.n as f64;
            recon_sum += recon_value(&batch, &f.out, cfg.recon_loss) * n;
            kl_sum += kl_divergence(&f.mu.data, &f.logvar.data);
            model.backward(&batch, &f, cfg.recon_loss);
            adam.step(model.params_mut());
        }
        log.recon_per_epoch.push(recon_sum / data.len() as f64);
        log.kl_per_epoch.push(kl_sum / data.len() as f64);
        model.epochs_trained += 1;
    }
    log.seconds = start.elapsed().as_secs_f64();
    log
}

fn recon_value(x: &Tensor, y: &Tensor, kind: ReconLoss) -> f64 {
    let total: f64 = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&t, &p)| {
            let (t, p) = (t as f64, p as f64);
            match kind {
                ReconLoss::Mse => (p - t).powi(2),
                ReconLoss::Bce => {
                    let p = p.clamp(1e-7, 1.0 - 1e-7);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                }
            }
        })
        .sum();
    total / x.len().max(1) as f64
}

fn require_cohort(n: usize) -> Result<()> {
    if n < 2 {
        return Err(UdError::InsufficientCohort { found: n, required: 2 });
    }
    Ok(())
}

/// Self-training on one patient's lesions.
pub fn train_scratch(lesions: &[RgbImage], epochs: usize, cfg: &VaeConfig, seed: u64) -> Result<(VaeModel, TrainLog)> {
    cfg.validate()?;
    require_cohort(lesions.len())?;
    let data = to_inputs(lesions)?;
    let mut model = build_vae(cfg.latent_dim, cfg.beta, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    let log = fit(&mut model, &data, epochs, cfg, &mut rng);
    Ok((model, log))
}

/// Order-sensitive digest of the pooled training crops.
pub fn corpus_fingerprint(corpus: &[(String, Vec<RgbImage>)]) -> String {
    let mut bytes = Vec::new();
    for (pid, crops) in corpus {
        bytes.extend_from_slice(pid.as_bytes());
        bytes.push(0);
        for c in crops {
            bytes.extend_from_slice(&checkpoint::hex_digest(&c.data).into_bytes());
        }
    }
    checkpoint::hex_digest(&bytes)
}

/// Base model over lesions pooled from several patients.
pub fn pretrain_base(
    corpus: &[(String, Vec<RgbImage>)],
    epochs: usize,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(VaeModel, TrainLog)> {
    cfg.validate()?;
    let patients = corpus.iter().filter(|(_, c)| !c.is_empty()).count();
    if corpus.iter().all(|(_, c)| c.is_empty()) {
        return Err(UdError::InvalidInput("pretraining corpus is empty".into()));
    }
    if patients < 2 {
        return Err(UdError::InvalidInput(format!("pretraining needs lesions from at least 2 patients, got {patients}")));
    }
    let pooled: Vec<RgbImage> = corpus.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
    let data = to_inputs(&pooled)?;
    let mut model = build_vae(cfg.latent_dim, cfg.beta, seed)?;
    model.mode_tag = ModeTag::Base;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let log = fit(&mut model, &data, epochs, cfg, &mut rng);
    Ok((model, log))
}

/// Short adaptation of a base model to one patient. Zero epochs returns the base as-is.
pub fn finetune(
    base: &VaeModel,
    lesions: &[RgbImage],
    epochs: usize,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(VaeModel, TrainLog)> {
    require_cohort(lesions.len())?;
    let mut model = base.clone();
    if epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let cfg = VaeConfig { latent_dim: base.latent_dim, beta: base.beta, ..cfg.clone() };
    cfg.validate()?;
    let data = to_inputs(lesions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1e7);
    let log = fit(&mut model, &data, epochs, &cfg, &mut rng);
    model.mode_tag = ModeTag::Finetuned;
    Ok((model, log))
}

/// Encoder mean for one lesion.
pub fn embed(model: &VaeModel, lesion_id: LesionId, crop: &RgbImage) -> Result<LatentEmbedding> {
    Ok(embed_all(model, &[(lesion_id, crop)])?.remove(0))
}

pub fn embed_all(model: &VaeModel, crops: &[(LesionId, &RgbImage)]) -> Result<Vec<LatentEmbedding>> {
    model.check_usable()?;
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(32) {
        let imgs: Vec<RgbImage> = chunk.iter().map(|(_, c)| (*c).clone()).collect();
        let inputs = to_inputs(&imgs)?;
        let batch = Tensor::stack(&inputs.iter().collect::<Vec<_>>());
        for ((id, _), mu) in chunk.iter().zip(model.encode_mu(&batch)) {
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(UdError::NonFinite("embedding"));
            }
            out.push(LatentEmbedding { lesion_id: *id, mu });
        }
    }
    Ok(out)
}

/// Reconstruction term of [`vae_loss`] for one lesion, decoding from mu.
pub fn recon_score(model: &VaeModel, crop: &RgbImage) -> Result<f64> {
    model.check_usable()?;
    let x = to_inputs(std::slice::from_ref(crop))?.remove(0);
    let y = model.reconstruct(&x);
    Ok(recon_value(&x, &y, ReconLoss::Mse))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, lo: f32, hi: f32) -> Tensor {
        Tensor::from_vec(n, c, 1, 1, (0..n * c).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(2, 3, 4, 4, (0..96).map(|_| rng.random_range(0.0..1.0)).collect());
        let mu = random_tensor(&mut rng, 2, 5, -2.0, 2.0);
        let lv = random_tensor(&mut rng, 2, 5, -2.0, 2.0);
        let same = vae_loss(&x, &x, &mu, &lv, 4.0).unwrap();
        assert_eq!(same.reconstruction, 0.0);
        assert!(same.kl >= 0.0);
        assert_eq!(same.total, same.reconstruction + 4.0 * same.kl);
        let zero = vae_loss(&x, &x.map(|v| 1.0 - v), &mu, &lv, 0.0).unwrap();
        assert_eq!(zero.total, zero.reconstruction);
        let bad = Tensor::from_vec(2, 5, 1, 1, vec![f32::NAN; 10]);
        assert!(matches!(vae_loss(&x, &x, &bad, &lv, 1.0), Err(UdError::NonFinite("mu"))));
    }

    #[test]
    fn latent_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::zeros(3, 1, 2, 2);
        let mu = random_tensor(&mut rng, 3, 4, -1.5, 1.5);
        let lv = random_tensor(&mut rng, 3, 4, -1.5, 1.5);
        let beta = 2.5;
        let (dmu, dlv) = vae_loss_latent_grad(&mu, &lv, beta);
        let h = 1e-3f32;
        for i in 0..mu.len() {
            for (which, an) in [(0, dmu[i]), (1, dlv[i])] {
                let eval = |d: f32| {
                    let (mut m, mut l) = (mu.clone(), lv.clone());
                    if which == 0 { m.data[i] += d } else { l.data[i] += d }
                    vae_loss(&x, &x, &m, &l, beta).unwrap().total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{i}/{which}: fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn build_rejects_bad_hyperparameters() {
        assert!(build_vae(1, 4.0, 0).is_err());
        assert!(build_vae(8, -1.0, 0).is_err());
        let m = build_vae(32, 4.0, 0).unwrap();
        let mu = m.encode_mu(&Tensor::zeros(1, 3, 64, 64));
        assert_eq!(mu[0].len(), 32);
    }

    #[test]
    fn network_gradient_matches_fd() {
        // logvar pinned small so the sampled path is smooth; eps reused through a fixed-seed rng
        let mut model = build_vae(4, 1.5, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(2, 3, 64, 64, (0..2 * 3 * 4096).map(|_| rng.random_range(0.0..1.0)).collect());
        let objective = |m: &VaeModel| {
            let f = m.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(77));
            let sq: f64 = f.out.data.iter().zip(&x.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            (sq + m.beta as f64 * kl_divergence(&f.mu.data, &f.logvar.data)) / x.n as f64
        };
        model.zero_grad();
        let frozen = model.clone();
        let f = model.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(77));
        model.backward(&x, &f, ReconLoss::Mse);
        for (target, idx) in [("enc0.weight", 5), ("fc_logvar.bias", 1), ("fc_mu.bias", 2), ("dec_fc1.weight", 3), ("dec3.weight", 7), ("dec0.bias", 1)] {
            let an = model.params().into_iter().find(|p| p.name == target).unwrap().grad[idx] as f64;
            let steps = [1e-2f32, 3e-3, 1e-3];
            let bump = |d: f32| {
                let mut m = frozen.clone();
                m.params_mut().into_iter().find(|p| p.name == target).unwrap().value[idx] += d;
                objective(&m)
            };
            let fd = steps.iter().map(|&e| (bump(e) - bump(-e)) / (2.0 * e as f64)).sum::<f64>() / steps.len() as f64;
            assert!((fd - an).abs() < 0.05 * (fd.abs() + an.abs()) + 1e-2, "{target}: fd {fd} an {an}");
        }
    }

    #[test]
    fn embed_requires_training_and_is_deterministic() {
        let m = build_vae(8, 4.0, 0).unwrap();
        let crop = RgbImage::filled(64, 64, [200, 150, 120]);
        assert!(matches!(embed(&m, 0, &crop), Err(UdError::Untrained(_))));
        let crops = vec![crop.clone(), RgbImage::filled(64, 64, [90, 60, 40])];
        let cfg = VaeConfig { latent_dim: 8, ..VaeConfig::default() };
        let (m, log) = train_scratch(&crops, 2, &cfg, 1).unwrap();
        assert_eq!(log.recon_per_epoch.len(), 2);
        assert_eq!(embed(&m, 0, &crop).unwrap(), embed(&m, 0, &crop).unwrap());
        assert_eq!(recon_score(&m, &crop).unwrap(), recon_score(&m, &crop).unwrap());
        assert!(matches!(train_scratch(&crops[..1], 2, &cfg, 1), Err(UdError::InsufficientCohort { .. })));
    }

    #[test]
    fn finetune_zero_epochs_is_identity_and_checkpoint_round_trips() {
        let crops = vec![RgbImage::filled(64, 64, [200, 150, 120]), RgbImage::filled(64, 64, [90, 60, 40])];
        let cfg = VaeConfig { latent_dim: 8, ..VaeConfig::default() };
        let corpus = vec![("a".to_string(), crops.clone()), ("b".to_string(), crops.clone())];
        let (base, _) = pretrain_base(&corpus, 1, &cfg, 5).unwrap();
        assert_eq!(base.mode_tag, ModeTag::Base);
        let (same, _) = finetune(&base, &crops, 0, &cfg, 5).unwrap();
        assert_eq!(embed(&same, 0, &crops[0]).unwrap(), embed(&base, 0, &crops[0]).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        base.save(&path, Some(corpus_fingerprint(&corpus)), 5).unwrap();
        let (loaded, side) = VaeModel::load(&path).unwrap();
        assert_eq!(side.mode_tag, ModeTag::Base);
        assert_eq!(side.latent_dim, 8);
        assert_eq!(embed(&loaded, 0, &crops[1]).unwrap(), embed(&base, 0, &crops[1]).unwrap());

        let (untrained, _) = pretrain_base(&corpus, 0, &cfg, 5).unwrap();
        assert_eq!(untrained.epochs_trained, 0);
        assert!(embed(&untrained, 0, &crops[0]).is_ok());
        assert!(pretrain_base(&corpus[..1], 1, &cfg, 5).is_err());
    }
}
