//! Bimodal VAE over AR grids and tap banks with a text-aligned projection.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, ArGrid, ArGridEntry, NormStats, TapBank, TapTrace, EMBED_DIM, GRID_LEN, N_TAPS, TAP_DIM, TAP_LEN};
use crate::lpc::{self, AR_ORDER, LSF_CEILING};
use crate::nn::{self, BatchNorm, Ctx, Dropout, Layer, Linear, Param, Relu, ResBlock, Sequential};
use crate::Scalar;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
const MAGIC: &[u8; 8] = b"HAPTEXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("batch of {0} is too small for the contrastive term")]
    BatchTooSmall(usize),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Layer widths. [`VaeDims::default`] is the full-size network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeDims {
    pub grid_rows: usize,
    pub lsf_order: usize,
    pub tap_dim: usize,
    pub text_dim: usize,
    pub latent: usize,
    /// hidden and output widths after the input
    pub ar_enc: Vec<usize>,
    pub tap_enc: Vec<usize>,
    pub ar_dec: Vec<usize>,
    pub ar_res: usize,
    pub tap_dec: Vec<usize>,
    pub tap_res: usize,
    pub latent_proj_hidden: usize,
    pub text_proj_hidden: usize,
    pub dropout: f64,
}

impl Default for VaeDims {
    fn default() -> Self {
        Self {
            grid_rows: GRID_LEN,
            lsf_order: AR_ORDER,
            tap_dim: TAP_DIM,
            text_dim: EMBED_DIM,
            latent: 64,
            ar_enc: vec![256, 256, 128, 64],
            tap_enc: vec![256, 64],
            ar_dec: vec![256, 512],
            ar_res: 3,
            tap_dec: vec![256, 512],
            tap_res: 2,
            latent_proj_hidden: 128,
            text_proj_hidden: 256,
            dropout: 0.1,
        }
    }
}

impl VaeDims {
    pub fn ar_dim(&self) -> usize {
        self.grid_rows * (self.lsf_order + 1)
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let nonempty = [&self.ar_enc, &self.tap_enc, &self.ar_dec, &self.tap_dec];
        if nonempty.iter().any(|v| v.is_empty() || v.contains(&0)) {
            return Err(VaeError::InvalidConfig("layer widths must be nonempty and positive".into()));
        }
        if self.lsf_order == 0 || self.lsf_order > lpc::MAX_ORDER {
            return Err(VaeError::InvalidConfig(format!("lsf order {}", self.lsf_order)));
        }
        if [self.grid_rows, self.tap_dim, self.text_dim, self.latent, self.latent_proj_hidden, self.text_proj_hidden]
            .contains(&0)
        {
            return Err(VaeError::InvalidConfig("zero dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VaeError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub lambda_rec: f64,
    pub lambda_tap: f64,
    pub lambda_ar: f64,
    pub lambda_text: f64,
    pub lambda_align: f64,
    pub tau: f64,
    pub beta_max: f64,
    pub beta_start: usize,
    pub beta_end: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            lambda_rec: 1.0,
            lambda_tap: 2.0,
            lambda_ar: 2.0,
            lambda_text: 0.1,
            lambda_align: 0.1,
            tau: 0.1,
            beta_max: 0.001,
            beta_start: 20,
            beta_end: 120,
            grad_clip: 1.0,
            epochs: 300,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// KL weight: 0 before `beta_start`, `beta_max` after `beta_end`, linear between.
    pub fn beta(&self, epoch: usize) -> f64 {
        if epoch <= self.beta_start {
            0.0
        } else if epoch >= self.beta_end {
            self.beta_max
        } else {
            self.beta_max * (epoch - self.beta_start) as f64 / (self.beta_end - self.beta_start) as f64
        }
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let pos = [
            self.lr,
            self.lambda_rec,
            self.lambda_tap,
            self.lambda_ar,
            self.tau,
            self.grad_clip,
            self.adam_eps,
        ];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.batch == 0 {
            return Err(VaeError::InvalidConfig("rates, weights and batch must be positive".into()));
        }
        let nonneg = [self.lambda_text, self.lambda_align, self.beta_max];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.beta_end < self.beta_start {
            return Err(VaeError::InvalidConfig("invalid loss weights or beta schedule".into()));
        }
        Ok(())
    }
}

/// Per-channel scaling between decoder outputs and the normalized AR tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ArOutputNorm<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// variance = scale * softplus(head)
    pub var_scale: Vec<T>,
}

impl<T: Scalar> ArOutputNorm<T> {
    pub fn identity(dims: &VaeDims) -> Self {
        Self {
            mean: vec![T::zero(); dims.ar_dim()],
            std: vec![T::one(); dims.ar_dim()],
            var_scale: vec![T::one(); dims.grid_rows],
        }
    }

    pub fn from_stats(stats: &NormStats, dims: &VaeDims) -> Result<Self, VaeError> {
        if stats.ar_mean.len() != dims.ar_dim() {
            return Err(VaeError::ShapeError(format!("norm stats have {} AR channels, model {}", stats.ar_mean.len(), dims.ar_dim())));
        }
        let w = dims.lsf_order + 1;
        let var_scale = (0..dims.grid_rows)
            .map(|r| {
                let j = r * w + dims.lsf_order;
                let s = if stats.ar_constant[j] { stats.ar_mean[j].abs().max(1e-30) } else { stats.ar_std[j] };
                T::lit(s)
            })
            .collect();
        Ok(Self {
            mean: stats.ar_mean.iter().map(|&v| T::lit(v)).collect(),
            std: stats.ar_std.iter().map(|&v| T::lit(v)).collect(),
            var_scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    pub mu: Array2<T>,
    pub logvar: Array2<T>,
}

/// Decoder output for a batch of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<T> {
    /// B x (rows * order), radians, valid LSF rows
    pub lsf: Array2<T>,
    /// B x rows, softplus head output
    pub var_head: Array2<T>,
    /// B x rows, excitation variance (`var_scale * var_head`)
    pub variance: Array2<T>,
    /// B x tap_dim, normalized space
    pub tap: Array2<T>,
}

impl<T: Scalar> Decoded<T> {
    pub fn len(&self) -> usize {
        self.lsf.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.lsf.nrows() == 0
    }

    /// Item `i` as a grid at the standard bin centroids. Full-size models only.
    pub fn ar_grid(&self, i: usize) -> Result<ArGrid, VaeError> {
        if self.lsf.ncols() != GRID_LEN * AR_ORDER {
            return Err(VaeError::ShapeError(format!("{} LSF columns", self.lsf.ncols())));
        }
        let entries = corpus::grid_centroids()
            .iter()
            .enumerate()
            .map(|(r, &(force, speed))| ArGridEntry {
                force,
                speed,
                lsf: std::array::from_fn(|k| self.lsf[[i, r * AR_ORDER + k]].to_f64_lossy()),
                variance: self.variance[[i, r]].to_f64_lossy(),
            })
            .collect();
        Ok(ArGrid { entries })
    }

    /// Item `i` as a tap bank, denormalized with `stats`.
    pub fn tap_bank(&self, i: usize, stats: &NormStats) -> Result<TapBank, VaeError> {
        if self.tap.ncols() != TAP_DIM || stats.tap_mean.len() != TAP_DIM {
            return Err(VaeError::ShapeError(format!("{} tap columns", self.tap.ncols())));
        }
        let row = self.tap.row(i);
        let traces = corpus::tap_speeds()
            .iter()
            .enumerate()
            .map(|(t, &impact_speed)| TapTrace {
                impact_speed,
                samples: (0..TAP_LEN)
                    .map(|n| {
                        let j = t * TAP_LEN + n;
                        (row[j].to_f64_lossy() * stats.tap_std[j] + stats.tap_mean[j]) as f32
                    })
                    .collect(),
            })
            .collect();
        debug_assert_eq!(N_TAPS * TAP_LEN, TAP_DIM);
        Ok(TapBank { traces })
    }
}

/// Inputs for one optimizer step: normalized tensors, text embeddings and labels.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ar: Array2<T>,
    pub tap: Array2<T>,
    pub text: Array2<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec_tap: f64,
    pub rec_ar: f64,
    /// `lambda_rec * (lambda_tap * rec_tap + lambda_ar * rec_ar)`
    pub rec: f64,
    pub kl: f64,
    pub infonce: f64,
    pub align: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossTerms {
    /// Weighted terms in the order they add up to `total`.
    pub fn weighted(&self, cfg: &TrainConfig) -> [f64; 4] {
        [self.rec, self.beta * self.kl, cfg.lambda_text * self.infonce, cfg.lambda_align * self.align]
    }
}

/// Options for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub epoch: usize,
    pub train: bool,
    /// seeds dropout masks and the reparameterization noise
    pub seed: u64,
    /// force the reparameterization noise to zero
    pub zero_noise: bool,
}

struct Cache<T> {
    eps: Array2<T>,
    logvar_raw: Array2<T>,
    mu: Array2<T>,
    logvar: Array2<T>,
    logits: Array2<T>,
    var_raw: Array2<T>,
    ex: Array2<T>,
    ex_norm: ndarray::Array1<T>,
    et: Array2<T>,
    et_norm: ndarray::Array1<T>,
    mu_hat: Array2<T>,
    probs_row: Array2<T>,
    probs_col: Array2<T>,
    mask: Array2<bool>,
    g_pred_ar: Array2<T>,
    g_pred_tap: Array2<T>,
    enc_ar_width: usize,
}

#[derive(Debug, Clone)]
pub struct Vae<T> {
    pub dims: VaeDims,
    pub ar_enc: Sequential<T>,
    pub tap_enc: Sequential<T>,
    pub fusion: Linear<T>,
    pub ar_dec: Sequential<T>,
    pub lsf_head: Linear<T>,
    pub var_head: Linear<T>,
    pub tap_dec: Sequential<T>,
    pub latent_proj: Sequential<T>,
    pub text_proj: Sequential<T>,
    pub out_norm: ArOutputNorm<T>,
}

fn decoder_body<T: Scalar>(name: &str, latent: usize, widths: &[usize], res: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let mut sizes = vec![latent];
    sizes.extend_from_slice(widths);
    let mut seq = Sequential::mlp(name, &sizes, rng);
    seq.push(Layer::Relu(Relu::default()));
    let w = *widths.last().expect("nonempty widths");
    for i in 0..res {
        seq.push(Layer::Res(ResBlock::new(&format!("{name}.res{i}"), w, dropout, rng)));
    }
    seq
}

fn projection<T: Scalar>(name: &str, n_in: usize, hidden: usize, out: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Sequential<T> {
    let mut seq = Sequential::default();
    seq.push(Layer::Linear(Linear::new(&format!("{name}.0"), n_in, hidden, 1.0, rng)));
    seq.push(Layer::BatchNorm(BatchNorm::new(&format!("{name}.bn"), hidden)));
    seq.push(Layer::Relu(Relu::default()));
    if dropout > 0.0 {
        seq.push(Layer::Dropout(Dropout::new(dropout)));
    }
    seq.push(Layer::Linear(Linear::new(&format!("{name}.1"), hidden, out, 1.0, rng)));
    seq
}

impl<T: Scalar> Vae<T> {
    pub fn new(dims: VaeDims, seed: u64) -> Result<Self, VaeError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![dims.ar_dim()];
        sizes.extend_from_slice(&dims.ar_enc);
        let ar_enc = Sequential::mlp("ar_enc", &sizes, &mut rng);
        let mut sizes = vec![dims.tap_dim];
        sizes.extend_from_slice(&dims.tap_enc);
        let tap_enc = Sequential::mlp("tap_enc", &sizes, &mut rng);
        let fused = dims.ar_enc.last().unwrap() + dims.tap_enc.last().unwrap();
        let fusion = Linear::new("fusion", fused, 2 * dims.latent, 0.5, &mut rng);
        let ar_dec = decoder_body("ar_dec", dims.latent, &dims.ar_dec, dims.ar_res, dims.dropout, &mut rng);
        let body = *dims.ar_dec.last().unwrap();
        let lsf_head = Linear::new("lsf_head", body, dims.grid_rows * dims.lsf_order, 0.1, &mut rng);
        let var_head = Linear::new("var_head", body, dims.grid_rows, 0.1, &mut rng);
        let mut tap_dec = decoder_body("tap_dec", dims.latent, &dims.tap_dec, dims.tap_res, 0.0, &mut rng);
        tap_dec.push(Layer::Linear(Linear::new("tap_dec.out", *dims.tap_dec.last().unwrap(), dims.tap_dim, 1.0, &mut rng)));
        let latent_proj = projection("latent_proj", dims.latent, dims.latent_proj_hidden, dims.latent, dims.dropout, &mut rng);
        let text_proj = projection("text_proj", dims.text_dim, dims.text_proj_hidden, dims.latent, 0.0, &mut rng);
        let out_norm = ArOutputNorm::identity(&dims);
        Ok(Self { dims, ar_enc, tap_enc, fusion, ar_dec, lsf_head, var_head, tap_dec, latent_proj, text_proj, out_norm })
    }

    /// Every tensor in a fixed order.
    pub fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ar_enc.visit(f);
        self.tap_enc.visit(f);
        f(&mut self.fusion.w);
        f(&mut self.fusion.b);
        self.ar_dec.visit(f);
        f(&mut self.lsf_head.w);
        f(&mut self.lsf_head.b);
        f(&mut self.var_head.w);
        f(&mut self.var_head.b);
        self.tap_dec.visit(f);
        self.latent_proj.visit(f);
        self.text_proj.visit(f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |p| p.grad.fill(T::zero()));
    }

    fn check_cols(x: &Array2<T>, n: usize, what: &str) -> Result<(), VaeError> {
        if x.ncols() != n {
            return Err(VaeError::ShapeError(format!("{what}: expected {n} columns, found {}", x.ncols())));
        }
        Ok(())
    }

    fn encode_inner(&mut self, ar: &Array2<T>, tap: &Array2<T>, ctx: &mut Ctx) -> Result<(Array2<T>, Array2<T>, usize), VaeError> {
        Self::check_cols(ar, self.dims.ar_dim(), "AR tensor")?;
        Self::check_cols(tap, self.dims.tap_dim, "tap tensor")?;
        if ar.nrows() != tap.nrows() {
            return Err(VaeError::ShapeError(format!("{} AR rows vs {} tap rows", ar.nrows(), tap.nrows())));
        }
        let ha = self.ar_enc.forward(ar, ctx);
        let ht = self.tap_enc.forward(tap, ctx);
        let width = ha.ncols();
        let h = ndarray::concatenate(Axis(1), &[ha.view(), ht.view()]).expect("same rows");
        let out = self.fusion.forward(&h);
        let l = self.dims.latent;
        Ok((out.slice(s![.., ..l]).to_owned(), out.slice(s![.., l..]).to_owned(), width))
    }

    /// Posterior for a batch (eval mode).
    pub fn encode(&mut self, ar: &Array2<T>, tap: &Array2<T>) -> Result<Posterior<T>, VaeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { train: false, rng: &mut rng };
        let (mu, raw, _) = self.encode_inner(ar, tap, &mut ctx)?;
        Ok(Posterior { mu, logvar: raw.mapv(clamp_logvar) })
    }

    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(post: &Posterior<T>, rng: &mut ChaCha8Rng) -> Array2<T> {
        let eps = Array2::from_shape_simple_fn(post.mu.raw_dim(), || T::lit(StandardNormal.sample(rng)));
        &post.mu + &(post.logvar.mapv(|v| (v * T::lit(0.5)).exp()) * eps)
    }

    fn decode_inner(&mut self, z: &Array2<T>, ctx: &mut Ctx) -> Result<(Array2<T>, Array2<T>, Array2<T>, Array2<T>), VaeError> {
        Self::check_cols(z, self.dims.latent, "latent")?;
        let body = self.ar_dec.forward(z, ctx);
        let logits = self.lsf_head.forward(&body);
        let var_raw = self.var_head.forward(&body);
        let tap = self.tap_dec.forward(z, ctx);
        let lsf = project_rows(&logits, self.dims.lsf_order)?;
        Ok((logits, lsf, var_raw, tap))
    }

    /// Decode latents (eval mode). Every LSF row is valid for any finite `z`.
    pub fn decode(&mut self, z: &Array2<T>) -> Result<Decoded<T>, VaeError> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(VaeError::ShapeError("non-finite latent".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { train: false, rng: &mut rng };
        let (_, lsf, var_raw, tap) = self.decode_inner(z, &mut ctx)?;
        let var_head = var_raw.mapv(nn::softplus);
        let mut variance = var_head.clone();
        for mut row in variance.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.out_norm.var_scale) {
                *v *= *s;
            }
        }
        Ok(Decoded { lsf, var_head, variance, tap })
    }

    /// Decoded tensors in the normalized corpus layout (eval mode).
    pub fn decode_normalized(&mut self, z: &Array2<T>) -> Result<(Array2<T>, Array2<T>), VaeError> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(VaeError::ShapeError("non-finite latent".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { train: false, rng: &mut rng };
        let (_, lsf, var_raw, tap) = self.decode_inner(z, &mut ctx)?;
        Ok((self.assemble_ar(&lsf, &var_raw), tap))
    }

    /// Text embeddings to latents: the text projection output before
    /// normalization (eval mode).
    pub fn text_to_latent(&mut self, text: &Array2<T>) -> Result<Array2<T>, VaeError> {
        Self::check_cols(text, self.dims.text_dim, "text embedding")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = Ctx { train: false, rng: &mut rng };
        Ok(self.text_proj.forward(text, &mut ctx))
    }

    /// Decoded AR rows in the normalized corpus layout.
    fn assemble_ar(&self, lsf: &Array2<T>, var_raw: &Array2<T>) -> Array2<T> {
        let (p, rows) = (self.dims.lsf_order, self.dims.grid_rows);
        let n = &self.out_norm;
        let mut out = Array2::zeros((lsf.nrows(), self.dims.ar_dim()));
        for (b, mut row) in out.rows_mut().into_iter().enumerate() {
            for r in 0..rows {
                for i in 0..p {
                    let j = r * (p + 1) + i;
                    row[j] = (lsf[[b, r * p + i]] - n.mean[j]) / n.std[j];
                }
                let j = r * (p + 1) + p;
                row[j] = (n.var_scale[r] * nn::softplus(var_raw[[b, r]]) - n.mean[j]) / n.std[j];
            }
        }
        out
    }

    /// Loss for a batch. Leaves the caches needed by [`Vae::backward`].
    fn forward_loss(&mut self, batch: &Batch<T>, cfg: &TrainConfig, opt: StepOptions) -> Result<(LossTerms, Cache<T>), VaeError> {
        let b = batch.ar.nrows();
        if cfg.lambda_text > 0.0 && b < 2 {
            return Err(VaeError::BatchTooSmall(b));
        }
        if batch.tap.nrows() != b || batch.text.nrows() != b || batch.labels.len() != b {
            return Err(VaeError::ShapeError("batch parts disagree on size".into()));
        }
        Self::check_cols(&batch.text, self.dims.text_dim, "text embedding")?;
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        let eps = if opt.zero_noise {
            Array2::zeros((b, self.dims.latent))
        } else {
            Array2::from_shape_simple_fn((b, self.dims.latent), || T::lit(StandardNormal.sample(&mut rng)))
        };
        let mut ctx = Ctx { train: opt.train, rng: &mut rng };
        let (mu, logvar_raw, enc_ar_width) = self.encode_inner(&batch.ar, &batch.tap, &mut ctx)?;
        let logvar = logvar_raw.mapv(clamp_logvar);
        let z = &mu + &(logvar.mapv(|v| (v * T::lit(0.5)).exp()) * &eps);

        let (logits, lsf, var_raw, tap) = self.decode_inner(&z, &mut ctx)?;
        let pred_ar = self.assemble_ar(&lsf, &var_raw);
        let (rec_tap, g_tap) = nn::smooth_l1(&tap, &batch.tap);
        let (rec_ar, g_ar) = nn::smooth_l1(&pred_ar, &batch.ar);
        let bt = T::of_usize(b);
        let half = T::lit(0.5);
        let kl = kl_divergence(mu.as_slice().expect("standard layout"), logvar.as_slice().expect("standard layout")) / bt;

        let p = self.latent_proj.forward(&z, &mut ctx);
        let (ex, ex_norm) = nn::l2_normalize(&p);
        let mu_hat = self.text_proj.forward(&batch.text, &mut ctx);
        let (et, et_norm) = nn::l2_normalize(&mu_hat);
        let inv_tau = T::lit(1.0 / cfg.tau);
        let sim = ex.dot(&et.t()) * inv_tau;
        // same-class pairs other than the diagonal are not negatives
        let mask = Array2::from_shape_fn((b, b), |(i, j)| i == j || batch.labels[i] != batch.labels[j]);
        let (probs_row, lse_row) = masked_softmax(&sim, &mask);
        let (probs_col_t, lse_col) = masked_softmax(&sim.t().to_owned(), &mask.t().to_owned());
        let mut nce = T::zero();
        for i in 0..b {
            nce += (lse_row[i] - sim[[i, i]]) + (lse_col[i] - sim[[i, i]]);
        }
        let infonce = nce * half / bt;
        let diff = &mu_hat - &mu;
        let align = (&diff * &diff).sum() / bt;

        let beta = cfg.beta(opt.epoch);
        let rec = cfg.lambda_rec * (cfg.lambda_tap * rec_tap.to_f64_lossy() + cfg.lambda_ar * rec_ar.to_f64_lossy());
        let mut terms = LossTerms {
            rec_tap: rec_tap.to_f64_lossy(),
            rec_ar: rec_ar.to_f64_lossy(),
            rec,
            kl: kl.to_f64_lossy(),
            infonce: if cfg.lambda_text > 0.0 { infonce.to_f64_lossy() } else { 0.0 },
            align: align.to_f64_lossy(),
            beta,
            total: 0.0,
        };
        terms.total = terms.weighted(cfg).iter().sum();
        let cache = Cache {
            eps,
            logvar_raw,
            mu,
            logvar,
            logits,
            var_raw,
            ex,
            ex_norm,
            et,
            et_norm,
            mu_hat,
            probs_row,
            probs_col: probs_col_t.t().to_owned(),
            mask,
            g_pred_ar: g_ar,
            g_pred_tap: g_tap,
            enc_ar_width,
        };
        Ok((terms, cache))
    }

    fn backward(&mut self, cache: Cache<T>, cfg: &TrainConfig, epoch: usize) {
        let b = cache.mu.nrows();
        let bt = T::of_usize(b);
        let (p, rows) = (self.dims.lsf_order, self.dims.grid_rows);
        let lam_rec = T::lit(cfg.lambda_rec);
        let half = T::lit(0.5);

        // reconstruction
        let g_tap = cache.g_pred_tap * (lam_rec * T::lit(cfg.lambda_tap));
        let g_ar = cache.g_pred_ar * (lam_rec * T::lit(cfg.lambda_ar));
        let mut g_logits_lsf = Array2::zeros((b, rows * p));
        let mut g_var_raw = Array2::zeros((b, rows));
        let n = &self.out_norm;
        for bi in 0..b {
            for r in 0..rows {
                for i in 0..p {
                    let j = r * (p + 1) + i;
                    g_logits_lsf[[bi, r * p + i]] = g_ar[[bi, j]] / n.std[j];
                }
                let j = r * (p + 1) + p;
                g_var_raw[[bi, r]] = g_ar[[bi, j]] * n.var_scale[r] / n.std[j] * nn::sigmoid(cache.var_raw[[bi, r]]);
            }
        }
        let g_logits = project_rows_backward(&cache.logits, &g_logits_lsf, p);
        let mut g_body = self.lsf_head.backward(&g_logits);
        g_body += &self.var_head.backward(&g_var_raw);
        let mut g_z = self.ar_dec.backward(&g_body);
        g_z += &self.tap_dec.backward(&g_tap);

        // contrastive and alignment
        let lam_text = T::lit(cfg.lambda_text);
        let mut g_mu_hat = Array2::zeros(cache.mu_hat.raw_dim());
        if cfg.lambda_text > 0.0 {
            let eye = Array2::from_shape_fn((b, b), |(i, j)| if i == j { T::one() } else { T::zero() });
            let mut g_sim = ((&cache.probs_row - &eye) + (&cache.probs_col - &eye)) * (half / bt * lam_text);
            ndarray::Zip::from(&mut g_sim).and(&cache.mask).for_each(|g, &m| {
                if !m {
                    *g = T::zero()
                }
            });
            let inv_tau = T::lit(1.0 / cfg.tau);
            let g_ex = g_sim.dot(&cache.et) * inv_tau;
            let g_et = g_sim.t().dot(&cache.ex) * inv_tau;
            let g_p = nn::l2_normalize_backward(&cache.ex, &cache.ex_norm, &g_ex);
            g_z += &self.latent_proj.backward(&g_p);
            g_mu_hat += &nn::l2_normalize_backward(&cache.et, &cache.et_norm, &g_et);
        } else {
            // keep the projection caches consistent; no gradient flows
            let zeros = Array2::zeros(cache.ex.raw_dim());
            self.latent_proj.backward(&zeros);
        }
        let g_align = (&cache.mu_hat - &cache.mu) * (T::lit(2.0 * cfg.lambda_align) / bt);
        g_mu_hat += &g_align;
        self.text_proj.backward(&g_mu_hat);

        // posterior
        let beta = T::lit(cfg.beta(epoch));
        let sd = cache.logvar.mapv(|v| (v * half).exp());
        let g_mu = g_z.clone() + &(&cache.mu * (beta / bt)) - &g_align;
        let mut g_lv = &g_z * &cache.eps * &sd * half + &(cache.logvar.mapv(|v| v.exp() - T::one()) * (half * beta / bt));
        let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        ndarray::Zip::from(&mut g_lv).and(&cache.logvar_raw).for_each(|g, &raw| {
            if raw < lo || raw > hi {
                *g = T::zero()
            }
        });
        let g_out = ndarray::concatenate(Axis(1), &[g_mu.view(), g_lv.view()]).expect("same rows");
        let g_h = self.fusion.backward(&g_out);
        let w = cache.enc_ar_width;
        self.ar_enc.backward(&g_h.slice(s![.., ..w]).to_owned());
        self.tap_enc.backward(&g_h.slice(s![.., w..]).to_owned());
    }

    /// Loss and accumulated gradients for one batch.
    pub fn loss_and_grad(&mut self, batch: &Batch<T>, cfg: &TrainConfig, opt: StepOptions) -> Result<LossTerms, VaeError> {
        let (terms, cache) = self.forward_loss(batch, cfg, opt)?;
        self.backward(cache, cfg, opt.epoch);
        Ok(terms)
    }

    /// Loss only (no gradient accumulation).
    pub fn loss(&mut self, batch: &Batch<T>, cfg: &TrainConfig, opt: StepOptions) -> Result<LossTerms, VaeError> {
        Ok(self.forward_loss(batch, cfg, opt)?.0)
    }

    /// FNV-1a hash of every tensor's bits.
    pub fn param_hash(&mut self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit(&mut |p| {
            for v in p.value.iter() {
                for byte in v.to_f64_lossy().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }
}

fn clamp_logvar<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOGVAR_MIN)).min(T::lit(LOGVAR_MAX))
}

/// Closed-form KL of `N(mu, e^lv)` from `N(0, 1)` summed over dimensions.
pub fn kl_divergence<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let half = T::lit(0.5);
    mu.iter().zip(logvar).map(|(&m, &l)| half * (m * m + l.exp() - T::one() - l)).sum()
}

/// Row-wise softmax over unmasked entries; returns probabilities and log-sum-exp.
fn masked_softmax<T: Scalar>(x: &Array2<T>, mask: &Array2<bool>) -> (Array2<T>, Vec<T>) {
    let mut probs = Array2::zeros(x.raw_dim());
    let mut lse = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let max = (0..x.ncols()).filter(|&j| mask[[i, j]]).map(|j| x[[i, j]]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for j in 0..x.ncols() {
            if mask[[i, j]] {
                let e = (x[[i, j]] - max).exp();
                probs[[i, j]] = e;
                total += e;
            }
        }
        probs.row_mut(i).mapv_inplace(|v| v / total);
        lse.push(max + total.ln());
    }
    (probs, lse)
}

/// Symmetric InfoNCE of matched rows of `a` and `b` (already normalized).
pub fn info_nce<T: Scalar>(a: &Array2<T>, b: &Array2<T>, tau: T) -> T {
    let sim = a.dot(&b.t()) / tau;
    let n = a.nrows();
    let mask = Array2::from_elem((n, n), true);
    let (_, lr) = masked_softmax(&sim, &mask);
    let (_, lc) = masked_softmax(&sim.t().to_owned(), &mask);
    let total: T = (0..n).map(|i| lr[i] + lc[i] - sim[[i, i]] - sim[[i, i]]).sum();
    total * T::lit(0.5) / T::of_usize(n)
}

/// Project every group of `order` logits to LSFs.
pub fn project_rows<T: Scalar>(logits: &Array2<T>, order: usize) -> Result<Array2<T>, VaeError> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let src = src.to_vec();
        let mut buf = vec![T::zero(); order];
        for (k, chunk) in src.chunks(order).enumerate() {
            lpc::project_logits(chunk, &mut buf).map_err(|e| VaeError::ShapeError(e.to_string()))?;
            for (i, v) in buf.iter().enumerate() {
                dst[k * order + i] = *v;
            }
        }
    }
    Ok(out)
}

/// Backward of [`project_rows`]: softmax with an implicit zero logit, then
/// cumulative sum scaled by pi; clamped entries pass no gradient.
pub fn project_rows_backward<T: Scalar>(logits: &Array2<T>, g_lsf: &Array2<T>, order: usize) -> Array2<T> {
    let mut out = Array2::zeros(logits.raw_dim());
    let pi = T::PI();
    let ceiling = T::lit(LSF_CEILING);
    let mut w = vec![T::zero(); order];
    let mut gw = vec![T::zero(); order];
    for (b, src) in logits.rows().into_iter().enumerate() {
        for k in 0..src.len() / order {
            let l = src.slice(s![k * order..(k + 1) * order]);
            let max = l.iter().fold(T::zero(), |m, &v| m.max(v));
            let mut total = (-max).exp();
            for (wi, &li) in w.iter_mut().zip(l.iter()) {
                *wi = (li - max).exp();
                total += *wi;
            }
            w.iter_mut().for_each(|v| *v /= total);
            // reverse cumulative sum of the upstream gradient
            let mut acc = T::zero();
            let mut cum: T = w.iter().copied().sum();
            for i in (0..order).rev() {
                let g = g_lsf[[b, k * order + i]];
                if pi * cum <= ceiling {
                    acc += pi * g;
                }
                cum -= w[i];
                gw[i] = acc;
            }
            let dot: T = w.iter().zip(&gw).map(|(a, b)| *a * *b).sum();
            for i in 0..order {
                out[[b, k * order + i]] = w[i] * (gw[i] - dot);
            }
        }
    }
    out
}

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &mut Vae<T>) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| {
            if p.trainable {
                m.push(Array2::zeros(p.value.raw_dim()));
            }
        });
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    /// Global gradient norm over trainable tensors; errors on non-finite values.
    pub fn grad_norm(model: &mut Vae<T>) -> Result<f64, VaeError> {
        let mut sq = 0.0;
        let mut bad = None;
        model.visit(&mut |p| {
            if !p.trainable {
                return;
            }
            for g in p.grad.iter() {
                let g = g.to_f64_lossy();
                if !g.is_finite() && bad.is_none() {
                    bad = Some(p.name.clone());
                }
                sq += g * g;
            }
        });
        match bad {
            Some(name) => Err(VaeError::NonFiniteGradient(name)),
            None => Ok(sq.sqrt()),
        }
    }

    /// Clip to `cfg.grad_clip` by global norm, then one Adam update. Returns the
    /// pre-clip norm.
    pub fn step(&mut self, model: &mut Vae<T>, cfg: &TrainConfig) -> Result<f64, VaeError> {
        let norm = Self::grad_norm(model)?;
        let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = T::lit(1.0 - b1.powi(t));
        let c2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2, lr, eps, scale) = (T::lit(b1), T::lit(b2), T::lit(cfg.lr), T::lit(cfg.adam_eps), T::lit(scale));
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit(&mut |p| {
            if !p.trainable {
                return;
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            });
            i += 1;
        });
        Ok(norm)
    }
}

/// Training data: normalized tensors, per-record labels and caption embeddings.
#[derive(Debug, Clone)]
pub struct TrainSet<T> {
    pub ar: Array2<T>,
    pub tap: Array2<T>,
    pub labels: Vec<usize>,
    /// caption embeddings per record (at least one each)
    pub captions: Vec<Vec<Vec<T>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub rec_tap: f64,
    pub rec_ar: f64,
    pub rec: f64,
    pub kl: f64,
    pub infonce: f64,
    pub align: f64,
    pub beta: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub steps: usize,
    pub wall_s: f64,
    pub param_hash: String,
}

/// Train in place. Epochs are numbered from 1; `beta` uses that number.
pub fn train<T: Scalar>(
    model: &mut Vae<T>,
    data: &TrainSet<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, VaeError> {
    cfg.validate()?;
    let n = data.ar.nrows();
    if data.tap.nrows() != n || data.labels.len() != n || data.captions.len() != n {
        return Err(VaeError::ShapeError("training set parts disagree on size".into()));
    }
    if data.captions.iter().any(|c| c.is_empty()) {
        return Err(VaeError::ShapeError("record without caption embeddings".into()));
    }
    if cfg.lambda_text > 0.0 && n < 2 {
        return Err(VaeError::BatchTooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        // a trailing batch of one joins the previous batch
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let k = batches.len() - 1;
            let from = k * cfg.batch;
            batches[k] = &order[from..];
        }
        let mut sum = LossTerms::default();
        let mut gsum = 0.0;
        for idx in &batches {
            let text_dim = model.dims.text_dim;
            let mut text = Array2::zeros((idx.len(), text_dim));
            for (row, &i) in idx.iter().enumerate() {
                let caps = &data.captions[i];
                let pick = &caps[rng.random_range(0..caps.len())];
                if pick.len() != text_dim {
                    return Err(VaeError::ShapeError(format!("caption embedding of {} dims", pick.len())));
                }
                for (j, v) in pick.iter().enumerate() {
                    text[[row, j]] = *v;
                }
            }
            let batch = Batch {
                ar: data.ar.select(Axis(0), idx),
                tap: data.tap.select(Axis(0), idx),
                text,
                labels: idx.iter().map(|&i| data.labels[i]).collect(),
            };
            model.zero_grad();
            let opt = StepOptions { epoch, train: true, seed: rng.random(), zero_noise: false };
            let terms = model.loss_and_grad(&batch, cfg, opt)?;
            gsum += adam.step(model, cfg)?;
            sum.rec_tap += terms.rec_tap;
            sum.rec_ar += terms.rec_ar;
            sum.rec += terms.rec;
            sum.kl += terms.kl;
            sum.infonce += terms.infonce;
            sum.align += terms.align;
            sum.total += terms.total;
        }
        let k = batches.len() as f64;
        let m = EpochMetrics {
            epoch,
            rec_tap: sum.rec_tap / k,
            rec_ar: sum.rec_ar / k,
            rec: sum.rec / k,
            kl: sum.kl / k,
            infonce: sum.infonce / k,
            align: sum.align / k,
            beta: cfg.beta(epoch),
            total: sum.total / k,
            grad_norm: gsum / k,
            steps: batches.len(),
            wall_s: start.elapsed().as_secs_f64(),
            param_hash: format!("{:016x}", model.param_hash()),
        };
        on_epoch(&m);
        log.push(m);
    }
    Ok(log)
}

/// Metrics CSV. Wall time is the only nondeterministic column.
pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], w: W) -> Result<(), VaeError> {
    let mut out = csv::Writer::from_writer(w);
    for m in metrics {
        out.serialize(m).map_err(|e| VaeError::Io(std::io::Error::other(e)))?;
    }
    out.flush()?;
    Ok(())
}

/// Checkpoint header, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: VaeDims,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub norm_stats: Option<NormStats>,
    /// anything else the caller wants to keep with the weights
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Layout: magic, u32 version, u32 header length, JSON header, u32 tensor
/// count, then per tensor: u32 name length, name, u32 rows, u32 cols, f32 LE data.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &mut Vae<T>, meta: &CheckpointMeta) -> Result<(), VaeError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut tensors = Vec::new();
    model.visit(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, v) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(v.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
        for x in v.iter() {
            buf.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Vae<T>, CheckpointMeta), VaeError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| VaeError::Checkpoint(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], VaeError> {
        let out = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
        pos += n;
        Ok(out)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(VaeError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32_at(take(4)?) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(hlen)?)?;
    let count = u32_at(take(4)?) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = u32_at(take(4)?) as usize;
        let cols = u32_at(take(4)?) as usize;
        let data = take(4 * rows * cols)?;
        let vals: Vec<T> = data
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), vals).map_err(|e| VaeError::Checkpoint(e.to_string()))?;
        tensors.insert(name, arr);
    }
    let mut model = Vae::new(meta.dims.clone(), 0)?;
    let mut missing = None;
    model.visit(&mut |p| match tensors.remove(&p.name) {
        Some(v) if v.raw_dim() == p.value.raw_dim() => p.value = v,
        _ => {
            if missing.is_none() {
                missing = Some(p.name.clone())
            }
        }
    });
    if let Some(name) = missing {
        return Err(VaeError::Checkpoint(format!("tensor {name} missing or misshapen")));
    }
    if let Some(name) = tensors.keys().next() {
        return Err(VaeError::Checkpoint(format!("unexpected tensor {name}")));
    }
    if let Some(stats) = &meta.norm_stats {
        model.out_norm = ArOutputNorm::from_stats(stats, &model.dims)?;
    }
    Ok((model, meta))
}
