//! Loss functions, adversarial schedule and the optimization loop.
//!
//! One step draws a batch of covers, samples fresh random messages and
//! spreads them with fresh seeds, encodes, pushes the encoded batch through
//! one sampled noiser, decodes and updates encoder+decoder on the weighted
//! objective; the critic trains simultaneously on cover-vs-encoded
//! discrimination. Crop attacks crop the target grid as well, and the
//! fixed-size decoder output is compared against the cropped target after
//! nearest-assignment alignment of grid coordinates.
//!
//! Gradients are accumulated over micro-batches so the paper-scale batch of
//! 12 fits in modest memory; batch-norm statistics are computed per
//! micro-batch.

use crate::attacks::{AttackSampler, AttackSpec, ImageTensor, Realization};
use crate::error::{Error, Result};
use crate::eval::{psnr, ChannelPsnr};
use crate::models::{EncoderVariant, Models};
use crate::nn::adam::Adam;
use crate::nn::Graph;
use crate::spread_codec::{
    crop_grid, extend, propagate, translate, CodecParams, DecodedGrid, GridRegion, Message,
    SpatialMessage,
};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const LOG_EPS: f64 = 1e-6;

/// Training configuration. Defaults mirror the full-scale recipe
/// (lambda = 4.0 / 1.0 / 1.0 / 0.01, Adam at 0.001, batch 12, 100 epochs,
/// 10000 train + 1000 val covers at 256x256).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_e: f64,
    pub lambda_d_mean: f64,
    pub lambda_d_var: f64,
    pub lambda_c: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient-accumulation slice; the optimizer still steps once per
    /// `batch_size` images.
    pub micro_batch: usize,
    pub epochs: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Noiser set in the attack grammar; ranges allowed.
    pub noisers: Vec<String>,
    pub codec: CodecParams,
    pub encoder_variant: String,
    /// Disable to freeze encoder/decoder (dry-run metric passes).
    pub update_main: bool,
    /// Disable to freeze the critic.
    pub update_critic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_e: 4.0,
            lambda_d_mean: 1.0,
            lambda_d_var: 1.0,
            lambda_c: 0.01,
            learning_rate: 0.001,
            batch_size: 12,
            micro_batch: 3,
            epochs: 100,
            train_size: 10_000,
            val_size: 1_000,
            image_size: 256,
            seed: 0,
            noisers: vec!["identity".into()],
            codec: CodecParams::default(),
            encoder_variant: "spatial_concat".into(),
            update_main: true,
            update_critic: true,
            manifest: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// The reduced profile used for CI-scale runs: 500 train / 100 val
    /// covers, 20 epochs.
    pub fn apply_desk_profile(&mut self) {
        self.train_size = 500;
        self.val_size = 100;
        self.epochs = 20;
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.lambda_e < 0.0
            || self.lambda_d_mean < 0.0
            || self.lambda_d_var < 0.0
            || self.lambda_c < 0.0
        {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if self.noisers.is_empty() {
            return Err(Error::InvalidConfig(
                "noiser set must be non-empty (use [\"identity\"])".into(),
            ));
        }
        if self.image_size % self.codec.b != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by block size {}",
                self.image_size, self.codec.b
            )));
        }
        let grid = self.grid();
        if grid.0 * grid.1 < self.codec.fragments() {
            return Err(Error::InvalidConfig(format!(
                "{}x{} grid cannot hold {} fragments",
                grid.0,
                grid.1,
                self.codec.fragments()
            )));
        }
        EncoderVariant::parse(&self.encoder_variant)?;
        self.samplers()?;
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size / self.codec.b,
            self.image_size / self.codec.b,
        )
    }

    pub fn samplers(&self) -> Result<Vec<AttackSampler>> {
        self.noisers.iter().map(|s| AttackSampler::parse(s)).collect()
    }

    pub fn variant(&self) -> EncoderVariant {
        EncoderVariant::parse(&self.encoder_variant).unwrap_or(EncoderVariant::SpatialConcat)
    }
}

/// The full noiser set used for the final all-attacks model.
pub fn all_noisers() -> Vec<String> {
    vec![
        "identity".into(),
        "crop(p=0.3..0.9)".into(),
        "cropout(p=0.3..0.9)".into(),
        "dropout(p=0.3..0.9)".into(),
        "rotate(alpha=-5..5)".into(),
        "gaussian(w=2|3|4|5)".into(),
        "subsample420".into(),
        "resize(s=0.5..1.0)".into(),
        "jpeg_approx(q=25..95,sigma=0.01)".into(),
    ]
}

// ---- losses -------------------------------------------------------------------

/// Encoder transparency loss: plain MSE over all pixels and channels.
pub fn loss_encoder(ic: &Array3<f32>, ie: &Array3<f32>) -> f64 {
    assert_eq!(ic.dim(), ie.dim());
    let mut acc = 0.0f64;
    for (&a, &b) in ic.iter().zip(ie.iter()) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    acc / ic.len() as f64
}

/// Decoder loss pair: (mean term, variance term). The mean term is the
/// normalized L1 distance between the target grid and the decoded grid; the
/// variance term averages, over grid slices, the population variance of the
/// per-channel absolute differences.
pub fn loss_decoder(m: &Array3<f32>, mp: &Array3<f32>) -> (f64, f64) {
    assert_eq!(m.dim(), mp.dim());
    let (gh, gw, ch) = m.dim();
    let mut l1 = 0.0f64;
    let mut var_acc = 0.0f64;
    for y in 0..gh {
        for x in 0..gw {
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for c in 0..ch {
                let d = (m[(y, x, c)] as f64 - mp[(y, x, c)] as f64).abs();
                s1 += d;
                s2 += d * d;
            }
            l1 += s1;
            let mu = s1 / ch as f64;
            var_acc += s2 / ch as f64 - mu * mu;
        }
    }
    (l1 / (gh * gw * ch) as f64, var_acc / (gh * gw) as f64)
}

/// Adversarial losses from the two critic scores: the encoder minimizes
/// log(1 - C(I_e)); the critic minimizes log(1 - C(I_c)) + log(C(I_e)).
/// Scores are clamped away from {0, 1}.
pub fn loss_adversarial(score_e: f64, score_c: f64) -> (f64, f64) {
    let se = score_e.clamp(LOG_EPS, 1.0 - LOG_EPS);
    let sc = score_c.clamp(LOG_EPS, 1.0 - LOG_EPS);
    ((1.0 - se).ln(), (1.0 - sc).ln() + se.ln())
}

/// The combined objective for the encoder/decoder update.
pub fn total_objective(cfg: &TrainConfig, le: f64, ldm: f64, ldv: f64, lce: f64) -> f64 {
    cfg.lambda_e * le + cfg.lambda_d_mean * ldm + cfg.lambda_d_var * ldv + cfg.lambda_c * lce
}

/// Uniform draw over the noiser set, then uniform draws within each ranged
/// parameter.
pub fn sample_attack(samplers: &[AttackSampler], rng: &mut ChaCha12Rng) -> AttackSpec {
    samplers[rng.random_range(0..samplers.len())].sample(rng)
}

/// Map a (possibly cropped) target grid onto the decoder's fixed output grid
/// by nearest assignment of cell centers.
pub fn aligned_target(m: &SpatialMessage, gh: usize, gw: usize) -> Array3<f32> {
    let (ch, cw, c) = m.grid.dim();
    let mut out = Array3::zeros((gh, gw, c));
    for gy in 0..gh {
        let sy = (((gy as f64 + 0.5) * ch as f64 / gh as f64) as usize).min(ch - 1);
        for gx in 0..gw {
            let sx = (((gx as f64 + 0.5) * cw as f64 / gw as f64) as usize).min(cw - 1);
            for ci in 0..c {
                out[(gy, gx, ci)] = m.grid[(sy, sx, ci)] as f32;
            }
        }
    }
    out
}

// ---- metrics ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub attack: String,
    pub loss_e: f64,
    pub loss_d_mean: f64,
    pub loss_d_var: f64,
    pub loss_c_e: f64,
    pub loss_c_c: f64,
    pub total: f64,
    pub bit_accuracy: f64,
    pub psnr_y: f64,
    pub psnr_cb: f64,
    pub psnr_cr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValMetrics {
    pub epoch: usize,
    pub bit_accuracy: f64,
    pub per_noiser: Vec<(String, f64)>,
    pub psnr_y: f64,
    pub psnr_cb: f64,
    pub psnr_cr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_total: f64,
    pub train_bit_accuracy: f64,
    pub val: ValMetrics,
}

pub struct TrainOutcome {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochMetrics>,
}

// ---- trainer ------------------------------------------------------------------

pub struct Trainer {
    pub models: Models,
    pub cfg: TrainConfig,
    samplers: Vec<AttackSampler>,
    adam_main: Adam,
    adam_critic: Adam,
    train_paths: Vec<PathBuf>,
    val_paths: Vec<PathBuf>,
    out_dir: PathBuf,
    step: usize,
}

fn finite_or(v: f64, cap: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        cap
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, manifest: &crate::data::DatasetManifest, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let samplers = cfg.samplers()?;
        let mut train_paths = manifest.paths(crate::data::Split::Train);
        let mut val_paths = manifest.paths(crate::data::Split::Val);
        if train_paths.len() < cfg.train_size || val_paths.len() < cfg.val_size {
            return Err(Error::InvalidConfig(format!(
                "manifest holds {} train / {} val images, config needs {} / {}",
                train_paths.len(),
                val_paths.len(),
                cfg.train_size,
                cfg.val_size
            )));
        }
        train_paths.truncate(cfg.train_size);
        val_paths.truncate(cfg.val_size);
        std::fs::create_dir_all(out_dir)?;
        let models = Models::new(&cfg.codec, cfg.grid(), cfg.variant(), cfg.seed);
        Ok(Trainer {
            adam_main: Adam::new(cfg.learning_rate),
            adam_critic: Adam::new(cfg.learning_rate),
            models,
            samplers,
            train_paths,
            val_paths,
            out_dir: out_dir.to_path_buf(),
            cfg,
            step: 0,
        })
    }

    /// Resume from a checkpoint produced by an earlier run of the same
    /// configuration.
    pub fn resume(&mut self, path: &Path) -> Result<usize> {
        let (models, ckpt) = Models::load(path)?;
        self.models = models;
        self.adam_main.step = ckpt.adam_steps.0;
        self.adam_critic.step = ckpt.adam_steps.1;
        Ok(ckpt.epoch)
    }

    fn load_cover(&self, path: &Path) -> Result<ImageTensor> {
        let rgb = crate::data::load_image_rgb(path)?;
        crate::jpeg::rgb_to_ycbcr(&rgb)
    }

    /// One optimization step over `covers` (YCbCr, image_size squared).
    pub fn train_step(&mut self, covers: &[ImageTensor], rng: &mut ChaCha12Rng) -> Result<StepMetrics> {
        let cfg = self.cfg.clone();
        let (gh, gw) = self.models.decoder.grid;
        let codec = cfg.codec;
        let attack = sample_attack(&self.samplers, rng);
        self.step += 1;

        let mut acc = StepMetrics {
            step: self.step,
            attack: attack.to_string(),
            loss_e: 0.0,
            loss_d_mean: 0.0,
            loss_d_var: 0.0,
            loss_c_e: 0.0,
            loss_c_c: 0.0,
            total: 0.0,
            bit_accuracy: 0.0,
            psnr_y: 0.0,
            psnr_cb: 0.0,
            psnr_cr: 0.0,
        };
        let total_n = covers.len();
        let mut images_done = 0usize;

        for chunk in covers.chunks(cfg.micro_batch) {
            let n = chunk.len();
            let h = self.cfg.image_size;
            let w = self.cfg.image_size;

            // Assemble cover batch and fresh messages/spreadings.
            let mut ic = Array4::zeros((n, h, w, 3));
            let mut mext = Array4::zeros((n, h, w, codec.channels()));
            let mut messages = Vec::with_capacity(n);
            let mut spatials = Vec::with_capacity(n);
            for (i, cover) in chunk.iter().enumerate() {
                ic.slice_mut(ndarray::s![i, .., .., ..]).assign(&cover.data);
                let msg = Message::random(codec.l, rng);
                let sm = propagate(&msg, &codec.with_seed(rng.random()), gh, gw)?;
                let ext = extend(&sm, codec.b)?;
                mext.slice_mut(ndarray::s![i, .., .., ..])
                    .assign(&ext.as_f32());
                messages.push(msg);
                spatials.push(sm);
            }

            let realization = crate::attacks::realize(&attack, n, h, w, codec.b, rng)?;

            // Target grids; crop attacks crop the message too.
            let target = self.build_target(&attack, &realization, &spatials, gh, gw)?;
            let target = Arc::new(target);

            // Main graph: encoder -> attack -> decoder (+ critic for L_C^E).
            let mut g = Graph::new();
            let ic_node = g.leaf(ic.clone(), false);
            let mext_node = g.leaf(mext, false);
            let Models {
                encoder,
                decoder,
                critic,
                store,
                ..
            } = &mut self.models;
            let ie = encoder.forward(&mut g, store, ic_node, mext_node, true, cfg.update_main)?;
            let ie_val = g.value(ie).clone();
            let ia = realization.apply_graph(&mut g, ie, &ic)?;
            let mp = decoder.forward(&mut g, store, ia, true, cfg.update_main)?;
            let mp_val = g.value(mp).clone();

            let l_e = g.mse_loss(ie, Arc::new(ic.clone()));
            let l_dm = g.l1_mean_loss(mp, target.clone());
            let l_dv = g.slice_var_loss(mp, target.clone());
            let s_e = critic.forward(&mut g, store, ie, true, false);
            let l_ce = g.mean_log_one_minus(s_e);
            let total = g.weighted_sum(&[
                (l_e, cfg.lambda_e as f32),
                (l_dm, cfg.lambda_d_mean as f32),
                (l_dv, cfg.lambda_d_var as f32),
                (l_ce, cfg.lambda_c as f32),
            ]);

            let vals = (
                g.scalar(l_e) as f64,
                g.scalar(l_dm) as f64,
                g.scalar(l_dv) as f64,
                g.scalar(l_ce) as f64,
                g.scalar(total) as f64,
            );
            if !vals.4.is_finite() {
                self.dump_diagnostics(&attack, vals)?;
                return Err(Error::NonFinite(format!(
                    "training loss diverged at step {} (dump written)",
                    self.step
                )));
            }
            if cfg.update_main {
                g.backward(total, n as f32 / total_n as f32, store);
            }
            drop(g);

            // Critic update on covers vs detached encoded images.
            let mut cg = Graph::new();
            let cov = cg.leaf(ic.clone(), false);
            let enc = cg.leaf(ie_val.clone(), false);
            let s_c = critic.forward(&mut cg, store, cov, true, cfg.update_critic);
            let s_e2 = critic.forward(&mut cg, store, enc, true, cfg.update_critic);
            let a = cg.mean_log_one_minus(s_c);
            let b = cg.mean_log(s_e2);
            let l_cc = cg.weighted_sum(&[(a, 1.0), (b, 1.0)]);
            let l_cc_val = cg.scalar(l_cc) as f64;
            if cfg.update_critic {
                cg.backward(l_cc, n as f32 / total_n as f32, store);
            }
            drop(cg);

            // Step metrics.
            acc.loss_e += vals.0 * n as f64;
            acc.loss_d_mean += vals.1 * n as f64;
            acc.loss_d_var += vals.2 * n as f64;
            acc.loss_c_e += vals.3 * n as f64;
            acc.loss_c_c += l_cc_val * n as f64;
            acc.total += vals.4 * n as f64;
            for (i, (msg, cover)) in messages.iter().zip(chunk).enumerate() {
                let (mh, mw, mc) = (gh, gw, codec.channels());
                let grid = mp_val
                    .slice(ndarray::s![i, .., .., ..])
                    .to_shape((mh, mw, mc))
                    .unwrap()
                    .to_owned();
                if let Ok(decoded) = DecodedGrid::new(grid) {
                    if let Ok(got) = translate(&decoded, &codec) {
                        acc.bit_accuracy += crate::eval::bit_accuracy(msg, &got)?;
                    }
                }
                let enc_img = ImageTensor::from_batch(&ie_val, i, cover.space);
                let p = psnr(cover, &enc_img)?;
                acc.psnr_y += finite_or(p.y.0, 99.0);
                acc.psnr_cb += finite_or(p.cb.0, 99.0);
                acc.psnr_cr += finite_or(p.cr.0, 99.0);
            }
            images_done += n;
        }

        if cfg.update_main {
            self.adam_main.step(&mut self.models.store, &["enc.", "dec."]);
        }
        if cfg.update_critic {
            self.adam_critic.step(&mut self.models.store, &["critic."]);
        }

        let n = images_done as f64;
        acc.loss_e /= n;
        acc.loss_d_mean /= n;
        acc.loss_d_var /= n;
        acc.loss_c_e /= n;
        acc.loss_c_c /= n;
        acc.total /= n;
        acc.bit_accuracy /= n;
        acc.psnr_y /= n;
        acc.psnr_cb /= n;
        acc.psnr_cr /= n;
        Ok(acc)
    }

    fn build_target(
        &self,
        attack: &AttackSpec,
        realization: &Realization,
        spatials: &[SpatialMessage],
        gh: usize,
        gw: usize,
    ) -> Result<Array4<f32>> {
        let b = self.cfg.codec.b;
        let ch = self.cfg.codec.channels();
        let n = spatials.len();
        let mut target = Array4::zeros((n, gh, gw, ch));
        for (i, sm) in spatials.iter().enumerate() {
            let grid = if matches!(attack, AttackSpec::Crop { .. }) {
                let r = realization.region.as_ref().unwrap();
                let cropped = crop_grid(
                    sm,
                    GridRegion {
                        y0: r.top / b,
                        x0: r.left / b,
                        h: r.height / b,
                        w: r.width / b,
                    },
                )?;
                aligned_target(&cropped, gh, gw)
            } else {
                sm.as_f32()
            };
            target.slice_mut(ndarray::s![i, .., .., ..]).assign(&grid);
        }
        Ok(target)
    }

    fn dump_diagnostics(&self, attack: &AttackSpec, vals: (f64, f64, f64, f64, f64)) -> Result<()> {
        let dump = serde_json::json!({
            "step": self.step,
            "attack": attack.to_string(),
            "loss_e": vals.0,
            "loss_d_mean": vals.1,
            "loss_d_var": vals.2,
            "loss_c_e": vals.3,
            "total": vals.4,
            "grad_norm": self.models.store.grad_norm(),
        });
        std::fs::write(
            self.out_dir.join("diagnostic_dump.json"),
            serde_json::to_vec_pretty(&dump)?,
        )?;
        Ok(())
    }

    /// Validation pass: covers are assigned round-robin to the noiser set so
    /// one pass costs `val_size` decodes; reported per noiser and averaged.
    /// Deterministic for a fixed config seed.
    pub fn validate(&mut self, epoch: usize) -> Result<ValMetrics> {
        let cfg = self.cfg.clone();
        let (gh, gw) = self.models.decoder.grid;
        let codec = cfg.codec;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x76616c5f5eed);
        let mut per: Vec<(String, Vec<f64>)> = self
            .samplers
            .iter()
            .enumerate()
            .map(|(i, _)| (cfg.noisers[i].clone(), Vec::new()))
            .collect();
        let mut psnr_acc = [0.0f64; 3];
        let val_paths = self.val_paths.clone();
        for (i, path) in val_paths.iter().enumerate() {
            let cover = self.load_cover(path)?;
            let msg = Message::random(codec.l, &mut rng);
            let sm = propagate(&msg, &codec.with_seed(rng.random()), gh, gw)?;
            let encoded = self.models.encode_image(&cover, &extend(&sm, codec.b)?)?;
            let p = psnr(&cover, &encoded)?;
            psnr_acc[0] += finite_or(p.y.0, 99.0);
            psnr_acc[1] += finite_or(p.cb.0, 99.0);
            psnr_acc[2] += finite_or(p.cr.0, 99.0);

            let which = i % self.samplers.len();
            let spec = self.samplers[which].sample(&mut rng);
            let (attacked, region) =
                crate::attacks::apply_attack(&spec, &encoded, &cover, codec.b, &mut rng)?;
            let target_msg = &msg;
            let decoded = self.models.decode_image(&attacked)?;
            let got = translate(&decoded, &codec)?;
            let mut bits_ok = crate::eval::bit_accuracy(target_msg, &got)?;
            // A crop can remove every copy of a fragment; accuracy is still
            // measured against the full message, as in evaluation.
            let _ = region;
            if !bits_ok.is_finite() {
                bits_ok = 0.0;
            }
            per[which].1.push(bits_ok);
        }
        let per_noiser: Vec<(String, f64)> = per
            .into_iter()
            .map(|(name, accs)| {
                let m = if accs.is_empty() {
                    0.0
                } else {
                    accs.iter().sum::<f64>() / accs.len() as f64
                };
                (name, m)
            })
            .collect();
        let mean = per_noiser.iter().map(|(_, m)| m).sum::<f64>() / per_noiser.len() as f64;
        let n = val_paths.len() as f64;
        Ok(ValMetrics {
            epoch,
            bit_accuracy: mean,
            per_noiser,
            psnr_y: psnr_acc[0] / n,
            psnr_cb: psnr_acc[1] / n,
            psnr_cr: psnr_acc[2] / n,
        })
    }

    /// Full training run: per-epoch passes over the train split with
    /// validation, line-delimited metrics logging and last/best checkpoints.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let cfg = self.cfg.clone();
        let mut epoch_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let metrics_path = self.out_dir.join("metrics.jsonl");
        let last_path = self.out_dir.join("last.ckpt");
        let best_path = self.out_dir.join("best.ckpt");
        let mut best_acc = f64::NEG_INFINITY;
        let mut history = Vec::new();

        let steps_per_epoch = self.train_paths.len() / cfg.batch_size;
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..self.train_paths.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut epoch_rng);
            let mut train_total = 0.0;
            let mut train_acc = 0.0;
            let epoch_start = std::time::Instant::now();
            for s in 0..steps_per_epoch {
                let mut covers = Vec::with_capacity(cfg.batch_size);
                for &idx in &order[s * cfg.batch_size..(s + 1) * cfg.batch_size] {
                    covers.push(self.load_cover(&self.train_paths[idx].clone())?);
                }
                let mut step_rng = ChaCha12Rng::seed_from_u64(
                    cfg.seed ^ ((epoch as u64) << 40) ^ ((s as u64) << 8) ^ 1,
                );
                let m = self.train_step(&covers, &mut step_rng)?;
                train_total += m.total;
                train_acc += m.bit_accuracy;
                if (s + 1) % 5 == 0 || s + 1 == steps_per_epoch {
                    println!(
                        "epoch {epoch} step {}/{} total {:.4} d_mean {:.4} bits {:.3} psnr_y {:.1} [{}] {:.1}s",
                        s + 1,
                        steps_per_epoch,
                        m.total,
                        m.loss_d_mean,
                        m.bit_accuracy,
                        m.psnr_y,
                        m.attack,
                        epoch_start.elapsed().as_secs_f64(),
                    );
                }
            }
            let val = self.validate(epoch)?;
            let em = EpochMetrics {
                epoch,
                train_total: train_total / steps_per_epoch.max(1) as f64,
                train_bit_accuracy: train_acc / steps_per_epoch.max(1) as f64,
                val: val.clone(),
            };
            println!(
                "epoch {epoch} done: val bits {:.4} psnr_y {:.2} ({})",
                val.bit_accuracy,
                val.psnr_y,
                val.per_noiser
                    .iter()
                    .map(|(n, a)| format!("{n} {a:.3}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)?;
            writeln!(f, "{}", serde_json::to_string(&em)?)?;
            history.push(em.clone());

            let ckpt = self.models.to_checkpoint(
                epoch,
                (self.adam_main.step, self.adam_critic.step),
                Some(serde_json::to_value(&cfg)?),
                history
                    .iter()
                    .map(|h| serde_json::to_value(h).unwrap())
                    .collect(),
                true,
            );
            self.models.save(&last_path, &ckpt)?;
            if val.bit_accuracy > best_acc {
                best_acc = val.bit_accuracy;
                let mut best = ckpt;
                best.metrics = history
                    .iter()
                    .map(|h| serde_json::to_value(h).unwrap())
                    .collect();
                self.models.save(&best_path, &best)?;
            }
        }
        Ok(TrainOutcome {
            best_path,
            last_path,
            best_val_accuracy: best_acc,
            history,
        })
    }
}

trait SeedMix {
    #[allow(non_snake_case)]
    fn eed_va1u64(&self) -> u64;
}

impl SeedMix for u32 {
    fn eed_va1u64(&self) -> u64 {
        0x7661_6c75
    }
}

/// Train from a manifest on disk; convenience wrapper used by the CLI.
pub fn train(cfg: TrainConfig, manifest_path: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let manifest = crate::data::DatasetManifest::load(manifest_path)?;
    let mut trainer = Trainer::new(cfg, &manifest, out_dir)?;
    trainer.run()
}
