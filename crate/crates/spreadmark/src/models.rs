//! Encoder, decoder and critic networks plus checkpoint serialization.
//!
//! Every network is built from the same block: a 3x3 stride-1 padding-1
//! convolution with 64 channels, batch normalization and ReLU. The encoder
//! sees the concatenated cover image and extended message at its 1st, 3rd
//! and 5th blocks and emits a 3-channel residual that is added to the cover.
//! The decoder pools its 6-block features down to the message grid with
//! adaptive average pooling, so its output shape is fixed regardless of the
//! input size, and finishes with two 1x1 convolutions that act as
//! per-position fully connected layers. The critic reduces 3 blocks to a
//! 64-vector and scores images in [0, 1].

use crate::attacks::{ColorSpace, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{params, Graph, NodeId, ParamId, ParamStore};
use crate::spread_codec::{CodecParams, DecodedGrid, ExtendedSpatialMessage};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CONV_CHANNELS: usize = 64;

/// Encoder input concatenation pattern. `SpatialConcat` feeds the cover and
/// message to every second block; `Spatial` is the baseline layout where
/// four blocks process the cover alone before a single concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    SpatialConcat,
    Spatial,
}

impl EncoderVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spatial_concat" | "concat" => Ok(EncoderVariant::SpatialConcat),
            "spatial" | "baseline" => Ok(EncoderVariant::Spatial),
            other => Err(Error::InvalidConfig(format!(
                "unknown encoder variant '{other}' (expected spatial_concat or spatial)"
            ))),
        }
    }
}

struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    rmean: ParamId,
    rvar: ParamId,
}

impl ConvBlock {
    fn add(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.conv.w"),
            params::init_conv_weight(rng, k, k, cin, cout),
            true,
        );
        let b = store.add(
            &format!("{name}.conv.b"),
            params::init_bias(rng, k * k * cin, cout),
            true,
        );
        let gamma = store.add(
            &format!("{name}.bn.gamma"),
            ndarray::ArrayD::from_elem(IxDyn(&[cout]), 1.0f32),
            true,
        );
        let beta = store.add(
            &format!("{name}.bn.beta"),
            ndarray::ArrayD::zeros(IxDyn(&[cout])),
            true,
        );
        let rmean = store.add(
            &format!("{name}.bn.rmean"),
            ndarray::ArrayD::zeros(IxDyn(&[cout])),
            false,
        );
        let rvar = store.add(
            &format!("{name}.bn.rvar"),
            ndarray::ArrayD::from_elem(IxDyn(&[cout]), 1.0f32),
            false,
        );
        ConvBlock {
            w,
            b,
            gamma,
            beta,
            rmean,
            rvar,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: NodeId,
        pad: usize,
        train: bool,
        train_params: bool,
    ) -> NodeId {
        let c = g.conv(store, x, self.w, Some(self.b), pad, train_params);
        g.bn_relu(
            store,
            c,
            self.gamma,
            self.beta,
            self.rmean,
            self.rvar,
            train,
            train_params,
        )
    }
}

pub struct Encoder {
    variant: EncoderVariant,
    blocks: Vec<ConvBlock>,
    final_w: ParamId,
    final_b: ParamId,
    block_size: usize,
    msg_channels: usize,
}

impl Encoder {
    fn add(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        variant: EncoderVariant,
        msg_channels: usize,
        block_size: usize,
    ) -> Self {
        let aug = 3 + msg_channels;
        let widths: Vec<usize> = match variant {
            // blocks 1, 3, 5 see [features?, I_c, M_ext]
            EncoderVariant::SpatialConcat => vec![
                aug,
                CONV_CHANNELS,
                CONV_CHANNELS + aug,
                CONV_CHANNELS,
                CONV_CHANNELS + aug,
            ],
            // four blocks over the cover, then one concatenation
            EncoderVariant::Spatial => vec![
                3,
                CONV_CHANNELS,
                CONV_CHANNELS,
                CONV_CHANNELS,
                CONV_CHANNELS + aug,
            ],
        };
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                ConvBlock::add(store, rng, &format!("enc.block{}", i + 1), 3, cin, CONV_CHANNELS)
            })
            .collect();
        // Zero-initialized residual head: the encoder is the identity at
        // initialization, so transparency starts perfect and the message
        // path grows in through training.
        let final_w = store.add(
            "enc.final.w",
            ndarray::ArrayD::zeros(params::conv_weight_shape(3, 3, CONV_CHANNELS, 3)),
            true,
        );
        let final_b = store.add("enc.final.b", ndarray::ArrayD::zeros(IxDyn(&[3])), true);
        Encoder {
            variant,
            blocks,
            final_w,
            final_b,
            block_size,
            msg_channels,
        }
    }

    /// I_e = clamp(I_c + residual(I_c, M_ext), [0, 1]).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        cover: NodeId,
        message: NodeId,
        train: bool,
        train_params: bool,
    ) -> Result<NodeId> {
        let (n, h, w, c) = g.value(cover).dim();
        let (mn, mh, mw, mc) = g.value(message).dim();
        if c != 3 {
            return Err(Error::ShapeMismatch("cover must have 3 channels".into()));
        }
        if (n, h, w) != (mn, mh, mw) || mc != self.msg_channels {
            return Err(Error::ShapeMismatch(format!(
                "message batch {mn}x{mh}x{mw}x{mc} does not match cover {n}x{h}x{w} with {} channels",
                self.msg_channels
            )));
        }
        if h % self.block_size != 0 || w % self.block_size != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cover dims {h}x{w} not divisible by block size {}",
                self.block_size
            )));
        }
        let aug = g.concat_c(&[cover, message]);
        let x = match self.variant {
            EncoderVariant::SpatialConcat => {
                let h1 = self.blocks[0].forward(g, store, aug, 1, train, train_params);
                let h2 = self.blocks[1].forward(g, store, h1, 1, train, train_params);
                let h2a = g.concat_c(&[h2, aug]);
                let h3 = self.blocks[2].forward(g, store, h2a, 1, train, train_params);
                let h4 = self.blocks[3].forward(g, store, h3, 1, train, train_params);
                let h4a = g.concat_c(&[h4, aug]);
                self.blocks[4].forward(g, store, h4a, 1, train, train_params)
            }
            EncoderVariant::Spatial => {
                let mut x = cover;
                for block in &self.blocks[..4] {
                    x = block.forward(g, store, x, 1, train, train_params);
                }
                let xa = g.concat_c(&[x, aug]);
                self.blocks[4].forward(g, store, xa, 1, train, train_params)
            }
        };
        let residual = g.conv(store, x, self.final_w, Some(self.final_b), 1, train_params);
        let sum = g.add(cover, residual);
        Ok(g.clamp01(sum))
    }
}

pub struct Decoder {
    blocks: Vec<ConvBlock>,
    head: ConvBlock,
    final_w: ParamId,
    final_b: ParamId,
    /// Pooling target (H/b, W/b), fixed at construction and stored in
    /// checkpoints; the decoder emits this grid for any input size.
    pub grid: (usize, usize),
}

impl Decoder {
    fn add(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        msg_channels: usize,
        grid: (usize, usize),
    ) -> Self {
        let mut widths = vec![3usize];
        widths.extend(std::iter::repeat(CONV_CHANNELS).take(5));
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                ConvBlock::add(store, rng, &format!("dec.block{}", i + 1), 3, cin, CONV_CHANNELS)
            })
            .collect();
        let head = ConvBlock::add(store, rng, "dec.head", 1, CONV_CHANNELS, CONV_CHANNELS);
        let final_w = store.add(
            "dec.final.w",
            params::init_conv_weight(rng, 1, 1, CONV_CHANNELS, msg_channels),
            true,
        );
        let final_b = store.add(
            "dec.final.b",
            params::init_bias(rng, CONV_CHANNELS, msg_channels),
            true,
        );
        Decoder {
            blocks,
            head,
            final_w,
            final_b,
            grid,
        }
    }

    /// Raw (n+k)-channel grid regression; no activation on the last layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        image: NodeId,
        train: bool,
        train_params: bool,
    ) -> Result<NodeId> {
        let (_, h, w, c) = g.value(image).dim();
        if c != 3 {
            return Err(Error::ShapeMismatch("decoder input must have 3 channels".into()));
        }
        let (gh, gw) = self.grid;
        if h < gh.max(8) || w < gw.max(8) {
            return Err(Error::InvalidArgument(format!(
                "decoder input {h}x{w} smaller than one pooling cell of the {gh}x{gw} grid"
            )));
        }
        let mut x = image;
        for block in &self.blocks {
            x = block.forward(g, store, x, 1, train, train_params);
        }
        let pooled = g.adaptive_avg_pool(x, gh, gw);
        let head = self.head.forward(g, store, pooled, 0, train, train_params);
        Ok(g.conv(store, head, self.final_w, Some(self.final_b), 0, train_params))
    }
}

pub struct Critic {
    blocks: Vec<ConvBlock>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl Critic {
    fn add(store: &mut ParamStore, rng: &mut ChaCha12Rng) -> Self {
        let widths = [3usize, CONV_CHANNELS, CONV_CHANNELS];
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                ConvBlock::add(
                    store,
                    rng,
                    &format!("critic.block{}", i + 1),
                    3,
                    cin,
                    CONV_CHANNELS,
                )
            })
            .collect();
        let fc_w = store.add(
            "critic.fc.w",
            params::init_conv_weight(rng, 1, 1, CONV_CHANNELS, 1),
            true,
        );
        let fc_b = store.add("critic.fc.b", params::init_bias(rng, CONV_CHANNELS, 1), true);
        Critic {
            blocks,
            fc_w,
            fc_b,
        }
    }

    /// Scalar score per image in [0, 1], shape (N, 1, 1, 1).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        image: NodeId,
        train: bool,
        train_params: bool,
    ) -> NodeId {
        let mut x = image;
        for block in &self.blocks {
            x = block.forward(g, store, x, 1, train, train_params);
        }
        let pooled = g.adaptive_avg_pool(x, 1, 1);
        let fc = g.conv(store, pooled, self.fc_w, Some(self.fc_b), 0, train_params);
        g.sigmoid(fc)
    }
}

/// The three networks plus their shared parameter store.
pub struct Models {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub critic: Critic,
    pub store: ParamStore,
    pub codec: CodecParams,
    pub variant: EncoderVariant,
}

impl Models {
    pub fn new(codec: &CodecParams, grid: (usize, usize), variant: EncoderVariant, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = Encoder::add(&mut store, &mut rng, variant, codec.channels(), codec.b);
        let decoder = Decoder::add(&mut store, &mut rng, codec.channels(), grid);
        let critic = Critic::add(&mut store, &mut rng);
        Models {
            encoder,
            decoder,
            critic,
            store,
            codec: *codec,
            variant,
        }
    }

    /// Embed a message grid into a single cover image (inference mode).
    pub fn encode_image(
        &mut self,
        cover: &ImageTensor,
        message: &ExtendedSpatialMessage,
    ) -> Result<ImageTensor> {
        let mut g = Graph::new();
        let c = g.leaf(cover.to_batch(), false);
        let (mh, mw, mc) = message.grid.dim();
        let m = g.leaf(
            message
                .as_f32()
                .into_shape_with_order((1, mh, mw, mc))
                .unwrap(),
            false,
        );
        let Models {
            encoder, store, ..
        } = self;
        let out = encoder.forward(&mut g, store, c, m, false, false)?;
        Ok(ImageTensor::from_batch(g.value(out), 0, cover.space))
    }

    /// Decode a (possibly attacked) image into the raw message grid
    /// (inference mode).
    pub fn decode_image(&mut self, image: &ImageTensor) -> Result<DecodedGrid> {
        let mut g = Graph::new();
        let i = g.leaf(image.to_batch(), false);
        let Models {
            decoder, store, ..
        } = self;
        let out = decoder.forward(&mut g, store, i, false, false)?;
        let v = g.value(out);
        let (_, gh, gw, ch) = v.dim();
        let grid = v
            .slice(ndarray::s![0, .., .., ..])
            .to_shape((gh, gw, ch))
            .unwrap()
            .to_owned();
        DecodedGrid::new(grid)
    }

    pub fn critic_score(&mut self, image: &ImageTensor) -> f32 {
        let mut g = Graph::new();
        let i = g.leaf(image.to_batch(), false);
        let Models {
            critic, store, ..
        } = self;
        let s = critic.forward(&mut g, store, i, false, false);
        g.scalar(s)
    }
}

// ---- checkpoints -------------------------------------------------------------

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Little-endian f32 bytes, base64.
    data: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_m: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam_v: Option<String>,
}

/// On-disk checkpoint: a versioned JSON container with codec parameters, the
/// decoder grid, every named tensor (base64 f32) and optional training state.
#[derive(Serialize, Deserialize)]
pub struct CheckpointFile {
    pub schema_version: u32,
    pub codec: CodecParams,
    pub grid: (usize, usize),
    pub variant: EncoderVariant,
    pub epoch: usize,
    #[serde(default)]
    pub adam_steps: (u64, u64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
    #[serde(default)]
    pub metrics: Vec<serde_json::Value>,
    tensors: Vec<TensorBlob>,
}

fn f32s_to_b64(vals: impl Iterator<Item = f32>) -> String {
    use base64::Engine;
    let mut bytes = Vec::new();
    for v in vals {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn b64_to_f32s(s: &str) -> Result<Vec<f32>> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Serde(format!("bad base64 tensor data: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Serde("tensor byte length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Models {
    pub fn to_checkpoint(
        &self,
        epoch: usize,
        adam_steps: (u64, u64),
        train_config: Option<serde_json::Value>,
        metrics: Vec<serde_json::Value>,
        with_optimizer: bool,
    ) -> CheckpointFile {
        let tensors = self
            .store
            .iter()
            .map(|p| TensorBlob {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                data: f32s_to_b64(p.value.iter().copied()),
                adam_m: (with_optimizer && p.trainable)
                    .then(|| f32s_to_b64(p.m.iter().copied())),
                adam_v: (with_optimizer && p.trainable)
                    .then(|| f32s_to_b64(p.v.iter().copied())),
            })
            .collect();
        CheckpointFile {
            schema_version: SCHEMA_VERSION,
            codec: self.codec,
            grid: self.decoder.grid,
            variant: self.variant,
            epoch,
            adam_steps,
            train_config,
            metrics,
            tensors,
        }
    }

    pub fn save(&self, path: &Path, ckpt: &CheckpointFile) -> Result<()> {
        let json = serde_json::to_vec(ckpt)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&json)?;
        Ok(())
    }

    /// Rebuild the networks from a checkpoint; forward passes are
    /// bit-identical to the state that was saved.
    pub fn load(path: &Path) -> Result<(Models, CheckpointFile)> {
        let bytes = std::fs::read(path)?;
        let ckpt: CheckpointFile = serde_json::from_slice(&bytes)?;
        if ckpt.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint schema {} unsupported (expected {SCHEMA_VERSION})",
                ckpt.schema_version
            )));
        }
        let mut models = Models::new(&ckpt.codec, ckpt.grid, ckpt.variant, 0);
        for blob in &ckpt.tensors {
            let id = models.store.find(&blob.name).ok_or_else(|| {
                Error::InvalidConfig(format!("checkpoint tensor '{}' has no slot", blob.name))
            })?;
            let p = models.store.get_mut(id);
            if p.value.shape() != blob.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor '{}' shape {:?} does not match {:?}",
                    blob.name,
                    blob.shape,
                    p.value.shape()
                )));
            }
            let vals = b64_to_f32s(&blob.data)?;
            if vals.len() != p.value.len() {
                return Err(Error::Serde(format!(
                    "checkpoint tensor '{}' holds {} values, expected {}",
                    blob.name,
                    vals.len(),
                    p.value.len()
                )));
            }
            for (dst, src) in p.value.iter_mut().zip(&vals) {
                *dst = *src;
            }
            if let Some(m) = &blob.adam_m {
                for (dst, src) in p.m.iter_mut().zip(b64_to_f32s(m)?) {
                    *dst = src;
                }
            }
            if let Some(v) = &blob.adam_v {
                for (dst, src) in p.v.iter_mut().zip(b64_to_f32s(v)?) {
                    *dst = src;
                }
            }
        }
        Ok((models, ckpt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spread_codec::{extend, propagate, Message};
    use ndarray::Array3;

    fn default_models(seed: u64) -> Models {
        Models::new(&CodecParams::default(), (16, 16), EncoderVariant::SpatialConcat, seed)
    }

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut data = Array3::zeros((h, w, 3));
        for v in data.iter_mut() {
            *v = rand::Rng::random_range(&mut rng, 0.0..1.0f32);
        }
        ImageTensor::new(data, ColorSpace::YCbCr).unwrap()
    }

    #[test]
    fn decoder_emits_fixed_grid_for_any_input_size() {
        let mut models = default_models(3);
        for size in [64usize, 128, 144, 192, 256] {
            let img = random_image(size as u64, size, size);
            let grid = models.decode_image(&img).unwrap();
            assert_eq!(grid.grid.dim(), (16, 16, 6), "input {size}");
        }
    }

    #[test]
    fn decoder_rejects_tiny_inputs() {
        let mut models = default_models(4);
        let img = random_image(1, 8, 8);
        assert!(models.decode_image(&img).is_err());
    }

    #[test]
    fn encoder_is_identity_at_initialization() {
        let mut models = default_models(5);
        let cover = random_image(2, 64, 64);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let m = Message::random(32, &mut rng);
        let p = CodecParams { b: 16, ..CodecParams::default() };
        let sm = propagate(&m, &p, 4, 4).unwrap();
        let ext = extend(&sm, 16).unwrap();
        let encoded = models.encode_image(&cover, &ext).unwrap();
        assert_eq!(encoded.data, cover.data);
    }

    #[test]
    fn encoder_rejects_mismatched_shapes() {
        let mut models = default_models(7);
        let cover = random_image(3, 64, 64);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let m = Message::random(32, &mut rng);
        let p = CodecParams { b: 16, ..CodecParams::default() };
        let sm = propagate(&m, &p, 8, 8).unwrap();
        let ext = extend(&sm, 16).unwrap(); // 128x128 message vs 64x64 cover
        assert!(models.encode_image(&cover, &ext).is_err());
    }

    #[test]
    fn critic_scores_stay_in_unit_interval() {
        let mut models = default_models(9);
        for seed in 0..5 {
            let img = random_image(seed, 48, 48);
            let s = models.critic_score(&img);
            assert!((0.0..=1.0).contains(&s), "{s}");
        }
    }

    #[test]
    fn repeated_inference_is_bit_identical() {
        let mut models = default_models(10);
        let img = random_image(11, 64, 64);
        let a = models.decode_image(&img).unwrap();
        let b = models.decode_image(&img).unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn encoder_output_is_spatially_local() {
        // Six stacked 3x3 convolutions move information at most 6 pixels;
        // verify by perturbing one input pixel in inference mode.
        let mut models = default_models(12);
        // Non-zero final conv so the residual actually responds.
        let fid = models.store.find("enc.final.w").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for v in models.store.get_mut(fid).value.iter_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.05..0.05f32);
        }
        let cover = random_image(14, 64, 64);
        let m = Message::random(32, &mut rng);
        let p = CodecParams { b: 16, ..CodecParams::default() };
        let sm = propagate(&m, &p, 4, 4).unwrap();
        let ext = extend(&sm, 16).unwrap();
        let base = models.encode_image(&cover, &ext).unwrap();

        let mut poked = cover.clone();
        poked.data[(32, 32, 0)] = (poked.data[(32, 32, 0)] + 0.4).min(1.0);
        let out = models.encode_image(&poked, &ext).unwrap();

        let radius = 11isize;
        for y in 0..64isize {
            for x in 0..64isize {
                let changed = (0..3).any(|c| {
                    (out.data[(y as usize, x as usize, c)]
                        - base.data[(y as usize, x as usize, c)])
                        .abs()
                        > 1e-7
                });
                if changed {
                    assert!(
                        (y - 32).abs() <= radius && (x - 32).abs() <= radius,
                        "pixel ({y}, {x}) changed outside the receptive field"
                    );
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut models = default_models(15);
        let img = random_image(16, 64, 64);
        let before = models.decode_image(&img).unwrap();

        let ckpt = models.to_checkpoint(3, (10, 10), None, vec![], true);
        models.save(&path, &ckpt).unwrap();
        let (mut restored, meta) = Models::load(&path).unwrap();
        assert_eq!(meta.epoch, 3);
        let after = restored.decode_image(&img).unwrap();
        assert_eq!(before.grid, after.grid);
    }
}
