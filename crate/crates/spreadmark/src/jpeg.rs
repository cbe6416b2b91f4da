//! Differentiable JPEG approximation and the bit-exact real codec.
//!
//! The approximation follows the standard pipeline — YCbCr conversion, 4:2:0
//! chroma subsampling, blockwise 8x8 DCT, quality-scaled quantization — but
//! replaces the rounding of quantized coefficients with a stochastic
//! surrogate: coefficients inside the dead zone |c/Q| <= 1/2 collapse to
//! exactly zero, everything else passes through with Gaussian noise added.
//! The real codec is used for evaluation only.

use crate::attacks::{ColorSpace, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

/// Base luminance quantization table (quality 50).
pub const BASE_LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Base chrominance quantization table (quality 50).
pub const BASE_CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Luma and chroma divisor tables scaled to a quality factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizationTable {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
    pub quality: u8,
}

/// Scale the base tables to quality `q` with the standard formula:
/// S = 5000/q for q < 50 else 200 - 2q; entry' = clamp((S*entry + 50)/100, 1, 255).
pub fn scale_qtable(q: u32) -> Result<QuantizationTable> {
    if !(1..=100).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "jpeg quality {q} outside [1, 100]"
        )));
    }
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scale_one = |e: u16| -> u16 {
        let v = (s * e as u32 + 50) / 100;
        v.clamp(1, 255) as u16
    };
    let mut luma = [0u16; 64];
    let mut chroma = [0u16; 64];
    for i in 0..64 {
        luma[i] = scale_one(BASE_LUMA_QTABLE[i]);
        chroma[i] = scale_one(BASE_CHROMA_QTABLE[i]);
    }
    Ok(QuantizationTable {
        luma,
        chroma,
        quality: q as u8,
    })
}

// ---- 8x8 orthonormal DCT-II ----------------------------------------------

fn dct_basis() -> &'static [[f64; 8]; 8] {
    use std::sync::OnceLock;
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0f64; 8]; 8];
        for (i, row) in c.iter_mut().enumerate() {
            let norm = if i == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (j, v) in row.iter_mut().enumerate() {
                *v = norm * (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * i as f64 / 16.0).cos();
            }
        }
        c
    })
}

/// In-place 2-D orthonormal DCT-II of a row-major 8x8 block: Y = C X C^T.
pub fn dct8x8_in_place(block: &mut [f64; 64]) {
    let c = dct_basis();
    let mut tmp = [0.0f64; 64];
    // tmp = C * X
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += c[i][k] * block[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    // block = tmp * C^T
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i * 8 + k] * c[j][k];
            }
            block[i * 8 + j] = acc;
        }
    }
}

/// In-place inverse of [`dct8x8_in_place`]: X = C^T Y C.
pub fn idct8x8_in_place(block: &mut [f64; 64]) {
    let c = dct_basis();
    let mut tmp = [0.0f64; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += c[k][i] * block[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i * 8 + k] * c[k][j];
            }
            block[i * 8 + j] = acc;
        }
    }
}

/// 8x8 DCT coefficient blocks of one channel plus the geometry needed to
/// invert the tiling.
pub struct DctBlockSet {
    pub blocks: Vec<[f64; 64]>,
    /// Block grid dims (rows, cols).
    pub grid: (usize, usize),
    /// Original (unpadded) channel dims.
    pub orig: (usize, usize),
}

/// Split a level-shifted channel into 8x8 blocks and transform each one.
/// Channels whose dims are not multiples of 8 are edge-padded first.
pub fn blockwise_dct(channel: &Array2<f64>) -> DctBlockSet {
    let (h, w) = channel.dim();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let grid = (ph / 8, pw / 8);
    let mut blocks = Vec::with_capacity(grid.0 * grid.1);
    for by in 0..grid.0 {
        for bx in 0..grid.1 {
            let mut block = [0.0f64; 64];
            for i in 0..8 {
                let sy = (by * 8 + i).min(h - 1);
                for j in 0..8 {
                    let sx = (bx * 8 + j).min(w - 1);
                    block[i * 8 + j] = channel[(sy, sx)];
                }
            }
            dct8x8_in_place(&mut block);
            blocks.push(block);
        }
    }
    DctBlockSet {
        blocks,
        grid,
        orig: (h, w),
    }
}

/// Inverse-transform a block set back into a channel, dropping any padding.
pub fn blockwise_idct(set: &DctBlockSet) -> Array2<f64> {
    let (h, w) = set.orig;
    let mut out = Array2::zeros((h, w));
    for (bi, block) in set.blocks.iter().enumerate() {
        let by = bi / set.grid.1;
        let bx = bi % set.grid.1;
        let mut b = *block;
        idct8x8_in_place(&mut b);
        for i in 0..8 {
            let y = by * 8 + i;
            if y >= h {
                continue;
            }
            for j in 0..8 {
                let x = bx * 8 + j;
                if x >= w {
                    continue;
                }
                out[(y, x)] = b[i * 8 + j];
            }
        }
    }
    out
}

// ---- rounding surrogate ----------------------------------------------------

/// Stochastic rounding surrogate for one coefficient. Returns the value in
/// quantized units: 0 inside the dead zone, `coeff/q + delta*q` outside with
/// `delta ~ N(0, sigma^2)`.
pub fn approx_quantize(coeff: f64, q_entry: f64, sigma: f64, rng: &mut ChaCha12Rng) -> f64 {
    let t = coeff / q_entry;
    if (-0.5..=0.5).contains(&t) {
        0.0
    } else {
        let delta = if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            0.0
        };
        t + delta * q_entry
    }
}

/// Gradient of the surrogate w.r.t. the coefficient: 0 inside the dead zone,
/// 1/q outside (the noise term is treated as constant).
pub fn approx_quantize_grad(coeff: f64, q_entry: f64) -> f64 {
    let t = coeff / q_entry;
    if (-0.5..=0.5).contains(&t) {
        0.0
    } else {
        1.0 / q_entry
    }
}

// ---- color conversion ------------------------------------------------------

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// Full-range BT.601 RGB -> YCbCr on values in [0, 1]; Cb/Cr carry a 0.5
/// offset so every channel stays in [0, 1].
pub fn rgb_px_to_ycbcr(px: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = px;
    let y = KR * r + KG * g + KB * b;
    let cb = (b - y) / (2.0 * (1.0 - KB)) + 0.5;
    let cr = (r - y) / (2.0 * (1.0 - KR)) + 0.5;
    [y, cb, cr]
}

pub fn ycbcr_px_to_rgb(px: [f64; 3]) -> [f64; 3] {
    let [y, cb, cr] = px;
    let r = y + 2.0 * (1.0 - KR) * (cr - 0.5);
    let b = y + 2.0 * (1.0 - KB) * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    if img.space != ColorSpace::Rgb {
        return Err(Error::InvalidArgument(
            "rgb_to_ycbcr expects an RGB image".into(),
        ));
    }
    Ok(ImageTensor {
        data: convert_channels(&img.data, rgb_px_to_ycbcr),
        space: ColorSpace::YCbCr,
    })
}

pub fn ycbcr_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    if img.space != ColorSpace::YCbCr {
        return Err(Error::InvalidArgument(
            "ycbcr_to_rgb expects a YCbCr image".into(),
        ));
    }
    Ok(ImageTensor {
        data: convert_channels(&img.data, ycbcr_px_to_rgb),
        space: ColorSpace::Rgb,
    })
}

fn convert_channels(
    data: &ndarray::Array3<f32>,
    f: impl Fn([f64; 3]) -> [f64; 3],
) -> ndarray::Array3<f32> {
    let (h, w, _) = data.dim();
    let mut out = data.clone();
    for y in 0..h {
        for x in 0..w {
            let px = f([
                data[(y, x, 0)] as f64,
                data[(y, x, 1)] as f64,
                data[(y, x, 2)] as f64,
            ]);
            for c in 0..3 {
                out[(y, x, c)] = px[c] as f32;
            }
        }
    }
    out
}

// ---- approximate codec (native path) ---------------------------------------

fn tile_table(qt: &[u16; 64], h: usize, w: usize) -> Array2<f32> {
    let mut t = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            t[(y, x)] = qt[(y % 8) * 8 + (x % 8)] as f32;
        }
    }
    t
}

fn down2x2(ch: &Array2<f64>) -> Array2<f64> {
    let (h, w) = ch.dim();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    acc += ch[((2 * y + dy).min(h - 1), (2 * x + dx).min(w - 1))];
                }
            }
            out[(y, x)] = acc / 4.0;
        }
    }
    out
}

fn up2x_nearest(ch: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] = ch[(y / 2, x / 2)];
        }
    }
    out
}

fn approx_channel(
    ch: &Array2<f64>,
    qt: &[u16; 64],
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Array2<f64> {
    let shifted = ch.mapv(|v| v * 255.0 - 128.0);
    let mut set = blockwise_dct(&shifted);
    for block in &mut set.blocks {
        for (i, coeff) in block.iter_mut().enumerate() {
            let q = qt[i] as f64;
            let rounded = approx_quantize(*coeff, q, sigma, rng);
            *coeff = rounded * q;
        }
    }
    let back = blockwise_idct(&set);
    back.mapv(|v| (v + 128.0) / 255.0)
}

/// The differentiable JPEG approximation evaluated natively (no gradients).
/// Accepts either color space; the pipeline itself runs in YCbCr and the
/// result is returned in the input's space, clamped to [0, 1].
pub fn jpeg_approx(
    img: &ImageTensor,
    q: u32,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ImageTensor> {
    let qt = scale_qtable(q)?;
    let was_rgb = img.space == ColorSpace::Rgb;
    let ycc = if was_rgb { rgb_to_ycbcr(img)? } else { img.clone() };
    let (h, w, _) = ycc.data.dim();

    let channel = |c: usize| -> Array2<f64> {
        let mut ch = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                ch[(y, x)] = ycc.data[(y, x, c)] as f64;
            }
        }
        ch
    };

    let ych = approx_channel(&channel(0), &qt.luma, sigma, rng);
    let cb = up2x_nearest(
        &approx_channel(&down2x2(&channel(1)), &qt.chroma, sigma, rng),
        h,
        w,
    );
    let cr = up2x_nearest(
        &approx_channel(&down2x2(&channel(2)), &qt.chroma, sigma, rng),
        h,
        w,
    );

    let mut data = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            data[(y, x, 0)] = ych[(y, x)] as f32;
            data[(y, x, 1)] = cb[(y, x)] as f32;
            data[(y, x, 2)] = cr[(y, x)] as f32;
        }
    }
    let mut out = ImageTensor {
        data,
        space: ColorSpace::YCbCr,
    };
    if was_rgb {
        out = ycbcr_to_rgb(&out)?;
    }
    out.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

// ---- approximate codec (training graph path) --------------------------------

/// Append the JPEG approximation to a graph. `input` must be a YCbCr batch
/// (N, H, W, 3); the output has the same shape and is clamped to [0, 1].
pub fn build_jpeg_approx_graph(
    g: &mut Graph,
    input: NodeId,
    q: u32,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<NodeId> {
    let qt = scale_qtable(q)?;
    let (_, h, w, c) = g.value(input).dim();
    if c != 3 {
        return Err(Error::ShapeMismatch("jpeg approximation expects 3 channels".into()));
    }

    let y = g.slice_c(input, 0, 1);
    let y = approx_channel_graph(g, y, &qt.luma, sigma, rng);
    let mut chroma_nodes = Vec::new();
    for ci in 1..3 {
        let ch = g.slice_c(input, ci, 1);
        let half = g.resample(ch, Arc::new(down2x2_taps(h, w)));
        let done = approx_channel_graph(g, half, &qt.chroma, sigma, rng);
        let up = g.resample(done, Arc::new(up2x_nearest_taps(h.div_ceil(2), w.div_ceil(2), h, w)));
        chroma_nodes.push(up);
    }
    let merged = g.concat_c(&[y, chroma_nodes[0], chroma_nodes[1]]);
    Ok(g.clamp01(merged))
}

fn approx_channel_graph(
    g: &mut Graph,
    input: NodeId,
    qt: &[u16; 64],
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> NodeId {
    let (_, h, w, _) = g.value(input).dim();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut x = g.affine(input, 255.0, -128.0);
    if ph != h || pw != w {
        x = g.pad_replicate(x, ph - h, pw - w);
    }
    let coeffs = g.dct8x8(x, false);
    let table = Arc::new(tile_table(qt, ph, pw));
    let quantized = g.scale_table(coeffs, table.clone(), true);

    // Dead-zone mask and pre-scaled noise, sampled per coefficient.
    let qv = g.value(quantized);
    let dim = qv.dim();
    let mut keep = Array4::zeros(dim);
    let mut noise = Array4::zeros(dim);
    let normal = Normal::new(0.0f64, sigma.max(0.0)).ok();
    for ((n_i, y_i, x_i, c_i), k) in keep.indexed_iter_mut() {
        let t = qv[(n_i, y_i, x_i, c_i)];
        if !(-0.5..=0.5).contains(&t) {
            *k = 1.0;
            if sigma > 0.0 {
                let delta = normal.as_ref().unwrap().sample(rng);
                noise[(n_i, y_i, x_i, c_i)] =
                    (delta * table[(y_i, x_i)] as f64) as f32;
            }
        }
    }
    let rounded = g.dead_zone(quantized, keep, &noise);
    let dequant = g.scale_table(rounded, table, false);
    let back = g.dct8x8(dequant, true);
    let back = if ph != h || pw != w {
        g.crop_spatial(back, 0, 0, h, w)
    } else {
        back
    };
    g.affine(back, 1.0 / 255.0, 128.0 / 255.0)
}

/// Resampling plan for the 2x2 block-mean downsample (edge-replicated when
/// dims are odd).
pub fn down2x2_taps(h: usize, w: usize) -> crate::nn::ResampleTaps {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut offsets = Vec::with_capacity(oh * ow + 1);
    let mut src = Vec::with_capacity(oh * ow * 4);
    let mut weight = Vec::with_capacity(oh * ow * 4);
    offsets.push(0u32);
    for y in 0..oh {
        for x in 0..ow {
            for dy in 0..2 {
                for dx in 0..2 {
                    let sy = (2 * y + dy).min(h - 1);
                    let sx = (2 * x + dx).min(w - 1);
                    src.push((sy * w + sx) as u32);
                    weight.push(0.25);
                }
            }
            offsets.push(src.len() as u32);
        }
    }
    crate::nn::ResampleTaps {
        in_h: h,
        in_w: w,
        out_h: oh,
        out_w: ow,
        offsets,
        src,
        weight,
    }
}

/// Nearest-neighbour 2x upsample back to (out_h, out_w).
pub fn up2x_nearest_taps(h: usize, w: usize, out_h: usize, out_w: usize) -> crate::nn::ResampleTaps {
    let mut offsets = Vec::with_capacity(out_h * out_w + 1);
    let mut src = Vec::with_capacity(out_h * out_w);
    let mut weight = Vec::with_capacity(out_h * out_w);
    offsets.push(0u32);
    for y in 0..out_h {
        for x in 0..out_w {
            src.push(((y / 2).min(h - 1) * w + (x / 2).min(w - 1)) as u32);
            weight.push(1.0);
            offsets.push(src.len() as u32);
        }
    }
    crate::nn::ResampleTaps {
        in_h: h,
        in_w: w,
        out_h,
        out_w,
        offsets,
        src,
        weight,
    }
}

// ---- real codec -------------------------------------------------------------

/// Encode-decode through a real baseline JPEG codec with 4:2:0 subsampling.
/// Evaluation only; this path has no gradient.
pub fn jpeg_real(img: &ImageTensor, q: u32) -> Result<ImageTensor> {
    if !(1..=100).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "jpeg quality {q} outside [1, 100]"
        )));
    }
    let was_ycc = img.space == ColorSpace::YCbCr;
    let rgb = if was_ycc { ycbcr_to_rgb(img)? } else { img.clone() };
    let (h, w, _) = rgb.data.dim();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((rgb.data[(y, x, c)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut buf = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut buf, q as u8);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    enc.encode(&bytes, w as u16, h as u16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;

    let decoded = image::load_from_memory(&buf)?.to_rgb8();
    let mut data = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let px = decoded.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(y, x, c)] = px.0[c] as f32 / 255.0;
            }
        }
    }
    let mut out = ImageTensor {
        data,
        space: ColorSpace::Rgb,
    };
    if was_ycc {
        out = rgb_to_ycbcr(&out)?;
        out.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}
