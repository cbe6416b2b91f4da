//! Parameterized, differentiable image distortions.
//!
//! Attacks are described by an [`AttackSpec`], realized into concrete
//! geometry/noise ([`Realization`]) and then applied either inside a training
//! graph (differentiable w.r.t. the encoded image wherever they read it) or
//! natively for evaluation. The real JPEG codec is evaluation-only and
//! refuses to enter a gradient path.

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ResampleTaps};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Color space tag carried by every image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// H x W x 3 real-valued image with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub space: ColorSpace,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>, space: ColorSpace) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image tensor must be HxWx3 with H,W >= 1, got {h}x{w}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tensor holds non-finite values".into()));
        }
        Ok(ImageTensor { data, space })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Lift into a single-image NHWC batch.
    pub fn to_batch(&self) -> Array4<f32> {
        let (h, w, c) = self.data.dim();
        self.data
            .to_shape((1, h, w, c))
            .unwrap()
            .to_owned()
    }

    pub fn from_batch(batch: &Array4<f32>, idx: usize, space: ColorSpace) -> Self {
        let (_, h, w, c) = batch.dim();
        let data = batch
            .slice(ndarray::s![idx, .., .., ..])
            .to_shape((h, w, c))
            .unwrap()
            .to_owned();
        ImageTensor { data, space }
    }
}

/// Interpolation used by the resize attack. Training uses bilinear; Table-2
/// style evaluation rows use nearest and Lanczos (a = 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMode {
    Nearest,
    Lanczos,
    Bilinear,
}

impl ResizeMode {
    fn letter(&self) -> &'static str {
        match self {
            ResizeMode::Nearest => "N",
            ResizeMode::Lanczos => "L",
            ResizeMode::Bilinear => "B",
        }
    }
}

/// A fully parameterized attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttackSpec {
    Identity,
    /// Keep a random square of area ratio `p`, discard the rest.
    Crop { p: f64 },
    /// Keep a random square of area ratio `p` from the encoded image,
    /// replace the remainder with cover pixels.
    Cropout { p: f64 },
    /// Keep each pixel from the encoded image with probability `p`,
    /// otherwise take the cover pixel.
    Dropout { p: f64 },
    /// Rotate by `alpha` degrees about the center, bilinear resampling,
    /// edge-replicated fill, same canvas.
    Rotate { alpha: f64 },
    /// Gaussian smoothing with kernel half-width `width` (kernel size
    /// 2*width+1, standard deviation width/2), reflect padding.
    Gaussian { width: u32 },
    /// 4:2:0 chroma subsampling: Cb/Cr replaced by 2x2 block means and
    /// upsampled back by nearest-neighbour duplication.
    Subsample420,
    /// Scale both spatial dims by `s`.
    Resize { s: f64, mode: ResizeMode },
    /// Differentiable JPEG approximation at quality `q` with rounding noise
    /// `sigma`.
    JpegApprox { q: u32, sigma: f64 },
    /// Real JPEG encode-decode round trip. Evaluation only.
    JpegReal { q: u32 },
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            AttackSpec::Crop { p } | AttackSpec::Cropout { p } | AttackSpec::Dropout { p } => {
                if !(p > 0.0 && p <= 1.0) {
                    return bad(format!("ratio p={p} outside (0, 1]"));
                }
            }
            AttackSpec::Rotate { alpha } => {
                if !alpha.is_finite() || alpha.abs() > 180.0 {
                    return bad(format!("rotation alpha={alpha} outside [-180, 180]"));
                }
            }
            AttackSpec::Gaussian { width } => {
                if width == 0 {
                    return bad("gaussian width must be >= 1".into());
                }
            }
            AttackSpec::Resize { s, .. } => {
                if !(s > 0.0 && s <= 4.0) {
                    return bad(format!("resize scale s={s} outside (0, 4]"));
                }
            }
            AttackSpec::JpegApprox { q, sigma } => {
                if !(1..=100).contains(&q) {
                    return bad(format!("jpeg quality q={q} outside [1, 100]"));
                }
                if sigma < 0.0 {
                    return bad(format!("jpeg sigma={sigma} negative"));
                }
            }
            AttackSpec::JpegReal { q } => {
                if !(1..=100).contains(&q) {
                    return bad(format!("jpeg quality q={q} outside [1, 100]"));
                }
            }
            AttackSpec::Identity | AttackSpec::Subsample420 => {}
        }
        Ok(())
    }

    /// Parse a fixed attack from the `name(param=value,...)` grammar.
    pub fn parse(s: &str) -> Result<AttackSpec> {
        let sampler = AttackSampler::parse(s)?;
        sampler.as_fixed().ok_or_else(|| {
            Error::Parse(format!(
                "'{s}' holds a parameter range; ranges are only valid in training noiser sets"
            ))
        })
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackSpec::Identity => write!(f, "identity"),
            AttackSpec::Crop { p } => write!(f, "crop(p={})", trim(*p)),
            AttackSpec::Cropout { p } => write!(f, "cropout(p={})", trim(*p)),
            AttackSpec::Dropout { p } => write!(f, "dropout(p={})", trim(*p)),
            AttackSpec::Rotate { alpha } => write!(f, "rotate(alpha={})", trim(*alpha)),
            AttackSpec::Gaussian { width } => write!(f, "gaussian(w={width})"),
            AttackSpec::Subsample420 => write!(f, "subsample420"),
            AttackSpec::Resize { s, mode } => {
                write!(f, "resize(s={},m={})", trim(*s), mode.letter())
            }
            AttackSpec::JpegApprox { q, sigma } => {
                write!(f, "jpeg_approx(q={q},sigma={})", trim(*sigma))
            }
            AttackSpec::JpegReal { q } => write!(f, "jpeg(q={q})"),
        }
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v}");
    s
}

/// A parameter that may be fixed, a uniform range `a..b` or a choice set
/// `a|b|c`.
#[derive(Debug, Clone, PartialEq)]
pub enum PValue {
    Fixed(f64),
    Range(f64, f64),
    Choice(Vec<f64>),
}

impl PValue {
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            PValue::Fixed(v) => *v,
            PValue::Range(a, b) => rng.random_range(*a..*b),
            PValue::Choice(vs) => vs[rng.random_range(0..vs.len())],
        }
    }

    fn fixed(&self) -> Option<f64> {
        match self {
            PValue::Fixed(v) => Some(*v),
            _ => None,
        }
    }

    fn parse(s: &str) -> Result<PValue> {
        let parse_f = |t: &str| -> Result<f64> {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("'{t}' is not a number")))
        };
        if let Some((a, b)) = s.split_once("..") {
            Ok(PValue::Range(parse_f(a)?, parse_f(b)?))
        } else if s.contains('|') {
            let vs = s.split('|').map(parse_f).collect::<Result<Vec<_>>>()?;
            Ok(PValue::Choice(vs))
        } else {
            Ok(PValue::Fixed(parse_f(s)?))
        }
    }
}

/// Attack description with possibly-ranged parameters, as used in training
/// noiser sets (e.g. `crop(p=0.3..0.9)` or `gaussian(w=3|5)`).
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSampler {
    Identity,
    Crop { p: PValue },
    Cropout { p: PValue },
    Dropout { p: PValue },
    Rotate { alpha: PValue },
    Gaussian { w: PValue },
    Subsample420,
    Resize { s: PValue, mode: ResizeMode },
    JpegApprox { q: PValue, sigma: f64 },
    JpegReal { q: PValue },
}

pub const ATTACK_GRAMMAR: &str = "attack := name | name(key=value,...)\n\
names and keys:\n\
  identity\n\
  crop(p=RATIO)         keep a square of area ratio p in (0,1]\n\
  cropout(p=RATIO)      square kept from encoded image, rest from cover\n\
  dropout(p=RATIO)      per-pixel keep probability\n\
  rotate(alpha=DEGREES) rotation about the center (alias: a)\n\
  gaussian(w=INT)       kernel half-width, kernel size 2w+1\n\
  subsample420          4:2:0 chroma subsampling (alias: subsample)\n\
  resize(s=SCALE,m=N|L|B) nearest / Lanczos / bilinear\n\
  jpeg(q=QUALITY)       real codec round trip (evaluation only)\n\
  jpeg_approx(q=QUALITY,sigma=SIGMA) differentiable approximation\n\
values: scalar `0.5`, uniform range `0.3..0.9`, choice set `3|5`\n\
(ranges and choice sets are valid only inside training noiser sets)";

impl AttackSampler {
    /// Parse the `name(param=value,...)` grammar, range values allowed.
    pub fn parse(s: &str) -> Result<AttackSampler> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) => {
                if !s.ends_with(')') {
                    return Err(Error::Parse(format!("'{s}': missing closing parenthesis")));
                }
                (&s[..i], &s[i + 1..s.len() - 1])
            }
            None => (s, ""),
        };
        let mut kv = std::collections::BTreeMap::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("'{part}' is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |keys: &[&str]| -> Option<String> {
            for k in keys {
                if let Some(v) = kv.remove(*k) {
                    return Some(v);
                }
            }
            None
        };
        let need = |opt: Option<String>, what: &str| -> Result<String> {
            opt.ok_or_else(|| Error::Parse(format!("{name} requires parameter '{what}'")))
        };

        let out = match name {
            "identity" => AttackSampler::Identity,
            "crop" => AttackSampler::Crop {
                p: PValue::parse(&need(take(&["p"]), "p")?)?,
            },
            "cropout" => AttackSampler::Cropout {
                p: PValue::parse(&need(take(&["p"]), "p")?)?,
            },
            "dropout" => AttackSampler::Dropout {
                p: PValue::parse(&need(take(&["p"]), "p")?)?,
            },
            "rotate" => AttackSampler::Rotate {
                alpha: PValue::parse(&need(take(&["alpha", "a"]), "alpha")?)?,
            },
            "gaussian" => AttackSampler::Gaussian {
                w: PValue::parse(&need(take(&["w", "width"]), "w")?)?,
            },
            "subsample420" | "subsample" => AttackSampler::Subsample420,
            "resize" => {
                let s = PValue::parse(&need(take(&["s"]), "s")?)?;
                let mode = match take(&["m", "mode"]).as_deref() {
                    None | Some("B") | Some("bilinear") => ResizeMode::Bilinear,
                    Some("N") | Some("nearest") => ResizeMode::Nearest,
                    Some("L") | Some("lanczos") => ResizeMode::Lanczos,
                    Some(other) => {
                        return Err(Error::Parse(format!(
                            "unknown resize mode '{other}' (expected N, L or B)"
                        )))
                    }
                };
                AttackSampler::Resize { s, mode }
            }
            "jpeg" => AttackSampler::JpegReal {
                q: PValue::parse(&need(take(&["q"]), "q")?)?,
            },
            "jpeg_approx" => AttackSampler::JpegApprox {
                q: PValue::parse(&need(take(&["q"]), "q")?)?,
                sigma: take(&["sigma"])
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad sigma '{v}'"))))
                    .transpose()?
                    .unwrap_or(0.01),
            },
            other => {
                return Err(Error::Parse(format!(
                    "unknown attack '{other}'\n{ATTACK_GRAMMAR}"
                )))
            }
        };
        if let Some(extra) = kv.keys().next() {
            return Err(Error::Parse(format!(
                "unknown parameter '{extra}' for attack '{name}'"
            )));
        }
        Ok(out)
    }

    /// Concrete spec when no parameter is ranged.
    pub fn as_fixed(&self) -> Option<AttackSpec> {
        let spec = match self {
            AttackSampler::Identity => AttackSpec::Identity,
            AttackSampler::Crop { p } => AttackSpec::Crop { p: p.fixed()? },
            AttackSampler::Cropout { p } => AttackSpec::Cropout { p: p.fixed()? },
            AttackSampler::Dropout { p } => AttackSpec::Dropout { p: p.fixed()? },
            AttackSampler::Rotate { alpha } => AttackSpec::Rotate { alpha: alpha.fixed()? },
            AttackSampler::Gaussian { w } => AttackSpec::Gaussian {
                width: w.fixed()?.round() as u32,
            },
            AttackSampler::Subsample420 => AttackSpec::Subsample420,
            AttackSampler::Resize { s, mode } => AttackSpec::Resize {
                s: s.fixed()?,
                mode: *mode,
            },
            AttackSampler::JpegApprox { q, sigma } => AttackSpec::JpegApprox {
                q: q.fixed()?.round() as u32,
                sigma: *sigma,
            },
            AttackSampler::JpegReal { q } => AttackSpec::JpegReal {
                q: q.fixed()?.round() as u32,
            },
        };
        Some(spec)
    }

    /// Draw a concrete attack, sampling every ranged parameter uniformly.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> AttackSpec {
        match self {
            AttackSampler::Identity => AttackSpec::Identity,
            AttackSampler::Crop { p } => AttackSpec::Crop { p: p.sample(rng) },
            AttackSampler::Cropout { p } => AttackSpec::Cropout { p: p.sample(rng) },
            AttackSampler::Dropout { p } => AttackSpec::Dropout { p: p.sample(rng) },
            AttackSampler::Rotate { alpha } => AttackSpec::Rotate {
                alpha: alpha.sample(rng),
            },
            AttackSampler::Gaussian { w } => AttackSpec::Gaussian {
                width: w.sample(rng).round() as u32,
            },
            AttackSampler::Subsample420 => AttackSpec::Subsample420,
            AttackSampler::Resize { s, mode } => AttackSpec::Resize {
                s: s.sample(rng),
                mode: *mode,
            },
            AttackSampler::JpegApprox { q, sigma } => AttackSpec::JpegApprox {
                q: q.sample(rng).round() as u32,
                sigma: *sigma,
            },
            AttackSampler::JpegReal { q } => AttackSpec::JpegReal {
                q: q.sample(rng).round() as u32,
            },
        }
    }
}

/// Pixel-domain rectangle. Training crops keep offsets and extents at
/// multiples of the block size so the message grid crops cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The 2x2 stride-2 averaging kernel used for chroma subsampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsampleKernel {
    pub size: (usize, usize),
    pub stride: (usize, usize),
    pub weights: [[f32; 2]; 2],
}

/// Convolution description of the 4:2:0 downsampling step: 2x2, stride 2,
/// all weights 0.25 — an exact 2x2 block mean.
pub fn subsample_kernel() -> SubsampleKernel {
    SubsampleKernel {
        size: (2, 2),
        stride: (2, 2),
        weights: [[0.25, 0.25], [0.25, 0.25]],
    }
}

/// A concrete draw of an attack's randomness (geometry, masks, noise seed).
/// Applying the same realization twice yields identical outputs, which the
/// finite-difference gradient checks rely on.
pub struct Realization {
    pub spec: AttackSpec,
    pub region: Option<CropRegion>,
    /// Per-pixel keep mask for dropout/cropout, shape (N, H, W).
    mask: Option<Array3<f32>>,
    noise_seed: u64,
}

/// Snap `side` to the nearest multiple of `block`, keeping it inside
/// [block, limit].
fn snap_side(side: f64, block: usize, limit: usize) -> usize {
    let snapped = ((side / block as f64).round() as usize).max(1) * block;
    snapped.min(limit / block * block).max(block)
}

/// Sample the concrete randomness of `spec` for an (n, h, w) batch.
/// `block` is the codec block size used to align training crops.
pub fn realize(
    spec: &AttackSpec,
    n: usize,
    h: usize,
    w: usize,
    block: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Realization> {
    spec.validate()?;
    let mut region = None;
    let mut mask = None;
    match *spec {
        AttackSpec::Crop { p } => {
            let side = snap_side((p.sqrt()) * h.min(w) as f64, block, h.min(w));
            let top = rng.random_range(0..=(h - side) / block) * block;
            let left = rng.random_range(0..=(w - side) / block) * block;
            region = Some(CropRegion {
                top,
                left,
                height: side,
                width: side,
            });
        }
        AttackSpec::Cropout { p } => {
            let side = (((p.sqrt()) * h.min(w) as f64).round() as usize)
                .clamp(1, h.min(w));
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            region = Some(CropRegion {
                top,
                left,
                height: side,
                width: side,
            });
            let mut m = Array3::zeros((n, h, w));
            m.slice_mut(ndarray::s![.., top..top + side, left..left + side])
                .fill(1.0);
            mask = Some(m);
        }
        AttackSpec::Dropout { p } => {
            let mut m = Array3::zeros((n, h, w));
            for v in m.iter_mut() {
                *v = if rng.random_range(0.0..1.0f64) < p { 1.0 } else { 0.0 };
            }
            mask = Some(m);
        }
        AttackSpec::Gaussian { width } => {
            if width as usize >= h.min(w) {
                return Err(Error::InvalidArgument(format!(
                    "gaussian width {width} too large for {h}x{w} image"
                )));
            }
        }
        _ => {}
    }
    Ok(Realization {
        spec: spec.clone(),
        region,
        mask,
        noise_seed: rng.random(),
    })
}

impl Realization {
    pub fn mask(&self) -> Option<&Array3<f32>> {
        self.mask.as_ref()
    }

    /// Append this attack to a training graph. `ie` is the encoded batch,
    /// `ic` the matching cover batch (read by cropout/dropout). The result is
    /// clamped to [0, 1] except for the bit-exact identity.
    pub fn apply_graph(&self, g: &mut Graph, ie: NodeId, ic: &Array4<f32>) -> Result<NodeId> {
        let (n, h, w, _) = g.value(ie).dim();
        if ic.dim() != g.value(ie).dim() {
            return Err(Error::ShapeMismatch(format!(
                "cover batch {:?} does not match encoded batch {:?}",
                ic.dim(),
                g.value(ie).dim()
            )));
        }
        let out = match &self.spec {
            AttackSpec::Identity => return Ok(ie),
            AttackSpec::Crop { .. } => {
                let r = self.region.as_ref().unwrap();
                g.crop_spatial(ie, r.top, r.left, r.height, r.width)
            }
            AttackSpec::Cropout { .. } | AttackSpec::Dropout { .. } => {
                g.pixel_mix(ie, self.mask.clone().unwrap(), ic)
            }
            AttackSpec::Rotate { alpha } => {
                let taps = Arc::new(rotate_taps(h, w, *alpha));
                g.resample(ie, taps)
            }
            AttackSpec::Gaussian { width } => {
                let r = *width as usize;
                let kernel = Arc::new(gaussian_kernel(*width));
                let padded = g.pad_reflect(ie, r);
                g.sep_conv_valid(padded, kernel)
            }
            AttackSpec::Subsample420 => {
                let y = g.slice_c(ie, 0, 1);
                let cb = g.slice_c(ie, 1, 1);
                let cr = g.slice_c(ie, 2, 1);
                let down = Arc::new(crate::jpeg::down2x2_taps(h, w));
                let up = Arc::new(crate::jpeg::up2x_nearest_taps(
                    h.div_ceil(2),
                    w.div_ceil(2),
                    h,
                    w,
                ));
                let cb = g.resample(cb, down.clone());
                let cb = g.resample(cb, up.clone());
                let cr = g.resample(cr, down);
                let cr = g.resample(cr, up);
                g.concat_c(&[y, cb, cr])
            }
            AttackSpec::Resize { s, mode } => {
                let oh = ((h as f64 * s).round() as usize).max(1);
                let ow = ((w as f64 * s).round() as usize).max(1);
                let taps = Arc::new(resize_taps(h, w, oh, ow, *mode));
                g.resample(ie, taps)
            }
            AttackSpec::JpegApprox { q, sigma } => {
                let mut noise_rng = rand::SeedableRng::seed_from_u64(self.noise_seed);
                crate::jpeg::build_jpeg_approx_graph(g, ie, *q, *sigma, &mut noise_rng)?
            }
            AttackSpec::JpegReal { .. } => {
                return Err(Error::InvalidArgument(
                    "jpeg(q=..) is not differentiable; use jpeg_approx in training".into(),
                ))
            }
        };
        let _ = n;
        Ok(g.clamp01(out))
    }

    /// Apply natively to a single image (evaluation path). Differentiable
    /// attacks reuse the graph forward; the real JPEG codec runs directly.
    pub fn apply_native(&self, ie: &ImageTensor, ic: &ImageTensor) -> Result<ImageTensor> {
        if let AttackSpec::JpegReal { q } = self.spec {
            return crate::jpeg::jpeg_real(ie, q);
        }
        if self.spec == AttackSpec::Identity {
            return Ok(ie.clone());
        }
        if ie.data.dim() != ic.data.dim() {
            return Err(Error::ShapeMismatch(
                "encoded and cover images differ in shape".into(),
            ));
        }
        let mut g = Graph::new();
        let node = g.leaf(ie.to_batch(), false);
        let out = self.apply_graph(&mut g, node, &ic.to_batch())?;
        Ok(ImageTensor::from_batch(g.value(out), 0, ie.space))
    }
}

/// Realize and apply an attack in one call (evaluation convenience).
/// Returns the attacked image and, for crop-family attacks, the region.
pub fn apply_attack(
    spec: &AttackSpec,
    ie: &ImageTensor,
    ic: &ImageTensor,
    block: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(ImageTensor, Option<CropRegion>)> {
    let r = realize(spec, 1, ie.height(), ie.width(), block, rng)?;
    let out = r.apply_native(ie, ic)?;
    Ok((out, r.region))
}

// ---- resampling plans -------------------------------------------------------

/// Normalized Gaussian kernel of half-width `w` with sigma = w/2.
pub fn gaussian_kernel(w: u32) -> Vec<f32> {
    let sigma = w as f64 / 2.0;
    let mut k: Vec<f64> = (0..=2 * w)
        .map(|i| {
            let d = i as f64 - w as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

fn push_bilinear(
    src: &mut Vec<u32>,
    weight: &mut Vec<f32>,
    sy: f64,
    sx: f64,
    h: usize,
    w: usize,
) {
    let syc = sy.clamp(0.0, (h - 1) as f64);
    let sxc = sx.clamp(0.0, (w - 1) as f64);
    let y0 = syc.floor() as usize;
    let x0 = sxc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (syc - y0 as f64) as f32;
    let fx = (sxc - x0 as f64) as f32;
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ];
    for (y, x, wt) in taps {
        if wt != 0.0 {
            src.push((y * w + x) as u32);
            weight.push(wt);
        }
    }
}

/// Rotation by `alpha` degrees about the image center; source coordinates
/// are clamped to the canvas, which replicates edges for out-of-bounds reads.
pub fn rotate_taps(h: usize, w: usize, alpha: f64) -> ResampleTaps {
    let theta = alpha.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut offsets = vec![0u32];
    let mut src = Vec::new();
    let mut weight = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            push_bilinear(&mut src, &mut weight, sy, sx, h, w);
            offsets.push(src.len() as u32);
        }
    }
    ResampleTaps {
        in_h: h,
        in_w: w,
        out_h: h,
        out_w: w,
        offsets,
        src,
        weight,
    }
}

fn lanczos3(x: f64) -> f64 {
    const A: f64 = 3.0;
    if x == 0.0 {
        return 1.0;
    }
    if x.abs() >= A {
        return 0.0;
    }
    let px = std::f64::consts::PI * x;
    A * px.sin() * (px / A).sin() / (px * px)
}

/// Resize plan from (h, w) to (oh, ow) under the chosen interpolation.
pub fn resize_taps(h: usize, w: usize, oh: usize, ow: usize, mode: ResizeMode) -> ResampleTaps {
    let ry = h as f64 / oh as f64;
    let rx = w as f64 / ow as f64;
    let mut offsets = vec![0u32];
    let mut src = Vec::new();
    let mut weight = Vec::new();
    for y in 0..oh {
        let sy = (y as f64 + 0.5) * ry - 0.5;
        for x in 0..ow {
            let sx = (x as f64 + 0.5) * rx - 0.5;
            match mode {
                ResizeMode::Nearest => {
                    let ny = (sy + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
                    let nx = (sx + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
                    src.push((ny * w + nx) as u32);
                    weight.push(1.0);
                }
                ResizeMode::Bilinear => {
                    push_bilinear(&mut src, &mut weight, sy, sx, h, w);
                }
                ResizeMode::Lanczos => {
                    let y0 = sy.floor() as isize - 2;
                    let x0 = sx.floor() as isize - 2;
                    let mut wy = [0.0f64; 6];
                    let mut wx = [0.0f64; 6];
                    for i in 0..6 {
                        wy[i] = lanczos3(sy - (y0 + i as isize) as f64);
                        wx[i] = lanczos3(sx - (x0 + i as isize) as f64);
                    }
                    let sum: f64 = wy.iter().sum::<f64>() * wx.iter().sum::<f64>();
                    for (i, &wyi) in wy.iter().enumerate() {
                        let ssy = (y0 + i as isize).clamp(0, h as isize - 1) as usize;
                        for (j, &wxj) in wx.iter().enumerate() {
                            let ssx = (x0 + j as isize).clamp(0, w as isize - 1) as usize;
                            let wt = (wyi * wxj / sum) as f32;
                            if wt != 0.0 {
                                src.push((ssy * w + ssx) as u32);
                                weight.push(wt);
                            }
                        }
                    }
                }
            }
            offsets.push(src.len() as u32);
        }
    }
    ResampleTaps {
        in_h: h,
        in_w: w,
        out_h: oh,
        out_w: ow,
        offsets,
        src,
        weight,
    }
}
