//! Message spreading and recovery.
//!
//! An L-bit message is split into L/k fragments; fragment `i` becomes a
//! tuple of n index bits (the binary representation of i) followed by its k
//! payload bits. The propagator assigns tuples to every cell of a spatial
//! grid — redundantly when the grid has more cells than fragments — and the
//! extension replicates every cell over a b x b pixel block. Recovery ranks
//! grid slices by the distance of their index channels to each fragment's
//! index, averages the payload channels of the `o` closest slices and
//! thresholds at 0.5.

use crate::error::{Error, Result};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// An ordered sequence of message bits (each 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("message bits must be 0 or 1".into()));
        }
        Ok(Message { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Message { bits: vec![0; len] }
    }

    pub fn random(len: usize, rng: &mut ChaCha12Rng) -> Self {
        Message {
            bits: (0..len).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Parse from hex; exactly `len` bits are taken MSB-first and `len` must
    /// consume the full digits (surplus low bits must be zero padding).
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let digits = len.div_ceil(4);
        if hex.len() != digits {
            return Err(Error::InvalidArgument(format!(
                "message of {len} bits needs exactly {digits} hex digits, got {}",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(digits * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::InvalidArgument(format!("'{ch}' is not a hex digit")))?;
            for j in (0..4).rev() {
                bits.push(((v >> j) & 1) as u8);
            }
        }
        if bits[len..].iter().any(|&b| b != 0) {
            return Err(Error::InvalidArgument(
                "hex padding bits beyond the message length must be zero".into(),
            ));
        }
        bits.truncate(len);
        Ok(Message { bits })
    }

    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        for chunk in self.bits.chunks(4) {
            let mut v = 0u32;
            for (j, &b) in chunk.iter().enumerate() {
                v |= (b as u32) << (3 - j);
            }
            out.push(char::from_digit(v, 16).unwrap());
        }
        out
    }
}

/// Parameters of the spreading codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecParams {
    /// Message length in bits.
    pub l: usize,
    /// Payload bits per tuple.
    pub k: usize,
    /// Index bits per tuple.
    pub n: usize,
    /// Block side in pixels.
    pub b: usize,
    /// Neighbour count used by the translator.
    pub o: usize,
    /// Seed for the slot assignment.
    pub seed: u64,
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.l {
            return Err(Error::InvalidConfig(format!(
                "k={} outside [1, L={}]",
                self.k, self.l
            )));
        }
        if self.l % self.k != 0 {
            return Err(Error::InvalidConfig(format!(
                "L={} not divisible by k={}",
                self.l, self.k
            )));
        }
        let fragments = self.l / self.k;
        if self.n >= 64 {
            return Err(Error::InvalidConfig(format!("n={} too large", self.n)));
        }
        if (1usize << self.n) < fragments {
            return Err(Error::InvalidConfig(format!(
                "2^n = {} cannot index {fragments} fragments",
                1usize << self.n
            )));
        }
        if self.b == 0 {
            return Err(Error::InvalidConfig("block size b must be >= 1".into()));
        }
        if self.o == 0 {
            return Err(Error::InvalidConfig("neighbour count o must be >= 1".into()));
        }
        Ok(())
    }

    pub fn fragments(&self) -> usize {
        self.l / self.k
    }

    /// Channels of the spatial grid: n index bits plus k payload bits.
    pub fn channels(&self) -> usize {
        self.n + self.k
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for CodecParams {
    /// The configuration used throughout the experiments: 32-bit messages,
    /// 2 payload bits + 4 index bits per tuple, 16-pixel blocks.
    fn default() -> Self {
        CodecParams {
            l: 32,
            k: 2,
            n: 4,
            b: 16,
            o: 3,
            seed: 0,
        }
    }
}

/// One indexed fragment: n index bits followed by k payload bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleEncoding {
    pub index_bits: Vec<u8>,
    pub payload_bits: Vec<u8>,
}

impl TupleEncoding {
    pub fn flat(&self) -> Vec<u8> {
        let mut v = self.index_bits.clone();
        v.extend_from_slice(&self.payload_bits);
        v
    }
}

/// MSB-first n-bit binary representation of `i`.
pub fn bin_n(i: usize, n: usize) -> Vec<u8> {
    (0..n).map(|j| ((i >> (n - 1 - j)) & 1) as u8).collect()
}

/// The (H/b) x (W/b) x (n+k) binary grid of spread tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMessage {
    /// (grid_h, grid_w, n+k), values 0/1.
    pub grid: Array3<u8>,
    pub n: usize,
    pub k: usize,
}

impl SpatialMessage {
    pub fn grid_h(&self) -> usize {
        self.grid.dim().0
    }

    pub fn grid_w(&self) -> usize {
        self.grid.dim().1
    }

    pub fn as_f32(&self) -> Array3<f32> {
        self.grid.mapv(|v| v as f32)
    }

    /// Fragment index stored at a slice, decoded from its index bits.
    pub fn index_at(&self, y: usize, x: usize) -> usize {
        let mut idx = 0usize;
        for j in 0..self.n {
            idx = (idx << 1) | self.grid[(y, x, j)] as usize;
        }
        idx
    }
}

/// The grid replicated b times along both spatial axes, ready to be
/// concatenated with an H x W image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedSpatialMessage {
    /// (H, W, n+k), values 0/1.
    pub grid: Array3<u8>,
    pub b: usize,
}

impl ExtendedSpatialMessage {
    pub fn as_f32(&self) -> Array3<f32> {
        self.grid.mapv(|v| v as f32)
    }
}

/// Raw decoder output in grid form; real-valued and unconstrained.
#[derive(Debug, Clone)]
pub struct DecodedGrid {
    pub grid: Array3<f32>,
}

impl DecodedGrid {
    pub fn new(grid: Array3<f32>) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoded grid holds non-finite values".into()));
        }
        Ok(DecodedGrid { grid })
    }

    pub fn from_spatial(m: &SpatialMessage) -> Self {
        DecodedGrid { grid: m.as_f32() }
    }
}

/// Block-aligned rectangle in grid-cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRegion {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

// ---- operations -------------------------------------------------------------

/// Split the message into its L/k indexed tuples.
pub fn encode_tuples(m: &Message, params: &CodecParams) -> Result<Vec<TupleEncoding>> {
    params.validate()?;
    if m.len() != params.l {
        return Err(Error::InvalidConfig(format!(
            "message holds {} bits, params expect L={}",
            m.len(),
            params.l
        )));
    }
    let t = params.fragments();
    let mut tuples = Vec::with_capacity(t);
    for i in 0..t {
        tuples.push(TupleEncoding {
            index_bits: bin_n(i, params.n),
            payload_bits: m.bits()[i * params.k..(i + 1) * params.k].to_vec(),
        });
    }
    Ok(tuples)
}

/// Spread the message over a grid_h x grid_w grid. Every cell receives a
/// tuple; every fragment appears at least once (the grid must have at least
/// L/k cells). The assignment cycles freshly shuffled fragment orders, so
/// fragment counts differ by at most one and copies land at unstructured
/// positions.
pub fn propagate(
    m: &Message,
    params: &CodecParams,
    grid_h: usize,
    grid_w: usize,
) -> Result<SpatialMessage> {
    let tuples = encode_tuples(m, params)?;
    let t = tuples.len();
    let slots = grid_h * grid_w;
    if slots < t {
        return Err(Error::InvalidConfig(format!(
            "{grid_h}x{grid_w} grid has {slots} slots but {t} fragments must be placed"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..t).collect();
    let mut assignment = Vec::with_capacity(slots);
    while assignment.len() < slots {
        order.shuffle(&mut rng);
        let take = t.min(slots - assignment.len());
        assignment.extend_from_slice(&order[..take]);
    }

    let ch = params.channels();
    let mut grid = Array3::zeros((grid_h, grid_w, ch));
    for (slot, &ti) in assignment.iter().enumerate() {
        let (y, x) = (slot / grid_w, slot % grid_w);
        for (c, &bit) in tuples[ti].flat().iter().enumerate() {
            grid[(y, x, c)] = bit;
        }
    }
    Ok(SpatialMessage {
        grid,
        n: params.n,
        k: params.k,
    })
}

/// Replicate every grid cell b times horizontally and vertically.
pub fn extend(m: &SpatialMessage, b: usize) -> Result<ExtendedSpatialMessage> {
    if b == 0 {
        return Err(Error::InvalidArgument("block size b must be >= 1".into()));
    }
    let (gh, gw, ch) = m.grid.dim();
    let mut grid = Array3::zeros((gh * b, gw * b, ch));
    for y in 0..gh * b {
        for x in 0..gw * b {
            for c in 0..ch {
                grid[(y, x, c)] = m.grid[(y / b, x / b, c)];
            }
        }
    }
    Ok(ExtendedSpatialMessage { grid, b })
}

/// Recovered message plus per-fragment diagnostics.
#[derive(Debug, Clone)]
pub struct TranslateOutcome {
    pub message: Message,
    /// Mean index distance of the selected slices, one entry per fragment.
    /// Low values mean the translator found confident index matches.
    pub fragment_distances: Vec<f64>,
}

/// Nearest-neighbour recovery of the message from a decoded grid.
pub fn translate_full(mp: &DecodedGrid, params: &CodecParams) -> Result<TranslateOutcome> {
    params.validate()?;
    let (gh, gw, ch) = mp.grid.dim();
    if ch != params.channels() {
        return Err(Error::ShapeMismatch(format!(
            "decoded grid has {ch} channels, expected n+k={}",
            params.channels()
        )));
    }
    let slots = gh * gw;
    if params.o > slots {
        return Err(Error::InvalidConfig(format!(
            "o={} exceeds the {slots} available slices",
            params.o
        )));
    }

    let t = params.fragments();
    let (n, k) = (params.n, params.k);
    let mut bits = Vec::with_capacity(params.l);
    let mut fragment_distances = Vec::with_capacity(t);
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(slots);
    for i in 0..t {
        let target: Vec<f64> = bin_n(i, n).iter().map(|&b| b as f64).collect();
        ranked.clear();
        for y in 0..gh {
            for x in 0..gw {
                let mut d2 = 0.0f64;
                for (j, &tj) in target.iter().enumerate() {
                    let d = tj - mp.grid[(y, x, j)] as f64;
                    d2 += d * d;
                }
                ranked.push((d2, y * gw + x));
            }
        }
        // Ties break on row-major slice order for reproducibility.
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let selected = &ranked[..params.o];
        let mut dist_acc = 0.0f64;
        for c in 0..k {
            let mut mean = 0.0f64;
            for &(_, slot) in selected {
                let (y, x) = (slot / gw, slot % gw);
                mean += mp.grid[(y, x, n + c)] as f64;
            }
            mean /= params.o as f64;
            bits.push(if mean >= 0.5 { 1 } else { 0 });
        }
        for &(d2, _) in selected {
            dist_acc += d2.sqrt();
        }
        fragment_distances.push(dist_acc / params.o as f64);
    }
    Ok(TranslateOutcome {
        message: Message { bits },
        fragment_distances,
    })
}

/// Nearest-neighbour recovery, message only.
pub fn translate(mp: &DecodedGrid, params: &CodecParams) -> Result<Message> {
    Ok(translate_full(mp, params)?.message)
}

/// Extract the sub-grid covered by a block-aligned region. Cropping may
/// remove every copy of a fragment; completeness is not re-checked.
pub fn crop_grid(m: &SpatialMessage, region: GridRegion) -> Result<SpatialMessage> {
    let (gh, gw, _) = m.grid.dim();
    if region.h == 0 || region.w == 0 {
        return Err(Error::InvalidArgument("empty crop region".into()));
    }
    if region.y0 + region.h > gh || region.x0 + region.w > gw {
        return Err(Error::InvalidArgument(format!(
            "region {region:?} outside {gh}x{gw} grid"
        )));
    }
    Ok(SpatialMessage {
        grid: m
            .grid
            .slice(ndarray::s![
                region.y0..region.y0 + region.h,
                region.x0..region.x0 + region.w,
                ..
            ])
            .to_owned(),
        n: m.n,
        k: m.k,
    })
}

// ---- serialization ----------------------------------------------------------

const MAGIC: &[u8; 4] = b"SMG1";

/// Header of the portable binary layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialHeader {
    pub l: u32,
    pub k: u32,
    pub n: u32,
    pub b: u32,
    pub grid_h: u32,
    pub grid_w: u32,
}

/// Serialize a spatial message: magic, six little-endian u32 header fields
/// (L, k, n, b, grid dims) and the grid bits packed MSB-first in
/// row-major (y, x, channel) order.
pub fn write_spatial(params: &CodecParams, m: &SpatialMessage) -> Vec<u8> {
    let (gh, gw, ch) = m.grid.dim();
    let mut out = Vec::with_capacity(4 + 24 + (gh * gw * ch).div_ceil(8));
    out.extend_from_slice(MAGIC);
    for v in [
        params.l as u32,
        params.k as u32,
        params.n as u32,
        params.b as u32,
        gh as u32,
        gw as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut byte = 0u8;
    let mut nbits = 0u8;
    for &bit in m.grid.iter() {
        byte = (byte << 1) | bit;
        nbits += 1;
        if nbits == 8 {
            out.push(byte);
            byte = 0;
            nbits = 0;
        }
    }
    if nbits > 0 {
        out.push(byte << (8 - nbits));
    }
    out
}

pub fn read_spatial(bytes: &[u8]) -> Result<(SpatialHeader, SpatialMessage)> {
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not a spatial message blob".into()));
    }
    let mut fields = [0u32; 6];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap());
    }
    let header = SpatialHeader {
        l: fields[0],
        k: fields[1],
        n: fields[2],
        b: fields[3],
        grid_h: fields[4],
        grid_w: fields[5],
    };
    let (gh, gw) = (header.grid_h as usize, header.grid_w as usize);
    let ch = (header.n + header.k) as usize;
    let nbits = gh * gw * ch;
    let body = &bytes[28..];
    if body.len() != nbits.div_ceil(8) {
        return Err(Error::Parse(format!(
            "spatial message body holds {} bytes, expected {}",
            body.len(),
            nbits.div_ceil(8)
        )));
    }
    let mut grid = Array3::zeros((gh, gw, ch));
    for (i, cell) in grid.iter_mut().enumerate() {
        let bit = (body[i / 8] >> (7 - (i % 8))) & 1;
        *cell = bit;
    }
    Ok((
        header,
        SpatialMessage {
            grid,
            n: header.n as usize,
            k: header.k as usize,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(l: usize, k: usize, n: usize, b: usize, o: usize, seed: u64) -> CodecParams {
        CodecParams { l, k, n, b, o, seed }
    }

    #[test]
    fn tuples_of_zero_message() {
        let m = Message::zeros(8);
        let tuples = encode_tuples(&m, &params(8, 2, 2, 2, 1, 0)).unwrap();
        let flat: Vec<Vec<u8>> = tuples.iter().map(|t| t.flat()).collect();
        assert_eq!(
            flat,
            vec![
                vec![0, 0, 0, 0],
                vec![0, 1, 0, 0],
                vec![1, 0, 0, 0],
                vec![1, 1, 0, 0]
            ]
        );
    }

    #[test]
    fn tuple_counts_and_lengths() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m = Message::random(32, &mut rng);
        let t = encode_tuples(&m, &params(32, 2, 4, 16, 3, 0)).unwrap();
        assert_eq!(t.len(), 16);
        assert!(t.iter().all(|t| t.flat().len() == 6));

        let t = encode_tuples(&m, &params(32, 4, 3, 16, 3, 0)).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|t| t.flat().len() == 7));
    }

    #[test]
    fn payload_concatenation_reproduces_message() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let m = Message::random(32, &mut rng);
        let t = encode_tuples(&m, &params(32, 2, 4, 16, 3, 0)).unwrap();
        let rebuilt: Vec<u8> = t.iter().flat_map(|t| t.payload_bits.clone()).collect();
        assert_eq!(rebuilt, m.bits());
    }

    #[test]
    fn invalid_params_rejected() {
        let m = Message::zeros(8);
        assert!(encode_tuples(&m, &params(8, 3, 3, 2, 1, 0)).is_err()); // 8 % 3 != 0
        assert!(encode_tuples(&m, &params(8, 2, 1, 2, 1, 0)).is_err()); // 2^1 < 4
    }

    #[test]
    fn propagate_fills_grid_and_covers_all_fragments() {
        let m = Message::zeros(8);
        let p = params(8, 2, 2, 2, 1, 7);
        let sm = propagate(&m, &p, 2, 2).unwrap();
        assert_eq!(sm.grid.dim(), (2, 2, 4));
        let mut seen = [false; 4];
        for y in 0..2 {
            for x in 0..2 {
                seen[sm.index_at(y, x)] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn propagate_redundancy_is_balanced() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let m = Message::random(32, &mut rng);
        let p = params(32, 2, 4, 16, 3, 11);
        let sm = propagate(&m, &p, 16, 16).unwrap();
        let mut counts = [0usize; 16];
        for y in 0..16 {
            for x in 0..16 {
                counts[sm.index_at(y, x)] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 16), "{counts:?}");
    }

    #[test]
    fn propagate_single_slot() {
        let m = Message::zeros(2);
        let p = params(2, 2, 1, 1, 1, 0);
        let sm = propagate(&m, &p, 1, 1).unwrap();
        assert_eq!(sm.grid.dim(), (1, 1, 3));
    }

    #[test]
    fn propagate_too_few_slots() {
        let m = Message::zeros(8);
        let p = params(8, 2, 2, 2, 1, 0);
        assert!(propagate(&m, &p, 1, 3).is_err());
    }

    #[test]
    fn propagate_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let m = Message::random(32, &mut rng);
        let p = params(32, 2, 4, 16, 3, 42);
        assert_eq!(propagate(&m, &p, 16, 16).unwrap(), propagate(&m, &p, 16, 16).unwrap());
        let p2 = p.with_seed(43);
        assert_ne!(propagate(&m, &p, 16, 16).unwrap(), propagate(&m, &p2, 16, 16).unwrap());
    }

    #[test]
    fn extend_replicates_blocks() {
        let m = Message::zeros(8);
        let p = params(8, 2, 2, 2, 1, 1);
        let sm = propagate(&m, &p, 2, 2).unwrap();
        let ext = extend(&sm, 2).unwrap();
        assert_eq!(ext.grid.dim(), (4, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..4 {
                    assert_eq!(ext.grid[(y, x, c)], sm.grid[(y / 2, x / 2, c)]);
                }
            }
        }
        // b = 1 is the identity
        let ext1 = extend(&sm, 1).unwrap();
        assert_eq!(ext1.grid, sm.grid);
    }

    #[test]
    fn extend_shape_matches_propagate_event() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let m = Message::random(32, &mut rng);
        let p = params(32, 2, 4, 16, 3, 5);
        let sm = propagate(&m, &p, 16, 16).unwrap();
        let ext = extend(&sm, 16).unwrap();
        assert_eq!(ext.grid.dim(), (256, 256, 6));
    }

    #[test]
    fn translate_recovers_noiseless_grid() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for seed in 0..20 {
            let m = Message::random(8, &mut rng);
            let p = params(8, 2, 2, 2, 1, seed);
            let sm = propagate(&m, &p, 2, 2).unwrap();
            let got = translate(&DecodedGrid::from_spatial(&sm), &p).unwrap();
            assert_eq!(got, m);
        }
    }

    #[test]
    fn translate_thresholds_soft_payloads() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let m = Message::random(8, &mut rng);
        let p = params(8, 2, 2, 2, 1, 3);
        let sm = propagate(&m, &p, 2, 2).unwrap();
        let soft = sm.as_f32().mapv(|v| if v > 0.5 { 0.9 } else { 0.1 });
        let got = translate(&DecodedGrid::new(soft).unwrap(), &p).unwrap();
        assert_eq!(got, m);
    }

    #[test]
    fn translate_prefers_closer_index_matches() {
        // Fragment 3 (=11) appears three times: two clean copies and one with
        // flipped payload and perturbed index bits. With o=2 the clean pair
        // wins.
        let p = params(8, 2, 2, 2, 2, 0);
        let mut grid = Array3::zeros((2, 2, 4));
        let put = |g: &mut Array3<f32>, y: usize, x: usize, v: [f32; 4]| {
            for (c, vv) in v.into_iter().enumerate() {
                g[(y, x, c)] = vv;
            }
        };
        put(&mut grid, 0, 0, [1.0, 1.0, 1.0, 0.0]); // clean copy of s3, payload (1,0)
        put(&mut grid, 0, 1, [1.0, 1.0, 1.0, 0.0]); // clean copy
        put(&mut grid, 1, 0, [0.7, 0.6, 0.0, 1.0]); // damaged copy, flipped payload
        put(&mut grid, 1, 1, [0.0, 0.0, 0.0, 0.0]); // s0
        let got = translate(&DecodedGrid::new(grid).unwrap(), &p).unwrap();
        assert_eq!(&got.bits()[6..8], &[1, 0]);
    }

    #[test]
    fn translate_ignores_never_selected_slices() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let m = Message::random(32, &mut rng);
        let p = params(32, 2, 4, 4, 2, 9);
        let sm = propagate(&m, &p, 8, 8).unwrap();
        let clean = translate(&DecodedGrid::from_spatial(&sm), &p).unwrap();

        // Flip payload bits of slices whose index distance can never rank
        // within o for fragment 0 (their index bits differ in all n places).
        let mut grid = sm.as_f32();
        for y in 0..8 {
            for x in 0..8 {
                if sm.index_at(y, x) == 15 {
                    for c in 4..6 {
                        grid[(y, x, c)] = 1.0 - grid[(y, x, c)];
                    }
                }
            }
        }
        let out = translate_full(&DecodedGrid::new(grid).unwrap(), &p).unwrap();
        assert_eq!(&out.message.bits()[..2], &clean.bits()[..2]);
    }

    #[test]
    fn translate_rejects_oversized_o() {
        let m = Message::zeros(8);
        let p = params(8, 2, 2, 2, 5, 0);
        let sm = propagate(&m, &p, 2, 2).unwrap();
        assert!(translate(&DecodedGrid::from_spatial(&sm), &p).is_err());
    }

    #[test]
    fn crop_grid_examples() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let m = Message::random(32, &mut rng);
        let p = params(32, 2, 4, 16, 3, 2);
        let sm = propagate(&m, &p, 16, 16).unwrap();

        let full = crop_grid(&sm, GridRegion { y0: 0, x0: 0, h: 16, w: 16 }).unwrap();
        assert_eq!(full, sm);

        let half = crop_grid(&sm, GridRegion { y0: 0, x0: 0, h: 8, w: 8 }).unwrap();
        assert_eq!(half.grid.dim(), (8, 8, 6));
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..6 {
                    assert_eq!(half.grid[(y, x, c)], sm.grid[(y, x, c)]);
                }
            }
        }

        let single = crop_grid(&sm, GridRegion { y0: 0, x0: 0, h: 1, w: 1 }).unwrap();
        assert_eq!(single.grid.dim(), (1, 1, 6));

        assert!(crop_grid(&sm, GridRegion { y0: 0, x0: 0, h: 0, w: 3 }).is_err());
        assert!(crop_grid(&sm, GridRegion { y0: 10, x0: 10, h: 8, w: 8 }).is_err());
    }

    #[test]
    fn hex_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let m = Message::random(32, &mut rng);
        let hex = m.to_hex();
        assert_eq!(hex.len(), 8);
        assert_eq!(Message::from_hex(&hex, 32).unwrap(), m);
        assert!(Message::from_hex("zz", 8).is_err());
        assert!(Message::from_hex("ff", 32).is_err());
    }

    #[test]
    fn spatial_serialization_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let m = Message::random(32, &mut rng);
        let p = params(32, 2, 4, 16, 3, 13);
        let sm = propagate(&m, &p, 16, 16).unwrap();
        let bytes = write_spatial(&p, &sm);
        let (header, back) = read_spatial(&bytes).unwrap();
        assert_eq!(header.l, 32);
        assert_eq!(header.b, 16);
        assert_eq!(back, sm);
    }
}
