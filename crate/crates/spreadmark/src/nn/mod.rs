//! A small tape-based autodiff engine over NHWC `f32` tensors.
//!
//! The training pipeline is a fixed DAG (encoder -> attack -> decoder plus a
//! critic), so the engine implements exactly the operations that pipeline
//! needs. Values are computed eagerly when a node is created; `backward`
//! walks the tape in reverse, accumulating input gradients node by node and
//! parameter gradients into a [`ParamStore`]. Node values are dropped as soon
//! as their backward step completes to bound peak memory.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod params;

pub use params::{ParamId, ParamStore};

use ndarray::{Array1, Array3, Array4};
use std::sync::Arc;

pub type NodeId = usize;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
const LOG_EPS: f64 = 1e-6;

/// Sparse linear resampling plan: every output pixel is a weighted sum of
/// input pixels. Covers bilinear/nearest/Lanczos resizes, rotation and the
/// chroma up/down-sampling steps.
pub struct ResampleTaps {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// CSR offsets, one entry per output pixel plus a trailing end.
    pub offsets: Vec<u32>,
    /// Flattened source pixel indices (y * in_w + x).
    pub src: Vec<u32>,
    pub weight: Vec<f32>,
}

enum Op {
    Leaf,
    Conv {
        input: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        pad: usize,
        train_params: bool,
    },
    BnRelu {
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        mean: Array1<f32>,
        invstd: Array1<f32>,
        batch_stats: bool,
        train_params: bool,
    },
    Sigmoid {
        input: NodeId,
    },
    Clamp01 {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatC {
        parts: Vec<NodeId>,
    },
    SliceC {
        input: NodeId,
        c0: usize,
    },
    CropSpatial {
        input: NodeId,
        y0: usize,
        x0: usize,
    },
    AdaptiveAvgPool {
        input: NodeId,
    },
    Affine {
        input: NodeId,
        mul: f32,
    },
    PixelMix {
        input: NodeId,
        mask: Array3<f32>,
    },
    Resample {
        input: NodeId,
        taps: Arc<ResampleTaps>,
    },
    PadReflect {
        input: NodeId,
        r: usize,
    },
    PadReplicate {
        input: NodeId,
        bottom: usize,
        right: usize,
    },
    SepConvValid {
        input: NodeId,
        kernel: Arc<Vec<f32>>,
    },
    Dct8x8 {
        input: NodeId,
        inverse: bool,
    },
    ScaleTable {
        input: NodeId,
        table: Arc<ndarray::Array2<f32>>,
        divide: bool,
    },
    DeadZone {
        input: NodeId,
        keep: Array4<f32>,
    },
    MseLoss {
        input: NodeId,
        target: Arc<Array4<f32>>,
    },
    L1MeanLoss {
        input: NodeId,
        target: Arc<Array4<f32>>,
    },
    SliceVarLoss {
        input: NodeId,
        target: Arc<Array4<f32>>,
    },
    MeanLogOneMinus {
        input: NodeId,
    },
    MeanLog {
        input: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f32)>,
    },
}

pub struct Graph {
    vals: Vec<Option<Array4<f32>>>,
    grads: Vec<Option<Array4<f32>>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            vals: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
        }
    }

    fn push(&mut self, val: Array4<f32>, op: Op, needs: bool) -> NodeId {
        self.vals.push(Some(val));
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs);
        self.vals.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array4<f32> {
        self.vals[id].as_ref().expect("node value already freed")
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        self.value(id)[(0, 0, 0, 0)]
    }

    pub fn leaf(&mut self, val: Array4<f32>, needs_grad: bool) -> NodeId {
        self.push(val, Op::Leaf, needs_grad)
    }

    /// Gradient accumulated at a leaf during the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Array4<f32>> {
        self.grads[id].as_ref()
    }

    fn needs_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.needs[i])
    }

    fn add_grad(&mut self, id: NodeId, g: Array4<f32>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    // ---- operations -----------------------------------------------------

    pub fn conv(
        &mut self,
        store: &ParamStore,
        input: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        pad: usize,
        train_params: bool,
    ) -> NodeId {
        let wv = params::as4(&store.get(w).value);
        let bias = b.map(|id| params::as1(&store.get(id).value));
        let out = conv::conv_forward(self.value(input), &wv, bias.as_ref(), pad);
        let needs = self.needs[input] || train_params;
        self.push(
            out,
            Op::Conv {
                input,
                w,
                b,
                pad,
                train_params,
            },
            needs,
        )
    }

    /// Batch normalization followed by ReLU. In training mode the batch
    /// statistics are used and the running statistics are updated (only when
    /// `train_params` is set, so a frozen critic pass does not drift them).
    #[allow(clippy::too_many_arguments)]
    pub fn bn_relu(
        &mut self,
        store: &mut ParamStore,
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        rmean: ParamId,
        rvar: ParamId,
        train: bool,
        train_params: bool,
    ) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        let m = (n * h * w) as f64;
        let (mean, invstd) = if train {
            let mut mu = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for px in x.rows() {
                let px = px.to_slice().unwrap();
                for (ci, &v) in px.iter().enumerate() {
                    mu[ci] += v as f64;
                }
            }
            for v in mu.iter_mut() {
                *v /= m;
            }
            for px in x.rows() {
                let px = px.to_slice().unwrap();
                for (ci, &v) in px.iter().enumerate() {
                    let d = v as f64 - mu[ci];
                    var[ci] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= m;
            }
            if train_params {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                {
                    let rm = &mut store.get_mut(rmean).value;
                    for (ci, r) in rm.iter_mut().enumerate() {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * mu[ci] as f32;
                    }
                }
                let rv = &mut store.get_mut(rvar).value;
                for (ci, r) in rv.iter_mut().enumerate() {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (var[ci] * unbias) as f32;
                }
            }
            let mean = Array1::from_iter(mu.iter().map(|&v| v as f32));
            let invstd =
                Array1::from_iter(var.iter().map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32));
            (mean, invstd)
        } else {
            let rm = params::as1(&store.get(rmean).value);
            let rv = params::as1(&store.get(rvar).value);
            let invstd = rv.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            (rm, invstd)
        };

        let gamma_v = params::as1(&store.get(gamma).value);
        let beta_v = params::as1(&store.get(beta).value);
        let mut out = x.clone();
        for px in out.rows_mut() {
            let px = px.into_slice().unwrap();
            for (ci, v) in px.iter_mut().enumerate() {
                let y = gamma_v[ci] * (*v - mean[ci]) * invstd[ci] + beta_v[ci];
                *v = if y > 0.0 { y } else { 0.0 };
            }
        }
        let needs = self.needs[input] || train_params;
        self.push(
            out,
            Op::BnRelu {
                input,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats: train,
                train_params,
            },
            needs,
        )
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs[input];
        self.push(out, Op::Sigmoid { input }, needs)
    }

    pub fn clamp01(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| v.clamp(0.0, 1.0));
        let needs = self.needs[input];
        self.push(out, Op::Clamp01 { input }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        let needs = self.needs_any(&[a, b]);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        let (n, h, w, _) = self.value(parts[0]).dim();
        let total: usize = parts.iter().map(|&p| self.value(p).dim().3).sum();
        let mut out = Array4::zeros((n, h, w, total));
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            let ci = v.dim().3;
            out.slice_mut(ndarray::s![.., .., .., c0..c0 + ci]).assign(v);
            c0 += ci;
        }
        let needs = self.needs_any(parts);
        self.push(
            out,
            Op::ConcatC {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_c(&mut self, input: NodeId, c0: usize, len: usize) -> NodeId {
        let out = self
            .value(input)
            .slice(ndarray::s![.., .., .., c0..c0 + len])
            .to_owned();
        let needs = self.needs[input];
        self.push(out, Op::SliceC { input, c0 }, needs)
    }

    pub fn crop_spatial(&mut self, input: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> NodeId {
        let out = self
            .value(input)
            .slice(ndarray::s![.., y0..y0 + h, x0..x0 + w, ..])
            .to_owned();
        let needs = self.needs[input];
        self.push(out, Op::CropSpatial { input, y0, x0 }, needs)
    }

    /// Adaptive average pooling: output cell (i, j) averages the input region
    /// rows [floor(i*H/gh), ceil((i+1)*H/gh)) and the analogous columns.
    pub fn adaptive_avg_pool(&mut self, input: NodeId, gh: usize, gw: usize) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        assert!(h >= gh && w >= gw, "pooling input smaller than target grid");
        let mut out = Array4::zeros((n, gh, gw, c));
        for ni in 0..n {
            for gy in 0..gh {
                let (y0, y1) = pool_range(gy, h, gh);
                for gx in 0..gw {
                    let (x0, x1) = pool_range(gx, w, gw);
                    let area = ((y1 - y0) * (x1 - x0)) as f64;
                    let mut acc = vec![0.0f64; c];
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            for ci in 0..c {
                                acc[ci] += x[(ni, y, xx, ci)] as f64;
                            }
                        }
                    }
                    for ci in 0..c {
                        out[(ni, gy, gx, ci)] = (acc[ci] / area) as f32;
                    }
                }
            }
        }
        let needs = self.needs[input];
        self.push(out, Op::AdaptiveAvgPool { input }, needs)
    }

    pub fn affine(&mut self, input: NodeId, mul: f32, add: f32) -> NodeId {
        let out = self.value(input).mapv(|v| v * mul + add);
        let needs = self.needs[input];
        self.push(out, Op::Affine { input, mul }, needs)
    }

    /// `out = mask * input + (1 - mask) * other`, with `other` constant.
    pub fn pixel_mix(&mut self, input: NodeId, mask: Array3<f32>, other: &Array4<f32>) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        assert_eq!(mask.dim(), (n, h, w));
        assert_eq!(other.dim(), x.dim());
        let mut out = Array4::zeros((n, h, w, c));
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mk = mask[(ni, y, xx)];
                    for ci in 0..c {
                        out[(ni, y, xx, ci)] =
                            mk * x[(ni, y, xx, ci)] + (1.0 - mk) * other[(ni, y, xx, ci)];
                    }
                }
            }
        }
        let needs = self.needs[input];
        self.push(out, Op::PixelMix { input, mask }, needs)
    }

    pub fn resample(&mut self, input: NodeId, taps: Arc<ResampleTaps>) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        assert_eq!((h, w), (taps.in_h, taps.in_w), "resample input shape");
        let xs = x.as_slice().unwrap();
        let mut out = Array4::zeros((n, taps.out_h, taps.out_w, c));
        let os = out.as_slice_mut().unwrap();
        let opix = taps.out_h * taps.out_w;
        let ipix = h * w;
        for ni in 0..n {
            for p in 0..opix {
                let dst = &mut os[(ni * opix + p) * c..(ni * opix + p) * c + c];
                for t in taps.offsets[p]..taps.offsets[p + 1] {
                    let sidx = (ni * ipix + taps.src[t as usize] as usize) * c;
                    let wt = taps.weight[t as usize];
                    for (d, &s) in dst.iter_mut().zip(&xs[sidx..sidx + c]) {
                        *d += wt * s;
                    }
                }
            }
        }
        let needs = self.needs[input];
        self.push(out, Op::Resample { input, taps }, needs)
    }

    pub fn pad_reflect(&mut self, input: NodeId, r: usize) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        assert!(r < h && r < w, "reflect padding exceeds image size");
        let mut out = Array4::zeros((n, h + 2 * r, w + 2 * r, c));
        for ni in 0..n {
            for y in 0..h + 2 * r {
                let sy = reflect_index(y as isize - r as isize, h);
                for xx in 0..w + 2 * r {
                    let sx = reflect_index(xx as isize - r as isize, w);
                    for ci in 0..c {
                        out[(ni, y, xx, ci)] = x[(ni, sy, sx, ci)];
                    }
                }
            }
        }
        let needs = self.needs[input];
        self.push(out, Op::PadReflect { input, r }, needs)
    }

    pub fn pad_replicate(&mut self, input: NodeId, bottom: usize, right: usize) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        let mut out = Array4::zeros((n, h + bottom, w + right, c));
        for ni in 0..n {
            for y in 0..h + bottom {
                let sy = y.min(h - 1);
                for xx in 0..w + right {
                    let sx = xx.min(w - 1);
                    for ci in 0..c {
                        out[(ni, y, xx, ci)] = x[(ni, sy, sx, ci)];
                    }
                }
            }
        }
        let needs = self.needs[input];
        self.push(out, Op::PadReplicate { input, bottom, right }, needs)
    }

    /// Separable valid convolution with a symmetric 1-D kernel applied to
    /// both spatial axes. Output is (H-K+1, W-K+1).
    pub fn sep_conv_valid(&mut self, input: NodeId, kernel: Arc<Vec<f32>>) -> NodeId {
        let out = sep_conv_valid_fwd(self.value(input), &kernel);
        let needs = self.needs[input];
        self.push(out, Op::SepConvValid { input, kernel }, needs)
    }

    /// Blockwise 8x8 orthonormal DCT-II (or its inverse) on every channel.
    /// Spatial dims must be multiples of 8.
    pub fn dct8x8(&mut self, input: NodeId, inverse: bool) -> NodeId {
        let out = dct_apply(self.value(input), inverse);
        let needs = self.needs[input];
        self.push(out, Op::Dct8x8 { input, inverse }, needs)
    }

    pub fn scale_table(
        &mut self,
        input: NodeId,
        table: Arc<ndarray::Array2<f32>>,
        divide: bool,
    ) -> NodeId {
        let x = self.value(input);
        let (n, h, w, c) = x.dim();
        assert_eq!(table.dim(), (h, w));
        let mut out = x.clone();
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let t = table[(y, xx)];
                    for ci in 0..c {
                        let v = &mut out[(ni, y, xx, ci)];
                        *v = if divide { *v / t } else { *v * t };
                    }
                }
            }
        }
        let needs = self.needs[input];
        self.push(out, Op::ScaleTable { input, table, divide }, needs)
    }

    /// The stochastic rounding surrogate applied to quantized coefficients:
    /// zero inside the dead zone, `x + noise` outside. `keep` is 1 outside
    /// the dead zone and `noise` is already scaled by the caller.
    pub fn dead_zone(&mut self, input: NodeId, keep: Array4<f32>, noise: &Array4<f32>) -> NodeId {
        let x = self.value(input);
        let mut out = x.clone();
        ndarray::Zip::from(&mut out)
            .and(&keep)
            .and(noise)
            .for_each(|o, &k, &nz| *o = k * (*o + nz));
        let needs = self.needs[input];
        self.push(out, Op::DeadZone { input, keep }, needs)
    }

    pub fn mse_loss(&mut self, input: NodeId, target: Arc<Array4<f32>>) -> NodeId {
        let x = self.value(input);
        assert_eq!(x.dim(), target.dim());
        let mut acc = 0.0f64;
        for (&a, &t) in x.iter().zip(target.iter()) {
            let d = a as f64 - t as f64;
            acc += d * d;
        }
        let v = (acc / x.len() as f64) as f32;
        let needs = self.needs[input];
        self.push(scalar4(v), Op::MseLoss { input, target }, needs)
    }

    pub fn l1_mean_loss(&mut self, input: NodeId, target: Arc<Array4<f32>>) -> NodeId {
        let x = self.value(input);
        assert_eq!(x.dim(), target.dim());
        let mut acc = 0.0f64;
        for (&a, &t) in x.iter().zip(target.iter()) {
            acc += (a as f64 - t as f64).abs();
        }
        let v = (acc / x.len() as f64) as f32;
        let needs = self.needs[input];
        self.push(scalar4(v), Op::L1MeanLoss { input, target }, needs)
    }

    /// Mean over grid slices of the population variance of the per-channel
    /// absolute differences |x - t|.
    pub fn slice_var_loss(&mut self, input: NodeId, target: Arc<Array4<f32>>) -> NodeId {
        let x = self.value(input);
        assert_eq!(x.dim(), target.dim());
        let (n, h, w, c) = x.dim();
        let mut acc = 0.0f64;
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ci in 0..c {
                        let d = (x[(ni, y, xx, ci)] as f64 - target[(ni, y, xx, ci)] as f64).abs();
                        s1 += d;
                        s2 += d * d;
                    }
                    let mu = s1 / c as f64;
                    acc += s2 / c as f64 - mu * mu;
                }
            }
        }
        let v = (acc / (n * h * w) as f64) as f32;
        let needs = self.needs[input];
        self.push(scalar4(v), Op::SliceVarLoss { input, target }, needs)
    }

    /// Mean over the batch of log(1 - s), with s clamped away from {0, 1}.
    pub fn mean_log_one_minus(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let mut acc = 0.0f64;
        for &s in x.iter() {
            acc += (1.0 - clamp_unit(s as f64)).ln();
        }
        let v = (acc / x.len() as f64) as f32;
        let needs = self.needs[input];
        self.push(scalar4(v), Op::MeanLogOneMinus { input }, needs)
    }

    /// Mean over the batch of log(s), with s clamped away from {0, 1}.
    pub fn mean_log(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let mut acc = 0.0f64;
        for &s in x.iter() {
            acc += clamp_unit(s as f64).ln();
        }
        let v = (acc / x.len() as f64) as f32;
        let needs = self.needs[input];
        self.push(scalar4(v), Op::MeanLog { input }, needs)
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f32)]) -> NodeId {
        let mut acc = 0.0f64;
        for &(id, w) in terms {
            acc += self.scalar(id) as f64 * w as f64;
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs_any(&ids);
        self.push(
            scalar4(acc as f32),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagate from `root`, seeding its gradient with `seed`.
    /// Parameter gradients accumulate into `store`; leaf gradients are kept
    /// on the graph and can be read with [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId, seed: f32, store: &mut ParamStore) {
        let shape = self.value(root).raw_dim();
        self.backward_with(root, Array4::from_elem(shape, seed), store);
    }

    /// Back-propagate from `root` with an explicit output gradient.
    pub fn backward_with(&mut self, root: NodeId, grad: Array4<f32>, store: &mut ParamStore) {
        assert_eq!(self.value(root).raw_dim(), grad.raw_dim());
        self.grads[root] = Some(grad);
        for id in (0..=root).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, g, store);
            // The node's value is no longer needed: every consumer ran its
            // backward already and the node's own backward just completed.
            if !matches!(self.ops[id], Op::Leaf) {
                self.vals[id] = None;
            }
        }
    }

    fn backprop_node(&mut self, id: NodeId, g: Array4<f32>, store: &mut ParamStore) {
        match std::mem::replace(&mut self.ops[id], Op::Leaf) {
            Op::Leaf => {
                self.ops[id] = Op::Leaf;
                // keep accumulated gradient visible via Graph::grad
                self.grads[id] = Some(g);
            }
            Op::Conv {
                input,
                w,
                b,
                pad,
                train_params,
            } => {
                if train_params {
                    let x = self.value(input).clone();
                    let p = store.get_mut(w);
                    let mut dw = params::as4_mut(&mut p.grad);
                    conv::conv_backward_weights(&x, &g, &mut dw, None, pad);
                    if let Some(bid) = b {
                        let bp = store.get_mut(bid);
                        let dbs = bp.grad.as_slice_mut().unwrap();
                        for row in g.rows() {
                            let rs = row.to_slice().unwrap();
                            for (d, &gv) in dbs.iter_mut().zip(rs) {
                                *d += gv;
                            }
                        }
                    }
                }
                if self.needs[input] {
                    let wv = store.get(w).value.clone();
                    let wv = wv.view().into_dimensionality().unwrap();
                    let din = conv::conv_backward_data(&g, &wv, pad);
                    self.add_grad(input, din);
                }
            }
            Op::BnRelu {
                input,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
                train_params,
            } => {
                let y = self.value(id);
                let x = self.value(input);
                let (n, h, w, c) = x.dim();
                let m = (n * h * w) as f64;
                let gamma_v = params::as1(&store.get(gamma).value);

                // ReLU mask folds into the incoming gradient.
                let mut gm = g;
                ndarray::Zip::from(&mut gm).and(y).for_each(|gv, &yv| {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                });

                let mut s1 = vec![0.0f64; c]; // sum g
                let mut s2 = vec![0.0f64; c]; // sum g * xhat
                for (gp, xp) in gm.rows().into_iter().zip(x.rows()) {
                    let gp = gp.to_slice().unwrap();
                    let xp = xp.to_slice().unwrap();
                    for ci in 0..c {
                        let xh = (xp[ci] - mean[ci]) * invstd[ci];
                        s1[ci] += gp[ci] as f64;
                        s2[ci] += gp[ci] as f64 * xh as f64;
                    }
                }
                if train_params {
                    {
                        let bp = store.get_mut(beta);
                        for (d, &v) in bp.grad.iter_mut().zip(&s1) {
                            *d += v as f32;
                        }
                    }
                    let gp = store.get_mut(gamma);
                    for (d, &v) in gp.grad.iter_mut().zip(&s2) {
                        *d += v as f32;
                    }
                }
                if self.needs[input] {
                    let mut din = Array4::zeros((n, h, w, c));
                    for ((dp, gp), xp) in din
                        .rows_mut()
                        .into_iter()
                        .zip(gm.rows())
                        .zip(x.rows())
                    {
                        let dp = dp.into_slice().unwrap();
                        let gp = gp.to_slice().unwrap();
                        let xp = xp.to_slice().unwrap();
                        for ci in 0..c {
                            let k = gamma_v[ci] * invstd[ci];
                            dp[ci] = if batch_stats {
                                let xh = (xp[ci] - mean[ci]) * invstd[ci];
                                k * (gp[ci]
                                    - (s1[ci] / m) as f32
                                    - xh * (s2[ci] / m) as f32)
                            } else {
                                k * gp[ci]
                            };
                        }
                    }
                    self.add_grad(input, din);
                }
            }
            Op::Sigmoid { input } => {
                let y = self.value(id);
                let mut din = g;
                ndarray::Zip::from(&mut din).and(y).for_each(|d, &yv| {
                    *d *= yv * (1.0 - yv);
                });
                self.add_grad(input, din);
            }
            Op::Clamp01 { input } => {
                let x = self.value(input);
                let mut din = g;
                ndarray::Zip::from(&mut din).and(x).for_each(|d, &xv| {
                    if !(0.0..=1.0).contains(&xv) {
                        *d = 0.0;
                    }
                });
                self.add_grad(input, din);
            }
            Op::Add { a, b } => {
                if self.needs[a] {
                    self.add_grad(a, g.clone());
                }
                if self.needs[b] {
                    self.add_grad(b, g);
                }
            }
            Op::ConcatC { parts } => {
                let mut c0 = 0;
                for &p in &parts {
                    let ci = self.value(p).dim().3;
                    if self.needs[p] {
                        let gp = g.slice(ndarray::s![.., .., .., c0..c0 + ci]).to_owned();
                        self.add_grad(p, gp);
                    }
                    c0 += ci;
                }
            }
            Op::SliceC { input, c0 } => {
                let dim = self.value(input).raw_dim();
                let len = g.dim().3;
                let mut din = Array4::zeros(dim);
                din.slice_mut(ndarray::s![.., .., .., c0..c0 + len]).assign(&g);
                self.add_grad(input, din);
            }
            Op::CropSpatial { input, y0, x0 } => {
                let dim = self.value(input).raw_dim();
                let (_, h, w, _) = g.dim();
                let mut din = Array4::zeros(dim);
                din.slice_mut(ndarray::s![.., y0..y0 + h, x0..x0 + w, ..]).assign(&g);
                self.add_grad(input, din);
            }
            Op::AdaptiveAvgPool { input } => {
                let x = self.value(input);
                let (n, h, w, c) = x.dim();
                let (_, gh, gw, _) = g.dim();
                let mut din = Array4::zeros((n, h, w, c));
                for ni in 0..n {
                    for gy in 0..gh {
                        let (y0, y1) = pool_range(gy, h, gh);
                        for gx in 0..gw {
                            let (x0, x1) = pool_range(gx, w, gw);
                            let area = ((y1 - y0) * (x1 - x0)) as f32;
                            for ci in 0..c {
                                let gv = g[(ni, gy, gx, ci)] / area;
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        din[(ni, y, xx, ci)] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::Affine { input, mul } => {
                let mut din = g;
                din.mapv_inplace(|v| v * mul);
                self.add_grad(input, din);
            }
            Op::PixelMix { input, mask } => {
                let (n, h, w, c) = g.dim();
                let mut din = g;
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let mk = mask[(ni, y, xx)];
                            for ci in 0..c {
                                din[(ni, y, xx, ci)] *= mk;
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::Resample { input, taps } => {
                let (n, _, _, c) = g.dim();
                let mut din = Array4::zeros((n, taps.in_h, taps.in_w, c));
                let gs = g.as_slice().unwrap();
                let ds = din.as_slice_mut().unwrap();
                let opix = taps.out_h * taps.out_w;
                let ipix = taps.in_h * taps.in_w;
                for ni in 0..n {
                    for p in 0..opix {
                        let src_g = &gs[(ni * opix + p) * c..(ni * opix + p) * c + c];
                        for t in taps.offsets[p]..taps.offsets[p + 1] {
                            let didx = (ni * ipix + taps.src[t as usize] as usize) * c;
                            let wt = taps.weight[t as usize];
                            for (gi, d) in src_g.iter().zip(&mut ds[didx..didx + c]) {
                                *d += wt * gi;
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::PadReflect { input, r } => {
                let (n, h, w, c) = self.value(input).dim();
                let mut din = Array4::zeros((n, h, w, c));
                for ni in 0..n {
                    for y in 0..h + 2 * r {
                        let sy = reflect_index(y as isize - r as isize, h);
                        for xx in 0..w + 2 * r {
                            let sx = reflect_index(xx as isize - r as isize, w);
                            for ci in 0..c {
                                din[(ni, sy, sx, ci)] += g[(ni, y, xx, ci)];
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::PadReplicate { input, bottom, right } => {
                let (n, h, w, c) = self.value(input).dim();
                let mut din = Array4::zeros((n, h, w, c));
                for ni in 0..n {
                    for y in 0..h + bottom {
                        let sy = y.min(h - 1);
                        for xx in 0..w + right {
                            let sx = xx.min(w - 1);
                            for ci in 0..c {
                                din[(ni, sy, sx, ci)] += g[(ni, y, xx, ci)];
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::SepConvValid { input, kernel } => {
                let (n, h, w, c) = self.value(input).dim();
                let k = kernel.len();
                let (_, oh, ow, _) = g.dim();
                let mut din = Array4::zeros((n, h, w, c));
                // dIn[y+i][x+j] += k[i] * k[j] * g[y][x]
                for ni in 0..n {
                    for y in 0..oh {
                        for xx in 0..ow {
                            for i in 0..k {
                                let kyw = kernel[i];
                                for j in 0..k {
                                    let wt = kyw * kernel[j];
                                    for ci in 0..c {
                                        din[(ni, y + i, xx + j, ci)] += wt * g[(ni, y, xx, ci)];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::Dct8x8 { input, inverse } => {
                // The transform is orthonormal: the adjoint is the inverse.
                let din = dct_apply(&g, !inverse);
                self.add_grad(input, din);
            }
            Op::ScaleTable { input, table, divide } => {
                let (n, h, w, c) = g.dim();
                let mut din = g;
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let t = table[(y, xx)];
                            for ci in 0..c {
                                let d = &mut din[(ni, y, xx, ci)];
                                *d = if divide { *d / t } else { *d * t };
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::DeadZone { input, keep } => {
                let mut din = g;
                ndarray::Zip::from(&mut din).and(&keep).for_each(|d, &k| *d *= k);
                self.add_grad(input, din);
            }
            Op::MseLoss { input, target } => {
                let x = self.value(input);
                let scale = 2.0 * g[(0, 0, 0, 0)] / x.len() as f32;
                let mut din = x.clone();
                ndarray::Zip::from(&mut din).and(target.as_ref()).for_each(|d, &t| {
                    *d = (*d - t) * scale;
                });
                self.add_grad(input, din);
            }
            Op::L1MeanLoss { input, target } => {
                let x = self.value(input);
                let scale = g[(0, 0, 0, 0)] / x.len() as f32;
                let mut din = x.clone();
                ndarray::Zip::from(&mut din).and(target.as_ref()).for_each(|d, &t| {
                    *d = (*d - t).signum_or_zero() * scale;
                });
                self.add_grad(input, din);
            }
            Op::SliceVarLoss { input, target } => {
                let x = self.value(input);
                let (n, h, w, c) = x.dim();
                let scale = g[(0, 0, 0, 0)] / (n * h * w) as f32;
                let mut din = Array4::zeros((n, h, w, c));
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let mut mu = 0.0f64;
                            for ci in 0..c {
                                mu += (x[(ni, y, xx, ci)] as f64
                                    - target[(ni, y, xx, ci)] as f64)
                                    .abs();
                            }
                            mu /= c as f64;
                            for ci in 0..c {
                                let diff =
                                    x[(ni, y, xx, ci)] - target[(ni, y, xx, ci)];
                                let d = diff.abs() as f64;
                                let dvar = 2.0 * (d - mu) / c as f64;
                                din[(ni, y, xx, ci)] =
                                    dvar as f32 * diff.signum_or_zero() * scale;
                            }
                        }
                    }
                }
                self.add_grad(input, din);
            }
            Op::MeanLogOneMinus { input } => {
                let x = self.value(input);
                let scale = g[(0, 0, 0, 0)] / x.len() as f32;
                let din = x.mapv(|s| -scale / (1.0 - clamp_unit(s as f64) as f32));
                self.add_grad(input, din);
            }
            Op::MeanLog { input } => {
                let x = self.value(input);
                let scale = g[(0, 0, 0, 0)] / x.len() as f32;
                let din = x.mapv(|s| scale / clamp_unit(s as f64) as f32);
                self.add_grad(input, din);
            }
            Op::WeightedSum { terms } => {
                let gv = g[(0, 0, 0, 0)];
                for (id, w) in terms {
                    if self.needs[id] {
                        self.add_grad(id, scalar4(gv * w));
                    }
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f32;
}

impl SignumOrZero for f32 {
    fn signum_or_zero(self) -> f32 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

fn scalar4(v: f32) -> Array4<f32> {
    Array4::from_elem((1, 1, 1, 1), v)
}

fn clamp_unit(s: f64) -> f64 {
    s.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Pooling region of cell `i` out of `g` cells over `n` input positions.
fn pool_range(i: usize, n: usize, g: usize) -> (usize, usize) {
    let start = i * n / g;
    let end = ((i + 1) * n).div_ceil(g);
    (start, end)
}

/// Reflection without edge repetition: -1 -> 1, n -> n-2.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

fn sep_conv_valid_fwd(x: &Array4<f32>, kernel: &[f32]) -> Array4<f32> {
    let (n, h, w, c) = x.dim();
    let k = kernel.len();
    let oh = h - k + 1;
    let ow = w - k + 1;
    // horizontal pass
    let mut tmp = Array4::zeros((n, h, ow, c));
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..ow {
                for ci in 0..c {
                    let mut acc = 0.0f32;
                    for j in 0..k {
                        acc += kernel[j] * x[(ni, y, xx + j, ci)];
                    }
                    tmp[(ni, y, xx, ci)] = acc;
                }
            }
        }
    }
    // vertical pass
    let mut out = Array4::zeros((n, oh, ow, c));
    for ni in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                for ci in 0..c {
                    let mut acc = 0.0f32;
                    for i in 0..k {
                        acc += kernel[i] * tmp[(ni, y + i, xx, ci)];
                    }
                    out[(ni, y, xx, ci)] = acc;
                }
            }
        }
    }
    out
}

fn dct_apply(x: &Array4<f32>, inverse: bool) -> Array4<f32> {
    let (n, h, w, c) = x.dim();
    assert!(h % 8 == 0 && w % 8 == 0, "dct8x8 needs 8-aligned dims");
    let mut out = Array4::zeros((n, h, w, c));
    let mut block = [0.0f64; 64];
    for ni in 0..n {
        for ci in 0..c {
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    for i in 0..8 {
                        for j in 0..8 {
                            block[i * 8 + j] = x[(ni, by + i, bx + j, ci)] as f64;
                        }
                    }
                    if inverse {
                        crate::jpeg::idct8x8_in_place(&mut block);
                    } else {
                        crate::jpeg::dct8x8_in_place(&mut block);
                    }
                    for i in 0..8 {
                        for j in 0..8 {
                            out[(ni, by + i, bx + j, ci)] = block[i * 8 + j] as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_points, project, projection};
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand4(rng: &mut ChaCha12Rng, d: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut a = Array4::zeros(d);
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0f32);
        }
        a
    }

    /// Generic finite-difference check of one graph construction.
    fn check_op(
        seed: u64,
        x0: Array4<f32>,
        build: impl Fn(&mut Graph, NodeId, &mut ParamStore) -> NodeId,
        tol: f64,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let leaf = g.leaf(x0.clone(), true);
        let out = build(&mut g, leaf, &mut store);
        let r = projection(&mut rng, g.value(out).dim());
        g.backward_with(out, r.clone(), &mut store);
        let analytic = g.grad(leaf).unwrap().clone();

        let f = |x: &Array4<f32>| -> f64 {
            let mut store = ParamStore::new();
            let mut g = Graph::new();
            let leaf = g.leaf(x.clone(), false);
            let out = build(&mut g, leaf, &mut store);
            project(g.value(out), &r)
        };
        let dim = x0.dim();
        let mut pts = Vec::new();
        for _ in 0..6 {
            pts.push((
                rng.random_range(0..dim.0),
                rng.random_range(0..dim.1),
                rng.random_range(0..dim.2),
                rng.random_range(0..dim.3),
            ));
        }
        for c in check_points(&f, &x0, &analytic, &pts, 1e-2, 1e-4) {
            assert!(
                c.rel_err < tol,
                "seed {seed}: point {:?} analytic {} numeric {} rel {}",
                c.index,
                c.analytic,
                c.numeric,
                c.rel_err
            );
        }
    }

    fn fixed_store_conv(store: &mut ParamStore, rng: &mut ChaCha12Rng, kh: usize, cin: usize, cout: usize) -> (ParamId, ParamId) {
        let w = store.add("w", params::init_conv_weight(rng, kh, kh, cin, cout), true);
        let b = store.add("b", params::init_bias(rng, kh * kh * cin, cout), true);
        (w, b)
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let x = rand4(&mut rng, (2, 6, 6, 3));

        check_op(1, x.clone(), |g, l, store| {
            let mut prng = ChaCha12Rng::seed_from_u64(500);
            let (w, b) = fixed_store_conv(store, &mut prng, 3, 3, 4);
            g.conv(store, l, w, Some(b), 1, false)
        }, 1e-2);

        check_op(2, x.clone(), |g, l, _| g.sigmoid(l), 1e-2);
        check_op(3, x.clone(), |g, l, _| g.affine(l, 1.7, -0.3), 1e-2);
        check_op(4, x.clone(), |g, l, _| {
            let a = g.affine(l, 0.5, 0.0);
            g.add(a, l)
        }, 1e-2);
        check_op(5, x.clone(), |g, l, _| {
            let parts = g.concat_c(&[l, l]);
            g.slice_c(parts, 2, 3)
        }, 1e-2);
        check_op(6, x.clone(), |g, l, _| g.crop_spatial(l, 1, 2, 4, 3), 1e-2);
        check_op(7, x.clone(), |g, l, _| g.adaptive_avg_pool(l, 3, 2), 1e-2);
        check_op(8, x.clone(), |g, l, _| g.pad_reflect(l, 2), 1e-2);
        check_op(9, x.clone(), |g, l, _| g.pad_replicate(l, 2, 3), 1e-2);
        check_op(10, x.clone(), |g, l, _| {
            let k = Arc::new(crate::attacks::gaussian_kernel(2));
            let p = g.pad_reflect(l, 2);
            g.sep_conv_valid(p, k)
        }, 1e-2);

        let mut mrng = ChaCha12Rng::seed_from_u64(42);
        let mask = {
            let mut m = Array3::zeros((2, 6, 6));
            for v in m.iter_mut() {
                *v = if mrng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 };
            }
            m
        };
        let other = rand4(&mut mrng, (2, 6, 6, 3));
        check_op(11, x.clone(), move |g, l, _| g.pixel_mix(l, mask.clone(), &other), 1e-2);

        check_op(12, x.clone(), |g, l, _| {
            let taps = Arc::new(crate::attacks::resize_taps(6, 6, 4, 5, crate::attacks::ResizeMode::Bilinear));
            g.resample(l, taps)
        }, 1e-2);
        check_op(13, x.clone(), |g, l, _| {
            let taps = Arc::new(crate::attacks::rotate_taps(6, 6, 23.0));
            g.resample(l, taps)
        }, 1e-2);
    }

    #[test]
    fn bn_relu_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(200);
        let x = rand4(&mut rng, (2, 5, 5, 3));
        for train in [true, false] {
            check_op(20 + train as u64, x.clone(), move |g, l, store| {
                let mut prng = ChaCha12Rng::seed_from_u64(77);
                let gamma = store.add("g", ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3]), |_| prng.random_range(0.5..1.5f32)), true);
                let beta = store.add("b", ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3]), |_| prng.random_range(-0.5..0.5f32)), true);
                let rm = store.add("rm", ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3]), |_| prng.random_range(-0.2..0.2f32)), false);
                let rv = store.add("rv", ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3]), |_| prng.random_range(0.5..1.5f32)), false);
                g.bn_relu(store, l, gamma, beta, rm, rv, train, false)
            }, 2e-2);
        }
    }

    #[test]
    fn dct_and_table_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(300);
        let x = rand4(&mut rng, (1, 8, 8, 2));
        check_op(30, x.clone(), |g, l, _| g.dct8x8(l, false), 1e-2);
        check_op(31, x.clone(), |g, l, _| g.dct8x8(l, true), 1e-2);

        let table = Arc::new(Array2::from_shape_fn((8, 8), |(y, x)| 1.0 + (y * 8 + x) as f32));
        let t2 = table.clone();
        check_op(32, x.clone(), move |g, l, _| g.scale_table(l, table.clone(), true), 1e-2);
        check_op(33, x.clone(), move |g, l, _| g.scale_table(l, t2.clone(), false), 1e-2);

        // dead zone: fixed keep mask, additive noise
        let mut mrng = ChaCha12Rng::seed_from_u64(7);
        let keep = x.mapv(|_| if mrng.random_range(0.0..1.0) < 0.6 { 1.0 } else { 0.0 });
        let noise = rand4(&mut mrng, (1, 8, 8, 2));
        check_op(34, x, move |g, l, _| g.dead_zone(l, keep.clone(), &noise), 1e-2);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(400);
        let x = rand4(&mut rng, (2, 3, 3, 4));
        let target = Arc::new(rand4(&mut rng, (2, 3, 3, 4)));
        let t1 = target.clone();
        let t2 = target.clone();
        check_op(40, x.clone(), move |g, l, _| g.mse_loss(l, target.clone()), 1e-2);
        check_op(41, x.clone(), move |g, l, _| g.l1_mean_loss(l, t1.clone()), 1e-2);
        check_op(42, x.clone(), move |g, l, _| g.slice_var_loss(l, t2.clone()), 2e-2);

        let s = {
            let mut s = Array4::zeros((3, 1, 1, 1));
            s[(0, 0, 0, 0)] = 0.3;
            s[(1, 0, 0, 0)] = 0.6;
            s[(2, 0, 0, 0)] = 0.9;
            s
        };
        check_op(43, s.clone(), |g, l, _| g.mean_log_one_minus(l), 1e-2);
        check_op(44, s, |g, l, _| g.mean_log(l), 1e-2);
    }

    #[test]
    fn weighted_sum_combines_losses() {
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let x = rand4(&mut rng, (1, 4, 4, 2));
        let ta = Arc::new(rand4(&mut rng, (1, 4, 4, 2)));
        let tb = Arc::new(rand4(&mut rng, (1, 4, 4, 2)));
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let l = g.leaf(x, true);
        let a = g.mse_loss(l, ta);
        let b = g.l1_mean_loss(l, tb);
        let total = g.weighted_sum(&[(a, 4.0), (b, 0.5)]);
        let expect = 4.0 * g.scalar(a) + 0.5 * g.scalar(b);
        assert!((g.scalar(total) - expect).abs() < 1e-6);
        g.backward(total, 1.0, &mut store);
        assert!(g.grad(l).is_some());
    }

    #[test]
    fn conv_accumulates_param_grads_only_when_trainable() {
        let mut rng = ChaCha12Rng::seed_from_u64(70);
        let x = rand4(&mut rng, (1, 4, 4, 2));
        for trainable in [false, true] {
            let mut store = ParamStore::new();
            let w = store.add("w", params::init_conv_weight(&mut rng, 3, 3, 2, 2), true);
            let mut g = Graph::new();
            let l = g.leaf(x.clone(), true);
            let c = g.conv(&store, l, w, None, 1, trainable);
            let t = Arc::new(Array4::zeros((1, 4, 4, 2)));
            let loss = g.mse_loss(c, t);
            g.backward(loss, 1.0, &mut store);
            let gn = store.grad_norm();
            if trainable {
                assert!(gn > 0.0);
            } else {
                assert_eq!(gn, 0.0);
            }
        }
    }

    #[test]
    fn clamp_passes_gradient_only_inside_range() {
        let mut x = Array4::zeros((1, 1, 1, 3));
        x[(0, 0, 0, 0)] = -0.5;
        x[(0, 0, 0, 1)] = 0.5;
        x[(0, 0, 0, 2)] = 1.5;
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let l = g.leaf(x, true);
        let c = g.clamp01(l);
        g.backward(c, 1.0, &mut store);
        let gr = g.grad(l).unwrap();
        assert_eq!(gr[(0, 0, 0, 0)], 0.0);
        assert_eq!(gr[(0, 0, 0, 1)], 1.0);
        assert_eq!(gr[(0, 0, 0, 2)], 0.0);
    }

    #[test]
    fn pool_regions_cover_input_exactly() {
        for (n, g) in [(144, 16), (100, 16), (64, 16), (8, 8)] {
            let mut covered = vec![0usize; n];
            for i in 0..g {
                let (a, b) = pool_range(i, n, g);
                assert!(a < b && b <= n);
                for c in covered.iter_mut().take(b).skip(a) {
                    *c += 1;
                }
            }
            assert!(covered.iter().all(|&c| c >= 1));
            assert_eq!(pool_range(0, n, g).0, 0);
            assert_eq!(pool_range(g - 1, n, g).1, n);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(80);
        let x = rand4(&mut rng, (1, 8, 8, 3));
        let build = |x: &Array4<f32>| -> Array4<f32> {
            let mut store = ParamStore::new();
            let mut prng = ChaCha12Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let l = g.leaf(x.clone(), false);
            let w = store.add("w", params::init_conv_weight(&mut prng, 3, 3, 3, 4), true);
            let c = g.conv(&store, l, w, None, 1, false);
            let s = g.sigmoid(c);
            g.value(s).clone()
        };
        let a = build(&x);
        let b = build(&x);
        assert_eq!(a, b);
    }
}
