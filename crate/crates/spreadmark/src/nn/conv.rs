//! GEMM-backed 2-D convolution kernels on NHWC activations.
//!
//! A 3x3 stride-1 convolution is evaluated without materializing an im2col
//! buffer: for every output row and kernel row, the padded input row is a
//! strided (W x 3*Cin) matrix whose columns overlap, so a single GEMM per
//! (row, kernel-row) pair accumulates the full contribution.

use ndarray::{Array1, Array4, ArrayView4};

/// `dst (m x n) = [dst +] lhs (m x k) * rhs (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    dst: *mut f32,
    dst_rs: isize,
    dst_cs: isize,
    read_dst: bool,
    lhs: *const f32,
    lhs_rs: isize,
    lhs_cs: isize,
    rhs: *const f32,
    rhs_rs: isize,
    rhs_cs: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst,
            dst_cs,
            dst_rs,
            read_dst,
            lhs,
            lhs_cs,
            lhs_rs,
            rhs,
            rhs_cs,
            rhs_rs,
            1.0f32,
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Zero-pad the spatial dims of an NHWC tensor by `p` on every side.
pub fn pad_zero(x: &Array4<f32>, p: usize) -> Array4<f32> {
    let (n, h, w, c) = x.dim();
    let mut out = Array4::zeros((n, h + 2 * p, w + 2 * p, c));
    out.slice_mut(ndarray::s![.., p..p + h, p..p + w, ..])
        .assign(x);
    out
}

/// Forward convolution, stride 1. Supports the two kernel geometries used by
/// the networks: 3x3 with padding 1 and 1x1 with padding 0.
/// Weights are (kh, kw, cin, cout); output spatial size equals the input's.
pub fn conv_forward(
    x: &Array4<f32>,
    w: &ArrayView4<f32>,
    bias: Option<&Array1<f32>>,
    pad: usize,
) -> Array4<f32> {
    let (n, h, wid, cin) = x.dim();
    let (kh, kw, wcin, cout) = w.dim();
    assert_eq!(cin, wcin, "conv input channels");
    assert_eq!(pad * 2 + 1, kh, "stride-1 same conv expects pad=(k-1)/2");

    let mut out = Array4::zeros((n, h, wid, cout));
    if let Some(b) = bias {
        let bs = b.as_slice().unwrap();
        for v in out.rows_mut() {
            v.into_slice().unwrap().copy_from_slice(bs);
        }
    }

    if kh == 1 && kw == 1 {
        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        sgemm(
            n * h * wid,
            cout,
            cin,
            os.as_mut_ptr(),
            cout as isize,
            1,
            true,
            xs.as_ptr(),
            cin as isize,
            1,
            ws.as_ptr(),
            cout as isize,
            1,
        );
        return out;
    }

    let padded = pad_zero(x, pad);
    let (_, ph, pw, _) = padded.dim();
    let ps = padded.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let krow = kw * cin; // one kernel row of the flattened weight
    for ni in 0..n {
        for y in 0..h {
            let dst = unsafe { os.as_mut_ptr().add(((ni * h + y) * wid) * cout) };
            for ky in 0..kh {
                let src = ps.as_ptr();
                let row = ((ni * ph + y + ky) * pw) * cin;
                sgemm(
                    wid,
                    cout,
                    krow,
                    dst,
                    cout as isize,
                    1,
                    true,
                    unsafe { src.add(row) },
                    cin as isize,
                    1,
                    unsafe { ws.as_ptr().add(ky * krow * cout) },
                    cout as isize,
                    1,
                );
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: a same-size convolution of the
/// output gradient with the spatially flipped, channel-transposed kernel.
pub fn conv_backward_data(
    dout: &Array4<f32>,
    w: &ArrayView4<f32>,
    pad: usize,
) -> Array4<f32> {
    let (kh, kw, cin, cout) = w.dim();
    if kh == 1 && kw == 1 {
        // dIn = dOut * W^T, expressed directly through strides.
        let (n, h, wid, _) = dout.dim();
        let mut din = Array4::zeros((n, h, wid, cin));
        let ds = dout.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let is = din.as_slice_mut().unwrap();
        sgemm(
            n * h * wid,
            cin,
            cout,
            is.as_mut_ptr(),
            cin as isize,
            1,
            false,
            ds.as_ptr(),
            cout as isize,
            1,
            ws.as_ptr(),
            1,
            cout as isize,
        );
        return din;
    }
    let mut flipped = Array4::zeros((kh, kw, cout, cin));
    for ky in 0..kh {
        for kx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[(ky, kx, co, ci)] = w[(kh - 1 - ky, kw - 1 - kx, ci, co)];
                }
            }
        }
    }
    conv_forward(dout, &flipped.view(), None, kh - 1 - pad)
}

/// Accumulate gradients w.r.t. weights and bias into the provided buffers.
pub fn conv_backward_weights(
    x: &Array4<f32>,
    dout: &Array4<f32>,
    dw: &mut ndarray::ArrayViewMut4<f32>,
    dbias: Option<&mut Array1<f32>>,
    pad: usize,
) {
    let (n, h, wid, cin) = x.dim();
    let (kh, kw, _, cout) = dw.dim();

    if let Some(db) = dbias {
        let dbs = db.as_slice_mut().unwrap();
        for row in dout.rows() {
            let rs = row.to_slice().unwrap();
            for (d, &g) in dbs.iter_mut().zip(rs) {
                *d += g;
            }
        }
    }

    let ds = dout.as_slice().unwrap();
    if kh == 1 && kw == 1 {
        let xs = x.as_slice().unwrap();
        let dws = dw.as_slice_mut().unwrap();
        sgemm(
            cin,
            cout,
            n * h * wid,
            dws.as_mut_ptr(),
            cout as isize,
            1,
            true,
            xs.as_ptr(),
            1,
            cin as isize,
            ds.as_ptr(),
            cout as isize,
            1,
        );
        return;
    }

    let padded = pad_zero(x, pad);
    let (_, ph, pw, _) = padded.dim();
    let ps = padded.as_slice().unwrap();
    let dws = dw.as_slice_mut().unwrap();
    let krow = kw * cin;
    for ni in 0..n {
        for y in 0..h {
            let gout = unsafe { ds.as_ptr().add(((ni * h + y) * wid) * cout) };
            for ky in 0..kh {
                let row = ((ni * ph + y + ky) * pw) * cin;
                sgemm(
                    krow,
                    cout,
                    wid,
                    unsafe { dws.as_mut_ptr().add(ky * krow * cout) },
                    cout as isize,
                    1,
                    true,
                    unsafe { ps.as_ptr().add(row) },
                    1,
                    cin as isize,
                    gout,
                    cout as isize,
                    1,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn naive_conv(
        x: &Array4<f32>,
        w: &Array4<f32>,
        bias: Option<&Array1<f32>>,
        pad: usize,
    ) -> Array4<f32> {
        let (n, h, wid, cin) = x.dim();
        let (kh, kw, _, cout) = w.dim();
        let mut out = Array4::zeros((n, h, wid, cout));
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..wid {
                    for co in 0..cout {
                        let mut acc = bias.map(|b| b[co] as f64).unwrap_or(0.0);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wid as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x[(ni, sy as usize, sx as usize, ci)] as f64
                                        * w[(ky, kx, ci, co)] as f64;
                                }
                            }
                        }
                        out[(ni, y, xx, co)] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn rand4(rng: &mut ChaCha12Rng, d: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut a = Array4::zeros(d);
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0f32);
        }
        a
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &(kh, pad) in &[(3usize, 1usize), (1, 0)] {
            let x = rand4(&mut rng, (2, 5, 4, 3));
            let w = rand4(&mut rng, (kh, kh, 3, 6));
            let mut b = Array1::zeros(6);
            for v in b.iter_mut() {
                *v = rng.random_range(-0.5..0.5f32);
            }
            let got = conv_forward(&x, &w.view(), Some(&b), pad);
            let want = naive_conv(&x, &w, Some(&b), pad);
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-4, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for &(kh, pad) in &[(3usize, 1usize), (1, 0)] {
            let x = rand4(&mut rng, (1, 4, 4, 2));
            let w = rand4(&mut rng, (kh, kh, 2, 3));
            let proj = rand4(&mut rng, (1, 4, 4, 3));
            let j = |x: &Array4<f32>, w: &Array4<f32>| -> f64 {
                let out = conv_forward(x, &w.view(), None, pad);
                out.iter()
                    .zip(proj.iter())
                    .map(|(&o, &p)| o as f64 * p as f64)
                    .sum()
            };

            let dout = proj.clone();
            let din = conv_backward_data(&dout, &w.view(), pad);
            let mut dw = Array4::zeros(w.dim());
            conv_backward_weights(&x, &dout, &mut dw.view_mut(), None, pad);

            let h = 1e-2f32;
            for idx in [(0, 1, 2, 0), (0, 3, 3, 1), (0, 0, 0, 0)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (j(&xp, &w) - j(&xm, &w)) / (2.0 * h as f64);
                let an = din[idx] as f64;
                assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "din {fd} vs {an}");
            }
            for idx in [(0, 0, 0, 0), (kh - 1, kh - 1, 1, 2)] {
                let mut wp = w.clone();
                wp[idx] += h;
                let mut wm = w.clone();
                wm[idx] -= h;
                let fd = (j(&x, &wp) - j(&x, &wm)) / (2.0 * h as f64);
                let an = dw[idx] as f64;
                assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dw {fd} vs {an}");
            }
        }
    }
}
