//! Dense compute kernels behind the tape ops. All layouts are row-major;
//! images are NCHW, conv weights are [out_ch, in_ch, k, k].

use crate::scalar::Real;

pub fn conv2d_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (cout, k): (usize, usize),
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = conv2d_out_dim(h, k, stride, pad);
    let wo = conv2d_out_dim(w, k, stride, pad);
    for img in 0..n {
        let x_img = &x[img * cin * h * w..];
        let out_img = &mut out[img * cout * ho * wo..];
        for co in 0..cout {
            let b = bias.map_or(T::zero(), |bs| bs[co]);
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..wo {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let mut acc = b;
                    for ci in 0..cin {
                        let x_ch = &x_img[ci * h * w..(ci + 1) * h * w];
                        let w_ch = &wgt[((co * cin + ci) * k) * k..((co * cin + ci) * k + k) * k];
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                            let wrow = &w_ch[ky * k..(ky + 1) * k];
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + row[ix as usize] * wrow[kx];
                            }
                        }
                    }
                    out_img[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (cout, k): (usize, usize),
    stride: usize,
    pad: usize,
    grad_out: &[T],
    grad_x: &mut [T],
    grad_w: &mut [T],
    mut grad_b: Option<&mut [T]>,
) {
    let ho = conv2d_out_dim(h, k, stride, pad);
    let wo = conv2d_out_dim(w, k, stride, pad);
    for img in 0..n {
        let x_img = &x[img * cin * h * w..];
        let gx_img = &mut grad_x[img * cin * h * w..];
        let go_img = &grad_out[img * cout * ho * wo..];
        for co in 0..cout {
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..wo {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let g = go_img[(co * ho + oy) * wo + ox];
                    if let Some(gb) = grad_b.as_deref_mut() {
                        gb[co] += g;
                    }
                    for ci in 0..cin {
                        let base_x = ci * h * w;
                        let base_w = (co * cin + ci) * k * k;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = iy as usize * w;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = base_x + row + ix as usize;
                                let wi = base_w + ky * k + kx;
                                gx_img[xi] += g * wgt[wi];
                                grad_w[wi] += g * x_img[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over NCHW, no padding. Returns per-output argmax (linear index
/// into the input) for the backward pass; ties resolve to the first maximum
/// in scan order.
pub fn max_pool2d_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        let iy = oy * stride + ky;
                        for kx in 0..kernel {
                            let ix = ox * stride + kx;
                            let idx = base + iy * w + ix;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * wo + ox] = best;
                    argmax[obase + oy * wo + ox] = best_idx;
                }
            }
        }
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul_forward<T: Real>(a: &[T], b: &[T], (m, k, n): (usize, usize, usize), out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for v in orow.iter_mut() {
            *v = T::zero();
        }
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
}

pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    (m, k, n): (usize, usize, usize),
    grad_out: &[T],
    grad_a: &mut [T],
    grad_b: &mut [T],
) {
    // dA = dC * B^T
    for i in 0..m {
        let grow = &grad_out[i * n..(i + 1) * n];
        let garow = &mut grad_a[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc = acc + *gv * *bv;
            }
            garow[kk] += acc;
        }
    }
    // dB = A^T * dC
    for kk in 0..k {
        let gbrow = &mut grad_b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[i * k + kk];
            let grow = &grad_out[i * n..(i + 1) * n];
            for (gbv, gv) in gbrow.iter_mut().zip(grow) {
                *gbv += av * *gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_full_overlap_is_inner_product() {
        // 1x1x3x3 input against a 1x1x3x3 kernel, stride 1, pad 0.
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w: Vec<f64> = (1..=9).map(|v| (v as f64) * 0.1).collect();
        let mut out = vec![0.0];
        conv2d_forward(&x, (1, 1, 3, 3), &w, (1, 3), None, 1, 0, &mut out);
        let want: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((out[0] - want).abs() < 1e-12);
    }

    #[test]
    fn conv_padding_and_stride_dims() {
        assert_eq!(conv2d_out_dim(64, 3, 2, 1), 32);
        assert_eq!(conv2d_out_dim(5, 3, 1, 1), 5);
        let x = vec![1.0f64; 1 * 1 * 4 * 4];
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0; 2 * 2];
        conv2d_forward(&x, (1, 1, 4, 4), &w, (1, 3), Some(&[0.5]), 2, 1, &mut out);
        // corner output only overlaps a 2x2 patch of ones
        assert!((out[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_max_and_argmax() {
        let x = vec![1.0, 5.0, 2.0, 3.0, 4.0, 0.0, 7.0, 6.0, 8.0];
        let mut out = vec![0.0; 4];
        let mut arg = vec![0usize; 4];
        max_pool2d_forward(&x, (1, 1, 3, 3), 2, 1, &mut out, &mut arg);
        assert_eq!(out, vec![5.0, 5.0, 7.0, 8.0]);
        assert_eq!(arg, vec![1, 1, 6, 8]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = vec![0.0; 4];
        matmul_forward(&a, &b, (2, 3, 2), &mut out);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);
    }
}
