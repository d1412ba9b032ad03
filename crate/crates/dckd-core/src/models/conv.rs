//! 2-D convolution, pixel-shuffle upsampling, and activations with
//! hand-rolled backward passes.
//!
//! Tensors are channel-last (H, W, C). Convolutions go through im2col and a
//! single matrix product so the hot path lands in `matrixmultiply`. Weights
//! are stored as (kh, kw, c_in, c_out), which reshapes to the im2col column
//! order without copying.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView4};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower (H, W, Cin) into the (Ho*Wo, kh*kw*Cin) patch matrix. Out-of-bounds
/// taps read zero.
pub fn im2col(input: &Array3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (h, w, cin) = input.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let k = kh * kw * cin;
    let mut cols = Array2::<f64>::zeros((ho * wo, k));
    let src = input.as_slice().expect("input must be standard layout");
    let dst = cols.as_slice_mut().expect("cols is standard layout");
    let row_stride = kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row_base = (oy * wo + ox) * k;
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst_off = row_base + ky * row_stride;
                // Clip the kx run to the in-bounds x range and copy it whole.
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = ((w as isize - ix0).min(kw as isize)).max(0) as usize;
                if kx_lo >= kx_hi {
                    continue;
                }
                let ix = (ix0 + kx_lo as isize) as usize;
                let src_off = (iy as usize * w + ix) * cin;
                let len = (kx_hi - kx_lo) * cin;
                dst[dst_off + kx_lo * cin..dst_off + kx_lo * cin + len]
                    .copy_from_slice(&src[src_off..src_off + len]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch-matrix cotangents back onto the
/// input grid.
pub fn col2im(
    cols: &Array2<f64>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let k = kh * kw * cin;
    debug_assert_eq!(cols.dim(), (ho * wo, k));
    let mut out = Array3::<f64>::zeros((h, w, cin));
    let src = cols.as_slice().expect("cols must be standard layout");
    let dst = out.as_slice_mut().expect("out is standard layout");
    let row_stride = kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row_base = (oy * wo + ox) * k;
            let iy0 = (oy * stride) as isize - pad as isize;
            let ix0 = (ox * stride) as isize - pad as isize;
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src_off = row_base + ky * row_stride;
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = ((w as isize - ix0).min(kw as isize)).max(0) as usize;
                if kx_lo >= kx_hi {
                    continue;
                }
                let ix = (ix0 + kx_lo as isize) as usize;
                let dst_off = (iy as usize * w + ix) * cin;
                let len = (kx_hi - kx_lo) * cin;
                for i in 0..len {
                    dst[dst_off + i] += src[src_off + kx_lo * cin + i];
                }
            }
        }
    }
    out
}

fn weight_matrix(weight: &ArrayView4<f64>) -> Array2<f64> {
    let (kh, kw, cin, cout) = weight.dim();
    weight
        .to_owned()
        .into_shape_with_order((kh * kw * cin, cout))
        .expect("weight is standard layout")
}

/// Zero-padded strided convolution: (H, W, Cin) -> (Ho, Wo, Cout).
pub fn conv2d(
    input: &Array3<f64>,
    weight: &ArrayView4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (h, w, _cin) = input.dim();
    let (kh, kw, _, cout) = weight.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let cols = im2col(input, kh, kw, stride, pad);
    let mut out2 = cols.dot(&weight_matrix(weight));
    for mut row in out2.rows_mut() {
        row += bias;
    }
    out2.into_shape_with_order((ho, wo, cout)).expect("conv output shape")
}

/// Gradient of a conv output w.r.t. its input (transposed convolution).
pub fn conv2d_backward_input(
    grad_out: &Array3<f64>,
    weight: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let (ho, wo, cout) = grad_out.dim();
    let (kh, kw, cin, _) = weight.dim();
    let g2: ArrayView2<f64> = grad_out
        .view()
        .into_shape_with_order((ho * wo, cout))
        .expect("grad_out is standard layout");
    let wmat = weight_matrix(weight);
    let dcols = g2.dot(&wmat.t());
    col2im(&dcols, in_h, in_w, cin, kh, kw, stride, pad)
}

/// Gradients of a conv output w.r.t. weight and bias.
pub fn conv2d_backward_params(
    input: &Array3<f64>,
    grad_out: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array1<f64>) {
    let (_, _, cin) = input.dim();
    let (ho, wo, cout) = grad_out.dim();
    let cols = im2col(input, kh, kw, stride, pad);
    let g2: ArrayView2<f64> = grad_out
        .view()
        .into_shape_with_order((ho * wo, cout))
        .expect("grad_out is standard layout");
    let dw = cols.t().dot(&g2);
    let dweight = dw
        .into_shape_with_order((kh, kw, cin, cout))
        .expect("weight grad shape");
    let dbias = g2.sum_axis(ndarray::Axis(0));
    (dweight, dbias)
}

/// Depth-to-space: (H, W, C*r^2) -> (rH, rW, C), channel index c*r^2 + dy*r + dx.
pub fn pixel_shuffle(input: &Array3<f64>, r: usize) -> Array3<f64> {
    let (h, w, crr) = input.dim();
    debug_assert_eq!(crr % (r * r), 0);
    let c = crr / (r * r);
    Array3::from_shape_fn((h * r, w * r, c), |(y, x, ch)| {
        let (dy, dx) = (y % r, x % r);
        input[[y / r, x / r, ch * r * r + dy * r + dx]]
    })
}

/// Adjoint of [`pixel_shuffle`].
pub fn pixel_shuffle_backward(grad_out: &Array3<f64>, r: usize) -> Array3<f64> {
    let (hh, ww, c) = grad_out.dim();
    let (h, w) = (hh / r, ww / r);
    Array3::from_shape_fn((h, w, c * r * r), |(y, x, k)| {
        let ch = k / (r * r);
        let dy = (k % (r * r)) / r;
        let dx = k % r;
        grad_out[[y * r + dy, x * r + dx, ch]]
    })
}

/// Leaky ReLU used between restoration-model layers.
pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward through leaky ReLU given the layer *input*.
pub fn leaky_relu_backward(input: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(input, |gv, &iv| {
        if iv <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
    g
}

pub fn tanh(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(f64::tanh)
}

/// Backward through tanh given the layer *output*.
pub fn tanh_backward(output: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |gv, &ov| *gv *= 1.0 - ov * ov);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Nested-loop reference convolution, the independent oracle.
    fn conv2d_naive(
        input: &Array3<f64>,
        weight: &Array4<f64>,
        bias: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (h, w, cin) = input.dim();
        let (kh, kw, _, cout) = weight.dim();
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(w, kw, stride, pad);
        let mut out = Array3::zeros((ho, wo, cout));
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += input[[iy as usize, ix as usize, ci]] * weight[[ky, kx, ci, co]];
                            }
                        }
                    }
                    out[[oy, ox, co]] = acc;
                }
            }
        }
        out
    }

    fn random_tensor3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn im2col_conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(h, w, cin, cout, kh, stride, pad) in &[
            (6, 6, 3, 4, 3, 1, 1),
            (8, 5, 2, 3, 3, 2, 1),
            (7, 7, 1, 2, 5, 1, 2),
            (4, 4, 3, 12, 3, 1, 1),
            (9, 6, 2, 4, 3, 2, 0),
        ] {
            let input = random_tensor3(&mut rng, (h, w, cin));
            let weight = Array4::from_shape_fn((kh, kh, cin, cout), |_| rng.gen_range(-1.0..1.0));
            let bias = Array1::from_shape_fn(cout, |_| rng.gen_range(-1.0..1.0));
            let fast = conv2d(&input, &weight.view(), &bias, stride, pad);
            let slow = conv2d_naive(&input, &weight, &bias, stride, pad);
            let err = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "conv mismatch {err} for case {h}x{w}x{cin}");
        }
    }

    #[test]
    fn conv_backward_input_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor3(&mut rng, (5, 5, 2));
        let weight = Array4::from_shape_fn((3, 3, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let bias = Array1::zeros(3);
        // Scalar objective: weighted sum of the conv output.
        let probe = random_tensor3(&mut rng, (3, 3, 3));
        let f = |inp: &Array3<f64>| {
            let out = conv2d(inp, &weight.view(), &bias, 2, 1);
            (&out * &probe).sum()
        };
        let analytic = conv2d_backward_input(&probe, &weight.view(), 2, 1, 5, 5);
        let eps = 1e-6;
        let mut x = input.clone();
        for idx in 0..x.len() {
            let flat = x.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + eps;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-7, "input grad mismatch at {idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn conv_backward_params_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = random_tensor3(&mut rng, (4, 4, 2));
        let mut weight = Array4::from_shape_fn((3, 3, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let bias = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let probe = random_tensor3(&mut rng, (4, 4, 2));
        let (dw, db) = {
            let out_grad = probe.clone();
            conv2d_backward_params(&input, &out_grad, 3, 3, 1, 1)
        };
        let eps = 1e-6;
        let f = |wt: &Array4<f64>, b: &Array1<f64>| {
            let out = conv2d(&input, &wt.view(), b, 1, 1);
            (&out * &probe).sum()
        };
        for idx in 0..weight.len() {
            let orig = weight.as_slice().unwrap()[idx];
            weight.as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&weight, &bias);
            weight.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&weight, &bias);
            weight.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = dw.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-7, "weight grad mismatch at {idx}");
        }
        for ci in 0..2 {
            let mut b = bias.clone();
            b[ci] += eps;
            let fp = f(&weight, &b);
            b[ci] -= 2.0 * eps;
            let fm = f(&weight, &b);
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - db[ci]).abs() < 1e-7, "bias grad mismatch at {ci}");
        }
    }

    #[test]
    fn pixel_shuffle_index_arithmetic() {
        // 1x1 spatial, r=2, 1 output channel: channels map to the 2x2 block.
        let input = Array3::from_shape_fn((1, 1, 4), |(_, _, k)| k as f64);
        let out = pixel_shuffle(&input, 2);
        assert_eq!(out.dim(), (2, 2, 1));
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[0, 1, 0]], 1.0);
        assert_eq!(out[[1, 0, 0]], 2.0);
        assert_eq!(out[[1, 1, 0]], 3.0);
    }

    #[test]
    fn pixel_shuffle_backward_is_exact_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = random_tensor3(&mut rng, (3, 2, 12));
        let cotangent = random_tensor3(&mut rng, (6, 4, 3));
        let out = pixel_shuffle(&input, 2);
        let back = pixel_shuffle_backward(&cotangent, 2);
        // <Ax, y> == <x, A^T y> for a permutation.
        let lhs = (&out * &cotangent).sum();
        let rhs = (&input * &back).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn activations_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random_tensor3(&mut rng, (4, 4, 2));
        let g = random_tensor3(&mut rng, (4, 4, 2));
        let eps = 1e-7;
        let lr_grad = leaky_relu_backward(&x, &g);
        let th = tanh(&x);
        let th_grad = tanh_backward(&th, &g);
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            if orig.abs() < 1e-3 {
                continue; // too close to the kink for finite differences
            }
            let gd = g.as_slice().unwrap()[idx];
            let fd_lr = ((if orig + eps > 0.0 { orig + eps } else { LEAKY_SLOPE * (orig + eps) })
                - (if orig - eps > 0.0 { orig - eps } else { LEAKY_SLOPE * (orig - eps) }))
                / (2.0 * eps);
            assert!((lr_grad.as_slice().unwrap()[idx] - gd * fd_lr).abs() < 1e-8);
            let fd_th = ((orig + eps).tanh() - (orig - eps).tanh()) / (2.0 * eps);
            assert!((th_grad.as_slice().unwrap()[idx] - gd * fd_th).abs() < 1e-6);
        }
    }
}
