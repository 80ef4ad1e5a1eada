use super::{mismatch, OpError, Real, Tensor};

/// `floor((size + 2 * padding - kernel) / stride) + 1`, or `None` if the kernel
/// does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

fn check<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Geometry, OpError> {
    let [out_c, w_in, k, k2] = weight.shape();
    let [_, in_c, h, w] = input.shape();
    if k != k2 {
        return Err(mismatch("conv2d", format!("non-square kernel {k}x{k2}")));
    }
    if w_in != in_c {
        return Err(mismatch(
            "conv2d",
            format!("weight expects {w_in} input channels, input has {in_c}"),
        ));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(mismatch(
                "conv2d",
                format!("bias has {} values for {out_c} output channels", b.len()),
            ));
        }
    }
    let out_h = conv_output_size(h, k, stride, padding);
    let out_w = conv_output_size(w, k, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) => Ok(Geometry {
            in_c,
            h,
            w,
            k,
            out_c,
            out_h,
            out_w,
            stride,
            padding,
        }),
        _ => Err(mismatch(
            "conv2d",
            format!("kernel {k} stride {stride} padding {padding} does not fit {h}x{w}"),
        )),
    }
}

/// Unfolds one batch item into a `(in_c * k * k, out_h * out_w)` column matrix.
fn im2col<T: Real>(item: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_c {
        let plane = &item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix as usize >= g.w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(grad_cols: &[f64], g: &Geometry, grad_item: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_c {
        let plane = &mut grad_item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &grad_cols[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[base + ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[oc, :] = bias[oc] + sum_j weight[oc, j] * cols[j, :]`, accumulated in f64.
pub(super) fn gemm_forward<T: Real>(
    weight: &[T],
    bias: Option<&[T]>,
    cols: &[T],
    out_c: usize,
    rows: usize,
    p: usize,
    out: &mut [T],
) {
    let mut acc = vec![0.0f64; p];
    for oc in 0..out_c {
        let b = bias.map_or(0.0, |b| b[oc].as_f64());
        acc.iter_mut().for_each(|a| *a = b);
        let wrow = &weight[oc * rows..(oc + 1) * rows];
        for (j, &wv) in wrow.iter().enumerate() {
            let wv = wv.as_f64();
            if wv == 0.0 {
                continue;
            }
            let crow = &cols[j * p..(j + 1) * p];
            for (a, &c) in acc.iter_mut().zip(crow) {
                *a += wv * c.as_f64();
            }
        }
        for (o, &a) in out[oc * p..(oc + 1) * p].iter_mut().zip(&acc) {
            *o = T::of(a);
        }
    }
}

/// Accumulates weight and bias gradients and returns the column gradient.
pub(super) fn gemm_backward<T: Real>(
    weight: &[T],
    cols: &[T],
    grad_out: &[T],
    out_c: usize,
    rows: usize,
    p: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let mut grad_cols = vec![0.0f64; rows * p];
    let mut g64 = vec![0.0f64; p];
    for oc in 0..out_c {
        for (d, &s) in g64.iter_mut().zip(&grad_out[oc * p..(oc + 1) * p]) {
            *d = s.as_f64();
        }
        grad_bias[oc] += g64.iter().sum::<f64>();
        for j in 0..rows {
            let crow = &cols[j * p..(j + 1) * p];
            let dot: f64 = crow.iter().zip(&g64).map(|(&c, &g)| c.as_f64() * g).sum();
            grad_weight[oc * rows + j] += dot;
            let wv = weight[oc * rows + j].as_f64();
            if wv != 0.0 {
                for (gc, &g) in grad_cols[j * p..(j + 1) * p].iter_mut().zip(&g64) {
                    *gc += wv * g;
                }
            }
        }
    }
    grad_cols
}

/// Zero-padded cross-correlation.
///
/// `weight` is `(out_c, in_c, k, k)`; `bias`, if given, holds `out_c` values in
/// any shape.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, OpError> {
    let g = check(input, weight, bias, stride, padding)?;
    let n = input.batch();
    let p = g.out_h * g.out_w;
    let rows = g.in_c * g.k * g.k;
    let mut out = Tensor::zeros([n, g.out_c, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); rows * p];
    for b in 0..n {
        im2col(input.item(b), &g, &mut cols);
        gemm_forward(
            weight.data(),
            bias.map(|b| b.data()),
            &cols,
            g.out_c,
            rows,
            p,
            out.item_mut(b),
        );
    }
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>, OpError> {
    let g = check(input, weight, None, stride, padding)?;
    let n = input.batch();
    if grad_out.shape() != [n, g.out_c, g.out_h, g.out_w] {
        return Err(mismatch(
            "conv2d_backward",
            format!("output gradient shape {:?}", grad_out.shape()),
        ));
    }
    let p = g.out_h * g.out_w;
    let rows = g.in_c * g.k * g.k;
    let mut grad_weight = vec![0.0f64; g.out_c * rows];
    let mut grad_bias = vec![0.0f64; g.out_c];
    let mut grad_input = vec![0.0f64; input.len()];
    let chw = g.in_c * g.h * g.w;
    let mut cols = vec![T::zero(); rows * p];
    for b in 0..n {
        im2col(input.item(b), &g, &mut cols);
        let grad_cols = gemm_backward(
            weight.data(),
            &cols,
            grad_out.item(b),
            g.out_c,
            rows,
            p,
            &mut grad_weight,
            &mut grad_bias,
        );
        col2im(&grad_cols, &g, &mut grad_input[b * chw..(b + 1) * chw]);
    }
    Ok(Conv2dGrads {
        input: Tensor::from_f64(input.shape(), grad_input)?,
        weight: Tensor::from_f64(weight.shape(), grad_weight)?,
        bias: Tensor::from_f64([g.out_c, 1, 1, 1], grad_bias)?,
    })
}
