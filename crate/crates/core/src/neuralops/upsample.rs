use super::{mismatch, OpError, Real, Tensor};

/// Source index pair and blend weight for each output coordinate along one axis
/// (half-pixel centers, no corner alignment).
fn axis_table(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor; `factor == 1` is the identity.
pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>, OpError> {
    if factor == 0 {
        return Err(mismatch("bilinear_upsample", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ys = axis_table(h, factor);
    let xs = axis_table(w, factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let top = (1.0 - lx) * plane[y0 * w + x0].as_f64() + lx * plane[y0 * w + x1].as_f64();
                    let bot = (1.0 - lx) * plane[y1 * w + x0].as_f64() + lx * plane[y1 * w + x1].as_f64();
                    out.push(T::of((1.0 - ly) * top + ly * bot));
                }
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

/// Gradient of [`bilinear_upsample`] with respect to its input.
pub fn bilinear_upsample_backward<T: Real>(
    input_shape: [usize; 4],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, OpError> {
    let [n, c, h, w] = input_shape;
    if factor == 0 || grad_out.shape() != [n, c, h * factor, w * factor] {
        return Err(mismatch(
            "bilinear_upsample_backward",
            format!("output gradient {:?} for input {input_shape:?} x{factor}", grad_out.shape()),
        ));
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let ys = axis_table(h, factor);
    let xs = axis_table(w, factor);
    let mut grad = vec![0.0f64; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let dst = &mut grad[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let mut i = 0;
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let v = g[i].as_f64();
                    i += 1;
                    dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                    dst[y0 * w + x1] += (1.0 - ly) * lx * v;
                    dst[y1 * w + x0] += ly * (1.0 - lx) * v;
                    dst[y1 * w + x1] += ly * lx * v;
                }
            }
        }
    }
    Tensor::from_f64(input_shape, grad)
}
