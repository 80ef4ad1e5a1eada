use super::conv::{gemm_backward, gemm_forward};
use super::{mismatch, OpError, Real, Tensor};

#[derive(Debug, Clone)]
pub struct DeformConv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub offsets: Tensor<T>,
}

/// Bilinear sample of one tap at one output position. Corner order is
/// `(y0, x0), (y0, x0+1), (y0+1, x0), (y0+1, x0+1)`; out-of-bounds corners
/// have index `None` and read as zero.
#[derive(Clone, Copy)]
struct Tap {
    idx: [Option<usize>; 4],
    fx: f64,
    fy: f64,
}

impl Tap {
    fn new(py: f64, px: f64, h: usize, w: usize) -> Self {
        let y0 = py.floor();
        let x0 = px.floor();
        let (fy, fx) = (py - y0, px - x0);
        let at = |y: f64, x: f64| {
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        Self {
            idx: [at(y0, x0), at(y0, x0 + 1.0), at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0)],
            fx,
            fy,
        }
    }

    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx]
    }

    fn corners<T: Real>(&self, plane: &[T]) -> [f64; 4] {
        self.idx.map(|i| i.map_or(0.0, |i| plane[i].as_f64()))
    }
}

struct Dims {
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    out_c: usize,
}

fn check<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
) -> Result<Dims, OpError> {
    let [out_c, w_in, k, k2] = weight.shape();
    let [n, in_c, h, w] = input.shape();
    if k != k2 || k % 2 == 0 {
        return Err(mismatch(
            "deformable_conv2d",
            format!("kernel must be square and odd, got {k}x{k2}"),
        ));
    }
    if w_in != in_c {
        return Err(mismatch(
            "deformable_conv2d",
            format!("weight expects {w_in} input channels, input has {in_c}"),
        ));
    }
    if offsets.shape() != [n, 2 * k * k, h, w] {
        return Err(mismatch(
            "deformable_conv2d",
            format!(
                "offsets must be {:?} (2*k*k channels at output size), got {:?}",
                [n, 2 * k * k, h, w],
                offsets.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(mismatch("deformable_conv2d", "bias length != output channels"));
        }
    }
    Ok(Dims {
        in_c,
        h,
        w,
        k,
        out_c,
    })
}

/// Sample positions for every `(tap, pixel)` of one batch item.
fn taps<T: Real>(offsets_item: &[T], d: &Dims) -> Vec<Tap> {
    let p = d.h * d.w;
    let pad = (d.k / 2) as f64;
    let mut out = Vec::with_capacity(d.k * d.k * p);
    for ky in 0..d.k {
        for kx in 0..d.k {
            let t = ky * d.k + kx;
            let dx = &offsets_item[2 * t * p..(2 * t + 1) * p];
            let dy = &offsets_item[(2 * t + 1) * p..(2 * t + 2) * p];
            for oy in 0..d.h {
                for ox in 0..d.w {
                    let i = oy * d.w + ox;
                    let py = oy as f64 - pad + ky as f64 + dy[i].as_f64();
                    let px = ox as f64 - pad + kx as f64 + dx[i].as_f64();
                    out.push(Tap::new(py, px, d.h, d.w));
                }
            }
        }
    }
    out
}

fn sample_cols<T: Real>(item: &[T], taps: &[Tap], d: &Dims, cols: &mut [T]) {
    let p = d.h * d.w;
    let kk = d.k * d.k;
    for c in 0..d.in_c {
        let plane = &item[c * p..(c + 1) * p];
        for (j, tap) in taps.iter().enumerate() {
            let t = j / p;
            let i = j % p;
            let v: f64 = tap
                .weights()
                .iter()
                .zip(tap.corners(plane))
                .map(|(w, v)| w * v)
                .sum();
            cols[(c * kk + t) * p + i] = T::of(v);
        }
    }
}

/// Deformable convolution, stride 1 with `k / 2` zero padding.
///
/// Each kernel tap `(ky, kx)` at output `(oy, ox)` reads the input at
/// `(oy - k/2 + ky + dy, ox - k/2 + kx + dx)` by bilinear interpolation, where
/// `dx = offsets[2 * tap]` and `dy = offsets[2 * tap + 1]` with
/// `tap = ky * k + kx`. Samples outside the input read as zero.
pub fn deformable_conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
) -> Result<Tensor<T>, OpError> {
    let d = check(input, weight, bias, offsets)?;
    let n = input.batch();
    let p = d.h * d.w;
    let rows = d.in_c * d.k * d.k;
    let mut out = Tensor::zeros([n, d.out_c, d.h, d.w]);
    let mut cols = vec![T::zero(); rows * p];
    for b in 0..n {
        let taps = taps(offsets.item(b), &d);
        sample_cols(input.item(b), &taps, &d, &mut cols);
        gemm_forward(
            weight.data(),
            bias.map(|b| b.data()),
            &cols,
            d.out_c,
            rows,
            p,
            out.item_mut(b),
        );
    }
    Ok(out)
}

pub fn deformable_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    offsets: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DeformConv2dGrads<T>, OpError> {
    let d = check(input, weight, None, offsets)?;
    let n = input.batch();
    if grad_out.shape() != [n, d.out_c, d.h, d.w] {
        return Err(mismatch(
            "deformable_conv2d_backward",
            format!("output gradient shape {:?}", grad_out.shape()),
        ));
    }
    let p = d.h * d.w;
    let kk = d.k * d.k;
    let rows = d.in_c * kk;
    let mut grad_weight = vec![0.0f64; d.out_c * rows];
    let mut grad_bias = vec![0.0f64; d.out_c];
    let mut grad_input = vec![0.0f64; input.len()];
    let mut grad_offsets = vec![0.0f64; offsets.len()];
    let mut cols = vec![T::zero(); rows * p];
    for b in 0..n {
        let item = input.item(b);
        let taps = taps(offsets.item(b), &d);
        sample_cols(item, &taps, &d, &mut cols);
        let grad_cols = gemm_backward(
            weight.data(),
            &cols,
            grad_out.item(b),
            d.out_c,
            rows,
            p,
            &mut grad_weight,
            &mut grad_bias,
        );
        let gin = &mut grad_input[b * d.in_c * p..(b + 1) * d.in_c * p];
        let goff = &mut grad_offsets[b * 2 * kk * p..(b + 1) * 2 * kk * p];
        for c in 0..d.in_c {
            let plane = &item[c * p..(c + 1) * p];
            let gplane = &mut gin[c * p..(c + 1) * p];
            for (j, tap) in taps.iter().enumerate() {
                let (t, i) = (j / p, j % p);
                let g = grad_cols[(c * kk + t) * p + i];
                if g == 0.0 {
                    continue;
                }
                for (idx, w) in tap.idx.iter().zip(tap.weights()) {
                    if let Some(idx) = idx {
                        gplane[*idx] += w * g;
                    }
                }
                let [v00, v01, v10, v11] = tap.corners(plane);
                let (fx, fy) = (tap.fx, tap.fy);
                let dvdx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                let dvdy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                goff[2 * t * p + i] += g * dvdx;
                goff[(2 * t + 1) * p + i] += g * dvdy;
            }
        }
    }
    Ok(DeformConv2dGrads {
        input: Tensor::from_f64(input.shape(), grad_input)?,
        weight: Tensor::from_f64(weight.shape(), grad_weight)?,
        bias: Tensor::from_f64([d.out_c, 1, 1, 1], grad_bias)?,
        offsets: Tensor::from_f64(offsets.shape(), grad_offsets)?,
    })
}
