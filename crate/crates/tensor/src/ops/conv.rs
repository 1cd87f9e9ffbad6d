//! 2-D convolution and transposed convolution over `[B, C, H, W]` tensors,
//! lowered to GEMM through im2col/col2im. Padding is always zero padding.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry {
        stride: (1, 1),
        padding: (0, 0),
    };

    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::UNIT
    }
}

/// `floor((input + 2 * padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// `(input - 1) * stride - 2 * padding + kernel`, or `None` when that is not
/// positive.
pub fn conv_transpose_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    (stride > 0 && full > 2 * padding).then(|| full - 2 * padding)
}

/// Spatial bookkeeping shared by im2col and col2im. `(h, w)` is the image
/// the kernel slides over, `(oh, ow)` the grid of kernel positions.
#[derive(Clone, Copy, Debug)]
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    oh: usize,
    ow: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every `(column row, column offset range, image row)` segment.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (sh, sw) = self.geom.stride;
        let (ph, pw) = self.geom.padding;
        for c in 0..self.channels {
            for u in 0..self.kh {
                for v in 0..self.kw {
                    let r = (c * self.kh + u) * self.kw + v;
                    // valid j: 0 <= j*sw + v - pw < w
                    let Some(limit) = (self.w + pw).checked_sub(v) else {
                        continue;
                    };
                    let j_lo = if pw > v { (pw - v).div_ceil(sw) } else { 0 };
                    let j_hi = limit.div_ceil(sw).min(self.ow);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in 0..self.oh {
                        let hi = (i * sh + u) as isize - ph as isize;
                        if hi < 0 || hi as usize >= self.h {
                            continue;
                        }
                        f(r, i, j_lo, j_hi, (c * self.h + hi as usize) * self.w);
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        debug_assert_eq!(image.len(), self.channels * self.h * self.w);
        debug_assert_eq!(col.len(), self.rows() * self.cols());
        col.fill(T::zero());
        let (sw, pw) = (self.geom.stride.1, self.geom.padding.1);
        let (kw, ow, ncols) = (self.kw, self.ow, self.cols());
        self.for_each_row(|r, i, j_lo, j_hi, base| {
            let v = r % kw;
            let dst = &mut col[r * ncols + i * ow..r * ncols + (i + 1) * ow];
            if sw == 1 {
                let start = base + j_lo + v - pw;
                dst[j_lo..j_hi].copy_from_slice(&image[start..start + (j_hi - j_lo)]);
            } else {
                for (j, d) in dst.iter_mut().enumerate().take(j_hi).skip(j_lo) {
                    *d = image[base + j * sw + v - pw];
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        debug_assert_eq!(image.len(), self.channels * self.h * self.w);
        let (sw, pw) = (self.geom.stride.1, self.geom.padding.1);
        let (kw, ow, ncols) = (self.kw, self.ow, self.cols());
        self.for_each_row(|r, i, j_lo, j_hi, base| {
            let v = r % kw;
            let src = &col[r * ncols + i * ow..r * ncols + (i + 1) * ow];
            for (j, &s) in src.iter().enumerate().take(j_hi).skip(j_lo) {
                let dst = &mut image[base + j * sw + v - pw];
                *dst = *dst + s;
            }
        });
    }
}

fn dims4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::invalid(op, format!("expected a 4-D tensor, got {:?}", t.shape()))),
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(TensorError::mismatch(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

struct ConvPlan {
    batch: usize,
    c_in: usize,
    c_out: usize,
    patch: Patch,
}

fn plan_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<ConvPlan> {
    let [batch, c_in, h, wd] = dims4("conv2d", x)?;
    let [c_out, wc_in, kh, kw] = dims4("conv2d", w)?;
    if wc_in != c_in {
        return Err(TensorError::mismatch("conv2d", x.shape(), w.shape()));
    }
    check_bias("conv2d", bias, c_out)?;
    let oh = conv_output_extent(h, kh, geom.stride.0, geom.padding.0);
    let ow = conv_output_extent(wd, kw, geom.stride.1, geom.padding.1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(TensorError::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} with {geom:?} gives no output for input {h}x{wd}"),
        ));
    };
    Ok(ConvPlan {
        batch,
        c_in,
        c_out,
        patch: Patch {
            channels: c_in,
            h,
            w: wd,
            kh,
            kw,
            geom,
            oh,
            ow,
        },
    })
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_exact_mut(plane).zip(b.data().iter().cycle()) {
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let plane = g.numel() / (g.shape()[0] * channels);
    let mut db = vec![T::zero(); channels];
    for (idx, chunk) in g.data().chunks_exact(plane).enumerate() {
        db[idx % channels] = db[idx % channels] + chunk.iter().copied().sum();
    }
    Tensor::new(vec![channels], db).expect("bias grad")
}

/// Plain convolution without recording, `y[b,o,i,j] = bias[o] +
/// sum_{c,u,v} w[o,c,u,v] * x[b,c,i*sh+u-ph,j*sw+v-pw]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let plan = plan_conv(x, w, bias, geom)?;
    let p = plan.patch;
    let (k, cols) = (p.rows(), p.cols());
    let in_plane = plan.c_in * p.h * p.w;
    let mut out = vec![T::zero(); plan.batch * plan.c_out * cols];
    let mut col = vec![T::zero(); k * cols];
    for (xb, yb) in x.data().chunks_exact(in_plane).zip(out.chunks_exact_mut(plan.c_out * cols)) {
        p.im2col(xb, &mut col);
        gemm(MatRef::new(w.data(), plan.c_out, k), MatRef::new(&col, k, cols), T::zero(), yb);
    }
    add_bias(&mut out, bias, cols);
    Tensor::new(vec![plan.batch, plan.c_out, p.oh, p.ow], out)
}

/// Differentiable convolution; weight layout `[C_out, C_in, k_h, k_w]`.
pub fn conv2d<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, bias: Option<Var<'t, T>>, geom: ConvGeometry) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let bv = bias.map(|b| b.value());
    let plan = plan_conv(&xv, &wv, bv.as_ref(), geom)?;
    let y = conv2d_forward(&xv, &wv, bv.as_ref(), geom)?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(x.tape().record(y, &parents, move |g, mask| {
        let p = plan.patch;
        let (k, cols) = (p.rows(), p.cols());
        let in_plane = plan.c_in * p.h * p.w;
        let mut dx = mask[0].then(|| vec![T::zero(); xv.numel()]);
        let mut dw = mask[1].then(|| vec![T::zero(); wv.numel()]);
        let mut col = vec![T::zero(); k * cols];
        for (b, gb) in g.data().chunks_exact(plan.c_out * cols).enumerate() {
            if let Some(dw) = dw.as_mut() {
                p.im2col(&xv.data()[b * in_plane..(b + 1) * in_plane], &mut col);
                gemm(MatRef::new(gb, plan.c_out, cols), MatRef::transposed(&col, cols, k), T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(MatRef::transposed(wv.data(), k, plan.c_out), MatRef::new(gb, plan.c_out, cols), T::zero(), &mut col);
                p.col2im(&col, &mut dx[b * in_plane..(b + 1) * in_plane]);
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(xv.shape().to_vec(), d).expect("conv dx")),
            dw.map(|d| Tensor::new(wv.shape().to_vec(), d).expect("conv dw")),
        ];
        if mask.len() == 3 {
            grads.push(mask[2].then(|| bias_grad(g, plan.c_out)));
        }
        grads
    }))
}

fn plan_conv_transpose<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<ConvPlan> {
    let [batch, c_in, h, wd] = dims4("conv_transpose2d", x)?;
    let [wc_in, c_out, kh, kw] = dims4("conv_transpose2d", w)?;
    if wc_in != c_in {
        return Err(TensorError::mismatch("conv_transpose2d", x.shape(), w.shape()));
    }
    check_bias("conv_transpose2d", bias, c_out)?;
    let oh = conv_transpose_output_extent(h, kh, geom.stride.0, geom.padding.0);
    let ow = conv_transpose_output_extent(wd, kw, geom.stride.1, geom.padding.1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(TensorError::invalid(
            "conv_transpose2d",
            format!("kernel {kh}x{kw} with {geom:?} gives no output for input {h}x{wd}"),
        ));
    };
    // The patch describes the adjoint convolution: it slides over the
    // (oh, ow) output and lands on the (h, w) input grid.
    Ok(ConvPlan {
        batch,
        c_in,
        c_out,
        patch: Patch {
            channels: c_out,
            h: oh,
            w: ow,
            kh,
            kw,
            geom,
            oh: h,
            ow: wd,
        },
    })
}

/// Plain transposed convolution without recording; the adjoint of
/// [`conv2d_forward`] for the same weight and geometry.
pub fn conv_transpose2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let plan = plan_conv_transpose(x, w, bias, geom)?;
    let p = plan.patch;
    let (k, cols) = (p.rows(), p.cols());
    let out_plane = plan.c_out * p.h * p.w;
    let mut out = vec![T::zero(); plan.batch * out_plane];
    let mut col = vec![T::zero(); k * cols];
    for (xb, yb) in x.data().chunks_exact(plan.c_in * cols).zip(out.chunks_exact_mut(out_plane)) {
        gemm(MatRef::transposed(w.data(), k, plan.c_in), MatRef::new(xb, plan.c_in, cols), T::zero(), &mut col);
        p.col2im(&col, yb);
    }
    add_bias(&mut out, bias, p.h * p.w);
    Tensor::new(vec![plan.batch, plan.c_out, p.h, p.w], out)
}

/// Differentiable transposed convolution; weight layout `[C_in, C_out, k_h, k_w]`.
pub fn conv_transpose2d<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, bias: Option<Var<'t, T>>, geom: ConvGeometry) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let bv = bias.map(|b| b.value());
    let plan = plan_conv_transpose(&xv, &wv, bv.as_ref(), geom)?;
    let y = conv_transpose2d_forward(&xv, &wv, bv.as_ref(), geom)?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(x.tape().record(y, &parents, move |g, mask| {
        let p = plan.patch;
        let (k, cols) = (p.rows(), p.cols());
        let out_plane = plan.c_out * p.h * p.w;
        let in_plane = plan.c_in * cols;
        let mut dx = mask[0].then(|| vec![T::zero(); xv.numel()]);
        let mut dw = mask[1].then(|| vec![T::zero(); wv.numel()]);
        let mut col = vec![T::zero(); k * cols];
        for (b, gb) in g.data().chunks_exact(out_plane).enumerate() {
            p.im2col(gb, &mut col);
            if let Some(dx) = dx.as_mut() {
                gemm(MatRef::new(wv.data(), plan.c_in, k), MatRef::new(&col, k, cols), T::zero(), &mut dx[b * in_plane..(b + 1) * in_plane]);
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &xv.data()[b * in_plane..(b + 1) * in_plane];
                gemm(MatRef::new(xb, plan.c_in, cols), MatRef::transposed(&col, cols, k), T::one(), dw);
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(xv.shape().to_vec(), d).expect("deconv dx")),
            dw.map(|d| Tensor::new(wv.shape().to_vec(), d).expect("deconv dw")),
        ];
        if mask.len() == 3 {
            grads.push(mask[2].then(|| bias_grad(g, plan.c_out)));
        }
        grads
    }))
}
