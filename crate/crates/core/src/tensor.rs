//! Dense tensor kernel: convolution, activation, resampling and symmetric
//! int8 quantization.
//!
//! Every operation here is a pure function with a fixed, documented summation
//! order, so repeated runs produce identical bits regardless of thread count.
//! Convolutions iterate output channel -> output row -> output column ->
//! input channel -> kernel row -> kernel column; matmul iterates
//! row -> column -> inner index.

use crate::error::{Error, Result};

/// Dense N-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} elements does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn count_nonzero(&self) -> usize
    where
        T: PartialEq,
    {
        let zero = T::default();
        self.data.iter().filter(|&&v| v != zero).count()
    }

    /// Elementwise max(0, x). Works for any ordered type whose default is zero.
    pub fn relu(&self) -> Tensor<T>
    where
        T: PartialOrd,
    {
        let zero = T::default();
        self.map(|v| if v < zero { zero } else { v })
    }
}

fn check_same_shape<A, B>(what: &str, a: &Tensor<A>, b: &Tensor<B>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub(crate) fn same_shape<A, B>(what: &str, a: &Tensor<A>, b: &Tensor<B>) -> Result<()> {
    check_same_shape(what, a, b)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims<I, W>(
    input: &Tensor<I>,
    weights: &Tensor<W>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let [c_in, h, w] = match *input.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input must be [C,H,W], got {:?}",
                input.shape()
            )))
        }
    };
    let [c_out, wc_in, kh, kw] = match *weights.shape() {
        [o, i, kh, kw] => [o, i, kh, kw],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weights must be [C_out,C_in,k,k], got {:?}",
                weights.shape()
            )))
        }
    };
    if wc_in != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {c_in} channels but weights expect {wc_in}"
        )));
    }
    if kh != kw {
        return Err(Error::Config(format!("conv2d kernel must be square, got {kh}x{kw}")));
    }
    let k = kh;
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel size must be odd, got {k}")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::ShapeMismatch(format!(
            "conv2d kernel {k} does not fit padded input {h}x{w} (pad {padding})"
        )));
    }
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k,
        h_out,
        w_out,
    })
}

/// 2-D cross-correlation with zero padding, f32 accumulation.
pub fn conv2d_f32(
    input: &Tensor<f32>,
    weights: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f32>> {
    let d = conv_dims(input, weights, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias must be [{}], got {:?}",
                d.c_out,
                b.shape()
            )));
        }
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0f32; d.c_out * d.h_out * d.w_out];
    for co in 0..d.c_out {
        let w_base = co * d.c_in * d.k * d.k;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ci in 0..d.c_in {
                    let x_base = ci * d.h * d.w;
                    let wk = w_base + ci * d.k * d.k;
                    for ky in 0..d.k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row = x_base + iy as usize * d.w;
                        for kx in 0..d.k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += wt[wk + ky * d.k + kx] * x[row + ix as usize];
                        }
                    }
                }
                out[(co * d.h_out + oy) * d.w_out + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[d.c_out, d.h_out, d.w_out], out)
}

fn conv2d_int_inner(
    input: &Tensor<i32>,
    weights: &Tensor<i8>,
    bias: Option<&Tensor<i32>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<i32>> {
    let d = conv_dims(input, weights, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias must be [{}], got {:?}",
                d.c_out,
                b.shape()
            )));
        }
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0i32; d.c_out * d.h_out * d.w_out];
    for co in 0..d.c_out {
        let w_base = co * d.c_in * d.k * d.k;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                // i64 accumulator; the result must still fit i32.
                let mut acc: i64 = bias.map_or(0, |b| b.data()[co] as i64);
                for ci in 0..d.c_in {
                    let x_base = ci * d.h * d.w;
                    let wk = w_base + ci * d.k * d.k;
                    for ky in 0..d.k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let row = x_base + iy as usize * d.w;
                        for kx in 0..d.k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += wt[wk + ky * d.k + kx] as i64 * x[row + ix as usize] as i64;
                        }
                    }
                }
                if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                    return Err(Error::Overflow(format!(
                        "conv2d output ({co},{oy},{ox}) accumulated {acc}"
                    )));
                }
                out[(co * d.h_out + oy) * d.w_out + ox] = acc as i32;
            }
        }
    }
    let _ = (d.c_in, d.h, d.w);
    Tensor::from_vec(&[d.c_out, d.h_out, d.w_out], out)
}

/// Quantized convolution: i8 activations x i8 weights with i32 bias and
/// accumulation. Overflow of the i32 result is a hard error.
pub fn conv2d_i8(
    input: &Tensor<i8>,
    weights: &Tensor<i8>,
    bias: Option<&Tensor<i32>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<i32>> {
    let widened = input.map(|v| v as i32);
    conv2d_int_inner(&widened, weights, bias, stride, padding)
}

/// Integer convolution over i32 values (event frames carry deltas that can
/// exceed the i8 range).
pub fn conv2d_i32(
    input: &Tensor<i32>,
    weights: &Tensor<i8>,
    bias: Option<&Tensor<i32>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<i32>> {
    conv2d_int_inner(input, weights, bias, stride, padding)
}

/// Exact f32 matrix product, row -> column -> inner summation order.
pub fn matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [m, ka] = match *a.shape() {
        [m, k] => [m, k],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "matmul lhs must be [m,k], got {:?}",
                a.shape()
            )))
        }
    };
    let [kb, n] = match *b.shape() {
        [k, n] => [k, n],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "matmul rhs must be [k,n], got {:?}",
                b.shape()
            )))
        }
    };
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims differ: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0f32;
            for k in 0..ka {
                acc += ad[i * ka + k] * bd[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// 2x2 mean pooling: [C,H,W] -> [C,H/2,W/2]. Extents must be even.
pub fn avg_downsample2x(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [c, h, w] = match *x.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "avg_downsample2x expects [C,H,W], got {:?}",
                x.shape()
            )))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "avg_downsample2x needs even extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0f32; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = ci * h * w + (2 * oy) * w + 2 * ox;
                // Fixed order: top-left, top-right, bottom-left, bottom-right.
                let sum = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
                out[(ci * ho + oy) * wo + ox] = sum * 0.25;
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

// ---------------------------------------------------------------------------
// Letterbox
// ---------------------------------------------------------------------------

/// Affine mapping from original image coordinates to the letterboxed canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl LetterboxTransform {
    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x as f64, y * self.scale + self.pad_y as f64)
    }

    pub fn from_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x as f64) / self.scale, (y - self.pad_y as f64) / self.scale)
    }
}

fn bilinear_sample(plane: &[f32], h: usize, w: usize, sx: f64, sy: f64) -> f32 {
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (sx - x0 as f64) as f32;
    let fy = (sy - y0 as f64) as f32;
    let p00 = plane[y0 * w + x0];
    let p01 = plane[y0 * w + x1];
    let p10 = plane[y1 * w + x0];
    let p11 = plane[y1 * w + x1];
    let top = p00 + (p01 - p00) * fx;
    let bot = p10 + (p11 - p10) * fx;
    top + (bot - top) * fy
}

/// The transform (and content extents) letterboxing an h x w image onto a
/// square `target` canvas would apply.
pub fn letterbox_transform(h: usize, w: usize, target: usize) -> Result<(LetterboxTransform, usize, usize)> {
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::Config("letterbox extents must be positive".into()));
    }
    let scale = target as f64 / h.max(w) as f64;
    let content_h = ((h as f64 * scale).round_ties_even() as usize).clamp(1, target);
    let content_w = ((w as f64 * scale).round_ties_even() as usize).clamp(1, target);
    let pad_y = (target - content_h) / 2;
    let pad_x = (target - content_w) / 2;
    Ok((LetterboxTransform { scale, pad_x, pad_y }, content_h, content_w))
}

/// Aspect-preserving bilinear resize onto a square `target` canvas with
/// centered padding on the short axis. Returns the resized frame and the
/// coordinate transform so boxes can be mapped onto the canvas.
pub fn letterbox(
    frame: &Tensor<f32>,
    target: usize,
    pad_value: f32,
) -> Result<(Tensor<f32>, LetterboxTransform)> {
    let [c, h, w] = match *frame.shape() {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "letterbox expects [C,H,W], got {:?}",
                frame.shape()
            )))
        }
    };
    let (tf, content_h, content_w) = letterbox_transform(h, w, target)?;
    let scale = tf.scale;
    let (pad_y, pad_x) = (tf.pad_y, tf.pad_x);

    let mut out = Tensor::filled(&[c, target, target], pad_value);
    let dst = out.data_mut();
    for ci in 0..c {
        let plane = &frame.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..content_h {
            // Sample at destination pixel centers mapped back to the source.
            let sy = (oy as f64 + 0.5) / scale - 0.5;
            for ox in 0..content_w {
                let sx = (ox as f64 + 0.5) / scale - 0.5;
                dst[(ci * target + pad_y + oy) * target + pad_x + ox] =
                    bilinear_sample(plane, h, w, sx, sy);
            }
        }
    }
    Ok((out, tf))
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Symmetric per-tensor quantization parameters (zero point fixed at 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
}

impl QuantParams {
    pub fn new(scale: f32) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Config(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(QuantParams { scale })
    }
}

/// Round-half-to-even of x/scale, clamped to [-127, 127].
pub fn quantize(x: &Tensor<f32>, q: QuantParams) -> Tensor<i8> {
    x.map(|v| {
        let r = (v / q.scale).round_ties_even();
        r.clamp(-127.0, 127.0) as i8
    })
}

pub fn dequantize(x: &Tensor<i8>, q: QuantParams) -> Tensor<f32> {
    x.map(|v| v as f32 * q.scale)
}

/// Requantize an i32 accumulator back onto the i8 grid (stored as i32 so the
/// event path can keep a single integer element type).
pub fn requantize(acc: &Tensor<i32>, multiplier: f64) -> Tensor<i32> {
    acc.map(|v| {
        let r = (v as f64 * multiplier).round_ties_even();
        r.clamp(-127.0, 127.0) as i32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    /// Brute-force conv oracle with the same documented summation order.
    #[allow(clippy::needless_range_loop)]
    fn conv_oracle(
        x: &Tensor<f32>,
        wt: &Tensor<f32>,
        bias: &[f32],
        stride: usize,
        pad: usize,
    ) -> Tensor<f32> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (wt.shape()[0], wt.shape()[2]);
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
        for co in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[(ci * h + iy as usize) * w + ix as usize];
                                let wv = wt.data()[((co * c_in + ci) * k + ky) * k + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    out.data_mut()[(co * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_product() {
        let x = t3(1, 1, 1, vec![3.0]);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv2d_f32(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_ones_padded_counts_coverage() {
        // 3x3 ones through a 3x3 ones kernel, pad 1: center sums 9, corners 4.
        let x = t3(1, 3, 3, vec![1.0; 9]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d_f32(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(y.data()[edge], 6.0);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t3(1, 4, 4, (0..16).map(|v| v as f32).collect());
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_f32(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_oracle_on_random_instances() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let c_in = rng.below(3) + 1;
            let c_out = rng.below(3) + 1;
            let k = if rng.chance(0.5) { 1 } else { 3 };
            let stride = rng.below(2) + 1;
            let pad = if k == 3 { rng.below(2) } else { 0 };
            let x = Tensor::from_vec(
                &[c_in, 8, 8],
                (0..c_in * 64).map(|_| rng.uniform_in(-2.0, 2.0) as f32).collect(),
            )
            .unwrap();
            let w = Tensor::from_vec(
                &[c_out, c_in, k, k],
                (0..c_out * c_in * k * k)
                    .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                    .collect(),
            )
            .unwrap();
            let bias: Vec<f32> = (0..c_out).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
            let bt = Tensor::from_vec(&[c_out], bias.clone()).unwrap();
            let got = conv2d_f32(&x, &w, Some(&bt), stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &bias, stride, pad);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn conv_stride_two_subsamples_stride_one() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect())
            .unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect())
            .unwrap();
        let full = conv2d_f32(&x, &w, None, 1, 1).unwrap();
        let strided = conv2d_f32(&x, &w, None, 2, 1).unwrap();
        let (h, w_) = (full.shape()[1], full.shape()[2]);
        let (hs, ws) = (strided.shape()[1], strided.shape()[2]);
        for co in 0..3 {
            for oy in 0..hs {
                for ox in 0..ws {
                    let a = strided.data()[(co * hs + oy) * ws + ox];
                    let b = full.data()[(co * h + oy * 2) * w_ + ox * 2];
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let x = t3(2, 4, 4, vec![0.0; 32]);
        let w = Tensor::from_vec(&[1, 3, 1, 1], vec![0.0; 3]).unwrap();
        assert!(conv2d_f32(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn conv_int_detects_overflow() {
        let x = Tensor::from_vec(&[1, 1, 1], vec![i32::MAX]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2i8]).unwrap();
        match conv2d_i32(&x, &w, None, 1, 0) {
            Err(Error::Overflow(_)) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn conv_i8_widens_and_matches_i32_kernel() {
        let mut rng = Rng::new(14);
        let xi: Vec<i8> = (0..3 * 25).map(|_| rng.int_in(-127, 127) as i8).collect();
        let wi: Vec<i8> = (0..2 * 3 * 9).map(|_| rng.int_in(-127, 127) as i8).collect();
        let bi: Vec<i32> = (0..2).map(|_| rng.int_in(-500, 500) as i32).collect();
        let x8 = Tensor::from_vec(&[3, 5, 5], xi.clone()).unwrap();
        let w = Tensor::from_vec(&[2, 3, 3, 3], wi).unwrap();
        let b = Tensor::from_vec(&[2], bi).unwrap();
        let got = conv2d_i8(&x8, &w, Some(&b), 1, 1).unwrap();
        let x32 = x8.map(|v| v as i32);
        let want = conv2d_i32(&x32, &w, Some(&b), 1, 1).unwrap();
        assert_eq!(got, want);
        assert_eq!(got.shape(), &[2, 5, 5]);
    }

    #[test]
    fn conv_int_matches_f32_on_small_values() {
        let mut rng = Rng::new(3);
        let xi: Vec<i32> = (0..2 * 36).map(|_| rng.int_in(-50, 50) as i32).collect();
        let wi: Vec<i8> = (0..4 * 2 * 9).map(|_| rng.int_in(-20, 20) as i8).collect();
        let bi: Vec<i32> = (0..4).map(|_| rng.int_in(-100, 100) as i32).collect();
        let x = Tensor::from_vec(&[2, 6, 6], xi.clone()).unwrap();
        let w = Tensor::from_vec(&[4, 2, 3, 3], wi.clone()).unwrap();
        let b = Tensor::from_vec(&[4], bi.clone()).unwrap();
        let got = conv2d_i32(&x, &w, Some(&b), 1, 1).unwrap();

        let xf = Tensor::from_vec(&[2, 6, 6], xi.iter().map(|&v| v as f32).collect()).unwrap();
        let wf = Tensor::from_vec(&[4, 2, 3, 3], wi.iter().map(|&v| v as f32).collect()).unwrap();
        let want = conv_oracle(&xf, &wf, &bi.iter().map(|&v| v as f32).collect::<Vec<_>>(), 1, 1);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert_eq!(*a as f32, *b);
        }
    }

    #[test]
    fn relu_matches_definition() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(&[4], vec![-5i32, -1, -2, -3]).unwrap();
        assert!(neg.relu().data().iter().all(|&v| v == 0));
        let pos = Tensor::from_vec(&[3], vec![0.0f32, 1.5, 7.0]).unwrap();
        assert_eq!(pos.relu(), pos);
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let ident = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.0, 5.0]).unwrap();
        assert_eq!(matmul(&ident, &x).unwrap(), x);

        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(17);
        let a = Tensor::from_vec(&[4, 4], (0..16).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect())
            .unwrap();
        let b = Tensor::from_vec(&[4, 4], (0..16).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect())
            .unwrap();
        let got = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0f32;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 4 + j];
                }
                assert_eq!(got.data()[i * 4 + j], acc);
            }
        }
    }

    #[test]
    fn downsample_constant_and_block_mean() {
        let c = Tensor::filled(&[1, 4, 4], 7.5f32);
        let y = avg_downsample2x(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.5));

        let x = t3(1, 2, 2, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(avg_downsample2x(&x).unwrap().data(), &[3.0]);

        let odd = Tensor::zeros(&[1, 3, 4]);
        assert!(avg_downsample2x(&odd).is_err());
    }

    #[test]
    fn downsample_ramp_matches_bruteforce() {
        let h = 448;
        let w = 448;
        let data: Vec<f32> = (0..h * w).map(|i| (i % 991) as f32 * 0.25).collect();
        let x = Tensor::from_vec(&[1, h, w], data).unwrap();
        let y = avg_downsample2x(&x).unwrap();
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut sum = 0f32;
                sum += x.data()[2 * oy * w + 2 * ox];
                sum += x.data()[2 * oy * w + 2 * ox + 1];
                sum += x.data()[(2 * oy + 1) * w + 2 * ox];
                sum += x.data()[(2 * oy + 1) * w + 2 * ox + 1];
                assert_eq!(y.data()[oy * (w / 2) + ox], sum * 0.25);
            }
        }
    }

    #[test]
    fn letterbox_square_is_identity_transform() {
        let mut rng = Rng::new(2);
        let frame = Tensor::from_vec(
            &[3, 448, 448],
            (0..3 * 448 * 448).map(|_| rng.uniform_in(0.0, 255.0) as f32).collect(),
        )
        .unwrap();
        let (out, tf) = letterbox(&frame, 448, 0.0).unwrap();
        assert_eq!(tf.scale, 1.0);
        assert_eq!((tf.pad_x, tf.pad_y), (0, 0));
        assert_eq!(out, frame);
    }

    #[test]
    fn letterbox_kitti_aspect() {
        // 1242x375 -> scale 448/1242, content 448x135, 156 pad rows on top.
        let frame = Tensor::filled(&[3, 375, 1242], 1.0f32);
        let (out, tf) = letterbox(&frame, 448, 0.0).unwrap();
        assert!((tf.scale - 448.0 / 1242.0).abs() < 1e-12);
        assert_eq!(tf.pad_x, 0);
        assert_eq!(tf.pad_y, 156);
        assert_eq!(out.shape(), &[3, 448, 448]);
        // Rows above the content band are padding.
        assert_eq!(out.data()[155 * 448], 0.0);
        assert_eq!(out.data()[156 * 448], 1.0);
        assert_eq!(out.data()[(156 + 134) * 448], 1.0);
        assert_eq!(out.data()[(156 + 135) * 448], 0.0);
    }

    #[test]
    fn letterbox_tall_input() {
        // 100 wide x 200 tall: scale 448/200 = 2.24, content 224 wide,
        // (448-224)/2 = 112 pad columns on each side.
        let frame = Tensor::filled(&[3, 200, 100], 3.0f32);
        let (_, tf) = letterbox(&frame, 448, 0.0).unwrap();
        assert!((tf.scale - 2.24).abs() < 1e-12);
        assert_eq!(tf.pad_x, 112);
        assert_eq!(tf.pad_y, 0);
    }

    #[test]
    fn letterbox_box_round_trip_within_one_pixel() {
        let mut rng = Rng::new(23);
        for _ in 0..50 {
            let h = rng.below(900) + 32;
            let w = rng.below(900) + 32;
            let frame = Tensor::zeros(&[1, h, w]);
            let (_, tf) = letterbox(&frame, 448, 0.0).unwrap();
            let x = rng.uniform_in(0.0, w as f64);
            let y = rng.uniform_in(0.0, h as f64);
            let (cx, cy) = tf.to_canvas(x, y);
            let (bx, by) = tf.from_canvas(cx, cy);
            assert!((bx - x).abs() < 1.0 && (by - y).abs() < 1.0);
        }
    }

    #[test]
    fn quantize_grid_points_and_saturation() {
        let q = QuantParams::new(0.5).unwrap();
        let x = Tensor::from_vec(&[3], vec![0.0f32, 1.0, 1000.0]).unwrap();
        let qx = quantize(&x, q);
        assert_eq!(qx.data(), &[0, 2, 127]);
        let back = dequantize(&qx, q);
        assert_eq!(back.data(), &[0.0, 1.0, 63.5]);
    }

    #[test]
    fn quantize_is_idempotent_on_grid() {
        let q = QuantParams::new(0.25).unwrap();
        let mut rng = Rng::new(9);
        let x = Tensor::from_vec(&[64], (0..64).map(|_| rng.uniform_in(-40.0, 40.0) as f32).collect())
            .unwrap();
        let q1 = quantize(&x, q);
        let q2 = quantize(&dequantize(&q1, q), q);
        assert_eq!(q1, q2);
    }

    #[test]
    fn requantize_rounds_half_to_even() {
        let acc = Tensor::from_vec(&[4], vec![1i32, 3, 5, 300]).unwrap();
        let out = requantize(&acc, 0.5);
        // 0.5 -> 0, 1.5 -> 2, 2.5 -> 2, 150 -> clamp 127.
        assert_eq!(out.data(), &[0, 2, 2, 127]);
    }
}
