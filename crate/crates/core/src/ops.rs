//! Tensor-level primitives: convolution, transposed convolution, dense
//! layers and pointwise activations.
//!
//! Convolutions run as im2col followed by a matrix product. The transposed
//! convolution is the exact adjoint of [`conv2d`] with respect to its input,
//! so both share one [`ConvGeometry`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output extent is `floor((n - k) / stride) + 1`.
    Valid,
    /// Output extent `ceil(n / stride)`, padding split with the smaller half first.
    Same,
}

/// Index bookkeeping for one convolution, viewed from the forward direction:
/// an `in_h x in_w x cin` image maps to `out_h x out_w x cout`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_geometry(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(Error::shape(format!("kernel {k} larger than input extent {n}")));
            }
            Ok((0, (n - k) / stride + 1))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            if k > n + total {
                return Err(Error::shape(format!("kernel {k} larger than padded extent")));
            }
            Ok((total / 2, out))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        cin: usize,
        k: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::shape("stride and kernel size must be positive"));
        }
        let (pad_top, out_h) = axis_geometry(in_h, k, stride, padding)?;
        let (pad_left, out_w) = axis_geometry(in_w, k, stride, padding)?;
        Ok(ConvGeometry { in_h, in_w, cin, cout, k, stride, pad_top, pad_left, out_h, out_w })
    }

    /// Geometry of a transposed convolution mapping `src_h x src_w` (with the
    /// kernel's `cout` channels) back to `dst_h x dst_w` (`cin` channels).
    pub fn transposed(
        src_h: usize,
        src_w: usize,
        dst: Option<(usize, usize)>,
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (k, cin, cout) = kernel_dims(kernel_shape)?;
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        let (dst_h, dst_w) = dst.unwrap_or_else(|| default_transposed_extent(src_h, src_w, k, stride, padding));
        let geo = ConvGeometry::new(dst_h, dst_w, cin, k, cout, stride, padding)?;
        if geo.out_h != src_h || geo.out_w != src_w {
            return Err(Error::shape(format!(
                "transposed target {dst_h}x{dst_w} does not map back to {src_h}x{src_w}"
            )));
        }
        Ok(geo)
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    pub fn macs(&self) -> usize {
        self.positions() * self.patch_len() * self.cout
    }
}

/// Output extent of a transposed convolution when no explicit size is given.
pub fn default_transposed_extent(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((h - 1) * stride + k, (w - 1) * stride + k),
        Padding::Same => (h * stride, w * stride),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [k, k2, cin, cout] if k == k2 => Ok((k, cin, cout)),
        _ => Err(Error::shape(format!("kernel must be [k, k, cin, cout], got {shape:?}"))),
    }
}

fn im2col(x: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.positions() * plen];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let plen = g.patch_len();
    let mut x = vec![0.0; g.in_h * g.in_w * g.cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution on raw buffers.
pub(crate) fn conv_forward_raw(x: &[Real], kernel: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let mut out = vec![0.0; g.positions() * g.cout];
    let kmat = Mat::row_major(kernel, g.patch_len(), g.cout);
    if g.is_pointwise() {
        gemm(Mat::row_major(x, g.positions(), g.cin), kmat, &mut out, 0.0);
    } else {
        let cols = im2col(x, g);
        gemm(Mat::row_major(&cols, g.positions(), g.patch_len()), kmat, &mut out, 0.0);
    }
    out
}

/// Gradient of the convolution output with respect to its input, which is
/// also the forward pass of the transposed convolution.
pub(crate) fn conv_input_grad_raw(dy: &[Real], kernel: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let kt = Mat::transposed(kernel, g.patch_len(), g.cout);
    if g.is_pointwise() {
        let mut dx = vec![0.0; g.in_h * g.in_w * g.cin];
        gemm(Mat::row_major(dy, g.positions(), g.cout), kt, &mut dx, 0.0);
        return dx;
    }
    let mut dcols = vec![0.0; g.positions() * g.patch_len()];
    gemm(Mat::row_major(dy, g.positions(), g.cout), kt, &mut dcols, 0.0);
    col2im(&dcols, g)
}

/// Gradient of the convolution output with respect to the kernel.
pub(crate) fn conv_kernel_grad_raw(x: &[Real], dy: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let mut dk = vec![0.0; g.patch_len() * g.cout];
    let dymat = Mat::row_major(dy, g.positions(), g.cout);
    if g.is_pointwise() {
        gemm(Mat::transposed(x, g.positions(), g.cin), dymat, &mut dk, 0.0);
    } else {
        let cols = im2col(x, g);
        gemm(Mat::transposed(&cols, g.positions(), g.patch_len()), dymat, &mut dk, 0.0);
    }
    dk
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    t.ensure_finite(what)
}

/// 2-D convolution of an `[h, w, cin]` image with a `[k, k, cin, cout]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let geo = conv2d_geometry(input, kernel, stride, padding)?;
    check_finite(input, "conv2d input")?;
    check_finite(kernel, "conv2d kernel")?;
    let out = conv_forward_raw(input.data(), kernel.data(), &geo);
    Ok(Tensor::from_parts(vec![geo.out_h, geo.out_w, geo.cout], out))
}

pub(crate) fn conv2d_geometry(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<ConvGeometry> {
    let (h, w, c) = input.hwc()?;
    let (k, cin, cout) = kernel_dims(kernel.shape())?;
    if c != cin {
        return Err(Error::shape(format!("conv2d: input has {c} channels, kernel expects {cin}")));
    }
    ConvGeometry::new(h, w, cin, k, cout, stride, padding)
}

pub(crate) fn conv2d_transpose_geometry(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    output_hw: Option<(usize, usize)>,
) -> Result<ConvGeometry> {
    let (h, w, c) = input.hwc()?;
    let (_, _, cout) = kernel_dims(kernel.shape())?;
    if c != cout {
        return Err(Error::shape(format!(
            "conv2d_transpose: input has {c} channels, kernel produces {cout}"
        )));
    }
    ConvGeometry::transposed(h, w, output_hw, kernel.shape(), stride, padding)
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernel.
///
/// `output_hw` selects the output extent when several inputs sizes map to
/// the same convolution output; by default it is the inverse of the shape
/// map (`(n - 1) * stride + k` for valid, `n * stride` for same padding).
pub fn conv2d_transpose(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    output_hw: Option<(usize, usize)>,
) -> Result<Tensor> {
    let geo = conv2d_transpose_geometry(input, kernel, stride, padding, output_hw)?;
    check_finite(input, "conv2d_transpose input")?;
    check_finite(kernel, "conv2d_transpose kernel")?;
    let out = conv_input_grad_raw(input.data(), kernel.data(), &geo);
    Ok(Tensor::from_parts(vec![geo.in_h, geo.in_w, geo.cin], out))
}

/// Affine map of the flattened input: `x · W + b` with `W` shaped `[in, out]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n_in, n_out) = dense_dims(input, weight)?;
    if bias.shape() != [n_out] {
        return Err(Error::shape(format!("dense bias must be [{n_out}], got {:?}", bias.shape())));
    }
    let mut out = bias.data().to_vec();
    gemm(
        Mat::row_major(input.data(), 1, n_in),
        Mat::row_major(weight.data(), n_in, n_out),
        &mut out,
        1.0,
    );
    let t = Tensor::from_parts(vec![n_out], out);
    check_finite(&t, "dense")?;
    Ok(t)
}

pub(crate) fn dense_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize)> {
    match *weight.shape() {
        [n_in, n_out] if n_in == input.len() => Ok((n_in, n_out)),
        _ => Err(Error::shape(format!(
            "dense: flattened input of {} values vs weight {:?}",
            input.len(),
            weight.shape()
        ))),
    }
}

pub fn leaky_relu(x: &Tensor, slope: Real) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    let t = x.map(Real::exp);
    check_finite(&t, "exp")?;
    Ok(t)
}

/// Elementwise natural log; every input must be strictly positive.
pub fn log(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::numeric(format!("log of non-positive value {v}")));
    }
    Ok(x.map(Real::ln))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution with explicit zero padding.
    fn direct_conv(x: &Tensor, k: &Tensor, stride: usize, pad: (usize, usize), out: (usize, usize)) -> Tensor {
        let (h, w, cin) = x.hwc().unwrap();
        let (ks, cout) = (k.shape()[0], k.shape()[3]);
        Tensor::from_hwc_fn(out.0, out.1, cout, |oy, ox, co| {
            let mut acc = 0.0;
            for ky in 0..ks {
                for kx in 0..ks {
                    let iy = (oy * stride + ky) as isize - pad.0 as isize;
                    let ix = (ox * stride + kx) as isize - pad.1 as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += x.at(iy as usize, ix as usize, ci)
                            * k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[5, 7, 3], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &k, 1, Padding::Same).unwrap(), x);
    }

    #[test]
    fn table_shape_16_to_13() {
        let x = Tensor::zeros(&[16, 16, 64]);
        let k = Tensor::zeros(&[4, 4, 64, 16]);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[13, 13, 16]);
        let back = conv2d_transpose(&Tensor::zeros(&[13, 13, 16]), &k, 1, Padding::Valid, None).unwrap();
        assert_eq!(back.shape(), &[16, 16, 64]);
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[6, 6, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        for (stride, padding) in [(1, Padding::Valid), (1, Padding::Same), (2, Padding::Same), (2, Padding::Valid)] {
            let y = conv2d(&x, &k, stride, padding).unwrap();
            let g = conv2d_geometry(&x, &k, stride, padding).unwrap();
            let want = direct_conv(&x, &k, stride, (g.pad_top, g.pad_left), (g.out_h, g.out_w));
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12, "{stride} {padding:?}");
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, k, stride, padding) in [(8, 3, 1, Padding::Same), (8, 5, 2, Padding::Same), (9, 4, 1, Padding::Valid), (11, 3, 2, Padding::Valid)] {
            let x = random(&[h, h + 1, 2], &mut rng);
            let kern = random(&[k, k, 2, 3], &mut rng);
            let y = conv2d(&x, &kern, stride, padding).unwrap();
            let v = random(y.shape(), &mut rng);
            let xt = conv2d_transpose(&v, &kern, stride, padding, Some((h, h + 1))).unwrap();
            let lhs = y.dot(&v).unwrap();
            let rhs = x.dot(&xt).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_target_must_be_consistent() {
        let k = Tensor::zeros(&[4, 4, 2, 2]);
        assert!(conv2d_transpose(&Tensor::zeros(&[5, 5, 2]), &k, 1, Padding::Valid, Some((9, 9))).is_err());
        assert!(conv2d(&Tensor::zeros(&[3, 3, 2]), &k, 1, Padding::Valid).is_err());
        assert!(conv2d(&Tensor::zeros(&[8, 8, 3]), &k, 1, Padding::Valid).is_err());
    }

    #[test]
    fn dense_matches_matrix_vector_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 2, 3], &mut rng);
        let w = random(&[12, 5], &mut rng);
        let b = random(&[5], &mut rng);
        let y = dense(&x, &w, &b).unwrap();
        for j in 0..5 {
            let want: Real = b.data()[j] + (0..12).map(|i| x.data()[i] * w.data()[i * 5 + j]).sum::<Real>();
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        let v = random(&[4], &mut rng);
        assert_eq!(dense(&v, &eye, &Tensor::zeros(&[4])).unwrap(), v);
        assert!(dense(&v, &w, &b).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let t = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&t, 0.2).data(), &[-0.2, 2.0]);
        let x = Tensor::new(vec![3], vec![0.5, 1.0, 7.25]).unwrap();
        assert!(exp(&log(&x).unwrap()).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        assert!(log(&Tensor::new(vec![1], vec![0.0]).unwrap()).is_err());
    }
}
