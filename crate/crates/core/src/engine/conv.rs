//! 2-D convolution over NHWC inputs with `[out, kh, kw, in]` kernels.
//!
//! Two forward paths exist: a direct nested-loop reference and a
//! patch-matrix (im2col) path that hands the heavy lifting to a GEMM. The
//! graph executor always uses the patch-matrix path; the reference is kept
//! as its oracle.

use crate::error::{Error, Result};

use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)`; the extra padding row/column, if
    /// any, goes to the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> std::result::Result<Self, String> {
        if input.len() != 4 {
            return Err(format!("expected NHWC input of rank 4, got shape {input:?}"));
        }
        if kernel.len() != 4 {
            return Err(format!(
                "expected kernel [out, kh, kw, in] of rank 4, got shape {kernel:?}"
            ));
        }
        if stride == 0 {
            return Err("stride must be positive".into());
        }
        let (batch, in_h, in_w, in_c) = (input[0], input[1], input[2], input[3]);
        let (out_c, k_h, k_w, k_in) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if k_in != in_c {
            return Err(format!(
                "kernel expects {k_in} input channels but input shape {input:?} has {in_c}"
            ));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(format!(
                        "kernel {k_h}x{k_w} larger than input {in_h}x{in_w} with valid padding"
                    ));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn patch_count(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.out_c]
    }

    /// Input coordinate touched by output `o` at kernel offset `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.patch_count() * k];
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * k;
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let dst = row + (ky * g.k_w + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let c = g.in_c;
    let mut out = vec![T::zero(); g.batch * g.in_h * g.in_w * c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * k;
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let dst = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let src = row + (ky * g.k_w + kx) * c;
                        for (o, &v) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows `[patches, out_c]` = patches `[patches, K]` x kernel^T.
pub(crate) fn conv_forward_cols<T: Scalar>(cols: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let m = g.patch_count();
    let mut out = vec![T::zero(); m * g.out_c];
    gemm(
        MatRef::row_major(cols, m, k),
        MatRef::transposed(kernel, k, g.out_c),
        T::zero(),
        &mut out,
    );
    out
}

/// Kernel gradient `[out_c, K]` = grad_out^T x patches.
pub(crate) fn conv_kernel_grad<T: Scalar>(cols: &[T], grad_out: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let m = g.patch_count();
    let mut out = vec![T::zero(); g.out_c * k];
    gemm(
        MatRef::transposed(grad_out, g.out_c, m),
        MatRef::row_major(cols, m, k),
        T::zero(),
        &mut out,
    );
    out
}

/// Input gradient, NHWC.
pub(crate) fn conv_input_grad<T: Scalar>(kernel: &[T], grad_out: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let m = g.patch_count();
    let mut dcols = vec![T::zero(); m * k];
    gemm(
        MatRef::row_major(grad_out, m, g.out_c),
        MatRef::row_major(kernel, g.out_c, k),
        T::zero(),
        &mut dcols,
    );
    col2im(&dcols, g)
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)
        .map_err(|m| Error::shape("conv2d", m))
}

/// Convolution through the patch-matrix GEMM path.
pub fn conv2d_im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, stride, padding)?;
    let cols = im2col(input.data(), &g);
    Ok(Tensor::from_parts(
        g.output_shape(),
        conv_forward_cols(&cols, kernel.data(), &g),
    ))
}

/// Direct nested-loop convolution.
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, stride, padding)?;
    let x = input.data();
    let w = kernel.data();
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * g.out_c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for co in 0..g.out_c {
                    let mut acc = T::zero();
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            for ci in 0..g.in_c {
                                let xv = x[((b * g.in_h + iy as usize) * g.in_w + ix as usize)
                                    * g.in_c
                                    + ci];
                                let wv = w[((co * g.k_h + ky) * g.k_w + kx) * g.in_c + ci];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * g.out_h + oy) * g.out_w + ox) * g.out_c + co] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn same_padding_matches_tensorflow_geometry() {
        let g = ConvGeometry::new(&[1, 32, 32, 16], &[32, 3, 3, 16], 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (16, 16, 0, 0));
        let g = ConvGeometry::new(&[1, 32, 32, 16], &[16, 3, 3, 16], 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (32, 1));
        let g = ConvGeometry::new(&[1, 32, 32, 16], &[32, 1, 1, 16], 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (16, 0));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let err = ConvGeometry::new(&[1, 4, 4, 3], &[2, 3, 3, 4], 1, Padding::Same).unwrap_err();
        assert!(err.contains("4 input channels"), "{err}");
    }

    #[test]
    fn im2col_path_agrees_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w, cin, cout, k, stride, pad) in &[
            (5, 5, 3, 4, 3, 1, Padding::Same),
            (8, 7, 2, 5, 3, 2, Padding::Same),
            (6, 6, 4, 3, 1, 2, Padding::Same),
            (7, 5, 2, 2, 3, 2, Padding::Valid),
        ] {
            let x = random(&[2, h, w, cin], &mut rng);
            let kern = random(&[cout, k, k, cin], &mut rng);
            let fast = conv2d_im2col(&x, &kern, stride, pad).unwrap();
            let slow = conv2d_reference(&x, &kern, stride, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
