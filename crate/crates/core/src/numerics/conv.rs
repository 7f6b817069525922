//! Channel-weighted 2-D convolution: `out[n, j] = w_j · (x ⊛ K_j) + b_j`.
//!
//! Lowered to im2col + GEMM per image. Batches are split into fixed-size
//! chunks so parameter-gradient reductions happen in the same order no
//! matter how many worker threads are running.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

/// Images per work unit in the backward pass. Fixed so reductions are
/// bit-identical across thread counts.
const BACKWARD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `C_out × C_in × k × k`
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
    pub channel_weight: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    /// Absent when the caller asked for parameter gradients only.
    pub x: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
    pub channel_weight: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    /// Zero kernels and biases, unit channel weights.
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::config(format!(
                "conv2d: kernel ({kernel}), stride ({stride}) and channel counts ({c_in}→{c_out}) must be ≥ 1"
            )));
        }
        Ok(ConvParams {
            kernels: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: vec![T::zero(); c_out],
            channel_weight: vec![T::one(); c_out],
            stride,
            padding,
        })
    }

    /// He-normal kernels (std `sqrt(2 / fan_in)`), zero biases, unit channel weights.
    pub fn he_normal<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(c_in, c_out, kernel, stride, padding)?;
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        for v in p.kernels.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::lit(z * std);
        }
        Ok(p)
    }

    pub fn c_out(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// Output spatial extents for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {hp}×{wp} is smaller than the {k}×{k} kernel"),
            ));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn check(&self, x: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = x.dims4("conv2d")?;
        let ks = self.kernels.shape();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be C_out×C_in×k×k, got {ks:?}"),
            ));
        }
        if dims[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channel dimension is {} but kernels expect C_in = {}",
                    dims[1], ks[1]
                ),
            ));
        }
        if self.bias.len() != ks[0] || self.channel_weight.len() != ks[0] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "C_out = {} but bias has {} and channel_weight has {} entries",
                    ks[0],
                    self.bias.len(),
                    self.channel_weight.len()
                ),
            ));
        }
        if self.stride == 0 {
            return Err(Error::config("conv2d: stride must be ≥ 1"));
        }
        Ok(dims)
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih as usize >= g.h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw as usize >= g.w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            plane[ih as usize * g.w + iw as usize] =
                                plane[ih as usize * g.w + iw as usize] + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(p: &ConvParams<T>, dims: [usize; 4]) -> Result<Geometry> {
    let (ho, wo) = p.output_hw(dims[2], dims[3])?;
    Ok(Geometry {
        c_in: dims[1],
        h: dims[2],
        w: dims[3],
        k: p.kernel_size(),
        stride: p.stride,
        pad: p.padding,
        ho,
        wo,
    })
}

/// Forward pass returning `(out, raw)` where `raw = x ⊛ K` before channel
/// weighting and bias. `raw` is what the backward pass needs for `∂/∂w`.
pub fn conv2d_with_raw<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = p.check(x)?;
    let g = geometry(p, dims)?;
    let (n, c_out) = (dims[0], p.c_out());
    let per_in = g.c_in * g.h * g.w;
    let per_out = c_out * g.cols();
    let mut raw = vec![T::zero(); n * per_out];
    let kernels = p.kernels.data();
    raw.par_chunks_mut(per_out.max(1)).enumerate().for_each_init(
        || vec![T::zero(); g.rows() * g.cols()],
        |cols, (i, dst)| {
            im2col(&x.data()[i * per_in..(i + 1) * per_in], &g, cols);
            gemm(
                c_out,
                g.rows(),
                g.cols(),
                kernels,
                Trans::No,
                cols,
                Trans::No,
                T::zero(),
                dst,
            );
        },
    );
    let mut out = raw.clone();
    let hw = g.cols();
    for (idx, v) in out.iter_mut().enumerate() {
        let j = (idx / hw) % c_out;
        *v = p.channel_weight[j] * *v + p.bias[j];
    }
    let shape = [n, c_out, g.ho, g.wo];
    Ok((Tensor::from_vec(&shape, out)?, Tensor::from_vec(&shape, raw)?))
}

pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_with_raw(x, p).map(|(out, _)| out)
}

/// Full backward pass: gradients for the input and every parameter.
pub fn conv2d_backward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (_, raw) = conv2d_with_raw(x, p)?;
    conv2d_backward_cached(x, p, &raw, grad_out, true)
}

/// Backward pass reusing the `raw` tensor from [`conv2d_with_raw`].
/// With `want_input == false` the (often unneeded) input gradient is skipped.
pub fn conv2d_backward_cached<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    raw: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let dims = p.check(x)?;
    let g = geometry(p, dims)?;
    let (n, c_out) = (dims[0], p.c_out());
    let expected = [n, c_out, g.ho, g.wo];
    if grad_out.shape() != expected || raw.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} / raw {:?} must equal the conv2d output shape {:?}",
                grad_out.shape(),
                raw.shape(),
                expected
            ),
        ));
    }
    let hw = g.cols();
    let per_in = g.c_in * g.h * g.w;
    let per_out = c_out * hw;
    let rows = g.rows();
    let kernels = p.kernels.data();

    struct Partial<T> {
        kernels: Vec<T>,
        bias: Vec<T>,
        cw: Vec<T>,
    }

    let work = |chunk: usize, mut gx: Option<&mut [T]>| {
        let mut part = Partial {
            kernels: vec![T::zero(); c_out * rows],
            bias: vec![T::zero(); c_out],
            cw: vec![T::zero(); c_out],
        };
        let mut cols = vec![T::zero(); rows * hw];
        let mut g_raw = vec![T::zero(); per_out];
        let mut gcols = if gx.is_some() {
            vec![T::zero(); rows * hw]
        } else {
            Vec::new()
        };
        let lo = chunk * BACKWARD_CHUNK;
        let hi = (lo + BACKWARD_CHUNK).min(n);
        for i in lo..hi {
            let go = &grad_out.data()[i * per_out..(i + 1) * per_out];
            let rw = &raw.data()[i * per_out..(i + 1) * per_out];
            for j in 0..c_out {
                let (mut sb, mut sw) = (T::zero(), T::zero());
                let w = p.channel_weight[j];
                for q in j * hw..(j + 1) * hw {
                    sb = sb + go[q];
                    sw = sw + go[q] * rw[q];
                    g_raw[q] = go[q] * w;
                }
                part.bias[j] = part.bias[j] + sb;
                part.cw[j] = part.cw[j] + sw;
            }
            im2col(&x.data()[i * per_in..(i + 1) * per_in], &g, &mut cols);
            gemm(
                c_out,
                hw,
                rows,
                &g_raw,
                Trans::No,
                &cols,
                Trans::Yes,
                T::one(),
                &mut part.kernels,
            );
            if let Some(gx) = gx.as_deref_mut() {
                gemm(
                    rows,
                    c_out,
                    hw,
                    kernels,
                    Trans::Yes,
                    &g_raw,
                    Trans::No,
                    T::zero(),
                    &mut gcols,
                );
                let local = i - lo;
                col2im(&gcols, &g, &mut gx[local * per_in..(local + 1) * per_in]);
            }
        }
        part
    };

    let mut grad_x = Vec::new();
    let partials: Vec<Partial<T>> = if want_input {
        grad_x = vec![T::zero(); n * per_in];
        grad_x
            .par_chunks_mut((BACKWARD_CHUNK * per_in).max(1))
            .enumerate()
            .map(|(chunk, gx)| work(chunk, Some(gx)))
            .collect()
    } else {
        (0..n.div_ceil(BACKWARD_CHUNK))
            .into_par_iter()
            .map(|chunk| work(chunk, None))
            .collect()
    };

    let mut gk = vec![T::zero(); c_out * rows];
    let mut gb = vec![T::zero(); c_out];
    let mut gw = vec![T::zero(); c_out];
    for part in &partials {
        for (a, b) in gk.iter_mut().zip(&part.kernels) {
            *a = *a + *b;
        }
        for j in 0..c_out {
            gb[j] = gb[j] + part.bias[j];
            gw[j] = gw[j] + part.cw[j];
        }
    }
    Ok(ConvGrads {
        x: if want_input {
            Some(Tensor::from_vec(x.shape(), grad_x)?)
        } else {
            None
        },
        kernels: Tensor::from_vec(p.kernels.shape(), gk)?,
        bias: gb,
        channel_weight: gw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kernel: &[f64], c_out: usize, c_in: usize, k: usize, bias: &[f64], cw: &[f64]) -> ConvParams<f64> {
        ConvParams {
            kernels: Tensor::from_f64(&[c_out, c_in, k, k], kernel).unwrap(),
            bias: bias.to_vec(),
            channel_weight: cw.to_vec(),
            stride: 1,
            padding: 0,
        }
    }

    #[test]
    fn zero_input_leaves_bias() {
        let p = params(&[0.3; 9], 1, 1, 3, &[0.7], &[1.0]);
        let mut p = p;
        p.padding = 1;
        let y = conv2d(&Tensor::zeros(&[1, 1, 3, 3]), &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn unit_effective_weight_is_identity() {
        let p = params(&[2.0], 1, 1, 1, &[0.0], &[0.5]);
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let p = params(&[1.0; 9], 1, 1, 3, &[0.0], &[1.0]);
        let x = Tensor::from_f64(&[1, 1, 3, 3], &(1..=9).map(f64::from).collect::<Vec<_>>()).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 45.0);
    }

    #[test]
    fn output_extent_formula() {
        let mut p = ConvParams::<f64>::zeros(2, 3, 3, 2, 1).unwrap();
        assert_eq!(p.output_hw(28, 28).unwrap(), (14, 14));
        p.padding = 0;
        assert_eq!(p.output_hw(5, 7).unwrap(), (2, 3));
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let p = ConvParams::<f64>::zeros(2, 3, 3, 1, 1).unwrap();
        let err = conv2d(&Tensor::zeros(&[1, 4, 5, 5]), &p).unwrap_err().to_string();
        assert!(err.contains("input channel dimension is 4"), "{err}");
    }

    #[test]
    fn zero_kernel_or_stride_rejected() {
        assert!(ConvParams::<f32>::zeros(1, 1, 0, 1, 0).is_err());
        assert!(ConvParams::<f32>::zeros(1, 1, 3, 0, 0).is_err());
    }

    #[test]
    fn scalar_backward_is_symbolic() {
        let p = params(&[2.0], 1, 1, 1, &[0.0], &[1.0]);
        let x = Tensor::from_f64(&[1, 1, 1, 1], &[3.0]).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.kernels.data()[0], 3.0);
        assert_eq!(g.channel_weight[0], 6.0);
        assert_eq!(g.bias[0], 1.0);
        assert_eq!(g.x.unwrap().data()[0], 2.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = params(&[0.5, -1.0, 2.0, 0.1], 1, 1, 2, &[0.3], &[1.5]);
        let x = Tensor::from_f64(&[1, 1, 3, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, 2.0, -1.0]).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(g.x.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.kernels.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.bias, vec![0.0]);
        assert_eq!(g.channel_weight, vec![0.0]);
    }
}
