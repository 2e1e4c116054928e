//! Gradient-free numeric kernels shared by the tape and by frozen networks.

use crate::error::{Result, TensorError};
use crate::real::{Real, Strides};
use crate::tensor::Tensor;

/// Stride, dilation and zero padding of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Conv2dSpec { stride, dilation, padding }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 1, 0)
    }
}

/// Resolved sizes of one convolution, including which kernel taps ever land
/// inside the input. Taps that only ever read padding are skipped entirely.
#[derive(Debug, Clone)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub spec: Conv2dSpec,
    taps: Vec<(usize, usize)>,
}

fn out_len(input: usize, padding: usize, dilation: usize, k: usize, stride: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span || stride == 0 {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], k_shape: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let [c_in, h, w] = *x_shape else {
            return Err(TensorError::RankError {
                op: "conv2d",
                expected: 3,
                got: x_shape.to_vec(),
            });
        };
        let [c_out, kc, kh, kw] = *k_shape else {
            return Err(TensorError::RankError {
                op: "conv2d",
                expected: 4,
                got: k_shape.to_vec(),
            });
        };
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: k_shape.to_vec(),
            });
        }
        let dilation = spec.dilation.max(1);
        let (Some(h_out), Some(w_out)) = (
            out_len(h, spec.padding, dilation, kh, spec.stride),
            out_len(w, spec.padding, dilation, kw, spec.stride),
        ) else {
            return Err(TensorError::EmptyOutput { input: x_shape.to_vec() });
        };
        let spec = Conv2dSpec { dilation, ..spec };
        let mut geo = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
            spec,
            taps: Vec::new(),
        };
        let rows_hit = |ky: usize| (0..h_out).any(|oy| geo.input_row(oy, ky).is_some());
        let cols_hit = |kx: usize| (0..w_out).any(|ox| geo.input_col(ox, kx).is_some());
        let taps = (0..kh)
            .flat_map(|ky| (0..kw).map(move |kx| (ky, kx)))
            .filter(|&(ky, kx)| rows_hit(ky) && cols_hit(kx))
            .collect();
        geo.taps = taps;
        Ok(geo)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let pos = (oy * self.spec.stride + ky * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < self.h).then_some(pos as usize)
    }

    fn input_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let pos = (ox * self.spec.stride + kx * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < self.w).then_some(pos as usize)
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c_out, self.h_out, self.w_out]
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.taps.len()
    }

    /// Unfolds the input into a `(c_in·taps) × positions` matrix.
    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let p = self.positions();
        let mut cols = vec![F::zero(); self.col_rows() * p];
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &mut cols[(ci * self.taps.len() + t) * p..][..p];
                for oy in 0..self.h_out {
                    let Some(iy) = self.input_row(oy, ky) else { continue };
                    for ox in 0..self.w_out {
                        if let Some(ix) = self.input_col(ox, kx) {
                            row[oy * self.w_out + ox] = plane[iy * self.w + ix];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &cols[(ci * self.taps.len() + t) * p..][..p];
                for oy in 0..self.h_out {
                    let Some(iy) = self.input_row(oy, ky) else { continue };
                    for ox in 0..self.w_out {
                        if let Some(ix) = self.input_col(ox, kx) {
                            plane[iy * self.w + ix] += row[oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }

    /// Kernel restricted to active taps, as a `c_out × (c_in·taps)` matrix.
    fn gather_kernel<F: Real>(&self, k: &[F]) -> Vec<F> {
        let taps = self.taps.len();
        let mut out = Vec::with_capacity(self.c_out * self.col_rows());
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let base = (co * self.c_in + ci) * self.kh * self.kw;
                out.extend(self.taps.iter().map(|&(ky, kx)| k[base + ky * self.kw + kx]));
            }
        }
        debug_assert_eq!(out.len(), self.c_out * self.c_in * taps);
        out
    }

    fn scatter_kernel<F: Real>(&self, kmat: &[F]) -> Vec<F> {
        let mut dk = vec![F::zero(); self.c_out * self.c_in * self.kh * self.kw];
        let taps = self.taps.len();
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let base = (co * self.c_in + ci) * self.kh * self.kw;
                let src = &kmat[(co * self.c_in + ci) * taps..][..taps];
                for (&(ky, kx), &v) in self.taps.iter().zip(src) {
                    dk[base + ky * self.kw + kx] = v;
                }
            }
        }
        dk
    }
}

/// Dense product of row-major `m×k` and `k×n` buffers.
pub fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    F::gemm(m, k, n, a, Strides::row_major(k), b, Strides::row_major(n), F::zero(), &mut out);
    out
}

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)))
}

pub fn transpose2d<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = x.dims2("transpose2d")?;
    let src = x.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| src[i * c + j]));
    }
    Ok(Tensor::from_parts_unchecked(vec![c, r], out))
}

pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, c) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

/// Cross-correlation of `x: C_in×H×W` with `k: C_out×C_in×kh×kw` plus an
/// optional per-output-channel bias.
pub fn conv2d<F: Real>(x: &Tensor<F>, k: &Tensor<F>, bias: Option<&Tensor<F>>, spec: Conv2dSpec) -> Result<Tensor<F>> {
    let geo = ConvGeometry::new(x.shape(), k.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![geo.c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(conv2d_with(&geo, x.data(), k.data(), bias.map(|b| b.data())))
}

pub(crate) fn conv2d_with<F: Real>(geo: &ConvGeometry, x: &[F], k: &[F], bias: Option<&[F]>) -> Tensor<F> {
    let p = geo.positions();
    let mut out = vec![F::zero(); geo.c_out * p];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(p).zip(b) {
            row.fill(bv);
        }
    }
    if !geo.taps.is_empty() {
        let cols = geo.im2col(x);
        let kmat = geo.gather_kernel(k);
        let r = geo.col_rows();
        F::gemm(
            geo.c_out,
            r,
            p,
            &kmat,
            Strides::row_major(r),
            &cols,
            Strides::row_major(p),
            F::one(),
            &mut out,
        );
    }
    Tensor::from_parts_unchecked(geo.out_shape().to_vec(), out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dk: Option<Vec<F>>,
    pub dbias: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Real>(geo: &ConvGeometry, x: &[F], k: &[F], g: &[F], want: (bool, bool, bool)) -> ConvGrads<F> {
    let p = geo.positions();
    let r = geo.col_rows();
    let dbias = want.2.then(|| g.chunks(p).map(|row| row.iter().copied().sum()).collect());
    if geo.taps.is_empty() {
        return ConvGrads {
            dx: want.0.then(|| vec![F::zero(); x.len()]),
            dk: want.1.then(|| vec![F::zero(); k.len()]),
            dbias,
        };
    }
    let dk = want.1.then(|| {
        let cols = geo.im2col(x);
        let mut dkmat = vec![F::zero(); geo.c_out * r];
        F::gemm(
            geo.c_out,
            p,
            r,
            g,
            Strides::row_major(p),
            &cols,
            Strides::transposed(p),
            F::zero(),
            &mut dkmat,
        );
        geo.scatter_kernel(&dkmat)
    });
    let dx = want.0.then(|| {
        let kmat = geo.gather_kernel(k);
        let mut dcols = vec![F::zero(); r * p];
        F::gemm(
            r,
            geo.c_out,
            p,
            &kmat,
            Strides::transposed(r),
            g,
            Strides::row_major(p),
            F::zero(),
            &mut dcols,
        );
        let mut dx = vec![F::zero(); x.len()];
        geo.col2im(&dcols, &mut dx);
        dx
    });
    ConvGrads { dx, dk, dbias }
}

pub fn leaky_relu<F: Real>(x: &Tensor<F>, slope: F) -> Tensor<F> {
    x.map(|v| if v >= F::zero() { v } else { v * slope })
}
