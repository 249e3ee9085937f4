//! Dense row-major tensors (rank ≤ 4, `N×C×H×W` for feature maps) and the
//! numeric kernels the autodiff graph is built from.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks run
/// in `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    const DTYPE: &'static str;

    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices covering every strided index
                // of the m×k, k×n and m×n operands; checked in debug builds.
                debug_assert!(span(m, k, rsa, csa) <= a.len() || k == 0);
                debug_assert!(span(k, n, rsb, csb) <= b.len() || k == 0);
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

fn span(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    ((r - 1) as isize * rs + (c - 1) as isize * cs) as usize + 1
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > 4 {
            return Err(shape_err!("rank {} exceeds 4", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} elements, got {}", shape, n, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        assert!(shape.len() <= 4, "rank {} exceeds 4", shape.len());
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Shape left-padded with ones to rank 4.
    pub fn dims4(&self) -> [usize; 4] {
        dims4(&self.shape)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Element at a 4-d index of the left-padded shape.
    pub fn at4(&self, idx: [usize; 4]) -> T {
        let d = self.dims4();
        self.data[((idx[0] * d[1] + idx[1]) * d[2] + idx[2]) * d[3] + idx[3]]
    }

    /// One batch element of an `N×…` tensor, keeping a leading batch dim of 1.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenate along the leading (batch) axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }
}

pub fn dims4(shape: &[usize]) -> [usize; 4] {
    let mut d = [1usize; 4];
    let off = 4 - shape.len();
    d[off..].copy_from_slice(shape);
    d
}

fn strides4(d: [usize; 4]) -> [usize; 4] {
    [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
}

/// Strides of `inner` read at indices of `outer`; broadcast axes get 0.
fn bstrides(inner: [usize; 4], outer: [usize; 4]) -> [usize; 4] {
    let s = strides4(inner);
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if inner[i] == outer[i] { s[i] } else { 0 };
    }
    r
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (da, db) = (dims4(a), dims4(b));
    let mut out = Vec::with_capacity(rank);
    for i in 4 - rank..4 {
        let d = match (da[i], db[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
        out.push(d);
    }
    Ok(out)
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let d = dims4(&shape);
    let sa = bstrides(a.dims4(), d);
    let sb = bstrides(b.dims4(), d);
    let mut data = Vec::with_capacity(d.iter().product());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..d[3] {
                    data.push(f(a.data[oa + i3 * sa[3]], b.data[ob + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Sum `x` down to `shape`, which must broadcast to `x.shape()`.
pub fn sum_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    let d = x.dims4();
    let t = dims4(shape);
    if shape.len() > x.shape.len() || (0..4).any(|i| t[i] != d[i] && t[i] != 1) {
        return Err(shape_err!("cannot sum {:?} to {:?}", x.shape, shape));
    }
    let st = bstrides(t, d);
    let mut acc = vec![T::zero(); t.iter().product()];
    let mut k = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let o = i0 * st[0] + i1 * st[1] + i2 * st[2];
                if st[3] == 0 {
                    let mut s = T::zero();
                    for i3 in 0..d[3] {
                        s = s + x.data[k + i3];
                    }
                    acc[o] = acc[o] + s;
                } else {
                    for i3 in 0..d[3] {
                        acc[o + i3] = acc[o + i3] + x.data[k + i3];
                    }
                }
                k += d[3];
            }
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: acc,
    })
}

pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    let out = broadcast_shape(&x.shape, shape)?;
    if out != shape {
        return Err(shape_err!("cannot broadcast {:?} to {:?}", x.shape, shape));
    }
    let d = dims4(shape);
    let s = bstrides(x.dims4(), d);
    let mut data = Vec::with_capacity(d.iter().product());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let o = i0 * s[0] + i1 * s[1] + i2 * s[2];
                for i3 in 0..d[3] {
                    data.push(x.data[o + i3 * s[3]]);
                }
            }
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = mat_dims(a)?;
    let (k2, n) = mat_dims(b)?;
    if k != k2 {
        return Err(shape_err!("matmul {:?} · {:?}", a.shape, b.shape));
    }
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        k as isize,
        1,
        &b.data,
        n as isize,
        1,
        T::zero(),
        &mut c,
        n as isize,
        1,
    );
    Tensor::new(vec![m, n], c)
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = mat_dims(a)?;
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.data[i * n + j]);
        }
    }
    Tensor::new(vec![n, m], out)
}

fn mat_dims<T: Scalar>(a: &Tensor<T>) -> Result<(usize, usize)> {
    match a.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err!("expected a matrix, got {:?}", a.shape)),
    }
}

/// Geometry of a 2-d convolution with square stride and symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], weight: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [batch, cin, h, w] = x;
        let [cout, wcin, kh, kw] = weight;
        if cin != wcin {
            return Err(shape_err!("conv input has {} channels, weight expects {}", cin, wcin));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!(
                "conv kernel {}×{} stride {} pad {} does not fit {}×{}",
                kh,
                kw,
                stride,
                pad,
                h,
                w
            ));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pix(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let pix = g.pix();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * pix..][..pix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let pix = g.pix();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * pix..][..pix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)`, `x: N×Ci×H×W`, `w: Co×Ci×kh×kw`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    if x.shape.len() != 4 || w.shape.len() != 4 {
        return Err(shape_err!(
            "conv2d wants rank-4 operands, got {:?} and {:?}",
            x.shape,
            w.shape
        ));
    }
    let g = ConvGeom::new(x.dims4(), w.dims4(), stride, pad)?;
    let (k, pix) = (g.k(), g.pix());
    let mut y = vec![T::zero(); g.batch * g.cout * pix];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * pix]
    };
    for n in 0..g.batch {
        let xn = &x.data[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let b: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut cols);
            &cols
        };
        T::gemm(
            g.cout,
            k,
            pix,
            T::one(),
            &w.data,
            k as isize,
            1,
            b,
            pix as isize,
            1,
            T::zero(),
            &mut y[n * g.cout * pix..(n + 1) * g.cout * pix],
            pix as isize,
            1,
        );
    }
    Tensor::new(g.out_shape(), y)
}

/// Adjoint of [`conv2d`] in its input: maps an output gradient back to an
/// `N×Ci×h×w` input gradient.
pub fn conv2d_input_grad<T: Scalar>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Result<Tensor<T>> {
    let [batch, cout, ho, wo] = gy.dims4();
    let wdims = w.dims4();
    let g = ConvGeom::new([batch, wdims[1], h, wd], wdims, stride, pad)?;
    if g.cout != cout || g.ho != ho || g.wo != wo {
        return Err(shape_err!(
            "conv input grad: output grad {:?} inconsistent with weight {:?} at {}×{}",
            gy.shape,
            w.shape,
            h,
            wd
        ));
    }
    let (k, pix) = (g.k(), g.pix());
    let mut gx = vec![T::zero(); batch * g.cin * h * wd];
    let mut cols = vec![T::zero(); k * pix];
    for n in 0..batch {
        let gyn = &gy.data[n * cout * pix..(n + 1) * cout * pix];
        let gxn = &mut gx[n * g.cin * h * wd..(n + 1) * g.cin * h * wd];
        if g.pointwise() {
            T::gemm(
                k,
                cout,
                pix,
                T::one(),
                &w.data,
                1,
                k as isize,
                gyn,
                pix as isize,
                1,
                T::zero(),
                gxn,
                pix as isize,
                1,
            );
        } else {
            T::gemm(
                k,
                cout,
                pix,
                T::one(),
                &w.data,
                1,
                k as isize,
                gyn,
                pix as isize,
                1,
                T::zero(),
                &mut cols,
                pix as isize,
                1,
            );
            col2im(&g, &cols, gxn);
        }
    }
    Tensor::new(vec![batch, g.cin, h, wd], gx)
}

/// Adjoint of [`conv2d`] in its weight.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor<T>> {
    let [batch, cout, ho, wo] = gy.dims4();
    let xd = x.dims4();
    let g = ConvGeom::new(xd, [cout, xd[1], kh, kw], stride, pad)?;
    if g.batch != batch || g.ho != ho || g.wo != wo {
        return Err(shape_err!(
            "conv weight grad: input {:?} inconsistent with output grad {:?}",
            x.shape,
            gy.shape
        ));
    }
    let (k, pix) = (g.k(), g.pix());
    let mut gw = vec![T::zero(); cout * k];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * pix]
    };
    for n in 0..batch {
        let xn = &x.data[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let b: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut cols);
            &cols
        };
        let gyn = &gy.data[n * cout * pix..(n + 1) * cout * pix];
        T::gemm(
            cout,
            pix,
            k,
            T::one(),
            gyn,
            pix as isize,
            1,
            b,
            1,
            pix as isize,
            T::one(),
            &mut gw,
            k as isize,
            1,
        );
    }
    Tensor::new(vec![cout, g.cin, kh, kw], gw)
}

/// Two-tap bilinear weights for ×2 upsampling along one axis
/// (half-pixel centres, edge clamped).
fn up_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn spatial<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<[usize; 4]> {
    if x.shape.len() != 4 {
        return Err(shape_err!("{} wants N×C×H×W, got {:?}", op, x.shape));
    }
    Ok(x.dims4())
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = spatial(x, "upsample")?;
    let (ty, tx) = (up_taps(h), up_taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = wy0 * (wx0 * src[y0 * w + x0].f64() + wx1 * src[y0 * w + x1].f64())
                    + wy1 * (wx0 * src[y1 * w + x0].f64() + wx1 * src[y1 * w + x1].f64());
                dst[oy * wo + ox] = T::c(v);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Adjoint of [`upsample2`]: `N×C×2H×2W → N×C×H×W`.
pub fn upsample2_t<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = spatial(g, "upsample adjoint")?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(shape_err!("upsample adjoint needs even dims, got {:?}", g.shape));
    }
    let (h, w) = (ho / 2, wo / 2);
    let (ty, tx) = (up_taps(h), up_taps(w));
    let mut out = vec![0.0f64; n * c * h * w];
    for p in 0..n * c {
        let src = &g.data[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox].f64();
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out.into_iter().map(T::c).collect())
}

/// 2×2 average pooling.
pub fn avgpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = spatial(x, "downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("downsample needs even spatial dims, got {}×{}", h, w));
    }
    let (ho, wo) = (h / 2, w / 2);
    let q = T::c(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let s = &x.data[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let (a, b) = (2 * oy * w + 2 * ox, (2 * oy + 1) * w + 2 * ox);
                out.push(q * (s[a] + s[a + 1] + s[b] + s[b + 1]));
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Adjoint of [`avgpool2`].
pub fn avgpool2_t<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = spatial(g, "downsample adjoint")?;
    let (h, w) = (2 * ho, 2 * wo);
    let q = T::c(0.25);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let s = &g.data[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = q * s[(y / 2) * wo + x / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Channels `start..start+len` of an `N×C×…` tensor.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = *x.shape.get(1).ok_or_else(|| shape_err!("narrow needs rank ≥ 2"))?;
    if start + len > c {
        return Err(shape_err!("narrow {}..{} of {} channels", start, start + len, c));
    }
    let n = x.shape[0];
    let inner = x.numel() / (n * c);
    let mut data = Vec::with_capacity(n * len * inner);
    for b in 0..n {
        let base = (b * c + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[1] = len;
    Tensor::new(shape, data)
}

/// Zero-pad the channel axis with `before` and `after` channels.
pub fn pad_channels<T: Scalar>(x: &Tensor<T>, before: usize, after: usize) -> Result<Tensor<T>> {
    let c = *x.shape.get(1).ok_or_else(|| shape_err!("pad needs rank ≥ 2"))?;
    let n = x.shape[0];
    let inner = x.numel() / (n * c).max(1);
    let total = before + c + after;
    let mut data = vec![T::zero(); n * total * inner];
    for b in 0..n {
        let dst = (b * total + before) * inner;
        data[dst..dst + c * inner].copy_from_slice(&x.data[b * c * inner..(b + 1) * c * inner]);
    }
    let mut shape = x.shape.clone();
    shape[1] = total;
    Tensor::new(shape, data)
}
