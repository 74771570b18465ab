//! Forward and backward kernels for every differentiable operation.
//!
//! These are plain functions over [`Tensor`]s; [`crate::graph::Graph`] records
//! which one ran and calls the matching backward during reverse traversal.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_same_shape, Shape, Tensor};

/// Probability clip applied inside the cross-entropy log.
pub const CE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Logistic,
    Tanh,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }
}

struct ConvDims {
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Scalar>(
    input: Shape,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    // Kernel tensors are laid out (kh, kw, Cin, Cout) in the four shape slots.
    let k = kernel.shape();
    let (kh, kw, cin, cout) = (k.batch, k.height, k.width, k.channels);
    if input.channels != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.dims(),
            right: k.dims(),
        });
    }
    if bias.len() != cout {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: k.dims(),
            right: bias.shape().dims(),
        });
    }
    if geom.stride == 0 {
        return Err(Error::invalid("conv2d: stride must be at least 1"));
    }
    let ph = input.height + 2 * geom.padding;
    let pw = input.width + 2 * geom.padding;
    if ph < kh || pw < kw || kh == 0 || kw == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d window",
            left: input.dims(),
            right: k.dims(),
        });
    }
    Ok(ConvDims {
        kh,
        kw,
        cin,
        cout,
        ho: (ph - kh) / geom.stride + 1,
        wo: (pw - kw) / geom.stride + 1,
    })
}

fn is_pointwise(d: &ConvDims, geom: ConvGeometry) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.padding == 0
}

fn im2col<T: Scalar>(input: &Tensor<T>, d: &ConvDims, geom: ConvGeometry) -> Vec<T> {
    let s = input.shape();
    let kcols = d.kh * d.kw * d.cin;
    let mut cols = vec![T::zero(); s.batch * d.ho * d.wo * kcols];
    let src = input.data();
    let p = geom.padding as isize;
    let mut row = 0;
    for b in 0..s.batch {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let base = row * kcols;
                for ky in 0..d.kh {
                    let iy = (oy * geom.stride + ky) as isize - p;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * geom.stride + kx) as isize - p;
                        if ix < 0 || ix >= s.width as isize {
                            continue;
                        }
                        let from = s.index(b, iy as usize, ix as usize, 0);
                        let to = base + (ky * d.kw + kx) * d.cin;
                        cols[to..to + d.cin].copy_from_slice(&src[from..from + d.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], input: Shape, d: &ConvDims, geom: ConvGeometry) -> Vec<T> {
    let kcols = d.kh * d.kw * d.cin;
    let mut out = vec![T::zero(); input.len()];
    let p = geom.padding as isize;
    let mut row = 0;
    for b in 0..input.batch {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let base = row * kcols;
                for ky in 0..d.kh {
                    let iy = (oy * geom.stride + ky) as isize - p;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * geom.stride + kx) as isize - p;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let to = input.index(b, iy as usize, ix as usize, 0);
                        let from = base + (ky * d.kw + kx) * d.cin;
                        for (o, &g) in out[to..to + d.cin]
                            .iter_mut()
                            .zip(&cols[from..from + d.cin])
                        {
                            *o += g;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Zero-padded 2-D cross-correlation. Kernel is `(kh, kw, Cin, Cout)`, bias has `Cout` entries.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let d = conv_dims(s, kernel, bias, geom)?;
    input.ensure_finite("conv2d")?;
    let m = s.batch * d.ho * d.wo;
    let kcols = d.kh * d.kw * d.cin;
    let mut out = Vec::with_capacity(m * d.cout);
    for _ in 0..m {
        out.extend_from_slice(bias.data());
    }
    let owned;
    let cols: &[T] = if is_pointwise(&d, geom) {
        input.data()
    } else {
        owned = im2col(input, &d, geom);
        &owned
    };
    T::gemm(
        m,
        kcols,
        d.cout,
        T::one(),
        cols,
        kcols as isize,
        1,
        kernel.data(),
        d.cout as isize,
        1,
        T::one(),
        &mut out,
        d.cout as isize,
        1,
    );
    Tensor::from_vec(Shape::new(s.batch, d.ho, d.wo, d.cout), out)
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &[T],
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let d = conv_dims(s, kernel, bias, geom)?;
    let m = s.batch * d.ho * d.wo;
    let kcols = d.kh * d.kw * d.cin;
    debug_assert_eq!(grad_out.len(), m * d.cout);

    let mut gbias = vec![T::zero(); d.cout];
    for row in grad_out.chunks_exact(d.cout) {
        for (b, &g) in gbias.iter_mut().zip(row) {
            *b += g;
        }
    }

    let pointwise = is_pointwise(&d, geom);
    let owned;
    let cols: &[T] = if pointwise {
        input.data()
    } else {
        owned = im2col(input, &d, geom);
        &owned
    };
    let mut gkernel = vec![T::zero(); kcols * d.cout];
    T::gemm(
        kcols,
        m,
        d.cout,
        T::one(),
        cols,
        1,
        kcols as isize,
        grad_out,
        d.cout as isize,
        1,
        T::zero(),
        &mut gkernel,
        d.cout as isize,
        1,
    );

    let mut gcols = vec![T::zero(); m * kcols];
    T::gemm(
        m,
        d.cout,
        kcols,
        T::one(),
        grad_out,
        d.cout as isize,
        1,
        kernel.data(),
        1,
        d.cout as isize,
        T::zero(),
        &mut gcols,
        kcols as isize,
        1,
    );
    let ginput = if pointwise {
        gcols
    } else {
        col2im(&gcols, s, &d, geom)
    };
    Ok(ConvGrads {
        input: ginput,
        kernel: gkernel,
        bias: gbias,
    })
}

#[inline]
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Logistic => logistic(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Logistic => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Softplus => logistic(x),
        }
    }
}

pub fn pointwise_forward<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    input.ensure_finite("pointwise")?;
    Ok(input.map(|v| kind.apply(v)))
}

pub fn pointwise_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    kind: Activation,
    grad_out: &[T],
) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out)
        .map(|((&x, &y), &g)| g * kind.derivative(x, y))
        .collect()
}

pub fn elementwise_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: Binary,
) -> Result<Tensor<T>> {
    check_same_shape("elementwise", a.shape(), b.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            Binary::Add => x + y,
            Binary::Mul => x * y,
        })
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn upsample2x_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let out = Shape::new(s.batch, s.height * 2, s.width * 2, s.channels);
    let c = s.channels;
    let mut data = vec![T::zero(); out.len()];
    for b in 0..s.batch {
        for y in 0..out.height {
            for x in 0..out.width {
                let from = s.index(b, y / 2, x / 2, 0);
                let to = out.index(b, y, x, 0);
                data[to..to + c].copy_from_slice(&input.data()[from..from + c]);
            }
        }
    }
    Tensor::from_vec(out, data).expect("upsample shape")
}

pub fn upsample2x_backward<T: Scalar>(input: Shape, grad_out: &[T]) -> Vec<T> {
    let out = Shape::new(
        input.batch,
        input.height * 2,
        input.width * 2,
        input.channels,
    );
    let c = input.channels;
    let mut g = vec![T::zero(); input.len()];
    for b in 0..input.batch {
        for y in 0..out.height {
            for x in 0..out.width {
                let to = input.index(b, y / 2, x / 2, 0);
                let from = out.index(b, y, x, 0);
                for (d, &s) in g[to..to + c].iter_mut().zip(&grad_out[from..from + c]) {
                    *d += s;
                }
            }
        }
    }
    g
}

pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa.dims(),
            right: sb.dims(),
        });
    }
    let out = sa.with_channels(sa.channels + sb.channels);
    let mut data = Vec::with_capacity(out.len());
    let a_rows = a.data().chunks(sa.channels.max(1));
    let b_rows = b.data().chunks(sb.channels.max(1));
    if sa.channels == 0 {
        return Ok(b.clone_without_grad());
    }
    if sb.channels == 0 {
        return Ok(a.clone_without_grad());
    }
    for (ra, rb) in a_rows.zip(b_rows) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::from_vec(out, data)
}

pub fn concat_backward<T: Scalar>(ca: usize, cb: usize, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let c = ca + cb;
    let pixels = grad_out.len().checked_div(c).unwrap_or(0);
    let mut ga = Vec::with_capacity(pixels * ca);
    let mut gb = Vec::with_capacity(pixels * cb);
    for row in grad_out.chunks(c.max(1)) {
        ga.extend_from_slice(&row[..ca]);
        gb.extend_from_slice(&row[ca..]);
    }
    (ga, gb)
}

fn check_binary_target<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    if target
        .data()
        .iter()
        .all(|&t| t == T::zero() || t == T::one())
    {
        Ok(())
    } else {
        Err(Error::invalid(
            "cross_entropy: target values must be 0 or 1",
        ))
    }
}

/// Mean binary cross-entropy with predictions clipped to `[eps, 1 - eps]`.
pub fn cross_entropy_forward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_same_shape("cross_entropy", pred.shape(), target.shape())?;
    check_binary_target(target)?;
    pred.ensure_finite("cross_entropy")?;
    let eps = T::of(CE_EPSILON);
    let hi = T::one() - eps;
    let mut total = T::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.max(eps).min(hi);
        total += -(y * p.ln() + (T::one() - y) * (T::one() - p).ln());
    }
    Ok(total / T::of(pred.len() as f64))
}

pub fn cross_entropy_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    upstream: T,
) -> Vec<T> {
    let eps = T::of(CE_EPSILON);
    let hi = T::one() - eps;
    let scale = upstream / T::of(pred.len() as f64);
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            if p < eps || p > hi {
                T::zero()
            } else {
                scale * ((T::one() - y) / (T::one() - p) - y / p)
            }
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn clone_without_grad(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape(), self.data().to_vec()).expect("same shape")
    }
}
