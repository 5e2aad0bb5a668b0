use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. Implemented for `f32` (training) and
/// `f64` (gradient checks and oracles).
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: &'static str;

    /// Row-major `c = a·b (+ c)` where `a` is m×k and `b` is k×n; either input
    /// may be stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }

    /// `exp` as used by the elementwise kernels (softmax, sigmoid, GELU).
    fn fast_exp(self) -> Self;

    /// Logistic function, finite for every finite input.
    fn sigmoid(self) -> Self;
}

/// Branch-free `expf` (range reduction by ln 2 and a degree-6 polynomial) so
/// loops over it vectorise. Inputs are clamped to the finite range; relative
/// error stays below 2e-7.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding and subtracting 1.5·2²³ rounds to the nearest integer
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

fn sigmoid_stable<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path, $exp:expr, $sigmoid:expr) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            #[inline(always)]
            fn fast_exp(self) -> Self {
                $exp(self)
            }

            #[inline(always)]
            fn sigmoid(self) -> Self {
                $sigmoid(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slices were length-checked above and the strides
                // describe row-major layouts of exactly those extents.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm, exp_f32, |x: f32| 1.0 / (1.0 + exp_f32(-x)));
impl_real!(f64, "f64", matrixmultiply::dgemm, f64::exp, sigmoid_stable);

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> F {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn all_finite(&self) -> bool {
        // fixed-width chunks without early exit so the check vectorises
        let mut chunks = self.data.chunks_exact(16);
        let ok = chunks.by_ref().all(|c| c.iter().fold(true, |acc, v| acc & v.is_finite()));
        ok && chunks.remainder().iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        softmax(self, axis)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    pub fn transpose(&self) -> Result<Self> {
        transpose_last2(self)
    }
}

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len());
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {index:?} out of bounds for {shape:?}");
            acc * n + i
        })
}

/// Batch layout of a matrix product: how many (M×K)·(K×P) products and
/// whether each side is shared across the batch.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub a_shared: bool,
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(dim_err("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let (batch_dims, a_shared, b_shared) = if a_batch == b_batch {
        (a_batch.to_vec(), false, false)
    } else if b_batch.is_empty() {
        (a_batch.to_vec(), false, true)
    } else if a_batch.is_empty() {
        (b_batch.to_vec(), true, false)
    } else {
        return Err(dim_err("matmul", a, b));
    };
    let batch = batch_dims.iter().product();
    let mut out_shape = batch_dims;
    out_shape.extend([m, p]);
    Ok(MatmulPlan {
        batch,
        m,
        k,
        p,
        a_shared,
        b_shared,
        out_shape,
    })
}

/// Matrix product over the last two axes; leading axes must match or one
/// side must be a plain matrix shared across the batch.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let plan = matmul_plan(&a.shape, &b.shape)?;
    let MatmulPlan { batch, m, k, p, .. } = plan;
    let mut out = vec![F::zero(); batch * m * p];
    for i in 0..batch {
        let ao = if plan.a_shared { 0 } else { i * m * k };
        let bo = if plan.b_shared { 0 } else { i * k * p };
        F::gemm(
            m,
            k,
            p,
            &a.data[ao..ao + m * k],
            false,
            &b.data[bo..bo + k * p],
            false,
            &mut out[i * m * p..(i + 1) * m * p],
            false,
        );
    }
    Tensor::new(&plan.out_shape, out)
}

pub fn transpose_last2<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::Shape {
            op: "transpose",
            shape: x.shape.clone(),
            reason: "rank < 2".into(),
        });
    }
    let (rows, cols) = (x.shape[r - 2], x.shape[r - 1]);
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    let block = rows * cols;
    let mut data = vec![F::zero(); x.numel()];
    if block > 0 {
        for (src, dst) in x.data.chunks_exact(block).zip(data.chunks_exact_mut(block)) {
            for (i, row) in src.chunks_exact(cols).enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    dst[j * rows + i] = v;
                }
            }
        }
    }
    Tensor::new(&shape, data)
}

pub fn permute<F: Real>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape {
            op: "permute",
            shape: x.shape.clone(),
            reason: format!("invalid permutation {perm:?}"),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::new(&out_shape, data);
    }
    // walk output rows; within a row the source advances by a fixed stride
    let (run, step, outer) = if r == 0 { (1, 1, 0) } else { (out_shape[r - 1], strides[r - 1], r - 1) };
    let mut idx = vec![0usize; outer];
    let mut src = 0usize;
    for _ in 0..n / run {
        if step == 1 {
            data.extend_from_slice(&x.data[src..src + run]);
        } else {
            data.extend((0..run).map(|j| x.data[src + j * step]));
        }
        for ax in (0..outer).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis length, inner) decomposition used by every axis reduction.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "axis",
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilised by subtracting each slice's maximum.
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = x.data.clone();
    if inner == 1 && len > 0 {
        for row in out.chunks_exact_mut(len) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.iter_mut().for_each(|v| *v = (*v - max).fast_exp());
            let inv = F::one() / row.iter().copied().fold(F::zero(), |a, b| a + b);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        return Tensor::new(&x.shape, out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|j| x.data[base + j * inner])
                .fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..len {
                let e = (x.data[base + j * inner] - max).fast_exp();
                out[base + j * inner] = e;
                total = total + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / total;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

pub fn log_softmax<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|j| x.data[base + j * inner])
                .fold(F::neg_infinity(), F::max);
            let lse = (0..len)
                .map(|j| (x.data[base + j * inner] - max).fast_exp())
                .sum::<F>()
                .ln()
                + max;
            for j in 0..len {
                out[base + j * inner] = x.data[base + j * inner] - lse;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

pub fn sum_axis<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x.data[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

pub(crate) fn sigmoid_scalar<F: Real>(x: F) -> F {
    x.sigmoid()
}

/// `ln σ(x)` without overflow for large |x|.
pub(crate) fn log_sigmoid_scalar<F: Real>(x: F) -> F {
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi<F: Real>() -> F {
    F::lit((2.0 / std::f64::consts::PI).sqrt())
}

// 0.5·(1 + tanh u) = σ(2u), which costs one exp instead of a tanh.
pub(crate) fn gelu_scalar<F: Real>(x: F) -> F {
    let inner = sqrt_2_over_pi::<F>() * (x + F::lit(GELU_C) * x * x * x);
    x * sigmoid_scalar(inner + inner)
}

pub(crate) fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let s = sqrt_2_over_pi::<F>();
    let inner = s * (x + F::lit(GELU_C) * x * x * x);
    let p = sigmoid_scalar(inner + inner);
    let dinner = s * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    p + F::lit(2.0) * x * p * (F::one() - p) * dinner
}

/// Layer normalisation over the last axis, returning the output together with
/// the normalised values and per-row inverse standard deviations.
pub(crate) fn layer_norm_parts<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let c = *x.shape.last().unwrap_or(&0);
    if gamma.shape != [c] || beta.shape != [c] || c == 0 {
        return Err(dim_err("layer_norm", &x.shape, &gamma.shape));
    }
    let rows = x.numel() / c;
    let cf = F::from_usize(c).unwrap();
    let mut xhat = vec![F::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    let mut out = vec![F::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<F>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
        let rstd = F::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..c {
            let h = (row[j] - mean) * rstd;
            xhat[r * c + j] = h;
            out[r * c + j] = gamma.data[j] * h + beta.data[j];
        }
    }
    Ok((Tensor::new(&x.shape, out)?, xhat, inv_std))
}

pub fn layer_norm<F: Real>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    layer_norm_parts(x, gamma, beta, eps).map(|(y, _, _)| y)
}
