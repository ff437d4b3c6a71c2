//! Dense row-major 2-D tensor kernels.
//!
//! Every execution path — the single-device reference forward pass and all
//! distributed paths — runs on these same kernels, so cross-path comparisons
//! isolate partitioning and communication logic rather than kernel behavior.
//! All kernels are pure functions over immutable inputs with a fixed
//! left-to-right summation order over the inner dimension, which makes
//! repeated runs bitwise reproducible.

use std::fmt;

// ---------------------------------------------------------------------------
// Element types
// ---------------------------------------------------------------------------

/// Element type of a tensor or checkpoint.
///
/// `F16` exists for memory accounting and planning only (half-precision
/// footprints); compute kernels operate on `F32` and `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f16")]
    F16,
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            Self::F16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::F16 => write!(f, "f16"),
            Self::F32 => write!(f, "f32"),
            Self::F64 => write!(f, "f64"),
        }
    }
}

/// Numeric element usable by the compute kernels.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from a little-endian slice of exactly `BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;
            const BYTES: usize = $bytes;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, 4);
impl_scalar!(f64, DType::F64, 8);

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Shape violations raised by tensor constructors and kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeError {
    /// Inner dimensions disagree: `a` is rows×cols of the left operand.
    Gemm { a: (usize, usize), b: (usize, usize) },
    /// Element-wise operands differ in shape.
    Elementwise { left: (usize, usize), right: (usize, usize) },
    /// A per-column vector does not match the tensor width.
    VectorLength { expected: usize, got: usize },
    /// Split sizes do not sum to the dimension being split.
    SplitSum { dim: usize, sum: usize },
    /// Concatenation parts disagree on the shared dimension.
    ConcatDim { expected: usize, got: usize },
    /// Buffer length does not equal rows × cols.
    DataLength { rows: usize, cols: usize, got: usize },
    /// Column count is not a multiple of the head width.
    HeadDim { cols: usize, head_dim: usize },
    /// Attention operands disagree on sequence length or width.
    Attention { q: (usize, usize), k: (usize, usize), v: (usize, usize) },
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gemm { a, b } => {
                write!(f, "gemm {}x{} . {}x{}: inner dimensions differ", a.0, a.1, b.0, b.1)
            }
            Self::Elementwise { left, right } => write!(
                f,
                "element-wise op on {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Self::VectorLength { expected, got } => {
                write!(f, "vector length {got}, expected {expected}")
            }
            Self::SplitSum { dim, sum } => {
                write!(f, "split sizes sum to {sum}, dimension is {dim}")
            }
            Self::ConcatDim { expected, got } => {
                write!(f, "concat part has off-dimension {got}, expected {expected}")
            }
            Self::DataLength { rows, cols, got } => {
                write!(f, "data length {got} for a {rows}x{cols} tensor")
            }
            Self::HeadDim { cols, head_dim } => {
                write!(f, "{cols} columns not divisible by head width {head_dim}")
            }
            Self::Attention { q, k, v } => write!(
                f,
                "attention on q {}x{}, k {}x{}, v {}x{}",
                q.0, q.1, k.0, k.1, v.0, v.1
            ),
        }
    }
}

impl std::error::Error for ShapeError {}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense 2-D row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::DataLength { rows, cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Copy of rows `[start, start + n)`.
    pub fn row_block(&self, start: usize, n: usize) -> Self {
        let lo = start * self.cols;
        let hi = (start + n) * self.cols;
        Self { rows: n, cols: self.cols, data: self.data[lo..hi].to_vec() }
    }

    /// Copy of columns `[start, start + n)`.
    pub fn col_block(&self, start: usize, n: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * n);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend_from_slice(&row[start..start + n]);
        }
        Self { rows: self.rows, cols: n, data }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * T::BYTES
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self, ShapeError> {
        if bytes.len() != rows * cols * T::BYTES {
            return Err(ShapeError::DataLength { rows, cols, got: bytes.len() / T::BYTES });
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self { rows, cols, data })
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Matrix product with accumulation in `T` and a fixed left-to-right
/// summation order over the inner dimension.
///
/// Loops are blocked so each tile of `b` is loaded once and reused across
/// all rows of `a`; every output element still accumulates its inner
/// dimension strictly in ascending order, so the result is bit-identical to
/// the naive triple loop.
pub fn gemm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    const K_BLOCK: usize = 64;
    const J_BLOCK: usize = 512;

    if a.cols != b.rows {
        return Err(ShapeError::Gemm { a: a.shape(), b: b.shape() });
    }
    let (m, kk, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::zero(); m * n];
    let mut j0 = 0;
    while j0 < n {
        let jw = J_BLOCK.min(n - j0);
        let mut k0 = 0;
        while k0 < kk {
            let kw = K_BLOCK.min(kk - k0);
            for i in 0..m {
                let a_row = &a.data[i * kk + k0..i * kk + k0 + kw];
                let out_row = &mut out[i * n + j0..i * n + j0 + jw];
                for (k, &aik) in a_row.iter().enumerate() {
                    let b_row = &b.data[(k0 + k) * n + j0..(k0 + k) * n + j0 + jw];
                    for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                        *o = *o + aik * bkj;
                    }
                }
            }
            k0 += kw;
        }
        j0 += jw;
    }
    Ok(Tensor { rows: m, cols: n, data: out })
}

/// Row-wise softmax with max-subtraction for overflow stability.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        if row.is_empty() {
            continue;
        }
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Scaled dot-product attention over independent head slices of width
/// `head_dim`. Query rows may differ from key/value rows (the query tokens
/// attend over the full key/value context).
pub fn scaled_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    head_dim: usize,
) -> Result<Tensor<T>, ShapeError> {
    if k.rows != v.rows || q.cols != k.cols || q.cols != v.cols {
        return Err(ShapeError::Attention { q: q.shape(), k: k.shape(), v: v.shape() });
    }
    if head_dim == 0 || !q.cols.is_multiple_of(head_dim) {
        return Err(ShapeError::HeadDim { cols: q.cols, head_dim });
    }
    let heads = q.cols / head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = Tensor::zeros(q.rows, q.cols);
    for h in 0..heads {
        let c0 = h * head_dim;
        // scores[i][j] = <q_i, k_j> / sqrt(head_dim)
        let mut scores = Tensor::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let qi = &q.row(i)[c0..c0 + head_dim];
            for j in 0..k.rows {
                let kj = &k.row(j)[c0..c0 + head_dim];
                let mut dot = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    dot = dot + a * b;
                }
                scores.data[i * k.rows + j] = dot * scale;
            }
        }
        let weights = softmax_rows(&scores);
        for i in 0..q.rows {
            let out_row = &mut out.data[i * q.cols + c0..i * q.cols + c0 + head_dim];
            for (j, &w) in weights.row(i).iter().enumerate() {
                let vj = &v.row(j)[c0..c0 + head_dim];
                for (o, &x) in out_row.iter_mut().zip(vj) {
                    *o = *o + w * x;
                }
            }
        }
    }
    Ok(out)
}

/// First half of attention: per-head softmax'd score matrices, one
/// `q.rows x k.rows` tensor per head slice.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    head_dim: usize,
) -> Result<Vec<Tensor<T>>, ShapeError> {
    if q.cols != k.cols {
        return Err(ShapeError::Attention { q: q.shape(), k: k.shape(), v: k.shape() });
    }
    if head_dim == 0 || !q.cols.is_multiple_of(head_dim) {
        return Err(ShapeError::HeadDim { cols: q.cols, head_dim });
    }
    let heads = q.cols / head_dim;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * head_dim;
        let mut scores = Tensor::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let qi = &q.row(i)[c0..c0 + head_dim];
            for j in 0..k.rows {
                let kj = &k.row(j)[c0..c0 + head_dim];
                let mut dot = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    dot = dot + a * b;
                }
                scores.data[i * k.rows + j] = dot * scale;
            }
        }
        out.push(softmax_rows(&scores));
    }
    Ok(out)
}

/// Second half of attention: apply per-head weights to the value slices.
pub fn attention_apply<T: Scalar>(
    weights: &[Tensor<T>],
    v: &Tensor<T>,
    head_dim: usize,
) -> Result<Tensor<T>, ShapeError> {
    if head_dim == 0 || !v.cols.is_multiple_of(head_dim) || weights.len() != v.cols / head_dim {
        return Err(ShapeError::HeadDim { cols: v.cols, head_dim });
    }
    let q_rows = weights.first().map(|w| w.rows).unwrap_or(0);
    let mut out = Tensor::zeros(q_rows, v.cols);
    for (h, w) in weights.iter().enumerate() {
        if w.cols != v.rows || w.rows != q_rows {
            return Err(ShapeError::Attention { q: w.shape(), k: v.shape(), v: v.shape() });
        }
        let c0 = h * head_dim;
        for i in 0..q_rows {
            let out_row = &mut out.data[i * v.cols + c0..i * v.cols + c0 + head_dim];
            for (j, &wij) in w.row(i).iter().enumerate() {
                let vj = &v.row(j)[c0..c0 + head_dim];
                for (o, &x) in out_row.iter_mut().zip(vj) {
                    *o = *o + wij * x;
                }
            }
        }
    }
    Ok(out)
}

/// Per-head self-attention: `softmax(q kᵀ / sqrt(head_dim)) v` applied to
/// each head slice. Output shape equals `v`'s shape.
pub fn self_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    head_dim: usize,
) -> Result<Tensor<T>, ShapeError> {
    if q.rows != k.rows {
        return Err(ShapeError::Attention { q: q.shape(), k: k.shape(), v: v.shape() });
    }
    scaled_attention(q, k, v, head_dim)
}

/// Per-row normalization to zero mean and unit variance, then affine
/// transform by `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor<T>, ShapeError> {
    if gamma.len() != x.cols {
        return Err(ShapeError::VectorLength { expected: x.cols, got: gamma.len() });
    }
    if beta.len() != x.cols {
        return Err(ShapeError::VectorLength { expected: x.cols, got: beta.len() });
    }
    let mut out = x.clone();
    if x.cols == 0 {
        return Ok(out);
    }
    let n = T::from_f64(x.cols as f64);
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let mut mean = T::zero();
        for &v in row.iter() {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let denom = (var + eps).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta)) {
            *v = (*v - mean) / denom * g + b;
        }
    }
    Ok(out)
}

/// Element-wise GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let mut out = x.clone();
    for v in &mut out.data {
        let x3 = *v * *v * *v;
        *v = half * *v * (one + (c * (*v + a * x3)).tanh());
    }
    out
}

pub fn residual_add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    if x.shape() != y.shape() {
        return Err(ShapeError::Elementwise { left: x.shape(), right: y.shape() });
    }
    let mut out = x.clone();
    for (o, &v) in out.data.iter_mut().zip(&y.data) {
        *o = *o + v;
    }
    Ok(out)
}

/// Identity: dropout is a no-op in inference mode. The operator slot is kept
/// so the connective block structurally matches the full layer definition.
pub fn dropout_inference<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.clone()
}

/// Adds `v` to every row of `x` (bias application).
pub fn add_row_vector<T: Scalar>(x: &Tensor<T>, v: &[T]) -> Result<Tensor<T>, ShapeError> {
    if v.len() != x.cols {
        return Err(ShapeError::VectorLength { expected: x.cols, got: v.len() });
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        for (o, &b) in row.iter_mut().zip(v) {
            *o = *o + b;
        }
    }
    Ok(out)
}

pub fn concat_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, ShapeError> {
    let cols = parts.first().map(|p| p.cols).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols != cols {
            return Err(ShapeError::ConcatDim { expected: cols, got: p.cols });
        }
        rows += p.rows;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor { rows, cols, data })
}

pub fn split_rows<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>, ShapeError> {
    let sum: usize = sizes.iter().sum();
    if sum != x.rows {
        return Err(ShapeError::SplitSum { dim: x.rows, sum });
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        out.push(x.row_block(start, n));
        start += n;
    }
    Ok(out)
}

pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, ShapeError> {
    let rows = parts.first().map(|p| p.rows).unwrap_or(0);
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    for p in parts {
        if p.rows != rows {
            return Err(ShapeError::ConcatDim { expected: rows, got: p.rows });
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor { rows, cols, data })
}

pub fn split_cols<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>, ShapeError> {
    let sum: usize = sizes.iter().sum();
    if sum != x.cols {
        return Err(ShapeError::SplitSum { dim: x.cols, sum });
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        out.push(x.col_block(start, n));
        start += n;
    }
    Ok(out)
}

/// Floating-point operations of an `m x k` by `k x n` product.
pub fn gemm_flops(m: usize, k: usize, n: usize) -> f64 {
    2.0 * m as f64 * k as f64 * n as f64
}

/// Cost of one `exp` in gemm-flop equivalents (measured scalar libm rate
/// against the blocked-gemm flop rate, rounded up).
pub const EXP_FLOPS: f64 = 128.0;

/// Cost of one `tanh` in gemm-flop equivalents.
pub const TANH_FLOPS: f64 = 256.0;

/// Pacing cost of scaled attention with `q_rows` queries over `kv_rows`
/// keys/values across head slices totalling `width` columns: score products,
/// the softmax exponentials, and the weighted sum.
pub fn attention_flops(q_rows: usize, kv_rows: usize, width: usize) -> f64 {
    let scores = q_rows as f64 * kv_rows as f64;
    4.0 * scores * width as f64 + EXP_FLOPS * scores
}

/// Largest element-wise |a - b| divided by the largest |b|, the relative
/// error measure used by every cross-path comparison.
pub fn max_rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error on mismatched shapes");
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        max_diff = max_diff.max((x.to_f64() - y.to_f64()).abs());
        max_mag = max_mag.max(y.to_f64().abs());
    }
    if max_diff == 0.0 {
        0.0
    } else {
        max_diff / max_mag.max(f64::MIN_POSITIVE)
    }
}
