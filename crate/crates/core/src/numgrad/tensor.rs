use std::fmt;

use super::NumError;

/// Maximum number of axes a [`Tensor`] may carry.
pub const MAX_AXES: usize = 4;

/// Dense row-major `f64` tensor with at most four axes.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self, NumError> {
        if dims.len() > MAX_AXES {
            return Err(NumError::BadShape(format!(
                "{} axes exceeds the maximum of {MAX_AXES}",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(NumError::BadShape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    /// Builds a `rows × cols` matrix; panics if the data length is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { dims: vec![rows, cols], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn column(values: &[f64]) -> Self {
        Self::matrix(values.len(), 1, values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::filled(dims, 1.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        assert!(dims.len() <= MAX_AXES, "too many axes");
        Self { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (first axis).
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(1)
    }

    /// Number of columns when viewed as a matrix (product of trailing axes).
    pub fn cols(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self, NumError> {
        Self::new(dims, self.data.clone())
    }

    pub fn transposed(&self) -> Result<Self, NumError> {
        if self.dims.len() != 2 {
            return Err(NumError::BadShape(format!("transpose needs a matrix, got {:?}", self.dims)));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::matrix(c, r, out))
    }

    /// Row permutation: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(perm.len() * c);
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        let mut dims = self.dims.clone();
        dims[0] = perm.len();
        Self { dims, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff dims");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Products with at most this many multiply-adds skip the packed kernel.
const SMALL_GEMM: usize = 2048;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|x| *x = 0.0);
    }
    if csb == 1 {
        // Rows of b are contiguous: c[i, :] += a[i, p] · b[p, :].
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                for (out, bv) in row.iter_mut().zip(&b[p * rsb..p * rsb + n]) {
                    *out += aip * bv;
                }
            }
        }
    } else if csa == 1 {
        // b is stored transposed: every entry is a dot product of contiguous rows.
        for i in 0..m {
            let ar = &a[i * rsa..i * rsa + k];
            for j in 0..n {
                let br = &b[j * csb..j * csb + k];
                let mut acc = [0.0; 4];
                let (ca, cb) = (ar.chunks_exact(4), br.chunks_exact(4));
                let mut rest = 0.0;
                for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
                    rest += x * y;
                }
                for (x, y) in ca.zip(cb) {
                    for l in 0..4 {
                        acc[l] += x[l] * y[l];
                    }
                }
                c[i * n + j] += (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest;
            }
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                for j in 0..n {
                    c[i * n + j] += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}

/// `c (+)= op(a) · op(b)` for row-major matrices, where `op` optionally transposes.
///
/// `a` is `m × k` after `op`, `b` is `k × n` after `op`, `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, (rsa as usize, csa as usize), b, (rsb as usize, csb as usize), c, accumulate);
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above,
    // checked by the debug assertions on their lengths.
    unsafe {
        matrixmultiply::dgemm(
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
