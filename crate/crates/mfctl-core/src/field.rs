//! Scalar fields the assembly and Kalman code can run over: `f64` for
//! computation, `BigRational` for exact fixture checks.

use core::fmt::Debug;
use core::ops::{Div, Neg};

use nalgebra::{ClosedAddAssign, ClosedMulAssign, ClosedSubAssign, DMatrix, Scalar};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub trait Field:
    Scalar
    + Debug
    + Zero
    + One
    + ClosedAddAssign
    + ClosedSubAssign
    + ClosedMulAssign
    + Neg<Output = Self>
    + Div<Output = Self>
{
    /// Absolute size used for pivot selection.
    fn magnitude(&self) -> f64;
    /// Exact conversion where the field allows it.
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    /// Pivots at or below this (relative to the matrix scale) count as zero.
    fn pivot_floor(scale: f64) -> f64;
}

impl Field for f64 {
    fn magnitude(&self) -> f64 {
        self.abs()
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn pivot_floor(scale: f64) -> f64 {
        1e-14 * scale
    }
}

impl Field for BigRational {
    fn magnitude(&self) -> f64 {
        let a = if *self < BigRational::zero() { -self.clone() } else { self.clone() };
        num_traits::ToPrimitive::to_f64(&a).unwrap_or(f64::INFINITY)
    }
    fn from_f64(x: f64) -> Self {
        BigRational::from_float(x).unwrap_or_else(BigRational::zero)
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn pivot_floor(_scale: f64) -> f64 {
        0.0
    }
}

pub fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn convert<T: Field>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::from_f64)
}

pub fn to_float<T: Field>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|x| x.to_f64())
}

pub fn identity<T: Field>(n: usize) -> DMatrix<T> {
    DMatrix::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
}

pub fn zeros<T: Field>(r: usize, c: usize) -> DMatrix<T> {
    DMatrix::from_element(r, c, T::zero())
}

fn max_magnitude<T: Field>(m: &DMatrix<T>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.magnitude()))
}

/// Solves `a x = b` by Gauss-Jordan elimination with partial pivoting.
/// Returns `None` when `a` is (numerically) singular.
pub fn solve<T: Field>(a: &DMatrix<T>, b: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "solve: square matrix required");
    assert_eq!(b.nrows(), n, "solve: rhs row count");
    let floor = T::pivot_floor(max_magnitude(a));
    let mut a = a.clone();
    let mut b = b.clone();
    for col in 0..n {
        let (piv, best) = (col..n)
            .map(|r| (r, a[(r, col)].magnitude()))
            .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= floor || best == 0.0 {
            return None;
        }
        if piv != col {
            a.swap_rows(piv, col);
            b.swap_rows(piv, col);
        }
        let p = a[(col, col)].clone();
        for j in 0..n {
            let v = a[(col, j)].clone() / p.clone();
            a[(col, j)] = v;
        }
        for j in 0..b.ncols() {
            let v = b[(col, j)].clone() / p.clone();
            b[(col, j)] = v;
        }
        for r in 0..n {
            if r == col || a[(r, col)].is_zero() {
                continue;
            }
            let f = a[(r, col)].clone();
            for j in 0..n {
                let v = a[(col, j)].clone() * f.clone();
                a[(r, j)] -= v;
            }
            for j in 0..b.ncols() {
                let v = b[(col, j)].clone() * f.clone();
                b[(r, j)] -= v;
            }
        }
    }
    Some(b)
}

pub fn inverse<T: Field>(a: &DMatrix<T>) -> Option<DMatrix<T>> {
    solve(a, &identity(a.nrows()))
}

/// Rank by exact row reduction. Meaningful for exact fields only.
pub fn exact_rank<T: Field>(m: &DMatrix<T>) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let Some(piv) = (rank..rows).find(|&r| !a[(r, col)].is_zero()) else {
            continue;
        };
        a.swap_rows(piv, rank);
        let p = a[(rank, col)].clone();
        for r in rank + 1..rows {
            if a[(r, col)].is_zero() {
                continue;
            }
            let f = a[(r, col)].clone() / p.clone();
            for j in col..cols {
                let v = a[(rank, j)].clone() * f.clone();
                a[(r, j)] -= v;
            }
        }
        rank += 1;
    }
    rank
}

/// Block-diagonal matrix from the given blocks.
pub fn block_diag<T: Field>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), b.shape()).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

/// Vertical stack of equally wide blocks.
pub fn vstack<T: Field>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let c = blocks.first().map_or(0, |b| b.ncols());
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(r, c);
    let mut i = 0;
    for b in blocks {
        out.view_mut((i, 0), b.shape()).copy_from(b);
        i += b.nrows();
    }
    out
}

/// 2x2 block matrix `[[a, b], [c, d]]`.
pub fn block2<T: Field>(a: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>, d: &DMatrix<T>) -> DMatrix<T> {
    let (r0, c0) = a.shape();
    let mut out = zeros(r0 + c.nrows(), c0 + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, c0), b.shape()).copy_from(b);
    out.view_mut((r0, 0), c.shape()).copy_from(c);
    out.view_mut((r0, c0), d.shape()).copy_from(d);
    out
}
