//! Rank test for time-invariant coefficients through the word sequence
//! built from the backward-system matrices.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_rational::BigRational;

use crate::assembly::{AssembledSystem, BackwardCoefficients};
use crate::blocktensor::{btp, span_rank, BlockRow, ExactSpan, IncrementalSpan, SpanBasis};
use crate::error::{Assumption, Error, Result};
use crate::field::{to_float, Field};

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanReport {
    /// Columns contributed by each generated `k`, starting at `k = 1`.
    pub column_counts: Vec<usize>,
    /// Rank after each generated `k`.
    pub rank_after: Vec<usize>,
    pub basis: SpanBasis,
    pub rank: usize,
    pub n: usize,
    pub controllable: bool,
    /// First `k` from which the span no longer grows (0 if it stays empty).
    pub saturation_k: usize,
    pub tol_rel: f64,
    /// Whether enumeration stopped early at full rank.
    pub stopped_early: bool,
}

/// Generator of the sequence `D_1, D_2, ...` for one set of coefficients.
struct Sequence<T: Field> {
    a_hat: DMatrix<T>,
    c_hat: DMatrix<T>,
    b_hat: DMatrix<T>,
    gens: BlockRow<T>,
    b: DMatrix<T>,
    /// `words[j]` = `(A, C)^{⊗j} ⊗ B`.
    words: Vec<BlockRow<T>>,
    dim: usize,
}

impl<T: Field> Sequence<T> {
    fn new(bw: &BackwardCoefficients<T>) -> Self {
        let gens = BlockRow::new(alloc::vec![bw.a.clone(), bw.c.clone()]).expect("square generators");
        Self {
            a_hat: bw.a_hat(),
            c_hat: bw.c_hat(),
            b_hat: bw.b_hat(),
            gens,
            b: bw.b.clone(),
            words: alloc::vec![BlockRow::single(bw.b.clone())],
            dim: bw.dim(),
        }
    }

    fn word(&mut self, j: usize) -> &BlockRow<T> {
        while self.words.len() <= j {
            let next = btp(&self.gens, self.words.last().unwrap()).expect("compatible words");
            self.words.push(next);
        }
        &self.words[j]
    }

    fn max_k(&self) -> usize {
        2 * self.dim
    }

    /// `D_k` from `D_{k-1}` for `k <= dim + 1`; explicit list beyond.
    fn next(&mut self, k: usize, prev: Option<&BlockRow<T>>) -> BlockRow<T> {
        match k {
            1 => BlockRow::single(self.b_hat.clone()),
            2 => BlockRow::new(alloc::vec![&self.a_hat * &self.b_hat, &self.c_hat * &self.b]).unwrap(),
            k if k <= self.dim + 1 => {
                let prev = prev.expect("previous element");
                let left = prev.left_mul(&self.a_hat.clone()).unwrap();
                let c_hat = self.c_hat.clone();
                let right = self.word(k - 2).left_mul(&c_hat).unwrap();
                let mut blocks = left.into_blocks();
                blocks.extend(right.into_blocks());
                BlockRow::new(blocks).unwrap()
            }
            k => self.explicit(k),
        }
    }

    /// `(Â^{k-1} B̂, Â^{k-2} Ĉ B, Â^{k-3} Ĉ (A,C) B, ..., Â^{k-dim-1} Ĉ (A,C)^{dim-1} B)`.
    fn explicit(&mut self, k: usize) -> BlockRow<T> {
        let mut pow = alloc::vec![crate::field::identity::<T>(self.dim)];
        for _ in 1..k {
            let p = pow.last().unwrap() * &self.a_hat;
            pow.push(p);
        }
        let mut blocks = alloc::vec![&pow[k - 1] * &self.b_hat];
        let last = (k - 2).min(self.dim - 1);
        for j in 0..=last {
            let left = &pow[k - 2 - j] * &self.c_hat;
            let words = self.word(j).left_mul(&left).unwrap();
            blocks.extend(words.into_blocks());
        }
        BlockRow::new(blocks).unwrap()
    }
}

fn check_k(k: usize, max: usize) -> Result<()> {
    if k == 0 || k > max {
        return Err(Error::OutOfRange { index: k, max });
    }
    Ok(())
}

/// The `k`-th element of the sequence (1-based).
pub fn dk<T: Field>(bw: &BackwardCoefficients<T>, k: usize) -> Result<BlockRow<T>> {
    let mut seq = Sequence::new(bw);
    check_k(k, seq.max_k())?;
    let mut prev = None;
    for j in 1..=k {
        let cur = seq.next(j, prev.as_ref());
        prev = Some(cur);
    }
    Ok(prev.unwrap())
}

/// The explicit long-index formula evaluated at any `k >= 2`.
pub fn dk_explicit<T: Field>(bw: &BackwardCoefficients<T>, k: usize) -> Result<BlockRow<T>> {
    let mut seq = Sequence::new(bw);
    check_k(k, seq.max_k())?;
    if k == 1 {
        return Ok(seq.next(1, None));
    }
    Ok(seq.explicit(k))
}

fn top_rows<T: Field>(m: &DMatrix<T>, n: usize) -> DMatrix<T> {
    m.rows(0, n).clone_owned()
}

fn scale_of(bw: &BackwardCoefficients<f64>) -> (f64, f64) {
    let s = [bw.a.norm(), bw.c.norm(), bw.a_hat().norm(), bw.c_hat().norm(), 1.0].into_iter().fold(0.0, f64::max);
    let b = bw.b.norm().max(bw.b_hat().norm());
    (s, b)
}

fn saturation(rank_after: &[usize]) -> usize {
    let last = rank_after.last().cloned().unwrap_or(0);
    if last == 0 {
        return 0;
    }
    rank_after.iter().position(|&r| r == last).map_or(0, |i| i + 1)
}

/// Feeds blocks to a float span after projecting and normalising by the
/// expected growth of the k-th element.
fn run_float(
    n: usize,
    tol_rel: f64,
    early_stop: bool,
    bw: &BackwardCoefficients<f64>,
    elements: &mut dyn FnMut(usize, Option<&BlockRow<f64>>) -> Option<BlockRow<f64>>,
) -> Result<KalmanReport> {
    let (s, bnorm) = scale_of(bw);
    let mut span = IncrementalSpan::new(n, tol_rel, early_stop.then_some(n)).with_floor(tol_rel);
    let mut column_counts = Vec::new();
    let mut rank_after = Vec::new();
    let mut prev: Option<BlockRow<f64>> = None;
    let mut k = 1;
    let mut stopped_early = false;
    while let Some(cur) = elements(k, prev.as_ref()) {
        let flat = cur.flatten();
        column_counts.push(flat.ncols());
        if bnorm > 0.0 {
            let norm = bnorm * libm::pow(s, (k - 1) as f64);
            span.push(&(top_rows(&flat, n) / norm))?;
        }
        rank_after.push(span.rank());
        prev = Some(cur);
        if early_stop && span.rank() == n {
            stopped_early = true;
            break;
        }
        k += 1;
    }
    let rank = span.rank();
    Ok(KalmanReport {
        column_counts,
        saturation_k: saturation(&rank_after),
        rank_after,
        basis: span.basis(),
        rank,
        n,
        controllable: rank == n,
        tol_rel,
        stopped_early,
    })
}

/// Span of the projected sequence up to `k = 2 * dim`.
pub fn controllable_subspace_of(bw: &BackwardCoefficients<f64>, n: usize, tol_rel: f64, early_stop: bool) -> Result<KalmanReport> {
    let mut seq = Sequence::new(bw);
    let max = seq.max_k();
    run_float(n, tol_rel, early_stop, bw, &mut |k, prev| (k <= max).then(|| seq.next(k, prev)))
}

fn require_time_invariant(sys: &AssembledSystem) -> Result<()> {
    if sys.is_time_invariant() {
        Ok(())
    } else {
        Err(Error::AssumptionViolated {
            assumption: Assumption::H5,
            detail: format!("coefficients change across {} pieces", sys.pieces.len()),
        })
    }
}

pub fn controllable_subspace(sys: &AssembledSystem, tol_rel: f64, early_stop: bool) -> Result<KalmanReport> {
    require_time_invariant(sys)?;
    controllable_subspace_of(&sys.pieces[0].backward, sys.n, tol_rel, early_stop)
}

fn require_no_mean_field<T: Field>(bw: &BackwardCoefficients<T>) -> Result<()> {
    let zero = |m: &DMatrix<T>| m.iter().all(|x| x.is_zero());
    if zero(&bw.a_bar) && zero(&bw.c_bar) && zero(&bw.b_bar) {
        Ok(())
    } else {
        Err(Error::AssumptionViolated {
            assumption: Assumption::H6,
            detail: "mean-field coefficients of the backward system are nonzero".into(),
        })
    }
}

/// Span of `(B, (A,C) B, ..., (A,C)^{dim-1} B)` projected, for systems
/// without mean-field terms.
pub fn kalman_h6_of(bw: &BackwardCoefficients<f64>, n: usize, tol_rel: f64, early_stop: bool) -> Result<KalmanReport> {
    require_no_mean_field(bw)?;
    let mut seq = Sequence::new(bw);
    let dim = seq.dim;
    run_float(n, tol_rel, early_stop, bw, &mut |k, _| (k <= dim).then(|| seq.word(k - 1).clone()))
}

pub fn kalman_h6(sys: &AssembledSystem, tol_rel: f64, early_stop: bool) -> Result<KalmanReport> {
    require_time_invariant(sys)?;
    kalman_h6_of(&sys.pieces[0].backward, sys.n, tol_rel, early_stop)
}

/// Exact counterpart of [`controllable_subspace_of`] over the rationals.
pub fn controllable_subspace_exact(bw: &BackwardCoefficients<BigRational>, n: usize, early_stop: bool) -> KalmanReport {
    let mut seq = Sequence::new(bw);
    let mut span = ExactSpan::new(n, early_stop.then_some(n));
    let mut column_counts = Vec::new();
    let mut rank_after = Vec::new();
    let mut prev: Option<BlockRow<BigRational>> = None;
    let mut stopped_early = false;
    for k in 1..=seq.max_k() {
        let cur = seq.next(k, prev.as_ref());
        let flat = cur.flatten();
        column_counts.push(flat.ncols());
        span.push(&top_rows(&flat, n));
        rank_after.push(span.rank());
        prev = Some(cur);
        if early_stop && span.rank() == n {
            stopped_early = true;
            break;
        }
    }
    let rank = span.rank();
    let basis = span_rank(&to_float(&span.columns()), crate::blocktensor::DEFAULT_TOL_REL)
        .expect("finite rational columns");
    KalmanReport {
        column_counts,
        saturation_k: saturation(&rank_after),
        rank_after,
        basis,
        rank,
        n,
        controllable: rank == n,
        tol_rel: 0.0,
        stopped_early,
    }
}
