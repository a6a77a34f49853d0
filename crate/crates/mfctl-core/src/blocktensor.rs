//! Block rows, the block-tensor product, word products and span/rank.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field::{exact_rank, Field};

/// Default relative singular-value threshold.
pub const DEFAULT_TOL_REL: f64 = 1e-10;

/// A 1×p row of blocks sharing a row count.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRow<T: Field> {
    blocks: Vec<DMatrix<T>>,
    base_rows: usize,
}

impl<T: Field> BlockRow<T> {
    pub fn new(blocks: Vec<DMatrix<T>>) -> Result<Self> {
        let base_rows = blocks
            .first()
            .map(|b| b.nrows())
            .ok_or_else(|| Error::InvalidMatrix("empty block row".into()))?;
        if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.nrows() != base_rows) {
            return Err(Error::DimensionMismatch {
                field: format!("block[{i}]"),
                expected: (base_rows, b.ncols()),
                found: b.shape(),
            });
        }
        Ok(Self { blocks, base_rows })
    }

    pub fn single(block: DMatrix<T>) -> Self {
        let base_rows = block.nrows();
        Self { blocks: alloc::vec![block], base_rows }
    }

    pub fn blocks(&self) -> &[DMatrix<T>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<DMatrix<T>> {
        self.blocks
    }

    pub fn base_rows(&self) -> usize {
        self.base_rows
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Horizontal concatenation of the blocks.
    pub fn flatten(&self) -> DMatrix<T> {
        let cols = self.blocks.iter().map(|b| b.ncols()).sum();
        let mut out = DMatrix::from_element(self.base_rows, cols, T::zero());
        let mut j = 0;
        for b in &self.blocks {
            out.view_mut((0, j), b.shape()).copy_from(b);
            j += b.ncols();
        }
        out
    }

    /// Left-multiplies every block by `m`.
    pub fn left_mul(&self, m: &DMatrix<T>) -> Result<Self> {
        btp(&BlockRow::single(m.clone()), self)
    }
}

/// Block-tensor product: output block `j*q + l` is `a[j] * b[l]`.
pub fn btp<T: Field>(a: &BlockRow<T>, b: &BlockRow<T>) -> Result<BlockRow<T>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for (j, aj) in a.blocks.iter().enumerate() {
        for (l, bl) in b.blocks.iter().enumerate() {
            if aj.ncols() != bl.nrows() {
                return Err(Error::IncompatibleBlocks {
                    left: j,
                    right: l,
                    left_cols: aj.ncols(),
                    right_rows: bl.nrows(),
                });
            }
            out.push(aj * bl);
        }
    }
    Ok(BlockRow { blocks: out, base_rows: a.base_rows })
}

/// All length-`k` words over `gens` applied to `tail`, lexicographic.
pub fn word_products<T: Field>(gens: &BlockRow<T>, tail: &DMatrix<T>, k: usize) -> Result<BlockRow<T>> {
    let mut acc = BlockRow::single(tail.clone());
    for _ in 0..k {
        acc = btp(gens, &acc)?;
    }
    Ok(acc)
}

/// Orthonormal basis of a column span.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanBasis {
    pub basis: DMatrix<f64>,
    pub rank: usize,
    pub tol: f64,
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix("non-finite entry".into()))
    }
}

/// Left singular vectors and singular values kept above the threshold.
fn truncated_svd(m: &DMatrix<f64>, tol_rel: f64, dims: usize, floor: f64) -> (DMatrix<f64>, Vec<f64>) {
    let rows = m.nrows();
    if m.ncols() == 0 || rows == 0 {
        return (DMatrix::zeros(rows, 0), Vec::new());
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return (DMatrix::zeros(rows, 0), Vec::new());
    }
    let thr = (tol_rel * dims as f64 * smax).max(floor);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > thr).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let basis = DMatrix::from_fn(rows, order.len(), |i, j| u[(i, order[j])]);
    let sv = order.iter().map(|&i| svd.singular_values[i]).collect();
    (basis, sv)
}

/// Rank counts singular values above `tol_rel * max(dims) * sigma_max`.
pub fn span_rank(m: &DMatrix<f64>, tol_rel: f64) -> Result<SpanBasis> {
    check_finite(m)?;
    let (basis, sv) = truncated_svd(m, tol_rel, m.nrows().max(m.ncols()), 0.0);
    Ok(SpanBasis { rank: sv.len(), basis, tol: tol_rel })
}

/// Span accumulated over column batches, stored as `U_r Σ_r`.
#[derive(Debug, Clone)]
pub struct IncrementalSpan {
    dim: usize,
    tol_rel: f64,
    cap: Option<usize>,
    floor: f64,
    compressed: DMatrix<f64>,
    seen: usize,
    seen_bits: BTreeSet<Vec<u64>>,
}

impl IncrementalSpan {
    pub fn new(dim: usize, tol_rel: f64, cap: Option<usize>) -> Self {
        Self {
            dim,
            tol_rel,
            cap,
            floor: 0.0,
            compressed: DMatrix::zeros(dim, 0),
            seen: 0,
            seen_bits: BTreeSet::new(),
        }
    }

    /// Singular values at or below `floor` never count, whatever the
    /// largest one is.
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn rank(&self) -> usize {
        self.compressed.ncols()
    }

    pub fn saturated(&self) -> bool {
        self.cap.is_some_and(|c| self.rank() >= c)
    }

    /// Adds the columns of `batch`, skipping zero and repeated columns.
    /// Returns the new rank.
    pub fn push(&mut self, batch: &DMatrix<f64>) -> Result<usize> {
        check_finite(batch)?;
        if batch.nrows() != self.dim {
            return Err(Error::DimensionMismatch {
                field: "span batch".into(),
                expected: (self.dim, batch.ncols()),
                found: batch.shape(),
            });
        }
        if self.saturated() {
            return Ok(self.rank());
        }
        let mut fresh = Vec::new();
        for c in batch.column_iter() {
            if c.iter().all(|x| *x == 0.0) {
                continue;
            }
            let key: Vec<u64> = c.iter().map(|x| x.to_bits()).collect();
            if self.seen_bits.insert(key) {
                fresh.push(c.clone_owned());
            }
        }
        if fresh.is_empty() {
            return Ok(self.rank());
        }
        self.seen += fresh.len();
        let r = self.rank();
        let mut m = DMatrix::zeros(self.dim, r + fresh.len());
        m.view_mut((0, 0), (self.dim, r)).copy_from(&self.compressed);
        for (j, c) in fresh.iter().enumerate() {
            m.set_column(r + j, c);
        }
        let (u, sv) = truncated_svd(&m, self.tol_rel, self.dim.max(self.seen), self.floor);
        self.compressed = DMatrix::from_fn(self.dim, sv.len(), |i, j| u[(i, j)] * sv[j]);
        Ok(self.rank())
    }

    pub fn basis(&self) -> SpanBasis {
        let mut basis = self.compressed.clone();
        for mut c in basis.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        SpanBasis { basis, rank: self.rank(), tol: self.tol_rel }
    }
}

/// Exact span tracking over an exact field: keeps independent columns.
#[derive(Debug, Clone)]
pub struct ExactSpan<T: Field> {
    dim: usize,
    cap: Option<usize>,
    kept: Vec<DMatrix<T>>,
}

impl<T: Field> ExactSpan<T> {
    pub fn new(dim: usize, cap: Option<usize>) -> Self {
        Self { dim, cap, kept: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn saturated(&self) -> bool {
        self.cap.is_some_and(|c| self.rank() >= c)
    }

    pub fn push(&mut self, batch: &DMatrix<T>) -> usize {
        for c in batch.column_iter() {
            if self.saturated() || self.rank() == self.dim {
                break;
            }
            if c.iter().all(|x| x.is_zero()) {
                continue;
            }
            let mut m = DMatrix::from_element(self.dim, self.rank() + 1, T::zero());
            for (j, k) in self.kept.iter().enumerate() {
                m.set_column(j, &k.column(0));
            }
            m.set_column(self.rank(), &c);
            if exact_rank(&m) > self.rank() {
                self.kept.push(DMatrix::from_iterator(c.len(), 1, c.iter().cloned()));
            }
        }
        self.rank()
    }

    pub fn columns(&self) -> DMatrix<T> {
        let mut m = DMatrix::from_element(self.dim, self.rank(), T::zero());
        for (j, k) in self.kept.iter().enumerate() {
            m.set_column(j, &k.column(0));
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn identity_left_operand_is_neutral() {
        let b = BlockRow::new(alloc::vec![m(2, 1, &[1.0, 2.0]), m(2, 2, &[3.0, 4.0, 5.0, 6.0])]).unwrap();
        let i = BlockRow::single(DMatrix::identity(2, 2));
        assert_eq!(btp(&i, &b).unwrap(), b);
    }

    #[test]
    fn generator_pair_on_column() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let c = DMatrix::identity(2, 2);
        let gens = BlockRow::new(alloc::vec![a, c]).unwrap();
        let out = btp(&gens, &BlockRow::single(m(2, 1, &[1.0, 0.0]))).unwrap();
        assert_eq!(out.blocks(), &[m(2, 1, &[0.0, 0.0]), m(2, 1, &[1.0, 0.0])]);
    }

    #[test]
    fn layout_is_left_major() {
        let a = m(1, 1, &[2.0]);
        let c = m(1, 1, &[3.0]);
        let b1 = m(1, 1, &[5.0]);
        let b2 = m(1, 1, &[7.0]);
        let out = btp(&BlockRow::new(alloc::vec![a, c]).unwrap(), &BlockRow::new(alloc::vec![b1, b2]).unwrap()).unwrap();
        let vals: Vec<f64> = out.blocks().iter().map(|b| b[(0, 0)]).collect();
        assert_eq!(vals, alloc::vec![10.0, 14.0, 15.0, 21.0]);
    }

    #[test]
    fn incompatible_blocks_named() {
        let a = BlockRow::new(alloc::vec![m(2, 2, &[1.0; 4]), m(2, 3, &[1.0; 6])]).unwrap();
        let b = BlockRow::single(m(2, 1, &[1.0, 1.0]));
        let err = btp(&a, &b).unwrap_err();
        assert_eq!(err, Error::IncompatibleBlocks { left: 1, right: 0, left_cols: 3, right_rows: 2 });
    }

    #[test]
    fn empty_word_is_tail() {
        let gens = BlockRow::new(alloc::vec![m(2, 2, &[1.0; 4])]).unwrap();
        let tail = m(2, 1, &[1.0, -1.0]);
        assert_eq!(word_products(&gens, &tail, 0).unwrap().blocks(), &[tail]);
    }

    #[test]
    fn zero_identity_words() {
        let gens = BlockRow::new(alloc::vec![DMatrix::zeros(2, 2), DMatrix::identity(2, 2)]).unwrap();
        let b = m(2, 1, &[1.0, 2.0]);
        let out = word_products(&gens, &b, 2).unwrap();
        let z = DMatrix::zeros(2, 1);
        assert_eq!(out.blocks(), &[z.clone(), z.clone(), z, b]);
    }

    #[test]
    fn words_match_brute_force() {
        let a = m(2, 2, &[1.0, -2.0, 3.0, 0.0]);
        let c = m(2, 2, &[2.0, 1.0, -1.0, 4.0]);
        let b = m(2, 1, &[1.0, 3.0]);
        let out = word_products(&BlockRow::new(alloc::vec![a.clone(), c.clone()]).unwrap(), &b, 2).unwrap();
        let expect = [&a * &a * &b, &a * &c * &b, &c * &a * &b, &c * &c * &b];
        assert_eq!(out.blocks(), &expect);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(span_rank(&DMatrix::zeros(3, 3), 1e-10).unwrap().rank, 0);
        assert_eq!(span_rank(&DMatrix::identity(3, 3), 1e-10).unwrap().rank, 3);
        // singular values of [[1,2],[2,4]] are 5 and 0
        let s = span_rank(&m(2, 2, &[1.0, 2.0, 2.0, 4.0]), 1e-10).unwrap();
        assert_eq!(s.rank, 1);
        let v = s.basis.column(0);
        assert!((v[0].abs() - 1.0 / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(span_rank(&m(1, 1, &[f64::NAN]), 1e-10), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn incremental_matches_batch_and_caps() {
        let mut s = IncrementalSpan::new(3, 1e-10, Some(2));
        s.push(&m(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        s.push(&m(3, 2, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.rank(), 1);
        s.push(&m(3, 1, &[0.0, 1.0, 1.0])).unwrap();
        assert!(s.saturated());
        s.push(&m(3, 1, &[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(s.rank(), 2);
        let b = s.basis().basis;
        assert!((b.transpose() * &b - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    fn block_row(rows: usize, widths: Vec<usize>, vals: Vec<f64>) -> BlockRow<f64> {
        let mut it = vals.into_iter().cycle();
        BlockRow::new(widths.iter().map(|&w| DMatrix::from_fn(rows, w, |_, _| it.next().unwrap())).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn btp_associative(v in proptest::collection::vec(-3.0f64..3.0, 40), p in 1usize..3, q in 1usize..3, r in 1usize..3) {
            let a = block_row(2, alloc::vec![2; p], v.clone());
            let b = block_row(2, alloc::vec![2; q], v.iter().rev().cloned().collect());
            let c = block_row(2, alloc::vec![1; r], v.iter().map(|x| x * 0.5 + 1.0).collect());
            let left = btp(&btp(&a, &b).unwrap(), &c).unwrap().flatten();
            let right = btp(&a, &btp(&b, &c).unwrap()).unwrap().flatten();
            let scale = 1.0 + left.norm();
            prop_assert!((left - right).norm() <= 1e-12 * scale);
        }

        #[test]
        fn single_left_is_blockwise(v in proptest::collection::vec(-3.0f64..3.0, 24), q in 1usize..4) {
            let a = DMatrix::from_fn(2, 2, |i, j| v[i * 2 + j]);
            let b = block_row(2, alloc::vec![2; q], v[4..].to_vec());
            let out = btp(&BlockRow::single(a.clone()), &b).unwrap();
            for (o, bl) in out.blocks().iter().zip(b.blocks()) {
                prop_assert_eq!(o, &(&a * bl));
            }
        }

        #[test]
        fn word_count(k in 0usize..5, g in 1usize..4) {
            let gens = BlockRow::new((0..g).map(|i| DMatrix::from_element(2, 2, i as f64)).collect()).unwrap();
            let out = word_products(&gens, &DMatrix::from_element(2, 1, 1.0), k).unwrap();
            prop_assert_eq!(out.len(), g.pow(k as u32));
        }

        #[test]
        fn rank_permutation_duplication_invariant(v in proptest::collection::vec(-2i32..3, 12), k in 0usize..4) {
            let mcols = DMatrix::from_fn(3, 4, |i, j| v[i * 4 + j] as f64);
            let base = span_rank(&mcols, 1e-10).unwrap().rank;
            let mut cols: Vec<_> = mcols.column_iter().map(|c| c.clone_owned()).collect();
            cols.rotate_left(k);
            cols.push(cols[0].clone());
            let shuffled = DMatrix::from_columns(&cols);
            prop_assert_eq!(span_rank(&shuffled, 1e-10).unwrap().rank, base);
        }
    }
}
