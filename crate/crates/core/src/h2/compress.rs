use nalgebra::DMatrix;

use super::matrix::{H2Matrix, DENSE_LIMIT};
use super::tree::IndexTree;
use crate::error::{Error, Result};

/// Leading `r` left singular vectors of `a`, padded with zero columns when
/// `a` has fewer than `r` of them.
fn leading_left_vectors(a: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), r);
    if a.ncols() == 0 {
        return out;
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    for (dst, &src) in order.iter().take(r).enumerate() {
        out.set_column(dst, &u.column(src));
    }
    out
}

fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Points outside the neighbor boxes of `i`: the columns its basis must
/// capture at `level` and every coarser level.
pub(crate) fn far_points(tree: &IndexTree, level: usize, i: usize) -> Vec<usize> {
    let mut near = vec![false; tree.num_points()];
    for &j in tree.neighbors(level, i) {
        for p in tree.box_points(level, j) {
            near[p] = true;
        }
    }
    (0..tree.num_points()).filter(|&p| !near[p]).collect()
}

/// One side (column or row) of the nested basis construction.
struct NestedBasis {
    leaf: Vec<DMatrix<f64>>,
    /// `transfer[l - 2][j]` for child `j` at level `l + 1`.
    transfer: Vec<Vec<DMatrix<f64>>>,
    /// Explicit orthonormal basis per level and box, `explicit[l][i]`.
    explicit: Vec<Vec<DMatrix<f64>>>,
}

fn nested_basis(a: &DMatrix<f64>, tree: &IndexTree, r: usize) -> NestedBasis {
    let l = tree.levels();
    let mut explicit: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); l + 1];
    explicit[l] = (0..tree.num_boxes(l))
        .map(|i| {
            let block = submatrix(a, &tree.box_points(l, i), &far_points(tree, l, i));
            leading_left_vectors(&block, r)
        })
        .collect();
    let leaf = explicit[l].clone();
    let mut transfer = vec![Vec::new(); l.saturating_sub(2)];
    for level in (2..l).rev() {
        let mut blocks = vec![DMatrix::zeros(r, r); tree.num_boxes(level + 1)];
        let mut level_bases = Vec::with_capacity(tree.num_boxes(level));
        for i in 0..tree.num_boxes(level) {
            let far = far_points(tree, level, i);
            let kids = tree.children(level, i);
            let mut stacked = DMatrix::zeros(kids.len() * r, far.len());
            for (c, &j) in kids.iter().enumerate() {
                let rows = tree.box_points(level + 1, j);
                let proj = explicit[level + 1][j].tr_mul(&submatrix(a, &rows, &far));
                stacked.rows_mut(c * r, r).copy_from(&proj);
            }
            let w = leading_left_vectors(&stacked, r);
            let mut basis = DMatrix::zeros(tree.box_points(level, i).len(), r);
            let mut off = 0;
            for (c, &j) in kids.iter().enumerate() {
                let bj = w.rows(c * r, r).into_owned();
                let part = &explicit[level + 1][j] * &bj;
                basis.rows_mut(off, part.nrows()).copy_from(&part);
                off += part.nrows();
                blocks[j] = bj;
            }
            level_bases.push(basis);
        }
        explicit[level] = level_bases;
        transfer[level - 2] = blocks;
    }
    NestedBasis {
        leaf,
        transfer,
        explicit,
    }
}

/// Fixed-rank H² approximation of a dense `N^d x N^d` matrix.
///
/// Column bases come from truncated SVDs of each box's far-field row block,
/// built bottom-up so that a parent's basis is the leading subspace of its
/// children's projected blocks; row bases do the same on `A^T`. Interaction
/// blocks are the projections `U_I^T A_IJ V_J` and near-field blocks are
/// copied verbatim.
pub fn compress_dense(a: &DMatrix<f64>, tree: &IndexTree, r: usize) -> Result<H2Matrix> {
    let n = tree.num_points();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::shape(format!(
            "matrix is {}x{}, tree expects {n}x{n}",
            a.nrows(),
            a.ncols()
        )));
    }
    if n > DENSE_LIMIT {
        return Err(Error::config(format!(
            "refusing to compress {n} x {n}; limit is {DENSE_LIMIT}"
        )));
    }
    let mut h = H2Matrix::identity(tree, r)?;
    let cols = nested_basis(a, tree, r);
    let rows = nested_basis(&a.transpose(), tree, r);
    let l = tree.levels();
    for level in 2..=l {
        let pts: Vec<_> = (0..tree.num_boxes(level))
            .map(|i| tree.box_points(level, i))
            .collect();
        for i in 0..tree.num_boxes(level) {
            for (k, &j) in tree.interactions(level, i).iter().enumerate() {
                let blk = submatrix(a, &pts[i], &pts[j]);
                h.m[level - 2][i][k] =
                    cols.explicit[level][i].tr_mul(&blk) * &rows.explicit[level][j];
            }
        }
    }
    for i in 0..tree.num_boxes(l) {
        let pi = tree.box_points(l, i);
        for (k, &j) in tree.neighbors(l, i).iter().enumerate() {
            h.adjacent[i][k] = submatrix(a, &pi, &tree.box_points(l, j));
        }
    }
    h.u_leaf = cols.leaf;
    h.v_leaf = rows.leaf;
    h.b = cols.transfer;
    h.c = rows.transfer;
    Ok(h)
}
