use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tree::IndexTree;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest `N^d` for which [`H2Matrix::assemble_dense`] agrees to run.
pub const DENSE_LIMIT: usize = 4096;

/// An H² matrix on a periodic uniform tree.
///
/// Storage is block-sparse and mirrors the factorization directly:
/// leaf bases `U`, `V` (`m^d x r` per leaf), transfer blocks `B`, `C`
/// (`r x r` per child box for levels `2..L-1`), interaction blocks `M`
/// (`r x r` per interaction-list pair for levels `2..L`) and near-field
/// blocks `A_ad` (`m^d x m^d` per leaf neighbor pair).
#[derive(Debug, Clone, PartialEq)]
pub struct H2Matrix {
    pub(super) tree: IndexTree,
    pub(super) rank: usize,
    pub(super) u_leaf: Vec<DMatrix<f64>>,
    pub(super) v_leaf: Vec<DMatrix<f64>>,
    /// `b[l - 2][j]`: transfer block of child box `j` at level `l + 1`.
    pub(super) b: Vec<Vec<DMatrix<f64>>>,
    pub(super) c: Vec<Vec<DMatrix<f64>>>,
    /// `m[l - 2][i][k]` pairs box `i` with `tree.interactions(l, i)[k]`.
    pub(super) m: Vec<Vec<Vec<DMatrix<f64>>>>,
    /// `adjacent[i][k]` pairs leaf `i` with `tree.neighbors(L, i)[k]`.
    pub(super) adjacent: Vec<Vec<DMatrix<f64>>>,
}

impl H2Matrix {
    fn filled(
        tree: &IndexTree,
        rank: usize,
        mut fill: impl FnMut(usize, usize) -> DMatrix<f64>,
    ) -> Result<Self> {
        let mp = tree.leaf_points();
        if rank == 0 || rank > mp {
            return Err(Error::config(format!(
                "rank must lie in 1..={mp} (leaf points), got {rank}"
            )));
        }
        let l = tree.levels();
        let leaves = tree.num_boxes(l);
        let u_leaf = (0..leaves).map(|_| fill(mp, rank)).collect();
        let v_leaf = (0..leaves).map(|_| fill(mp, rank)).collect();
        let mut b = Vec::new();
        let mut c = Vec::new();
        for level in 2..l {
            let n = tree.num_boxes(level + 1);
            b.push((0..n).map(|_| fill(rank, rank)).collect());
            c.push((0..n).map(|_| fill(rank, rank)).collect());
        }
        let m = (2..=l)
            .map(|level| {
                (0..tree.num_boxes(level))
                    .map(|i| {
                        tree.interactions(level, i)
                            .iter()
                            .map(|_| fill(rank, rank))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let adjacent = (0..leaves)
            .map(|i| tree.neighbors(l, i).iter().map(|_| fill(mp, mp)).collect())
            .collect();
        Ok(H2Matrix {
            tree: tree.clone(),
            rank,
            u_leaf,
            v_leaf,
            b,
            c,
            m,
            adjacent,
        })
    }

    /// All factors filled with independent standard normal entries drawn
    /// from a ChaCha8 stream seeded by `seed`.
    pub fn random(tree: &IndexTree, rank: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::filled(tree, rank, |r, c| {
            DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
        })
    }

    /// Like [`Self::random`] but every block entry has variance
    /// `1 / ncols`, so each factor roughly preserves vector norms and the
    /// level contributions stay comparable in size.
    pub fn random_normalized(tree: &IndexTree, rank: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::filled(tree, rank, |r, c| {
            let s = 1.0 / (c as f64).sqrt();
            DMatrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
        })
    }

    /// The identity: no far field, identity diagonal near-field blocks.
    pub fn identity(tree: &IndexTree, rank: usize) -> Result<Self> {
        let mut h = Self::filled(tree, rank, DMatrix::zeros)?;
        let l = tree.levels();
        for i in 0..tree.num_boxes(l) {
            let k = tree.neighbors(l, i).iter().position(|&j| j == i).unwrap();
            h.adjacent[i][k] = DMatrix::identity(tree.leaf_points(), tree.leaf_points());
        }
        Ok(h)
    }

    pub fn tree(&self) -> &IndexTree {
        &self.tree
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn u_leaf(&self, i: usize) -> &DMatrix<f64> {
        &self.u_leaf[i]
    }

    pub fn v_leaf(&self, i: usize) -> &DMatrix<f64> {
        &self.v_leaf[i]
    }

    /// Column transfer block `B_J` for box `child` at level `level + 1`,
    /// with `2 <= level < L`.
    pub fn transfer_b(&self, level: usize, child: usize) -> &DMatrix<f64> {
        &self.b[level - 2][child]
    }

    /// Row transfer block `C_J`, indexed like [`Self::transfer_b`].
    pub fn transfer_c(&self, level: usize, child: usize) -> &DMatrix<f64> {
        &self.c[level - 2][child]
    }

    /// Interaction block between `i` and its `k`-th interaction-list entry.
    pub fn interaction(&self, level: usize, i: usize, k: usize) -> &DMatrix<f64> {
        &self.m[level - 2][i][k]
    }

    /// Near-field block between leaf `i` and its `k`-th neighbor.
    pub fn adjacent(&self, i: usize, k: usize) -> &DMatrix<f64> {
        &self.adjacent[i][k]
    }

    /// Number of stored scalars across all blocks.
    pub fn stored_scalars(&self) -> usize {
        let sizes = |v: &[DMatrix<f64>]| v.iter().map(|x| x.len()).sum::<usize>();
        sizes(&self.u_leaf)
            + sizes(&self.v_leaf)
            + self.b.iter().map(|v| sizes(v)).sum::<usize>()
            + self.c.iter().map(|v| sizes(v)).sum::<usize>()
            + self
                .m
                .iter()
                .flat_map(|lv| lv.iter().map(|v| sizes(v)))
                .sum::<usize>()
            + self.adjacent.iter().map(|v| sizes(v)).sum::<usize>()
    }

    fn gather(&self, v: &[f64], pts: &[usize]) -> DVector<f64> {
        DVector::from_iterator(pts.len(), pts.iter().map(|&p| v[p]))
    }

    /// Fast matrix-vector product by the downward/interaction/upward sweep.
    /// The result has the same shape as `v`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let t = &self.tree;
        if v.len() != t.num_points() {
            return Err(Error::shape(format!(
                "input has {} entries, matrix acts on {}",
                v.len(),
                t.num_points()
            )));
        }
        let l = t.levels();
        let leaves = t.num_boxes(l);
        let vd = v.data();
        let leaf_pts: Vec<Vec<usize>> = (0..leaves).map(|i| t.box_points(l, i)).collect();
        let v_loc: Vec<DVector<f64>> = leaf_pts.iter().map(|p| self.gather(vd, p)).collect();

        // xi[level] per box, levels 2..=L.
        let mut xi: Vec<Vec<DVector<f64>>> = vec![Vec::new(); l + 1];
        xi[l] = (0..leaves)
            .map(|i| self.v_leaf[i].tr_mul(&v_loc[i]))
            .collect();
        for level in (2..l).rev() {
            xi[level] = (0..t.num_boxes(level))
                .map(|i| {
                    let mut acc = DVector::zeros(self.rank);
                    for j in t.children(level, i) {
                        acc += self.c[level - 2][j].tr_mul(&xi[level + 1][j]);
                    }
                    acc
                })
                .collect();
        }

        let zeta = |level: usize, i: usize| -> DVector<f64> {
            let mut acc = DVector::zeros(self.rank);
            for (k, &j) in t.interactions(level, i).iter().enumerate() {
                acc += &self.m[level - 2][i][k] * &xi[level][j];
            }
            acc
        };

        let mut chi: Vec<DVector<f64>> = (0..t.num_boxes(2)).map(|i| zeta(2, i)).collect();
        for level in 2..l {
            chi = (0..t.num_boxes(level + 1))
                .map(|j| {
                    let p = t.parent(level + 1, j);
                    &self.b[level - 2][j] * &chi[p] + zeta(level + 1, j)
                })
                .collect();
        }

        let mut out = vec![0.0; vd.len()];
        for i in 0..leaves {
            let mut u = &self.u_leaf[i] * &chi[i];
            for (k, &j) in t.neighbors(l, i).iter().enumerate() {
                u += &self.adjacent[i][k] * &v_loc[j];
            }
            for (a, &p) in leaf_pts[i].iter().enumerate() {
                out[p] = u[a];
            }
        }
        Tensor::new(v.shape().to_vec(), out)
    }

    /// Explicit column (`U^l`) and row (`V^l`) bases of box `i` at `level`,
    /// with rows ordered as [`IndexTree::box_points`].
    pub fn explicit_bases(&self, level: usize, i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = &self.tree;
        if level == t.levels() {
            return (self.u_leaf[i].clone(), self.v_leaf[i].clone());
        }
        let kids = t.children(level, i);
        let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = kids
            .iter()
            .map(|&j| {
                let (u, v) = self.explicit_bases(level + 1, j);
                (u * &self.b[level - 2][j], v * &self.c[level - 2][j])
            })
            .collect();
        let rows: usize = parts.iter().map(|p| p.0.nrows()).sum();
        let mut u = DMatrix::zeros(rows, self.rank);
        let mut v = DMatrix::zeros(rows, self.rank);
        let mut off = 0;
        for (pu, pv) in parts {
            let n = pu.nrows();
            u.rows_mut(off, n).copy_from(&pu);
            v.rows_mut(off, n).copy_from(&pv);
            off += n;
        }
        (u, v)
    }

    fn check_dense_size(&self) -> Result<usize> {
        let n = self.tree.num_points();
        if n > DENSE_LIMIT {
            return Err(Error::config(format!(
                "refusing dense assembly of {n} x {n}; limit is {DENSE_LIMIT}"
            )));
        }
        Ok(n)
    }

    /// Dense form of the far-field term at one level:
    /// `sum over I, J in IL(I) of U_I M_IJ V_J^T`.
    pub fn assemble_level(&self, level: usize) -> Result<DMatrix<f64>> {
        let n = self.check_dense_size()?;
        let t = &self.tree;
        let mut a = DMatrix::zeros(n, n);
        let nb = t.num_boxes(level);
        let bases: Vec<_> = (0..nb).map(|i| self.explicit_bases(level, i)).collect();
        let pts: Vec<_> = (0..nb).map(|i| t.box_points(level, i)).collect();
        for i in 0..nb {
            for (k, &j) in t.interactions(level, i).iter().enumerate() {
                let block = &bases[i].0 * &self.m[level - 2][i][k] * bases[j].1.transpose();
                scatter_add(&mut a, &pts[i], &pts[j], &block);
            }
        }
        Ok(a)
    }

    /// Dense near-field term.
    pub fn assemble_adjacent(&self) -> Result<DMatrix<f64>> {
        let n = self.check_dense_size()?;
        let t = &self.tree;
        let l = t.levels();
        let mut a = DMatrix::zeros(n, n);
        let pts: Vec<_> = (0..t.num_boxes(l)).map(|i| t.box_points(l, i)).collect();
        for i in 0..t.num_boxes(l) {
            for (k, &j) in t.neighbors(l, i).iter().enumerate() {
                scatter_add(&mut a, &pts[i], &pts[j], &self.adjacent[i][k]);
            }
        }
        Ok(a)
    }

    /// The full dense matrix, summed level by level plus the near field.
    pub fn assemble_dense(&self) -> Result<DMatrix<f64>> {
        let mut a = self.assemble_adjacent()?;
        for level in 2..=self.tree.levels() {
            a += self.assemble_level(level)?;
        }
        Ok(a)
    }
}

fn scatter_add(a: &mut DMatrix<f64>, rows: &[usize], cols: &[usize], block: &DMatrix<f64>) {
    for (bj, &cj) in cols.iter().enumerate() {
        for (bi, &ri) in rows.iter().enumerate() {
            a[(ri, cj)] += block[(bi, bj)];
        }
    }
}

/// Random H² matrix with seeded Gaussian factors; see [`H2Matrix::random`].
pub fn random_h2(tree: &IndexTree, rank: usize, seed: u64) -> Result<H2Matrix> {
    H2Matrix::random(tree, rank, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn shape_for(t: &IndexTree) -> Vec<usize> {
        vec![t.points_per_axis(); t.dim()]
    }

    #[test]
    fn rank_bounds_enforced() {
        let t = IndexTree::build(3, 2, 1).unwrap();
        assert!(random_h2(&t, 3, 0).is_err());
        assert!(random_h2(&t, 0, 0).is_err());
        assert!(random_h2(&t, 2, 0).is_ok());
    }

    #[test]
    fn identity_is_identity() {
        for d in [1, 2] {
            let t = IndexTree::build(3, 2, d).unwrap();
            let h = H2Matrix::identity(&t, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let v = Tensor::new(shape_for(&t), random_vec(t.num_points(), &mut rng)).unwrap();
            assert_eq!(h.matvec(&v).unwrap(), v);
            let a = h.assemble_dense().unwrap();
            assert_eq!(a, DMatrix::identity(t.num_points(), t.num_points()));
        }
    }

    #[test]
    fn seeded_determinism() {
        let t = IndexTree::build(4, 3, 1).unwrap();
        assert_eq!(random_h2(&t, 2, 9).unwrap(), random_h2(&t, 2, 9).unwrap());
        assert_ne!(random_h2(&t, 2, 9).unwrap(), random_h2(&t, 2, 10).unwrap());
    }

    #[test]
    fn matvec_matches_dense() {
        let cases = [
            (1, 3, 5, 2),
            (1, 4, 5, 4),
            (1, 5, 5, 3),
            (2, 3, 4, 2),
            (2, 3, 4, 4),
            (2, 4, 2, 3),
        ];
        for (d, l, m, r) in cases {
            let t = IndexTree::build(l, m, d).unwrap();
            let h = random_h2(&t, r, 7).unwrap();
            let a = h.assemble_dense().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..20 {
                let v = random_vec(t.num_points(), &mut rng);
                let fast = h
                    .matvec(&Tensor::new(shape_for(&t), v.clone()).unwrap())
                    .unwrap();
                let dense = &a * DVector::from_vec(v);
                let err = rel(fast.data(), dense.as_slice());
                assert!(err <= 1e-12, "d={d} L={l} err={err}");
            }
        }
    }

    #[test]
    fn matvec_is_linear() {
        let t = IndexTree::build(4, 3, 1).unwrap();
        let h = random_h2(&t, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::row(random_vec(t.num_points(), &mut rng));
        let w = Tensor::row(random_vec(t.num_points(), &mut rng));
        let alpha = 1.7;
        let lhs = h.matvec(&v.scale(alpha).add(&w).unwrap()).unwrap();
        let rhs = h
            .matvec(&v)
            .unwrap()
            .scale(alpha)
            .add(&h.matvec(&w).unwrap())
            .unwrap();
        assert!(rel(lhs.data(), rhs.data()) < 1e-14);
    }

    #[test]
    fn far_field_blocks_have_rank_at_most_r() {
        let t = IndexTree::build(4, 4, 1).unwrap();
        let r = 2;
        let h = random_h2(&t, r, 11).unwrap();
        let a = h.assemble_dense().unwrap();
        for level in 2..=4 {
            for i in 0..t.num_boxes(level) {
                let rows = t.box_points(level, i);
                for &j in t.interactions(level, i) {
                    let cols = t.box_points(level, j);
                    let blk =
                        DMatrix::from_fn(rows.len(), cols.len(), |p, q| a[(rows[p], cols[q])]);
                    let sv = blk.singular_values();
                    let smax = sv.max();
                    let numerical_rank = sv.iter().filter(|&&s| s > 1e-10 * smax).count();
                    assert!(
                        numerical_rank <= r,
                        "level {level} box {i}->{j}: rank {numerical_rank}"
                    );
                }
            }
        }
    }

    #[test]
    fn level_terms_vanish_outside_interaction_pairs() {
        let t = IndexTree::build(4, 2, 1).unwrap();
        let h = random_h2(&t, 2, 4).unwrap();
        for level in 2..=4 {
            let a = h.assemble_level(level).unwrap();
            let owner: Vec<usize> = {
                let mut o = vec![0; t.num_points()];
                for i in 0..t.num_boxes(level) {
                    for p in t.box_points(level, i) {
                        o[p] = i;
                    }
                }
                o
            };
            for q in 0..t.num_points() {
                for p in 0..t.num_points() {
                    if !t.interactions(level, owner[p]).contains(&owner[q]) {
                        assert_eq!(a[(p, q)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_factors_give_symmetric_matrix() {
        for d in [1, 2] {
            let t = IndexTree::build(3, 2, d).unwrap();
            let mut h = random_h2(&t, 2, 21).unwrap();
            h.v_leaf = h.u_leaf.clone();
            h.c = h.b.clone();
            let l = t.levels();
            for level in 2..=l {
                for i in 0..t.num_boxes(level) {
                    for (k, &j) in t.interactions(level, i).iter().enumerate() {
                        if j > i {
                            let kj = t
                                .interactions(level, j)
                                .iter()
                                .position(|&x| x == i)
                                .unwrap();
                            h.m[level - 2][j][kj] = h.m[level - 2][i][k].transpose();
                        }
                    }
                }
            }
            for i in 0..t.num_boxes(l) {
                for (k, &j) in t.neighbors(l, i).iter().enumerate() {
                    if j > i {
                        let kj = t.neighbors(l, j).iter().position(|&x| x == i).unwrap();
                        h.adjacent[j][kj] = h.adjacent[i][k].transpose();
                    } else if j == i {
                        let s = &h.adjacent[i][k] + h.adjacent[i][k].transpose();
                        h.adjacent[i][k] = s;
                    }
                }
            }
            let a = h.assemble_dense().unwrap();
            assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        }
    }

    #[test]
    fn dense_guard_refuses_large_grids() {
        let t = IndexTree::build(5, 3, 2).unwrap();
        let h = H2Matrix::identity(&t, 1).unwrap();
        assert!(matches!(h.assemble_dense(), Err(Error::Config(_))));
    }

    #[test]
    fn stored_scalars_match_block_counts() {
        for (d, l, m, r) in [(1, 3, 5, 2), (1, 6, 5, 4), (2, 3, 4, 3), (2, 5, 2, 2)] {
            let t = IndexTree::build(l, m, d).unwrap();
            let h = H2Matrix::identity(&t, r).unwrap();
            let md = m.pow(d as u32);
            let boxes = |lv: usize| 1usize << (lv * d);
            let il = |lv: usize| match (d, lv) {
                (1, 2) => 1,
                (1, _) => 3,
                (_, 2) => 7,
                _ => 27,
            };
            let mut want = 2 * boxes(l) * md * r;
            want += (3..=l).map(|lv| 2 * boxes(lv) * r * r).sum::<usize>();
            want += (2..=l).map(|lv| boxes(lv) * il(lv) * r * r).sum::<usize>();
            want += boxes(l) * 3usize.pow(d as u32) * md * md;
            assert_eq!(h.stored_scalars(), want);
            // Linear in N^d for fixed m, r: bounded by a constant per point.
            let per_point = want as f64 / t.num_points() as f64;
            let bound = (2 * r + 3usize.pow(d as u32) * md) as f64
                + (2 + 27) as f64 * (r * r) as f64 / md as f64 * 2.0;
            assert!(per_point <= bound);
        }
    }
}
