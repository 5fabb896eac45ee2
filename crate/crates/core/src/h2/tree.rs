use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Uniform dyadic partition of a periodic grid with `N = 2^L m` points per
/// axis.
///
/// Boxes at level `l` are numbered column-major over their `2^l` per-axis
/// coordinates. Children of a box are ordered column-major as well
/// (`c1 + 2 c2`), which is the order used by the transfer blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTree {
    levels: usize,
    leaf_size: usize,
    dim: usize,
    neighbors: Vec<Vec<Vec<usize>>>,
    interactions: Vec<Vec<Vec<usize>>>,
}

impl IndexTree {
    pub fn build(levels: usize, leaf_size: usize, dim: usize) -> Result<Self> {
        if levels < 3 {
            return Err(Error::config(format!(
                "at least 3 levels are required, got L = {levels}"
            )));
        }
        if leaf_size == 0 {
            return Err(Error::config("leaf size must be positive"));
        }
        if !(1..=2).contains(&dim) {
            return Err(Error::config(format!(
                "dimension must be 1 or 2, got {dim}"
            )));
        }
        let mut tree = IndexTree {
            levels,
            leaf_size,
            dim,
            neighbors: Vec::new(),
            interactions: Vec::new(),
        };
        for level in 0..=levels {
            let nl = (0..tree.num_boxes(level))
                .map(|i| tree.compute_neighbors(level, i))
                .collect();
            tree.neighbors.push(nl);
        }
        for level in 0..=levels {
            let il = (0..tree.num_boxes(level))
                .map(|i| {
                    if level < 2 {
                        Vec::new()
                    } else {
                        tree.compute_interactions(level, i)
                    }
                })
                .collect();
            tree.interactions.push(il);
        }
        Ok(tree)
    }

    /// Number of levels `L`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Points per leaf box along each axis, `m`.
    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `N = 2^L m`.
    pub fn points_per_axis(&self) -> usize {
        self.leaf_size << self.levels
    }

    /// `N^d`.
    pub fn num_points(&self) -> usize {
        self.points_per_axis().pow(self.dim as u32)
    }

    /// `m^d`.
    pub fn leaf_points(&self) -> usize {
        self.leaf_size.pow(self.dim as u32)
    }

    pub fn boxes_per_axis(&self, level: usize) -> usize {
        1 << level
    }

    pub fn num_boxes(&self, level: usize) -> usize {
        self.boxes_per_axis(level).pow(self.dim as u32)
    }

    pub fn coords(&self, level: usize, i: usize) -> [usize; 2] {
        let n = self.boxes_per_axis(level);
        if self.dim == 1 {
            [i, 0]
        } else {
            [i % n, i / n]
        }
    }

    pub fn index(&self, level: usize, c: [usize; 2]) -> usize {
        c[0] + self.boxes_per_axis(level) * c[1]
    }

    pub fn num_children(&self) -> usize {
        1 << self.dim
    }

    pub fn children(&self, level: usize, i: usize) -> Vec<usize> {
        let [i1, i2] = self.coords(level, i);
        (0..self.num_children())
            .map(|ch| {
                let (c1, c2) = (ch & 1, ch >> 1);
                let c = if self.dim == 1 {
                    [2 * i1 + c1, 0]
                } else {
                    [2 * i1 + c1, 2 * i2 + c2]
                };
                self.index(level + 1, c)
            })
            .collect()
    }

    pub fn parent(&self, level: usize, i: usize) -> usize {
        let [i1, i2] = self.coords(level, i);
        self.index(level - 1, [i1 / 2, i2 / 2])
    }

    /// Neighbor list `NL(I)`, including `I`, under cyclic adjacency.
    pub fn neighbors(&self, level: usize, i: usize) -> &[usize] {
        &self.neighbors[level][i]
    }

    /// Interaction list `IL(I) = C(NL(P(I))) - NL(I)` (empty below level 2).
    pub fn interactions(&self, level: usize, i: usize) -> &[usize] {
        &self.interactions[level][i]
    }

    /// Band size of the interaction blocks: 2 at level 2, 3 below.
    pub fn interaction_band(&self, level: usize) -> usize {
        if level == 2 {
            2
        } else {
            3
        }
    }

    /// Band size of the adjacent (near-field) blocks.
    pub fn adjacent_band(&self) -> usize {
        1
    }

    /// Cyclic offset from box `i` to box `j` folded into `[-band, band]` per
    /// axis; the window tap that reads `j` from `i` in a kernel layer.
    pub fn signed_offset(&self, level: usize, i: usize, j: usize, band: usize) -> [isize; 2] {
        let n = self.boxes_per_axis(level) as isize;
        let (a, b) = (self.coords(level, i), self.coords(level, j));
        let mut out = [0isize; 2];
        for axis in 0..self.dim {
            let o = (b[axis] as isize - a[axis] as isize).rem_euclid(n);
            let o = if o <= band as isize { o } else { o - n };
            debug_assert!(o.unsigned_abs() <= band, "offset {o} outside band {band}");
            out[axis] = o;
        }
        out
    }

    /// Global grid indices (column-major over the `N^d` grid) of the points
    /// in box `i` at `level`, in hierarchical order: column-major inside a
    /// leaf, concatenation over children above it.
    pub fn box_points(&self, level: usize, i: usize) -> Vec<usize> {
        if level == self.levels {
            let m = self.leaf_size;
            let n = self.points_per_axis();
            let [i1, i2] = self.coords(level, i);
            if self.dim == 1 {
                (0..m).map(|a| i1 * m + a).collect()
            } else {
                let mut pts = Vec::with_capacity(m * m);
                for a2 in 0..m {
                    for a1 in 0..m {
                        pts.push((i1 * m + a1) + n * (i2 * m + a2));
                    }
                }
                pts
            }
        } else {
            self.children(level, i)
                .into_iter()
                .flat_map(|c| self.box_points(level + 1, c))
                .collect()
        }
    }

    fn compute_neighbors(&self, level: usize, i: usize) -> Vec<usize> {
        let n = self.boxes_per_axis(level) as isize;
        let c = self.coords(level, i);
        let range2: &[isize] = if self.dim == 2 { &[-1, 0, 1] } else { &[0] };
        let mut set = BTreeSet::new();
        for &o2 in range2 {
            for o1 in -1..=1isize {
                let j1 = (c[0] as isize + o1).rem_euclid(n) as usize;
                let j2 = (c[1] as isize + o2).rem_euclid(n) as usize;
                set.insert(self.index(level, [j1, j2]));
            }
        }
        set.into_iter().collect()
    }

    fn compute_interactions(&self, level: usize, i: usize) -> Vec<usize> {
        let parent = self.parent(level, i);
        let candidates: BTreeSet<usize> = self.neighbors[level - 1][parent]
            .iter()
            .flat_map(|&p| self.children(level - 1, p))
            .collect();
        let near: BTreeSet<usize> = self.neighbors[level][i].iter().copied().collect();
        candidates.difference(&near).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shallow_trees() {
        assert!(IndexTree::build(2, 4, 1).is_err());
        assert!(IndexTree::build(3, 4, 3).is_err());
    }

    #[test]
    fn level3_interaction_list_1d() {
        let t = IndexTree::build(3, 2, 1).unwrap();
        // Box 2 (third segment): offsets {-2, +2, +3}.
        assert_eq!(t.interactions(3, 2), &[0, 4, 5]);
        assert_eq!(t.interactions(3, 3), &[0, 1, 5]);
        for i in 0..8 {
            assert_eq!(t.interactions(3, i).len(), 3);
        }
    }

    #[test]
    fn level2_interaction_list_1d() {
        let t = IndexTree::build(3, 2, 1).unwrap();
        for i in 0..4 {
            assert_eq!(t.interactions(2, i), &[(i + 2) % 4]);
        }
    }

    #[test]
    fn neighbor_list_contains_self() {
        for d in [1, 2] {
            let t = IndexTree::build(4, 2, d).unwrap();
            for level in 0..=4 {
                for i in 0..t.num_boxes(level) {
                    assert!(t.neighbors(level, i).contains(&i));
                }
            }
        }
    }

    /// The interaction list agrees with the cyclic-offset shortcut.
    #[test]
    fn offsets_shortcut_agrees() {
        for d in [1usize, 2] {
            let t = IndexTree::build(5, 1, d).unwrap();
            for level in 2..=5 {
                let n = t.boxes_per_axis(level) as isize;
                for i in 0..t.num_boxes(level) {
                    let c = t.coords(level, i);
                    let per_axis = |x: usize| -> Vec<isize> {
                        if level == 2 {
                            (-1..=2).collect()
                        } else if x.is_multiple_of(2) {
                            (-2..=3).collect()
                        } else {
                            (-3..=2).collect()
                        }
                    };
                    let mut want = BTreeSet::new();
                    let ax2 = if d == 2 { per_axis(c[1]) } else { vec![0] };
                    for &o2 in &ax2 {
                        for &o1 in &per_axis(c[0]) {
                            if o1.abs() <= 1 && o2.abs() <= 1 {
                                continue;
                            }
                            let j = [
                                (c[0] as isize + o1).rem_euclid(n) as usize,
                                (c[1] as isize + o2).rem_euclid(n) as usize,
                            ];
                            want.insert(t.index(level, j));
                        }
                    }
                    let got: BTreeSet<usize> = t.interactions(level, i).iter().copied().collect();
                    assert_eq!(got, want, "d={d} level={level} box={i}");
                }
            }
        }
    }

    #[test]
    fn interaction_sizes_2d() {
        let t = IndexTree::build(4, 1, 2).unwrap();
        assert!((0..16).all(|i| t.interactions(2, i).len() == 7));
        assert!((0..64).all(|i| t.interactions(3, i).len() == 27));
    }

    #[test]
    fn offsets_fit_bands() {
        for d in [1, 2] {
            let t = IndexTree::build(4, 1, d).unwrap();
            for level in 2..=4 {
                let band = t.interaction_band(level);
                for i in 0..t.num_boxes(level) {
                    for &j in t.interactions(level, i) {
                        let o = t.signed_offset(level, i, j, band);
                        assert!(o.iter().all(|x| x.unsigned_abs() <= band));
                        assert!(o.iter().any(|x| x.unsigned_abs() >= 2));
                    }
                }
            }
        }
    }

    #[test]
    fn box_points_partition_the_grid() {
        for d in [1, 2] {
            let t = IndexTree::build(3, 3, d).unwrap();
            for level in 0..=3 {
                let mut all: Vec<usize> = (0..t.num_boxes(level))
                    .flat_map(|i| t.box_points(level, i))
                    .collect();
                all.sort_unstable();
                assert_eq!(all, (0..t.num_points()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn parent_child_roundtrip() {
        let t = IndexTree::build(4, 1, 2).unwrap();
        for level in 0..4 {
            for i in 0..t.num_boxes(level) {
                for c in t.children(level, i) {
                    assert_eq!(t.parent(level + 1, c), i);
                }
            }
        }
    }
}
