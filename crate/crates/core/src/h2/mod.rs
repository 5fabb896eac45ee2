//! Periodic index trees and H² matrices: storage, the fast matvec, dense
//! assembly and fixed-rank compression.

mod compress;
mod matrix;
mod tree;

pub use compress::compress_dense;
pub use matrix::{random_h2, H2Matrix, DENSE_LIMIT};
pub use tree::IndexTree;

/// Builds the tree for `2^L m` points per axis in `d` dimensions.
pub fn build_tree(levels: usize, leaf_size: usize, dim: usize) -> crate::Result<IndexTree> {
    IndexTree::build(levels, leaf_size, dim)
}
