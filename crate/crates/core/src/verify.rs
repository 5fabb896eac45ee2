//! Property suites that can be run outside the unit tests, for example from
//! the command line: linear equivalence, gradient checks, parameter counts
//! and tree interaction lists.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::h2::{random_h2, IndexTree};
use crate::layers::Activation;
use crate::model::{
    build_linear_h2_nn, build_mnn_h2, Architecture, Network, NetworkConfig, SharingMode,
};
use crate::tensor::{Padding, Tensor};
use crate::train::grad_check;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Linear,
    Grad,
    Params,
    Tree,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Linear, Suite::Grad, Suite::Params, Suite::Tree];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Linear => "linear",
            Suite::Grad => "grad",
            Suite::Params => "params",
            Suite::Tree => "tree",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Suite::Linear),
            "grad" => Ok(Suite::Grad),
            "params" => Ok(Suite::Params),
            "tree" => Ok(Suite::Tree),
            other => Err(Error::config(format!(
                "unknown suite '{other}' (expected linear, grad, params or tree)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(
            f,
            "suite {}: {} checks, {failed} failed",
            self.suite,
            self.checks.len()
        )
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Linear => linear_checks()?,
        Suite::Grad => grad_checks()?,
        Suite::Params => param_checks()?,
        Suite::Tree => tree_checks()?,
    };
    Ok(SuiteReport { suite, checks })
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let len = shape.iter().product();
    Tensor::new(
        shape,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Geometries of the linear-equivalence sweep: `(d, L, m, r)`.
pub const LINEAR_CASES: [(usize, usize, usize, usize); 10] = [
    (1, 3, 5, 2),
    (1, 3, 5, 4),
    (1, 4, 5, 2),
    (1, 4, 5, 4),
    (1, 5, 5, 2),
    (1, 5, 5, 4),
    (2, 3, 4, 2),
    (2, 3, 4, 4),
    (2, 3, 2, 2),
    (2, 4, 2, 3),
];

fn linear_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (d, l, m, r) in LINEAR_CASES {
        let tree = IndexTree::build(l, m, d)?;
        let h2 = random_h2(&tree, r, 1000 + 10 * l as u64 + r as u64)?;
        let net = build_linear_h2_nn(&h2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let v = random_tensor(vec![tree.points_per_axis(); d], &mut rng)?;
            let want = h2.matvec(&v)?;
            let got = net.forward(&v)?;
            worst = worst.max(relative_l2(got.data(), want.data()));
        }
        out.push(check(
            format!("network equals matvec d={d} L={l} m={m} r={r}"),
            worst <= 1e-12,
            format!("max relative error {worst:.2e} over 20 inputs (bound 1e-12)"),
        ));
    }
    Ok(out)
}

fn grad_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for sharing in [SharingMode::Lc, SharingMode::Cnn, SharingMode::Mixed] {
        for dim in [1, 2] {
            for padding in [Padding::Periodic, Padding::Zero] {
                for activation in [Activation::Relu, Activation::Linear] {
                    let mut cfg = if dim == 1 {
                        NetworkConfig::new_1d(3, 3, 3, 2)
                    } else {
                        NetworkConfig::new_2d(3, 2, 2, 2)
                    };
                    cfg.sharing = sharing;
                    cfg.padding = padding;
                    cfg.init_std = 0.3;
                    cfg.activation = activation;
                    cfg.transfer_activation = activation;
                    let mut net: Network<f64> = build_mnn_h2(&cfg, 7)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(3);
                    for layer in net.layers_mut() {
                        for b in &mut layer.params_mut().bias {
                            *b = rng.random_range(-0.2..0.2);
                        }
                    }
                    let shape = vec![cfg.n; dim];
                    let x = random_tensor(shape.clone(), &mut rng)?;
                    let y = random_tensor(shape, &mut rng)?;
                    let rep = grad_check(&net, &x, &y, 200, 5)?;
                    let bound = if activation == Activation::Linear {
                        1e-7
                    } else {
                        1e-5
                    };
                    out.push(check(
                        format!("gradients {sharing} d={dim} {padding} {activation}"),
                        rep.max_deviation <= bound && rep.checked >= 180,
                        format!(
                            "max deviation {:.2e} (bound {bound:.0e}), {} checked, {} skipped",
                            rep.max_deviation, rep.checked, rep.skipped
                        ),
                    ));
                }
            }
        }
    }
    Ok(out)
}

fn interaction_band(level: usize) -> usize {
    if level == 2 {
        2
    } else {
        3
    }
}

/// Weight count for local sharing, summed term by term: adjacent layers,
/// first restriction, level restrictions and interpolations, kernel layers
/// and final interpolation.
pub fn lc_weight_formula(l: usize, m: usize, r: usize, k: usize) -> usize {
    let n = m << l;
    (1 << l) * m * m * k * 3
        + n * r
        + 2 * (2..l).map(|lv| (1usize << (lv + 1)) * r * r).sum::<usize>()
        + k * (2..=l)
            .map(|lv| (1usize << lv) * r * r * (2 * interaction_band(lv) + 1))
            .sum::<usize>()
        + (1 << l) * r * m
}

/// Weight count for convolutional sharing in 1D.
pub fn cnn_weight_formula(l: usize, m: usize, r: usize, k: usize) -> usize {
    m * r
        + 2 * (2..l).map(|_| 2 * r * r).sum::<usize>()
        + k * (2..=l)
            .map(|lv| r * r * (2 * interaction_band(lv) + 1))
            .sum::<usize>()
        + r * m
        + m * m * k * 3
}

fn count(cfg: NetworkConfig, include_bias: bool) -> Result<usize> {
    Ok(Network::<f64>::zeros(Architecture::Multiscale(cfg))?.count_params(include_bias))
}

fn param_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let reference = NetworkConfig::new_1d(6, 5, 6, 5);
    let weights = count(reference.clone(), false)?;
    let total = count(reference, true)?;
    out.push(check(
        "reference cnn configuration N=320 L=6 m=5 r=6 K=5",
        weights == 6951 && total == 7209,
        format!("{weights} weights, {total} with biases (expected 6951 / 7209)"),
    ));
    for (l, m, r, k) in [
        (3, 5, 2, 1),
        (4, 5, 4, 3),
        (5, 3, 3, 5),
        (6, 5, 5, 2),
        (4, 2, 1, 4),
    ] {
        let got = count(
            NetworkConfig::new_1d(l, m, r, k).with_sharing(SharingMode::Lc),
            false,
        )?;
        let want = lc_weight_formula(l, m, r, k);
        out.push(check(
            format!("lc weights L={l} m={m} r={r} K={k}"),
            got == want,
            format!("{got} counted, {want} from the closed form"),
        ));
    }
    let (m, r, k) = (5, 6, 5);
    let mut counts = Vec::new();
    for l in 3..=9 {
        let c = count(NetworkConfig::new_1d(l, m, r, k), false)?;
        if c != cnn_weight_formula(l, m, r, k) {
            out.push(check(
                format!("cnn weights L={l}"),
                false,
                format!("{c} counted"),
            ));
        }
        counts.push(c);
    }
    let increments: Vec<usize> = counts.windows(2).map(|w| w[1] - w[0]).collect();
    let constant = increments.windows(2).all(|w| w[0] == w[1]);
    out.push(check(
        "cnn count grows by a constant per level",
        constant,
        format!("increments {increments:?} for L=3..9"),
    ));
    let rte = NetworkConfig::new_1d(4, 5, 8, 5);
    let (c, x, lc) = (
        count(rte.clone(), true)?,
        count(rte.clone().with_sharing(SharingMode::Mixed), true)?,
        count(rte.with_sharing(SharingMode::Lc), true)?,
    );
    out.push(check(
        "mixed count strictly between cnn and lc (N=80 r=8 K=5)",
        c < x && x < lc,
        format!("cnn {c} < mixed {x} < lc {lc}"),
    ));
    Ok(out)
}

/// Interaction list from the cyclic-offset rule: per axis the offset lies in
/// `[-2, 3]` for an even coordinate and `[-3, 2]` for an odd one, and the box
/// is not a neighbor.
fn interaction_by_offsets(tree: &IndexTree, level: usize, i: usize) -> BTreeSet<usize> {
    let n = tree.boxes_per_axis(level) as isize;
    let ci = tree.coords(level, i);
    let axis_offsets = |c: usize| -> BTreeSet<isize> {
        let range = if c.is_multiple_of(2) { -2..=3 } else { -3..=2 };
        range.map(|o| (c as isize + o).rem_euclid(n)).collect()
    };
    let near = |c: usize| -> BTreeSet<isize> {
        (-1..=1).map(|o| (c as isize + o).rem_euclid(n)).collect()
    };
    let mut out = BTreeSet::new();
    for j in 0..tree.num_boxes(level) {
        let cj = tree.coords(level, j);
        let axes = tree.dim();
        let in_parent_band = (0..axes).all(|a| axis_offsets(ci[a]).contains(&(cj[a] as isize)));
        let is_neighbor = (0..axes).all(|a| near(ci[a]).contains(&(cj[a] as isize)));
        if in_parent_band && !is_neighbor {
            out.insert(j);
        }
    }
    out
}

fn tree_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let tree = IndexTree::build(3, 1, 1)?;
    let il: BTreeSet<usize> = tree.interactions(3, 2).iter().copied().collect();
    out.push(check(
        "1D level-3 interaction list of box 2",
        il == BTreeSet::from([0, 4, 5]),
        format!("{il:?} (expected {{0, 4, 5}}, offsets -2, +2, +3)"),
    ));
    for (dim, levels) in [(1, 3..=7), (2, 3..=5)] {
        let tree = IndexTree::build(*levels.end(), 2, dim)?;
        for level in 2..=tree.levels() {
            let mut mismatches = 0;
            let mut sizes = BTreeSet::new();
            for i in 0..tree.num_boxes(level) {
                let by_def: BTreeSet<usize> = tree.interactions(level, i).iter().copied().collect();
                if by_def != interaction_by_offsets(&tree, level, i) {
                    mismatches += 1;
                }
                sizes.insert(by_def.len());
            }
            let expected_size = match (dim, level) {
                (1, 2) => 1,
                (1, _) => 3,
                (2, 2) => 7,
                _ => 27,
            };
            out.push(check(
                format!("interaction lists d={dim} level {level}"),
                mismatches == 0 && sizes == BTreeSet::from([expected_size]),
                format!("{mismatches} boxes differ from the offset rule, list sizes {sizes:?}"),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for suite in Suite::ALL {
            let rep = run_suite(suite).unwrap();
            assert!(rep.passed(), "{rep}");
            assert!(!rep.checks.is_empty());
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn offset_rule_detects_a_wrong_list() {
        let tree = IndexTree::build(3, 1, 1).unwrap();
        let rule = interaction_by_offsets(&tree, 3, 2);
        assert!(!rule.contains(&3));
        assert_eq!(rule, BTreeSet::from([0, 4, 5]));
    }
}
