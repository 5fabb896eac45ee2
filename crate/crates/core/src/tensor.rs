//! Dense column-major tensors.
//!
//! Layer data is laid out channel-first: a 1D layer is `alpha x n` and a 2D
//! layer is `alpha x n1 x n2`, with the channel index varying fastest in
//! memory. Every reshape reinterprets the extents without moving data.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type used by tensors, layers and training.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Precision tag used by the on-disk formats (bytes per scalar).
    const BYTES: u8;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const BYTES: u8 = 4;
}

impl Real for f64 {
    const BYTES: u8 = 8;
}

/// Boundary treatment for spatial padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Periodic,
    Zero,
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Padding::Periodic),
            "zero" => Ok(Padding::Zero),
            other => Err(Error::config(format!("unknown padding '{other}'"))),
        }
    }
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Padding::Periodic => "periodic",
            Padding::Zero => "zero",
        })
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// A one-axis tensor of shape `[n]`.
    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// A vector, regarded as `1 x n`.
    pub fn row(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Column-major `Reshape[n1, n2]`.
    pub fn reshape(&self, n1: usize, n2: usize) -> Result<Self> {
        self.clone().into_shape(vec![n1, n2])
    }

    /// Reinterprets the extents, keeping the element order.
    pub fn into_shape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Column-major linear index of a multi-index.
    pub fn index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0;
        let mut stride = 1;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            debug_assert!(i < e);
            lin += i * stride;
            stride *= e;
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.index(idx)]
    }

    /// `ReshapeM[a, r, n1, n2]`: `(a^2 r) x n1 x n2` to `r x (a n1) x (a n2)`.
    ///
    /// Fiber `t[., j, k]` is read column-major as an `r x a x a` block and
    /// written at spatial block `(j, k)`.
    pub fn reshape_m_2d(&self, a: usize, r: usize, n1: usize, n2: usize) -> Result<Self> {
        self.expect_shape(&[a * a * r, n1, n2], "ReshapeM")?;
        let mut out = vec![T::zero(); self.data.len()];
        let (big1, fiber) = (a * n1, a * a * r);
        for k in 0..n2 {
            for j in 0..n1 {
                let src = fiber * (j + n1 * k);
                for a2 in 0..a {
                    for a1 in 0..a {
                        let dst = r * ((j * a + a1) + big1 * (k * a + a2));
                        let s = src + r * (a1 + a * a2);
                        out[dst..dst + r].copy_from_slice(&self.data[s..s + r]);
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![r, a * n1, a * n2],
            data: out,
        })
    }

    /// `ReshapeT[a, r, n1, n2]`, the inverse of [`Tensor::reshape_m_2d`].
    pub fn reshape_t_2d(&self, a: usize, r: usize, n1: usize, n2: usize) -> Result<Self> {
        self.expect_shape(&[r, a * n1, a * n2], "ReshapeT")?;
        let mut out = vec![T::zero(); self.data.len()];
        let (big1, fiber) = (a * n1, a * a * r);
        for k in 0..n2 {
            for j in 0..n1 {
                let dst = fiber * (j + n1 * k);
                for a2 in 0..a {
                    for a1 in 0..a {
                        let src = r * ((j * a + a1) + big1 * (k * a + a2));
                        let d = dst + r * (a1 + a * a2);
                        out[d..d + r].copy_from_slice(&self.data[src..src + r]);
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![a * a * r, n1, n2],
            data: out,
        })
    }

    /// Pads every spatial axis (all axes after the channel axis) by
    /// `amounts[axis]` on both sides.
    pub fn pad(&self, mode: Padding, amounts: &[usize]) -> Result<Self> {
        let spatial = &self.shape[1.min(self.shape.len())..];
        if self.shape.len() < 2 || amounts.len() != spatial.len() || spatial.len() > 2 {
            return Err(Error::shape(format!(
                "pad expects channel x 1 or 2 spatial axes with one amount each, got {:?} / {amounts:?}",
                self.shape
            )));
        }
        let alpha = self.shape[0];
        let (n1, n2) = (spatial[0], spatial.get(1).copied().unwrap_or(1));
        let (p1, p2) = (amounts[0], amounts.get(1).copied().unwrap_or(0));
        let (m1, m2) = (n1 + 2 * p1, n2 + 2 * p2);
        let mut out = vec![T::zero(); alpha * m1 * m2];
        for q2 in 0..m2 {
            let s2 = source_index(q2, p2, n2, mode);
            let Some(s2) = s2 else { continue };
            for q1 in 0..m1 {
                let Some(s1) = source_index(q1, p1, n1, mode) else {
                    continue;
                };
                let src = alpha * (s1 + n1 * s2);
                let dst = alpha * (q1 + m1 * q2);
                out[dst..dst + alpha].copy_from_slice(&self.data[src..src + alpha]);
            }
        }
        let mut shape = vec![alpha, m1];
        if spatial.len() == 2 {
            shape.push(m2);
        }
        Ok(Tensor { shape, data: out })
    }

    /// Cyclic shift of the spatial axes: `out[c, (j + s) mod n] = in[c, j]`.
    pub fn roll(&self, shifts: &[isize]) -> Result<Self> {
        let spatial = &self.shape[1.min(self.shape.len())..];
        if self.shape.len() < 2 || shifts.len() != spatial.len() || spatial.len() > 2 {
            return Err(Error::shape(format!(
                "roll expects one shift per spatial axis, got {:?} / {shifts:?}",
                self.shape
            )));
        }
        let alpha = self.shape[0];
        let (n1, n2) = (spatial[0], spatial.get(1).copied().unwrap_or(1));
        let (s1, s2) = (shifts[0], shifts.get(1).copied().unwrap_or(0));
        let mut out = vec![T::zero(); self.data.len()];
        for j2 in 0..n2 {
            let d2 = (j2 as isize + s2).rem_euclid(n2 as isize) as usize;
            for j1 in 0..n1 {
                let d1 = (j1 as isize + s1).rem_euclid(n1 as isize) as usize;
                let src = alpha * (j1 + n1 * j2);
                let dst = alpha * (d1 + n1 * d2);
                out[dst..dst + alpha].copy_from_slice(&self.data[src..src + alpha]);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    fn expect_shape(&self, want: &[usize], op: &str) -> Result<()> {
        if self.shape != want {
            return Err(Error::shape(format!(
                "{op} expects shape {want:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn source_index(q: usize, pad: usize, n: usize, mode: Padding) -> Option<usize> {
    let j = q as isize - pad as isize;
    match mode {
        Padding::Periodic => Some(j.rem_euclid(n as isize) as usize),
        Padding::Zero => (0..n as isize).contains(&j).then_some(j as usize),
    }
}

/// Moves a `(2^d r) x n..` layer of per-box child coefficients onto the finer
/// grid `r x 2n..`: column-major `Reshape` for d = 1 and `ReshapeM[2, r, ..]`
/// for d = 2.
pub fn spread_children<T: Real>(t: &Tensor<T>, a: usize, r: usize, d: usize) -> Result<Tensor<T>> {
    match d {
        1 => {
            let n = t.shape().get(1).copied().unwrap_or(0);
            t.clone().into_shape(vec![r, a * n])
        }
        2 => {
            let s = t.shape();
            if s.len() != 3 {
                return Err(Error::shape(format!("expected a 3-tensor, got {s:?}")));
            }
            t.reshape_m_2d(a, r, s[1], s[2])
        }
        _ => Err(Error::shape(format!("unsupported dimension {d}"))),
    }
}

/// Inverse of [`spread_children`].
pub fn gather_children<T: Real>(t: &Tensor<T>, a: usize, r: usize, d: usize) -> Result<Tensor<T>> {
    match d {
        1 => {
            let n = t.shape().get(1).copied().unwrap_or(0);
            if n % a != 0 {
                return Err(Error::shape(format!("extent {n} not divisible by {a}")));
            }
            t.clone().into_shape(vec![a * r, n / a])
        }
        2 => {
            let s = t.shape();
            if s.len() != 3 || !s[1].is_multiple_of(a) || !s[2].is_multiple_of(a) {
                return Err(Error::shape(format!("cannot gather {a}-blocks from {s:?}")));
            }
            t.reshape_t_2d(a, r, s[1] / a, s[2] / a)
        }
        _ => Err(Error::shape(format!("unsupported dimension {d}"))),
    }
}
