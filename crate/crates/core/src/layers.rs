//! Locally connected and convolutional layers.
//!
//! A layer maps `alpha x Nx` to `alpha' x Nx'` (per spatial axis in 2D):
//!
//! ```text
//! out[c', i] = act( sum_{t, c} W[c', c; i, t] * in_padded[c, i*s + t] + b[c', i] )
//! ```
//!
//! With local sharing every output position owns its weights; with
//! convolutional sharing `W` and `b` are independent of `i`. One-dimensional
//! layers are stored as two-dimensional ones whose second axis has extent one.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// `s = w = Nx / Nx'`: block-diagonal, downsampling.
    Restriction,
    /// `s = 1`, `Nx' = Nx`, odd `w`: banded, padded.
    Kernel,
    /// `s = w = 1`: channel mixing per position.
    Interpolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sharing {
    Local,
    Convolutional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation output; `relu'(0) = 0`.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub sharing: Sharing,
    pub dims: usize,
    /// Input spatial extent per axis (second entry is 1 in 1D).
    pub nx: [usize; 2],
    pub nx_out: [usize; 2],
    pub alpha: usize,
    pub alpha_out: usize,
    pub window: [usize; 2],
    pub stride: [usize; 2],
    pub activation: Activation,
    pub padding: Padding,
    pub bias: bool,
}

fn square(dims: usize, n: usize) -> [usize; 2] {
    if dims == 2 {
        [n, n]
    } else {
        [n, 1]
    }
}

impl LayerSpec {
    fn base(
        kind: LayerKind,
        dims: usize,
        nx: usize,
        nx_out: usize,
        alpha: usize,
        alpha_out: usize,
    ) -> Self {
        LayerSpec {
            kind,
            sharing: Sharing::Local,
            dims,
            nx: square(dims, nx),
            nx_out: square(dims, nx_out),
            alpha,
            alpha_out,
            window: square(dims, 1),
            stride: square(dims, 1),
            activation: Activation::Linear,
            padding: Padding::Periodic,
            bias: true,
        }
    }

    /// `LCR[.; Nx, alpha, Nx', alpha']`.
    pub fn restriction(
        dims: usize,
        nx: usize,
        alpha: usize,
        nx_out: usize,
        alpha_out: usize,
    ) -> Self {
        let mut spec = Self::base(LayerKind::Restriction, dims, nx, nx_out, alpha, alpha_out);
        let s = nx.checked_div(nx_out).unwrap_or(0);
        spec.window = square(dims, s);
        spec.stride = square(dims, s);
        spec
    }

    /// `LCK[.; Nx, alpha, alpha', w]`.
    pub fn kernel(dims: usize, nx: usize, alpha: usize, alpha_out: usize, w: usize) -> Self {
        let mut spec = Self::base(LayerKind::Kernel, dims, nx, nx, alpha, alpha_out);
        spec.window = square(dims, w);
        spec
    }

    /// `LCI[.; Nx, alpha, alpha']`.
    pub fn interpolation(dims: usize, nx: usize, alpha: usize, alpha_out: usize) -> Self {
        Self::base(LayerKind::Interpolation, dims, nx, nx, alpha, alpha_out)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_sharing(mut self, sharing: Sharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("{:?} layer: {msg}", self.kind)));
        if !(1..=2).contains(&self.dims) {
            return bad(format!("dims must be 1 or 2, got {}", self.dims));
        }
        if self.alpha == 0 || self.alpha_out == 0 {
            return bad("channel counts must be positive".into());
        }
        for axis in 0..2 {
            let (n, n_out, w, s) = (
                self.nx[axis],
                self.nx_out[axis],
                self.window[axis],
                self.stride[axis],
            );
            if n == 0 || n_out == 0 || w == 0 || s == 0 {
                return bad(format!("zero extent on axis {axis}"));
            }
            if axis >= self.dims && (n, n_out, w, s) != (1, 1, 1, 1) {
                return bad(format!("axis {axis} must be trivial in {}D", self.dims));
            }
            match self.kind {
                LayerKind::Restriction => {
                    if n % n_out != 0 || w != n / n_out || s != w {
                        return bad(format!(
                            "needs s = w = Nx/Nx' (Nx={n}, Nx'={n_out}, w={w}, s={s})"
                        ));
                    }
                }
                LayerKind::Kernel => {
                    if n_out != n || s != 1 {
                        return bad("needs s = 1 and Nx' = Nx".into());
                    }
                    if w % 2 == 0 {
                        return bad(format!("window must be odd, got {w}"));
                    }
                }
                LayerKind::Interpolation => {
                    if n_out != n || s != 1 || w != 1 {
                        return bad("needs s = w = 1 and Nx' = Nx".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Padding added on each side of every axis before the window sweep.
    pub fn pad_amount(&self) -> [usize; 2] {
        match self.kind {
            LayerKind::Kernel => [(self.window[0] - 1) / 2, (self.window[1] - 1) / 2],
            _ => [0, 0],
        }
    }

    pub fn patch_len(&self) -> usize {
        self.alpha * self.window[0] * self.window[1]
    }

    pub fn positions(&self) -> usize {
        self.nx_out[0] * self.nx_out[1]
    }

    fn weight_blocks(&self) -> usize {
        match self.sharing {
            Sharing::Local => self.positions(),
            Sharing::Convolutional => 1,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_blocks() * self.alpha_out * self.patch_len()
    }

    pub fn bias_count(&self) -> usize {
        if self.bias {
            self.weight_blocks() * self.alpha_out
        } else {
            0
        }
    }

    /// Weight count (plus biases when requested).
    pub fn param_count(&self, include_bias: bool) -> usize {
        self.weight_count() + if include_bias { self.bias_count() } else { 0 }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![self.alpha, self.nx[0]];
        if self.dims == 2 {
            s.push(self.nx[1]);
        }
        s
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.alpha_out, self.nx_out[0]];
        if self.dims == 2 {
            s.push(self.nx_out[1]);
        }
        s
    }

    /// Flat offset of `W[c_out, c_in; pos, tap]`; `pos` is ignored under
    /// convolutional sharing.
    pub fn weight_index(
        &self,
        c_out: usize,
        c_in: usize,
        pos: [usize; 2],
        tap: [usize; 2],
    ) -> usize {
        let block = match self.sharing {
            Sharing::Local => pos[0] + self.nx_out[0] * pos[1],
            Sharing::Convolutional => 0,
        };
        let p = self.patch_len();
        let k = c_in + self.alpha * (tap[0] + self.window[0] * tap[1]);
        (block * self.alpha_out + c_out) * p + k
    }

    pub fn bias_index(&self, c_out: usize, pos: [usize; 2]) -> usize {
        let block = match self.sharing {
            Sharing::Local => pos[0] + self.nx_out[0] * pos[1],
            Sharing::Convolutional => 0,
        };
        block * self.alpha_out + c_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f64> {
    spec: LayerSpec,
    params: LayerParams<T>,
}

/// Parameter and input gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub input: Tensor<T>,
}

impl<T: Real> Layer<T> {
    /// Zero-initialized layer.
    pub fn new(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let params = LayerParams {
            weights: vec![T::zero(); spec.weight_count()],
            bias: vec![T::zero(); spec.bias_count()],
        };
        Ok(Layer { spec, params })
    }

    pub fn with_params(spec: LayerSpec, params: LayerParams<T>) -> Result<Self> {
        spec.validate()?;
        if params.weights.len() != spec.weight_count() || params.bias.len() != spec.bias_count() {
            return Err(Error::shape(format!(
                "layer expects {} weights and {} biases, got {} and {}",
                spec.weight_count(),
                spec.bias_count(),
                params.weights.len(),
                params.bias.len()
            )));
        }
        Ok(Layer { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &LayerParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams<T> {
        &mut self.params
    }

    pub fn set_weight(
        &mut self,
        c_out: usize,
        c_in: usize,
        pos: [usize; 2],
        tap: [usize; 2],
        value: T,
    ) {
        let i = self.spec.weight_index(c_out, c_in, pos, tap);
        self.params.weights[i] = value;
    }

    pub fn weight(&self, c_out: usize, c_in: usize, pos: [usize; 2], tap: [usize; 2]) -> T {
        self.params.weights[self.spec.weight_index(c_out, c_in, pos, tap)]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.spec.input_shape() {
            return Err(Error::shape(format!(
                "{:?} layer expects input {:?}, got {:?}",
                self.spec.kind,
                self.spec.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn padded<'a>(&self, x: &'a Tensor<T>) -> Result<Cow<'a, [T]>> {
        let p = self.spec.pad_amount();
        if p == [0, 0] {
            return Ok(Cow::Borrowed(x.data()));
        }
        let amounts: &[usize] = if self.spec.dims == 2 { &p } else { &p[..1] };
        Ok(Cow::Owned(x.pad(self.spec.padding, amounts)?.into_data()))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let s = &self.spec;
        let xp = self.padded(x)?;
        let padded_n1 = s.nx[0] + 2 * s.pad_amount()[0];
        let p = s.patch_len();
        let (n1o, n2o) = (s.nx_out[0], s.nx_out[1]);
        let mut out = vec![T::zero(); s.alpha_out * n1o * n2o];
        let mut patch = vec![T::zero(); p];
        for i2 in 0..n2o {
            for i1 in 0..n1o {
                gather_patch(s, &xp, padded_n1, i1, i2, &mut patch);
                let pos = i1 + n1o * i2;
                let block = match s.sharing {
                    Sharing::Local => pos,
                    Sharing::Convolutional => 0,
                };
                let w =
                    &self.params.weights[block * s.alpha_out * p..(block + 1) * s.alpha_out * p];
                let dst = &mut out[pos * s.alpha_out..(pos + 1) * s.alpha_out];
                for (co, o) in dst.iter_mut().enumerate() {
                    let mut z = dot(&w[co * p..(co + 1) * p], &patch);
                    if s.bias {
                        z += self.params.bias[block * s.alpha_out + co];
                    }
                    *o = s.activation.apply(z);
                }
            }
        }
        Tensor::new(s.output_shape(), out)
    }

    /// Gradients of `<upstream, forward(x)>`, recomputing the forward pass.
    pub fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrads<T>> {
        let y = self.forward(x)?;
        let mut gw = vec![T::zero(); self.spec.weight_count()];
        let mut gb = vec![T::zero(); self.spec.bias_count()];
        let gx = self
            .backward_accumulate(x, &y, upstream, &mut gw, &mut gb, true)?
            .expect("input gradient requested");
        Ok(LayerGrads {
            weights: gw,
            bias: gb,
            input: gx,
        })
    }

    /// Adds parameter gradients into `grad_w`/`grad_b` given the forward
    /// input `x` and output `y`; returns the input gradient when asked.
    pub fn backward_accumulate(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        upstream: &Tensor<T>,
        grad_w: &mut [T],
        grad_b: &mut [T],
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.check_input(x)?;
        let s = &self.spec;
        if y.len() != upstream.len() || y.len() != s.alpha_out * s.positions() {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, layer output has {}",
                upstream.len(),
                s.alpha_out * s.positions()
            )));
        }
        if grad_w.len() != s.weight_count() || grad_b.len() != s.bias_count() {
            return Err(Error::shape(
                "gradient buffers do not match layer".to_string(),
            ));
        }
        let xp = self.padded(x)?;
        let pad = s.pad_amount();
        let padded_n1 = s.nx[0] + 2 * pad[0];
        let padded_n2 = s.nx[1] + 2 * pad[1];
        let p = s.patch_len();
        let (n1o, n2o) = (s.nx_out[0], s.nx_out[1]);
        let mut patch = vec![T::zero(); p];
        let mut dpatch = vec![T::zero(); p];
        let mut dxp = if want_input {
            vec![T::zero(); s.alpha * padded_n1 * padded_n2]
        } else {
            Vec::new()
        };
        let mut delta = vec![T::zero(); s.alpha_out];
        for i2 in 0..n2o {
            for i1 in 0..n1o {
                let pos = i1 + n1o * i2;
                let mut any = false;
                for (co, d) in delta.iter_mut().enumerate() {
                    let k = pos * s.alpha_out + co;
                    *d = upstream.data()[k] * s.activation.derivative_from_output(y.data()[k]);
                    any |= *d != T::zero();
                }
                if !any {
                    continue;
                }
                let block = match s.sharing {
                    Sharing::Local => pos,
                    Sharing::Convolutional => 0,
                };
                gather_patch(s, &xp, padded_n1, i1, i2, &mut patch);
                if want_input {
                    dpatch.iter_mut().for_each(|v| *v = T::zero());
                }
                let wbase = block * s.alpha_out * p;
                for (co, &d) in delta.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    if s.bias {
                        grad_b[block * s.alpha_out + co] += d;
                    }
                    let off = wbase + co * p;
                    axpy(d, &patch, &mut grad_w[off..off + p]);
                    if want_input {
                        axpy(d, &self.params.weights[off..off + p], &mut dpatch);
                    }
                }
                if want_input {
                    scatter_patch(s, &mut dxp, padded_n1, i1, i2, &dpatch);
                }
            }
        }
        if !want_input {
            return Ok(None);
        }
        let dx = fold_padding(s, &dxp, padded_n1, padded_n2);
        Ok(Some(Tensor::new(s.input_shape(), dx)?))
    }
}

#[inline]
fn gather_patch<T: Real>(
    s: &LayerSpec,
    xp: &[T],
    padded_n1: usize,
    i1: usize,
    i2: usize,
    patch: &mut [T],
) {
    let run = s.alpha * s.window[0];
    for t2 in 0..s.window[1] {
        let src = s.alpha * (i1 * s.stride[0] + padded_n1 * (i2 * s.stride[1] + t2));
        patch[run * t2..run * (t2 + 1)].copy_from_slice(&xp[src..src + run]);
    }
}

#[inline]
fn scatter_patch<T: Real>(
    s: &LayerSpec,
    dxp: &mut [T],
    padded_n1: usize,
    i1: usize,
    i2: usize,
    dpatch: &[T],
) {
    let run = s.alpha * s.window[0];
    for t2 in 0..s.window[1] {
        let dst = s.alpha * (i1 * s.stride[0] + padded_n1 * (i2 * s.stride[1] + t2));
        for (d, &g) in dxp[dst..dst + run]
            .iter_mut()
            .zip(&dpatch[run * t2..run * (t2 + 1)])
        {
            *d += g;
        }
    }
}

/// Maps a gradient on the padded grid back to the unpadded input.
fn fold_padding<T: Real>(s: &LayerSpec, dxp: &[T], padded_n1: usize, padded_n2: usize) -> Vec<T> {
    let [p1, p2] = s.pad_amount();
    let (n1, n2, a) = (s.nx[0], s.nx[1], s.alpha);
    if p1 == 0 && p2 == 0 {
        return dxp.to_vec();
    }
    let mut dx = vec![T::zero(); a * n1 * n2];
    for q2 in 0..padded_n2 {
        let j2 = q2 as isize - p2 as isize;
        let j2 = match s.padding {
            Padding::Periodic => j2.rem_euclid(n2 as isize) as usize,
            Padding::Zero if (0..n2 as isize).contains(&j2) => j2 as usize,
            Padding::Zero => continue,
        };
        for q1 in 0..padded_n1 {
            let j1 = q1 as isize - p1 as isize;
            let j1 = match s.padding {
                Padding::Periodic => j1.rem_euclid(n1 as isize) as usize,
                Padding::Zero if (0..n1 as isize).contains(&j1) => j1 as usize,
                Padding::Zero => continue,
            };
            let src = a * (q1 + padded_n1 * q2);
            let dst = a * (j1 + n1 * j2);
            for c in 0..a {
                dx[dst + c] += dxp[src + c];
            }
        }
    }
    dx
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = T::zero();
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
