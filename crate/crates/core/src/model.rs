//! Network assembly: the linear H² network, the nonlinear multiscale
//! network in local, convolutional and mixed sharing, and a plain CNN
//! baseline.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::h2::{H2Matrix, IndexTree};
use crate::layers::{Activation, Layer, LayerParams, LayerSpec, Sharing};
use crate::tensor::{gather_children, spread_children, Padding, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SharingMode {
    /// Every layer locally connected.
    Lc,
    /// Every layer convolutional.
    Cnn,
    /// Restrictions, interpolations and the last adjacent layer local;
    /// all other kernel layers convolutional.
    Mixed,
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lc" => Ok(SharingMode::Lc),
            "cnn" => Ok(SharingMode::Cnn),
            "mixed" => Ok(SharingMode::Mixed),
            other => Err(Error::config(format!("unknown sharing mode '{other}'"))),
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingMode::Lc => "lc",
            SharingMode::Cnn => "cnn",
            SharingMode::Mixed => "mixed",
        })
    }
}

/// Geometry and hyperparameters of a multiscale network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub dim: usize,
    /// Points per axis, `N = 2^L m`.
    pub n: usize,
    pub levels: usize,
    pub leaf_size: usize,
    pub rank: usize,
    /// Kernel layers per level and in the adjacent branch.
    pub k_layers: usize,
    pub sharing: SharingMode,
    pub padding: Padding,
    pub adjacent_band: usize,
    /// Interaction band at level 2.
    pub coarse_band: usize,
    /// Interaction band at levels above 2.
    pub band: usize,
    /// Nonlinearity used on the kernel layers.
    pub activation: Activation,
    /// Activation of the level restrictions and intermediate interpolations.
    pub transfer_activation: Activation,
    pub init_std: f64,
    pub bias: bool,
}

impl NetworkConfig {
    /// One-dimensional defaults: cnn sharing, periodic padding, bands
    /// 1 / 2 / 3, relu, `sigma_init = 0.02`, biases on.
    pub fn new_1d(levels: usize, leaf_size: usize, rank: usize, k_layers: usize) -> Self {
        NetworkConfig {
            dim: 1,
            n: leaf_size << levels,
            levels,
            leaf_size,
            rank,
            k_layers,
            sharing: SharingMode::Cnn,
            padding: Padding::Periodic,
            adjacent_band: 1,
            coarse_band: 2,
            band: 3,
            activation: Activation::Relu,
            transfer_activation: Activation::Relu,
            init_std: 0.02,
            bias: true,
        }
    }

    pub fn new_2d(levels: usize, leaf_size: usize, rank: usize, k_layers: usize) -> Self {
        NetworkConfig {
            dim: 2,
            ..Self::new_1d(levels, leaf_size, rank, k_layers)
        }
    }

    pub fn with_sharing(mut self, sharing: SharingMode) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    /// Interaction band at `level`.
    pub fn interaction_band(&self, level: usize) -> usize {
        if level == 2 {
            self.coarse_band
        } else {
            self.band
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dim) {
            return Err(Error::config(format!(
                "dim must be 1 or 2, got {}",
                self.dim
            )));
        }
        if self.levels < 3 {
            return Err(Error::config(format!(
                "L must be at least 3, got {}",
                self.levels
            )));
        }
        if self.leaf_size == 0 || self.k_layers == 0 {
            return Err(Error::config("m and K must be positive"));
        }
        if self.n != self.leaf_size << self.levels {
            return Err(Error::config(format!(
                "N = {} does not equal 2^L m = {}",
                self.n,
                self.leaf_size << self.levels
            )));
        }
        if self.rank == 0 {
            return Err(Error::config("r must be positive"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be finite and non-negative"));
        }
        Ok(())
    }

    fn leaf_channels(&self) -> usize {
        self.leaf_size.pow(self.dim as u32)
    }

    fn sharing_for(&self, role: Role) -> Sharing {
        match (self.sharing, role) {
            (SharingMode::Lc, _) => Sharing::Local,
            (SharingMode::Cnn, _) => Sharing::Convolutional,
            (SharingMode::Mixed, Role::Transfer | Role::LastAdjacent) => Sharing::Local,
            (SharingMode::Mixed, Role::Kernel) => Sharing::Convolutional,
        }
    }
}

#[derive(Clone, Copy)]
enum Role {
    Transfer,
    Kernel,
    LastAdjacent,
}

/// A stack of kernel layers: lifting `1 -> c`, `hidden` layers `c -> c`,
/// projection `c -> 1`, all convolutional with periodic padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainCnnConfig {
    pub dim: usize,
    pub n: usize,
    pub hidden_layers: usize,
    pub channels: usize,
    pub window: usize,
    pub activation: Activation,
    pub init_std: f64,
    pub bias: bool,
}

impl PlainCnnConfig {
    pub fn new_1d(n: usize, hidden_layers: usize, channels: usize, window: usize) -> Self {
        PlainCnnConfig {
            dim: 1,
            n,
            hidden_layers,
            channels,
            window,
            activation: Activation::Relu,
            init_std: 0.02,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Multiscale(NetworkConfig),
    PlainCnn(PlainCnnConfig),
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match self {
            Architecture::Multiscale(c) => c.dim,
            Architecture::PlainCnn(c) => c.dim,
        }
    }

    /// Points per axis.
    pub fn n(&self) -> usize {
        match self {
            Architecture::Multiscale(c) => c.n,
            Architecture::PlainCnn(c) => c.n,
        }
    }

    pub fn num_points(&self) -> usize {
        self.n().pow(self.dim() as u32)
    }

    fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        match self {
            Architecture::Multiscale(c) => multiscale_specs(c),
            Architecture::PlainCnn(c) => plain_specs(c),
        }
    }
}

/// Positions of the multiscale layers inside the flat construction-order
/// list: adjacent, first restriction, level restrictions (fine to coarse),
/// kernel stacks (coarse to fine), interpolations (coarse to fine), final
/// interpolation.
#[derive(Debug, Clone, Copy)]
struct Layout {
    k: usize,
    levels: usize,
}

impl Layout {
    fn adjacent(&self, k: usize) -> usize {
        k
    }
    fn first_restriction(&self) -> usize {
        self.k
    }
    fn restriction(&self, level: usize) -> usize {
        self.k + 1 + (self.levels - 1 - level)
    }
    fn kernel(&self, level: usize, k: usize) -> usize {
        self.k + 1 + (self.levels - 2) + (level - 2) * self.k + k
    }
    fn interpolation(&self, level: usize) -> usize {
        self.k + 1 + (self.levels - 2) + (self.levels - 1) * self.k + (level - 2)
    }
    fn final_interpolation(&self) -> usize {
        self.interpolation(self.levels)
    }
    #[cfg(test)]
    fn len(&self) -> usize {
        self.final_interpolation() + 1
    }
}

fn multiscale_specs(c: &NetworkConfig) -> Result<Vec<LayerSpec>> {
    c.validate()?;
    let (d, l, r, kk) = (c.dim, c.levels, c.rank, c.k_layers);
    let md = c.leaf_channels();
    let nl = 1usize << l;
    let kids = 1usize << d;
    let mut specs = Vec::new();
    for k in 0..kk {
        let last = k + 1 == kk;
        let (act, role) = if last {
            (Activation::Linear, Role::LastAdjacent)
        } else {
            (c.activation, Role::Kernel)
        };
        specs.push(
            LayerSpec::kernel(d, nl, md, md, 2 * c.adjacent_band + 1)
                .with_activation(act)
                .with_sharing(c.sharing_for(role)),
        );
    }
    specs
        .push(LayerSpec::restriction(d, c.n, 1, nl, r).with_sharing(c.sharing_for(Role::Transfer)));
    for level in (2..l).rev() {
        specs.push(
            LayerSpec::restriction(d, 1 << (level + 1), r, 1 << level, r)
                .with_activation(c.transfer_activation)
                .with_sharing(c.sharing_for(Role::Transfer)),
        );
    }
    for level in 2..=l {
        for _ in 0..kk {
            specs.push(
                LayerSpec::kernel(d, 1 << level, r, r, 2 * c.interaction_band(level) + 1)
                    .with_activation(c.activation)
                    .with_sharing(c.sharing_for(Role::Kernel)),
            );
        }
    }
    for level in 2..l {
        specs.push(
            LayerSpec::interpolation(d, 1 << level, r, kids * r)
                .with_activation(c.transfer_activation)
                .with_sharing(c.sharing_for(Role::Transfer)),
        );
    }
    specs.push(LayerSpec::interpolation(d, nl, r, md).with_sharing(c.sharing_for(Role::Transfer)));
    Ok(specs
        .into_iter()
        .map(|s| s.with_padding(c.padding).with_bias(c.bias))
        .collect())
}

fn plain_specs(c: &PlainCnnConfig) -> Result<Vec<LayerSpec>> {
    if c.window.is_multiple_of(2) {
        return Err(Error::config(format!(
            "window must be odd, got {}",
            c.window
        )));
    }
    if c.channels == 0 || c.n == 0 || !(1..=2).contains(&c.dim) {
        return Err(Error::config(
            "plain CNN needs positive channels and N, dim 1 or 2",
        ));
    }
    let mk = |a: usize, b: usize, act: Activation| {
        LayerSpec::kernel(c.dim, c.n, a, b, c.window)
            .with_sharing(Sharing::Convolutional)
            .with_activation(act)
            .with_bias(c.bias)
    };
    let mut specs = vec![mk(1, c.channels, c.activation)];
    for _ in 0..c.hidden_layers {
        specs.push(mk(c.channels, c.channels, c.activation));
    }
    specs.push(mk(c.channels, 1, Activation::Linear));
    Ok(specs)
}

/// Layer inputs and outputs recorded by [`Network::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T> Trace<T> {
    /// Recorded input of layer `i`.
    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.inputs[i]
    }

    /// Recorded output of layer `i`.
    pub fn output(&self, i: usize) -> &Tensor<T> {
        &self.outputs[i]
    }
}

/// An ordered list of layers plus the glue that wires them together.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f64> {
    arch: Architecture,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    /// Network with all parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let layers = arch
            .layer_specs()?
            .into_iter()
            .map(Layer::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { arch, layers })
    }

    /// Weights drawn from `Normal(0, init_std)` in construction order,
    /// biases zero.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        let std = match &arch {
            Architecture::Multiscale(c) => c.init_std,
            Architecture::PlainCnn(c) => c.init_std,
        };
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(arch)?;
        for layer in &mut net.layers {
            for w in &mut layer.params_mut().weights {
                *w = T::lit(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from stored parameters, checking every size.
    pub fn from_params(arch: Architecture, params: Vec<LayerParams<T>>) -> Result<Self> {
        let specs = arch.layer_specs()?;
        if specs.len() != params.len() {
            return Err(Error::shape(format!(
                "architecture has {} layers, got parameters for {}",
                specs.len(),
                params.len()
            )));
        }
        let layers = specs
            .into_iter()
            .zip(params)
            .map(|(s, p)| Layer::with_params(s, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_points(&self) -> usize {
        self.arch.num_points()
    }

    /// Parameter count, optionally with biases.
    pub fn count_params(&self, include_bias: bool) -> usize {
        self.layers
            .iter()
            .map(|l| l.spec().param_count(include_bias))
            .sum()
    }

    /// Zeroed gradient buffers congruent with the parameters.
    pub fn zero_grads(&self) -> Vec<LayerParams<T>> {
        self.layers
            .iter()
            .map(|l| LayerParams {
                weights: vec![T::zero(); l.params().weights.len()],
                bias: vec![T::zero(); l.params().bias.len()],
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&LayerParams<T>> {
        self.layers.iter().map(|l| l.params()).collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let p = l.params();
                Layer::with_params(
                    l.spec().clone(),
                    LayerParams {
                        weights: p
                            .weights
                            .iter()
                            .map(|&w| U::lit(w.to_f64_lossy()))
                            .collect(),
                        bias: p.bias.iter().map(|&w| U::lit(w.to_f64_lossy())).collect(),
                    },
                )
                .expect("same spec")
            })
            .collect();
        Network {
            arch: self.arch.clone(),
            layers,
        }
    }

    fn canonical(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.len() != self.num_points() {
            return Err(Error::shape(format!(
                "network acts on {} points, input has {}",
                self.num_points(),
                x.len()
            )));
        }
        let n = self.arch.n();
        let shape = if self.arch.dim() == 1 {
            vec![1, n]
        } else {
            vec![1, n, n]
        };
        x.clone().into_shape(shape)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x)?.0)
    }

    /// Forward pass that also records every layer's input and output.
    /// The output has the shape of `x`.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let v = self.canonical(x)?;
        let mut tr = Trace {
            inputs: vec![Tensor::zeros(vec![0]); self.layers.len()],
            outputs: vec![Tensor::zeros(vec![0]); self.layers.len()],
        };
        let mut run = |idx: usize, input: Tensor<T>| -> Result<Tensor<T>> {
            let y = self.layers[idx].forward(&input)?;
            tr.inputs[idx] = input;
            tr.outputs[idx] = y.clone();
            Ok(y)
        };
        let out = match &self.arch {
            Architecture::PlainCnn(_) => {
                let mut h = v;
                for i in 0..self.layers.len() {
                    h = run(i, h)?;
                }
                h
            }
            Architecture::Multiscale(c) => {
                let lay = Layout {
                    k: c.k_layers,
                    levels: c.levels,
                };
                let (l, r, d) = (c.levels, c.rank, c.dim);

                let mut a = to_leaf(&v, c)?;
                for k in 0..c.k_layers {
                    a = run(lay.adjacent(k), a)?;
                }
                let u_ad = from_leaf(&a, c)?;

                let mut xi = vec![Tensor::zeros(vec![0]); l + 1];
                xi[l] = run(lay.first_restriction(), v)?;
                for level in (2..l).rev() {
                    xi[level] = run(lay.restriction(level), xi[level + 1].clone())?;
                }
                let mut zeta = vec![Tensor::zeros(vec![0]); l + 1];
                for level in 2..=l {
                    let mut z = xi[level].clone();
                    for k in 0..c.k_layers {
                        z = run(lay.kernel(level, k), z)?;
                    }
                    zeta[level] = z;
                }
                let mut chi = zeta[2].clone();
                for level in 2..l {
                    let y = run(lay.interpolation(level), chi)?;
                    chi = spread_children(&y, 2, r, d)?.add(&zeta[level + 1])?;
                }
                let y = run(lay.final_interpolation(), chi)?;
                from_leaf(&y, c)?.add(&u_ad)?
            }
        };
        Ok((out.into_shape(x.shape().to_vec())?, tr))
    }

    /// Accumulates the parameter gradients of `<upstream, forward(x)>` into
    /// `grads` using a recorded trace. Returns the input gradient.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        upstream: &Tensor<T>,
        grads: &mut [LayerParams<T>],
    ) -> Result<Tensor<T>> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape("gradient buffers do not match network"));
        }
        let g = self.canonical(upstream)?;
        let mut step = |idx: usize, gy: &Tensor<T>| -> Result<Tensor<T>> {
            let gp = &mut grads[idx];
            Ok(self.layers[idx]
                .backward_accumulate(
                    &trace.inputs[idx],
                    &trace.outputs[idx],
                    gy,
                    &mut gp.weights,
                    &mut gp.bias,
                    true,
                )?
                .expect("input gradient requested"))
        };
        let gx = match &self.arch {
            Architecture::PlainCnn(_) => {
                let mut h = g;
                for i in (0..self.layers.len()).rev() {
                    h = step(i, &h)?;
                }
                h
            }
            Architecture::Multiscale(c) => {
                let lay = Layout {
                    k: c.k_layers,
                    levels: c.levels,
                };
                let (l, r, d) = (c.levels, c.rank, c.dim);

                let mut ga = to_leaf(&g, c)?;
                for k in (0..c.k_layers).rev() {
                    ga = step(lay.adjacent(k), &ga)?;
                }
                let mut gv = from_leaf(&ga, c)?;

                let mut gzeta = vec![Tensor::zeros(vec![0]); l + 1];
                let mut gchi = step(lay.final_interpolation(), &to_leaf(&g, c)?)?;
                for level in (2..l).rev() {
                    gzeta[level + 1] = gchi.clone();
                    let gy = gather_children(&gchi, 2, r, d)?;
                    gchi = step(lay.interpolation(level), &gy)?;
                }
                gzeta[2] = gchi;

                let mut gxi_down: Option<Tensor<T>> = None;
                for (level, gz_level) in gzeta.iter().enumerate().skip(2) {
                    let mut gz = gz_level.clone();
                    for k in (0..c.k_layers).rev() {
                        gz = step(lay.kernel(level, k), &gz)?;
                    }
                    let gxi = match gxi_down.take() {
                        Some(extra) => gz.add(&extra)?,
                        None => gz,
                    };
                    if level < l {
                        gxi_down = Some(step(lay.restriction(level), &gxi)?);
                    } else {
                        gv = gv.add(&step(lay.first_restriction(), &gxi)?)?;
                    }
                }
                gv
            }
        };
        gx.into_shape(upstream.shape().to_vec())
    }
}

/// `v` (`1 x N..`) to per-leaf channels (`m^d x 2^L..`).
fn to_leaf<T: Real>(v: &Tensor<T>, c: &NetworkConfig) -> Result<Tensor<T>> {
    let nl = 1usize << c.levels;
    let v = v.clone().into_shape(if c.dim == 1 {
        vec![1, c.n]
    } else {
        vec![1, c.n, c.n]
    })?;
    if c.dim == 1 {
        v.into_shape(vec![c.leaf_size, nl])
    } else {
        v.reshape_t_2d(c.leaf_size, 1, nl, nl)
    }
}

/// Inverse of [`to_leaf`].
fn from_leaf<T: Real>(t: &Tensor<T>, c: &NetworkConfig) -> Result<Tensor<T>> {
    let nl = 1usize << c.levels;
    if c.dim == 1 {
        t.clone().into_shape(vec![1, c.n])
    } else {
        t.reshape_m_2d(c.leaf_size, 1, nl, nl)
    }
}

/// Randomly initialized multiscale network.
pub fn build_mnn_h2<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    Network::random(Architecture::Multiscale(cfg.clone()), seed)
}

/// Plain 1D convolutional baseline with `layers` hidden layers.
pub fn build_plain_cnn<T: Real>(
    layers: usize,
    channels: usize,
    window: usize,
    n: usize,
    seed: u64,
) -> Result<Network<T>> {
    Network::random(
        Architecture::PlainCnn(PlainCnnConfig::new_1d(n, layers, channels, window)),
        seed,
    )
}

pub fn count_params<T: Real>(net: &Network<T>, include_bias: bool) -> usize {
    net.count_params(include_bias)
}

/// Configuration of the linear network that realizes `h2` exactly: `K = 1`,
/// local sharing, linear activations.
pub fn linear_config(tree: &IndexTree, rank: usize) -> NetworkConfig {
    NetworkConfig {
        dim: tree.dim(),
        n: tree.points_per_axis(),
        levels: tree.levels(),
        leaf_size: tree.leaf_size(),
        rank,
        k_layers: 1,
        sharing: SharingMode::Lc,
        padding: Padding::Periodic,
        adjacent_band: tree.adjacent_band(),
        coarse_band: tree.interaction_band(2),
        band: tree.interaction_band(3),
        activation: Activation::Linear,
        transfer_activation: Activation::Linear,
        init_std: 0.0,
        bias: true,
    }
}

/// Loads the blocks of `h2` into a linear network whose forward pass equals
/// the H² matvec.
pub fn build_linear_h2_nn(h2: &H2Matrix) -> Result<Network<f64>> {
    let t = h2.tree();
    let cfg = linear_config(t, h2.rank());
    let lay = Layout {
        k: 1,
        levels: cfg.levels,
    };
    let mut net = Network::<f64>::zeros(Architecture::Multiscale(cfg.clone()))?;
    let (l, r, d) = (cfg.levels, cfg.rank, cfg.dim);
    let md = t.leaf_points();
    let pos = |level: usize, i: usize| t.coords(level, i);
    let tap = |level: usize, i: usize, j: usize, band: usize| {
        let o = t.signed_offset(level, i, j, band);
        let b = band as isize;
        let second = if d == 2 { (o[1] + b) as usize } else { 0 };
        [(o[0] + b) as usize, second]
    };
    let layers = net.layers_mut();

    let adj = &mut layers[lay.adjacent(0)];
    for i in 0..t.num_boxes(l) {
        for (k, &j) in t.neighbors(l, i).iter().enumerate() {
            let blk = h2.adjacent(i, k);
            let tp = tap(l, i, j, t.adjacent_band());
            for a in 0..md {
                for ap in 0..md {
                    adj.set_weight(ap, a, pos(l, i), tp, blk[(ap, a)]);
                }
            }
        }
    }

    let first = &mut layers[lay.first_restriction()];
    for i in 0..t.num_boxes(l) {
        let v = h2.v_leaf(i);
        for a in 0..md {
            let t1 = a % cfg.leaf_size;
            let t2 = a / cfg.leaf_size;
            for cp in 0..r {
                first.set_weight(cp, 0, pos(l, i), [t1, t2], v[(a, cp)]);
            }
        }
    }

    for level in 2..l {
        let layer = &mut layers[lay.restriction(level)];
        for i in 0..t.num_boxes(level) {
            for (ch, j) in t.children(level, i).into_iter().enumerate() {
                let cm = h2.transfer_c(level, j);
                for c in 0..r {
                    for cp in 0..r {
                        layer.set_weight(cp, c, pos(level, i), [ch & 1, ch >> 1], cm[(c, cp)]);
                    }
                }
            }
        }
    }

    for level in 2..=l {
        let layer = &mut layers[lay.kernel(level, 0)];
        let band = t.interaction_band(level);
        for i in 0..t.num_boxes(level) {
            for (k, &j) in t.interactions(level, i).iter().enumerate() {
                let mm = h2.interaction(level, i, k);
                let tp = tap(level, i, j, band);
                for c in 0..r {
                    for cp in 0..r {
                        layer.set_weight(cp, c, pos(level, i), tp, mm[(cp, c)]);
                    }
                }
            }
        }
    }

    for level in 2..l {
        let layer = &mut layers[lay.interpolation(level)];
        for i in 0..t.num_boxes(level) {
            for (ch, j) in t.children(level, i).into_iter().enumerate() {
                let bm = h2.transfer_b(level, j);
                for c in 0..r {
                    for cp in 0..r {
                        layer.set_weight(cp + r * ch, c, pos(level, i), [0, 0], bm[(cp, c)]);
                    }
                }
            }
        }
    }

    let fin = &mut layers[lay.final_interpolation()];
    for i in 0..t.num_boxes(l) {
        let u = h2.u_leaf(i);
        for a in 0..md {
            for c in 0..r {
                fin.set_weight(a, c, pos(l, i), [0, 0], u[(a, c)]);
            }
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::h2::random_h2;
    use rand::Rng;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn random_input(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let shape = vec![n; d];
        let data = (0..n.pow(d as u32))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_network_reproduces_matvec() {
        let cases = [
            (1, 3, 5, 2),
            (1, 4, 5, 4),
            (1, 5, 5, 2),
            (2, 3, 4, 2),
            (2, 3, 4, 4),
        ];
        for (d, l, m, r) in cases {
            let tree = IndexTree::build(l, m, d).unwrap();
            let h2 = random_h2(&tree, r, 100 + l as u64).unwrap();
            let net = build_linear_h2_nn(&h2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..20 {
                let v = random_input(tree.points_per_axis(), d, &mut rng);
                let want = h2.matvec(&v).unwrap();
                let got = net.forward(&v).unwrap();
                let err = rel(got.data(), want.data());
                assert!(err <= 1e-12, "d={d} L={l} r={r}: {err}");
            }
        }
    }

    #[test]
    fn identity_h2_gives_identity_network() {
        for d in [1, 2] {
            let tree = IndexTree::build(3, 2, d).unwrap();
            let net = build_linear_h2_nn(&H2Matrix::identity(&tree, 2).unwrap()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let v = random_input(tree.points_per_axis(), d, &mut rng);
            assert_eq!(net.forward(&v).unwrap(), v);
        }
    }

    #[test]
    fn linear_override_matches_loaded_topology() {
        let tree = IndexTree::build(4, 5, 1).unwrap();
        let loaded = build_linear_h2_nn(&random_h2(&tree, 3, 0).unwrap()).unwrap();
        let mut cfg = NetworkConfig::new_1d(4, 5, 3, 1).with_sharing(SharingMode::Lc);
        cfg.activation = Activation::Linear;
        cfg.transfer_activation = Activation::Linear;
        let built: Network = build_mnn_h2(&cfg, 0).unwrap();
        let specs = |n: &Network| {
            n.layers()
                .iter()
                .map(|l| l.spec().clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(specs(&loaded), specs(&built));
    }

    #[test]
    fn seeded_initialization_is_deterministic() {
        let cfg = NetworkConfig::new_1d(4, 5, 6, 2);
        let a: Network = build_mnn_h2(&cfg, 3).unwrap();
        let b: Network = build_mnn_h2(&cfg, 3).unwrap();
        let c: Network = build_mnn_h2(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .layers()
            .iter()
            .all(|l| l.params().bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn activation_pattern() {
        let cfg = NetworkConfig::new_1d(4, 5, 6, 3);
        let net: Network = build_mnn_h2(&cfg, 0).unwrap();
        let lay = Layout { k: 3, levels: 4 };
        let acts: Vec<Activation> = net.layers().iter().map(|l| l.spec().activation).collect();
        let linear = [
            lay.adjacent(2),
            lay.first_restriction(),
            lay.final_interpolation(),
        ];
        for (i, a) in acts.iter().enumerate() {
            let want = if linear.contains(&i) {
                Activation::Linear
            } else {
                Activation::Relu
            };
            assert_eq!(*a, want, "layer {i}");
        }
        assert_eq!(lay.len(), net.layers().len());
    }

    #[test]
    fn cnn_count_matches_reference_configuration() {
        let cfg = NetworkConfig::new_1d(6, 5, 6, 5);
        assert_eq!(cfg.n, 320);
        let net: Network = build_mnn_h2(&cfg, 0).unwrap();
        assert_eq!(count_params(&net, false), 6951);
        assert_eq!(count_params(&net, true), 7209);
    }

    #[test]
    fn plain_cnn_count() {
        let net: Network = build_plain_cnn(15, 10, 25, 320, 0).unwrap();
        assert_eq!(count_params(&net, true), 38161);
    }

    #[test]
    fn plain_cnn_linear_scalar() {
        let mut cfg = PlainCnnConfig::new_1d(8, 1, 1, 1);
        cfg.activation = Activation::Linear;
        cfg.init_std = 1.0;
        let mut net: Network = Network::random(Architecture::PlainCnn(cfg), 5).unwrap();
        for (k, layer) in net.layers_mut().iter_mut().enumerate() {
            layer.params_mut().bias[0] = 0.1 * (k as f64 + 1.0);
        }
        let zero = net.forward(&Tensor::row(vec![0.0; 8])).unwrap();
        let one = net.forward(&Tensor::row(vec![1.0; 8])).unwrap();
        let (b, a) = (zero.data()[0], one.data()[0] - zero.data()[0]);
        let x = Tensor::row((0..8).map(|i| i as f64 - 2.5).collect());
        let y = net.forward(&x).unwrap();
        for (xi, yi) in x.data().iter().zip(y.data()) {
            assert!((yi - (a * xi + b)).abs() < 1e-14);
        }
    }

    #[test]
    fn geometry_is_validated() {
        let mut cfg = NetworkConfig::new_1d(4, 5, 6, 2);
        cfg.n = 81;
        assert!(build_mnn_h2::<f64>(&cfg, 0).is_err());
        assert!(build_mnn_h2::<f64>(&NetworkConfig::new_1d(2, 5, 2, 1), 0).is_err());
        // The rank may exceed m^d in a network; only an H2 matrix forbids it.
        assert!(build_mnn_h2::<f64>(&NetworkConfig::new_1d(4, 2, 6, 1), 0).is_ok());
        assert!(build_mnn_h2::<f64>(&NetworkConfig::new_1d(4, 2, 0, 1), 0).is_err());
        assert!(build_plain_cnn::<f64>(1, 1, 4, 8, 0).is_err());
    }
}
