//! Loss, error metric, the Nadam optimizer, minibatch training and
//! finite-difference gradient checking.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerParams};
use crate::model::Network;
use crate::tensor::{Real, Tensor};

/// Paired samples `(v_i, u_i)` on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f64> {
    pub dim: usize,
    pub n: usize,
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        dim: usize,
        n: usize,
        inputs: Vec<Tensor<T>>,
        targets: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::shape(format!(
                "need a positive, equal number of inputs and targets ({} vs {})",
                inputs.len(),
                targets.len()
            )));
        }
        let points = n.pow(dim as u32);
        if inputs.iter().chain(&targets).any(|t| t.len() != points) {
            return Err(Error::shape(format!(
                "every sample must have {points} entries"
            )));
        }
        Ok(Dataset {
            dim,
            n,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// First `count` samples.
    pub fn take(&self, count: usize) -> Self {
        Dataset {
            dim: self.dim,
            n: self.n,
            inputs: self.inputs[..count].to_vec(),
            targets: self.targets[..count].to_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            dim: self.dim,
            n: self.n,
            inputs: self.inputs.iter().map(Tensor::cast).collect(),
            targets: self.targets.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Mean squared error over all entries and its gradient with respect to
/// `pred`, `2 (pred - target) / count`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    let count = T::lit(pred.len() as f64);
    let diff: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| p - t)
        .collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / count;
    let two = T::lit(2.0);
    let grad = diff.into_iter().map(|d| two * d / count).collect();
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// `||pred - target|| / ||target||`.
pub fn rel_l2_error<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    let den: f64 = target.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum();
    if den == 0.0 {
        return Err(Error::numerical("relative error of an all-zero target"));
    }
    let num: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.to_f64_lossy() - t.to_f64_lossy()).powi(2))
        .sum();
    Ok((num / den).sqrt())
}

/// Mean and population standard deviation of a set of per-sample errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn from_samples(errors: &[f64]) -> Self {
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        ErrorStats {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Per-sample relative errors of `net` on `data`.
pub fn sample_errors<T: Real>(net: &Network<T>, data: &Dataset<T>) -> Result<Vec<f64>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| rel_l2_error(&net.forward(&data.inputs[i])?, &data.targets[i]))
        .collect()
}

pub fn evaluate<T: Real>(net: &Network<T>, data: &Dataset<T>) -> Result<ErrorStats> {
    Ok(ErrorStats::from_samples(&sample_errors(net, data)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay of the momentum warm-up schedule.
    pub schedule_decay: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule_decay: 0.004,
        }
    }
}

/// Nesterov-accelerated Adam with the warm-up momentum schedule
/// `mu_t = beta1 (1 - 0.5 * 0.96^(t * decay))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nadam<T> {
    pub config: NadamConfig,
    pub step: u64,
    /// Running product of the momentum schedule.
    pub m_schedule: f64,
    pub m: Vec<LayerParams<T>>,
    pub v: Vec<LayerParams<T>>,
}

impl<T: Real> Nadam<T> {
    pub fn new(config: NadamConfig, net: &Network<T>) -> Self {
        Nadam {
            config,
            step: 0,
            m_schedule: 1.0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    fn mu(&self, t: f64) -> f64 {
        self.config.beta1 * (1.0 - 0.5 * 0.96f64.powf(t * self.config.schedule_decay))
    }

    /// One update of `params` (one entry per layer) from `grads`.
    pub fn update(
        &mut self,
        params: &mut [&mut LayerParams<T>],
        grads: &[LayerParams<T>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as f64;
        let mu_t = self.mu(t);
        let mu_next = self.mu(t + 1.0);
        let sched_new = self.m_schedule * mu_t;
        let sched_next = sched_new * mu_next;
        let g_scale = T::lit(1.0 / (1.0 - sched_new));
        let m_scale = T::lit(1.0 / (1.0 - sched_next));
        let v_scale = T::lit(1.0 / (1.0 - c.beta2.powf(t)));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (w_g, w_m) = (T::lit(1.0 - mu_t), T::lit(mu_next));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

        let apply = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_bar = w_g * (gi * g_scale) + w_m * (m[i] * m_scale);
                p[i] -= lr * m_bar / ((v[i] * v_scale).sqrt() + eps);
            }
        };
        for (l, p) in params.iter_mut().enumerate() {
            let (g, m, v) = (&grads[l], &mut self.m[l], &mut self.v[l]);
            if p.weights.len() != g.weights.len() || p.bias.len() != g.bias.len() {
                return Err(Error::shape(format!(
                    "gradient of layer {l} has the wrong size"
                )));
            }
            apply(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights);
            apply(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        self.m_schedule = sched_new;
        Ok(())
    }

    /// Updates the parameters of `net` in place.
    pub fn step_network(&mut self, net: &mut Network<T>, grads: &[LayerParams<T>]) -> Result<()> {
        let mut params: Vec<&mut LayerParams<T>> = net
            .layers_mut()
            .iter_mut()
            .map(|l| l.params_mut())
            .collect();
        self.update(&mut params, grads)
    }
}

fn add_into<T: Real>(acc: &mut [LayerParams<T>], other: &[LayerParams<T>]) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.weights.iter_mut().zip(&o.weights) {
            *x += *y;
        }
        for (x, y) in a.bias.iter_mut().zip(&o.bias) {
            *x += *y;
        }
    }
}

/// Samples per gradient work unit. Fixed so the reduction order does not
/// depend on the number of threads.
const GRAD_CHUNK: usize = 8;

/// Mean-squared-error loss over `batch` and the gradient of that loss.
pub fn batch_gradient<T: Real>(
    net: &Network<T>,
    data: &Dataset<T>,
    batch: &[usize],
) -> Result<(f64, Vec<LayerParams<T>>)> {
    let scale = T::lit(1.0 / batch.len() as f64);
    let partial: Vec<(f64, Vec<LayerParams<T>>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<_> {
            let mut grads = net.zero_grads();
            let mut loss = 0.0;
            for &i in chunk {
                let (pred, trace) = net.forward_trace(&data.inputs[i])?;
                let (l, g) = mse_loss(&pred, &data.targets[i])?;
                loss += l.to_f64_lossy();
                net.backward(&trace, &g.scale(scale), &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = net.zero_grads();
    for (l, g) in &partial {
        total += l;
        add_into(&mut grads, g);
    }
    Ok((total / batch.len() as f64, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to `ceil(count / 100)`.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub shuffle: bool,
    /// Evaluate errors every this many epochs (and always on the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: None,
            seed: 0,
            shuffle: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn resolved_batch(&self, count: usize) -> Result<usize> {
        let b = self.batch_size.unwrap_or(count.div_ceil(100));
        if b == 0 || b > count {
            return Err(Error::config(format!(
                "batch size {b} must lie in 1..={count}"
            )));
        }
        Ok(b)
    }
}

/// One row of the metric history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train: ErrorStats,
    pub test: Option<ErrorStats>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,eps_train,sigma_train,eps_test,sigma_test";

    pub fn csv_row(&self) -> String {
        let (et, st) = self.test.map_or((f64::NAN, f64::NAN), |s| (s.mean, s.std));
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.loss, self.train.mean, self.train.std, et, st
        )
    }
}

/// Sample order for one epoch; depends only on `(seed, epoch)` so a resumed
/// run sees the same batches.
pub fn epoch_order(count: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Minibatch training state, resumable between epochs.
pub struct Trainer<T> {
    pub net: Network<T>,
    pub optimizer: Nadam<T>,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: Network<T>, optimizer: NadamConfig) -> Self {
        let optimizer = Nadam::new(optimizer, &net);
        Trainer {
            net,
            optimizer,
            epoch: 0,
        }
    }

    pub fn resume(net: Network<T>, optimizer: Nadam<T>, epoch: usize) -> Self {
        Trainer {
            net,
            optimizer,
            epoch,
        }
    }

    fn check_geometry(&self, data: &Dataset<T>) -> Result<()> {
        let arch = self.net.architecture();
        if data.dim != arch.dim() || data.n != arch.n() {
            return Err(Error::config(format!(
                "dataset geometry d={}, N={} does not match network d={}, N={}",
                data.dim,
                data.n,
                arch.dim(),
                arch.n()
            )));
        }
        Ok(())
    }

    /// Runs one epoch and returns the mean training loss.
    pub fn run_epoch(&mut self, data: &Dataset<T>, cfg: &TrainConfig) -> Result<f64> {
        self.check_geometry(data)?;
        let bs = cfg.resolved_batch(data.len())?;
        let order = epoch_order(data.len(), cfg.seed, self.epoch, cfg.shuffle);
        let mut sum = 0.0;
        for batch in order.chunks(bs) {
            let (loss, grads) = batch_gradient(&self.net, data, batch)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss {loss} in epoch {}",
                    self.epoch + 1
                )));
            }
            sum += loss * batch.len() as f64;
            self.optimizer.step_network(&mut self.net, &grads)?;
        }
        self.epoch += 1;
        Ok(sum / data.len() as f64)
    }

    /// Trains until `cfg.epochs` epochs are complete. Metrics are appended
    /// to `metrics` as CSV when given, and `on_epoch` runs after every epoch.
    pub fn train(
        &mut self,
        data: &Dataset<T>,
        test: Option<&Dataset<T>>,
        cfg: &TrainConfig,
        mut metrics: Option<&mut dyn Write>,
        mut on_epoch: impl FnMut(&Trainer<T>) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        self.check_geometry(data)?;
        if let Some(t) = test {
            self.check_geometry(t)?;
        }
        let mut history = Vec::new();
        while self.epoch < cfg.epochs {
            let loss = self.run_epoch(data, cfg)?;
            let every = cfg.eval_every.max(1);
            if self.epoch.is_multiple_of(every) || self.epoch == cfg.epochs {
                let rec = EpochRecord {
                    epoch: self.epoch,
                    loss,
                    train: evaluate(&self.net, data)?,
                    test: test.map(|t| evaluate(&self.net, t)).transpose()?,
                };
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", rec.csv_row())?;
                }
                history.push(rec);
            }
            on_epoch(self)?;
        }
        Ok(history)
    }
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative deviation between analytic and finite-difference
    /// gradients.
    pub max_deviation: f64,
    pub checked: usize,
    /// Probes skipped because the perturbation flipped a relu mask.
    pub skipped: usize,
}

/// Compares analytic parameter gradients of the MSE loss on one sample with
/// central finite differences on a random subset of at least `count`
/// parameters drawn from every layer.
///
/// With the activation masks fixed the loss is quadratic in any single
/// parameter, so the central difference is exact up to roundoff; the step
/// is chosen large enough to keep roundoff small, and probes whose
/// perturbation flips a relu mask are skipped.
pub fn grad_check(
    net: &Network<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (pred, trace) = net.forward_trace(input)?;
    let (_, g) = mse_loss(&pred, target)?;
    let mut grads = net.zero_grads();
    net.backward(&trace, &g, &mut grads)?;
    let gmax = grads
        .iter()
        .flat_map(|p| p.weights.iter().chain(&p.bias))
        .fold(0.0f64, |a, &b| a.max(b.abs()));

    let layers = net.layers().len();
    let per_layer = count.div_ceil(layers).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let h = 1e-3;
    let mask = |n: &Network<f64>| -> Result<Vec<Vec<bool>>> {
        let (_, tr) = n.forward_trace(input)?;
        Ok(n.layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec().activation == Activation::Relu)
            .map(|(i, _)| tr.output(i).data().iter().map(|&y| y > 0.0).collect())
            .collect())
    };
    let base_mask = mask(net)?;
    let loss_at = |n: &Network<f64>| -> Result<f64> { Ok(mse_loss(&n.forward(input)?, target)?.0) };

    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for (l, grad) in grads.iter().enumerate() {
        let nw = net.layers()[l].params().weights.len();
        let nb = net.layers()[l].params().bias.len();
        for _ in 0..per_layer {
            let slot = rng.random_range(0..nw + nb);
            let analytic = if slot < nw {
                grad.weights[slot]
            } else {
                grad.bias[slot - nw]
            };
            let orig = *param_slot(&mut probe, l, slot);
            *param_slot(&mut probe, l, slot) = orig + h;
            let plus = loss_at(&probe)?;
            let flip_plus = mask(&probe)? != base_mask;
            *param_slot(&mut probe, l, slot) = orig - h;
            let minus = loss_at(&probe)?;
            let flip_minus = mask(&probe)? != base_mask;
            *param_slot(&mut probe, l, slot) = orig;
            if flip_plus || flip_minus {
                skipped += 1;
                continue;
            }
            checked += 1;
            let fd = (plus - minus) / (2.0 * h);
            let den = analytic
                .abs()
                .max(fd.abs())
                .max(1e-3 * gmax)
                .max(f64::MIN_POSITIVE);
            worst = worst.max((analytic - fd).abs() / den);
        }
    }
    Ok(GradCheckReport {
        max_deviation: worst,
        checked,
        skipped,
    })
}

/// Weight `slot` of layer `l`, with biases numbered after the weights.
fn param_slot<T: Real>(net: &mut Network<T>, l: usize, slot: usize) -> &mut T {
    let p = net.layers_mut()[l].params_mut();
    let nw = p.weights.len();
    if slot < nw {
        &mut p.weights[slot]
    } else {
        &mut p.bias[slot - nw]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::h2::{build_tree, H2Matrix};
    use crate::model::{build_mnn_h2, linear_config, Architecture, NetworkConfig, SharingMode};
    use crate::tensor::Padding;
    use rand_distr::{Distribution, StandardNormal};

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn mse_examples() {
        let t = row(&[1.0, -2.0, 3.0]);
        assert_eq!(mse_loss(&t, &t).unwrap().0, 0.0);
        let p = row(&[2.0, -1.0, 4.0]);
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.data().iter().all(|&x| (x - 2.0 / 3.0).abs() < 1e-16));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut want = 0.0;
        for i in 0..17 {
            want += (a[i] - b[i]) * (a[i] - b[i]);
        }
        want /= 17.0;
        let (l, g) = mse_loss(&row(&a), &row(&b)).unwrap();
        assert!((l - want).abs() <= 1e-14 * want);
        for i in 0..17 {
            assert!((g.data()[i] - 2.0 * (a[i] - b[i]) / 17.0).abs() < 1e-15);
        }
        assert!(mse_loss(&row(&a), &row(&b[..3])).is_err());
    }

    #[test]
    fn relative_error_examples() {
        let t = row(&[3.0, 4.0]);
        assert_eq!(rel_l2_error(&t, &t).unwrap(), 0.0);
        assert_eq!(rel_l2_error(&t.scale(2.0), &t).unwrap(), 1.0);
        assert!(rel_l2_error(&t, &row(&[0.0, 0.0])).is_err());
        let p = row(&[1.0, 2.0]);
        let want = ((2.0f64.powi(2) + 2.0f64.powi(2)) / 25.0).sqrt();
        assert!((rel_l2_error(&p, &t).unwrap() - want).abs() < 1e-16);
    }

    #[test]
    fn error_stats_match_welford() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..101).map(|_| rng.random_range(0.0..0.1)).collect();
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &x) in xs.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (x - mean);
        }
        let s = ErrorStats::from_samples(&xs);
        assert!((s.mean - mean).abs() < 1e-15);
        assert!((s.std - (m2 / xs.len() as f64).sqrt()).abs() < 1e-15);
    }

    fn tiny_net(sharing: SharingMode, dim: usize, padding: Padding) -> Network {
        let mut cfg = if dim == 1 {
            NetworkConfig::new_1d(3, 3, 3, 2)
        } else {
            NetworkConfig::new_2d(3, 2, 2, 2)
        };
        cfg.sharing = sharing;
        cfg.padding = padding;
        cfg.init_std = 0.3;
        let mut net: Network = build_mnn_h2(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in net.layers_mut() {
            for b in &mut l.params_mut().bias {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        net
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = tiny_net(SharingMode::Lc, 1, Padding::Periodic);
        let before = net.clone();
        let mut opt = Nadam::new(NadamConfig::default(), &net);
        let zero = net.zero_grads();
        opt.step_network(&mut net, &zero).unwrap();
        assert_eq!(net, before);
    }

    /// Independent scalar transcription of the update rule.
    #[test]
    fn scalar_nadam_matches_reference() {
        let (lr, b1, b2, eps, sd) = (1e-3, 0.9, 0.999, 1e-8, 0.004);
        let (mut p, mut m, mut v, mut sched) = (0.5f64, 0.0, 0.0, 1.0);
        let mut reference = Vec::new();
        for t in 1..=2 {
            let g = 1.0;
            let mu_t = b1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * sd));
            let mu_t1 = b1 * (1.0 - 0.5 * 0.96f64.powf((t + 1) as f64 * sd));
            let s_new = sched * mu_t;
            let s_next = sched * mu_t * mu_t1;
            sched = s_new;
            let g_prime = g / (1.0 - s_new);
            m = b1 * m + (1.0 - b1) * g;
            let m_prime = m / (1.0 - s_next);
            v = b2 * v + (1.0 - b2) * g * g;
            let v_prime = v / (1.0 - b2.powi(t));
            let m_bar = (1.0 - mu_t) * g_prime + mu_t1 * m_prime;
            p -= lr * m_bar / (v_prime.sqrt() + eps);
            reference.push(p);
        }
        let mut params = LayerParams {
            weights: vec![0.5f64],
            bias: vec![],
        };
        let grads = vec![LayerParams {
            weights: vec![1.0],
            bias: vec![],
        }];
        let mut opt = Nadam {
            config: NadamConfig::default(),
            step: 0,
            m_schedule: 1.0,
            m: vec![LayerParams {
                weights: vec![0.0],
                bias: vec![],
            }],
            v: vec![LayerParams {
                weights: vec![0.0],
                bias: vec![],
            }],
        };
        for want in reference {
            opt.update(&mut [&mut params], &grads).unwrap();
            assert!(
                (params.weights[0] - want).abs() < 1e-15,
                "{} vs {want}",
                params.weights[0]
            );
        }
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let base = tiny_net(SharingMode::Cnn, 1, Padding::Periodic);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = base.zero_grads();
        for lp in &mut g {
            for w in lp.weights.iter_mut().chain(lp.bias.iter_mut()) {
                *w = rng.random_range(-1.0..1.0);
            }
        }
        let (mut a, mut b) = (base.clone(), base.clone());
        let mut oa = Nadam::new(NadamConfig::default(), &a);
        let mut ob = Nadam::new(NadamConfig::default(), &b);
        oa.step_network(&mut a, &g).unwrap();
        ob.step_network(&mut b, &g).unwrap();
        assert_eq!(a, b);
    }

    fn sample_pair(net: &Network, seed: u64) -> (Tensor, Tensor) {
        let n = net.num_points();
        let shape = vec![net.architecture().n(); net.architecture().dim()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(
            shape.clone(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (x, y)
    }

    #[test]
    fn end_to_end_gradients() {
        for sharing in [SharingMode::Lc, SharingMode::Cnn, SharingMode::Mixed] {
            for dim in [1, 2] {
                for padding in [Padding::Periodic, Padding::Zero] {
                    let net = tiny_net(sharing, dim, padding);
                    let (x, y) = sample_pair(&net, 11);
                    let rep = grad_check(&net, &x, &y, 200, 5).unwrap();
                    assert!(
                        rep.max_deviation <= 1e-5,
                        "{sharing} d={dim} {padding}: {rep:?}"
                    );
                    assert!(rep.checked >= 200 * 9 / 10, "{rep:?}");

                    let mut lin = net.clone();
                    let Architecture::Multiscale(mut cfg) = lin.architecture().clone() else {
                        unreachable!()
                    };
                    cfg.activation = Activation::Linear;
                    cfg.transfer_activation = Activation::Linear;
                    let params = lin.layers().iter().map(|l| l.params().clone()).collect();
                    lin = Network::from_params(Architecture::Multiscale(cfg), params).unwrap();
                    let rep = grad_check(&lin, &x, &y, 200, 6).unwrap();
                    assert!(
                        rep.max_deviation <= 1e-7,
                        "linear {sharing} d={dim} {padding}: {rep:?}"
                    );
                    assert_eq!(rep.skipped, 0);
                    assert!(rep.checked >= 200);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = tiny_net(SharingMode::Mixed, 1, Padding::Periodic);
        let (x, _) = sample_pair(&net, 1);
        let (_, trace) = net.forward_trace(&x).unwrap();
        let mut g = net.zero_grads();
        let gx = net
            .backward(&trace, &Tensor::zeros(x.shape().to_vec()), &mut g)
            .unwrap();
        assert!(g
            .iter()
            .all(|p| p.weights.iter().chain(&p.bias).all(|&v| v == 0.0)));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    /// `v -> A v` pairs for a normalized random H2 matrix.
    fn linear_task(l: usize, m: usize, r: usize, count: usize, seed: u64) -> (H2Matrix, Dataset) {
        let tree = build_tree(l, m, 1).unwrap();
        let h = H2Matrix::random_normalized(&tree, r, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let n = tree.points_per_axis();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..count {
            let x = Tensor::new(
                vec![n],
                (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
            )
            .unwrap();
            ys.push(h.matvec(&x).unwrap());
            xs.push(x);
        }
        (h.clone(), Dataset::new(1, n, xs, ys).unwrap())
    }

    fn linear_net(h: &H2Matrix, seed: u64) -> Network {
        let mut cfg = linear_config(h.tree(), h.rank());
        cfg.init_std = 0.1;
        build_mnn_h2(&cfg, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let (h, data) = linear_task(3, 3, 2, 40, 1);
        let net = linear_net(&h, 2);
        let mut tr = Trainer::new(
            net.clone(),
            NadamConfig {
                lr: 0.0,
                ..Default::default()
            },
        );
        tr.run_epoch(
            &data,
            &TrainConfig {
                batch_size: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(tr.net, net);
    }

    #[test]
    fn fixed_seed_reproduces_history() {
        let (h, data) = linear_task(3, 3, 2, 40, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: Some(5),
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut tr = Trainer::new(linear_net(&h, 4), NadamConfig::default());
            let mut csv = Vec::new();
            let hist = tr
                .train(&data, Some(&data), &cfg, Some(&mut csv), |_| Ok(()))
                .unwrap();
            (hist, csv, tr.net)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(String::from_utf8(a.1).unwrap().lines().count(), 3);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (h, data) = linear_task(3, 3, 2, 30, 5);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: Some(4),
            seed: 1,
            ..Default::default()
        };
        let mut full = Trainer::new(linear_net(&h, 6), NadamConfig::default());
        full.train(&data, None, &cfg, None, |_| Ok(())).unwrap();

        let mut first = Trainer::new(linear_net(&h, 6), NadamConfig::default());
        first
            .train(
                &data,
                None,
                &TrainConfig {
                    epochs: 2,
                    ..cfg.clone()
                },
                None,
                |_| Ok(()),
            )
            .unwrap();
        let mut second = Trainer::resume(first.net.clone(), first.optimizer.clone(), first.epoch);
        second.train(&data, None, &cfg, None, |_| Ok(())).unwrap();
        assert_eq!(full.net, second.net);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (h, mut data) = linear_task(3, 3, 2, 10, 7);
        data.targets[3].data_mut()[0] = f64::NAN;
        let mut tr = Trainer::new(linear_net(&h, 1), NadamConfig::default());
        let err = tr.run_epoch(
            &data,
            &TrainConfig {
                batch_size: Some(10),
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let (h, _) = linear_task(3, 3, 2, 4, 7);
        let (_, other) = linear_task(3, 4, 2, 4, 7);
        let mut tr = Trainer::new(linear_net(&h, 1), NadamConfig::default());
        assert!(matches!(
            tr.run_epoch(&other, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_size_defaults_to_one_percent() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.resolved_batch(2000).unwrap(), 20);
        assert_eq!(cfg.resolved_batch(150).unwrap(), 2);
        assert!(TrainConfig {
            batch_size: Some(0),
            ..cfg.clone()
        }
        .resolved_batch(5)
        .is_err());
        assert!(TrainConfig {
            batch_size: Some(6),
            ..cfg
        }
        .resolved_batch(5)
        .is_err());
    }

    #[test]
    fn realizable_loss_decreases_early() {
        let mut curves = vec![0.0; 6];
        for seed in 0..3 {
            let (h, data) = linear_task(3, 4, 2, 200, 20 + seed);
            let mut tr = Trainer::new(linear_net(&h, seed), NadamConfig::default());
            let cfg = TrainConfig {
                batch_size: Some(4),
                seed,
                ..Default::default()
            };
            let probe = |net: &Network| {
                let all: Vec<usize> = (0..data.len()).collect();
                batch_gradient(net, &data, &all).unwrap().0
            };
            curves[0] += probe(&tr.net);
            for c in &mut curves[1..=5] {
                tr.run_epoch(&data, &cfg).unwrap();
                *c += probe(&tr.net);
            }
        }
        for w in curves.windows(2) {
            assert!(w[1] <= w[0], "{curves:?}");
        }
    }
}
