//! Measurements on frozen models: independent-critic distances, NLL
//! histograms, latent statistics, Jacobian ranks and the KL estimator gap.

use nalgebra::DMatrix;

use crate::critic::{Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::flow::{prior_logpdf, FlowModel};
use crate::graph::{Graph, ParamStore};
use crate::nn::{dense, init_dense};
use crate::optim::{clip_to_box, OptState, Optimizer};
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CRITIC_BUDGET: u64 = 2000;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
pub const DEFAULT_TOL_RATIO: f64 = 1e-3;
const SVD_MAX_ITER: usize = 10_000;

/// Training setup shared by every independent critic of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentCriticConfig {
    pub critic: CriticConfig,
    pub budget: u64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl IndependentCriticConfig {
    pub fn new(critic: CriticConfig) -> Self {
        IndependentCriticConfig {
            critic,
            budget: DEFAULT_CRITIC_BUDGET,
            batch_size: 64,
            optimizer: Optimizer::rmsprop_default(),
        }
    }
}

/// An evaluation-only critic. Nothing it computes flows back into a
/// generator.
#[derive(Debug, Clone)]
pub struct IndependentCritic<T> {
    pub critic: Critic<T>,
    pub updates: u64,
}

fn draw_rows<T: Scalar>(pool: &Tensor<T>, n: usize, rng: &mut RngStream) -> Tensor<T> {
    let idx: Vec<usize> = (0..n).map(|_| rng.index(pool.rows())).collect();
    pool.select_rows(&idx)
}

fn check_pool<T: Scalar>(pool: &Tensor<T>, need: usize, what: &str) -> Result<()> {
    if pool.shape().len() != 2 || pool.rows() < need {
        return Err(Error::InsufficientSamples(format!(
            "{what} holds {} rows, need at least {need}",
            pool.shape().first().copied().unwrap_or(0)
        )));
    }
    Ok(())
}

/// Trains a fresh critic to maximise `mean f(x_valid) − mean f(x_g)` over
/// batches drawn with replacement from the two critic-space pools.
pub fn train_independent_critic<T: Scalar>(
    x_valid: &Tensor<T>,
    x_g: &Tensor<T>,
    cfg: &IndependentCriticConfig,
    seed: u64,
) -> Result<IndependentCritic<T>> {
    if cfg.critic.embedding {
        return Err(Error::InvalidArgument("independent critics have no embedding path".into()));
    }
    check_pool(x_valid, 1, "validation pool")?;
    check_pool(x_g, 1, "generator pool")?;
    let mut critic = Critic::new(cfg.critic.clone(), seed)?;
    let mut g = Graph::new();
    let loss = critic.build_critic_loss(&mut g);
    let mut rng = RngStream::new(seed, streams::EVAL);
    let mut state = OptState::new();
    let c = critic.clip_c();
    for update in 0..cfg.budget {
        let xr = draw_rows(x_valid, cfg.batch_size, &mut rng);
        let xg = draw_rows(x_g, cfg.batch_size, &mut rng);
        let acts = g.evaluate(&critic.params, &[("x_r", &xr), ("x_g", &xg)]).map_err(|e| Error::Diverged {
            step: update,
            what: format!("independent critic: {e}"),
        })?;
        let grads = g.backward(&acts, loss)?;
        cfg.optimizer
            .step(&mut critic.params, &grads.params, &mut state)
            .map_err(|e| Error::Diverged {
                step: update,
                what: format!("independent critic: {e}"),
            })?;
        clip_to_box(&mut critic.params, c, &critic.clip_set);
    }
    Ok(IndependentCritic {
        critic,
        updates: cfg.budget,
    })
}

/// A distance estimate with its bootstrap standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std: f64,
}

impl Estimate {
    /// `sqrt(σ_a² + σ_b²)`.
    pub fn pooled_std(&self, other: &Estimate) -> f64 {
        (self.std * self.std + other.std * other.std).sqrt()
    }
}

/// Standard deviation of the mean of `values` over `resamples` bootstrap
/// resamples.
pub fn bootstrap_std(values: &[f64], resamples: usize, rng: &mut RngStream) -> f64 {
    let n = values.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.index(n)]).sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().sum::<f64>() / resamples as f64;
    (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

/// `Ŵ(x_a, x_b)`: mean over `n_batches` of `mean f(a) − mean f(b)` on
/// batches drawn with replacement, with a bootstrap std over batches.
pub fn w_hat<T: Scalar>(
    ic: &IndependentCritic<T>,
    x_a: &Tensor<T>,
    x_b: &Tensor<T>,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("w_hat needs at least one non-empty batch".into()));
    }
    check_pool(x_a, batch_size, "first source")?;
    check_pool(x_b, batch_size, "second source")?;
    let fa = ic.critic.critic_value(x_a)?;
    let fb = ic.critic.critic_value(x_b)?;
    let mut rng = RngStream::new(seed, streams::EVAL);
    let diffs: Vec<f64> = (0..n_batches)
        .map(|_| {
            let ma = (0..batch_size).map(|_| fa[rng.index(fa.len())]).sum::<f64>() / batch_size as f64;
            let mb = (0..batch_size).map(|_| fb[rng.index(fb.len())]).sum::<f64>() / batch_size as f64;
            ma - mb
        })
        .collect();
    let value = diffs.iter().sum::<f64>() / n_batches as f64;
    let std = bootstrap_std(&diffs, BOOTSTRAP_RESAMPLES, &mut rng);
    Ok(Estimate { value, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Equal-width histogram over the observed range of `values`.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("histogram of non-finite values".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Histogram of per-example negative log-densities `−log p(x)`.
pub fn nll_histogram<T: Scalar>(model: &FlowModel<T>, x: &Tensor<T>, n_bins: usize) -> Result<Histogram> {
    if x.shape().first() == Some(&0) {
        return Err(Error::EmptyBatch);
    }
    let nll: Vec<f64> = model.log_prob(x)?.into_iter().map(|l| -l).collect();
    histogram(&nll, n_bins)
}

/// Square occupancy grid over `[lo, hi)²`; points outside are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Row-major `bins × bins`, first dimension of the pair along rows.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pair: (usize, usize),
    pub grid: Grid,
}

/// Moments of the inferred latents `z0 = f⁻¹(x)` and a 2D histogram of the
/// coordinate pair `dims`.
pub fn latent_stats<T: Scalar>(
    model: &FlowModel<T>,
    x: &Tensor<T>,
    dims: (usize, usize),
    bins: usize,
    range: (f64, f64),
) -> Result<LatentStats> {
    if dims.0 >= model.dim || dims.1 >= model.dim {
        return Err(Error::InvalidArgument(format!("latent pair {dims:?} out of range")));
    }
    if bins == 0 || !(range.1 > range.0) {
        return Err(Error::InvalidArgument("latent grid needs bins ≥ 1 and lo < hi".into()));
    }
    let z = model.inverse(x)?.value;
    let (n, d) = (z.rows(), z.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row_slice(r)) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(z.row_slice(r)).zip(&mean) {
            *s += (v.to_f64() - m).powi(2);
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let std = var.into_iter().map(|s| (s / denom).sqrt()).collect();
    let (lo, hi) = range;
    let cell = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins * bins];
    for r in 0..n {
        let (a, b) = (z.get2(r, dims.0).to_f64(), z.get2(r, dims.1).to_f64());
        if a >= lo && a < hi && b >= lo && b < hi {
            let (i, j) = (((a - lo) / cell) as usize, ((b - lo) / cell) as usize);
            counts[i.min(bins - 1) * bins + j.min(bins - 1)] += 1;
        }
    }
    Ok(LatentStats {
        mean,
        std,
        pair: dims,
        grid: Grid { bins, lo, hi, counts },
    })
}

/// Dense Jacobian `∂z1/∂z0` of the generator at one latent point, one
/// reverse pass per output row (batched as `D` copies of the point).
pub fn jacobian(model: &FlowModel<f64>, z0: &[f64]) -> Result<DMatrix<f64>> {
    let d = model.dim;
    if z0.len() != d {
        return Err(Error::Shape(format!("probe of length {} for dimension {d}", z0.len())));
    }
    let mut g = Graph::new();
    let z = g.input("z");
    let sel = g.input_no_grad("sel");
    let x = model.build_forward(&mut g, z).output;
    let picked = g.mul(x, sel);
    let seed = g.sum(picked);
    let zs = Tensor::from_rows(d, d, (0..d).flat_map(|_| z0.iter().copied()).collect())?;
    let eye = Tensor::<f64>::identity(d);
    let acts = g.evaluate(&model.params, &[("z", &zs), ("sel", &eye)])?;
    let grads = g.backward(&acts, seed)?;
    let gz = grads.input("z").expect("z is differentiable");
    Ok(DMatrix::from_row_slice(d, d, gz.data()))
}

/// Central-difference Jacobian of the generator.
pub fn jacobian_fd(model: &FlowModel<f64>, z0: &[f64], eps: f64) -> Result<DMatrix<f64>> {
    let d = model.dim;
    let mut rows = Vec::with_capacity(2 * d * d);
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = z0.to_vec();
            p[j] += sign * eps;
            rows.extend(p);
        }
    }
    let out = model.forward(&Tensor::from_rows(2 * d, d, rows)?)?.value;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        for i in 0..d {
            jac[(i, j)] = (out.get2(2 * j, i) - out.get2(2 * j + 1, i)) / (2.0 * eps);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRank {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
}

/// Singular values and numerical rank of the generator Jacobian at each row
/// of `probes`. Every reverse-mode column is first checked against central
/// differences to `1e-4` relative.
pub fn jacobian_rank<T: Scalar>(model: &FlowModel<T>, probes: &Tensor<T>, tol_ratio: f64) -> Result<Vec<ProbeRank>> {
    if !(tol_ratio > 0.0 && tol_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("tol_ratio must lie in (0, 1), got {tol_ratio}")));
    }
    if model.dim > 64 {
        return Err(Error::InvalidArgument(format!("dense Jacobian needs D ≤ 64, got {}", model.dim)));
    }
    let m = model.cast::<f64>();
    let probes = probes.cast::<f64>();
    let mut out = Vec::with_capacity(probes.rows());
    for p in 0..probes.rows() {
        let z0 = probes.row_slice(p);
        let jac = jacobian(&m, z0)?;
        let fd = jacobian_fd(&m, z0, 1e-6)?;
        for c in 0..m.dim {
            let a = jac.column(c);
            let scale = a.amax().max(1.0);
            let err = (a - fd.column(c)).amax() / scale;
            if !(err < 1e-4) {
                return Err(Error::JacobianCheck {
                    probe: p,
                    column: c,
                    err,
                });
            }
        }
        let svd = jac
            .try_svd(false, false, f64::EPSILON, SVD_MAX_ITER)
            .ok_or(Error::SvdNoConvergence { probe: p })?;
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let cut = tol_ratio * sv[0];
        let rank = sv.iter().filter(|&&s| s > cut).count();
        out.push(ProbeRank {
            singular_values: sv,
            rank,
        });
    }
    Ok(out)
}

/// Classifier used by [`kl_gap`].
#[derive(Debug, Clone, PartialEq)]
pub struct KlDiscConfig {
    pub hidden: usize,
    pub updates: u64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for KlDiscConfig {
    fn default() -> Self {
        KlDiscConfig {
            hidden: 64,
            updates: 5000,
            batch_size: 64,
            optimizer: Optimizer::adam_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlGap {
    pub kl_unbiased: f64,
    pub kl_disc: f64,
}

/// A two-hidden-layer logistic classifier `D(z)`; prior samples carry label
/// 1, so at the optimum `logit D(z) = log p(z) − log q(z)`.
#[derive(Debug, Clone)]
pub struct KlDiscriminator<T> {
    pub params: ParamStore<T>,
}

impl<T: Scalar> KlDiscriminator<T> {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut params = ParamStore::new();
        init_dense(&mut params, "disc.l1", dim, hidden, 1.0, &mut rng);
        init_dense(&mut params, "disc.l2", hidden, hidden, 1.0, &mut rng);
        init_dense(&mut params, "disc.out", hidden, 1, 1.0, &mut rng);
        KlDiscriminator { params }
    }

    pub fn build_logits(&self, g: &mut Graph<T>, z: crate::graph::NodeId) -> crate::graph::NodeId {
        let h = dense(g, z, "disc.l1");
        let h = g.tanh(h);
        let h = dense(g, h, "disc.l2");
        let h = g.tanh(h);
        dense(g, h, "disc.out")
    }

    /// Mean logistic loss over prior samples `z_p` (label 1) and model
    /// samples `z_q` (label 0).
    pub fn build_loss(&self, g: &mut Graph<T>) -> crate::graph::NodeId {
        let zp = g.input_no_grad("z_p");
        let zq = g.input_no_grad("z_q");
        let lp = self.build_logits(g, zp);
        let lq = self.build_logits(g, zq);
        let neg = g.neg(lp);
        let sp = g.softplus(neg);
        let sq = g.softplus(lq);
        let mp = g.mean(sp);
        let mq = g.mean(sq);
        let tot = g.add(mp, mq);
        g.scale(tot, T::from_f64(0.5))
    }

    pub fn logits(&self, z: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let zi = g.input("z");
        let l = self.build_logits(&mut g, zi);
        Ok(g.evaluate(&self.params, &[("z", z)])?.value(l).to_f64_vec())
    }
}

/// Exact `E_q[log q − log p]` against the discriminator estimate
/// `−E_q[logit D]`, with `q` the flow's sample distribution and `p = N(0, I)`.
pub fn kl_gap(flow_q: &FlowModel<f64>, n: usize, disc: &KlDiscConfig, seed: u64) -> Result<KlGap> {
    if n == 0 {
        return Err(Error::InvalidArgument("kl_gap needs n ≥ 1".into()));
    }
    let d = flow_q.dim;
    let mut eval_rng = RngStream::new(seed, streams::EVAL);
    let (zq, log_q) = flow_q.sample_with(n, &mut eval_rng)?;
    let log_p = prior_logpdf(&zq);
    let kl_unbiased = log_q.iter().zip(&log_p).map(|(q, p)| q - p).sum::<f64>() / n as f64;

    let mut clf = KlDiscriminator::<f64>::new(d, disc.hidden, seed);
    let mut g = Graph::new();
    let loss = clf.build_loss(&mut g);
    let mut state = OptState::new();
    let mut rng = RngStream::new(seed, streams::NOISE);
    for update in 0..disc.updates {
        let zp = rng.normal_tensor::<f64>(disc.batch_size, d);
        let (zb, _) = flow_q.sample_with(disc.batch_size, &mut rng)?;
        let acts = g.evaluate(&clf.params, &[("z_p", &zp), ("z_q", &zb)]).map_err(|e| Error::Diverged {
            step: update,
            what: format!("KL discriminator: {e}"),
        })?;
        let grads = g.backward(&acts, loss)?;
        disc.optimizer
            .step(&mut clf.params, &grads.params, &mut state)
            .map_err(|e| Error::Diverged {
                step: update,
                what: format!("KL discriminator: {e}"),
            })?;
    }
    let logits = clf.logits(&zq)?;
    let kl_disc = -logits.iter().sum::<f64>() / n as f64;
    Ok(KlGap { kl_unbiased, kl_disc })
}

/// An affine flow `z ↦ z + shift`, realised by setting the shift heads' biases.
pub fn shift_flow(shift: &[f64], hidden: usize) -> Result<FlowModel<f64>> {
    let d = shift.len();
    let mut m = FlowModel::<f64>::build_nvp(1, d, hidden, 0)?;
    let mut remaining: Vec<bool> = vec![true; d];
    for i in 0..m.num_layers() {
        let um = m.layers[i].update_mask();
        let mut b = vec![0.0; d];
        for j in 0..d {
            if um[j] && remaining[j] {
                b[j] = shift[j];
                remaining[j] = false;
            }
        }
        m.params
            .insert(format!("{}.t.b", crate::flow::layer_prefix(i)), Tensor::row(b));
    }
    Ok(m)
}
