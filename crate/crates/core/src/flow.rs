//! Real-NVP generators: stacked affine couplings with alternating masks and
//! a multi-scale factor-out schedule.
//!
//! The generator maps latent `z0 ~ N(0, I)` to data `z1`. Each coupling keeps
//! its pass-through coordinates fixed and updates the rest as
//! `y = x ⊙ exp(s(x_pass)) + t(x_pass)`, so its log-determinant is the sum of
//! `s` over the updated coordinates. The density of a data point is
//! `log p(z1) = log N(z0; 0, I) − log |det ∂z1/∂z0|`.

use crate::error::{Error, Result};
use crate::graph::{Activations, Graph, NodeId, ParamStore};
use crate::nn::{dense, init_dense, init_dense_zero};
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

/// Coupling counts for one, two and three levels.
pub const LAYERS_PER_LEVEL_COUNT: [usize; 3] = [7, 13, 19];
/// Bound on `|s|` per coordinate per layer.
pub const DEFAULT_SCALE_CAP: f64 = 4.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One affine coupling layer's masks over the full data width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineCoupling {
    /// `true` = pass-through (conditioning) coordinate.
    pub mask: Vec<bool>,
    /// Coordinates still being transformed at this layer's level.
    pub active: Vec<bool>,
    pub level: usize,
}

impl AffineCoupling {
    pub fn cond_mask(&self) -> Vec<bool> {
        self.mask.iter().zip(&self.active).map(|(&m, &a)| m && a).collect()
    }

    pub fn update_mask(&self) -> Vec<bool> {
        self.mask.iter().zip(&self.active).map(|(&m, &a)| !m && a).collect()
    }
}

/// Which half of the latent vector [`FlowModel::partial_resample`] redraws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T> {
    pub dim: usize,
    pub levels: usize,
    pub hidden: usize,
    pub scale_cap: f64,
    pub layers: Vec<AffineCoupling>,
    /// `factor_out[l]` lists the coordinates frozen after level `l`.
    pub factor_out: Vec<Vec<usize>>,
    pub params: ParamStore<T>,
}

/// Per-example results of pushing a batch through the flow.
#[derive(Debug, Clone)]
pub struct FlowOutput<T> {
    pub value: Tensor<T>,
    /// `log |det ∂z1/∂z0|` per example, shape `[n, 1]`.
    pub logdet: Tensor<T>,
}

/// Node handles for a flow embedded in a larger graph.
#[derive(Debug, Clone)]
pub struct FlowNodes {
    pub output: NodeId,
    pub logdet: NodeId,
    pub layer_logdets: Vec<NodeId>,
    /// Last node index belonging to each layer.
    layer_ends: Vec<usize>,
}

impl FlowNodes {
    fn layer_of(&self, node: usize) -> Option<usize> {
        self.layer_ends.iter().position(|&end| node <= end)
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("flow.{i:02}")
}

fn mask_tensor<T: Scalar>(m: &[bool]) -> Tensor<T> {
    Tensor::row(m.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
}

/// `log N(z; 0, I)` per row as `[n, 1]`, added to graph `g`.
pub fn prior_logpdf_node<T: Scalar>(g: &mut Graph<T>, z: NodeId, dim: usize) -> NodeId {
    let sq = g.mul(z, z);
    let ss = g.sum_cols(sq);
    let half = g.scale(ss, T::from_f64(-0.5));
    g.add_scalar(half, T::from_f64(-0.5 * dim as f64 * LN_2PI))
}

/// `log N(z; 0, I)` per row.
pub fn prior_logpdf<T: Scalar>(z: &Tensor<T>) -> Vec<f64> {
    let d = z.cols();
    (0..z.rows())
        .map(|r| {
            let ss: f64 = z.row_slice(r).iter().map(|v| v.to_f64() * v.to_f64()).sum();
            -0.5 * ss - 0.5 * d as f64 * LN_2PI
        })
        .collect()
}

impl<T: Scalar> FlowModel<T> {
    /// Builds an identity-initialised real NVP with 7, 13 or 19 couplings.
    ///
    /// After every non-final level the even-position half of the still
    /// active coordinates is frozen.
    pub fn build_nvp(levels: usize, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if !(1..=3).contains(&levels) {
            return Err(Error::Model(format!("levels must be 1, 2 or 3, got {levels}")));
        }
        if dim < 2 {
            return Err(Error::Model(format!("data dimension {dim} is too small")));
        }
        if hidden == 0 {
            return Err(Error::Model("hidden width must be positive".into()));
        }
        let mut active: Vec<usize> = (0..dim).collect();
        let mut layers = Vec::new();
        let mut factor_out = Vec::new();
        for level in 0..levels {
            if active.len() < 2 {
                return Err(Error::Model(format!(
                    "dimension {dim} cannot be factored out over {levels} levels"
                )));
            }
            let count = if level == 0 { 7 } else { 6 };
            let mut active_mask = vec![false; dim];
            for &a in &active {
                active_mask[a] = true;
            }
            for _ in 0..count {
                let parity = layers.len() % 2;
                let mut mask = vec![false; dim];
                for (pos, &d) in active.iter().enumerate() {
                    mask[d] = pos % 2 == parity;
                }
                layers.push(AffineCoupling {
                    mask,
                    active: active_mask.clone(),
                    level,
                });
            }
            if level + 1 < levels {
                let frozen: Vec<usize> = active.iter().copied().step_by(2).collect();
                active = active.iter().copied().skip(1).step_by(2).collect();
                factor_out.push(frozen);
            }
        }
        debug_assert_eq!(layers.len(), LAYERS_PER_LEVEL_COUNT[levels - 1]);

        let mut rng = RngStream::new(seed, streams::INIT);
        let mut params = ParamStore::new();
        for i in 0..layers.len() {
            let p = layer_prefix(i);
            init_dense(&mut params, &format!("{p}.h1"), dim, hidden, 1.0, &mut rng);
            init_dense(&mut params, &format!("{p}.h2"), hidden, hidden, 1.0, &mut rng);
            init_dense_zero(&mut params, &format!("{p}.s"), hidden, dim);
            init_dense_zero(&mut params, &format!("{p}.t"), hidden, dim);
        }
        let model = FlowModel {
            dim,
            levels,
            hidden,
            scale_cap: DEFAULT_SCALE_CAP,
            layers,
            factor_out,
            params,
        };
        debug_assert!(model.mask_coverage());
        Ok(model)
    }

    /// Every coordinate is updated by at least one layer, and every
    /// factored-out coordinate was updated before it was frozen.
    pub fn mask_coverage(&self) -> bool {
        let mut updated = vec![false; self.dim];
        for level in 0..self.levels {
            if level > 0 && !self.factor_out[level - 1].iter().all(|&d| updated[d]) {
                return false;
            }
            for layer in self.layers.iter().filter(|l| l.level == level) {
                for (u, m) in updated.iter_mut().zip(layer.update_mask()) {
                    *u |= m;
                }
            }
        }
        updated.iter().all(|&u| u)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        FlowModel {
            dim: self.dim,
            levels: self.levels,
            hidden: self.hidden,
            scale_cap: self.scale_cap,
            layers: self.layers.clone(),
            factor_out: self.factor_out.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Latent coordinates ordered coarsest-first: the coordinates frozen
    /// after the first level, then the second, then the final active set.
    pub fn latent_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = self.factor_out.iter().flatten().copied().collect();
        let mut seen = vec![false; self.dim];
        for &d in &order {
            seen[d] = true;
        }
        order.extend((0..self.dim).filter(|&d| !seen[d]));
        order
    }

    fn coupling_st(&self, g: &mut Graph<T>, i: usize, x: NodeId) -> (NodeId, NodeId) {
        let layer = &self.layers[i];
        let p = layer_prefix(i);
        let cmask = g.constant(mask_tensor(&layer.cond_mask()));
        let umask = g.constant(mask_tensor(&layer.update_mask()));
        let xin = g.mul(x, cmask);
        let h1 = dense(g, xin, &format!("{p}.h1"));
        let h1 = g.tanh(h1);
        let h2 = dense(g, h1, &format!("{p}.h2"));
        let h2 = g.tanh(h2);
        let s_raw = dense(g, h2, &format!("{p}.s"));
        let s_raw = g.tanh(s_raw);
        let s_capped = g.scale(s_raw, T::from_f64(self.scale_cap));
        let s = g.mul(s_capped, umask);
        let t_raw = dense(g, h2, &format!("{p}.t"));
        let t = g.mul(t_raw, umask);
        (s, t)
    }

    /// Adds the generator direction `z0 → z1` to `g`.
    pub fn build_forward(&self, g: &mut Graph<T>, z0: NodeId) -> FlowNodes {
        let mut x = z0;
        let mut logdet: Option<NodeId> = None;
        let mut layer_logdets = Vec::new();
        let mut layer_ends = Vec::new();
        for i in 0..self.layers.len() {
            let (s, t) = self.coupling_st(g, i, x);
            let es = g.exp(s);
            let scaled = g.mul(x, es);
            x = g.add(scaled, t);
            let ld = g.sum_cols(s);
            layer_logdets.push(ld);
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => g.add(acc, ld),
            });
            layer_ends.push(g.len() - 1);
        }
        FlowNodes {
            output: x,
            logdet: logdet.expect("at least one layer"),
            layer_logdets,
            layer_ends,
        }
    }

    /// Adds the inference direction `z1 → z0` to `g`. The returned log-det
    /// is the generator's `log |det ∂z1/∂z0|` at the recovered point.
    pub fn build_inverse(&self, g: &mut Graph<T>, x1: NodeId) -> FlowNodes {
        let mut y = x1;
        let n = self.layers.len();
        let mut per_layer = vec![None; n];
        let mut layer_ends = vec![0; n];
        for i in (0..n).rev() {
            let (s, t) = self.coupling_st(g, i, y);
            let shifted = g.sub(y, t);
            let neg = g.neg(s);
            let ens = g.exp(neg);
            y = g.mul(shifted, ens);
            per_layer[i] = Some(g.sum_cols(s));
            layer_ends[i] = g.len() - 1;
        }
        let layer_logdets: Vec<NodeId> = per_layer.into_iter().map(|v| v.expect("set")).collect();
        let mut logdet = layer_logdets[0];
        for &ld in &layer_logdets[1..] {
            logdet = g.add(logdet, ld);
        }
        // Layers were emitted last-to-first; node ranges are monotone in
        // emission order, so map them back for error reporting.
        let mut ends = layer_ends.clone();
        ends.reverse();
        FlowNodes {
            output: y,
            logdet,
            layer_logdets,
            layer_ends: ends,
        }
    }

    /// Adds `log p(x)` per example (`[n, 1]`) to `g`, returning it together
    /// with the inverse-pass nodes.
    pub fn build_log_prob(&self, g: &mut Graph<T>, x: NodeId) -> (NodeId, FlowNodes) {
        let inv = self.build_inverse(g, x);
        let prior = prior_logpdf_node(g, inv.output, self.dim);
        let lp = g.sub(prior, inv.logdet);
        (lp, inv)
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "flow expects [n, {}] batches, got {:?}",
                self.dim,
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::InvalidArgument("non-finite flow input".into()));
        }
        Ok(())
    }

    fn run(&self, g: &Graph<T>, nodes: &FlowNodes, x: &Tensor<T>, reversed: bool) -> Result<Activations<T>> {
        g.evaluate(&self.params, &[("x", x)]).map_err(|e| match e {
            Error::NonFinite { node, .. } => match nodes.layer_of(node) {
                Some(l) if reversed => Error::LayerNonFinite {
                    layer: self.layers.len() - 1 - l,
                },
                Some(l) => Error::LayerNonFinite { layer: l },
                None => e,
            },
            other => other,
        })
    }

    /// `z0 → (z1, log|det ∂z1/∂z0|)`.
    pub fn forward(&self, z0: &Tensor<T>) -> Result<FlowOutput<T>> {
        self.check_width(z0)?;
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes = self.build_forward(&mut g, x);
        let acts = self.run(&g, &nodes, z0, false)?;
        Ok(FlowOutput {
            value: acts.value(nodes.output).clone(),
            logdet: acts.value(nodes.logdet).clone(),
        })
    }

    /// Forward pass that also reports each layer's log-det.
    pub fn forward_layer_logdets(&self, z0: &Tensor<T>) -> Result<(FlowOutput<T>, Vec<Tensor<T>>)> {
        self.check_width(z0)?;
        let mut g = Graph::new();
        let x = g.input("x");
        let nodes = self.build_forward(&mut g, x);
        let acts = self.run(&g, &nodes, z0, false)?;
        let per = nodes
            .layer_logdets
            .iter()
            .map(|&n| acts.value(n).clone())
            .collect();
        Ok((
            FlowOutput {
                value: acts.value(nodes.output).clone(),
                logdet: acts.value(nodes.logdet).clone(),
            },
            per,
        ))
    }

    /// `z1 → (z0, log|det ∂z1/∂z0|)`.
    pub fn inverse(&self, x: &Tensor<T>) -> Result<FlowOutput<T>> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let xi = g.input("x");
        let nodes = self.build_inverse(&mut g, xi);
        let acts = self.run(&g, &nodes, x, true)?;
        Ok(FlowOutput {
            value: acts.value(nodes.output).clone(),
            logdet: acts.value(nodes.logdet).clone(),
        })
    }

    /// Log-density in nats per example.
    pub fn log_prob(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let inv = self.inverse(x)?;
        let prior = prior_logpdf(&inv.value);
        Ok(prior
            .into_iter()
            .zip(inv.logdet.data())
            .map(|(p, ld)| p - ld.to_f64())
            .collect())
    }

    /// Draws `n` samples with a stream seeded by `seed`, returning them with
    /// their log-densities.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Tensor<T>, Vec<f64>)> {
        let mut rng = RngStream::new(seed, streams::NOISE);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with(&self, n: usize, rng: &mut RngStream) -> Result<(Tensor<T>, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let z0 = rng.normal_tensor(n, self.dim);
        let out = self.forward(&z0)?;
        let prior = prior_logpdf(&z0);
        let lp = prior
            .into_iter()
            .zip(out.logdet.data())
            .map(|(p, ld)| p - ld.to_f64())
            .collect();
        Ok((out.value, lp))
    }

    /// Infers latents for `x`, redraws one half of them (in
    /// [`latent_order`](Self::latent_order)) from the prior and regenerates.
    ///
    /// The first half holds `dim / 2` coordinates (rounded down).
    pub fn partial_resample(&self, x: &Tensor<T>, half: Half, seed: u64) -> Result<Tensor<T>> {
        let inv = self.inverse(x)?;
        let mut z = inv.value;
        let order = self.latent_order();
        let split = self.dim / 2;
        let chosen: &[usize] = match half {
            Half::First => &order[..split],
            Half::Second => &order[split..],
        };
        let mut rng = RngStream::new(seed, streams::NOISE);
        let cols = z.cols();
        for r in 0..z.rows() {
            for &d in chosen {
                z.data_mut()[r * cols + d] = T::from_f64(rng.normal());
            }
        }
        Ok(self.forward(&z)?.value)
    }
}
