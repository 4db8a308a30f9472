//! Weight-clipped Wasserstein critics, with an optional distribution
//! embedding of extra generator samples.
//!
//! The trunk is `[conv3x3] → dense → leaky → dense → leaky → dense(1)`.
//! A fast critic adds `mean_rows(embed(x_e)) · P` to the first dense
//! pre-activation, where `embed` is an input projection followed by gated
//! residual blocks `h + tanh(a) ⊙ sigmoid(b)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::nn::{bias_name, dense, init_dense, init_dense_uniform, init_dense_zero, weight_name};
use crate::optim::ClipSet;
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_CLIP: f64 = 0.01;
pub const DEFAULT_CRITIC_HIDDEN: usize = 64;
pub const EMBED_WIDTH: usize = 32;
pub const EMBED_BLOCKS: usize = 2;
pub const CONV_CHANNELS: usize = 4;

const CONV: &str = "critic.conv";
const L1: &str = "critic.l1";
const L2: &str = "critic.l2";
const OUT: &str = "critic.out";
const EMBED_IN: &str = "embed.in";
const EMBED_PROJ: &str = "embed.proj.w";

fn block_prefix(k: usize) -> String {
    format!("embed.block{k}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub dim: usize,
    pub hidden: usize,
    pub clip_c: f64,
    /// Prepends a single-input-channel 3×3 convolution.
    pub image: Option<ImageShape>,
    /// Enables the extra-sample embedding path.
    pub embedding: bool,
}

impl CriticConfig {
    pub fn plain(dim: usize) -> Self {
        CriticConfig {
            dim,
            hidden: DEFAULT_CRITIC_HIDDEN,
            clip_c: DEFAULT_CLIP,
            image: None,
            embedding: false,
        }
    }

    pub fn fast(dim: usize) -> Self {
        CriticConfig {
            embedding: true,
            ..Self::plain(dim)
        }
    }
}

/// A critic `f(x)` or, with an embedding, `f(x, x_e)`.
///
/// Hidden trunk layers start uniform in the clip box and the output layer
/// starts at zero, so an untrained critic scores everything 0. Only trunk
/// parameters are clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T> {
    pub config: CriticConfig,
    pub params: ParamStore<T>,
    pub clip_set: ClipSet,
}

/// Node handles returned by [`Critic::build`].
#[derive(Debug, Clone, Copy)]
pub struct CriticNodes {
    pub scores: NodeId,
    pub embedding: Option<NodeId>,
}

impl<T: Scalar> Critic<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 {
            return Err(Error::InvalidArgument("critic widths must be positive".into()));
        }
        if !(config.clip_c > 0.0) {
            return Err(Error::InvalidArgument(format!("clip_c must be positive, got {}", config.clip_c)));
        }
        if let Some(s) = config.image {
            if s.height * s.width != config.dim {
                return Err(Error::InvalidArgument(format!(
                    "image {}x{} does not match dimension {}",
                    s.height, s.width, config.dim
                )));
            }
        }
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut params = ParamStore::new();
        let c = config.clip_c;
        let mut trunk_in = config.dim;
        if config.image.is_some() {
            init_dense_uniform(&mut params, CONV, 9, CONV_CHANNELS, c, &mut rng);
            // Kernel layout is [channels, 9].
            let w = params.remove(&weight_name(CONV)).expect("just inserted");
            let t: Vec<T> = (0..CONV_CHANNELS)
                .flat_map(|ch| (0..9).map(move |k| (ch, k)))
                .map(|(ch, k)| w.get2(k, ch))
                .collect();
            params.insert(weight_name(CONV), Tensor::from_rows(CONV_CHANNELS, 9, t)?);
            trunk_in = CONV_CHANNELS * config.dim;
        }
        init_dense_uniform(&mut params, L1, trunk_in, config.hidden, c, &mut rng);
        init_dense_uniform(&mut params, L2, config.hidden, config.hidden, c, &mut rng);
        init_dense_zero(&mut params, OUT, config.hidden, 1);
        let clip_set = ClipSet::new(params.keys().cloned().collect::<Vec<_>>());
        if config.embedding {
            init_dense(&mut params, EMBED_IN, config.dim, EMBED_WIDTH, 1.0, &mut rng);
            for k in 0..EMBED_BLOCKS {
                init_dense(&mut params, &block_prefix(k), EMBED_WIDTH, 2 * EMBED_WIDTH, 1.0, &mut rng);
            }
            let std = 1.0 / (EMBED_WIDTH as f64).sqrt();
            let p = (0..EMBED_WIDTH * config.hidden)
                .map(|_| T::from_f64(std * rng.normal()))
                .collect();
            params.insert(EMBED_PROJ.to_string(), Tensor::from_rows(EMBED_WIDTH, config.hidden, p)?);
        }
        Ok(Critic {
            config,
            params,
            clip_set,
        })
    }

    pub fn has_embedding(&self) -> bool {
        self.config.embedding
    }

    pub fn clip_c(&self) -> T {
        T::from_f64(self.config.clip_c)
    }

    /// Names of the unclipped embedding-path parameters.
    pub fn embedding_param_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| !self.clip_set.contains(k))
            .cloned()
            .collect()
    }

    /// Adds the per-sample embedding features of `x_e` averaged over rows.
    pub fn build_embedding(&self, g: &mut Graph<T>, x_e: NodeId) -> NodeId {
        let mut h = dense(g, x_e, EMBED_IN);
        for k in 0..EMBED_BLOCKS {
            let ab = dense(g, h, &block_prefix(k));
            let a = g.slice_cols(ab, 0, EMBED_WIDTH);
            let b = g.slice_cols(ab, EMBED_WIDTH, 2 * EMBED_WIDTH);
            let ta = g.tanh(a);
            let sb = g.sigmoid(b);
            let gate = g.mul(ta, sb);
            h = g.add(h, gate);
        }
        g.mean_rows(h)
    }

    /// Adds scores `[n, 1]` for `x` to `g`. `embedding`, if given, must be a
    /// `[1, EMBED_WIDTH]` node such as [`build_embedding`](Self::build_embedding)
    /// returns.
    pub fn build_trunk(&self, g: &mut Graph<T>, x: NodeId, embedding: Option<NodeId>) -> NodeId {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = x;
        if let Some(s) = self.config.image {
            let k = g.param(&weight_name(CONV));
            let b = g.param(&bias_name(CONV));
            let conv = g.conv3x3(h, k, b, s.height, s.width);
            h = g.leaky_relu(conv, slope);
        }
        let mut pre = dense(g, h, L1);
        if let Some(e) = embedding {
            let p = g.param(EMBED_PROJ);
            let bias = g.matmul(e, p);
            pre = g.add(pre, bias);
        }
        let h1 = g.leaky_relu(pre, slope);
        let h2 = dense(g, h1, L2);
        let h2 = g.leaky_relu(h2, slope);
        dense(g, h2, OUT)
    }

    /// Adds the full critic. A fast critic requires `x_e`, which enters
    /// through a stop-gradient so no gradient ever reaches it.
    pub fn build(&self, g: &mut Graph<T>, x: NodeId, x_e: Option<NodeId>) -> CriticNodes {
        let embedding = match (self.config.embedding, x_e) {
            (true, Some(xe)) => {
                let xe = g.stop_gradient(xe);
                Some(self.build_embedding(g, xe))
            }
            _ => None,
        };
        CriticNodes {
            scores: self.build_trunk(g, x, embedding),
            embedding,
        }
    }

    fn check_batch(&self, x: &Tensor<T>, what: &str) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.dim {
            return Err(Error::Shape(format!(
                "critic expects {what} of shape [n, {}], got {:?}",
                self.config.dim,
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::InvalidArgument(format!("non-finite critic {what}")));
        }
        Ok(())
    }

    /// The embedding vector of `x_e`.
    pub fn embed_distribution(&self, x_e: &Tensor<T>) -> Result<Vec<f64>> {
        if !self.config.embedding {
            return Err(Error::InvalidArgument("critic has no embedding path".into()));
        }
        if x_e.shape().first() == Some(&0) {
            return Err(Error::EmptyBatch);
        }
        self.check_batch(x_e, "extra samples")?;
        let mut g = Graph::new();
        let xe = g.input("x_e");
        let e = self.build_embedding(&mut g, xe);
        let acts = g.evaluate(&self.params, &[("x_e", x_e)])?;
        Ok(acts.value(e).to_f64_vec())
    }

    /// Plain trunk scores, ignoring any embedding path.
    pub fn critic_value(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_batch(x, "input")?;
        let mut g = Graph::new();
        let xi = g.input("x");
        let s = self.build_trunk(&mut g, xi, None);
        let acts = g.evaluate(&self.params, &[("x", x)])?;
        Ok(acts.value(s).to_f64_vec())
    }

    /// Trunk scores biased by the embedding of `x_e`.
    pub fn fast_critic_value(&self, x: &Tensor<T>, x_e: &Tensor<T>) -> Result<Vec<f64>> {
        if !self.config.embedding {
            return Err(Error::InvalidArgument("critic has no embedding path".into()));
        }
        self.check_batch(x, "input")?;
        if x_e.shape().first() == Some(&0) {
            return Err(Error::EmptyBatch);
        }
        self.check_batch(x_e, "extra samples")?;
        let mut g = Graph::new();
        let xi = g.input("x");
        let xe = g.input("x_e");
        let nodes = self.build(&mut g, xi, Some(xe));
        let acts = g.evaluate(&self.params, &[("x", x), ("x_e", x_e)])?;
        Ok(acts.value(nodes.scores).to_f64_vec())
    }

    /// Scores with the embedding path if the critic has one.
    pub fn scores(&self, x: &Tensor<T>, x_e: Option<&Tensor<T>>) -> Result<Vec<f64>> {
        match (self.config.embedding, x_e) {
            (true, Some(xe)) => self.fast_critic_value(x, xe),
            _ => self.critic_value(x),
        }
    }

    /// `Ŵ = mean f(x_r) − mean f(x_g)`.
    pub fn wgan_objective(&self, x_r: &Tensor<T>, x_g: &Tensor<T>, x_e: Option<&Tensor<T>>) -> Result<f64> {
        if x_r.shape().first() == Some(&0) || x_g.shape().first() == Some(&0) {
            return Err(Error::EmptyBatch);
        }
        let fr = self.scores(x_r, x_e)?;
        let fg = self.scores(x_g, x_e)?;
        Ok(mean(&fr) - mean(&fg))
    }

    /// Adds the critic's training loss `−(mean f(x_r) − mean f(x_g))` to `g`
    /// over inputs named `x_r`, `x_g` and, for a fast critic, `x_e`.
    pub fn build_critic_loss(&self, g: &mut Graph<T>) -> NodeId {
        let xr = g.input_no_grad("x_r");
        let xg = g.input_no_grad("x_g");
        let xe = self.config.embedding.then(|| g.input_no_grad("x_e"));
        let embedding = xe.map(|xe| self.build_embedding(g, xe));
        let fr = self.build_trunk(g, xr, embedding);
        let fg = self.build_trunk(g, xg, embedding);
        let mr = g.mean(fr);
        let mg = g.mean(fg);
        g.sub(mg, mr)
    }

    pub fn cast<U: Scalar>(&self) -> Critic<U> {
        Critic {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            clip_set: self.clip_set.clone(),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
