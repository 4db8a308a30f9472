//! Maximum-likelihood, WGAN and combined training loops over a resumable
//! [`RunState`].

use std::time::Instant;

use crate::critic::{Critic, CriticConfig, ImageShape};
use crate::data::{Dataset, Origin};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::graph::{Graph, NodeId};
use crate::optim::{clip_to_box, OptState, Optimizer};
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Mle,
    Wgan,
    WganFast,
    Combined,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mle => "mle",
            Objective::Wgan => "wgan",
            Objective::WganFast => "wgan_fast",
            Objective::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mle" => Objective::Mle,
            "wgan" => Objective::Wgan,
            "wgan_fast" => Objective::WganFast,
            "combined" => Objective::Combined,
            _ => return None,
        })
    }

    pub fn uses_critic(self) -> bool {
        self != Objective::Mle
    }

    pub fn default_n_critic(self) -> u32 {
        if self == Objective::WganFast {
            2
        } else {
            5
        }
    }

    /// Adam 1e-3 for maximum likelihood, RMSProp 5e-5 whenever a critic
    /// drives the generator.
    pub fn default_generator_optimizer(self) -> Optimizer {
        match self {
            Objective::Mle => Optimizer::adam_default(),
            _ => Optimizer::rmsprop_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub lr_critic: f64,
    pub clip_c: f64,
    pub n_critic: u32,
    pub boost_updates: u32,
    pub boost_first_steps: u64,
    pub boost_every: u64,
    pub total_generator_steps: u64,
    pub combined_lambda: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub generator_optimizer: Optimizer,
    pub critic_hidden: usize,
    pub extra_samples: usize,
    /// Examples per split used for the NLL metrics.
    pub eval_examples: usize,
    /// Record real elapsed time in `wall_ms`; off keeps metrics reproducible.
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn new(objective: Objective) -> Self {
        TrainConfig {
            objective,
            batch_size: 64,
            lr_critic: 5e-5,
            clip_c: 0.01,
            n_critic: objective.default_n_critic(),
            boost_updates: 100,
            boost_first_steps: 25,
            boost_every: 500,
            total_generator_steps: 20_000,
            combined_lambda: 1.0,
            seed: 0,
            eval_interval: 250,
            generator_optimizer: objective.default_generator_optimizer(),
            critic_hidden: crate::critic::DEFAULT_CRITIC_HIDDEN,
            extra_samples: 64,
            eval_examples: 2048,
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_critic > 0.0) {
            return bad("lr_critic must be positive");
        }
        if !(self.clip_c > 0.0) {
            return bad("clip_c must be positive");
        }
        if self.n_critic == 0 || self.boost_updates == 0 || self.boost_every == 0 {
            return bad("critic update counts must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if !(self.combined_lambda >= 0.0) || !self.combined_lambda.is_finite() {
            return bad("lambda must be finite and non-negative");
        }
        if self.critic_hidden == 0 || self.extra_samples == 0 || self.eval_examples == 0 {
            return bad("critic_hidden, extra_samples and eval_examples must be positive");
        }
        Ok(())
    }

    /// The critic this configuration trains against `data`.
    pub fn critic_config(&self, data: &Dataset) -> CriticConfig {
        CriticConfig {
            dim: data.dim,
            hidden: self.critic_hidden,
            clip_c: self.clip_c,
            image: match data.origin {
                Origin::IdxImages { height, width } => Some(ImageShape { height, width }),
                _ => None,
            },
            embedding: self.objective == Objective::WganFast,
        }
    }
}

/// Critic updates before generator step `step` (0-based).
pub fn critic_schedule(step: u64, cfg: &TrainConfig) -> u32 {
    if step < cfg.boost_first_steps || step.is_multiple_of(cfg.boost_every) {
        cfg.boost_updates
    } else {
        cfg.n_critic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub wall_ms: u64,
    pub metric: String,
    pub value: f64,
    pub split: String,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState<T> {
    pub step: u64,
    pub seed: u64,
    pub generator: FlowModel<T>,
    pub critic: Option<Critic<T>>,
    pub gen_opt: OptState<T>,
    pub critic_opt: OptState<T>,
    pub data_rng: RngStream,
    pub noise_rng: RngStream,
    pub dequant_rng: RngStream,
}

impl<T: Scalar> RunState<T> {
    pub fn new(seed: u64, generator: FlowModel<T>, critic: Option<Critic<T>>) -> Self {
        RunState {
            step: 0,
            seed,
            generator,
            critic,
            gen_opt: OptState::new(),
            critic_opt: OptState::new(),
            data_rng: RngStream::new(seed, streams::DATA),
            noise_rng: RngStream::new(seed, streams::NOISE),
            dequant_rng: RngStream::new(seed, streams::DEQUANT),
        }
    }

    /// A fresh run with the critic `cfg` asks for on `data`.
    pub fn for_config(cfg: &TrainConfig, generator: FlowModel<T>, data: &Dataset) -> Result<Self> {
        let critic = if cfg.objective.uses_critic() {
            Some(Critic::new(cfg.critic_config(data), cfg.seed.wrapping_add(1))?)
        } else {
            None
        };
        Ok(Self::new(cfg.seed, generator, critic))
    }
}

fn diverged(step: u64, what: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let what = what.into();
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::LayerNonFinite { .. } => Error::Diverged {
            step,
            what: format!("{what}: {e}"),
        },
        other => other,
    }
}

/// `a * x + b` elementwise, in-graph.
fn affine_map<T: Scalar>(g: &mut Graph<T>, x: NodeId, a: f64, b: f64) -> NodeId {
    let s = g.scale(x, T::from_f64(a));
    g.add_scalar(s, T::from_f64(b))
}

struct Graphs<T> {
    nll: Option<(Graph<T>, NodeId)>,
    critic: Option<(Graph<T>, NodeId)>,
    generator: Option<(Graph<T>, NodeId)>,
}

/// Receives each batch of metrics rows together with the state they describe.
pub type EvalSink<'a, T> = dyn FnMut(&RunState<T>, &[MetricsRow]) -> Result<()> + 'a;

/// Prebuilt graphs for one run. Graphs only depend on architecture, so they
/// are reused across every step.
pub struct Trainer<'a, T> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    valid: &'a Dataset,
    graphs: Graphs<T>,
    started: Instant,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: &'a TrainConfig, state: &RunState<T>, train: &'a Dataset, valid: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let gen = &state.generator;
        if train.dim != gen.dim || valid.dim != gen.dim {
            return Err(Error::InvalidArgument(format!(
                "data dimension {} does not match the generator's {}",
                train.dim, gen.dim
            )));
        }
        let objective = cfg.objective;
        let nll = (objective == Objective::Mle).then(|| {
            let mut g = Graph::new();
            let x = g.input_no_grad("x");
            let (lp, _) = gen.build_log_prob(&mut g, x);
            let m = g.mean(lp);
            let loss = g.neg(m);
            (g, loss)
        });
        let (critic, generator) = if objective.uses_critic() {
            let critic = state
                .critic
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("objective {} needs a critic", objective.name())))?;
            if critic.config.dim != gen.dim {
                return Err(Error::InvalidArgument("critic and generator dimensions differ".into()));
            }
            if critic.has_embedding() != (objective == Objective::WganFast) {
                return Err(Error::InvalidArgument(
                    "only the wgan_fast objective uses an embedding critic".into(),
                ));
            }
            let mut cg = Graph::new();
            let closs = critic.build_critic_loss(&mut cg);

            let mut gg = Graph::new();
            let z = gg.input_no_grad("z");
            let x = gen.build_forward(&mut gg, z).output;
            let xc = affine_map(&mut gg, x, train.critic_scale, train.critic_shift);
            let xe = critic.has_embedding().then(|| {
                let ze = gg.input("z_e");
                let xe = gen.build_forward(&mut gg, ze).output;
                affine_map(&mut gg, xe, train.critic_scale, train.critic_shift)
            });
            let scores = critic.build(&mut gg, xc, xe).scores;
            let m = gg.mean(scores);
            let mut loss = gg.neg(m);
            if objective == Objective::Combined {
                let xr = gg.input_no_grad("x_r");
                let (lp, _) = gen.build_log_prob(&mut gg, xr);
                let ml = gg.mean(lp);
                let nll = gg.neg(ml);
                let weighted = gg.scale(nll, T::from_f64(cfg.combined_lambda));
                loss = gg.add(loss, weighted);
            }
            (Some((cg, closs)), Some((gg, loss)))
        } else {
            (None, None)
        };
        Ok(Trainer {
            cfg,
            train,
            valid,
            graphs: Graphs { nll, critic, generator },
            started: Instant::now(),
        })
    }

    /// The generator NLL graph (input `x`), present for `mle`.
    pub fn nll_graph(&self) -> Option<(&Graph<T>, NodeId)> {
        self.graphs.nll.as_ref().map(|(g, l)| (g, *l))
    }

    /// The critic loss graph (inputs `x_r`, `x_g`, optionally `x_e`).
    pub fn critic_graph(&self) -> Option<(&Graph<T>, NodeId)> {
        self.graphs.critic.as_ref().map(|(g, l)| (g, *l))
    }

    /// The generator loss graph (inputs `z`, optionally `z_e` and `x_r`),
    /// reading parameters from the generator and critic stores.
    pub fn generator_graph(&self) -> Option<(&Graph<T>, NodeId)> {
        self.graphs.generator.as_ref().map(|(g, l)| (g, *l))
    }

    fn wall_ms(&self) -> u64 {
        if self.cfg.wall_clock {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn generate(state: &mut RunState<T>, n: usize) -> Result<Tensor<T>> {
        let z = state.noise_rng.normal_tensor(n, state.generator.dim);
        Ok(state.generator.forward(&z)?.value)
    }

    fn mle_step(&self, state: &mut RunState<T>) -> Result<f64> {
        let (g, loss) = self.graphs.nll.as_ref().expect("mle graph");
        let x = self
            .train
            .sample_batch::<T>(self.cfg.batch_size, &mut state.data_rng, &mut state.dequant_rng);
        let step = state.step;
        let acts = g
            .evaluate(&state.generator.params, &[("x", &x)])
            .map_err(diverged(step, "nll"))?;
        let value = acts.value(*loss).item().to_f64();
        let grads = g.backward(&acts, *loss)?;
        self.cfg
            .generator_optimizer
            .step(&mut state.generator.params, &grads.params, &mut state.gen_opt)
            .map_err(diverged(step, "nll gradient"))?;
        Ok(value)
    }

    /// One critic update. Returns the critic's `Ŵ` on the batch and the real
    /// batch in model space.
    fn critic_step(&self, state: &mut RunState<T>) -> Result<(f64, Tensor<T>)> {
        let (g, loss) = self.graphs.critic.as_ref().expect("critic graph");
        let n = self.cfg.batch_size;
        let x_r = self.train.sample_batch::<T>(n, &mut state.data_rng, &mut state.dequant_rng);
        let x_g = Self::generate(state, n)?;
        let critic = state.critic.as_mut().expect("critic");
        let x_e = if critic.has_embedding() {
            let z = state.noise_rng.normal_tensor(self.cfg.extra_samples, state.generator.dim);
            Some(self.train.to_critic_space(&state.generator.forward(&z)?.value))
        } else {
            None
        };
        let xr_c = self.train.to_critic_space(&x_r);
        let xg_c = self.train.to_critic_space(&x_g);
        let mut inputs: Vec<(&str, &Tensor<T>)> = vec![("x_r", &xr_c), ("x_g", &xg_c)];
        if let Some(xe) = &x_e {
            inputs.push(("x_e", xe));
        }
        let step = state.step;
        let acts = g.evaluate(&critic.params, &inputs).map_err(diverged(step, "critic"))?;
        let w = -acts.value(*loss).item().to_f64();
        let grads = g.backward(&acts, *loss)?;
        let opt = Optimizer::RmsProp {
            lr: self.cfg.lr_critic,
            decay: 0.99,
        };
        opt.step(&mut critic.params, &grads.params, &mut state.critic_opt)
            .map_err(diverged(step, "critic gradient"))?;
        let c = critic.clip_c();
        clip_to_box(&mut critic.params, c, &critic.clip_set);
        Ok((w, x_r))
    }

    fn generator_step(&self, state: &mut RunState<T>, x_r: &Tensor<T>) -> Result<f64> {
        let (g, loss) = self.graphs.generator.as_ref().expect("generator graph");
        let n = self.cfg.batch_size;
        let dim = state.generator.dim;
        let z = state.noise_rng.normal_tensor(n, dim);
        let critic = state.critic.as_ref().expect("critic");
        let z_e = critic
            .has_embedding()
            .then(|| state.noise_rng.normal_tensor(self.cfg.extra_samples, dim));
        let mut inputs: Vec<(&str, &Tensor<T>)> = vec![("z", &z)];
        if let Some(ze) = &z_e {
            inputs.push(("z_e", ze));
        }
        if self.cfg.objective == Objective::Combined {
            inputs.push(("x_r", x_r));
        }
        let step = state.step;
        let acts = g
            .evaluate_with(&[&state.generator.params, &critic.params], &inputs)
            .map_err(diverged(step, "generator"))?;
        let value = acts.value(*loss).item().to_f64();
        let grads = g.backward(&acts, *loss)?;
        let gen_grads = grads
            .params
            .into_iter()
            .filter(|(k, _)| state.generator.params.contains_key(k))
            .collect();
        self.cfg
            .generator_optimizer
            .step(&mut state.generator.params, &gen_grads, &mut state.gen_opt)
            .map_err(diverged(step, "generator gradient"))?;
        Ok(value)
    }

    /// Advances one generator step. Returns `(generator loss, critic Ŵ)`.
    pub fn step(&self, state: &mut RunState<T>) -> Result<(f64, Option<f64>)> {
        if self.cfg.objective == Objective::Mle {
            let l = self.mle_step(state)?;
            state.step += 1;
            return Ok((l, None));
        }
        let updates = critic_schedule(state.step, self.cfg);
        let mut last = None;
        for _ in 0..updates {
            last = Some(self.critic_step(state)?);
        }
        let (w, x_r) = last.expect("at least one critic update");
        let l = self.generator_step(state, &x_r)?;
        state.step += 1;
        Ok((l, Some(w)))
    }

    fn eval_rng(state: &RunState<T>) -> RngStream {
        RngStream::new(state.seed ^ state.step.wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::EVAL)
    }

    /// Mean per-dimension NLL of the first `eval_examples` rows of `data`.
    pub fn mean_nll(&self, state: &RunState<T>, data: &Dataset) -> Result<f64> {
        let n = data.len().min(self.cfg.eval_examples);
        let idx: Vec<usize> = (0..n).collect();
        let x = data.batch::<T>(&idx, &mut Self::eval_rng(state));
        let lp = state
            .generator
            .log_prob(&x)
            .map_err(diverged(state.step, "evaluation"))?;
        Ok(lp.iter().map(|&l| data.nll_per_dim(l)).sum::<f64>() / n as f64)
    }

    fn metrics(&self, state: &RunState<T>, loss: Option<f64>, w: Option<f64>) -> Result<Vec<MetricsRow>> {
        let wall_ms = self.wall_ms();
        let row = |metric: &str, value: f64, split: &str| MetricsRow {
            step: state.step,
            wall_ms,
            metric: metric.to_string(),
            value,
            split: split.to_string(),
        };
        let mut rows = vec![
            row("nll_train", self.mean_nll(state, self.train)?, "train"),
            row("nll_valid", self.mean_nll(state, self.valid)?, "valid"),
        ];
        if let Some(l) = loss {
            rows.push(row("loss_gen", l, "train"));
        }
        if let Some(w) = w {
            rows.push(row("w_critic", w, "train"));
        }
        Ok(rows)
    }

    /// Trains until `state.step == until`, calling `on_eval` with fresh
    /// metrics at step 0, every `eval_interval` steps and at `until`.
    pub fn run(
        &self,
        state: &mut RunState<T>,
        until: u64,
        on_eval: &mut EvalSink<'_, T>,
    ) -> Result<()> {
        if state.step == 0 {
            let rows = self.metrics(state, None, None)?;
            on_eval(state, &rows)?;
        }
        while state.step < until {
            let (loss, w) = self.step(state)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    what: "generator loss".into(),
                });
            }
            if state.step.is_multiple_of(self.cfg.eval_interval) || state.step == until {
                let rows = self.metrics(state, Some(loss), w)?;
                on_eval(state, &rows)?;
            }
        }
        Ok(())
    }
}

/// A trained model with every metrics row the run emitted.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: RunState<T>,
    pub metrics: Vec<MetricsRow>,
}

fn run_to_end<T: Scalar>(mut state: RunState<T>, cfg: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<TrainOutcome<T>> {
    let trainer = Trainer::new(cfg, &state, train, valid)?;
    let mut metrics = Vec::new();
    trainer.run(&mut state, cfg.total_generator_steps, &mut |_, rows| {
        metrics.extend_from_slice(rows);
        Ok(())
    })?;
    Ok(TrainOutcome { state, metrics })
}

/// Maximum-likelihood training of `model` for `cfg.total_generator_steps`.
pub fn train_mle<T: Scalar>(model: FlowModel<T>, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    if cfg.objective != Objective::Mle {
        return Err(Error::InvalidArgument("train_mle needs objective mle".into()));
    }
    run_to_end(RunState::new(cfg.seed, model, None), cfg, train, valid)
}

/// Adversarial training with `critic`, plain or fast per `cfg.objective`.
pub fn train_wgan<T: Scalar>(
    model: FlowModel<T>,
    critic: Critic<T>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if !matches!(cfg.objective, Objective::Wgan | Objective::WganFast) {
        return Err(Error::InvalidArgument("train_wgan needs objective wgan or wgan_fast".into()));
    }
    run_to_end(RunState::new(cfg.seed, model, Some(critic)), cfg, train, valid)
}

/// Generator loss `−mean f(x_g) + λ · NLL_mean(x_r)`, with `x_r` the real
/// batch of the step's last critic update.
pub fn train_combined<T: Scalar>(
    model: FlowModel<T>,
    critic: Critic<T>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if cfg.objective != Objective::Combined {
        return Err(Error::InvalidArgument("train_combined needs objective combined".into()));
    }
    run_to_end(RunState::new(cfg.seed, model, Some(critic)), cfg, train, valid)
}
