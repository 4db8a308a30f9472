//! `train`, `eval` and `sample`.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use flowcritic::critic::{CriticConfig, ImageShape};
use flowcritic::data::{read_synth, Dataset, Origin};
use flowcritic::eval::{self, IndependentCriticConfig, KlDiscConfig};
use flowcritic::rng::{streams, RngStream};
use flowcritic::train::{MetricsRow, RunState, Trainer};
use flowcritic::{DType, FlowModel, Half, Scalar, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datasets::{self, Splits};
use crate::error::CliError;
use crate::metrics::{format_f64, write_table, MetricsWriter};
use crate::pgm;
use crate::state::{checkpoint_to_state, state_to_checkpoint};

pub const LATEST: &str = "latest.rnvp";
pub const FINAL: &str = "final.rnvp";
pub const METRICS: &str = "metrics.csv";
const LOCK: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutDirLock(PathBuf);

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs (or with `resume`, continues) the configured training loop.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    match cfg.precision {
        DType::F32 => train_typed::<f32>(cfg, resume),
        DType::F64 => train_typed::<f64>(cfg, resume),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let tcfg = cfg.train_config()?;
    let splits = datasets::load(&cfg.dataset, cfg.data_seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    let latest = cfg.out_dir.join(LATEST);
    let metrics_path = cfg.out_dir.join(METRICS);

    let (mut state, mut metrics) = if resume && latest.exists() {
        let state = checkpoint_to_state::<T>(&Checkpoint::load(&latest)?)?;
        let m = MetricsWriter::resume(&metrics_path, state.step)?;
        (state, m)
    } else {
        let model = FlowModel::<T>::build_nvp(cfg.levels, splits.train.dim, cfg.hidden_width, cfg.seed)?;
        let state = RunState::for_config(&tcfg, model, &splits.train)?;
        (state, MetricsWriter::create(&metrics_path)?)
    };
    let trainer = Trainer::new(&tcfg, &state, &splits.train, &splits.valid)?;

    let mut last_good = if state.step > 0 {
        format!("{} (step {})", latest.display(), state.step)
    } else {
        "none".to_string()
    };
    let mut sink_error: Option<CliError> = None;
    let mut on_eval = |s: &RunState<T>, rows: &[MetricsRow]| -> flowcritic::Result<()> {
        let res = metrics.append(rows).and_then(|_| {
            state_to_checkpoint(s).save(&latest)?;
            Ok(())
        });
        match res {
            Ok(()) => {
                last_good = format!("{} (step {})", latest.display(), s.step);
                Ok(())
            }
            Err(e) => {
                sink_error = Some(e);
                Err(flowcritic::Error::Io(std::io::Error::other("output sink failed")))
            }
        }
    };
    let result = trainer.run(&mut state, tcfg.total_generator_steps, &mut on_eval);
    if let Some(e) = sink_error {
        return Err(e);
    }
    match result {
        Ok(()) => {}
        Err(flowcritic::Error::Diverged { step, what }) => {
            return Err(CliError::Diverged { step, what, last_good });
        }
        Err(e) => return Err(e.into()),
    }
    let ck = state_to_checkpoint(&state);
    ck.save(&latest)?;
    ck.save(&cfg.out_dir.join(FINAL))?;
    Ok(())
}

fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let fin = cfg.out_dir.join(FINAL);
    if fin.exists() {
        fin
    } else {
        cfg.out_dir.join(LATEST)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Wdist,
    Bpd,
    Latents,
    NllHist,
    JRank,
    KlGap,
}

impl ReportKind {
    pub const ALL: [ReportKind; 6] = [
        ReportKind::Wdist,
        ReportKind::Bpd,
        ReportKind::Latents,
        ReportKind::NllHist,
        ReportKind::JRank,
        ReportKind::KlGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Wdist => "wdist",
            ReportKind::Bpd => "bpd",
            ReportKind::Latents => "latents",
            ReportKind::NllHist => "nllhist",
            ReportKind::JRank => "jrank",
            ReportKind::KlGap => "klgap",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<ReportKind>, CliError> {
        s.split(',')
            .map(str::trim)
            .filter(|k| !k.is_empty())
            .map(|k| {
                Self::ALL
                    .into_iter()
                    .find(|r| r.name() == k)
                    .ok_or_else(|| CliError::Usage(format!("unknown report kind {k:?}")))
            })
            .collect()
    }
}

/// One CSV file of a report.
pub struct Table {
    pub file: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

/// Writes one CSV per requested kind into `out_dir/eval`.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, kinds: &[ReportKind]) -> Result<Vec<PathBuf>, CliError> {
    let ck = Checkpoint::load(&resolve_checkpoint(cfg, checkpoint))?;
    let splits = datasets::load(&cfg.dataset, cfg.data_seed)?;
    let tables = match ck.dtype {
        DType::F32 => eval_typed::<f32>(cfg, &ck, &splits, kinds)?,
        DType::F64 => eval_typed::<f64>(cfg, &ck, &splits, kinds)?,
    };
    let dir = cfg.out_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for t in tables {
        let path = dir.join(&t.file);
        write_table(&path, &t.header, &t.rows)?;
        written.push(path);
    }
    Ok(written)
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, ck: &Checkpoint, splits: &Splits, kinds: &[ReportKind]) -> Result<Vec<Table>, CliError> {
    let state = checkpoint_to_state::<T>(ck)?;
    let model = &state.generator;
    if model.dim != splits.train.dim {
        return Err(CliError::Usage(format!(
            "checkpoint dimension {} does not match dataset dimension {}",
            model.dim, splits.train.dim
        )));
    }
    let results: Vec<Result<Vec<Table>, CliError>> = kinds
        .par_iter()
        .map(|&k| report::<T>(k, cfg, model, splits))
        .collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn f(v: f64) -> String {
    format_f64(v)
}

fn image_shape(d: &Dataset) -> Option<ImageShape> {
    match d.origin {
        Origin::IdxImages { height, width } => Some(ImageShape { height, width }),
        _ => None,
    }
}

/// Critic-space pool of `n` generator samples.
fn generator_pool<T: Scalar>(model: &FlowModel<T>, data: &Dataset, n: usize, seed: u64) -> Result<Tensor<T>, CliError> {
    let (x, _) = model.sample(n, seed)?;
    Ok(data.to_critic_space(&x))
}

fn report<T: Scalar>(kind: ReportKind, cfg: &RunConfig, model: &FlowModel<T>, s: &Splits) -> Result<Vec<Table>, CliError> {
    let seed = cfg.seed;
    let mut eval_rng = RngStream::new(seed, streams::EVAL);
    Ok(match kind {
        ReportKind::Wdist => {
            let critic = CriticConfig {
                hidden: cfg.critic_hidden,
                clip_c: cfg.clip_c,
                image: image_shape(&s.train),
                ..CriticConfig::plain(model.dim)
            };
            let ic_cfg = IndependentCriticConfig::new(critic);
            let xv = s.valid.to_critic_space(&s.valid.all::<T>(&mut eval_rng));
            let pool = s.valid.len().max(4096);
            let train_pool = generator_pool(model, &s.valid, pool, seed ^ 0x5A5A)?;
            let ic = eval::train_independent_critic(&xv, &train_pool, &ic_cfg, seed)?;
            let held_out = generator_pool(model, &s.valid, pool, seed ^ 0xA5A5)?;
            let mut rows = Vec::new();
            for (name, d) in [("valid", &s.valid), ("train", &s.train), ("test", &s.test)] {
                let x = d.to_critic_space(&d.all::<T>(&mut eval_rng));
                let w = eval::w_hat(&ic, &x, &held_out, 200, 64, seed)?;
                rows.push(vec![name.to_string(), f(w.value), f(w.std)]);
            }
            vec![Table {
                file: "wdist.csv".into(),
                header: vec!["source", "w_hat", "bootstrap_std"],
                rows,
            }]
        }
        ReportKind::Bpd => {
            let unit = if s.train.is_quantized() { "bits/dim" } else { "nats/dim" };
            let mut rows = Vec::new();
            for (name, d) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
                let lp = model.log_prob(&d.all::<T>(&mut eval_rng))?;
                let v = lp.iter().map(|&l| d.nll_per_dim(l)).sum::<f64>() / lp.len() as f64;
                rows.push(vec![name.to_string(), f(v), unit.to_string()]);
            }
            let (_, lp) = model.sample(s.valid.len(), seed)?;
            let v = lp.iter().map(|&l| s.valid.nll_per_dim(l)).sum::<f64>() / lp.len() as f64;
            rows.push(vec!["samples".to_string(), f(v), unit.to_string()]);
            vec![Table {
                file: "bpd.csv".into(),
                header: vec!["split", "nll", "unit"],
                rows,
            }]
        }
        ReportKind::Latents => {
            let x = s.valid.all::<T>(&mut eval_rng);
            let st = eval::latent_stats(model, &x, (0, 1), 20, (-5.0, 5.0))?;
            let rows = (0..model.dim)
                .map(|d| vec![d.to_string(), f(st.mean[d]), f(st.std[d])])
                .collect();
            let g = &st.grid;
            let cell = (g.hi - g.lo) / g.bins as f64;
            let grid_rows = (0..g.bins * g.bins)
                .map(|k| {
                    let (i, j) = (k / g.bins, k % g.bins);
                    vec![f(g.lo + cell * i as f64), f(g.lo + cell * j as f64), g.counts[k].to_string()]
                })
                .collect();
            vec![
                Table {
                    file: "latents.csv".into(),
                    header: vec!["dim", "mean", "std"],
                    rows,
                },
                Table {
                    file: "latents_grid.csv".into(),
                    header: vec!["z_first_lo", "z_second_lo", "count"],
                    rows: grid_rows,
                },
            ]
        }
        ReportKind::NllHist => {
            let h = eval::nll_histogram(model, &s.valid.all::<T>(&mut eval_rng), 50)?;
            let rows = h
                .counts
                .iter()
                .enumerate()
                .map(|(i, c)| vec![f(h.edges[i]), f(h.edges[i + 1]), c.to_string()])
                .collect();
            vec![Table {
                file: "nllhist.csv".into(),
                header: vec!["bin_lo", "bin_hi", "count"],
                rows,
            }]
        }
        ReportKind::JRank => {
            let probes = eval_rng.normal_tensor::<T>(5, model.dim);
            let ranks = eval::jacobian_rank(model, &probes, eval::DEFAULT_TOL_RATIO)?;
            let mut rows = Vec::new();
            for (p, r) in ranks.iter().enumerate() {
                for (i, sv) in r.singular_values.iter().enumerate() {
                    rows.push(vec![p.to_string(), i.to_string(), f(*sv), r.rank.to_string()]);
                }
            }
            vec![Table {
                file: "jrank.csv".into(),
                header: vec!["probe", "index", "singular_value", "rank"],
                rows,
            }]
        }
        ReportKind::KlGap => {
            let g = eval::kl_gap(&model.cast::<f64>(), 10_000, &KlDiscConfig::default(), seed)?;
            vec![Table {
                file: "klgap.csv".into(),
                header: vec!["kl_unbiased", "kl_disc"],
                rows: vec![vec![f(g.kl_unbiased), f(g.kl_disc)]],
            }]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Fresh,
    PartialFirst,
    PartialSecond,
}

impl SampleMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fresh" => SampleMode::Fresh,
            "partial_first" => SampleMode::PartialFirst,
            "partial_second" => SampleMode::PartialSecond,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Fresh => "fresh",
            SampleMode::PartialFirst => "partial_first",
            SampleMode::PartialSecond => "partial_second",
        }
    }
}

/// Draws samples and writes them with their log-densities. Image runs get a
/// PGM grid; continuous runs get one CSV row per sample.
pub fn sample(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    n: usize,
    mode: SampleMode,
    input: Option<&Path>,
) -> Result<Vec<PathBuf>, CliError> {
    if mode != SampleMode::Fresh && input.is_none() {
        return Err(CliError::Usage(format!("mode {} needs --input", mode.name())));
    }
    if n == 0 && mode == SampleMode::Fresh {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let ck = Checkpoint::load(&resolve_checkpoint(cfg, checkpoint))?;
    let image = matches!(cfg.dataset, crate::config::DatasetSpec::Idx(_));
    match ck.dtype {
        DType::F32 => sample_typed::<f32>(cfg, &ck, n, mode, input, image),
        DType::F64 => sample_typed::<f64>(cfg, &ck, n, mode, input, image),
    }
}

fn sample_typed<T: Scalar>(
    cfg: &RunConfig,
    ck: &Checkpoint,
    n: usize,
    mode: SampleMode,
    input: Option<&Path>,
    image: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let model = checkpoint_to_state::<T>(ck)?.generator;
    let (x, lp) = match mode {
        SampleMode::Fresh => model.sample(n, cfg.seed)?,
        SampleMode::PartialFirst | SampleMode::PartialSecond => {
            let path = input.expect("checked above");
            let (rows, d, values) = read_synth(&fs::read(path)?)?;
            if d != model.dim || rows == 0 {
                return Err(CliError::Usage(format!(
                    "input batch has {rows} rows of width {d}, model expects width {}",
                    model.dim
                )));
            }
            let xin = Tensor::from_rows(rows, d, values.into_iter().map(T::from_f64).collect())?;
            let half = if mode == SampleMode::PartialFirst { Half::First } else { Half::Second };
            let x = model.partial_resample(&xin, half, cfg.seed)?;
            let lp = model.log_prob(&x)?;
            (x, lp)
        }
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let stem = format!("samples_{}", mode.name());
    let mut written = Vec::new();
    let side = (model.dim as f64).sqrt().round() as usize;
    match image {
        true if side * side == model.dim => {
            let px = pgm::to_pixels(&x.to_f64_vec());
            let (w, h, grid) = pgm::grid(&px, x.rows(), side, side);
            let path = cfg.out_dir.join(format!("{stem}.pgm"));
            let mut file = fs::File::create(&path)?;
            pgm::write_pgm(&mut file, w, h, &grid)?;
            written.push(path);
            let lp_path = cfg.out_dir.join(format!("{stem}_logprob.csv"));
            let rows = lp.iter().enumerate().map(|(i, l)| vec![i.to_string(), f(*l)]).collect::<Vec<_>>();
            write_table(&lp_path, &["index", "logprob"], &rows)?;
            written.push(lp_path);
        }
        _ => {
            let names: Vec<String> = if model.dim == 2 {
                vec!["x".into(), "y".into()]
            } else {
                (0..model.dim).map(|i| format!("x{i}")).collect()
            };
            let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
            header.push("logprob");
            let rows = (0..x.rows())
                .map(|r| {
                    let mut row: Vec<String> = x.row_slice(r).iter().map(|v| f(v.to_f64())).collect();
                    row.push(f(lp[r]));
                    row
                })
                .collect::<Vec<_>>();
            let path = cfg.out_dir.join(format!("{stem}.csv"));
            write_table(&path, &header, &rows)?;
            written.push(path);
        }
    }
    Ok(written)
}
