//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional:
//!
//! | key            | default        |
//! |----------------|----------------|
//! | dataset        | `synth_ring`   |
//! | data_seed      | `7`            |
//! | levels         | `1`            |
//! | hidden_width   | `32`           |
//! | objective      | `mle`          |
//! | lambda         | `1.0`          |
//! | n_critic       | `5`, or `2` for `wgan_fast` |
//! | total_steps    | `20000`        |
//! | seed           | `0`            |
//! | precision      | `f32`          |
//! | out_dir        | `runs/default` |
//! | clip_c         | `0.01`         |
//! | batch_size     | `64`           |
//! | eval_interval  | `250`          |
//! | critic_hidden  | `64`           |
//! | wall_clock     | `false`        |
//!
//! `dataset` is one of `synth_ring`, `synth_curve`, `idx:PATH` or
//! `fc2d:PATH`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowcritic::train::{Objective, TrainConfig};
use flowcritic::DType;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    SynthRing,
    SynthCurve,
    Idx(PathBuf),
    Fc2d(PathBuf),
}

impl FromStr for DatasetSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "synth_ring" => DatasetSpec::SynthRing,
            "synth_curve" => DatasetSpec::SynthCurve,
            _ => {
                if let Some(p) = s.strip_prefix("idx:") {
                    DatasetSpec::Idx(PathBuf::from(p))
                } else if let Some(p) = s.strip_prefix("fc2d:") {
                    DatasetSpec::Fc2d(PathBuf::from(p))
                } else {
                    return Err(format!("unknown dataset {s:?}"));
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    pub levels: usize,
    pub hidden_width: usize,
    pub objective: Objective,
    pub lambda: f64,
    n_critic: Option<u32>,
    pub total_steps: u64,
    pub seed: u64,
    pub precision: DType,
    pub out_dir: PathBuf,
    pub clip_c: f64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub critic_hidden: usize,
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::SynthRing,
            data_seed: 7,
            levels: 1,
            hidden_width: 32,
            objective: Objective::Mle,
            lambda: 1.0,
            n_critic: None,
            total_steps: 20_000,
            seed: 0,
            precision: DType::F32,
            out_dir: PathBuf::from("runs/default"),
            clip_c: 0.01,
            batch_size: 64,
            eval_interval: 250,
            critic_hidden: flowcritic::critic::DEFAULT_CRITIC_HIDDEN,
            wall_clock: false,
        }
    }
}

fn parse_precision(v: &str) -> Option<DType> {
    match v {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: format!("line {}", lineno + 1),
                detail: "expected key = value".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: "config".into(),
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Sets one key, rejecting unknown keys and unparsable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |detail: String| CliError::Config {
            key: key.to_string(),
            detail,
        };
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        match key {
            "dataset" => self.dataset = value.parse().map_err(bad)?,
            "data_seed" => self.data_seed = num(value).map_err(bad)?,
            "levels" => self.levels = num(value).map_err(bad)?,
            "hidden_width" => self.hidden_width = num(value).map_err(bad)?,
            "objective" => {
                self.objective = Objective::parse(value).ok_or_else(|| bad(format!("unknown objective {value:?}")))?
            }
            "lambda" => self.lambda = num(value).map_err(bad)?,
            "n_critic" => self.n_critic = Some(num(value).map_err(bad)?),
            "total_steps" => self.total_steps = num(value).map_err(bad)?,
            "seed" => self.seed = num(value).map_err(bad)?,
            "precision" => {
                self.precision = parse_precision(value).ok_or_else(|| bad(format!("expected f32 or f64, got {value:?}")))?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "clip_c" => self.clip_c = num(value).map_err(bad)?,
            "batch_size" => self.batch_size = num(value).map_err(bad)?,
            "eval_interval" => self.eval_interval = num(value).map_err(bad)?,
            "critic_hidden" => self.critic_hidden = num(value).map_err(bad)?,
            "wall_clock" => self.wall_clock = parse_bool(value).ok_or_else(|| bad(format!("expected true or false, got {value:?}")))?,
            _ => return Err(bad("unknown key".into())),
        }
        Ok(())
    }

    pub fn n_critic(&self) -> u32 {
        self.n_critic.unwrap_or(self.objective.default_n_critic())
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut t = TrainConfig::new(self.objective);
        t.batch_size = self.batch_size;
        t.clip_c = self.clip_c;
        t.n_critic = self.n_critic();
        t.total_generator_steps = self.total_steps;
        t.combined_lambda = self.lambda;
        t.seed = self.seed;
        t.eval_interval = self.eval_interval;
        t.critic_hidden = self.critic_hidden;
        t.wall_clock = self.wall_clock;
        t.validate().map_err(|e| CliError::Config {
            key: "config".into(),
            detail: e.to_string(),
        })?;
        if !(1..=3).contains(&self.levels) {
            return Err(CliError::Config {
                key: "levels".into(),
                detail: format!("must be 1, 2 or 3, got {}", self.levels),
            });
        }
        if self.hidden_width == 0 {
            return Err(CliError::Config {
                key: "hidden_width".into(),
                detail: "must be positive".into(),
            });
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("# comment\n\nobjective = wgan_fast\nseed=3\n").unwrap();
        assert_eq!(c.objective, Objective::WganFast);
        assert_eq!(c.n_critic(), 2);
        assert_eq!(c.seed, 3);
        assert_eq!(c.batch_size, 64);
        let c = RunConfig::parse("objective=wgan_fast\nn_critic=7").unwrap();
        assert_eq!(c.n_critic(), 7);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("learning_rate = 3") {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "learning_rate"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("levels = many") {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "levels"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_specs() {
        assert_eq!("idx:/a/b".parse::<DatasetSpec>().unwrap(), DatasetSpec::Idx("/a/b".into()));
        assert!("mnist".parse::<DatasetSpec>().is_err());
    }
}
