//! Conversion between training state and checkpoints.

use flowcritic::critic::{Critic, CriticConfig, ImageShape};
use flowcritic::optim::OptState;
use flowcritic::rng::{streams, RngStream};
use flowcritic::train::RunState;
use flowcritic::{DType, FlowModel, ParamStore, Scalar};

use crate::checkpoint::{from_chunks, to_chunks, Checkpoint, NamedArray};
use crate::error::CheckpointError;

const RNG_CHUNKS: usize = 8;
const STEP_CHUNKS: usize = 4;
const FLOAT_CHUNKS: usize = 4;

/// Metadata floats are stored by bit pattern so narrow checkpoints keep them exact.
fn float_chunks(v: f64) -> Vec<f64> {
    to_chunks(v.to_bits() as u128, FLOAT_CHUNKS)
}

fn chunks_float(c: &[f64]) -> Result<f64, CheckpointError> {
    let bits = from_chunks(c)?;
    u64::try_from(bits)
        .map(f64::from_bits)
        .map_err(|_| CheckpointError::Malformed("bad float chunks".into()))
}

fn push_store<T: Scalar>(out: &mut Vec<NamedArray>, prefix: &str, store: &ParamStore<T>) {
    for (k, v) in store {
        out.push(NamedArray::from_tensor(format!("{prefix}/{k}"), v));
    }
}

fn read_store<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<ParamStore<T>, CheckpointError> {
    let p = format!("{prefix}/");
    ck.arrays
        .iter()
        .filter_map(|a| a.name.strip_prefix(&p).map(|k| (k, a)))
        .map(|(k, a)| Ok((k.to_string(), a.to_tensor()?)))
        .collect()
}

fn push_opt<T: Scalar>(out: &mut Vec<NamedArray>, prefix: &str, opt: &OptState<T>) {
    out.push(NamedArray::from_values(
        format!("{prefix}.step"),
        to_chunks(opt.step as u128, STEP_CHUNKS),
    ));
    push_store(out, &format!("{prefix}.first"), &opt.first);
    push_store(out, &format!("{prefix}.second"), &opt.second);
}

fn read_opt<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<OptState<T>, CheckpointError> {
    let step = from_chunks(&ck.require(&format!("{prefix}.step"))?.data)?;
    Ok(OptState {
        step: u64::try_from(step).map_err(|_| CheckpointError::Malformed("optimizer step overflow".into()))?,
        first: read_store(ck, &format!("{prefix}.first"))?,
        second: read_store(ck, &format!("{prefix}.second"))?,
    })
}

fn meta_int(v: f64, what: &str) -> Result<usize, CheckpointError> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(CheckpointError::Malformed(format!("bad {what} {v}")))
    }
}

/// Serialises everything a run needs to resume bit-identically.
pub fn state_to_checkpoint<T: Scalar>(state: &RunState<T>) -> Checkpoint {
    let g = &state.generator;
    let mut arrays = vec![NamedArray::from_values(
        "meta.generator",
        [vec![g.levels as f64, g.dim as f64, g.hidden as f64], float_chunks(g.scale_cap)].concat(),
    )];
    if let Some(c) = &state.critic {
        let (h, w) = c.config.image.map_or((0, 0), |s| (s.height, s.width));
        arrays.push(NamedArray::from_values(
            "meta.critic",
            [
                vec![c.config.hidden as f64, c.config.embedding as u8 as f64, h as f64, w as f64],
                float_chunks(c.config.clip_c),
            ]
            .concat(),
        ));
        push_store(&mut arrays, "critic", &c.params);
    }
    push_store(&mut arrays, "gen", &g.params);
    push_opt(&mut arrays, "opt.gen", &state.gen_opt);
    push_opt(&mut arrays, "opt.critic", &state.critic_opt);
    for (name, rng) in [
        ("rng.data", &state.data_rng),
        ("rng.noise", &state.noise_rng),
        ("rng.dequant", &state.dequant_rng),
    ] {
        arrays.push(NamedArray::from_values(name, to_chunks(rng.position(), RNG_CHUNKS)));
    }
    Checkpoint {
        dtype: T::DTYPE,
        step: state.step,
        seed: state.seed,
        arrays,
    }
}

/// Rebuilds a run. Structure comes from the `meta.*` arrays, weights and
/// optimizer moments from the named arrays, and stream positions from
/// `rng.*` applied to streams re-derived from the header seed.
pub fn checkpoint_to_state<T: Scalar>(ck: &Checkpoint) -> Result<RunState<T>, CheckpointError> {
    if ck.dtype != T::DTYPE {
        return Err(CheckpointError::Malformed(format!(
            "checkpoint holds {:?} values, {:?} requested",
            ck.dtype,
            T::DTYPE
        )));
    }
    let meta = &ck.require("meta.generator")?.data;
    if meta.len() != 3 + FLOAT_CHUNKS {
        return Err(CheckpointError::Malformed(format!("meta.generator must hold {} values", 3 + FLOAT_CHUNKS)));
    }
    let levels = meta_int(meta[0], "levels")?;
    let dim = meta_int(meta[1], "dimension")?;
    let hidden = meta_int(meta[2], "hidden width")?;
    let mut generator = FlowModel::<T>::build_nvp(levels, dim, hidden, 0)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    generator.scale_cap = chunks_float(&meta[3..])?;
    let params = read_store::<T>(ck, "gen")?;
    if params.keys().ne(generator.params.keys()) {
        return Err(CheckpointError::Malformed("generator parameter names do not match the architecture".into()));
    }
    for (k, v) in &params {
        if v.shape() != generator.params[k].shape() {
            return Err(CheckpointError::Malformed(format!("parameter {k} has the wrong shape")));
        }
    }
    generator.params = params;

    let critic = match ck.get("meta.critic") {
        None => None,
        Some(m) => {
            let m = &m.data;
            if m.len() != 4 + FLOAT_CHUNKS {
                return Err(CheckpointError::Malformed(format!("meta.critic must hold {} values", 4 + FLOAT_CHUNKS)));
            }
            let (h, w) = (meta_int(m[2], "image height")?, meta_int(m[3], "image width")?);
            let config = CriticConfig {
                dim,
                hidden: meta_int(m[0], "critic width")?,
                clip_c: chunks_float(&m[4..])?,
                embedding: m[1] != 0.0,
                image: (h > 0).then_some(ImageShape { height: h, width: w }),
            };
            let mut c = Critic::<T>::new(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let params = read_store::<T>(ck, "critic")?;
            if params.keys().ne(c.params.keys()) {
                return Err(CheckpointError::Malformed("critic parameter names do not match the architecture".into()));
            }
            c.params = params;
            Some(c)
        }
    };

    let rng = |name: &str, stream: u64| -> Result<RngStream, CheckpointError> {
        let mut r = RngStream::new(ck.seed, stream);
        r.set_position(from_chunks(&ck.require(name)?.data)?);
        Ok(r)
    };
    Ok(RunState {
        step: ck.step,
        seed: ck.seed,
        generator,
        critic,
        gen_opt: read_opt(ck, "opt.gen")?,
        critic_opt: read_opt(ck, "opt.critic")?,
        data_rng: rng("rng.data", streams::DATA)?,
        noise_rng: rng("rng.noise", streams::NOISE)?,
        dequant_rng: rng("rng.dequant", streams::DEQUANT)?,
    })
}

/// The precision a checkpoint was written in.
pub fn checkpoint_dtype(ck: &Checkpoint) -> DType {
    ck.dtype
}
