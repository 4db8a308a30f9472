//! Named datasets and their fixed train/valid/test splits.

use flowcritic::data::{self, Dataset, IdxFile};

use crate::config::DatasetSpec;
use crate::error::CliError;

pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];
pub const SYNTH_EXAMPLES: usize = 20_000;
pub const RING_MODES: usize = 8;
pub const RING_RADIUS: f64 = 2.0;
pub const RING_SIGMA: f64 = 0.4;
pub const CURVE_DIM: usize = 8;
pub const CURVE_AMPLITUDE: f64 = 1.0;
pub const CURVE_NOISE: f64 = 0.05;
pub const IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn load(dataset: &DatasetSpec, data_seed: u64) -> Result<Splits, CliError> {
    let (full, flip) = match dataset {
        DatasetSpec::SynthRing => (
            data::synth_ring(SYNTH_EXAMPLES, RING_MODES, RING_RADIUS, RING_SIGMA, data_seed)?,
            false,
        ),
        DatasetSpec::SynthCurve => (
            data::synth_curve(SYNTH_EXAMPLES, CURVE_DIM, CURVE_AMPLITUDE, CURVE_NOISE, data_seed)?,
            false,
        ),
        DatasetSpec::Idx(path) => {
            let images = match data::load_idx(path)? {
                IdxFile::Images(i) => i,
                IdxFile::Labels(_) => {
                    return Err(CliError::Config {
                        key: "dataset".into(),
                        detail: format!("{} holds labels, not images", path.display()),
                    })
                }
            };
            let images = if images.height > IMAGE_SIDE || images.width > IMAGE_SIDE {
                data::downsample(&images, IMAGE_SIDE)?
            } else {
                images
            };
            (data::image_dataset(&images), true)
        }
        DatasetSpec::Fc2d(path) => (data::load_synth(path)?, false),
    };
    let (train, valid, test) = data::split_and_augment(&full, SPLIT_RATIOS, flip, data_seed)?;
    Ok(Splits { train, valid, test })
}
