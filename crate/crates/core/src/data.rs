//! Datasets and the pixel preprocessing chain.
//!
//! Integer pixels `x ∈ {0..255}^D` become dequantized `z2 = x + u` with
//! `u ~ U[0,1)^D`, then `z1 = z2 / 256`. Densities convert between the two
//! spaces with `log p(z2) = log p(z1) − D ln 256`, and bits/dim is reported
//! on `z2`.

use std::f64::consts::{LN_2, PI};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub const INTENSITY_LEVELS: u32 = 256;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const SYNTH_MAGIC: &[u8; 4] = b"FC2D";

fn ln_levels() -> f64 {
    (INTENSITY_LEVELS as f64).ln()
}

/// What the image preprocessing did, so densities can be converted back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessSpec {
    pub dim: usize,
    pub intensity_levels: u32,
    pub noise_seed: u64,
    pub flip_augment: bool,
}

/// `z2 = pixels + u`, `u ~ U[0,1)` per coordinate.
pub fn dequantize<P: Copy + Into<i64>>(pixels: &[P], rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pixels.len());
    for &p in pixels {
        let v: i64 = p.into();
        if !(0..INTENSITY_LEVELS as i64).contains(&v) {
            return Err(Error::PixelRange(v));
        }
        out.push(v as f64 + rng.uniform());
    }
    Ok(out)
}

/// `z1 = z2 / 256` and the additive log-density correction `−D ln 256`
/// with `D = z2.len()`.
pub fn scale_to_unit(z2: &[f64]) -> (Vec<f64>, f64) {
    let s = INTENSITY_LEVELS as f64;
    let z1 = z2.iter().map(|v| v / s).collect();
    (z1, -(z2.len() as f64) * ln_levels())
}

/// Negative log-likelihood of the dequantized image in bits per dimension,
/// given the model's `log p(z1)` in nats.
pub fn bits_per_dim(logprob_z1_nats: f64, dim: usize) -> f64 {
    let d = dim as f64;
    (-logprob_z1_nats + d * ln_levels()) / (d * LN_2)
}

/// Raw nats per dimension, used for continuous data.
pub fn nats_per_dim(logprob_nats: f64, dim: usize) -> f64 {
    -logprob_nats / dim as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    IdxImages { height: usize, width: usize },
    Synth2d,
    SynthCurve,
}

/// Stored examples: integer pixels, re-dequantized on every visit, or
/// continuous coordinates used as-is.
#[derive(Debug, Clone, PartialEq)]
pub enum Examples {
    Pixels(Vec<u8>),
    Continuous(Vec<f64>),
}

/// Exact log-density of a synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Oracle {
    Ring(RingMixture),
    Curve(NoisyCurve),
}

impl Oracle {
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        match self {
            Oracle::Ring(r) => r.logpdf(x),
            Oracle::Curve(c) => c.logpdf(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub origin: Origin,
    pub dim: usize,
    pub examples: Examples,
    pub oracle: Option<Oracle>,
    /// Critic inputs are `critic_scale * z1 + critic_shift`.
    pub critic_scale: f64,
    pub critic_shift: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.examples {
            Examples::Pixels(p) => p.len() / self.dim,
            Examples::Continuous(c) => c.len() / self.dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.examples, Examples::Pixels(_))
    }

    /// Rows `indices` in model (`z1`) space. Pixel data draws fresh
    /// dequantization noise from `dequant`.
    pub fn batch<T: Scalar>(&self, indices: &[usize], dequant: &mut RngStream) -> Tensor<T> {
        let d = self.dim;
        let mut out = Vec::with_capacity(indices.len() * d);
        match &self.examples {
            Examples::Pixels(p) => {
                let s = INTENSITY_LEVELS as f64;
                for &i in indices {
                    for &v in &p[i * d..(i + 1) * d] {
                        out.push(T::from_f64((v as f64 + dequant.uniform()) / s));
                    }
                }
            }
            Examples::Continuous(c) => {
                for &i in indices {
                    out.extend(c[i * d..(i + 1) * d].iter().map(|&v| T::from_f64(v)));
                }
            }
        }
        Tensor::from_rows(indices.len(), d, out).expect("non-empty batch")
    }

    /// Every example in order.
    pub fn all<T: Scalar>(&self, dequant: &mut RngStream) -> Tensor<T> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, dequant)
    }

    /// Uniform random minibatch drawn with replacement.
    pub fn sample_batch<T: Scalar>(&self, n: usize, data: &mut RngStream, dequant: &mut RngStream) -> Tensor<T> {
        let idx: Vec<usize> = (0..n).map(|_| data.index(self.len())).collect();
        self.batch(&idx, dequant)
    }

    /// Maps model-space values onto critic inputs.
    pub fn to_critic_space<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (a, b) = (T::from_f64(self.critic_scale), T::from_f64(self.critic_shift));
        x.map(|v| a * v + b)
    }

    /// NLL in bits/dim for pixel data, nats/dim otherwise.
    pub fn nll_per_dim(&self, logprob_z1: f64) -> f64 {
        if self.is_quantized() {
            bits_per_dim(logprob_z1, self.dim)
        } else {
            nats_per_dim(logprob_z1, self.dim)
        }
    }

    /// Keeps only rows `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.dim;
        let examples = match &self.examples {
            Examples::Pixels(p) => Examples::Pixels(
                indices
                    .iter()
                    .flat_map(|&i| p[i * d..(i + 1) * d].iter().copied())
                    .collect(),
            ),
            Examples::Continuous(c) => Examples::Continuous(
                indices
                    .iter()
                    .flat_map(|&i| c[i * d..(i + 1) * d].iter().copied())
                    .collect(),
            ),
        };
        Dataset {
            examples,
            ..self.clone()
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Equal-weight mixture of isotropic Gaussians centred on a circle.
#[derive(Debug, Clone, PartialEq)]
pub struct RingMixture {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl RingMixture {
    pub fn center(&self, k: usize) -> (f64, f64) {
        let a = 2.0 * PI * k as f64 / self.modes as f64;
        (self.radius * a.cos(), self.radius * a.sin())
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        let terms: Vec<f64> = (0..self.modes)
            .map(|k| {
                let (cx, cy) = self.center(k);
                let d2 = (x[0] - cx).powi(2) + (x[1] - cy).powi(2);
                -d2 / (2.0 * s2)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        lse - (self.modes as f64).ln() - (2.0 * PI * s2).ln()
    }

    pub fn draw(&self, rng: &mut RngStream) -> [f64; 2] {
        let k = rng.index(self.modes);
        let (cx, cy) = self.center(k);
        [cx + self.sigma * rng.normal(), cy + self.sigma * rng.normal()]
    }
}

/// Samples from an equal-weight ring of `modes` Gaussians in 2D.
pub fn synth_ring(n: usize, modes: usize, radius: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || modes == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "synth_ring needs n ≥ 1, modes ≥ 1, sigma > 0 (got {n}, {modes}, {sigma})"
        )));
    }
    let mix = RingMixture { modes, radius, sigma };
    let mut rng = RngStream::new(seed, crate::rng::streams::DATA);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        data.extend(mix.draw(&mut rng));
    }
    Ok(Dataset {
        split: Split::Train,
        origin: Origin::Synth2d,
        dim: 2,
        examples: Examples::Continuous(data),
        critic_scale: 1.0 / (radius + 3.0 * sigma),
        critic_shift: 0.0,
        oracle: Some(Oracle::Ring(mix)),
    })
}

/// A closed curve in `dim` dimensions blurred by isotropic Gaussian noise.
///
/// The curve is `c(θ) = Q · φ(θ)` where `φ` stacks `cos(kθ)/k, sin(kθ)/k`
/// harmonics and `Q` is a fixed orthogonal matrix, so every coordinate
/// depends on every other.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyCurve {
    pub dim: usize,
    pub amplitude: f64,
    pub noise: f64,
    rotation: Vec<f64>,
}

impl NoisyCurve {
    pub fn new(dim: usize, amplitude: f64, noise: f64, rotation_seed: u64) -> Self {
        let mut rng = RngStream::new(rotation_seed, crate::rng::streams::INIT);
        // Gram–Schmidt on a Gaussian matrix.
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while q.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        NoisyCurve {
            dim,
            amplitude,
            noise,
            rotation: q.into_iter().flatten().collect(),
        }
    }

    pub fn point(&self, theta: f64) -> Vec<f64> {
        let feat: Vec<f64> = (0..self.dim)
            .map(|j| {
                let k = (j / 2 + 1) as f64;
                let v = if j % 2 == 0 { (k * theta).cos() } else { (k * theta).sin() };
                self.amplitude * v / k
            })
            .collect();
        (0..self.dim)
            .map(|r| {
                self.rotation[r * self.dim..(r + 1) * self.dim]
                    .iter()
                    .zip(&feat)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn draw(&self, rng: &mut RngStream) -> Vec<f64> {
        let theta = 2.0 * PI * rng.uniform();
        let mut p = self.point(theta);
        for v in &mut p {
            *v += self.noise * rng.normal();
        }
        p
    }

    /// `log ∫ N(x; c(θ), σ²I) dθ/2π`, by the midpoint rule on 4096 angles.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        const STEPS: usize = 4096;
        let s2 = self.noise * self.noise;
        let terms: Vec<f64> = (0..STEPS)
            .map(|i| {
                let theta = 2.0 * PI * (i as f64 + 0.5) / STEPS as f64;
                let c = self.point(theta);
                let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                -d2 / (2.0 * s2)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        lse - (STEPS as f64).ln() - 0.5 * self.dim as f64 * (2.0 * PI * s2).ln()
    }
}

/// Samples from a [`NoisyCurve`].
pub fn synth_curve(n: usize, dim: usize, amplitude: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || dim < 2 || !(noise > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "synth_curve needs n ≥ 1, dim ≥ 2, noise > 0 (got {n}, {dim}, {noise})"
        )));
    }
    let curve = NoisyCurve::new(dim, amplitude, noise, 0);
    let mut rng = RngStream::new(seed, crate::rng::streams::DATA);
    let mut data = Vec::with_capacity(dim * n);
    for _ in 0..n {
        data.extend(curve.draw(&mut rng));
    }
    Ok(Dataset {
        split: Split::Train,
        origin: Origin::SynthCurve,
        dim,
        examples: Examples::Continuous(data),
        critic_scale: 1.0 / (amplitude + 3.0 * noise),
        critic_shift: 0.0,
        oracle: Some(Oracle::Curve(curve)),
    })
}

/// Wraps integer images as a pixel dataset.
pub fn image_dataset(images: &ImageSet) -> Dataset {
    Dataset {
        split: Split::Train,
        origin: Origin::IdxImages {
            height: images.height,
            width: images.width,
        },
        dim: images.height * images.width,
        examples: Examples::Pixels(images.pixels.clone()),
        oracle: None,
        critic_scale: 2.0,
        critic_shift: -1.0,
    }
}

/// Mirrors each image left–right.
pub fn flip_horizontal(pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len());
    for img in pixels.chunks(height * width) {
        for r in 0..height {
            out.extend(img[r * width..(r + 1) * width].iter().rev());
        }
    }
    out
}

/// Seeded shuffle then contiguous split into train/valid/test. With
/// `flip_augment` on image data the train split also gets every example's
/// horizontal mirror.
pub fn split_and_augment(
    data: &Dataset,
    ratios: [f64; 3],
    flip_augment: bool,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let n = data.len();
    let mut rng = RngStream::new(seed, crate::rng::streams::DATA);
    let perm = rng.permutation(n);
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_valid = (ratios[1] * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_valid = n_valid.min(n - n_train);
    let (tr, rest) = perm.split_at(n_train);
    let (va, te) = rest.split_at(n_valid);
    for (name, part) in [("train", tr), ("valid", va), ("test", te)] {
        if part.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    let mut train = data.subset(tr).with_split(Split::Train);
    if flip_augment {
        if let (Origin::IdxImages { height, width }, Examples::Pixels(p)) = (&train.origin, &mut train.examples) {
            let flipped = flip_horizontal(p, *height, *width);
            p.extend(flipped);
        }
    }
    Ok((
        train,
        data.subset(va).with_split(Split::Valid),
        data.subset(te).with_split(Split::Test),
    ))
}

/// Integer images `[n, height*width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxFile {
    Images(ImageSet),
    Labels(Vec<u8>),
}

fn be_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parses an IDX image (`0x00000803`) or label (`0x00000801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    let ndim = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::IdxMagic(other)),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::IdxTruncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::IdxDimOverflow)?;
    let expected = header.checked_add(payload).ok_or(Error::IdxDimOverflow)?;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            expected,
            found: bytes.len(),
        });
    }
    let body = bytes[header..expected].to_vec();
    Ok(match magic {
        IDX_IMAGES_MAGIC => IdxFile::Images(ImageSet {
            n: dims[0],
            height: dims[1],
            width: dims[2],
            pixels: body,
        }),
        _ => IdxFile::Labels(body),
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    let bytes = std::fs::read(path)?;
    parse_idx(&bytes)
}

/// Block-averages each image to `target × target` and rounds to the
/// nearest integer. Source row `r` feeds target row `r * target / height`,
/// so blocks differ by at most one pixel when the sizes do not divide.
pub fn downsample(images: &ImageSet, target: usize) -> Result<ImageSet> {
    if target == 0 || images.height < target || images.width < target {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {}x{} to {target}x{target}",
            images.height, images.width
        )));
    }
    let (h, w) = (images.height, images.width);
    let mut out = Vec::with_capacity(images.n * target * target);
    for img in images.pixels.chunks(h * w) {
        let mut sums = vec![0u32; target * target];
        let mut counts = vec![0u32; target * target];
        for r in 0..h {
            let tr = r * target / h;
            for c in 0..w {
                let tc = c * target / w;
                sums[tr * target + tc] += img[r * w + c] as u32;
                counts[tr * target + tc] += 1;
            }
        }
        out.extend(
            sums.iter()
                .zip(&counts)
                .map(|(&s, &k)| (s as f64 / k as f64).round() as u8),
        );
    }
    Ok(ImageSet {
        n: images.n,
        height: target,
        width: target,
        pixels: out,
    })
}

/// Writes continuous examples as `FC2D`, `u32 n`, `u32 d`, `u32 0`, then
/// little-endian `f64` rows.
pub fn write_synth(out: &mut impl Write, n: usize, d: usize, values: &[f64]) -> Result<()> {
    if values.len() != n * d {
        return Err(Error::SynthFormat(format!("{} values for {n}x{d}", values.len())));
    }
    out.write_all(SYNTH_MAGIC)?;
    out.write_all(&(n as u32).to_le_bytes())?;
    out.write_all(&(d as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_synth`]: `(n, d, values)`.
pub fn read_synth(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 16 {
        return Err(Error::SynthFormat("header truncated".into()));
    }
    if &bytes[..4] != SYNTH_MAGIC {
        return Err(Error::SynthFormat("bad magic".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::SynthFormat("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::SynthFormat(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((n, d, values))
}

/// A continuous dataset from an `FC2D` file.
pub fn load_synth(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let (_, d, values) = read_synth(&bytes)?;
    let bound = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    Ok(Dataset {
        split: Split::Train,
        origin: if d == 2 { Origin::Synth2d } else { Origin::SynthCurve },
        dim: d,
        examples: Examples::Continuous(values),
        oracle: None,
        critic_scale: 1.0 / bound,
        critic_shift: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    #[test]
    fn dequantized_zero_stays_below_one() {
        let mut rng = RngStream::new(1, streams::DEQUANT);
        let z = dequantize(&[0u8; 100], &mut rng).unwrap();
        assert!(z.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        let mut rng = RngStream::new(1, streams::DEQUANT);
        assert!(matches!(dequantize(&[256i64], &mut rng), Err(Error::PixelRange(256))));
        assert!(matches!(dequantize(&[-1i64], &mut rng), Err(Error::PixelRange(-1))));
    }

    #[test]
    fn dequantize_is_reproducible_and_floors_back() {
        let px: Vec<u8> = (0..=255).collect();
        let a = dequantize(&px, &mut RngStream::new(9, streams::DEQUANT)).unwrap();
        let b = dequantize(&px, &mut RngStream::new(9, streams::DEQUANT)).unwrap();
        assert_eq!(a, b);
        let back: Vec<u8> = a.iter().map(|v| v.floor() as u8).collect();
        assert_eq!(back, px);
    }

    #[test]
    fn scale_half() {
        let (z1, adj) = scale_to_unit(&[128.0]);
        assert_eq!(z1, vec![0.5]);
        assert!((adj + 256f64.ln()).abs() < 1e-15);
        assert!((adj + 5.545).abs() < 1e-3);
        assert_eq!(z1[0] * 256.0, 128.0);
    }

    #[test]
    fn bits_per_dim_anchors() {
        for d in [1usize, 3, 64, 3072] {
            assert_eq!(bits_per_dim(0.0, d), 8.0);
            assert!(bits_per_dim(d as f64 * 256f64.ln(), d).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_single_mode_peak() {
        let r = RingMixture {
            modes: 1,
            radius: 2.0,
            sigma: 0.3,
        };
        let (cx, cy) = r.center(0);
        let expected = -(2.0 * PI * 0.09f64).ln();
        assert!((r.logpdf(&[cx, cy]) - expected).abs() < 1e-12);
    }

    #[test]
    fn split_sizes() {
        let d = synth_ring(100, 8, 2.0, 0.1, 0).unwrap();
        let (tr, va, te) = split_and_augment(&d, [0.8, 0.1, 0.1], true, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert!(split_and_augment(&d, [0.5, 0.6, -0.1], false, 3).is_err());
        let tiny = synth_ring(3, 8, 2.0, 0.1, 0).unwrap();
        assert!(matches!(
            split_and_augment(&tiny, [0.8, 0.1, 0.1], false, 3),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn flip_is_an_involution() {
        let px: Vec<u8> = (0..2 * 12).map(|v| v as u8).collect();
        let f = flip_horizontal(&px, 3, 4);
        assert_ne!(f, px);
        assert_eq!(flip_horizontal(&f, 3, 4), px);
        assert_eq!(&f[..4], &[3, 2, 1, 0]);
    }

    #[test]
    fn downsample_even_blocks() {
        let img = ImageSet {
            n: 1,
            height: 4,
            width: 4,
            pixels: vec![0, 2, 10, 10, 4, 6, 10, 11, 1, 1, 1, 1, 1, 1, 1, 2],
        };
        let s = downsample(&img, 2).unwrap();
        // Blocks: (0,2,4,6)=3, (10,10,10,11)=10.25, (1,1,1,1)=1, (1,1,1,2)=1.25.
        assert_eq!(s.pixels, vec![3, 10, 1, 1]);
    }

    #[test]
    fn synth_file_errors() {
        let mut buf = Vec::new();
        write_synth(&mut buf, 2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(buf.len(), 16 + 32);
        assert_eq!(read_synth(&buf).unwrap(), (2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert!(read_synth(&buf[..40]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_synth(&bad).is_err());
    }

    #[test]
    fn curve_density_is_normalised_in_2d() {
        // Midpoint quadrature of exp(logpdf) over a box that holds the curve.
        let c = NoisyCurve::new(2, 1.0, 0.2, 0);
        let (lo, hi, cells) = (-2.5, 2.5, 200);
        let h = (hi - lo) / cells as f64;
        let mut total = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += c.logpdf(&x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.01, "mass {total}");
    }
}
