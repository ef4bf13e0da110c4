//! Image corruptions with five severity levels.
//!
//! Images are channels-first `[C, H, W]` (or batches `[N, C, H, W]`) with
//! values in `[0, 1]`. Outputs are clipped back to `[0, 1]`. Random
//! corruptions draw from `rng_for(seed, image_index)`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{Evaluator, NetEvaluator};
use crate::model::{ModelState, Which};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub const NOISE: [CorruptionKind; 3] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Parameter at severities 1..=5.
    pub fn ladder(&self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::Pixelate => [1.25, 1.5, 2.0, 3.0, 4.0],
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity, seed })
    }

    pub fn level(&self) -> f64 {
        self.kind.ladder()[self.severity as usize - 1]
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    if image.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "expected a channels-first [C, H, W] image, got {:?}",
            image.shape()
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
    }
    Ok((image.shape()[0], image.shape()[1], image.shape()[2]))
}

/// Apply a corruption at its ladder level for `spec.severity`.
pub fn apply(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!("severity {} outside 1..=5", spec.severity)));
    }
    apply_level(image, spec.kind, spec.level(), &mut crate::rng::rng(spec.seed))
}

/// Apply a corruption with an explicit parameter value.
pub fn apply_level(image: &Tensor, kind: CorruptionKind, level: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    let x = image.data();
    let out: Vec<f64> = match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, level).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            x.iter().map(|v| v + n.sample(rng)).collect()
        }
        CorruptionKind::ShotNoise => x
            .iter()
            .map(|&v| {
                let rate = v * level;
                if rate > 0.0 {
                    let p = Poisson::new(rate).expect("positive rate");
                    p.sample(rng) / level
                } else {
                    0.0
                }
            })
            .collect(),
        CorruptionKind::ImpulseNoise => x
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < level {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::DefocusBlur => defocus(x, c, h, w, level),
        CorruptionKind::Brightness => x.iter().map(|v| v + level).collect(),
        CorruptionKind::Contrast => {
            let plane = h * w;
            let mut out = Vec::with_capacity(x.len());
            for ch in x.chunks(plane) {
                let mean = ch.iter().fold(0.0, |s, v| s + v) / plane as f64;
                out.extend(ch.iter().map(|v| (v - mean) * level + mean));
            }
            out
        }
        CorruptionKind::Pixelate => pixelate(x, c, h, w, level),
    };
    Tensor::new(vec![c, h, w], out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Normalized disk kernel of the given radius; edges replicate.
fn defocus(x: &[f64], c: usize, h: usize, w: usize, radius: f64) -> Vec<f64> {
    let r = radius.floor() as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                taps.push((dy, dx));
            }
        }
    }
    let norm = taps.len() as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for &(dy, dx) in &taps {
                    let y = (i as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (j as isize + dx).clamp(0, w as isize - 1) as usize;
                    s += src[y * w + xx];
                }
                out[ch * h * w + i * w + j] = s / norm;
            }
        }
    }
    out
}

/// Box-average down to `round(size / factor)` cells, then nearest upsample.
fn pixelate(x: &[f64], c: usize, h: usize, w: usize, factor: f64) -> Vec<f64> {
    let lh = ((h as f64 / factor).round() as usize).clamp(1, h);
    let lw = ((w as f64 / factor).round() as usize).clamp(1, w);
    let cell = |i: usize, size: usize, low: usize| i * low / size;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let mut sums = vec![0.0; lh * lw];
        let mut counts = vec![0usize; lh * lw];
        for i in 0..h {
            for j in 0..w {
                let k = cell(i, h, lh) * lw + cell(j, w, lw);
                sums[k] += src[i * w + j];
                counts[k] += 1;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let k = cell(i, h, lh) * lw + cell(j, w, lw);
                out[ch * h * w + i * w + j] = sums[k] / counts[k] as f64;
            }
        }
    }
    out
}

/// Corrupt every image of a `[N, C, H, W]` batch; image `n` uses
/// `rng_for(seed, n)`.
pub fn apply_batch(images: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!("severity {} outside 1..=5", spec.severity)));
    }
    apply_batch_level(images, spec.kind, spec.level(), spec.seed)
}

pub fn apply_batch_level(images: &Tensor, kind: CorruptionKind, level: f64, seed: u64) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::InvalidShape(format!(
            "expected a [N, C, H, W] batch, got {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    let per: Vec<usize> = images.shape()[1..].to_vec();
    let mut out = Vec::with_capacity(images.len());
    for i in 0..n {
        let img = images.slice_rows(i, i + 1)?.reshape(per.clone())?;
        let mut rng = crate::rng::rng_for(seed, i as u64);
        out.extend_from_slice(apply_level(&img, kind, level, &mut rng)?.data());
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Loss on the corrupted test set minus the clean training loss.
pub fn corrupted_gap(model: &ModelState, train: &Dataset, test: &Dataset, spec: &CorruptionSpec) -> Result<f64> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::InvalidArgument(format!("severity {} outside 1..=5", spec.severity)));
    }
    corrupted_gap_level(model, train, test, spec.kind, spec.level(), spec.seed)
}

pub fn corrupted_gap_level(
    model: &ModelState,
    train: &Dataset,
    test: &Dataset,
    kind: CorruptionKind,
    level: f64,
    seed: u64,
) -> Result<f64> {
    let w = model.effective_weights(Which::Current);
    let corrupted = test.with_inputs(apply_batch_level(&test.x, kind, level, seed)?)?;
    let l_train = NetEvaluator::new(model, train)?.loss(&w)?;
    let l_test = NetEvaluator::new(model, &corrupted)?.loss(&w)?;
    Ok(l_test - l_train)
}
