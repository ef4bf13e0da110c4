//! Datasets: synthetic generators, splitting and container loading.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Section};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

/// Inputs `x` are `[N, ...]`; targets `y` are one-hot `[N, K]` for
/// classification or `[N, K]` real targets for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, task: Task) -> Result<Self> {
        if x.rank() < 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
            return Err(Error::InvalidShape(format!(
                "x {:?} and y {:?} disagree on example count",
                x.shape(),
                y.shape()
            )));
        }
        if let Task::Classification { classes } = task {
            if y.shape()[1] != classes {
                return Err(Error::InvalidShape(format!(
                    "{classes} classes but targets have {} columns",
                    y.shape()[1]
                )));
            }
        }
        Ok(Self { x, y, task })
    }

    pub fn from_labels(x: Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let mut y = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::InvalidArgument(format!("label {l} >= {classes} classes")));
            }
            y[i * classes + l] = 1.0;
        }
        Self::new(
            x,
            Tensor::new(vec![labels.len(), classes], y)?,
            Task::Classification { classes },
        )
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn outputs(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        match self.task {
            Task::Regression => None,
            Task::Classification { classes } => Some(
                self.y
                    .data()
                    .chunks(classes)
                    .map(|row| argmax(row))
                    .collect(),
            ),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.gather_rows(idx)?,
            y: self.y.gather_rows(idx)?,
            task: self.task,
        })
    }

    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            x: self.x.slice_rows(start, end)?,
            y: self.y.slice_rows(start, end)?,
            task: self.task,
        })
    }

    /// Replace the inputs, keeping targets.
    pub fn with_inputs(&self, x: Tensor) -> Result<Self> {
        Self::new(x, self.y.clone(), self.task)
    }

    /// Shuffled train/test split; the first `round(ratio * n)` shuffled
    /// examples go to train.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("split ratio {ratio}")));
        }
        let n = self.len();
        let n_train = (ratio * n as f64).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::InvalidArgument(format!(
                "split ratio {ratio} leaves an empty side for {n} examples"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut crate::rng::rng(seed));
        Ok((self.subset(&idx[..n_train])?, self.subset(&idx[n_train..])?))
    }

    pub fn to_section(&self) -> Section {
        vec![("x".into(), self.x.clone()), ("y".into(), self.y.clone())]
    }

    /// Read `x` and `y` from a container. A rank-1 `y` holds class indices;
    /// a rank-2 `y` holds regression targets unless `classes` is given.
    pub fn from_container(c: &Container, classes: Option<usize>) -> Result<Self> {
        let x = c
            .get("x")
            .ok_or_else(|| Error::Format("container has no `x` tensor".into()))?
            .clone();
        let y = c
            .get("y")
            .ok_or_else(|| Error::Format("container has no `y` tensor".into()))?
            .clone();
        match (y.rank(), classes) {
            (1, _) => {
                let labels: Vec<usize> = y
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Format(format!("label {v} is not a class index")))
                        }
                    })
                    .collect::<Result<_>>()?;
                let k = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
                Self::from_labels(x, &labels, k)
            }
            (2, Some(k)) => Self::new(x, y, Task::Classification { classes: k }),
            (2, None) => Self::new(x, y, Task::Regression),
            _ => Err(Error::Format(format!("unsupported target shape {:?}", y.shape()))),
        }
    }

    pub fn load(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Self> {
        Self::from_container(&Container::load(path)?, classes)
    }

    /// Mini-batch index lists for one epoch, shuffled by `rng`.
    pub fn batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub n: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Probability that a label is replaced by a uniformly drawn class.
    pub label_noise: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n: 400,
            size: 8,
            channels: 1,
            noise: 0.1,
            label_noise: 0.0,
        }
    }
}

/// Two-class images of a single Gaussian blob on a flat background. Class 0
/// blobs are narrow (width 0.8 px), class 1 blobs are wide (width 1.6 px);
/// centre, amplitude and per-channel tint vary per image. Values in `[0, 1]`.
pub fn blobs(cfg: &BlobConfig, seed: u64) -> Result<Dataset> {
    if cfg.n == 0 || cfg.size < 2 || cfg.channels == 0 {
        return Err(Error::InvalidArgument("blob dataset needs n>0, size>=2, channels>0".into()));
    }
    let mut rng = crate::rng::rng(seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (s, c) = (cfg.size, cfg.channels);
    let mut x = Vec::with_capacity(cfg.n * c * s * s);
    let mut labels = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let class = rng.random_range(0..2usize);
        let width = if class == 0 { 0.8 } else { 1.6 };
        let lo = 1.0;
        let hi = s as f64 - 2.0;
        let cy = if hi > lo { rng.random_range(lo..hi) } else { s as f64 / 2.0 };
        let cx = if hi > lo { rng.random_range(lo..hi) } else { s as f64 / 2.0 };
        let amp = rng.random_range(0.45..0.7);
        for _ in 0..c {
            let tint = rng.random_range(0.8..1.0);
            for i in 0..s {
                for j in 0..s {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    let v = 0.2 + amp * tint * (-d2 / (2.0 * width * width)).exp();
                    let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    x.push((v + n).clamp(0.0, 1.0));
                }
            }
        }
        let label = if rng.random::<f64>() < cfg.label_noise {
            rng.random_range(0..2usize)
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::from_labels(Tensor::new(vec![cfg.n, c, s, s], x)?, &labels, 2)
}

/// Two interleaving half circles. Outer arc: `(cos t, sin t)`; inner arc:
/// `(1 - cos t, 0.5 - sin t)`, `t` evenly spaced on `[0, pi]`.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("two_moons needs n >= 2".into()));
    }
    let mut rng = crate::rng::rng(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let lin = |k: usize, m: usize| {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (m - 1) as f64
        }
    };
    for k in 0..n_out {
        let t = lin(k, n_out);
        pts.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for k in 0..n_in {
        let t = lin(k, n_in);
        pts.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for p in &mut pts {
            *p += normal.sample(&mut rng);
        }
    }
    // Fixed shuffle so that splits mix both arcs.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let x: Vec<f64> = order.iter().flat_map(|&i| [pts[2 * i], pts[2 * i + 1]]).collect();
    let l: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    Dataset::from_labels(Tensor::new(vec![n, 2], x)?, &l, 2)
}

/// `y = x . w + b + noise` with `x ~ N(0, I)`. Returns the data and `(w, b)`.
pub fn linear_regression(n: usize, dim: usize, noise: f64, seed: u64) -> Result<(Dataset, Vec<f64>, f64)> {
    let mut rng = crate::rng::rng(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = rng.random_range(-0.5..0.5);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| std.sample(&mut rng)).collect();
        let t = row.iter().zip(&w).fold(b, |s, (a, c)| s + a * c) + noise * std.sample(&mut rng);
        x.extend(row);
        y.push(t);
    }
    let ds = Dataset::new(Tensor::new(vec![n, dim], x)?, Tensor::new(vec![n, 1], y)?, Task::Regression)?;
    Ok((ds, w, b))
}

/// Smooth 2-D regression target `sin(2 x1) cos(x2) + 0.5 x2` on `x ~ U[-1.5, 1.5]^2`.
pub fn wave_regression(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = crate::rng::rng(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random_range(-1.5..1.5);
        let b: f64 = rng.random_range(-1.5..1.5);
        x.extend([a, b]);
        y.push((2.0 * a).sin() * b.cos() + 0.5 * b + noise * std.sample(&mut rng));
    }
    Dataset::new(Tensor::new(vec![n, 2], x)?, Tensor::new(vec![n, 1], y)?, Task::Regression)
}
