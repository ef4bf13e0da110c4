//! Two-dimensional loss-surface slices along filter-normalized random
//! directions.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::Dataset;
use crate::eval::{Evaluator, NetEvaluator};
use crate::model::{ModelState, Which};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// Every weight filter had zero norm, so the directions are zero.
    pub degenerate: bool,
}

/// Gaussian directions over the flattened weights, with each filter block
/// rescaled to the norm of the matching weight filter.
pub fn sample_directions(model: &ModelState, seed: u64) -> Directions {
    let w = model.flat_weights(Which::Current);
    let groups = model.filter_groups();
    let make = |stream: u64| {
        let mut rng = rng_for(seed, stream);
        let mut d: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        filter_normalize(&mut d, &w, &groups);
        d
    };
    let d1 = make(1);
    let d2 = make(2);
    let degenerate = w.iter().all(|&v| v == 0.0);
    Directions { d1, d2, degenerate }
}

/// Scale each group of `d` to the norm of the same group of `w`.
pub fn filter_normalize(d: &mut [f64], w: &[f64], groups: &[Vec<usize>]) {
    for g in groups {
        let wn = g.iter().fold(0.0, |s, &i| s + w[i] * w[i]).sqrt();
        let dn = g.iter().fold(0.0, |s, &i| s + d[i] * d[i]).sqrt();
        let c = if dn > 0.0 { wn / dn } else { 0.0 };
        for &i in g {
            d[i] *= c;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` at `alphas[i]`, `betas[j]`.
    pub losses: Vec<Vec<f64>>,
    pub center_loss: f64,
    pub direction_seed: u64,
    pub half_range: f64,
    pub steps: usize,
}

pub fn coordinates(half_range: f64, steps: usize) -> Vec<f64> {
    let mid = (steps / 2) as f64;
    (0..steps)
        .map(|i| half_range * (i as f64 - mid) / mid.max(1.0))
        .collect()
}

/// `L(w + a d1 + b d2)` over a `steps x steps` grid on `[-h, h]^2`.
/// The evaluator decides how perturbed weights are used (e.g. requantized).
pub fn evaluate_grid(
    eval: &impl Evaluator,
    d1: &[f64],
    d2: &[f64],
    half_range: f64,
    steps: usize,
    direction_seed: u64,
) -> Result<LandscapeGrid> {
    if steps % 2 == 0 || steps == 0 {
        return Err(Error::InvalidArgument(format!("grid steps must be odd, got {steps}")));
    }
    let w = eval.center();
    if d1.len() != w.len() || d2.len() != w.len() {
        return Err(Error::InvalidArgument("direction length differs from weights".into()));
    }
    let coords = coordinates(half_range, steps);
    let cells: Vec<(usize, usize)> = (0..steps).flat_map(|i| (0..steps).map(move |j| (i, j))).collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (coords[i], coords[j]);
            let p: Vec<f64> = w
                .iter()
                .zip(d1.iter().zip(d2))
                .map(|(wv, (x, y))| wv + a * x + b * y)
                .collect();
            eval.loss(&p)
        })
        .collect::<Result<Vec<f64>>>()?;
    let losses: Vec<Vec<f64>> = values.chunks(steps).map(<[f64]>::to_vec).collect();
    let c = steps / 2;
    Ok(LandscapeGrid {
        center_loss: losses[c][c],
        alphas: coords.clone(),
        betas: coords,
        losses,
        direction_seed,
        half_range,
        steps,
    })
}

/// Slice the training loss around the model's weights. Quantized models
/// are sliced around their latent weights with every grid point requantized.
pub fn landscape(model: &ModelState, data: &Dataset, seed: u64, half_range: f64, steps: usize) -> Result<LandscapeGrid> {
    let d = sample_directions(model, seed);
    if model.is_quantized() {
        evaluate_grid(&NetEvaluator::requantizing(model, data)?, &d.d1, &d.d2, half_range, steps, seed)
    } else {
        evaluate_grid(&NetEvaluator::new(model, data)?, &d.d1, &d.d2, half_range, steps, seed)
    }
}

impl LandscapeGrid {
    /// First row: beta coordinates (after an empty corner cell); first
    /// column: alpha coordinates; body: losses.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.betas.iter().map(|b| b.to_string()));
        wtr.write_record(&header)?;
        for (a, row) in self.alphas.iter().zip(&self.losses) {
            let mut rec = vec![a.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.direction_seed,
            "half_range": self.half_range,
            "steps": self.steps,
            "center_loss": self.center_loss,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::QuadraticBowl;
    use crate::model::ArchSpec;

    #[test]
    fn coordinates_symmetric() {
        let c = coordinates(1.0, 5);
        assert_eq!(c, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(coordinates(2.0, 1), vec![0.0]);
    }

    #[test]
    fn even_steps_rejected() {
        let bowl = QuadraticBowl::at_minimum(2);
        assert!(evaluate_grid(&bowl, &[0.0; 2], &[0.0; 2], 1.0, 4, 0).is_err());
    }

    #[test]
    fn zero_weights_give_degenerate_directions() {
        let mut m = ModelState::new(&ArchSpec::mlp(2, 3, 1, 1), 0).unwrap();
        m.set_flat_weights(&vec![0.0; m.weight_count()]).unwrap();
        let d = sample_directions(&m, 4);
        assert!(d.degenerate);
        assert!(d.d1.iter().chain(&d.d2).all(|&v| v == 0.0));
    }

    #[test]
    fn csv_layout() {
        let g = LandscapeGrid {
            alphas: vec![-1.0, 0.0, 1.0],
            betas: vec![-1.0, 0.0, 1.0],
            losses: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]],
            center_loss: 5.0,
            direction_seed: 1,
            half_range: 1.0,
            steps: 3,
        };
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), ",-1,0,1");
        assert_eq!(text.lines().nth(2).unwrap(), "0,4,5,6");
    }
}
