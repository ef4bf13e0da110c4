#![allow(dead_code)]

use std::collections::HashMap;

use qlens::autodiff::Graph;
use qlens::quant::{quantize, ste_backward, QuantSpec};
use qlens::rng::rng_for;
use qlens::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const POINTS: u64 = 10;

/// A graph, its bound inputs, and the inputs to differentiate.
pub type Case = (Graph, HashMap<String, Tensor>, Vec<&'static str>);

pub fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // |v| >= 0.05, away from the ReLU kink.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn probabilities(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn bind(pairs: Vec<(&str, Tensor)>) -> HashMap<String, Tensor> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Largest relative error between backward and central differences of
/// `<r, f(inputs)>`, over the inputs of `case`.
pub fn graph_error(case: Case, rng: &mut impl Rng) -> f64 {
    let (mut g, inputs, check) = case;
    let out = g.forward(&inputs).unwrap().clone();
    let r = random(rng, out.shape());
    let grads = g.backward(&r).unwrap();
    let mut worst: f64 = 0.0;
    for input in check {
        let analytic = &grads[input];
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus.get_mut(input).unwrap().data_mut()[i] += H;
            let fp = dot(&r, g.forward(&plus).unwrap());
            let mut minus = inputs.clone();
            minus.get_mut(input).unwrap().data_mut()[i] -= H;
            let fm = dot(&r, g.forward(&minus).unwrap());
            *slot = (fp - fm) / (2.0 * H);
        }
        let diff = analytic.data().iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = analytic.sq_norm().sqrt().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        worst = worst.max(if scale == 0.0 { diff } else { diff / scale });
    }
    worst
}

fn binary(
    rng: &mut ChaCha8Rng,
    (a, sa): (&'static str, &[usize]),
    (b, sb): (&'static str, &[usize]),
    op: impl Fn(&mut Graph, qlens::autodiff::NodeId, qlens::autodiff::NodeId),
) -> Case {
    let mut g = Graph::new();
    let x = g.input(a);
    let y = g.input(b);
    op(&mut g, x, y);
    (g, bind(vec![(a, random(rng, sa)), (b, random(rng, sb))]), vec![a, b])
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], op: impl Fn(&mut Graph, qlens::autodiff::NodeId)) -> Case {
    let mut g = Graph::new();
    let x = g.input("x");
    op(&mut g, x);
    (g, bind(vec![("x", random(rng, shape))]), vec!["x"])
}

pub fn matmul(rng: &mut ChaCha8Rng) -> Case {
    binary(rng, ("a", &[3, 4]), ("b", &[4, 2]), |g, a, b| {
        g.matmul(a, b);
    })
}

pub fn conv(stride: usize, pad: usize) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        binary(rng, ("x", &[2, 2, 5, 5]), ("w", &[3, 2, 3, 3]), |g, x, w| {
            g.conv2d(x, w, stride, pad);
        })
    }
}

pub fn conv_pointwise(rng: &mut ChaCha8Rng) -> Case {
    binary(rng, ("x", &[2, 3, 4, 4]), ("w", &[2, 3, 1, 1]), |g, x, w| {
        g.conv2d(x, w, 1, 0);
    })
}

pub fn bias_add(rng: &mut ChaCha8Rng) -> Case {
    binary(rng, ("x", &[2, 3, 2, 2]), ("b", &[3]), |g, x, b| {
        g.bias_add(x, b);
    })
}

pub fn relu(rng: &mut ChaCha8Rng) -> Case {
    unary(rng, &[3, 5], |g, x| {
        g.relu(x);
    })
}

pub fn add(rng: &mut ChaCha8Rng) -> Case {
    binary(rng, ("a", &[2, 3]), ("b", &[2, 3]), |g, a, b| {
        g.add(a, b);
    })
}

pub fn scale(rng: &mut ChaCha8Rng) -> Case {
    unary(rng, &[2, 3], |g, x| {
        g.scale(x, -1.7);
    })
}

pub fn global_avg_pool(rng: &mut ChaCha8Rng) -> Case {
    unary(rng, &[2, 3, 3, 4], |g, x| {
        g.global_avg_pool(x);
    })
}

pub fn flatten(rng: &mut ChaCha8Rng) -> Case {
    unary(rng, &[2, 3, 2, 2], |g, x| {
        g.flatten(x);
    })
}

pub fn mse(rng: &mut ChaCha8Rng) -> Case {
    binary(rng, ("pred", &[4, 2]), ("target", &[4, 2]), |g, p, t| {
        g.mse(p, t);
    })
}

pub fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Case {
    let mut g = Graph::new();
    let z = g.input("logits");
    let t = g.input("target");
    g.softmax_cross_entropy(z, t);
    let inputs = bind(vec![("logits", random(rng, &[4, 3])), ("target", probabilities(rng, 4, 3))]);
    (g, inputs, vec!["logits", "target"])
}

pub fn network(rng: &mut ChaCha8Rng) -> Case {
    let mut g = Graph::new();
    let x = g.input("x");
    let w1 = g.input("w1");
    let b1 = g.input("b1");
    let w2 = g.input("w2");
    let t = g.input("t");
    let c = g.conv2d(x, w1, 1, 1);
    let c = g.bias_add(c, b1);
    let c = g.relu(c);
    let c = g.conv2d(c, w2, 1, 0);
    let z = g.global_avg_pool(c);
    g.softmax_cross_entropy(z, t);
    let inputs = bind(vec![
        ("x", random(rng, &[2, 1, 4, 4])),
        ("w1", random(rng, &[3, 1, 3, 3])),
        ("b1", random(rng, &[3])),
        ("w2", random(rng, &[2, 3, 1, 1])),
        ("t", probabilities(rng, 2, 2)),
    ]);
    (g, inputs, vec!["x", "w1", "b1", "w2"])
}

pub fn all_ops() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> {
    vec![
        ("matmul", Box::new(matmul)),
        ("conv2d s1 p0", Box::new(conv(1, 0))),
        ("conv2d s1 p1", Box::new(conv(1, 1))),
        ("conv2d s2 p1", Box::new(conv(2, 1))),
        ("conv2d s2 p0", Box::new(conv(2, 0))),
        ("conv2d 1x1", Box::new(conv_pointwise)),
        ("bias_add", Box::new(bias_add)),
        ("relu", Box::new(relu)),
        ("add", Box::new(add)),
        ("scale", Box::new(scale)),
        ("global_avg_pool", Box::new(global_avg_pool)),
        ("flatten", Box::new(flatten)),
        ("mse", Box::new(mse)),
        ("softmax_cross_entropy", Box::new(softmax_cross_entropy)),
    ]
}

/// Worst error of `build` over `POINTS` random points drawn from stream `op`.
pub fn op_error(op: u64, build: &dyn Fn(&mut ChaCha8Rng) -> Case) -> f64 {
    (0..POINTS)
        .map(|p| {
            let mut rng = rng_for(op, p);
            let case = build(&mut rng);
            graph_error(case, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// The LSQ rule written out coordinate by coordinate.
pub fn lsq_reference(up: &[f64], w: &[f64], bits: u32, s: f64) -> (Vec<f64>, f64) {
    let q_max = 2f64.powi(bits as i32 - 1) - 1.0;
    let q_min = -(2f64.powi(bits as i32 - 1));
    let g = 1.0 / (w.len() as f64 * q_max).sqrt();
    let mut gw = vec![];
    let mut gs = 0.0;
    for (u, v) in up.iter().zip(w) {
        let r = v / s;
        if r < q_min {
            gw.push(0.0);
            gs += q_min * u;
        } else if r > q_max {
            gw.push(0.0);
            gs += q_max * u;
        } else {
            gw.push(*u);
            gs += (r.round_ties_even() - r) * u;
        }
    }
    (gw, gs * g)
}

/// Worst relative error of the straight-through gradients against the LSQ rule.
pub fn ste_error() -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..POINTS {
        let rng = &mut rng_for(1000, p);
        let bits = [2, 3, 4, 8][rng.random_range(0..4)];
        let s = rng.random_range(0.05..0.5);
        let w = Tensor::vector(&(0..20).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        let up = random(rng, &[20]);
        let spec = QuantSpec::new(bits, s).unwrap();
        let view = quantize(&w, &spec).unwrap();
        let (gw, gs) = ste_backward(&up, &w, &spec, Some(&view)).unwrap();
        let (rw, rs) = lsq_reference(up.data(), w.data(), bits, s);
        let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
        for (a, b) in gw.data().iter().zip(&rw) {
            worst = worst.max(rel(*a, *b));
        }
        worst = worst.max(rel(gs, rs));
    }
    worst
}
