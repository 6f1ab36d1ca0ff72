#![allow(dead_code)]

use rand::Rng as _;
use speakerssl::autodiff::{Tape, Tensor, Var};
use speakerssl::seed::{rng_from, Rng};

pub fn rng(seed: u64) -> Rng {
    rng_from(seed ^ 0x5eed)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Rows drawn from a standard normal and scaled to unit length.
pub fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| gaussian(rng)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / n));
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut Rng, d: usize) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&basis).unwrap()
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|x| x.abs())
        .fold(floor, f64::max);
    diff / scale
}

/// Central finite differences of `f` with respect to every entry of every input.
pub fn numeric_grads(inputs: &[Tensor], h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for k in 0..g.len() {
            let base = inputs[i].data()[k];
            let mut plus = inputs[i].data().to_vec();
            plus[k] = base + h;
            work[i] = Tensor::new(inputs[i].shape().to_vec(), plus).unwrap();
            let fp = f(&work);
            let mut minus = inputs[i].data().to_vec();
            minus[k] = base - h;
            work[i] = Tensor::new(inputs[i].shape().to_vec(), minus).unwrap();
            let fm = f(&work);
            g[k] = (fp - fm) / (2.0 * h);
        }
        work[i] = inputs[i].clone();
        out.push(g);
    }
    out
}

/// Analytic gradients of a scalar graph built by `build` over leaf inputs.
pub fn analytic_grads(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let value = tape.value(out).item().unwrap();
    let g = tape.backward(out).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.get_or_zeros(*v, t.shape()).data().to_vec())
        .collect();
    (value, grads)
}

/// Value of the same graph with all inputs as constants.
pub fn forward(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item().unwrap()
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_check(inputs: &[Tensor], h: f64, build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (_, analytic) = analytic_grads(inputs, build);
    let numeric = numeric_grads(inputs, h, &|xs| forward(xs, build));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n, 1e-8))
        .fold(0.0, f64::max)
}
