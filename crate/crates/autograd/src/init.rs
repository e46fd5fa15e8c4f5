//! Deterministic weight initialization. All draws come from the caller's
//! RNG, so construction order fully determines the weights.

use ndarray::ArrayD;
use rand::Rng;

/// Kaiming-uniform bound for a layer with `fan_in` inputs feeding a
/// leaky-ReLU with the given negative slope.
fn kaiming_bound(fan_in: usize, neg_slope: f64) -> f64 {
    assert!(fan_in > 0, "fan_in must be positive");
    let gain = (2.0 / (1.0 + neg_slope * neg_slope)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/len agree")
}

/// `[c_out, c_in, k, k]` kernel, Kaiming-uniform over fan-in.
pub fn conv_weight(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize, neg_slope: f64) -> ArrayD<f64> {
    let bound = kaiming_bound(c_in * k * k, neg_slope);
    uniform(rng, &[c_out, c_in, k, k], bound)
}

/// `[out, in]` matrix, Kaiming-uniform over fan-in.
pub fn linear_weight(rng: &mut impl Rng, out: usize, inn: usize, neg_slope: f64) -> ArrayD<f64> {
    let bound = kaiming_bound(inn, neg_slope);
    uniform(rng, &[out, inn], bound)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(ndarray::IxDyn(shape), 1.0)
}
