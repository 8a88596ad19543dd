//! Shared helpers for the integration suites: seeded random tensors and a
//! central finite-difference oracle kept independent of the graph's own
//! backward pass.
//!
//! Compiled into every test target, so not every helper is used by all of
//! them.
#![allow(dead_code)]

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rangeloop_core::rangeimage::{ProjectionParams, RangeImage};
use rangeloop_core::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + unit(rng) * (hi - lo)
}

/// Uniform away from zero, for ops with kinks or poles there.
pub fn uniform_nonzero(rng: &mut ChaCha8Rng, lo: f64, hi: f64, min_abs: f64) -> f64 {
    loop {
        let v = uniform(rng, lo, hi);
        if v.abs() >= min_abs {
            return v;
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor")
}

pub fn random_tensor_nonzero(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    min_abs: f64,
) -> Tensor<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| uniform_nonzero(rng, lo, hi, min_abs)).collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor")
}

pub fn tiny_projection_params() -> ProjectionParams {
    ProjectionParams::new(90, 16, 23f64.to_radians(), 5f64.to_radians()).expect("params")
}

/// Random range image: mostly valid pixels with ranges up to 80 m, a fifth
/// of them invalid.
pub fn random_range_image(seed: u64, params: ProjectionParams) -> RangeImage {
    let mut rng = rng(seed);
    let pixels: Vec<f32> = (0..params.height * params.width)
        .map(|_| {
            let r = rng.next_u64();
            if r % 5 == 0 {
                0.0
            } else {
                ((r >> 16) % 8000) as f32 / 100.0
            }
        })
        .collect();
    RangeImage::from_pixels(params, pixels).expect("image")
}

/// Checks one analytic gradient coordinate against a central difference,
/// with an absolute floor for near-zero gradients.
pub fn gradient_close(analytic: f64, finite: f64) -> bool {
    (analytic - finite).abs() <= FD_TOLERANCE * analytic.abs().max(finite.abs()) + 1e-7
}

/// Runs the finite-difference oracle over every coordinate of every listed
/// input: `build` must construct the graph from the inputs and return the
/// scalar loss. Returns the number of coordinates checked; panics with
/// context on the first mismatch.
pub fn check_gradients(
    label: &str,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> usize {
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        assert_eq!(g.value(loss).len(), 1, "{label}: loss must be scalar");
        let value = g.value(loss).data()[0];
        g.backward(loss).unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect();
        (value, grads)
    };

    let (_, analytic) = eval(inputs);
    let mut checked = 0;
    for (which, tensor) in inputs.iter().enumerate() {
        for i in 0..tensor.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= FD_STEP;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
            let a = analytic[which][i];
            assert!(
                gradient_close(a, fd),
                "{label}: input {which} coordinate {i}: analytic {a} vs finite difference {fd}"
            );
            checked += 1;
        }
    }
    checked
}

pub mod gradsuite;
pub mod deskrun;
