//! Central finite-difference sweep over every differentiable primitive and
//! the full training loss. The oracle path never touches the graph's own
//! backward code: losses are re-evaluated forward under coordinate
//! perturbations.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::RngCore;

use rangeloop_core::model::{
    CcmConfig, ConvLayerSpec, HeadConfig, ModelConfig, ModelVars, ModelWeights, PadKind, RtmConfig,
};
use rangeloop_core::rangeimage::{ProjectionParams, RangeImage};
use rangeloop_core::tensor::{Graph, HorizontalPad, Pad1d, PadMode, PoolKind, Tensor, Var};
use rangeloop_core::train::{batch_loss_var, LossKind};

use super::{
    check_gradients, gradient_close, random_tensor, random_tensor_nonzero, rng, uniform, unit,
    FD_STEP,
};

/// Weighted sum against a fixed constant, turning any tensor into a scalar
/// loss with nontrivial per-element weights.
fn project_to_scalar(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let len = g.value(x).len();
    let shape = g.value(x).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let data: Vec<f64> = (0..len).map(|_| uniform(&mut r, 0.2, 1.0)).collect();
    let weights = g.constant(Tensor::new(shape, data).expect("weights"));
    let weighted = g.mul(x, weights).expect("shapes match");
    g.sum(weighted)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() as usize) % (hi - lo + 1)
}

/// Runs `instances` random cases per primitive op; returns coordinates
/// checked per op name.
pub fn primitive_op_suite(instances: usize) -> Vec<(&'static str, usize)> {
    let mut totals = Vec::new();
    let mut record = |name: &'static str, count: usize| totals.push((name, count));

    // conv2d over both horizontal padding modes and strides.
    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(1000 + i as u64);
        let (c_in, h, w) = (dims(&mut r, 1, 2), dims(&mut r, 3, 5), dims(&mut r, 4, 7));
        let (c_out, kh, kw) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let stride = (dims(&mut r, 1, 2), 1);
        let vpad = dims(&mut r, 0, 1);
        let circular = i % 2 == 0;
        let horizontal = if circular {
            HorizontalPad::Circular { left: kw / 2, right: kw - 1 - kw / 2 }
        } else {
            HorizontalPad::Zero(kw / 2)
        };
        let pad = PadMode::new(vpad, horizontal);
        let input = random_tensor(&mut r, &[c_in, h, w], -1.5, 1.5);
        let kernel = random_tensor(&mut r, &[c_out, c_in, kh, kw], -1.0, 1.0);
        checked += check_gradients("conv2d", &[input, kernel], &|g, vars| {
            let out = g.conv2d(vars[0], vars[1], stride, pad).expect("conv2d");
            project_to_scalar(g, out, 7 + i as u64)
        });
    }
    record("conv2d", checked);

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(2000 + i as u64);
        let len = dims(&mut r, 3, 8);
        let k = [1, 3, 5][i % 3];
        let pad = if i % 2 == 0 { Pad1d::Circular } else { Pad1d::Zero };
        let input = random_tensor(&mut r, &[1, len], -1.5, 1.5);
        let kernel = random_tensor(&mut r, &[1, 1, k], -1.0, 1.0);
        checked += check_gradients("conv1d", &[input, kernel], &|g, vars| {
            let out = g.conv1d(vars[0], vars[1], pad).expect("conv1d");
            project_to_scalar(g, out, 11 + i as u64)
        });
    }
    record("conv1d", checked);

    // Elementwise unaries; kinked or domain-limited ones draw safe inputs.
    let unaries: [(&'static str, fn(&mut Graph<f64>, Var) -> Var, f64, f64, f64); 5] = [
        ("relu", |g, x| g.relu(x), -2.0, 2.0, 1e-2),
        ("abs", |g, x| g.abs(x), -2.0, 2.0, 1e-2),
        ("sigmoid", |g, x| g.sigmoid(x), -3.0, 3.0, 0.0),
        ("sqrt", |g, x| g.sqrt(x), 0.1, 2.0, 0.0),
        ("neg", |g, x| g.neg(x), -2.0, 2.0, 0.0),
    ];
    for (name, op, lo, hi, min_abs) in unaries {
        let mut checked = 0;
        for i in 0..instances {
            let mut r = rng(3000 + i as u64);
            let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 4)];
            let input = if min_abs > 0.0 {
                random_tensor_nonzero(&mut r, &shape, lo, hi, min_abs)
            } else {
                random_tensor(&mut r, &shape, lo, hi)
            };
            checked += check_gradients(name, &[input], &|g, vars| {
                let out = op(g, vars[0]);
                project_to_scalar(g, out, 13 + i as u64)
            });
        }
        record(name, checked);
    }

    // Elementwise binaries; div keeps the denominator away from zero.
    type BinOp = fn(&mut Graph<f64>, Var, Var) -> Var;
    let binaries: [(&'static str, BinOp, f64); 4] = [
        ("add", |g, a, b| g.add(a, b).expect("add"), 0.0),
        ("sub", |g, a, b| g.sub(a, b).expect("sub"), 0.0),
        ("mul", |g, a, b| g.mul(a, b).expect("mul"), 0.0),
        ("div", |g, a, b| g.div(a, b).expect("div"), 0.3),
    ];
    for (name, op, b_min_abs) in binaries {
        let mut checked = 0;
        for i in 0..instances {
            let mut r = rng(4000 + i as u64);
            let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 4)];
            let a = random_tensor(&mut r, &shape, -1.5, 1.5);
            let b = if b_min_abs > 0.0 {
                random_tensor_nonzero(&mut r, &shape, -1.5, 1.5, b_min_abs)
            } else {
                random_tensor(&mut r, &shape, -1.5, 1.5)
            };
            checked += check_gradients(name, &[a, b], &|g, vars| {
                let out = op(g, vars[0], vars[1]);
                project_to_scalar(g, out, 17 + i as u64)
            });
        }
        record(name, checked);
    }

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(5000 + i as u64);
        let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 3)];
        let c = uniform(&mut r, -1.0, 1.0);
        let input = random_tensor(&mut r, &shape, -1.5, 1.5);
        checked += check_gradients("scalar ops", &[input], &|g, vars| {
            let shifted = g.add_scalar(vars[0], c);
            let scaled = g.mul_scalar(shifted, 0.7);
            project_to_scalar(g, scaled, 19 + i as u64)
        });
    }
    record("add_scalar/mul_scalar", checked);

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(6000 + i as u64);
        let (m, k, n) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let a = random_tensor(&mut r, &[m, k], -1.5, 1.5);
        let b = random_tensor(&mut r, &[k, n], -1.5, 1.5);
        checked += check_gradients("matmul", &[a, b], &|g, vars| {
            let out = g.matmul(vars[0], vars[1]).expect("matmul");
            project_to_scalar(g, out, 23 + i as u64)
        });
    }
    record("matmul", checked);

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(7000 + i as u64);
        let shape = [dims(&mut r, 2, 4), dims(&mut r, 2, 4)];
        let input = random_tensor(&mut r, &shape, -1.5, 1.5);
        checked += check_gradients("transpose/reshape", &[input], &|g, vars| {
            let t = g.transpose(vars[0]).expect("transpose");
            let len = g.value(t).len();
            let flat = g.reshape(t, vec![len]).expect("reshape");
            project_to_scalar(g, flat, 29 + i as u64)
        });
    }
    record("transpose/reshape", checked);

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(8000 + i as u64);
        let axis = i % 2;
        let rows = dims(&mut r, 2, 3);
        let cols = dims(&mut r, 2, 3);
        let a = random_tensor(&mut r, &[rows, cols], -1.5, 1.5);
        let b = random_tensor(&mut r, &[rows, cols], -1.5, 1.5);
        checked += check_gradients("concat", &[a, b], &|g, vars| {
            let out = g.concat(&[vars[0], vars[1]], axis).expect("concat");
            project_to_scalar(g, out, 31 + i as u64)
        });
    }
    record("concat", checked);

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(9000 + i as u64);
        let shape = [dims(&mut r, 2, 4), dims(&mut r, 2, 4)];
        let axis = i % 2;
        let input = random_tensor(&mut r, &shape, -2.0, 2.0);
        checked += check_gradients("softmax", &[input], &|g, vars| {
            let out = g.softmax(vars[0], axis).expect("softmax");
            project_to_scalar(g, out, 37 + i as u64)
        });
    }
    record("softmax", checked);

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(10_000 + i as u64);
        let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 3)];
        let axis = i % 2;
        let input = random_tensor(&mut r, &shape, -1.5, 1.5);
        checked += check_gradients("sum/sum_axis", &[input], &|g, vars| {
            let partial = g.sum_axis(vars[0], axis).expect("sum_axis");
            let weighted = project_to_scalar(g, partial, 41 + i as u64);
            let total = g.sum(vars[0]);
            g.add(weighted, total).expect("scalars")
        });
    }
    record("sum/sum_axis", checked);

    for (name, kind) in [("mean pool", PoolKind::Mean), ("max pool", PoolKind::Max)] {
        let mut checked = 0;
        for i in 0..instances {
            let mut r = rng(11_000 + i as u64);
            let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 3), dims(&mut r, 2, 3)];
            let axes: &[usize] = match i % 3 {
                0 => &[0],
                1 => &[2],
                _ => &[1, 2],
            };
            // Continuous random draws make max-pool ties measure-zero.
            let input = random_tensor(&mut r, &shape, -2.0, 2.0);
            checked += check_gradients(name, &[input], &|g, vars| {
                let out = g.pool(vars[0], kind, axes).expect("pool");
                project_to_scalar(g, out, 43 + i as u64)
            });
        }
        record(name, checked);
    }

    let mut checked = 0;
    for i in 0..instances {
        let mut r = rng(12_000 + i as u64);
        let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 4)];
        let axis = i % 2;
        // Slices keep a healthy norm so the quotient rule is well posed.
        let input = random_tensor_nonzero(&mut r, &shape, -2.0, 2.0, 0.4);
        checked += check_gradients("l2norm", &[input], &|g, vars| {
            let out = g.l2norm(vars[0], axis).expect("l2norm");
            project_to_scalar(g, out, 47 + i as u64)
        });
    }
    record("l2norm", checked);

    type RowOp = fn(&mut Graph<f64>, Var, Var) -> Var;
    let broadcasts: [(&'static str, RowOp, usize); 3] = [
        ("scale_rows", |g, m, v| g.scale_rows(m, v).expect("scale_rows"), 0),
        ("scale_cols", |g, m, v| g.scale_cols(m, v).expect("scale_cols"), 1),
        ("add_rows", |g, m, v| g.add_rows(m, v).expect("add_rows"), 0),
    ];
    for (name, op, axis) in broadcasts {
        let mut checked = 0;
        for i in 0..instances {
            let mut r = rng(13_000 + i as u64);
            let shape = [dims(&mut r, 2, 3), dims(&mut r, 2, 4)];
            let m = random_tensor(&mut r, &shape, -1.5, 1.5);
            let v = random_tensor(&mut r, &[shape[axis]], -1.5, 1.5);
            checked += check_gradients(name, &[m, v], &|g, vars| {
                let out = op(g, vars[0], vars[1]);
                project_to_scalar(g, out, 53 + i as u64)
            });
        }
        record(name, checked);
    }

    totals
}

/// A micro model small enough for full-coordinate finite differences.
pub fn micro_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        ccm: CcmConfig {
            input_height: 8,
            input_width: 12,
            layers: vec![
                ConvLayerSpec { kernel_h: 5, kernel_w: 5, out_channels: 2, stride_h: 2, vertical_pad: 2 },
                ConvLayerSpec { kernel_h: 3, kernel_w: 3, out_channels: 2, stride_h: 2, vertical_pad: 1 },
                ConvLayerSpec { kernel_h: 3, kernel_w: 3, out_channels: 3, stride_h: 2, vertical_pad: 1 },
                ConvLayerSpec { kernel_h: 1, kernel_w: 3, out_channels: 4, stride_h: 1, vertical_pad: 0 },
            ],
            pad_kind: PadKind::Circular,
        },
        rtm: RtmConfig { channel_kernel: 3, spatial_kernel: 3 },
        head: HeadConfig { clusters: 2, descriptor_dim: 6 },
        input_scale: 0.05,
        seed,
    }
}

pub fn micro_image(seed: u64) -> RangeImage {
    let params = ProjectionParams::new(12, 8, 0.3, 0.3).expect("params");
    let mut r = rng(seed);
    let pixels: Vec<f32> = (0..96)
        .map(|_| {
            let v = r.next_u64();
            if v % 6 == 0 {
                0.0
            } else {
                (5.0 + unit(&mut r) * 40.0) as f32
            }
        })
        .collect();
    RangeImage::from_pixels(params, pixels).expect("image")
}

/// Finite-difference check of the full pair loss against every model
/// parameter, on a fresh micro model per instance. Returns coordinates
/// checked.
pub fn loss_suite(instances: usize) -> usize {
    let mut total = 0;
    let mut all_skipped = 0usize;
    let mut all_coords = 0usize;
    for i in 0..instances {
        let config = micro_model_config(100 + i as u64);
        let weights = ModelWeights::<f64>::init(&config).expect("weights");
        let images: Vec<RangeImage> = (0..4).map(|j| micro_image(500 + 10 * i as u64 + j)).collect();
        let mut r = rng(900 + i as u64);
        let targets: Vec<f64> = (0..4).map(|_| unit(&mut r)).collect();

        let eval = |w: &ModelWeights<f64>, want_grads: bool| -> (f64, Vec<Vec<f64>>) {
            let mut g: Graph<f64> = Graph::new();
            let vars = ModelVars::register(&mut g, w, true);
            let descriptors: Vec<Var> = images
                .iter()
                .map(|im| {
                    let input = g.constant(rangeloop_core::model::image_to_tensor(im, config.input_scale));
                    rangeloop_core::model::descriptor_var(&mut g, input, &config, &vars)
                        .expect("descriptor")
                })
                .collect();
            let loss = batch_loss_var(
                &mut g,
                &descriptors[..2],
                &descriptors[2..],
                &targets,
                LossKind::Absolute,
            )
            .expect("loss");
            let value = g.value(loss).data()[0];
            if !want_grads {
                return (value, Vec::new());
            }
            g.backward(loss).expect("backward");
            let grads = vars
                .ordered()
                .iter()
                .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
                .collect();
            (value, grads)
        };

        let (loss0, analytic) = eval(&weights, true);
        let names: Vec<String> = weights.named().iter().map(|(n, _)| n.clone()).collect();
        let mut skipped = 0usize;
        let mut instance_total = 0usize;
        for (which, name) in names.iter().enumerate() {
            let len = weights.named()[which].1.len();
            for coord in 0..len {
                let value_at = |offset: f64| -> f64 {
                    let mut moved = weights.clone();
                    moved.named_mut()[which].1.data_mut()[coord] += offset;
                    eval(&moved, false).0
                };
                let plus = value_at(FD_STEP);
                let minus = value_at(-FD_STEP);
                let central = (plus - minus) / (2.0 * FD_STEP);
                let a = analytic[which][coord];
                instance_total += 1;
                if gradient_close(a, central) {
                    continue;
                }
                // The loss is piecewise smooth (ReLU, absolute value). A
                // kink inside the interval splits the one-sided quotients;
                // on smooth ground they agree and a mismatch is a real bug.
                let forward = (plus - loss0) / FD_STEP;
                let backward = (loss0 - minus) / FD_STEP;
                if !gradient_close(forward, backward) {
                    skipped += 1;
                    continue;
                }
                panic!(
                    "loss instance {i}: {name}[{coord}]: analytic {a} vs finite difference {central}"
                );
            }
        }
        all_skipped += skipped;
        all_coords += instance_total;
        total += instance_total - skipped;
    }
    // Kinks cluster around single near-zero activations; tolerate a small
    // global fraction but never let skips dominate the sweep.
    assert!(
        all_skipped * 20 <= all_coords,
        "{all_skipped} of {all_coords} coordinates sat on kinks"
    );
    total
}
