//! Manual stage-timing probe for the full-profile forward pass.
use std::time::Instant;
use rangeloop_core::model::*;
use rangeloop_core::rangeimage::{ProjectionParams, RangeImage};
use rangeloop_core::tensor::Graph;
use rand_chacha::rand_core::{RngCore, SeedableRng};

#[test]
#[ignore = "manual profiling"]
fn stage_timing() {
    let config = ModelConfig::full(10);
    let weights = ModelWeights::<f32>::init(&config).expect("weights");
    let params = ProjectionParams::new(900, 64, 25f64.to_radians(), 3f64.to_radians()).expect("p");
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let pixels: Vec<f32> = (0..64 * 900)
        .map(|_| if r.next_u64() % 5 == 0 { 0.0 } else { ((r.next_u64() >> 40) % 80) as f32 })
        .collect();
    let image = RangeImage::from_pixels(params, pixels).expect("image");

    for _ in 0..3 {
        let t0 = Instant::now();
        let mut g: Graph<f32> = Graph::new();
        let vars = ModelVars::register(&mut g, &weights, false);
        let input = g.constant(image_to_tensor::<f32>(&image, config.input_scale));
        let t1 = Instant::now();
        let layers = ccm_forward_layers(&mut g, input, &config.ccm, &vars).expect("ccm");
        let feat = *layers.last().unwrap();
        let t2 = Instant::now();
        let attended = rtm_forward(&mut g, feat, &config.rtm, &vars).expect("rtm");
        let t3 = Instant::now();
        let vlad = netvlad(&mut g, attended, &vars).expect("vlad");
        let t4 = Instant::now();
        let col = g.reshape(vlad, vec![config.vlad_dim(), 1]).unwrap();
        let m = g.matmul(vars.head.0, col).unwrap();
        let b = g.add_rows(m, vars.head.1).unwrap();
        let _ = g.reshape(b, vec![config.head.descriptor_dim]).unwrap();
        let t5 = Instant::now();
        println!(
            "setup {:?} | ccm {:?} | rtm {:?} | vlad {:?} | head {:?} | total {:?}",
            t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4, t5 - t0
        );
    }
}
