//! One full desk-scale experiment: synthesize the seeded world, label the
//! training split, train, and score retrieval of the held-out revisit
//! queries against the training map.

use rangeloop_core::dataio::{generate_world, synth_scan};
use rangeloop_core::model::descriptor;
use rangeloop_core::overlap::{label_sequence, overlap, reproject, OverlapLabel};
use rangeloop_core::profile::{profile, ProfileKind};
use rangeloop_core::rangeimage::project_cloud;
use rangeloop_core::retrieval::{
    evaluate, DescriptorIndex, EvalProtocol, GroundTruth, PositiveRule,
};
use rangeloop_core::train::{fit, Dataset, FitReport};

pub struct DeskOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub recall_at_1: f64,
    pub queries: usize,
}

/// Trains on the first pass plus the even-position revisits, so the data
/// carries movable-object churn, and evaluates the odd-position revisits
/// as held-out queries. Positives follow the overlap rule: a retrieved
/// scan counts when its true overlap with the query exceeds the loop
/// threshold.
pub fn run_desk_seed(seed: u64) -> DeskOutcome {
    run_desk_profile(&profile(ProfileKind::Desk, seed))
}

/// Same experiment with an explicit (possibly tweaked) profile.
pub fn run_desk_profile(p: &rangeloop_core::profile::Profile) -> DeskOutcome {
    let seed = p.train.seed;
    let world = generate_world(&p.world).expect("world");

    let mut clouds = Vec::new();
    let mut images = Vec::new();
    for tp in &world.trajectory {
        let (cloud, image) = synth_scan(&world, &tp.pose, &p.params, tp.visit).expect("scan");
        clouds.push(cloud);
        images.push(image);
    }
    let n = p.world.positions;
    let mut train_ids: Vec<usize> = (0..n).collect();
    train_ids.extend((n..2 * n).filter(|i| (i - n) % 2 == 0));
    let query_ids: Vec<usize> = (n..2 * n).filter(|i| (i - n) % 2 == 1).collect();

    let train_clouds: Vec<_> = train_ids.iter().map(|&i| clouds[i].clone()).collect();
    let train_poses: Vec<_> = train_ids.iter().map(|&i| world.trajectory[i].pose).collect();
    let labels = label_sequence(&train_clouds, &train_poses, &p.params, p.delta, p.gate_radius)
        .expect("labels");
    let train_images: Vec<_> = train_ids.iter().map(|&i| images[i].clone()).collect();
    let dataset = Dataset::new(train_images, &labels).expect("dataset");

    let out_dir = std::env::temp_dir().join(format!(
        "rangeloop-acceptance-desk-{}-{seed}",
        std::process::id()
    ));
    let report: FitReport<f32> = fit(&dataset, &p.model, &p.train, &out_dir).expect("fit");
    std::fs::remove_dir_all(&out_dir).ok();

    let entries: Vec<(usize, Vec<f32>)> = train_ids
        .iter()
        .map(|&i| (i, descriptor(&images[i], &p.model, &report.weights).expect("descriptor")))
        .collect();
    let index = DescriptorIndex::build(entries).expect("index");
    let queries: Vec<(usize, Vec<f32>)> = query_ids
        .iter()
        .map(|&i| (i, descriptor(&images[i], &p.model, &report.weights).expect("descriptor")))
        .collect();

    // Ground-truth overlap of every query against every database scan.
    let mut gt = Vec::new();
    for &q in &query_ids {
        let (query_image, _) = project_cloud(&clouds[q], &p.params).expect("query image");
        for &r in &train_ids {
            let (reprojected, _) = reproject(
                &clouds[r],
                &world.trajectory[q].pose,
                &world.trajectory[r].pose,
                &p.params,
            )
            .expect("reproject");
            let value = overlap(&query_image, &reprojected, p.delta).unwrap_or(0.0);
            gt.push(OverlapLabel { query_id: q, reference_id: r, overlap: value });
        }
    }
    let protocol = EvalProtocol {
        rule: PositiveRule::OverlapAbove(rangeloop_core::overlap::LOOP_CLOSURE_THRESHOLD),
        exclusion_window: 0,
        ar_ks: vec![1],
    };
    let metrics =
        evaluate(&queries, &index, &GroundTruth::Overlaps(gt), &protocol).expect("metrics");

    DeskOutcome {
        initial_loss: *report.epoch_losses.first().expect("losses"),
        final_loss: *report.epoch_losses.last().expect("losses"),
        recall_at_1: metrics.recall_at_1,
        queries: metrics.queries_evaluated,
    }
}
