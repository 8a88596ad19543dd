//! End-to-end tests of the command-line surface: determinism of synthetic
//! outputs, the full synth -> label -> train -> index -> eval pipeline,
//! exit-code conventions, and the equivariance check in both modes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_rangeloop")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().expect("spawn rangeloop")
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rangeloop-cli-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("relative").display().to_string();
                files.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    files
}

#[test]
fn unknown_flags_and_commands_exit_one_with_usage() {
    let out = run(&["synth", "--frobnicate", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown flag"));
    assert!(stderr.contains("rangeloop <command>"));

    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("equicheck"));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = temp_dir("synth");
    let args = ["synth", "--seed", "7", "--profile", "tiny", "--out", dir.to_str().expect("utf8")];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let a = tree_bytes(&dir);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let b = tree_bytes(&dir);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert_eq!(Some(bytes), b.get(name).as_deref(), "{name} differs between runs");
    }
    assert!(a.keys().any(|k| k.starts_with("scans/")));
    assert!(a.contains_key("poses.txt"));
    assert!(a.contains_key("world.txt"));
    assert!(a.contains_key("manifest.txt"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_pipeline_runs_and_matches_library_results() {
    let data = temp_dir("pipeline-data");
    let data_s = data.to_str().expect("utf8");
    let out = run(&["synth", "--seed", "5", "--profile", "tiny", "--out", data_s]);
    assert_eq!(out.status.code(), Some(0), "synth: {}", String::from_utf8_lossy(&out.stderr));

    // Labels over the generated scans.
    let labels = format!("{data_s}/labels.txt");
    let out = run(&[
        "label",
        "--scan-dir",
        &format!("{data_s}/scans"),
        "--poses",
        &format!("{data_s}/poses.txt"),
        "--profile",
        "tiny",
        "--out",
        &labels,
    ]);
    assert_eq!(out.status.code(), Some(0), "label: {}", String::from_utf8_lossy(&out.stderr));

    // A short training run.
    let model_dir = temp_dir("pipeline-model");
    let model_dir_s = model_dir.to_str().expect("utf8");
    let out = run(&[
        "train",
        "--data",
        data_s,
        "--profile",
        "tiny",
        "--seed",
        "5",
        "--epochs",
        "2",
        "--out",
        model_dir_s,
    ]);
    assert_eq!(out.status.code(), Some(0), "train: {}", String::from_utf8_lossy(&out.stderr));
    assert!(model_dir.join("model.rlw").exists());
    assert!(model_dir.join("metrics.txt").exists());

    // Index the first pass, query with a revisit scan.
    let db = format!("{model_dir_s}/db.rld");
    let out = run(&[
        "index",
        "--model",
        &format!("{model_dir_s}/model.rlw"),
        "--model-config",
        &format!("{model_dir_s}/model.cfg"),
        "--scan-dir",
        &format!("{data_s}/scans"),
        "--profile",
        "tiny",
        "--to",
        "30",
        "--out",
        &db,
    ]);
    assert_eq!(out.status.code(), Some(0), "index: {}", String::from_utf8_lossy(&out.stderr));

    let out = run(&[
        "query",
        "--index",
        &db,
        "--model",
        &format!("{model_dir_s}/model.rlw"),
        "--model-config",
        &format!("{model_dir_s}/model.cfg"),
        "--profile",
        "tiny",
        "--scan",
        &format!("{data_s}/scans/000030.bin"),
        "--top-k",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "query: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("rank scan_id similarity"));
    assert_eq!(stdout.lines().count(), 4);

    // Evaluate revisits against the first pass by pose distance.
    let qdb = format!("{model_dir_s}/queries.rld");
    let out = run(&[
        "index",
        "--model",
        &format!("{model_dir_s}/model.rlw"),
        "--model-config",
        &format!("{model_dir_s}/model.cfg"),
        "--scan-dir",
        &format!("{data_s}/scans"),
        "--profile",
        "tiny",
        "--from",
        "30",
        "--out",
        &qdb,
    ]);
    assert_eq!(out.status.code(), Some(0), "query index: {}", String::from_utf8_lossy(&out.stderr));

    let eval_dir = temp_dir("pipeline-eval");
    let out = run(&[
        "eval",
        "--index",
        &db,
        "--queries",
        &qdb,
        "--positions",
        &format!("{data_s}/poses.txt"),
        "--radius",
        "4.0",
        "--window",
        "0",
        "--out",
        eval_dir.to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(0), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("recall_at_1 "));
    assert!(eval_dir.join("metrics.csv").exists());

    // The CLI's metrics equal the library path run on the same files.
    {
        use rangeloop_core::profile::{profile, ProfileKind};
        use rangeloop_core::retrieval::{
            evaluate, DescriptorIndex, EvalProtocol, GroundTruth, PositiveRule,
        };
        let p = profile(ProfileKind::Tiny, 5);
        let index = DescriptorIndex::load(Path::new(&db)).expect("db");
        let queries = DescriptorIndex::load(Path::new(&qdb)).expect("qdb");
        let poses = rangeloop_core::dataio::read_poses(&data.join("poses.txt")).expect("poses");
        let positions: Vec<(usize, [f64; 3])> =
            poses.iter().enumerate().map(|(i, p)| (i, *p.translation())).collect();
        let protocol = EvalProtocol {
            rule: PositiveRule::DistanceWithin(4.0),
            exclusion_window: 0,
            ar_ks: vec![1, 5, 10],
        };
        let metrics = evaluate(
            &queries.entries().to_vec(),
            &index,
            &GroundTruth::Positions(positions),
            &protocol,
        )
        .expect("metrics");
        let text = std::fs::read_to_string(eval_dir.join("metrics.txt")).expect("metrics.txt");
        assert_eq!(text, metrics.text());
        let _ = p;
    }

    std::fs::remove_dir_all(&data).ok();
    std::fs::remove_dir_all(&model_dir).ok();
    std::fs::remove_dir_all(&eval_dir).ok();
}

#[test]
fn eval_reports_the_adversarial_fixture_metrics() {
    // Rebuild the rank-2 fixture as descriptor databases on disk and let
    // the CLI evaluate it: Recall@1 must print 0, Recall@1% must print 1.
    use rangeloop_core::overlap::{write_labels_file, OverlapLabel};
    use rangeloop_core::retrieval::DescriptorIndex;

    let dir = temp_dir("adversarial");
    let n = 200usize;
    let dim = n + 1;
    let basis = |axis: usize, scale: f32| {
        let mut v = vec![0.0f32; dim];
        v[axis] = scale;
        v
    };
    let mut entries = vec![(0usize, basis(0, 1.0))];
    for i in 1..n {
        entries.push((i, basis(i, 1.0)));
    }
    DescriptorIndex::build(entries).expect("db").save(&dir.join("db.rld")).expect("save db");

    let mut queries = Vec::new();
    let mut labels = Vec::new();
    for i in 1..n {
        let mut probe = basis(0, 1.0);
        probe[i] = 0.5;
        queries.push((1000 + i, probe));
        labels.push(OverlapLabel { query_id: 1000 + i, reference_id: i, overlap: 0.8 });
    }
    DescriptorIndex::build(queries).expect("qdb").save(&dir.join("queries.rld")).expect("save qdb");
    write_labels_file(&dir.join("labels.txt"), &labels).expect("labels");

    let out = run(&[
        "eval",
        "--index",
        dir.join("db.rld").to_str().expect("utf8"),
        "--queries",
        dir.join("queries.rld").to_str().expect("utf8"),
        "--labels",
        dir.join("labels.txt").to_str().expect("utf8"),
        "--window",
        "0",
        "--out",
        dir.join("eval").to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(0), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("recall_at_1 0.000000"), "stdout: {stdout}");
    assert!(stdout.contains("recall_at_1_percent 1.000000"), "stdout: {stdout}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn equicheck_passes_circular_and_flags_zero_control() {
    let dir = temp_dir("equicheck");
    let out = run(&[
        "equicheck",
        "--mode",
        "circular",
        "--profile",
        "tiny",
        "--seed",
        "3",
        "--out",
        dir.to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "stdout: {stdout}");
    assert!(dir.join("equicheck.csv").exists());

    let out = run(&["equicheck", "--mode", "zero", "--profile", "tiny", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("control failed as expected"), "stdout: {stdout}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn project_writes_readable_range_images() {
    let data = temp_dir("project-data");
    let data_s = data.to_str().expect("utf8");
    let out = run(&["synth", "--seed", "2", "--profile", "tiny", "--out", data_s]);
    assert_eq!(out.status.code(), Some(0));

    let images = temp_dir("project-images");
    let out = run(&[
        "project",
        "--scan",
        &format!("{data_s}/scans/000000.bin"),
        "--profile",
        "tiny",
        "--out",
        images.to_str().expect("utf8"),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let image =
        rangeloop_core::rangeimage::read_range_image_file(&images.join("000000.rim")).expect("rim");
    assert_eq!((image.height(), image.width()), (16, 90));
    assert!(image.valid_count() > 0);
    std::fs::remove_dir_all(&data).ok();
    std::fs::remove_dir_all(&images).ok();
}

#[test]
fn missing_files_exit_two() {
    let out = run(&["index", "--model", "/nonexistent.rlw", "--scan-dir", "/nonexistent", "--out", "/tmp/x.rld"]);
    assert_eq!(out.status.code(), Some(2));
}
