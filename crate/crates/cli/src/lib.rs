//! Command-line pipeline: projection, labeling, synthesis, training,
//! indexing, querying, evaluation, and the equivariance check.
//!
//! Every subcommand takes its randomness from `--seed`, writes a manifest
//! (config echo, seed, version) beside its outputs, and behaves exactly
//! like the corresponding library calls. Exit codes: 0 success, 1
//! validation error, 2 runtime failure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rangeloop_core::dataio::{
    generate_world, read_poses, read_scan_bin, read_world_spec_file, synth_scan, write_poses,
    write_scan_bin, write_world_spec_file,
};
use rangeloop_core::model::{
    ccm_forward, descriptor, image_to_tensor, read_model_config_file, rtm_forward,
    write_model_config_file, ModelConfig, ModelVars, ModelWeights, PadKind,
};
use rangeloop_core::overlap::{label_sequence, read_labels_file, write_labels_file};
use rangeloop_core::profile::{profile, Profile, ProfileKind};
use rangeloop_core::rangeimage::{
    project_cloud, read_range_image_file, write_range_image_file, RangeImage,
};
use rangeloop_core::retrieval::{
    evaluate, query as index_query, DescriptorIndex, EvalProtocol, GroundTruth, PositiveRule,
};
use rangeloop_core::tensor::Graph;
use rangeloop_core::train::{fit, read_train_config, write_train_config, Dataset, FitReport};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VERSION: &str = env!("CARGO_PKG_VERSION");

const USAGE: &str = "\
rangeloop <command> [flags]

Commands:
  project    Project KITTI binary scans into range-image files
  label      Compute overlap labels for a scan sequence
  synth      Generate a synthetic world dataset (scans, poses, world spec)
  train      Train the descriptor network on a labeled dataset
  index      Build a descriptor database from scans and a checkpoint
  query      Rank database entries against one scan
  eval       Compute Recall@1 / Recall@1% / AR@k for query descriptors
  equicheck  Report column-shift equivariance error per pipeline stage

Shared flags:
  --profile tiny|desk|full   size profile (default desk)
  --seed N                   seed for all randomness (default 0)
  --out PATH                 output file or directory
  --help                     per-command flag listing

project:   --scan FILE | --scan-dir DIR, --out DIR [--profile P]
label:     --scan-dir DIR --poses FILE --out FILE [--profile P]
           [--delta M] [--gate-radius M]
synth:     --out DIR [--profile P] [--seed N] [--world SPEC]
train:     --data DIR --out DIR [--profile P] [--seed N] [--epochs N]
           [--model-config FILE] [--train-config FILE]
index:     --model CKPT --scan-dir DIR --out FILE [--profile P]
           [--model-config FILE] [--from N] [--to N]
query:     --index FILE --model CKPT --scan FILE|--image FILE
           [--profile P] [--model-config FILE] [--top-k N]
           [--query-id N --window N]
eval:      --index FILE --queries FILE --out DIR
           (--labels FILE [--threshold T] | --positions FILE [--radius M])
           [--window N] [--ks 1,5,10]
equicheck: [--mode circular|zero] [--profile P] [--seed N]
           [--model CKPT --model-config FILE] [--image FILE]
           [--shifts 1,5,45,89] [--out DIR]

Training, indexing, querying, and evaluation run in 32-bit mode;
equicheck runs in 64-bit mode.
";

enum CliError {
    /// Bad flags or arguments: usage goes to stderr, exit 1.
    Validation(String),
    /// Failure while executing: exit 2.
    Runtime(String),
}

impl CliError {
    fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    fn runtime(err: impl std::fmt::Display) -> Self {
        CliError::Runtime(err.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            eprintln!();
            eprintln!("{USAGE}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(args: &[String]) -> CliResult<()> {
    let command = args.first().ok_or_else(|| CliError::validation("missing command"))?;
    if command == "--help" || command == "-h" || command == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let flags = Flags::parse(&args[1..])?;
    if flags.has("help") {
        println!("{USAGE}");
        return Ok(());
    }
    match command.as_str() {
        "project" => cmd_project(&flags),
        "label" => cmd_label(&flags),
        "synth" => cmd_synth(&flags),
        "train" => cmd_train(&flags),
        "index" => cmd_index(&flags),
        "query" => cmd_query(&flags),
        "eval" => cmd_eval(&flags),
        "equicheck" => cmd_equicheck(&flags),
        other => Err(CliError::validation(format!("unknown command {other:?}"))),
    }
}

// ── Flag parsing ─────────────────────────────────────────────────────────

const KNOWN_FLAGS: &[&str] = &[
    "help", "profile", "seed", "out", "scan", "scan-dir", "poses", "delta", "gate-radius",
    "world", "data", "epochs", "model-config", "train-config", "model", "from", "to", "index",
    "image", "top-k", "query-id", "window", "queries", "labels", "positions", "threshold",
    "radius", "ks", "mode", "shifts",
];

struct Flags {
    values: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> CliResult<Self> {
        let mut values = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::validation(format!("expected a --flag, got {arg:?}")))?;
            if !KNOWN_FLAGS.contains(&name) {
                return Err(CliError::validation(format!("unknown flag --{name}")));
            }
            if name == "help" {
                values.push((name.to_string(), String::new()));
                i += 1;
                continue;
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::validation(format!("--{name} needs a value")))?;
            values.push((name.to_string(), value.clone()));
            i += 2;
        }
        Ok(Self { values })
    }

    fn has(&self, name: &str) -> bool {
        self.values.iter().any(|(n, _)| n == name)
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> CliResult<&str> {
        self.get(name).ok_or_else(|| CliError::validation(format!("--{name} is required")))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str, default: T) -> CliResult<T> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::validation(format!("--{name}: cannot parse {v:?}"))),
        }
    }

    fn seed(&self) -> CliResult<u64> {
        self.parse_num("seed", 0u64)
    }

    fn profile(&self) -> CliResult<Profile> {
        let kind: ProfileKind = self
            .get("profile")
            .unwrap_or("desk")
            .parse()
            .map_err(|e: String| CliError::validation(e))?;
        Ok(profile(kind, self.seed()?))
    }

    /// Resolved `key = value` lines for the manifest, sorted by key.
    fn manifest_lines(&self) -> String {
        let mut pairs: Vec<&(String, String)> = self.values.iter().collect();
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "flag.{k} = {v}");
        }
        out
    }
}

fn write_manifest(dir: &Path, command: &str, flags: &Flags) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    let mut text = String::new();
    let _ = writeln!(text, "command = {command}");
    let _ = writeln!(text, "version = {VERSION}");
    let _ = writeln!(text, "seed = {}", flags.seed().unwrap_or(0));
    text.push_str(&flags.manifest_lines());
    fs::write(dir.join("manifest.txt"), text).map_err(CliError::runtime)
}

// ── Shared helpers ───────────────────────────────────────────────────────

fn list_scans(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut scans = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(CliError::runtime)?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            scans.push(path);
        }
    }
    scans.sort();
    if scans.is_empty() {
        return Err(CliError::Runtime(format!("{}: no .bin scans found", dir.display())));
    }
    Ok(scans)
}

fn load_images(
    dir: &Path,
    params: &rangeloop_core::rangeimage::ProjectionParams,
) -> CliResult<Vec<RangeImage>> {
    let mut images = Vec::new();
    for path in list_scans(dir)? {
        let cloud = read_scan_bin(&path).map_err(CliError::runtime)?;
        let (image, _) = project_cloud(&cloud, params).map_err(CliError::runtime)?;
        images.push(image);
    }
    Ok(images)
}

fn model_config_from(flags: &Flags, prof: &Profile) -> CliResult<ModelConfig> {
    match flags.get("model-config") {
        Some(path) => read_model_config_file(Path::new(path)).map_err(CliError::runtime),
        None => Ok(prof.model.clone()),
    }
}

// ── Commands ─────────────────────────────────────────────────────────────

fn cmd_project(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let out = PathBuf::from(flags.require("out")?);
    let scans: Vec<PathBuf> = if let Some(file) = flags.get("scan") {
        vec![PathBuf::from(file)]
    } else if let Some(dir) = flags.get("scan-dir") {
        list_scans(Path::new(dir))?
    } else {
        return Err(CliError::validation("project needs --scan or --scan-dir"));
    };
    fs::create_dir_all(&out).map_err(CliError::runtime)?;
    for path in &scans {
        let cloud = read_scan_bin(path).map_err(CliError::runtime)?;
        let (image, stats) = project_cloud(&cloud, &prof.params).map_err(CliError::runtime)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Runtime(format!("{}: unusable file name", path.display())))?;
        let target = out.join(format!("{stem}.rim"));
        write_range_image_file(&target, &image).map_err(CliError::runtime)?;
        println!(
            "{} -> {} ({} of {} points kept)",
            path.display(),
            target.display(),
            stats.projected,
            stats.total
        );
    }
    write_manifest(&out, "project", flags)
}

fn cmd_label(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let scan_dir = PathBuf::from(flags.require("scan-dir")?);
    let poses_path = PathBuf::from(flags.require("poses")?);
    let out = PathBuf::from(flags.require("out")?);
    let delta = flags.parse_num("delta", prof.delta)?;
    let gate = flags.parse_num("gate-radius", prof.gate_radius)?;

    let mut clouds = Vec::new();
    for path in list_scans(&scan_dir)? {
        clouds.push(read_scan_bin(&path).map_err(CliError::runtime)?);
    }
    let poses = read_poses(&poses_path).map_err(CliError::runtime)?;
    if poses.len() != clouds.len() {
        return Err(CliError::Runtime(format!(
            "{} scans but {} poses",
            clouds.len(),
            poses.len()
        )));
    }
    let labels =
        label_sequence(&clouds, &poses, &prof.params, delta, gate).map_err(CliError::runtime)?;
    write_labels_file(&out, &labels).map_err(CliError::runtime)?;
    println!("{} labels -> {}", labels.len(), out.display());
    let manifest_dir = out.parent().unwrap_or(Path::new("."));
    write_manifest(manifest_dir, "label", flags)
}

fn cmd_synth(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let out = PathBuf::from(flags.require("out")?);
    let spec = match flags.get("world") {
        Some(path) => read_world_spec_file(Path::new(path)).map_err(CliError::runtime)?,
        None => rangeloop_core::dataio::WorldSpec { seed: flags.seed()?, ..prof.world.clone() },
    };
    let world = generate_world(&spec).map_err(CliError::runtime)?;

    let scan_dir = out.join("scans");
    fs::create_dir_all(&scan_dir).map_err(CliError::runtime)?;
    let mut poses = Vec::with_capacity(world.trajectory.len());
    for (i, tp) in world.trajectory.iter().enumerate() {
        let (cloud, _) = synth_scan(&world, &tp.pose, &prof.params, tp.visit)
            .map_err(CliError::runtime)?;
        write_scan_bin(&scan_dir.join(format!("{i:06}.bin")), &cloud).map_err(CliError::runtime)?;
        poses.push(tp.pose);
    }
    write_poses(&out.join("poses.txt"), &poses).map_err(CliError::runtime)?;
    write_world_spec_file(&out.join("world.txt"), &spec).map_err(CliError::runtime)?;
    println!(
        "world seed {}: {} scans -> {}",
        spec.seed,
        world.trajectory.len(),
        out.display()
    );
    write_manifest(&out, "synth", flags)
}

fn cmd_train(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let data = PathBuf::from(flags.require("data")?);
    let out = PathBuf::from(flags.require("out")?);
    let mut model_config = model_config_from(flags, &prof)?;
    model_config.seed = flags.seed()?;
    let mut train_config = match flags.get("train-config") {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| CliError::Runtime(format!("{path}: {e}")))?;
            read_train_config(std::io::BufReader::new(file)).map_err(CliError::runtime)?
        }
        None => prof.train.clone(),
    };
    train_config.seed = flags.seed()?;
    train_config.epochs = flags.parse_num("epochs", train_config.epochs)?;

    let images = load_images(&data.join("scans"), &prof.params)?;
    let labels = read_labels_file(&data.join("labels.txt")).map_err(CliError::runtime)?;
    let dataset = Dataset::new(images, &labels).map_err(CliError::runtime)?;

    let report: FitReport<f32> =
        fit(&dataset, &model_config, &train_config, &out).map_err(CliError::runtime)?;
    write_model_config_file(&out.join("model.cfg"), &model_config).map_err(CliError::runtime)?;
    let train_cfg_file =
        fs::File::create(out.join("train.cfg")).map_err(CliError::runtime)?;
    write_train_config(std::io::BufWriter::new(train_cfg_file), &train_config)
        .map_err(CliError::runtime)?;
    println!(
        "trained {} epochs; loss {:.6} -> {:.6}; final checkpoint {}",
        report.epoch_losses.len(),
        report.epoch_losses.first().copied().unwrap_or(f64::NAN),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.join("model.rlw").display()
    );
    write_manifest(&out, "train", flags)
}

fn cmd_index(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let model_path = PathBuf::from(flags.require("model")?);
    let scan_dir = PathBuf::from(flags.require("scan-dir")?);
    let out = PathBuf::from(flags.require("out")?);
    let model_config = model_config_from(flags, &prof)?;
    let weights = ModelWeights::<f32>::load(&model_path, &model_config).map_err(CliError::runtime)?;

    let images = load_images(&scan_dir, &prof.params)?;
    let from = flags.parse_num("from", 0usize)?;
    let to = flags.parse_num("to", images.len())?;
    if from >= to || to > images.len() {
        return Err(CliError::validation(format!(
            "--from {from} --to {to} does not select any of the {} scans",
            images.len()
        )));
    }
    let mut entries = Vec::with_capacity(to - from);
    for (i, image) in images.iter().enumerate().take(to).skip(from) {
        let d = descriptor(image, &model_config, &weights).map_err(CliError::runtime)?;
        entries.push((i, d));
    }
    let index = DescriptorIndex::build(entries).map_err(CliError::runtime)?;
    index.save(&out).map_err(CliError::runtime)?;
    println!("{} descriptors ({}-d) -> {}", index.len(), index.dim(), out.display());
    let manifest_dir = out.parent().unwrap_or(Path::new("."));
    write_manifest(manifest_dir, "index", flags)
}

fn cmd_query(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let index = DescriptorIndex::load(Path::new(flags.require("index")?))
        .map_err(CliError::runtime)?;
    let model_config = model_config_from(flags, &prof)?;
    let weights = ModelWeights::<f32>::load(Path::new(flags.require("model")?), &model_config)
        .map_err(CliError::runtime)?;

    let image = if let Some(scan) = flags.get("scan") {
        let cloud = read_scan_bin(Path::new(scan)).map_err(CliError::runtime)?;
        project_cloud(&cloud, &prof.params).map_err(CliError::runtime)?.0
    } else if let Some(image) = flags.get("image") {
        read_range_image_file(Path::new(image)).map_err(CliError::runtime)?
    } else {
        return Err(CliError::validation("query needs --scan or --image"));
    };
    let probe = descriptor(&image, &model_config, &weights).map_err(CliError::runtime)?;

    let top_k = flags.parse_num("top-k", 5usize)?;
    let window = flags.parse_num("window", 0usize)?;
    let exclusion: BTreeSet<usize> = match flags.get("query-id") {
        Some(raw) => {
            let qid: usize = raw
                .parse()
                .map_err(|_| CliError::validation(format!("--query-id: cannot parse {raw:?}")))?;
            index
                .entries()
                .iter()
                .map(|(id, _)| *id)
                .filter(|id| id.abs_diff(qid) <= window)
                .collect()
        }
        None => BTreeSet::new(),
    };
    let ranked = index_query(&probe, &index, &exclusion, top_k).map_err(CliError::runtime)?;
    println!("rank scan_id similarity");
    for (rank, (scan_id, sim)) in ranked.iter().enumerate() {
        println!("{} {} {:.6}", rank + 1, scan_id, sim);
    }
    Ok(())
}

fn cmd_eval(flags: &Flags) -> CliResult<()> {
    let index = DescriptorIndex::load(Path::new(flags.require("index")?))
        .map_err(CliError::runtime)?;
    let queries_db = DescriptorIndex::load(Path::new(flags.require("queries")?))
        .map_err(CliError::runtime)?;
    let out = PathBuf::from(flags.require("out")?);

    let (ground_truth, rule) = if let Some(labels) = flags.get("labels") {
        let labels = read_labels_file(Path::new(labels)).map_err(CliError::runtime)?;
        let threshold = flags.parse_num("threshold", rangeloop_core::overlap::LOOP_CLOSURE_THRESHOLD)?;
        (GroundTruth::Overlaps(labels), PositiveRule::OverlapAbove(threshold))
    } else if let Some(poses) = flags.get("positions") {
        let poses = read_poses(Path::new(poses)).map_err(CliError::runtime)?;
        let positions: Vec<(usize, [f64; 3])> =
            poses.iter().enumerate().map(|(i, p)| (i, *p.translation())).collect();
        let radius = flags.parse_num("radius", 4.0f64)?;
        (GroundTruth::Positions(positions), PositiveRule::DistanceWithin(radius))
    } else {
        return Err(CliError::validation("eval needs --labels or --positions"));
    };

    let window = flags.parse_num("window", 0usize)?;
    let ks = match flags.get("ks") {
        Some(raw) => parse_usize_list(raw)?,
        None => vec![1, 5, 10],
    };
    let protocol = EvalProtocol { rule, exclusion_window: window, ar_ks: ks };
    let queries: Vec<(usize, Vec<f32>)> = queries_db.entries().to_vec();
    let metrics = evaluate(&queries, &index, &ground_truth, &protocol).map_err(CliError::runtime)?;

    print!("{}", metrics.text());
    fs::create_dir_all(&out).map_err(CliError::runtime)?;
    fs::write(out.join("metrics.txt"), metrics.text()).map_err(CliError::runtime)?;
    fs::write(out.join("metrics.csv"), metrics.csv()).map_err(CliError::runtime)?;
    write_manifest(&out, "eval", flags)
}

fn parse_usize_list(raw: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| CliError::validation(format!("cannot parse list item {part:?}")))
        })
        .collect()
}

// ── Equivariance check ───────────────────────────────────────────────────

struct StageDiffs {
    shift: i64,
    ccm: f64,
    rtm: f64,
    descriptor_abs: f64,
    descriptor_rel: f64,
}

fn cmd_equicheck(flags: &Flags) -> CliResult<()> {
    let prof = flags.profile()?;
    let mode = flags.get("mode").unwrap_or("circular");
    let pad_kind = match mode {
        "circular" => PadKind::Circular,
        "zero" => PadKind::Zero,
        other => return Err(CliError::validation(format!("--mode must be circular or zero, got {other:?}"))),
    };
    let mut model_config = model_config_from(flags, &prof)?;
    model_config.ccm.pad_kind = pad_kind;
    model_config.seed = flags.seed()?;

    // Verification runs in 64-bit mode.
    let weights = match flags.get("model") {
        Some(path) => ModelWeights::<f64>::load(Path::new(path), &model_config)
            .map_err(CliError::runtime)?,
        None => ModelWeights::<f64>::init(&model_config).map_err(CliError::runtime)?,
    };

    let image = match flags.get("image") {
        Some(path) => read_range_image_file(Path::new(path)).map_err(CliError::runtime)?,
        None => random_image(&prof, flags.seed()?),
    };
    if image.height() != model_config.ccm.input_height || image.width() != model_config.ccm.input_width {
        return Err(CliError::Runtime(format!(
            "image is {}x{} but the model expects {}x{}",
            image.height(),
            image.width(),
            model_config.ccm.input_height,
            model_config.ccm.input_width
        )));
    }

    let shifts = match flags.get("shifts") {
        Some(raw) => parse_usize_list(raw)?.into_iter().map(|k| k as i64).collect(),
        None => vec![1i64, 5, 45, 89],
    };

    let mut rows = Vec::new();
    for &shift in &shifts {
        rows.push(stage_diffs(&image, shift, &model_config, &weights).map_err(CliError::runtime)?);
    }

    println!("shift ccm_max_abs rtm_max_abs descriptor_max_abs descriptor_rel_l2");
    let mut csv = String::from("shift,ccm_max_abs,rtm_max_abs,descriptor_max_abs,descriptor_rel_l2\n");
    for row in &rows {
        println!(
            "{} {:.3e} {:.3e} {:.3e} {:.3e}",
            row.shift, row.ccm, row.rtm, row.descriptor_abs, row.descriptor_rel
        );
        let _ = writeln!(
            csv,
            "{},{:.3e},{:.3e},{:.3e},{:.3e}",
            row.shift, row.ccm, row.rtm, row.descriptor_abs, row.descriptor_rel
        );
    }

    let worst_rel = rows.iter().map(|r| r.descriptor_rel).fold(0.0f64, f64::max);
    let worst_ccm = rows.iter().map(|r| r.ccm).fold(0.0f64, f64::max);
    match pad_kind {
        PadKind::Circular => {
            if worst_rel > 1e-9 {
                return Err(CliError::Runtime(format!(
                    "circular mode drifted: descriptor relative error {worst_rel:.3e} exceeds 1e-9"
                )));
            }
            println!("PASS: max descriptor relative error {worst_rel:.3e} <= 1e-9");
        }
        PadKind::Zero => {
            if worst_ccm <= 1e-3 {
                return Err(CliError::Runtime(format!(
                    "zero-padding control unexpectedly equivariant: max feature error {worst_ccm:.3e}"
                )));
            }
            println!("control failed as expected: max feature error {worst_ccm:.3e} > 1e-3");
        }
    }

    if let Some(out) = flags.get("out") {
        let out = PathBuf::from(out);
        fs::create_dir_all(&out).map_err(CliError::runtime)?;
        fs::write(out.join("equicheck.csv"), csv).map_err(CliError::runtime)?;
        write_manifest(&out, "equicheck", flags)?;
    }
    Ok(())
}

fn random_image(prof: &Profile, seed: u64) -> RangeImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = prof.params;
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
    RangeImage::from_pixels(params, pixels).expect("generated pixels are valid")
}

fn max_abs_shifted_diff(base: &[f64], shifted: &[f64], width: usize, shift: i64) -> f64 {
    // Both tensors are laid out [..., width]; compare shifted against the
    // column-shifted base.
    let rows = base.len() / width;
    let mut worst = 0.0f64;
    for r in 0..rows {
        for c in 0..width {
            let src = ((c as i64 - shift).rem_euclid(width as i64)) as usize;
            let diff = (shifted[r * width + c] - base[r * width + src]).abs();
            worst = worst.max(diff);
        }
    }
    worst
}

fn stage_diffs(
    image: &RangeImage,
    shift: i64,
    config: &ModelConfig,
    weights: &ModelWeights<f64>,
) -> Result<StageDiffs, rangeloop_core::model::ModelError> {
    let shifted_image = image.shift_columns(shift);
    let mut g: Graph<f64> = Graph::new();
    let vars = ModelVars::register(&mut g, weights, false);

    let run = |g: &mut Graph<f64>, img: &RangeImage| -> Result<_, rangeloop_core::model::ModelError> {
        let input = g.constant(image_to_tensor::<f64>(img, config.input_scale));
        let ccm = ccm_forward(g, input, &config.ccm, &vars)?;
        let rtm = rtm_forward(g, ccm, &config.rtm, &vars)?;
        let vlad = rangeloop_core::model::netvlad(g, rtm, &vars)?;
        let column = g.reshape(vlad, vec![config.vlad_dim(), 1])?;
        let mapped = g.matmul(vars.head.0, column)?;
        let biased = g.add_rows(mapped, vars.head.1)?;
        let desc = g.reshape(biased, vec![config.head.descriptor_dim])?;
        Ok((ccm, rtm, desc))
    };
    let (ccm_a, rtm_a, desc_a) = run(&mut g, image)?;
    let (ccm_b, rtm_b, desc_b) = run(&mut g, &shifted_image)?;

    let width = config.ccm.input_width;
    let ccm = max_abs_shifted_diff(
        &g.value(ccm_a).to_f64_vec(),
        &g.value(ccm_b).to_f64_vec(),
        width,
        shift,
    );
    let rtm = max_abs_shifted_diff(
        &g.value(rtm_a).to_f64_vec(),
        &g.value(rtm_b).to_f64_vec(),
        width,
        shift,
    );
    let da = g.value(desc_a).to_f64_vec();
    let db = g.value(desc_b).to_f64_vec();
    let descriptor_abs =
        da.iter().zip(&db).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    let diff_norm: f64 = da.iter().zip(&db).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let base_norm: f64 = da.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(StageDiffs {
        shift,
        ccm,
        rtm,
        descriptor_abs,
        descriptor_rel: diff_norm / base_norm.max(1e-30),
    })
}
