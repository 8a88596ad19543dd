//! Overlap-regression training.
//!
//! Each step samples a batch of query and reference images, runs all of
//! them through the descriptor network in one graph, and penalizes the
//! deviation between descriptor similarity and the labeled overlap over
//! every query/reference pair. Because the target is the continuous
//! overlap itself, there is no positive/negative balancing to tune.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{descriptor_var, ModelConfig, ModelError, ModelVars, ModelWeights};
use crate::overlap::OverlapLabel;
use crate::rangeimage::RangeImage;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset,
    LabelOutOfRange { label: (usize, usize), scans: usize },
    ImageSizeMismatch { index: usize },
    DimensionMismatch { left: usize, right: usize },
    ZeroNormDescriptor,
    NanGradient { param: String },
    NanLoss { epoch: usize, step: usize },
    Config(String),
    Model(ModelError),
    Io { path: String, source: io::Error },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "dataset has no labeled pairs"),
            TrainError::LabelOutOfRange { label, scans } => {
                write!(f, "label ({}, {}) references a scan beyond {scans}", label.0, label.1)
            }
            TrainError::ImageSizeMismatch { index } => {
                write!(f, "image {index} does not match the first image's dimensions")
            }
            TrainError::DimensionMismatch { left, right } => {
                write!(f, "descriptor dimensions differ: {left} vs {right}")
            }
            TrainError::ZeroNormDescriptor => {
                write!(f, "similarity is undefined for a zero-norm descriptor")
            }
            TrainError::NanGradient { param } => {
                write!(f, "gradient for {param} is not finite; aborting the step")
            }
            TrainError::NanLoss { epoch, step } => {
                write!(f, "loss became non-finite at epoch {epoch}, step {step}")
            }
            TrainError::Config(msg) => write!(f, "train config: {msg}"),
            TrainError::Model(e) => write!(f, "model: {e}"),
            TrainError::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Model(e) => Some(e),
            TrainError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

/// Per-pair penalty. Absolute deviation is the default; squared error is
/// kept for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Absolute,
    Squared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_query: usize,
    pub n_reference: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_interval: usize,
    pub loss_kind: LossKind,
    /// Probability that a reference slot draws from the gated neighbors of
    /// the sampled queries instead of uniformly.
    pub neighbor_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_query: 6,
            n_reference: 6,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 60,
            seed: 0,
            checkpoint_interval: 20,
            loss_kind: LossKind::Absolute,
            neighbor_bias: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_query < 1 || self.n_reference < 1 {
            return Err(TrainError::Config("batch sides must be at least 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must lie in [0, 1)".to_string()));
        }
        if !(0.0..=1.0).contains(&self.neighbor_bias) {
            return Err(TrainError::Config("neighbor bias must lie in [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// Training data: projected images plus an overlap lookup. Pairs absent
/// from the labels (beyond the gate radius) read back as overlap 0.
pub struct Dataset {
    images: Vec<RangeImage>,
    labels: BTreeMap<(usize, usize), f64>,
    neighbors: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(images: Vec<RangeImage>, labels: &[OverlapLabel]) -> Result<Self, TrainError> {
        if images.is_empty() || labels.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let (h, w) = (images[0].height(), images[0].width());
        for (index, image) in images.iter().enumerate() {
            if image.height() != h || image.width() != w {
                return Err(TrainError::ImageSizeMismatch { index });
            }
        }
        let mut map = BTreeMap::new();
        let mut neighbors = vec![BTreeSet::new(); images.len()];
        for label in labels {
            if label.query_id >= images.len() || label.reference_id >= images.len() {
                return Err(TrainError::LabelOutOfRange {
                    label: (label.query_id, label.reference_id),
                    scans: images.len(),
                });
            }
            map.insert((label.query_id, label.reference_id), label.overlap);
            if label.query_id != label.reference_id {
                neighbors[label.query_id].insert(label.reference_id);
            }
        }
        Ok(Self {
            images,
            labels: map,
            neighbors: neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, id: usize) -> &RangeImage {
        &self.images[id]
    }

    pub fn images(&self) -> &[RangeImage] {
        &self.images
    }

    /// Labeled overlap, with unlabeled pairs reading as 0.
    pub fn target(&self, query: usize, reference: usize) -> f64 {
        self.labels.get(&(query, reference)).copied().unwrap_or(0.0)
    }

    pub fn labeled_pairs(&self) -> usize {
        self.labels.len()
    }

    /// Scans labeled against `query`, excluding itself.
    pub fn gated_neighbors(&self, query: usize) -> &[usize] {
        &self.neighbors[query]
    }
}

/// One sampled batch: query ids, reference ids, and the dense target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub query_ids: Vec<usize>,
    pub reference_ids: Vec<usize>,
    /// Row-major `n_query x n_reference` overlap targets.
    pub targets: Vec<f64>,
}

fn pick(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// Queries are drawn uniformly; references mix gated neighbors of the
/// sampled queries with uniform random scans. Every query/reference pair
/// contributes a target.
pub fn sample_batch(
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = dataset.len();
    let query_ids: Vec<usize> = (0..config.n_query).map(|_| pick(rng, n)).collect();

    let mut pool: Vec<usize> = Vec::new();
    for &q in &query_ids {
        pool.extend_from_slice(dataset.gated_neighbors(q));
    }
    pool.sort_unstable();
    pool.dedup();

    let threshold = (config.neighbor_bias * 2f64.powi(53)) as u64;
    let reference_ids: Vec<usize> = (0..config.n_reference)
        .map(|_| {
            if !pool.is_empty() && (rng.next_u64() >> 11) < threshold {
                pool[pick(rng, pool.len())]
            } else {
                pick(rng, n)
            }
        })
        .collect();

    let mut targets = Vec::with_capacity(config.n_query * config.n_reference);
    for &q in &query_ids {
        for &r in &reference_ids {
            targets.push(dataset.target(q, r));
        }
    }
    Ok(Batch { query_ids, reference_ids, targets })
}

// ── Similarity and loss ──────────────────────────────────────────────────

/// Similarity of two descriptors: cosine rescaled to [0, 1].
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, TrainError> {
    if a.len() != b.len() {
        return Err(TrainError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(TrainError::ZeroNormDescriptor);
    }
    Ok((dot / (na.sqrt() * nb.sqrt()) + 1.0) / 2.0)
}

/// Graph version of the similarity, differentiable in both descriptors.
pub fn similarity_var<E: Real>(
    g: &mut Graph<E>,
    a: Var,
    b: Var,
) -> Result<Var, TrainError> {
    let (la, lb) = (g.value(a).len(), g.value(b).len());
    if la != lb {
        return Err(TrainError::DimensionMismatch { left: la, right: lb });
    }
    let prod = g.mul(a, b).map_err(ModelError::from)?;
    let dot = g.sum(prod);
    let aa = g.mul(a, a).map_err(ModelError::from)?;
    let bb = g.mul(b, b).map_err(ModelError::from)?;
    let na2 = g.sum(aa);
    let nb2 = g.sum(bb);
    if g.value(na2).data()[0] == E::ZERO || g.value(nb2).data()[0] == E::ZERO {
        return Err(TrainError::ZeroNormDescriptor);
    }
    let na = g.sqrt(na2);
    let nb = g.sqrt(nb2);
    let denom = g.mul(na, nb).map_err(ModelError::from)?;
    let cos = g.div(dot, denom).map_err(ModelError::from)?;
    let shifted = g.add_scalar(cos, E::ONE);
    Ok(g.mul_scalar(shifted, E::from_f64(0.5)))
}

/// Builds the batch loss: the sum over all query/reference pairs of the
/// deviation between similarity and overlap target.
pub fn batch_loss_var<E: Real>(
    g: &mut Graph<E>,
    query_descriptors: &[Var],
    reference_descriptors: &[Var],
    targets: &[f64],
    kind: LossKind,
) -> Result<Var, TrainError> {
    assert_eq!(targets.len(), query_descriptors.len() * reference_descriptors.len());
    let mut total: Option<Var> = None;
    for (i, &dq) in query_descriptors.iter().enumerate() {
        for (j, &dr) in reference_descriptors.iter().enumerate() {
            let sim = similarity_var(g, dq, dr)?;
            let target = g.constant(Tensor::scalar(E::from_f64(targets[i * reference_descriptors.len() + j])));
            let diff = g.sub(sim, target).map_err(ModelError::from)?;
            let term = match kind {
                LossKind::Absolute => g.abs(diff),
                LossKind::Squared => g.mul(diff, diff).map_err(ModelError::from)?,
            };
            total = Some(match total {
                Some(acc) => g.add(acc, term).map_err(ModelError::from)?,
                None => term,
            });
        }
    }
    Ok(total.expect("batch has at least one pair"))
}

// ── Adam ─────────────────────────────────────────────────────────────────

/// First/second moment buffers, one pair per parameter in registration
/// order.
#[derive(Clone, Debug)]
pub struct AdamState<E> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    step: u64,
}

impl<E: Real> AdamState<E> {
    pub fn new(param_lens: &[usize]) -> Self {
        Self {
            m: param_lens.iter().map(|&n| vec![E::ZERO; n]).collect(),
            v: param_lens.iter().map(|&n| vec![E::ZERO; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Gradients must be finite; a NaN
/// anywhere aborts with the offending parameter named.
pub fn adam_step<E: Real>(
    params: &mut [(String, &mut Tensor<E>)],
    grads: &[Vec<E>],
    state: &mut AdamState<E>,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for ((name, param), grad) in params.iter().zip(grads) {
        if param.len() != grad.len() {
            return Err(TrainError::Config(format!(
                "gradient for {name} has {} values, parameter has {}",
                grad.len(),
                param.len()
            )));
        }
        if grad.iter().any(|g| g.is_nan() || !g.is_finite()) {
            return Err(TrainError::NanGradient { param: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = E::from_f64(config.beta1);
    let b2 = E::from_f64(config.beta2);
    let one_minus_b1 = E::from_f64(1.0 - config.beta1);
    let one_minus_b2 = E::from_f64(1.0 - config.beta2);
    let bc1 = E::from_f64(1.0 - config.beta1.powi(t));
    let bc2 = E::from_f64(1.0 - config.beta2.powi(t));
    let lr = E::from_f64(config.learning_rate);
    let eps = E::from_f64(config.epsilon);

    for (((_, param), grad), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (i, value) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_minus_b1 * g;
            v[i] = b2 * v[i] + one_minus_b2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── Training loop ────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct FitReport<E> {
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub weights: ModelWeights<E>,
}

fn io_err(path: &Path, source: io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

/// Runs one gradient step and returns the batch loss. Exposed so tests can
/// drive single steps.
pub fn train_step<E: Real>(
    dataset: &Dataset,
    batch: &Batch,
    model_config: &ModelConfig,
    weights: &mut ModelWeights<E>,
    state: &mut AdamState<E>,
    train_config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut g: Graph<E> = Graph::new();
    let vars = ModelVars::register(&mut g, weights, true);
    let mut query_descriptors = Vec::with_capacity(batch.query_ids.len());
    for &id in &batch.query_ids {
        let input = g.constant(crate::model::image_to_tensor::<E>(dataset.image(id), model_config.input_scale));
        query_descriptors.push(descriptor_var(&mut g, input, model_config, &vars)?);
    }
    let mut reference_descriptors = Vec::with_capacity(batch.reference_ids.len());
    for &id in &batch.reference_ids {
        let input = g.constant(crate::model::image_to_tensor::<E>(dataset.image(id), model_config.input_scale));
        reference_descriptors.push(descriptor_var(&mut g, input, model_config, &vars)?);
    }
    let loss = batch_loss_var(
        &mut g,
        &query_descriptors,
        &reference_descriptors,
        &batch.targets,
        train_config.loss_kind,
    )?;
    let loss_value = g.value(loss).data()[0].to_f64();
    g.backward(loss).map_err(ModelError::from)?;

    let ordered = vars.ordered();
    let grads: Vec<Vec<E>> = ordered
        .iter()
        .map(|&var| {
            g.grad(var)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![E::ZERO; g.value(var).len()])
        })
        .collect();
    let mut params = weights.named_mut();
    adam_step(&mut params, &grads, state, train_config)?;
    Ok(loss_value)
}

/// Full training run: per-epoch mean losses are appended to
/// `metrics.txt`, checkpoints land at the configured interval plus an
/// initial and final one, and everything is a pure function of the seeds.
pub fn fit<E: Real>(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
) -> Result<FitReport<E>, TrainError> {
    train_config.validate()?;
    model_config.validate().map_err(TrainError::Model)?;
    if dataset.labeled_pairs() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut weights = ModelWeights::<E>::init(model_config)?;
    let param_lens: Vec<usize> = weights.named().iter().map(|(_, t)| t.len()).collect();
    let mut state = AdamState::new(&param_lens);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);

    let mut checkpoints = Vec::new();
    let initial = out_dir.join("checkpoint-0000.rlw");
    weights.save(&initial).map_err(|e| io_err(&initial, e))?;
    checkpoints.push(initial);

    let metrics_path = out_dir.join("metrics.txt");
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);

    let steps_per_epoch = dataset.len().div_ceil(train_config.n_query).max(1);
    let mut epoch_losses = Vec::with_capacity(train_config.epochs);
    for epoch in 0..train_config.epochs {
        let mut sum = 0.0;
        for step in 0..steps_per_epoch {
            let batch = sample_batch(dataset, train_config, &mut rng)?;
            let loss = train_step(dataset, &batch, model_config, &mut weights, &mut state, train_config)?;
            if !loss.is_finite() {
                return Err(TrainError::NanLoss { epoch, step });
            }
            sum += loss;
        }
        let mean = sum / steps_per_epoch as f64;
        epoch_losses.push(mean);
        writeln!(metrics, "{epoch} {mean}").map_err(|e| io_err(&metrics_path, e))?;

        let due = train_config.checkpoint_interval > 0
            && (epoch + 1) % train_config.checkpoint_interval == 0;
        if due && epoch + 1 != train_config.epochs {
            let path = out_dir.join(format!("checkpoint-{:04}.rlw", epoch + 1));
            weights.save(&path).map_err(|e| io_err(&path, e))?;
            checkpoints.push(path);
        }
    }
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;

    let final_path = out_dir.join("model.rlw");
    weights.save(&final_path).map_err(|e| io_err(&final_path, e))?;
    checkpoints.push(final_path);

    Ok(FitReport { epoch_losses, checkpoints, weights })
}

// ── Train config file ────────────────────────────────────────────────────

pub fn write_train_config<W: Write>(mut out: W, config: &TrainConfig) -> io::Result<()> {
    writeln!(out, "n_query = {}", config.n_query)?;
    writeln!(out, "n_reference = {}", config.n_reference)?;
    writeln!(out, "learning_rate = {}", config.learning_rate)?;
    writeln!(out, "beta1 = {}", config.beta1)?;
    writeln!(out, "beta2 = {}", config.beta2)?;
    writeln!(out, "epsilon = {}", config.epsilon)?;
    writeln!(out, "epochs = {}", config.epochs)?;
    writeln!(out, "seed = {}", config.seed)?;
    writeln!(out, "checkpoint_interval = {}", config.checkpoint_interval)?;
    let kind = match config.loss_kind {
        LossKind::Absolute => "absolute",
        LossKind::Squared => "squared",
    };
    writeln!(out, "loss = {kind}")?;
    writeln!(out, "neighbor_bias = {}", config.neighbor_bias)?;
    Ok(())
}

pub fn read_train_config<R: BufRead>(input: R) -> Result<TrainConfig, TrainError> {
    let mut config = TrainConfig::default();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TrainError::Config(format!("line {lineno}: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {lineno}: expected key = value")))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| TrainError::Config(format!("line {lineno}: bad {what}: {value}"));
        match key {
            "n_query" => config.n_query = value.parse().map_err(|_| bad("n_query"))?,
            "n_reference" => config.n_reference = value.parse().map_err(|_| bad("n_reference"))?,
            "learning_rate" => config.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
            "beta1" => config.beta1 = value.parse().map_err(|_| bad("beta1"))?,
            "beta2" => config.beta2 = value.parse().map_err(|_| bad("beta2"))?,
            "epsilon" => config.epsilon = value.parse().map_err(|_| bad("epsilon"))?,
            "epochs" => config.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            "checkpoint_interval" => {
                config.checkpoint_interval = value.parse().map_err(|_| bad("checkpoint_interval"))?
            }
            "loss" => {
                config.loss_kind = match value {
                    "absolute" => LossKind::Absolute,
                    "squared" => LossKind::Squared,
                    _ => return Err(bad("loss")),
                }
            }
            "neighbor_bias" => config.neighbor_bias = value.parse().map_err(|_| bad("neighbor_bias"))?,
            other => return Err(TrainError::Config(format!("line {lineno}: unknown key {other}"))),
        }
    }
    config.validate()?;
    Ok(config)
}
