//! Descriptor database, exact nearest-descriptor search, and
//! place-recognition metrics.
//!
//! Search is exhaustive: at the scales this pipeline targets the flat scan
//! is sub-second and keeps every metric oracle-exact. Candidates are ranked
//! by the same similarity the loss trains against, descending, with ties
//! broken by ascending scan id.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::overlap::OverlapLabel;
use crate::train::{similarity, TrainError};

const MAGIC: &[u8; 4] = b"RLD1";

#[derive(Debug)]
pub enum RetrievalError {
    DimensionMismatch { expected: usize, actual: usize },
    DuplicateScanId { scan_id: usize },
    ZeroNormDescriptor { scan_id: usize },
    EmptyIndex,
    EmptyCandidates,
    NoPositives,
    MissingPosition { scan_id: usize },
    InvalidProtocol(String),
    File(String),
}

impl fmt::Display for RetrievalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalError::DimensionMismatch { expected, actual } => {
                write!(f, "descriptor dimension {actual} does not match index dimension {expected}")
            }
            RetrievalError::DuplicateScanId { scan_id } => {
                write!(f, "scan id {scan_id} appears twice")
            }
            RetrievalError::ZeroNormDescriptor { scan_id } => {
                write!(f, "scan {scan_id} has a zero-norm descriptor")
            }
            RetrievalError::EmptyIndex => write!(f, "index has no entries"),
            RetrievalError::EmptyCandidates => {
                write!(f, "every candidate is excluded for this query")
            }
            RetrievalError::NoPositives => {
                write!(f, "no query has a positive match; metrics are undefined")
            }
            RetrievalError::MissingPosition { scan_id } => {
                write!(f, "ground truth has no position for scan {scan_id}")
            }
            RetrievalError::InvalidProtocol(msg) => write!(f, "protocol: {msg}"),
            RetrievalError::File(msg) => write!(f, "descriptor database: {msg}"),
        }
    }
}

impl std::error::Error for RetrievalError {}

/// Flat descriptor database preserving insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    entries: Vec<(usize, Vec<f32>)>,
    dim: usize,
}

impl DescriptorIndex {
    pub fn build(entries: Vec<(usize, Vec<f32>)>) -> Result<Self, RetrievalError> {
        let dim = match entries.first() {
            Some((_, d)) => d.len(),
            None => return Err(RetrievalError::EmptyIndex),
        };
        let mut seen = BTreeSet::new();
        for (scan_id, descriptor) in &entries {
            if descriptor.len() != dim {
                return Err(RetrievalError::DimensionMismatch { expected: dim, actual: descriptor.len() });
            }
            if !seen.insert(*scan_id) {
                return Err(RetrievalError::DuplicateScanId { scan_id: *scan_id });
            }
            if descriptor.iter().all(|&v| v == 0.0) {
                return Err(RetrievalError::ZeroNormDescriptor { scan_id: *scan_id });
            }
        }
        Ok(Self { entries, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Vec<f32>)] {
        &self.entries
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        for (scan_id, descriptor) in &self.entries {
            out.write_all(&(*scan_id as u64).to_le_bytes())?;
            for &v in descriptor {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file =
            File::open(path).map_err(|e| RetrievalError::File(format!("{}: {e}", path.display())))?;
        let mut input = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(RetrievalError::File(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let count = read_u64(&mut input, "entry count")? as usize;
        let dim = read_u64(&mut input, "dimension")? as usize;
        if dim == 0 || dim > (1 << 24) {
            return Err(RetrievalError::File(format!("dimension {dim} is implausible")));
        }
        let mut entries = Vec::with_capacity(count);
        let mut b4 = [0u8; 4];
        for _ in 0..count {
            let scan_id = read_u64(&mut input, "scan id")? as usize;
            let mut descriptor = Vec::with_capacity(dim);
            for _ in 0..dim {
                read_exact(&mut input, &mut b4, "descriptor value")?;
                descriptor.push(f32::from_le_bytes(b4));
            }
            entries.push((scan_id, descriptor));
        }
        Self::build(entries)
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<(), RetrievalError> {
    input
        .read_exact(buf)
        .map_err(|e| RetrievalError::File(format!("truncated while reading {what}: {e}")))
}

fn read_u64<R: Read>(input: &mut R, what: &str) -> Result<u64, RetrievalError> {
    let mut buf = [0u8; 8];
    read_exact(input, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn similarity_f32(a: &[f64], b: &[f32]) -> Result<f64, TrainError> {
    similarity(a, &to_f64(b))
}

/// Ranks every non-excluded entry by similarity, descending; ties break
/// toward the smaller scan id. Returns at most `top_k` results.
pub fn query(
    descriptor: &[f32],
    index: &DescriptorIndex,
    exclusion: &BTreeSet<usize>,
    top_k: usize,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    if descriptor.len() != index.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dim(),
            actual: descriptor.len(),
        });
    }
    let query64 = to_f64(descriptor);
    let mut scored = Vec::with_capacity(index.len());
    for (scan_id, entry) in index.entries() {
        if exclusion.contains(scan_id) {
            continue;
        }
        let sim = similarity_f32(&query64, entry)
            .map_err(|_| RetrievalError::ZeroNormDescriptor { scan_id: *scan_id })?;
        scored.push((*scan_id, sim));
    }
    if scored.is_empty() {
        return Err(RetrievalError::EmptyCandidates);
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).expect("similarities are finite").then(a.0.cmp(&b.0))
    });
    scored.truncate(top_k);
    Ok(scored)
}

/// Rule deciding whether a candidate is a true match for a query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PositiveRule {
    /// Candidate overlaps the query strictly above the threshold.
    OverlapAbove(f64),
    /// Candidate pose lies strictly within the radius (meters).
    DistanceWithin(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub rule: PositiveRule,
    /// Candidates with |id - query id| <= window are excluded.
    pub exclusion_window: usize,
    /// k values for the AR@k metrics.
    pub ar_ks: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            rule: PositiveRule::OverlapAbove(crate::overlap::LOOP_CLOSURE_THRESHOLD),
            exclusion_window: 100,
            ar_ks: vec![1, 5, 10],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        match self.rule {
            PositiveRule::OverlapAbove(t) => {
                if !(0.0 < t && t < 1.0) {
                    return Err(RetrievalError::InvalidProtocol(format!(
                        "overlap threshold {t} must lie in (0, 1)"
                    )));
                }
            }
            PositiveRule::DistanceWithin(r) => {
                if !(r > 0.0) {
                    return Err(RetrievalError::InvalidProtocol(format!(
                        "distance radius {r} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Data the positive rule consults.
#[derive(Clone, Debug)]
pub enum GroundTruth {
    /// Overlap labels; pairs absent from the list count as overlap 0.
    Overlaps(Vec<OverlapLabel>),
    /// World positions per scan id.
    Positions(Vec<(usize, [f64; 3])>),
}

impl GroundTruth {
    fn is_positive(
        &self,
        query_id: usize,
        candidate_id: usize,
        rule: PositiveRule,
    ) -> Result<bool, RetrievalError> {
        match (self, rule) {
            (GroundTruth::Overlaps(labels), PositiveRule::OverlapAbove(threshold)) => {
                let overlap = labels
                    .iter()
                    .find(|l| l.query_id == query_id && l.reference_id == candidate_id)
                    .map(|l| l.overlap)
                    .unwrap_or(0.0);
                Ok(overlap > threshold)
            }
            (GroundTruth::Positions(positions), PositiveRule::DistanceWithin(radius)) => {
                let find = |id: usize| {
                    positions
                        .iter()
                        .find(|(i, _)| *i == id)
                        .map(|(_, p)| *p)
                        .ok_or(RetrievalError::MissingPosition { scan_id: id })
                };
                let a = find(query_id)?;
                let b = find(candidate_id)?;
                let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                Ok(d2.sqrt() < radius)
            }
            (GroundTruth::Overlaps(_), PositiveRule::DistanceWithin(_)) => Err(
                RetrievalError::InvalidProtocol("distance rule needs positions".to_string()),
            ),
            (GroundTruth::Positions(_), PositiveRule::OverlapAbove(_)) => Err(
                RetrievalError::InvalidProtocol("overlap rule needs overlap labels".to_string()),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub recall_at_1: f64,
    pub recall_at_1_percent: f64,
    /// AR@k per requested k, in the protocol's order.
    pub average_recall: Vec<(usize, f64)>,
    /// Queries with at least one positive candidate.
    pub queries_evaluated: usize,
    /// Queries skipped for lack of any positive.
    pub queries_skipped: usize,
}

impl Metrics {
    /// One `name value` line per metric.
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("recall_at_1 {:.6}\n", self.recall_at_1));
        out.push_str(&format!("recall_at_1_percent {:.6}\n", self.recall_at_1_percent));
        for (k, v) in &self.average_recall {
            out.push_str(&format!("ar_at_{k} {v:.6}\n"));
        }
        out.push_str(&format!("queries_evaluated {}\n", self.queries_evaluated));
        out.push_str(&format!("queries_skipped {}\n", self.queries_skipped));
        out
    }

    /// Machine-readable comma-separated table, one metric per row.
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("recall_at_1,{:.6}\n", self.recall_at_1));
        out.push_str(&format!("recall_at_1_percent,{:.6}\n", self.recall_at_1_percent));
        for (k, v) in &self.average_recall {
            out.push_str(&format!("ar_at_{k},{v:.6}\n"));
        }
        out.push_str(&format!("queries_evaluated,{}\n", self.queries_evaluated));
        out.push_str(&format!("queries_skipped,{}\n", self.queries_skipped));
        out
    }
}

/// Evaluates retrieval quality. Per query, candidates inside the temporal
/// exclusion window are removed, the 1% cutoff is ceil(N / 100) of the
/// remaining candidates, and queries without any positive are skipped.
/// Recall@1 is the fraction of evaluated queries whose top result is a
/// positive; AR@k extends this to the top k.
pub fn evaluate(
    queries: &[(usize, Vec<f32>)],
    index: &DescriptorIndex,
    ground_truth: &GroundTruth,
    protocol: &EvalProtocol,
) -> Result<Metrics, RetrievalError> {
    protocol.validate()?;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut hits_at_1 = 0usize;
    let mut hits_at_1_percent = 0usize;
    let mut hits_at_k = vec![0usize; protocol.ar_ks.len()];

    for (query_id, descriptor) in queries {
        let exclusion: BTreeSet<usize> = index
            .entries()
            .iter()
            .map(|(id, _)| *id)
            .filter(|id| id.abs_diff(*query_id) <= protocol.exclusion_window)
            .collect();
        let ranking = query(descriptor, index, &exclusion, index.len())?;

        let mut has_positive = false;
        for (candidate, _) in &ranking {
            if ground_truth.is_positive(*query_id, *candidate, protocol.rule)? {
                has_positive = true;
                break;
            }
        }
        if !has_positive {
            skipped += 1;
            continue;
        }
        evaluated += 1;

        let one_percent = ranking.len().div_ceil(100);
        let positive_rank = ranking
            .iter()
            .position(|(candidate, _)| {
                ground_truth
                    .is_positive(*query_id, *candidate, protocol.rule)
                    .expect("rule checked above")
            })
            .expect("a positive exists in the ranking");
        if positive_rank == 0 {
            hits_at_1 += 1;
        }
        if positive_rank < one_percent {
            hits_at_1_percent += 1;
        }
        for (slot, &k) in protocol.ar_ks.iter().enumerate() {
            if positive_rank < k {
                hits_at_k[slot] += 1;
            }
        }
    }

    if evaluated == 0 {
        return Err(RetrievalError::NoPositives);
    }
    let denom = evaluated as f64;
    Ok(Metrics {
        recall_at_1: hits_at_1 as f64 / denom,
        recall_at_1_percent: hits_at_1_percent as f64 / denom,
        average_recall: protocol
            .ar_ks
            .iter()
            .zip(&hits_at_k)
            .map(|(&k, &h)| (k, h as f64 / denom))
            .collect(),
        queries_evaluated: evaluated,
        queries_skipped: skipped,
    })
}
