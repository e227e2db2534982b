//! Context embeddings and combinators: how raw conditioning information
//! (a scalar level, a categorical label, a set of simultaneous actions)
//! becomes the vector a conditional network consumes.
//!
//! Three embedding routes:
//! * scalars pass through unembedded;
//! * categorical labels become one-hot vectors over their vocabulary;
//! * labels with associated target populations get a learned geometry: the
//!   pairwise entropic OT distance matrix between the populations is
//!   embedded into `R^10` by SMACOF stress majorization, so labels whose
//!   targets look alike sit near each other.
//!
//! Two combinators merge several embeddings into one context vector:
//! * multi-hot addition (order-invariant by commutativity);
//! * a deep-set network: per-element encoder, sum pooling, decoder, which
//!   is permutation-invariant by construction and trainable.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamLayout, ParamVector, Tape, Var};
use crate::networks::{ConstSource, ParamSource};
use crate::ot_metrics::{sinkhorn, MetricError};
use crate::tensor_core::DenseMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ContextError {
    #[error("label {label:?} is not in the vocabulary")]
    UnknownLabel { label: String },
    #[error("embedding lengths differ: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("the combinator needs at least one part")]
    EmptySet,
    #[error("need at least two labeled populations, got {got}")]
    TooFewLabels { got: usize },
    #[error("population {label:?} needs at least two samples, got {got}")]
    TooFewSamples { label: String, got: usize },
    #[error("duplicate label {label:?}")]
    DuplicateLabel { label: String },
    #[error("distance matrix must be square and nonnegative, got {rows}x{cols}")]
    BadDistanceMatrix { rows: usize, cols: usize },
    #[error("combinator parameters expect embeddings of length {expected}, got {got}")]
    EmbedDimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type ContextResult<T> = Result<T, ContextError>;

/// Raw conditioning information attached to a source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Context {
    /// A continuous level (dosage, interpolation time); used unembedded.
    Scalar(f64),
    /// A label from a fixed vocabulary.
    Categorical { label: String, vocab: Vec<String> },
    /// A nonempty set of simultaneous action labels.
    ActionSet { labels: BTreeSet<String> },
}

impl Context {
    pub fn scalar(t: f64) -> Self {
        Context::Scalar(t)
    }

    pub fn categorical(label: &str, vocab: &[String]) -> ContextResult<Self> {
        if !vocab.iter().any(|v| v == label) {
            return Err(ContextError::UnknownLabel {
                label: label.to_string(),
            });
        }
        Ok(Context::Categorical {
            label: label.to_string(),
            vocab: vocab.to_vec(),
        })
    }

    pub fn action_set<I: IntoIterator<Item = String>>(labels: I) -> ContextResult<Self> {
        let labels: BTreeSet<String> = labels.into_iter().collect();
        if labels.is_empty() {
            return Err(ContextError::EmptySet);
        }
        Ok(Context::ActionSet { labels })
    }
}

/// One-hot vector for `label` over `vocab`: 1 at the label's index, 0
/// elsewhere. Distinct labels embed orthogonally.
pub fn embed_onehot(label: &str, vocab: &[String]) -> ContextResult<Vec<f64>> {
    let idx = vocab
        .iter()
        .position(|v| v == label)
        .ok_or_else(|| ContextError::UnknownLabel {
            label: label.to_string(),
        })?;
    let mut out = vec![0.0; vocab.len()];
    out[idx] = 1.0;
    Ok(out)
}

/// Elementwise sum of one-hot (or any equal-length) vectors; addition makes
/// the result independent of input order.
pub fn combine_multihot(parts: &[Vec<f64>]) -> ContextResult<Vec<f64>> {
    let first = parts.first().ok_or(ContextError::EmptySet)?;
    let mut out = vec![0.0; first.len()];
    for p in parts {
        if p.len() != first.len() {
            return Err(ContextError::LengthMismatch {
                expected: first.len(),
                got: p.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Mode-of-action embedding: SMACOF over pairwise entropic OT distances.
// ---------------------------------------------------------------------------

/// Regularization used for the pairwise distances of the embedding.
pub const MOA_EPSILON: f64 = 0.1;
/// Default embedding dimension.
pub const MOA_DIM: usize = 10;

const SMACOF_MAX_ITER: usize = 300;
const SMACOF_REL_TOL: f64 = 1e-6;
const SMACOF_RESTARTS: u64 = 4;

/// Learned label geometry: each label maps to a point whose Euclidean
/// distances approximate the entropic OT distances between the labels'
/// target populations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoaEmbedding {
    /// Sorted labels, row-aligned with `vectors`.
    pub labels: Vec<String>,
    /// One embedding vector per label.
    pub vectors: Vec<Vec<f64>>,
    /// Final stress of the winning SMACOF restart.
    pub stress: f64,
    /// Regularization the distances were computed at.
    pub epsilon: f64,
    /// Pairwise distance matrix the embedding was fitted to; present on
    /// freshly built embeddings, absent after a JSON round trip (the
    /// persisted form carries labels, vectors, stress, and epsilon only).
    #[serde(skip)]
    pub distance_matrix: Option<DenseMatrix>,
}

impl MoaEmbedding {
    pub fn lookup(&self, label: &str) -> Option<&[f64]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.vectors[i].as_slice())
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("embedding serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// SMACOF output: the point configuration, its stress, and the stress after
/// every iteration of the winning restart (non-increasing by construction).
#[derive(Debug, Clone)]
pub struct SmacofResult {
    pub points: DenseMatrix,
    pub stress: f64,
    pub history: Vec<f64>,
}

fn stress_of(points: &DenseMatrix, delta: &DenseMatrix) -> f64 {
    let n = delta.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for k in 0..points.cols() {
                let diff = points.get(i, k) - points.get(j, k);
                d2 += diff * diff;
            }
            let diff = delta.get(i, j) - d2.sqrt();
            s += diff * diff;
        }
    }
    s
}

/// Multidimensional scaling by stress majorization. Each iteration applies
/// the Guttman transform, which never increases the raw stress
/// `sum_{i<j} (delta_ij - d_ij(X))^2`; the best of four random restarts is
/// returned. Deterministic per seed.
pub fn smacof(delta: &DenseMatrix, dim: usize, seed: u64) -> ContextResult<SmacofResult> {
    let n = delta.rows();
    if n != delta.cols() || n < 2 || delta.as_slice().iter().any(|&v| !(v >= 0.0)) {
        return Err(ContextError::BadDistanceMatrix {
            rows: delta.rows(),
            cols: delta.cols(),
        });
    }
    let mut best: Option<SmacofResult> = None;
    for r in 0..SMACOF_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
        let mut x = DenseMatrix::zeros(n, dim);
        for i in 0..n {
            for k in 0..dim {
                x.set(i, k, rng.sample::<f64, _>(StandardNormal));
            }
        }
        let mut history = vec![stress_of(&x, delta)];
        for _ in 0..SMACOF_MAX_ITER {
            x = guttman_transform(&x, delta);
            let s = stress_of(&x, delta);
            let prev = *history.last().expect("nonempty");
            history.push(s);
            if prev - s < SMACOF_REL_TOL * prev.max(1e-30) {
                break;
            }
        }
        let stress = *history.last().expect("nonempty");
        if best.as_ref().map_or(true, |b| stress < b.stress) {
            best = Some(SmacofResult {
                points: x,
                stress,
                history,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn guttman_transform(x: &DenseMatrix, delta: &DenseMatrix) -> DenseMatrix {
    let n = delta.rows();
    let dim = x.cols();
    // B(X): off-diagonal -delta_ij / d_ij (zero when points coincide),
    // diagonal the negated row sum; the update is X <- B(X) X / n.
    let mut b = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for k in 0..dim {
                let diff = x.get(i, k) - x.get(j, k);
                d2 += diff * diff;
            }
            let d = d2.sqrt();
            if d > 1e-12 {
                b.set(i, j, -delta.get(i, j) / d);
            }
        }
    }
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if j != i {
                row_sum += b.get(i, j);
            }
        }
        b.set(i, i, -row_sum);
    }
    b.matmul(&x.clone()).scale(1.0 / n as f64)
}

/// Build the label geometry from target populations. Pairwise distances are
/// entropic OT costs at [`MOA_EPSILON`], computed in both argument orders
/// and averaged, with negatives clamped to zero (small entropic costs can
/// dip below zero through the entropy term); the diagonal is zero by
/// definition. Labels are processed in sorted order, so the result is
/// independent of input order and deterministic per seed.
pub fn build_moa_embedding(
    targets: &[(String, DenseMatrix)],
    dim: usize,
    seed: u64,
) -> ContextResult<MoaEmbedding> {
    if targets.len() < 2 {
        return Err(ContextError::TooFewLabels {
            got: targets.len(),
        });
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].0.cmp(&targets[b].0));
    for w in order.windows(2) {
        if targets[w[0]].0 == targets[w[1]].0 {
            return Err(ContextError::DuplicateLabel {
                label: targets[w[0]].0.clone(),
            });
        }
    }
    for (label, samples) in targets {
        if samples.rows() < 2 {
            return Err(ContextError::TooFewSamples {
                label: label.clone(),
                got: samples.rows(),
            });
        }
    }
    let k = targets.len();
    let mut delta = DenseMatrix::zeros(k, k);
    for a in 0..k {
        for bi in (a + 1)..k {
            let (_, ref pa) = targets[order[a]];
            let (_, ref pb) = targets[order[bi]];
            let forward = sinkhorn(pa, pb, MOA_EPSILON)?.cost;
            let backward = sinkhorn(pb, pa, MOA_EPSILON)?.cost;
            let d = (0.5 * (forward + backward)).max(0.0);
            delta.set(a, bi, d);
            delta.set(bi, a, d);
        }
    }
    let fit = smacof(&delta, dim, seed)?;
    let labels: Vec<String> = order.iter().map(|&i| targets[i].0.clone()).collect();
    let vectors: Vec<Vec<f64>> = (0..k).map(|i| fit.points.row(i).to_vec()).collect();
    Ok(MoaEmbedding {
        labels,
        vectors,
        stress: fit.stress,
        epsilon: MOA_EPSILON,
        distance_matrix: Some(delta),
    })
}

// ---------------------------------------------------------------------------
// Deep-set combinator.
// ---------------------------------------------------------------------------

const DEEPSET_HIDDEN: usize = 8;

/// Parameter layout of the deep-set combinator for embeddings of length
/// `embed_dim`: two encoder layers to 8 hidden units, sum pooling, two
/// decoder layers back to `embed_dim`.
pub fn deepset_layout(embed_dim: usize) -> Arc<ParamLayout> {
    let h = DEEPSET_HIDDEN;
    Arc::new(ParamLayout::build(&[
        ("enc0.W", h, embed_dim),
        ("enc0.b", 1, h),
        ("enc1.W", h, h),
        ("enc1.b", 1, h),
        ("dec0.W", h, h),
        ("dec0.b", 1, h),
        ("dec1.W", embed_dim, h),
        ("dec1.b", 1, embed_dim),
    ]))
}

/// Seed a deep-set parameter vector with uniform fan-in scaled weights.
pub fn init_deepset(embed_dim: usize, seed: u64) -> ParamVector {
    let layout = deepset_layout(embed_dim);
    let mut params = ParamVector::zeros(Arc::clone(&layout));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in layout.entries() {
        if !e.name.ends_with(".W") {
            continue;
        }
        let bound = 1.0 / (e.cols as f64).sqrt();
        for v in params.tensor_mut(&e.name) {
            *v = rng.gen_range(-bound..bound);
        }
    }
    params
}

fn part_order(parts: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&parts[a], &parts[b]);
        for (x, y) in pa.iter().zip(pb.iter()) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        pa.len().cmp(&pb.len())
    });
    order
}

/// Stack parts into a matrix in their canonical (sorted) order, making the
/// later sum pool a fixed-order summation: permuting the input parts yields
/// bit-identical output.
pub fn canonical_part_matrix(parts: &[Vec<f64>]) -> ContextResult<DenseMatrix> {
    let first = parts.first().ok_or(ContextError::EmptySet)?;
    for p in parts {
        if p.len() != first.len() {
            return Err(ContextError::LengthMismatch {
                expected: first.len(),
                got: p.len(),
            });
        }
    }
    let order = part_order(parts);
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| parts[i].clone()).collect();
    Ok(DenseMatrix::from_rows(&rows).expect("equal lengths checked"))
}

/// Deep-set forward on a tape: `parts` is the k x e canonical part matrix
/// (see [`canonical_part_matrix`]). Encoder applies per row, sum pooling
/// collapses rows, the decoder emits a 1 x e vector squashed to (0, 1).
/// Differentiable with respect to both the parameters and the parts.
pub fn deepset_on_tape<'t, S: ParamSource<'t>>(
    src: &S,
    _tape: &'t Tape,
    parts: Var<'t>,
) -> Var<'t> {
    let k = parts.shape().0;
    let enc0 = parts
        .matmul(src.var("enc0.W").transpose())
        .add(src.var("enc0.b").broadcast_rows(k))
        .softplus();
    let enc1 = enc0
        .matmul(src.var("enc1.W").transpose())
        .add(src.var("enc1.b").broadcast_rows(k))
        .softplus();
    let pooled = enc1.col_sums();
    let dec0 = pooled
        .matmul(src.var("dec0.W").transpose())
        .add(src.var("dec0.b"))
        .softplus();
    dec0.matmul(src.var("dec1.W").transpose())
        .add(src.var("dec1.b"))
        .sigmoid()
}

/// Combine embedding vectors through the deep-set network with parameters
/// `phi`. Exactly permutation-invariant: parts are pooled in canonical
/// sorted order regardless of how the caller ordered them.
pub fn combine_deepset(phi: &ParamVector, parts: &[Vec<f64>]) -> ContextResult<Vec<f64>> {
    let mat = canonical_part_matrix(parts)?;
    let expected = phi
        .layout()
        .entry("enc0.W")
        .map_or(0, |e| e.cols);
    if mat.cols() != expected {
        return Err(ContextError::EmbedDimMismatch {
            expected,
            got: mat.cols(),
        });
    }
    let tape = Tape::new();
    let src = ConstSource::new(&tape, phi);
    let parts_var = tape.constant(mat);
    Ok(deepset_on_tape(&src, &tape, parts_var).value().into_vec())
}
