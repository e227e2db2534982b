//! Synthetic conditional-transport benchmarks with known answers, plus the
//! file formats that carry them.
//!
//! Each generator fabricates a family of (source, target) sample pairs
//! indexed by a context, and stores the exact map that produced every
//! target. That oracle is what real data lacks: with it, a trained
//! conditional map can be scored by direct map error instead of only by
//! distribution distances.
//!
//! Three regimes:
//! * scalar contexts: displacement interpolation `(1-t)Id + t grad(psi)` of
//!   a fixed random convex potential, one pair per time value;
//! * categorical contexts: one random affine transport map per class;
//! * action-set contexts: one map per single action, and combinations that
//!   compose by adding displacement fields,
//!   `T_combo = Id + (T_k - Id) + (T_l - Id)`.
//!
//! Everything is pure given (config, seed): regenerating a dataset writes
//! byte-identical CSVs and manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::gaussian_ot::{gaussian_monge_map, AffineMongeMap};
use crate::tensor_core::{
    read_matrix_csv, sample_gaussian_with, sym_eigen_desc, write_matrix_csv, DenseMatrix,
    GaussianMoments, TensorError,
};

pub const MANIFEST_VERSION: u32 = 1;

/// Train-combination counts per difficulty level, scaled proportionally to
/// the pool of available combinations (level 1 trains on nearly all of
/// them, level 5 on almost none).
pub const DEFAULT_SPLIT_LADDER: [usize; 5] = [55, 42, 29, 16, 4];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("interpolation times must lie in [0, 1], got {0}")]
    BadTime(f64),
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("requested {requested} combinations but only {available} distinct pairs exist")]
    TooManyCombos { requested: usize, available: usize },
    #[error("split levels apply to action tasks that contain combination pairs")]
    NotActionTask,
    #[error("split level must be between 1 and 5, got {0}")]
    BadLevel(u8),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type DatasetResult<T> = Result<T, DatasetError>;

/// Field-level manifest diagnostics: every variant names the pair or file
/// at fault.
#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot access {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{path} is not a valid manifest: {detail}")]
    Parse { path: String, detail: String },
    #[error("manifest version {got} is unsupported (this build reads version {expected})")]
    Version { expected: u32, got: u32 },
    #[error("manifest declares feature_dim 0")]
    ZeroDim,
    #[error("pair {id:?}: cannot read {path}: {detail}")]
    PairFile {
        id: String,
        path: String,
        detail: String,
    },
    #[error("pair {id:?}: {path} has {got} columns, manifest declares feature_dim {expected}")]
    PairColumns {
        id: String,
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("pair {id:?}: context kind {got:?} differs from the manifest kind {expected:?}")]
    MixedContexts {
        id: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("pair {id:?}: oracle is {got}-dimensional, manifest declares feature_dim {expected}")]
    OracleDim {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate pair id {id:?}")]
    DuplicateId { id: String },
}

/// Ground-truth transport map `T(x) = W x + v`, stored with full weight
/// matrix so interpolations and compositions of affine maps stay exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapOracle {
    /// Row-major weight matrix rows.
    pub weight: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
}

impl MapOracle {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn identity(d: usize) -> Self {
        let weight = (0..d)
            .map(|i| {
                let mut row = vec![0.0; d];
                row[i] = 1.0;
                row
            })
            .collect();
        MapOracle {
            weight,
            shift: vec![0.0; d],
        }
    }

    /// Freeze a closed-form transport map: weight is its curvature `A'A`.
    pub fn from_monge(map: &AffineMongeMap) -> Self {
        let ata = map.curvature();
        let weight = (0..ata.rows()).map(|r| ata.row(r).to_vec()).collect();
        MapOracle {
            weight,
            shift: map.b.clone(),
        }
    }

    /// Displacement interpolation `(1-t) Id + t T` of an affine map, itself
    /// affine: weight `(1-t)I + t A'A`, shift `t b`.
    pub fn interpolation(map: &AffineMongeMap, t: f64) -> Self {
        let base = Self::from_monge(map);
        let d = base.dim();
        let mut weight = base.weight;
        for (i, row) in weight.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                *w *= t;
                if i == j {
                    *w += 1.0 - t;
                }
            }
        }
        MapOracle {
            weight,
            shift: base.shift.iter().map(|b| t * b).collect(),
        }
    }

    /// Compose maps by adding their displacement fields:
    /// `T(x) = x + sum_k (T_k(x) - x)`, i.e. weight `I + sum(W_k - I)` and
    /// shift `sum(v_k)`. A part equal to the identity drops out exactly.
    pub fn additive_composition(parts: &[&MapOracle]) -> Self {
        let d = parts.first().expect("at least one part").dim();
        let mut out = Self::identity(d);
        for p in parts {
            assert_eq!(p.dim(), d, "composition parts must share dimension");
            for i in 0..d {
                for j in 0..d {
                    out.weight[i][j] += p.weight[i][j] - if i == j { 1.0 } else { 0.0 };
                }
                out.shift[i] += p.shift[i];
            }
        }
        out
    }

    pub fn weight_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_rows(&self.weight).expect("stored rows are rectangular")
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        self.weight
            .iter()
            .zip(&self.shift)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    /// Apply to every row of `x`.
    pub fn push_forward(&self, x: &DenseMatrix) -> DenseMatrix {
        self.weight_matrix().affine_apply_rows(x, &self.shift)
    }
}

/// One conditioned pair in a manifest: context plus sample file paths
/// (relative to the manifest's directory) and the map that generated the
/// target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub context: Context,
    pub source_csv: String,
    pub target_csv: String,
    pub oracle: Option<MapOracle>,
}

/// Difficulty split: which pair ids train, which test. Singleton-action
/// pairs are always in train; higher levels move more combinations to test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub level: u8,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// On-disk dataset description. Version-stamped JSON; sample data lives in
/// sibling CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub feature_dim: usize,
    pub context_kind: String,
    pub pairs: Vec<PairEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_vocab: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Write `manifest.json` into `dir` and return its path.
    pub fn save(&self, dir: &Path) -> DatasetResult<PathBuf> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.to_json()).map_err(|e| ManifestError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(path)
    }
}

/// Fully loaded pair: samples in memory, context attached.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub id: String,
    pub context: Context,
    pub source: DenseMatrix,
    pub target: DenseMatrix,
    pub oracle: Option<MapOracle>,
}

/// A validated, loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    pub context_kind: String,
    pub pairs: Vec<LabeledPair>,
    pub split: Option<SplitPlan>,
    pub action_vocab: Option<Vec<String>>,
}

fn kind_name(c: &Context) -> &'static str {
    match c {
        Context::Scalar(_) => "scalar",
        Context::Categorical { .. } => "categorical",
        Context::ActionSet { .. } => "action-set",
    }
}

// ---------------------------------------------------------------------------
// Generators.
// ---------------------------------------------------------------------------

/// Random affine transport map from the standard Gaussian: picks a target
/// covariance bounded away from singularity (eigenvalues >= 0.36, so the
/// map's curvature eigenvalues stay >= 0.6) and a bounded mean, then takes
/// the closed-form map.
fn random_monge_map(d: usize, rng: &mut ChaCha8Rng) -> DatasetResult<AffineMongeMap> {
    let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut b = DenseMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            b.set(r, c, rng.sample::<f64, _>(StandardNormal));
        }
    }
    let bt_b = b.transpose().matmul(&b).scale(0.5 / d as f64);
    let mut cov = DenseMatrix::identity(d).scale(0.36).add(&bt_b);
    // Exact symmetry for the SPD constructors.
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (cov.get(r, c) + cov.get(c, r));
            cov.set(r, c, v);
            cov.set(c, r, v);
        }
    }
    let target = GaussianMoments::new(mean, cov)?;
    Ok(gaussian_monge_map(&GaussianMoments::standard(d), &target)?)
}

fn write_pair_files(
    dir: &Path,
    index: usize,
    source: &DenseMatrix,
    target: &DenseMatrix,
) -> DatasetResult<(String, String)> {
    let src_name = format!("pair{index:03}_source.csv");
    let tgt_name = format!("pair{index:03}_target.csv");
    write_matrix_csv(&dir.join(&src_name), source)?;
    write_matrix_csv(&dir.join(&tgt_name), target)?;
    Ok((src_name, tgt_name))
}

fn ensure_dir(dir: &Path) -> DatasetResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        ManifestError::Io {
            path: dir.display().to_string(),
            detail: e.to_string(),
        }
        .into()
    })
}

/// Displacement-interpolation task: a fixed random convex potential, one
/// pair per time `t` with target `((1-t)Id + t grad(psi)) # mu` and the
/// exact interpolated map stored as oracle. Source and target draws are
/// independent, so pairs are unpaired at sample level (as in practice).
pub fn simulate_scalar_task(
    out_dir: &Path,
    d: usize,
    n_per_pair: usize,
    t_values: &[f64],
    seed: u64,
) -> DatasetResult<DatasetManifest> {
    if d == 0 {
        return Err(DatasetError::TooFew {
            what: "feature dimensions",
            need: 1,
            got: 0,
        });
    }
    if n_per_pair < 2 {
        return Err(DatasetError::TooFew {
            what: "samples per pair",
            need: 2,
            got: n_per_pair,
        });
    }
    if t_values.is_empty() {
        return Err(DatasetError::TooFew {
            what: "interpolation times",
            need: 1,
            got: 0,
        });
    }
    for &t in t_values {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(DatasetError::BadTime(t));
        }
    }
    ensure_dir(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = random_monge_map(d, &mut rng)?;
    let source_moments = GaussianMoments::standard(d);
    let mut pairs = Vec::with_capacity(t_values.len());
    for (i, &t) in t_values.iter().enumerate() {
        let oracle = MapOracle::interpolation(&base, t);
        let source = sample_gaussian_with(&source_moments, n_per_pair, &mut rng)?;
        let hidden = sample_gaussian_with(&source_moments, n_per_pair, &mut rng)?;
        let target = oracle.push_forward(&hidden);
        let (source_csv, target_csv) = write_pair_files(out_dir, i, &source, &target)?;
        pairs.push(PairEntry {
            id: format!("t={t}"),
            context: Context::Scalar(t),
            source_csv,
            target_csv,
            oracle: Some(oracle),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: "scalar-interpolation".to_string(),
        feature_dim: d,
        context_kind: "scalar".to_string(),
        pairs,
        split: None,
        action_vocab: None,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn sample_mixture(d: usize, n: usize, rng: &mut ChaCha8Rng) -> DatasetResult<DenseMatrix> {
    // Balanced two-component Gaussian mixture: modes at +-1.2 along every
    // coordinate, covariance 0.4 I.
    let cov = DenseMatrix::identity(d).scale(0.4);
    let lo = GaussianMoments::new(vec![-1.2; d], cov.clone())?;
    let hi = GaussianMoments::new(vec![1.2; d], cov)?;
    let n_lo = n / 2;
    let a = sample_gaussian_with(&lo, n_lo, rng)?;
    let b = sample_gaussian_with(&hi, n - n_lo, rng)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for r in 0..a.rows() {
        rows.push(a.row(r).to_vec());
    }
    for r in 0..b.rows() {
        rows.push(b.row(r).to_vec());
    }
    Ok(DenseMatrix::from_rows(&rows)?)
}

/// Covariate task: a shared Gaussian-mixture source and one random affine
/// transport map per class; pair `j` is (mixture draw, `G_j #` mixture
/// draw) with a categorical context and `G_j` stored as oracle. An affine
/// map with positive-definite symmetric weight is the exact transport map
/// between any measure and its own pushforward, so the oracle is exact even
/// though the source is not Gaussian.
pub fn simulate_covariate_task(
    out_dir: &Path,
    d: usize,
    n_per_pair: usize,
    n_classes: usize,
    seed: u64,
) -> DatasetResult<DatasetManifest> {
    if d == 0 {
        return Err(DatasetError::TooFew {
            what: "feature dimensions",
            need: 1,
            got: 0,
        });
    }
    if n_per_pair < 2 {
        return Err(DatasetError::TooFew {
            what: "samples per pair",
            need: 2,
            got: n_per_pair,
        });
    }
    if n_classes < 2 {
        return Err(DatasetError::TooFew {
            what: "classes",
            need: 2,
            got: n_classes,
        });
    }
    ensure_dir(out_dir)?;
    let vocab: Vec<String> = (0..n_classes).map(|j| format!("class{j}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_classes);
    for (j, label) in vocab.iter().enumerate() {
        let map = random_monge_map(d, &mut rng)?;
        let oracle = MapOracle::from_monge(&map);
        let source = sample_mixture(d, n_per_pair, &mut rng)?;
        let hidden = sample_mixture(d, n_per_pair, &mut rng)?;
        let target = oracle.push_forward(&hidden);
        let (source_csv, target_csv) = write_pair_files(out_dir, j, &source, &target)?;
        pairs.push(PairEntry {
            id: label.clone(),
            context: Context::Categorical {
                label: label.clone(),
                vocab: vocab.clone(),
            },
            source_csv,
            target_csv,
            oracle: Some(oracle),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: "covariate-classes".to_string(),
        feature_dim: d,
        context_kind: "categorical".to_string(),
        pairs,
        split: None,
        action_vocab: None,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Action task: one random affine map per single action, plus `n_combos`
/// two-action combinations whose ground truth adds the two displacement
/// fields. Combination choice is a seeded shuffle of all distinct pairs.
pub fn simulate_action_task(
    out_dir: &Path,
    d: usize,
    n_per_pair: usize,
    n_actions: usize,
    n_combos: usize,
    seed: u64,
) -> DatasetResult<DatasetManifest> {
    if d == 0 {
        return Err(DatasetError::TooFew {
            what: "feature dimensions",
            need: 1,
            got: 0,
        });
    }
    if n_per_pair < 2 {
        return Err(DatasetError::TooFew {
            what: "samples per pair",
            need: 2,
            got: n_per_pair,
        });
    }
    if n_actions < 2 {
        return Err(DatasetError::TooFew {
            what: "actions",
            need: 2,
            got: n_actions,
        });
    }
    let available = n_actions * (n_actions - 1) / 2;
    if n_combos > available {
        return Err(DatasetError::TooManyCombos {
            requested: n_combos,
            available,
        });
    }
    ensure_dir(out_dir)?;
    let labels: Vec<String> = (0..n_actions).map(|k| format!("a{k}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracles: Vec<MapOracle> = (0..n_actions)
        .map(|_| Ok(MapOracle::from_monge(&random_monge_map(d, &mut rng)?)))
        .collect::<DatasetResult<_>>()?;
    let source_moments = GaussianMoments::standard(d);

    let mut all_combos: Vec<(usize, usize)> = Vec::with_capacity(available);
    for k in 0..n_actions {
        for l in (k + 1)..n_actions {
            all_combos.push((k, l));
        }
    }
    // Seeded Fisher-Yates; the chosen combos are the prefix.
    for i in (1..all_combos.len()).rev() {
        let j = rng.gen_range(0..=i);
        all_combos.swap(i, j);
    }
    all_combos.truncate(n_combos);

    let mut pairs = Vec::with_capacity(n_actions + n_combos);
    let mut index = 0;
    for (k, label) in labels.iter().enumerate() {
        let oracle = oracles[k].clone();
        let source = sample_gaussian_with(&source_moments, n_per_pair, &mut rng)?;
        let hidden = sample_gaussian_with(&source_moments, n_per_pair, &mut rng)?;
        let target = oracle.push_forward(&hidden);
        let (source_csv, target_csv) = write_pair_files(out_dir, index, &source, &target)?;
        index += 1;
        pairs.push(PairEntry {
            id: label.clone(),
            context: Context::ActionSet {
                labels: BTreeSet::from([label.clone()]),
            },
            source_csv,
            target_csv,
            oracle: Some(oracle),
        });
    }
    for &(k, l) in &all_combos {
        let oracle = MapOracle::additive_composition(&[&oracles[k], &oracles[l]]);
        let source = sample_gaussian_with(&source_moments, n_per_pair, &mut rng)?;
        let hidden = sample_gaussian_with(&source_moments, n_per_pair, &mut rng)?;
        let target = oracle.push_forward(&hidden);
        let (source_csv, target_csv) = write_pair_files(out_dir, index, &source, &target)?;
        index += 1;
        pairs.push(PairEntry {
            id: format!("{}+{}", labels[k], labels[l]),
            context: Context::ActionSet {
                labels: BTreeSet::from([labels[k].clone(), labels[l].clone()]),
            },
            source_csv,
            target_csv,
            oracle: Some(oracle),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        name: "action-combos".to_string(),
        feature_dim: d,
        context_kind: "action-set".to_string(),
        pairs,
        split: None,
        action_vocab: Some(labels),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Splits.
// ---------------------------------------------------------------------------

/// Carve an action task into a train/test split of the requested difficulty.
///
/// All singleton-action pairs train at every level. The number of training
/// combinations scales the ladder entry for `level` against the ladder's
/// level-1 entry, applied to however many combinations exist (level 1 keeps
/// all but one in train, level 5 nearly none). Levels are nested: the train
/// set at level `k+1` is a prefix of the level-`k` train set under one
/// seeded shuffle.
pub fn make_splits(
    manifest: &DatasetManifest,
    level: u8,
    ladder: &[usize; 5],
    seed: u64,
) -> DatasetResult<SplitPlan> {
    if !(1..=5).contains(&level) {
        return Err(DatasetError::BadLevel(level));
    }
    let mut singles = Vec::new();
    let mut combos = Vec::new();
    for p in &manifest.pairs {
        match &p.context {
            Context::ActionSet { labels } if labels.len() == 1 => singles.push(p.id.clone()),
            Context::ActionSet { .. } => combos.push(p.id.clone()),
            _ => return Err(DatasetError::NotActionTask),
        }
    }
    if combos.is_empty() {
        return Err(DatasetError::NotActionTask);
    }
    combos.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..combos.len()).rev() {
        let j = rng.gen_range(0..=i);
        combos.swap(i, j);
    }
    let available = combos.len();
    let full = ladder[0].max(1) as f64;
    let frac = ladder[(level - 1) as usize] as f64 / full;
    // Keep at least one combination in test so every level has something to
    // generalize to.
    let n_train = ((available as f64 * frac).round() as usize).min(available - 1);
    let mut train_ids = singles;
    train_ids.extend(combos[..n_train].iter().cloned());
    let mut test_ids: Vec<String> = combos[n_train..].to_vec();
    train_ids.sort();
    test_ids.sort();
    Ok(SplitPlan {
        level,
        train_ids,
        test_ids,
    })
}

// ---------------------------------------------------------------------------
// PCA projection.
// ---------------------------------------------------------------------------

/// Principal-component projection of a sample matrix.
#[derive(Debug, Clone)]
pub struct Pca {
    /// Samples projected onto the retained components, `n x k_used`.
    pub projected: DenseMatrix,
    /// Component columns, `d x k_used`, orthonormal.
    pub basis: DenseMatrix,
    pub mean: Vec<f64>,
    /// Eigenvalues of the sample covariance for the retained components,
    /// non-increasing.
    pub explained_variance: Vec<f64>,
    pub k_used: usize,
    /// Set when the requested component count had to be reduced.
    pub warning: Option<String>,
}

impl Pca {
    /// Project new samples (rows) onto the retained components.
    pub fn project(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.cols(), self.mean.len());
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            for c in 0..centered.cols() {
                let v = centered.get(r, c) - self.mean[c];
                centered.set(r, c, v);
            }
        }
        centered.matmul(&self.basis)
    }

    /// Reconstruct samples from projections: `z B' + mean`.
    pub fn inverse_project(&self, z: &DenseMatrix) -> DenseMatrix {
        assert_eq!(z.cols(), self.k_used);
        let mut out = z.matmul(&self.basis.transpose());
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + self.mean[c];
                out.set(r, c, v);
            }
        }
        out
    }
}

/// Mean-center `x` and project onto its top `k` principal components.
///
/// If `k` exceeds what the data supports (more than `min(rows - 1, cols)`
/// or past the numerical rank of the covariance), the component count is
/// reduced and the result carries a warning instead of failing.
pub fn pca_project(x: &DenseMatrix, k: usize) -> DatasetResult<Pca> {
    let n = x.rows();
    let d = x.cols();
    if n < 2 {
        return Err(DatasetError::TooFew {
            what: "samples",
            need: 2,
            got: n,
        });
    }
    if k == 0 {
        return Err(DatasetError::TooFew {
            what: "components",
            need: 1,
            got: 0,
        });
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x.get(r, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = x.clone();
    for r in 0..n {
        for c in 0..d {
            let v = centered.get(r, c) - mean[c];
            centered.set(r, c, v);
        }
    }
    let cov = centered
        .transpose()
        .matmul(&centered)
        .scale(1.0 / (n - 1) as f64);
    let (values, vectors) = sym_eigen_desc(&cov)?;
    let hard_cap = k.min(n - 1).min(d);
    let top = values.first().copied().unwrap_or(0.0);
    let rank_tol = 1e-9 * top.max(1e-300);
    let rank = values.iter().take_while(|&&v| v > rank_tol).count();
    let k_used = hard_cap.min(rank.max(1));
    let warning = if k_used < k {
        Some(format!(
            "reduced components from {k} to {k_used}: data supports rank {} over {n} samples in {d} features",
            rank.max(1)
        ))
    } else {
        None
    };
    let mut basis = DenseMatrix::zeros(d, k_used);
    for c in 0..k_used {
        for r in 0..d {
            basis.set(r, c, vectors.get(r, c));
        }
    }
    let projected = centered.matmul(&basis);
    Ok(Pca {
        projected,
        basis,
        mean,
        explained_variance: values[..k_used].to_vec(),
        k_used,
        warning,
    })
}

// ---------------------------------------------------------------------------
// Loading.
// ---------------------------------------------------------------------------

/// Read and validate a manifest plus every file it references.
pub fn load_dataset(manifest_path: &Path) -> DatasetResult<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| ManifestError::Io {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
            path: manifest_path.display().to_string(),
            detail: e.to_string(),
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(ManifestError::Version {
            expected: MANIFEST_VERSION,
            got: manifest.version,
        }
        .into());
    }
    if manifest.feature_dim == 0 {
        return Err(ManifestError::ZeroDim.into());
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        if !seen.insert(entry.id.clone()) {
            return Err(ManifestError::DuplicateId {
                id: entry.id.clone(),
            }
            .into());
        }
        let got_kind = kind_name(&entry.context);
        if got_kind != manifest.context_kind {
            // Borrow the manifest's declared kind as a static name where
            // possible; fall back to "scalar"/"categorical"/"action-set".
            let expected: &'static str = match manifest.context_kind.as_str() {
                "scalar" => "scalar",
                "categorical" => "categorical",
                "action-set" => "action-set",
                _ => "unknown",
            };
            return Err(ManifestError::MixedContexts {
                id: entry.id.clone(),
                expected,
                got: got_kind,
            }
            .into());
        }
        let mut load = |rel: &str| -> Result<DenseMatrix, ManifestError> {
            let path = dir.join(rel);
            let m = read_matrix_csv(&path).map_err(|e| ManifestError::PairFile {
                id: entry.id.clone(),
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            if m.cols() != manifest.feature_dim {
                return Err(ManifestError::PairColumns {
                    id: entry.id.clone(),
                    path: path.display().to_string(),
                    expected: manifest.feature_dim,
                    got: m.cols(),
                });
            }
            Ok(m)
        };
        let source = load(&entry.source_csv)?;
        let target = load(&entry.target_csv)?;
        if let Some(oracle) = &entry.oracle {
            let square = oracle.weight.len() == oracle.dim()
                && oracle.weight.iter().all(|r| r.len() == oracle.dim());
            if oracle.dim() != manifest.feature_dim || !square {
                return Err(ManifestError::OracleDim {
                    id: entry.id.clone(),
                    expected: manifest.feature_dim,
                    got: oracle.dim(),
                }
                .into());
            }
        }
        pairs.push(LabeledPair {
            id: entry.id.clone(),
            context: entry.context.clone(),
            source,
            target,
            oracle: entry.oracle.clone(),
        });
    }
    Ok(Dataset {
        name: manifest.name,
        feature_dim: manifest.feature_dim,
        context_kind: manifest.context_kind,
        pairs,
        split: manifest.split,
        action_vocab: manifest.action_vocab,
    })
}
