//! Synthetic paired embeddings with known concept shifts.
//!
//! Each pair differs in a small random subset of `num_concepts` latent
//! concepts. The shift `delta_c` is mapped to embedding space through a dense
//! mixing matrix, so `z_tilde - z = A * delta_c` holds exactly per row.
//! Concept indices are zero-based throughout.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, stage_rng, standard_normal_matrix, Matrix};

const MAX_CONDITIONING_ATTEMPTS: usize = 100;
const MAX_SUPPORT_ATTEMPTS: u64 = 100;

const STREAM_SUPPORTS: u64 = 1;
const STREAM_SHIFTS: u64 = 2;
const STREAM_MIXING: u64 = 3;
const STREAM_BASE: u64 = 4;
const STREAM_ENTANGLE: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub num_concepts: usize,
    pub max_vary: usize,
    pub embed_dim: usize,
    pub num_pairs: usize,
    pub magnitude_low: f64,
    pub magnitude_high: f64,
    pub mixing_cond_limit: f64,
    /// Copy one drawn magnitude to every coordinate of a support.
    #[serde(default)]
    pub correlated_values: bool,
    pub seed: u64,
}

impl DgpConfig {
    /// The `synth(|V|, max|S|)` regime with default dimensions.
    pub fn synth(num_concepts: usize, max_vary: usize) -> Self {
        Self {
            num_concepts,
            max_vary,
            embed_dim: 50,
            num_pairs: 10_000,
            magnitude_low: 0.5,
            magnitude_high: 1.5,
            mixing_cond_limit: 100.0,
            correlated_values: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_concepts == 0 {
            return bad("num_concepts must be positive");
        }
        if self.max_vary == 0 || self.max_vary > self.num_concepts {
            return bad("max_vary must be in 1..=num_concepts");
        }
        if self.embed_dim < self.num_concepts {
            return bad("embed_dim must be >= num_concepts");
        }
        if self.num_pairs == 0 {
            return bad("num_pairs must be positive");
        }
        if !(self.magnitude_low > 0.0 && self.magnitude_low < self.magnitude_high) {
            return bad("need 0 < magnitude_low < magnitude_high");
        }
        if !self.magnitude_high.is_finite() {
            return bad("magnitude_high must be finite");
        }
        if !(self.mixing_cond_limit > 1.0) {
            return bad("mixing_cond_limit must exceed 1");
        }
        Ok(())
    }
}

/// Sorted, distinct concept indices that vary within one pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupportSet(Vec<usize>);

impl SupportSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        if set.is_empty() {
            return Err(Error::InvalidConfig("support set must be nonempty".into()));
        }
        Ok(Self(set.into_iter().collect()))
    }

    pub fn singleton(k: usize) -> Self {
        Self(vec![k])
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedEmbeddings {
    pub z: Matrix,
    pub z_tilde: Matrix,
}

impl PairedEmbeddings {
    pub fn new(z: Matrix, z_tilde: Matrix) -> Result<Self> {
        if z.shape() != z_tilde.shape() {
            return Err(Error::DimensionMismatch(format!(
                "z is {:?} but z_tilde is {:?}",
                z.shape(),
                z_tilde.shape()
            )));
        }
        if z.iter().chain(z_tilde.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite embedding entry".into()));
        }
        Ok(Self { z, z_tilde })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Row-wise differences `z_tilde - z`.
    pub fn differences(&self) -> Matrix {
        &self.z_tilde - &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// N x |V| concept shifts.
    pub delta_c: Matrix,
    pub supports: Vec<SupportSet>,
    /// d_z x |V| mixing matrix.
    pub mixing: Matrix,
    /// d_z x d_z entangling map applied after mixing, if any.
    pub entangler: Option<Matrix>,
}

impl GroundTruth {
    pub fn num_concepts(&self) -> usize {
        self.delta_c.ncols()
    }

    /// The map that actually takes concept shifts to observed differences.
    pub fn effective_mixing(&self) -> Matrix {
        match &self.entangler {
            Some(l) => l * &self.mixing,
            None => self.mixing.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.delta_c.nrows();
        let v = self.delta_c.ncols();
        if self.supports.len() != n {
            return Err(Error::schema(
                "supports",
                format!("{} supports for {} shifts", self.supports.len(), n),
            ));
        }
        if self.mixing.ncols() != v {
            return Err(Error::schema(
                "mixing",
                format!("{} columns, expected {}", self.mixing.ncols(), v),
            ));
        }
        for (i, s) in self.supports.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::schema(format!("supports[{i}]"), "empty support"));
            }
            if let Some(&k) = s.indices().iter().find(|&&k| k >= v) {
                return Err(Error::schema(
                    format!("supports[{i}]"),
                    format!("concept {k} out of range for {v} concepts"),
                ));
            }
            for k in 0..v {
                if !s.contains(k) && self.delta_c[(i, k)] != 0.0 {
                    return Err(Error::InvariantViolation(format!(
                        "delta_c[{i}][{k}] is nonzero outside the support"
                    )));
                }
            }
        }
        if let Some(l) = &self.entangler {
            let d = self.mixing.nrows();
            if l.shape() != (d, d) {
                return Err(Error::schema("entangler", format!("expected {d}x{d}")));
            }
        }
        Ok(())
    }
}

/// Per-concept outcome of the support-variability check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub satisfied: bool,
    /// `covered[k]` is true when the supports avoiding `k` jointly cover every other concept.
    pub covered: Vec<bool>,
}

/// For every concept `k`, the union of supports not containing `k` must equal
/// all concepts except `k`.
pub fn check_support_variability(supports: &[SupportSet], num_concepts: usize) -> CoverageReport {
    let covered: Vec<bool> = (0..num_concepts)
        .map(|k| {
            let mut seen = vec![false; num_concepts];
            for s in supports.iter().filter(|s| !s.contains(k)) {
                for &j in s.indices() {
                    if j < num_concepts {
                        seen[j] = true;
                    }
                }
            }
            (0..num_concepts).all(|j| j == k || seen[j])
        })
        .collect();
    CoverageReport {
        satisfied: covered.iter().all(|&c| c),
        covered,
    }
}

/// Draws one support per pair. The first `|V|` supports are the singletons in
/// order; the rest have a uniform size in `1..=max_vary` and uniform members.
pub fn sample_supports<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<Vec<SupportSet>> {
    cfg.validate()?;
    let v = cfg.num_concepts;
    if cfg.num_pairs < v {
        return Err(Error::InsufficientPairs {
            needed: v,
            got: cfg.num_pairs,
        });
    }
    let first_seed: u64 = rng.random();
    for attempt in 0..MAX_SUPPORT_ATTEMPTS {
        let mut sub = stage_rng(first_seed, attempt);
        let mut supports: Vec<SupportSet> = (0..v).map(SupportSet::singleton).collect();
        for _ in v..cfg.num_pairs {
            let size = sub.random_range(1..=cfg.max_vary);
            let members = index::sample(&mut sub, v, size);
            supports.push(SupportSet::new(members)?);
        }
        if check_support_variability(&supports, v).satisfied {
            return Ok(supports);
        }
    }
    Err(Error::InvalidConfig(
        "support sampling failed the coverage condition repeatedly".into(),
    ))
}

/// Signed magnitudes on each support, exact zeros elsewhere.
pub fn sample_concept_shifts<R: Rng + ?Sized>(
    supports: &[SupportSet],
    cfg: &DgpConfig,
    rng: &mut R,
) -> Result<Matrix> {
    cfg.validate()?;
    let mut delta = Matrix::zeros(supports.len(), cfg.num_concepts);
    for (i, s) in supports.iter().enumerate() {
        let shared = rng.random_range(cfg.magnitude_low..cfg.magnitude_high);
        for &k in s.indices() {
            if k >= cfg.num_concepts {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    len: cfg.num_concepts,
                });
            }
            let magnitude = if cfg.correlated_values {
                shared
            } else {
                rng.random_range(cfg.magnitude_low..cfg.magnitude_high)
            };
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            delta[(i, k)] = sign * magnitude;
        }
    }
    Ok(delta)
}

/// Dense standard-normal matrix whose condition number does not exceed `limit`.
pub fn random_well_conditioned<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    limit: f64,
    rng: &mut R,
) -> Result<Matrix> {
    for _ in 0..MAX_CONDITIONING_ATTEMPTS {
        let m = standard_normal_matrix(rows, cols, rng);
        if condition_number(&m) <= limit {
            return Ok(m);
        }
    }
    Err(Error::ConditioningFailure {
        limit,
        attempts: MAX_CONDITIONING_ATTEMPTS,
    })
}

pub fn make_mixing_matrix<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<Matrix> {
    cfg.validate()?;
    random_well_conditioned(cfg.embed_dim, cfg.num_concepts, cfg.mixing_cond_limit, rng)
}

/// Generates pairs and their ground truth. Deterministic in `cfg`.
pub fn synthesize(cfg: &DgpConfig) -> Result<(PairedEmbeddings, GroundTruth)> {
    cfg.validate()?;
    let supports = sample_supports(cfg, &mut stage_rng(cfg.seed, STREAM_SUPPORTS))?;
    let delta_c = sample_concept_shifts(&supports, cfg, &mut stage_rng(cfg.seed, STREAM_SHIFTS))?;
    let mixing = make_mixing_matrix(cfg, &mut stage_rng(cfg.seed, STREAM_MIXING))?;
    let z = standard_normal_matrix(
        cfg.num_pairs,
        cfg.embed_dim,
        &mut stage_rng(cfg.seed, STREAM_BASE),
    );
    let z_tilde = &z + &delta_c * mixing.transpose();
    let pairs = PairedEmbeddings::new(z, z_tilde)?;
    let truth = GroundTruth {
        delta_c,
        supports,
        mixing,
        entangler: None,
    };
    Ok((pairs, truth))
}

/// Applies a given map `L` to both sides of every pair.
pub fn entangle_with(pairs: &PairedEmbeddings, entangler: &Matrix) -> Result<PairedEmbeddings> {
    let d = pairs.embed_dim();
    if entangler.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "entangler is {:?}, embeddings have width {d}",
            entangler.shape()
        )));
    }
    let lt = entangler.transpose();
    PairedEmbeddings::new(&pairs.z * &lt, &pairs.z_tilde * &lt)
}

/// Applies a random dense invertible map to both sides of every pair and
/// returns the map alongside the transformed pairs.
pub fn apply_entanglement<R: Rng + ?Sized>(
    pairs: &PairedEmbeddings,
    cond_limit: f64,
    rng: &mut R,
) -> Result<(PairedEmbeddings, Matrix)> {
    let d = pairs.embed_dim();
    let l = random_well_conditioned(d, d, cond_limit, rng)?;
    Ok((entangle_with(pairs, &l)?, l))
}

/// [`synthesize`] followed by [`apply_entanglement`], with the map recorded
/// in the ground truth.
pub fn synthesize_entangled(cfg: &DgpConfig) -> Result<(PairedEmbeddings, GroundTruth)> {
    let (pairs, mut truth) = synthesize(cfg)?;
    let mut rng = stage_rng(cfg.seed, STREAM_ENTANGLE);
    let (pairs, l) = apply_entanglement(&pairs, cfg.mixing_cond_limit, &mut rng)?;
    truth.entangler = Some(l);
    Ok((pairs, truth))
}

/// Pairs where exactly one concept moves, always in the positive direction.
#[derive(Debug, Clone)]
pub struct SingletonPairs {
    pub pairs: PairedEmbeddings,
    /// Concept that varies in each pair.
    pub concept: Vec<usize>,
    /// Magnitude of that concept's shift.
    pub magnitude: Vec<f64>,
}

/// Held-out single-concept pairs that share the training data's mixing (and
/// entangler, if any). Shifts are positive so each concept has one direction.
pub fn sample_singleton_pairs(
    cfg: &DgpConfig,
    truth: &GroundTruth,
    per_concept: usize,
    seed: u64,
) -> Result<SingletonPairs> {
    cfg.validate()?;
    let mut rng = stage_rng(seed, 11);
    let a = truth.effective_mixing();
    let v = truth.num_concepts();
    let n = per_concept * v;
    let d = a.nrows();
    let mut z = standard_normal_matrix(n, d, &mut rng);
    if let Some(l) = &truth.entangler {
        z = &z * l.transpose();
    }
    let mut z_tilde = z.clone();
    let mut concept = Vec::with_capacity(n);
    let mut magnitude = Vec::with_capacity(n);
    for k in 0..v {
        for r in 0..per_concept {
            let i = k * per_concept + r;
            let m = rng.random_range(cfg.magnitude_low..cfg.magnitude_high);
            for j in 0..d {
                z_tilde[(i, j)] += m * a[(j, k)];
            }
            concept.push(k);
            magnitude.push(m);
        }
    }
    Ok(SingletonPairs {
        pairs: PairedEmbeddings::new(z, z_tilde)?,
        concept,
        magnitude,
    })
}
