//! Steering vectors: extraction from a trained decoder, the mean-difference
//! baseline, scale calibration, and evaluation on held-out pairs in which a
//! single known concept changes.

use serde::{Deserialize, Serialize};

use crate::datagen::PairedEmbeddings;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{cosine_similarity, mcc};
use crate::model::{encode_eval, BatchNormState, SsaeParams};
use crate::trainer::{layer_normalize, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ssae,
    Affine,
    MeanDifference,
}

impl From<Mode> for Provenance {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ssae => Provenance::Ssae,
            Mode::Affine => Provenance::Affine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectors {
    /// d_z x k, one steering vector per column.
    pub vectors: Matrix,
    pub provenance: Provenance,
    /// `alignment[concept]` is the column that steers that concept.
    pub alignment: Option<Vec<usize>>,
}

impl SteeringVectors {
    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    pub fn column(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.len(),
            });
        }
        Ok(self.vectors.column(k).iter().copied().collect())
    }
}

/// Decoder columns, without the decoder bias.
pub fn extract_steering_vectors(params: &SsaeParams, provenance: Provenance) -> SteeringVectors {
    SteeringVectors {
        vectors: params.w_d.clone(),
        provenance,
        alignment: None,
    }
}

/// `z + scale * column_k`.
pub fn apply_steering(z: &[f64], vectors: &SteeringVectors, k: usize, scale: f64) -> Result<Vec<f64>> {
    let col = vectors.column(k)?;
    if col.len() != z.len() {
        return Err(Error::DimensionMismatch(format!(
            "embedding width {} vs steering width {}",
            z.len(),
            col.len()
        )));
    }
    Ok(z.iter().zip(&col).map(|(a, b)| a + scale * b).collect())
}

/// Mean of difference vectors (one per row).
pub fn mean_difference(diffs: &Matrix) -> Result<Vec<f64>> {
    if diffs.nrows() == 0 {
        return Err(Error::EmptyInput("mean difference needs at least one pair"));
    }
    Ok(diffs.row_mean().iter().copied().collect())
}

/// Mean-difference baseline for every concept that has labeled pairs.
/// Columns for concepts without pairs are zero.
pub fn mean_difference_vectors(set: &LabeledPairs, num_concepts: usize) -> Result<SteeringVectors> {
    let diffs = set.pairs.differences();
    let mut vectors = Matrix::zeros(diffs.ncols(), num_concepts);
    for k in 0..num_concepts {
        let rows = set.rows_for(k);
        if rows.is_empty() {
            continue;
        }
        let m = mean_difference(&diffs.select_rows(rows.iter()))?;
        vectors.set_column(k, &nalgebra::DVector::from_vec(m));
    }
    Ok(SteeringVectors {
        vectors,
        provenance: Provenance::MeanDifference,
        alignment: Some((0..num_concepts).collect()),
    })
}

/// Least-squares scale `lambda*` minimizing `sum ||diff_i - lambda * v||^2`.
pub fn fit_scale(vectors: &SteeringVectors, k: usize, calibration_diffs: &Matrix) -> Result<f64> {
    if calibration_diffs.nrows() == 0 {
        return Err(Error::EmptyInput("calibration pairs"));
    }
    let v = vectors.column(k)?;
    if calibration_diffs.ncols() != v.len() {
        return Err(Error::DimensionMismatch("calibration width".into()));
    }
    let vv: f64 = v.iter().map(|x| x * x).sum();
    if vv == 0.0 {
        return Err(Error::ZeroColumn(k));
    }
    let num: f64 = calibration_diffs
        .row_iter()
        .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(num / (vv * calibration_diffs.nrows() as f64))
}

/// Pairs in which exactly one labeled concept changes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPairs {
    pub pairs: PairedEmbeddings,
    pub concept: Vec<usize>,
}

impl LabeledPairs {
    pub fn new(pairs: PairedEmbeddings, concept: Vec<usize>) -> Result<Self> {
        if concept.len() != pairs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} pairs",
                concept.len(),
                pairs.len()
            )));
        }
        Ok(Self { pairs, concept })
    }

    pub fn rows_for(&self, k: usize) -> Vec<usize> {
        (0..self.concept.len()).filter(|&i| self.concept[i] == k).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let pairs = PairedEmbeddings::new(
            self.pairs.z.select_rows(rows.iter()),
            self.pairs.z_tilde.select_rows(rows.iter()),
        )?;
        Ok(Self {
            pairs,
            concept: rows.iter().map(|&i| self.concept[i]).collect(),
        })
    }

    /// First `per_concept` pairs of each concept for calibration, the rest held out.
    pub fn split_calibration(&self, per_concept: usize) -> Result<(Self, Self)> {
        let mut seen = std::collections::HashMap::new();
        let (mut cal, mut rest) = (Vec::new(), Vec::new());
        for (i, &k) in self.concept.iter().enumerate() {
            let c = seen.entry(k).or_insert(0usize);
            if *c < per_concept {
                cal.push(i);
            } else {
                rest.push(i);
            }
            *c += 1;
        }
        Ok((self.subset(&cal)?, self.subset(&rest)?))
    }
}

/// Where steered vectors are compared with their targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringSpace {
    /// `cos(z + lambda v, z_tilde)` on full embeddings.
    Embedding,
    /// `cos(lambda v, layer_norm(z_tilde - z))`, for models trained on
    /// layer-normalized differences.
    NormalizedDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSteering {
    pub concept: usize,
    pub column: usize,
    pub count: usize,
    pub scale: f64,
    /// Mean cosine with the fitted scale.
    pub mean_cosine: f64,
    /// Mean cosine adding the raw unit-norm column (scale 1).
    pub mean_cosine_raw: f64,
    /// Mean cosine of the unsteered source with the target.
    pub mean_cosine_unsteered: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringEvalReport {
    pub method: Provenance,
    pub space: SteeringSpace,
    pub out_of_distribution: bool,
    pub concepts: Vec<ConceptSteering>,
    pub omitted_concepts: Vec<usize>,
}

impl SteeringEvalReport {
    pub fn mean_cosine(&self) -> f64 {
        if self.concepts.is_empty() {
            return 0.0;
        }
        self.concepts.iter().map(|c| c.mean_cosine).sum::<f64>() / self.concepts.len() as f64
    }
}

fn cosine_in_space(
    space: SteeringSpace,
    z: &[f64],
    target: &[f64],
    v: &[f64],
    scale: f64,
) -> Result<f64> {
    match space {
        SteeringSpace::Embedding => {
            let steered: Vec<f64> = z.iter().zip(v).map(|(a, b)| a + scale * b).collect();
            cosine_similarity(&steered, target)
        }
        SteeringSpace::NormalizedDifference => {
            let diff: Vec<f64> = target.iter().zip(z).map(|(a, b)| a - b).collect();
            let d = Matrix::from_row_slice(1, diff.len(), &diff);
            let nd: Vec<f64> = layer_normalize(&d).iter().copied().collect();
            let shift: Vec<f64> = v.iter().map(|b| scale * b).collect();
            cosine_similarity(&shift, &nd)
        }
    }
}

/// Steers every held-out source with its concept's aligned column and
/// compares the result with the target. `scales[concept]` is the per-concept
/// multiplier; concepts without pairs are reported as omitted.
pub fn eval_steering(
    vectors: &SteeringVectors,
    heldout: &LabeledPairs,
    alignment: &[usize],
    scales: &[f64],
    space: SteeringSpace,
    out_of_distribution: bool,
) -> Result<SteeringEvalReport> {
    if scales.len() != alignment.len() {
        return Err(Error::DimensionMismatch("one scale per aligned concept".into()));
    }
    let mut concepts = Vec::new();
    let mut omitted = Vec::new();
    for (concept, &column) in alignment.iter().enumerate() {
        let rows = heldout.rows_for(concept);
        if rows.is_empty() {
            omitted.push(concept);
            continue;
        }
        let v = vectors.column(column)?;
        let (mut fitted, mut raw, mut unsteered) = (0.0, 0.0, 0.0);
        for &i in &rows {
            let z: Vec<f64> = heldout.pairs.z.row(i).iter().copied().collect();
            let t: Vec<f64> = heldout.pairs.z_tilde.row(i).iter().copied().collect();
            fitted += cosine_in_space(space, &z, &t, &v, scales[concept])?;
            raw += cosine_in_space(space, &z, &t, &v, 1.0)?;
            if space == SteeringSpace::Embedding {
                unsteered += cosine_similarity(&z, &t)?;
            }
        }
        let n = rows.len() as f64;
        concepts.push(ConceptSteering {
            concept,
            column,
            count: rows.len(),
            scale: scales[concept],
            mean_cosine: fitted / n,
            mean_cosine_raw: raw / n,
            mean_cosine_unsteered: (space == SteeringSpace::Embedding).then_some(unsteered / n),
        });
    }
    Ok(SteeringEvalReport {
        method: vectors.provenance,
        space,
        out_of_distribution,
        concepts,
        omitted_concepts: omitted,
    })
}

/// Turns an MCC matching `(learned, reference)` into `alignment[reference] = learned`.
pub fn alignment_from_matching(matching: &[(usize, usize)], num_concepts: usize) -> Result<Vec<usize>> {
    let mut out = vec![usize::MAX; num_concepts];
    for &(learned, reference) in matching {
        if reference >= num_concepts {
            return Err(Error::IndexOutOfRange {
                index: reference,
                len: num_concepts,
            });
        }
        out[reference] = learned;
    }
    if out.contains(&usize::MAX) {
        return Err(Error::InvariantViolation(
            "matching leaves a concept without a steering column".into(),
        ));
    }
    Ok(out)
}

/// Aligns learned dimensions to labeled concepts by MCC-matching encoder
/// outputs on labeled pairs against concept indicators.
pub fn align_by_labels(
    params: &SsaeParams,
    bn: &BatchNormState,
    inputs: &Matrix,
    concept: &[usize],
    num_concepts: usize,
) -> Result<Vec<usize>> {
    if concept.len() != inputs.nrows() {
        return Err(Error::DimensionMismatch("labels vs inputs".into()));
    }
    if params.latent_dim() < num_concepts {
        return Err(Error::DimensionMismatch(format!(
            "{} latent dims cannot cover {} concepts",
            params.latent_dim(),
            num_concepts
        )));
    }
    let codes = encode_eval(params, bn, inputs)?;
    let indicators = Matrix::from_fn(inputs.nrows(), num_concepts, |i, k| {
        if concept[i] == k {
            1.0
        } else {
            0.0
        }
    });
    let report = mcc(&codes, &indicators)?;
    alignment_from_matching(&report.matching, num_concepts)
}

/// Calibrates per-concept scales on `calibration` and evaluates on `heldout`.
pub fn calibrated_eval(
    vectors: &SteeringVectors,
    calibration: &LabeledPairs,
    heldout: &LabeledPairs,
    alignment: &[usize],
    space: SteeringSpace,
    out_of_distribution: bool,
) -> Result<SteeringEvalReport> {
    let diffs = match space {
        SteeringSpace::Embedding => calibration.pairs.differences(),
        SteeringSpace::NormalizedDifference => layer_normalize(&calibration.pairs.differences()),
    };
    let scales: Vec<f64> = alignment
        .iter()
        .enumerate()
        .map(|(concept, &column)| {
            let rows = calibration.rows_for(concept);
            if rows.is_empty() {
                Ok(1.0)
            } else {
                fit_scale(vectors, column, &diffs.select_rows(rows.iter()))
            }
        })
        .collect::<Result<_>>()?;
    eval_steering(vectors, heldout, alignment, &scales, space, out_of_distribution)
}
