//! Identifiability and similarity metrics: absolute Pearson correlation,
//! mean correlation coefficient (MCC) under optimal matching, cross-seed MCC
//! and its median (UDR), cosine similarity, and an R^2 linear probe.

use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, Matrix};
use crate::model::{encode_eval, BatchNormState, SsaeParams, Vector};

const ZERO_VARIANCE: f64 = 1e-12;

/// `|corr|` between every learned column (rows) and reference column (cols).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    #[serde(with = "crate::store::matrix_rows")]
    pub values: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MccMode {
    GroundTruth,
    CrossSeed,
    DecoderColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccReport {
    pub mcc: f64,
    /// `(learned dim, reference dim)`, sorted by learned dim.
    pub matching: Vec<(usize, usize)>,
    pub correlations: Vec<f64>,
    pub mode: MccMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub full: Option<CorrelationMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdrReport {
    pub udr: f64,
    pub pairwise: Vec<f64>,
    pub median_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMcc {
    pub run_a: usize,
    pub run_b: usize,
    pub encoder: MccReport,
    pub decoder: MccReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Report {
    pub r2: f64,
    pub per_column: Vec<f64>,
    pub regularized: bool,
}

fn centered_columns(m: &Matrix) -> (Matrix, Vec<f64>) {
    let n = m.nrows() as f64;
    let mut c = m.clone();
    let mut norms = Vec::with_capacity(m.ncols());
    for mut col in c.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        norms.push(col.norm());
    }
    (c, norms)
}

/// Entry `(i, j) = |corr(x[:, i], y[:, j])|`; columns with variance below
/// 1e-12 correlate 0 with everything.
pub fn abs_pearson(x: &Matrix, y: &Matrix) -> Result<CorrelationMatrix> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} samples vs {} samples",
            n,
            y.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let (xc, xn) = centered_columns(x);
    let (yc, yn) = centered_columns(y);
    let cross = xc.transpose() * &yc;
    let threshold = (ZERO_VARIANCE * n as f64).sqrt();
    let values = Matrix::from_fn(x.ncols(), y.ncols(), |i, j| {
        if xn[i] < threshold || yn[j] < threshold {
            0.0
        } else {
            (cross[(i, j)] / (xn[i] * yn[j])).abs().min(1.0)
        }
    });
    Ok(CorrelationMatrix { values })
}

/// Maximum-total matching on a correlation matrix.
pub fn solve_assignment(c: &CorrelationMatrix) -> Vec<(usize, usize)> {
    max_weight_matching(&c.values)
}

fn report_from(c: CorrelationMatrix, mode: MccMode, full: bool) -> MccReport {
    let matching = solve_assignment(&c);
    let correlations: Vec<f64> = matching.iter().map(|&(r, col)| c.values[(r, col)]).collect();
    let mcc = if correlations.is_empty() {
        0.0
    } else {
        correlations.iter().sum::<f64>() / correlations.len() as f64
    };
    MccReport {
        mcc,
        matching,
        correlations,
        mode,
        full: full.then_some(c),
    }
}

/// Mean of optimally matched absolute correlations, over `min(k, |V|)` pairs.
pub fn mcc(learned: &Matrix, reference: &Matrix) -> Result<MccReport> {
    mcc_with(learned, reference, MccMode::GroundTruth, false)
}

pub fn mcc_with(learned: &Matrix, reference: &Matrix, mode: MccMode, full: bool) -> Result<MccReport> {
    Ok(report_from(abs_pearson(learned, reference)?, mode, full))
}

/// A trained model as consumed by cross-seed comparison.
pub struct RunView<'a> {
    pub params: &'a SsaeParams,
    pub bn: &'a BatchNormState,
}

/// Pairwise MCC over every unordered pair of runs: encoder outputs on the
/// shared `inputs`, and decoder columns with the embedding rows as samples.
pub fn mcc_cross_seed(runs: &[RunView<'_>], inputs: &Matrix) -> Result<Vec<PairwiseMcc>> {
    if runs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: runs.len(),
        });
    }
    let k = runs[0].params.latent_dim();
    if let Some(bad) = runs.iter().find(|r| r.params.latent_dim() != k) {
        return Err(Error::DimensionMismatch(format!(
            "latent dims differ across runs ({} vs {})",
            k,
            bad.params.latent_dim()
        )));
    }
    let codes: Vec<Matrix> = runs
        .iter()
        .map(|r| encode_eval(r.params, r.bn, inputs))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            let encoder = mcc_with(&codes[a], &codes[b], MccMode::CrossSeed, false)?;
            let decoder = mcc_with(
                &runs[a].params.w_d,
                &runs[b].params.w_d,
                MccMode::DecoderColumns,
                false,
            )?;
            out.push(PairwiseMcc {
                run_a: a,
                run_b: b,
                encoder,
                decoder,
            });
        }
    }
    Ok(out)
}

/// Lower-middle order statistic (`ceil(n/2)`-th smallest).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[v.len().div_ceil(2) - 1])
}

pub fn udr(pairwise: &[f64]) -> Result<UdrReport> {
    let udr = lower_median(pairwise).ok_or(Error::EmptyInput("pairwise MCC list"))?;
    Ok(UdrReport {
        udr,
        pairwise: pairwise.to_vec(),
        median_convention: "lower-middle".into(),
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Least-squares fit (with intercept) of each reference column from the
/// learned columns; mean per-column R^2.
pub fn r2_probe(learned: &Matrix, reference: &Matrix) -> Result<R2Report> {
    let n = learned.nrows();
    let k = learned.ncols();
    if reference.nrows() != n {
        return Err(Error::DimensionMismatch("sample counts differ".into()));
    }
    if n <= k {
        return Err(Error::InsufficientSamples { needed: k + 1, got: n });
    }
    let mut design = Matrix::from_element(n, k + 1, 1.0);
    design.view_mut((0, 0), (n, k)).copy_from(learned);
    let regularized = numerical_rank(&design, 1e-10) < k + 1;
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * reference;
    let coef = if regularized {
        let ridge = &gram + Matrix::identity(k + 1, k + 1) * 1e-8;
        ridge
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvariantViolation("ridge system is singular".into()))?
    } else {
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvariantViolation("normal equations not positive definite".into()))?;
        chol.solve(&rhs)
    };
    let fitted = &design * coef;
    let per_column: Vec<f64> = (0..reference.ncols())
        .map(|j| {
            let y = reference.column(j);
            let mean = y.mean();
            let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = (y - fitted.column(j)).norm_squared();
            if ss_tot < ZERO_VARIANCE {
                if ss_res < ZERO_VARIANCE { 1.0 } else { 0.0 }
            } else {
                1.0 - ss_res / ss_tot
            }
        })
        .collect();
    let r2 = per_column.iter().sum::<f64>() / per_column.len().max(1) as f64;
    Ok(R2Report {
        r2,
        per_column,
        regularized,
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: a.len() });
    }
    let ra = Vector::from_vec(average_ranks(a));
    let rb = Vector::from_vec(average_ranks(b));
    let x = Matrix::from_columns(&[ra]);
    let y = Matrix::from_columns(&[rb]);
    let (xc, xn) = centered_columns(&x);
    let (yc, yn) = centered_columns(&y);
    if xn[0] == 0.0 || yn[0] == 0.0 {
        return Ok(0.0);
    }
    Ok(xc.column(0).dot(&yc.column(0)) / (xn[0] * yn[0]))
}
