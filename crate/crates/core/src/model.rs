//! The sparse shift autoencoder: an affine encoder and an affine decoder over
//! difference vectors, with the decoder bias doubling as a pre-encoder bias.
//!
//! ```text
//! encode:  r(x) = W_e (x - b_d) + b_e      (optionally batch-standardized)
//! decode:  q(c) = W_d c + b_d
//! ```
//!
//! Batches are matrices with one sample per row.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub type Vector = DVector<f64>;

const MIN_COLUMN_NORM: f64 = 1e-12;
const BN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SsaeParams {
    /// k x d_z
    pub w_e: Matrix,
    /// k
    pub b_e: Vector,
    /// d_z x k, unit-norm columns
    pub w_d: Matrix,
    /// d_z
    pub b_d: Vector,
}

impl SsaeParams {
    pub fn zeros(embed_dim: usize, latent_dim: usize) -> Self {
        Self {
            w_e: Matrix::zeros(latent_dim, embed_dim),
            b_e: Vector::zeros(latent_dim),
            w_d: Matrix::zeros(embed_dim, latent_dim),
            b_d: Vector::zeros(embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_d.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_d.ncols()
    }

    pub fn num_values(&self) -> usize {
        2 * self.w_e.len() + self.b_e.len() + self.b_d.len()
    }

    /// Flattens in the order `w_e, b_e, w_d, b_d`, each in nalgebra's
    /// column-major storage order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        out.extend_from_slice(self.w_e.as_slice());
        out.extend_from_slice(self.b_e.as_slice());
        out.extend_from_slice(self.w_d.as_slice());
        out.extend_from_slice(self.b_d.as_slice());
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_values(), "flat parameter length");
        let mut at = 0;
        for dst in [
            self.w_e.as_mut_slice(),
            self.b_e.as_mut_slice(),
            self.w_d.as_mut_slice(),
            self.b_d.as_mut_slice(),
        ] {
            let n = dst.len();
            dst.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// Range of the flat vector occupied by `w_d`.
    pub fn decoder_weight_range(&self) -> std::ops::Range<usize> {
        let start = self.w_e.len() + self.b_e.len();
        start..start + self.w_d.len()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn max_column_norm_error(&self) -> f64 {
        self.w_d
            .column_iter()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Batch standardization of encoder outputs, without learnable affine terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub enabled: bool,
}

impl BatchNormState {
    pub fn new(latent_dim: usize, enabled: bool) -> Self {
        Self {
            running_mean: vec![0.0; latent_dim],
            running_var: vec![1.0; latent_dim],
            momentum: 0.1,
            enabled,
        }
    }

    pub fn disabled(latent_dim: usize) -> Self {
        Self::new(latent_dim, false)
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// x - b_d, B x d_z
    pub centered: Matrix,
    /// Pre-normalization encoder output, B x k
    pub pre_norm: Matrix,
    /// Encoder output r(x), B x k
    pub codes: Matrix,
    /// Per-dimension 1/std used by batch normalization in training mode.
    pub inv_std: Option<Vec<f64>>,
    /// Decoder output q(r(x)), B x d_z
    pub recon: Matrix,
}

/// Encoder and decoder weights tied by transposition, unit-norm decoder
/// columns, zero biases.
pub fn init_params<R: Rng + ?Sized>(embed_dim: usize, latent_dim: usize, rng: &mut R) -> SsaeParams {
    let bound = 1.0 / (embed_dim as f64).sqrt();
    let mut p = SsaeParams::zeros(embed_dim, latent_dim);
    for i in 0..latent_dim {
        for j in 0..embed_dim {
            p.w_e[(i, j)] = rng.random_range(-bound..bound);
        }
    }
    p.w_d = p.w_e.transpose();
    // A uniform draw with every entry zero is impossible in practice; fall
    // back to a basis vector so this never fails.
    for (j, mut col) in p.w_d.column_iter_mut().enumerate() {
        let n = col.norm();
        if n < MIN_COLUMN_NORM {
            col.fill(0.0);
            col[j % embed_dim] = 1.0;
        } else {
            col /= n;
        }
    }
    p.w_e = p.w_d.transpose();
    p
}

fn affine_encode(params: &SsaeParams, x: &Matrix) -> (Matrix, Matrix) {
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= params.b_d.transpose();
    }
    let mut h = &centered * params.w_e.transpose();
    for mut row in h.row_iter_mut() {
        row += params.b_e.transpose();
    }
    (centered, h)
}

fn check_width(params: &SsaeParams, x: &Matrix) -> Result<()> {
    if x.ncols() != params.embed_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input width {} but model expects {}",
            x.ncols(),
            params.embed_dim()
        )));
    }
    Ok(())
}

/// Full forward pass. In training mode with batch normalization enabled the
/// batch statistics are used and the running statistics updated.
pub fn forward(
    params: &SsaeParams,
    bn: &mut BatchNormState,
    x: &Matrix,
    training: bool,
) -> Result<ForwardCache> {
    check_width(params, x)?;
    let (centered, pre_norm) = affine_encode(params, x);
    let k = params.latent_dim();
    let b = x.nrows();
    let mut codes = pre_norm.clone();
    let mut inv_std = None;
    if bn.enabled {
        if training {
            if b < 2 {
                return Err(Error::DegenerateBatch(b));
            }
            let mut istd = vec![0.0; k];
            for j in 0..k {
                let col = pre_norm.column(j);
                let mean = col.mean();
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
                istd[j] = 1.0 / (var + BN_EPS).sqrt();
                for i in 0..b {
                    codes[(i, j)] = (pre_norm[(i, j)] - mean) * istd[j];
                }
                let m = bn.momentum;
                bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * mean;
                let unbiased = var * b as f64 / (b as f64 - 1.0);
                bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * unbiased;
            }
            inv_std = Some(istd);
        } else {
            for j in 0..k {
                let s = 1.0 / (bn.running_var[j] + BN_EPS).sqrt();
                for i in 0..b {
                    codes[(i, j)] = (pre_norm[(i, j)] - bn.running_mean[j]) * s;
                }
            }
        }
    }
    let recon = decode(params, &codes);
    Ok(ForwardCache {
        centered,
        pre_norm,
        codes,
        inv_std,
        recon,
    })
}

/// Encoder output for a batch of difference vectors.
pub fn encode(
    params: &SsaeParams,
    bn: &mut BatchNormState,
    delta_z: &Matrix,
    training: bool,
) -> Result<Matrix> {
    forward(params, bn, delta_z, training).map(|c| c.codes)
}

/// Encoder output with frozen statistics. Never mutates state.
pub fn encode_eval(params: &SsaeParams, bn: &BatchNormState, delta_z: &Matrix) -> Result<Matrix> {
    let mut frozen = bn.clone();
    encode(params, &mut frozen, delta_z, false)
}

pub fn decode(params: &SsaeParams, codes: &Matrix) -> Matrix {
    let mut out = codes * params.w_d.transpose();
    for mut row in out.row_iter_mut() {
        row += params.b_d.transpose();
    }
    out
}

/// Backpropagates a gradient on the normalized codes to the pre-normalization
/// outputs. Identity when batch normalization was not applied in training mode.
pub fn batch_norm_backward(cache: &ForwardCache, grad_codes: &Matrix) -> Matrix {
    let Some(istd) = &cache.inv_std else {
        return grad_codes.clone();
    };
    let b = grad_codes.nrows() as f64;
    let mut out = grad_codes.clone();
    for j in 0..grad_codes.ncols() {
        let g = grad_codes.column(j);
        let xhat = cache.codes.column(j);
        let mean_g = g.sum() / b;
        let mean_gx = g.dot(&xhat) / b;
        for i in 0..grad_codes.nrows() {
            out[(i, j)] = istd[j] * (g[i] - mean_g - xhat[i] * mean_gx);
        }
    }
    out
}

/// Scales every decoder column to unit Euclidean norm.
pub fn renormalize_decoder(params: &mut SsaeParams) -> Result<()> {
    for (j, col) in params.w_d.column_iter().enumerate() {
        if col.norm() < MIN_COLUMN_NORM {
            return Err(Error::ZeroColumn(j));
        }
    }
    for mut col in params.w_d.column_iter_mut() {
        // Divide by the largest entry first so huge columns do not overflow.
        let m = col.amax();
        col /= m;
        let n = col.norm();
        col /= n;
    }
    Ok(())
}

/// Removes from each decoder-gradient column its component along the
/// corresponding (unit) decoder column.
pub fn project_decoder_grad(w_d: &Matrix, grad_w_d: &mut Matrix) {
    for (w, mut g) in w_d.column_iter().zip(grad_w_d.column_iter_mut()) {
        let along = g.dot(&w);
        g.axpy(-along, &w, 1.0);
    }
}
