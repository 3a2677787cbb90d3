//! Training of the sparse shift autoencoder and of the unconstrained affine
//! baseline.
//!
//! The objective per batch of difference vectors `x_i` is
//!
//! ```text
//! loss       = mean_i ||x_i - q(r(x_i))||^2 / ||x_i||^2
//! constraint = sum_i ||r(x_i)||_1 / (k * B)   <= beta
//! ```
//!
//! and the saddle point of `loss + lambda * (constraint - beta)` is sought
//! with simultaneous extrapolated-Adam descent on the parameters and ascent
//! on `lambda >= 0`.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{GroundTruth, PairedEmbeddings};
use crate::error::{Error, Result};
use crate::linalg::{stage_rng, Matrix};
use crate::model::{
    batch_norm_backward, encode_eval, forward, init_params, project_decoder_grad,
    renormalize_decoder, BatchNormState, SsaeParams, Vector,
};
use crate::optim::{AdamConfig, ExtraAdam, LagrangianState};

const LAYER_NORM_EPS: f64 = 1e-8;
const ZERO_NORM_SQ: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sparsity-constrained model.
    Ssae,
    /// Same architecture with the constraint disabled.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub primal_lr: f64,
    pub dual_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub bn_enabled: bool,
    pub mode: Mode,
    pub layernorm_input: bool,
}

impl TrainConfig {
    pub fn new(latent_dim: usize, beta: f64) -> Self {
        Self {
            beta,
            primal_lr: 0.005,
            dual_lr: 0.005,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            latent_dim,
            bn_enabled: false,
            mode: Mode::Ssae,
            layernorm_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be a positive finite number");
        }
        if !(self.primal_lr > 0.0 && self.primal_lr.is_finite()) {
            return bad("primal_lr must be positive");
        }
        if !(self.dual_lr > 0.0 && self.dual_lr.is_finite()) {
            return bad("dual_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.bn_enabled && self.batch_size < 2 {
            return bad("batch normalization needs batch_size >= 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub recon: f64,
    pub l1: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_recon: f64,
    pub final_l1: f64,
    pub final_lambda: f64,
    pub curves: Vec<EpochStats>,
    pub zero_difference_skipped: usize,
    pub steps: u64,
    pub seed: u64,
    pub config: TrainConfig,
    /// Not serialized, so that reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SsaeParams,
    pub bn: BatchNormState,
    pub report: TrainReport,
}

/// Standardizes each row across its own entries (population std).
pub fn layer_normalize(batch: &Matrix) -> Matrix {
    let d = batch.ncols() as f64;
    let mut out = batch.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let denom = var.sqrt() + LAYER_NORM_EPS;
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    out
}

/// Difference vectors ready for the encoder.
pub fn prepare_inputs(pairs: &PairedEmbeddings, layernorm: bool) -> Matrix {
    let d = pairs.differences();
    if layernorm {
        layer_normalize(&d)
    } else {
        d
    }
}

fn split_zero_rows(x: &Matrix) -> (Matrix, usize) {
    let keep: Vec<usize> = (0..x.nrows())
        .filter(|&i| x.row(i).norm_squared() > ZERO_NORM_SQ)
        .collect();
    let skipped = x.nrows() - keep.len();
    if skipped == 0 {
        return (x.clone(), 0);
    }
    (x.select_rows(keep.iter()), skipped)
}

#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub constraint: f64,
    pub grads: SsaeParams,
    pub skipped: usize,
}

/// Normalized reconstruction loss, normalized l1 constraint value, and the
/// gradient of `loss + lambda * constraint` with respect to every parameter.
/// Zero-norm rows are dropped and counted.
pub fn batch_objective(
    params: &SsaeParams,
    bn: &mut BatchNormState,
    batch: &Matrix,
    lambda: f64,
) -> Result<BatchObjective> {
    if batch.nrows() == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    let (x, skipped) = split_zero_rows(batch);
    if x.nrows() == 0 {
        return Err(Error::ZeroDifference);
    }
    let b = x.nrows();
    let k = params.latent_dim();
    let cache = forward(params, bn, &x, true)?;
    let residual = &x - &cache.recon;

    let mut loss = 0.0;
    // d loss / d recon
    let mut g_recon = Matrix::zeros(b, x.ncols());
    for i in 0..b {
        let denom = x.row(i).norm_squared();
        loss += residual.row(i).norm_squared() / denom;
        let scale = -2.0 / (b as f64 * denom);
        g_recon.set_row(i, &(residual.row(i) * scale));
    }
    loss /= b as f64;
    let constraint = cache.codes.iter().map(|v| v.abs()).sum::<f64>() / (k * b) as f64;

    let grad_w_d = g_recon.transpose() * &cache.codes;
    let mut grad_b_d: Vector = g_recon.row_sum().transpose();

    let mut g_codes = &g_recon * &params.w_d;
    if lambda != 0.0 {
        let s = lambda / (k * b) as f64;
        g_codes.zip_apply(&cache.codes, |g, c| *g += s * sign(c));
    }
    let g_pre = batch_norm_backward(&cache, &g_codes);
    let grad_w_e = g_pre.transpose() * &cache.centered;
    let grad_b_e: Vector = g_pre.row_sum().transpose();
    let g_centered = &g_pre * &params.w_e;
    grad_b_d -= g_centered.row_sum().transpose();

    Ok(BatchObjective {
        loss,
        constraint,
        grads: SsaeParams {
            w_e: grad_w_e,
            b_e: grad_b_e,
            w_d: grad_w_d,
            b_d: grad_b_d,
        },
        skipped,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Full-dataset evaluation with frozen statistics: mean relative
/// reconstruction error and normalized l1 of the codes.
pub fn evaluate(params: &SsaeParams, bn: &BatchNormState, inputs: &Matrix) -> Result<(f64, f64)> {
    let (x, _) = split_zero_rows(inputs);
    if x.nrows() == 0 {
        return Err(Error::ZeroDifference);
    }
    let codes = encode_eval(params, bn, &x)?;
    let recon = crate::model::decode(params, &codes);
    let b = x.nrows();
    let rel = (0..b)
        .map(|i| (x.row(i) - recon.row(i)).norm_squared() / x.row(i).norm_squared())
        .sum::<f64>()
        / b as f64;
    let l1 = codes.iter().map(|v| v.abs()).sum::<f64>() / (params.latent_dim() * b) as f64;
    Ok((rel, l1))
}

/// Owns the mutable state of one training run. Exposed so callers can take
/// snapshots between epochs.
pub struct Trainer {
    cfg: TrainConfig,
    inputs: Matrix,
    params: SsaeParams,
    bn: BatchNormState,
    primal: ExtraAdam,
    dual: LagrangianState,
    shuffle_rng: rand_chacha::ChaCha8Rng,
    curves: Vec<EpochStats>,
    zero_skipped: usize,
    steps: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(pairs: &PairedEmbeddings, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let prepared = prepare_inputs(pairs, cfg.layernorm_input);
        Self::from_inputs(prepared, cfg)
    }

    /// Starts from already prepared encoder inputs (one difference per row).
    pub fn from_inputs(inputs: Matrix, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite training input".into()));
        }
        let (inputs, zero_skipped) = split_zero_rows(&inputs);
        if inputs.nrows() < cfg.batch_size {
            return Err(Error::InsufficientPairs {
                needed: cfg.batch_size,
                got: inputs.nrows(),
            });
        }
        let params = init_params(inputs.ncols(), cfg.latent_dim, &mut stage_rng(cfg.seed, 0));
        let bn = BatchNormState::new(cfg.latent_dim, cfg.bn_enabled);
        let primal = ExtraAdam::new(params.num_values(), AdamConfig::with_lr(cfg.primal_lr));
        let dual = LagrangianState::new(cfg.beta, cfg.dual_lr);
        Ok(Self {
            cfg: cfg.clone(),
            inputs,
            params,
            bn,
            primal,
            dual,
            shuffle_rng: stage_rng(cfg.seed, 1),
            curves: Vec::with_capacity(cfg.epochs),
            zero_skipped,
            steps: 0,
            started: Instant::now(),
        })
    }

    pub fn params(&self) -> &SsaeParams {
        &self.params
    }

    pub fn batch_norm(&self) -> &BatchNormState {
        &self.bn
    }

    pub fn lambda(&self) -> f64 {
        self.dual.lambda
    }

    pub fn epochs_done(&self) -> usize {
        self.curves.len()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    fn constrained(&self) -> bool {
        self.cfg.mode == Mode::Ssae
    }

    /// One optimizer iteration on the rows `idx` of the training inputs.
    pub fn step_on(&mut self, idx: &[usize]) -> Result<(f64, f64)> {
        let batch = self.inputs.select_rows(idx.iter());
        let mut flat = self.params.to_flat();
        self.primal.extrapolate(&mut flat);
        if self.constrained() {
            self.dual.extrapolate();
        }
        let mut lookahead = self.params.clone();
        lookahead.copy_from_flat(&flat);
        let lambda = if self.constrained() { self.dual.lambda } else { 0.0 };

        let obj = batch_objective(&lookahead, &mut self.bn, &batch, lambda)?;
        let mut grads = obj.grads;
        project_decoder_grad(&self.params.w_d, &mut grads.w_d);

        self.primal
            .step(&mut flat, &grads.to_flat())
            .map_err(|_| Error::DivergedNaN { step: self.steps })?;
        self.params.copy_from_flat(&flat);
        renormalize_decoder(&mut self.params)?;
        if self.constrained() {
            self.dual
                .dual_step(obj.constraint)
                .map_err(|_| Error::DivergedNaN { step: self.steps })?;
        }
        self.steps += 1;
        if !obj.loss.is_finite() || !obj.constraint.is_finite() {
            return Err(Error::DivergedNaN { step: self.steps });
        }
        debug_assert!(self.params.max_column_norm_error() <= 1e-6);
        debug_assert!(self.dual.lambda >= 0.0);
        Ok((obj.loss, obj.constraint))
    }

    pub fn run_epoch(&mut self) -> Result<&EpochStats> {
        let n = self.inputs.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        let min_batch = if self.cfg.bn_enabled { 2 } else { 1 };
        let (mut recon, mut l1, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let (loss, c) = self.step_on(chunk)?;
            recon += loss;
            l1 += c;
            batches += 1;
        }
        self.curves.push(EpochStats {
            recon: recon / batches as f64,
            l1: l1 / batches as f64,
            lambda: self.dual.lambda,
        });
        Ok(self.curves.last().expect("just pushed"))
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let (final_recon, final_l1) = evaluate(&self.params, &self.bn, &self.inputs)?;
        let report = TrainReport {
            final_recon,
            final_l1,
            final_lambda: self.dual.lambda,
            curves: self.curves,
            zero_difference_skipped: self.zero_skipped,
            steps: self.steps,
            seed: self.cfg.seed,
            config: self.cfg,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        Ok(TrainOutcome {
            params: self.params,
            bn: self.bn,
            report,
        })
    }
}

/// Trains for `cfg.epochs` epochs. Deterministic in `(pairs, cfg)`.
pub fn train(pairs: &PairedEmbeddings, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_inputs(prepare_inputs(pairs, cfg.layernorm_input), cfg)
}

/// Like [`train`] but on already prepared inputs.
pub fn train_inputs(inputs: Matrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::from_inputs(inputs, cfg)?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    t.finish()
}

/// `sum_i ||delta_c_i||_1 / (k * N)` on the true shifts.
pub fn theoretic_beta(truth: &GroundTruth, k: usize) -> f64 {
    let n = truth.delta_c.nrows();
    if n == 0 || k == 0 {
        return 0.0;
    }
    truth.delta_c.iter().map(|v| v.abs()).sum::<f64>() / (k * n) as f64
}

/// [`theoretic_beta`] measured in the units the encoder produces when the
/// decoder columns are unit norm: concept `j`'s shift is weighted by the norm
/// of its column in the effective mixing map. This is the smallest level at
/// which the true solution (without input layer normalization) is feasible.
pub fn unit_decoder_beta(truth: &GroundTruth, k: usize) -> f64 {
    let n = truth.delta_c.nrows();
    if n == 0 || k == 0 {
        return 0.0;
    }
    let a = truth.effective_mixing();
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let mut total = 0.0;
    for i in 0..n {
        for (j, w) in norms.iter().enumerate() {
            total += w * truth.delta_c[(i, j)].abs();
        }
    }
    total / (k * n) as f64
}

/// Tight level when the encoder sees layer-normalized differences: row `i`
/// becomes `P A dc_i / (sigma_i + eps)` with `P` the centering projection, so
/// concept `j`'s code is `dc_ij * ||P a_j|| / (sigma_i + eps)`.
pub fn layernorm_beta(pairs: &PairedEmbeddings, truth: &GroundTruth, k: usize) -> f64 {
    let n = truth.delta_c.nrows();
    if n == 0 || k == 0 || pairs.len() != n {
        return 0.0;
    }
    let a = truth.effective_mixing();
    let d = a.nrows() as f64;
    let norms: Vec<f64> = a
        .column_iter()
        .map(|c| {
            let m = c.sum() / d;
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let diffs = pairs.differences();
    let mut total = 0.0;
    for (i, row) in diffs.row_iter().enumerate() {
        let mean = row.sum() / d;
        let sigma = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d).sqrt();
        let scale = 1.0 / (sigma + LAYER_NORM_EPS);
        for (j, w) in norms.iter().enumerate() {
            total += w * truth.delta_c[(i, j)].abs() * scale;
        }
    }
    total / (k * n) as f64
}

/// The tight constraint level for the inputs the trainer will actually see.
pub fn calibrated_beta(pairs: &PairedEmbeddings, truth: &GroundTruth, k: usize, layernorm: bool) -> f64 {
    if layernorm {
        layernorm_beta(pairs, truth, k)
    } else {
        unit_decoder_beta(truth, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synthesize, DgpConfig, SupportSet};
    use crate::linalg::standard_normal_matrix;

    #[test]
    fn layer_norm_examples() {
        let c = layer_normalize(&Matrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]));
        assert!(c.iter().all(|&v| v == 0.0));
        let two = layer_normalize(&Matrix::from_row_slice(1, 2, &[2.0, 0.0]));
        assert!((two[(0, 0)] - 1.0).abs() < 1e-7);
        assert!((two[(0, 1)] + 1.0).abs() < 1e-7);
        let x = standard_normal_matrix(20, 9, &mut stage_rng(1, 0)) * 5.0;
        let y = layer_normalize(&x);
        for row in y.row_iter() {
            let mean = row.sum() / 9.0;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
            assert!(mean.abs() <= 1e-6);
            assert!((std - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn perfect_autoencoder_has_zero_loss() {
        let mut p = SsaeParams::zeros(3, 3);
        p.w_e = Matrix::identity(3, 3);
        p.w_d = Matrix::identity(3, 3);
        let x = standard_normal_matrix(8, 3, &mut stage_rng(2, 0));
        let obj = batch_objective(&p, &mut BatchNormState::disabled(3), &x, 0.0).unwrap();
        assert!(obj.loss.abs() < 1e-20);
    }

    #[test]
    fn zero_codes_have_zero_constraint() {
        let p = SsaeParams::zeros(4, 2);
        let x = standard_normal_matrix(5, 4, &mut stage_rng(3, 0));
        let obj = batch_objective(&p, &mut BatchNormState::disabled(2), &x, 1.0).unwrap();
        assert_eq!(obj.constraint, 0.0);
    }

    #[test]
    fn zero_rows_are_skipped() {
        let p = init_params(4, 2, &mut stage_rng(0, 0));
        let mut x = standard_normal_matrix(5, 4, &mut stage_rng(3, 0));
        x.row_mut(2).fill(0.0);
        let obj = batch_objective(&p, &mut BatchNormState::disabled(2), &x, 0.0).unwrap();
        assert_eq!(obj.skipped, 1);
        let err = batch_objective(&p, &mut BatchNormState::disabled(2), &Matrix::zeros(3, 4), 0.0);
        assert!(matches!(err, Err(Error::ZeroDifference)));
    }

    #[test]
    fn theoretic_beta_examples() {
        let supports: Vec<SupportSet> = (0..3).map(SupportSet::singleton).collect();
        let truth = GroundTruth {
            delta_c: Matrix::identity(3, 3),
            supports,
            mixing: Matrix::identity(3, 3),
            entangler: None,
        };
        assert!((theoretic_beta(&truth, 3) - 1.0 / 3.0).abs() < 1e-12);
        assert!((unit_decoder_beta(&truth, 3) - 1.0 / 3.0).abs() < 1e-12);
        let empty = GroundTruth {
            delta_c: Matrix::zeros(0, 3),
            supports: vec![],
            mixing: Matrix::identity(3, 3),
            entangler: None,
        };
        assert_eq!(theoretic_beta(&empty, 3), 0.0);
    }

    #[test]
    fn theoretic_beta_matches_recompute() {
        let cfg = DgpConfig {
            num_pairs: 500,
            ..DgpConfig::synth(3, 2).with_seed(5)
        };
        let (_, gt) = synthesize(&cfg).unwrap();
        let mut total = 0.0;
        for i in 0..gt.delta_c.nrows() {
            for j in 0..3 {
                total += gt.delta_c[(i, j)].abs();
            }
        }
        assert!((theoretic_beta(&gt, 3) - total / 1500.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_beta_is_the_l1_of_the_true_codes() {
        let cfg = DgpConfig {
            embed_dim: 12,
            num_pairs: 40,
            ..DgpConfig::synth(3, 2).with_seed(4)
        };
        let (pairs, truth) = synthesize(&cfg).unwrap();
        let x = layer_normalize(&pairs.differences());
        // Decoder columns: centered mixing columns, unit norm.
        let mut w_d = truth.mixing.clone();
        for mut c in w_d.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
            let n = c.norm();
            c /= n;
        }
        // Least-squares codes reproduce the normalized rows exactly.
        let codes = (w_d.transpose() * &w_d).try_inverse().unwrap() * w_d.transpose() * x.transpose();
        let recon = &w_d * &codes;
        assert!((recon - x.transpose()).amax() < 1e-9);
        let l1 = codes.iter().map(|v| v.abs()).sum::<f64>() / (3 * 40) as f64;
        assert!((layernorm_beta(&pairs, &truth, 3) - l1).abs() < 1e-9);
        assert_eq!(calibrated_beta(&pairs, &truth, 3, false), unit_decoder_beta(&truth, 3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(3, -1.0).validate().is_err());
        assert!(TrainConfig::new(3, f64::INFINITY).validate().is_err());
        assert!(TrainConfig::new(0, 1.0).validate().is_err());
        assert!(TrainConfig::new(3, 1.0).validate().is_ok());
    }

    #[test]
    fn too_few_pairs_for_a_batch() {
        let cfg = DgpConfig {
            num_pairs: 10,
            embed_dim: 6,
            ..DgpConfig::synth(3, 2)
        };
        let (pairs, _) = synthesize(&cfg).unwrap();
        let err = train(&pairs, &TrainConfig::new(3, 1.0)).err().unwrap();
        assert!(matches!(err, Error::InsufficientPairs { needed: 32, got: 10 }));
    }
}
