//! Hyperparameter sweeps: the (primal_lr x beta) grid scored by UDR, and the
//! latent-dimension misspecification study. Cells are independent and run
//! on a rayon pool sized by the caller.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{mcc, mcc_cross_seed, udr, RunView};
use crate::model::encode_eval;
use crate::trainer::{train_inputs, Mode, TrainConfig, TrainOutcome};

pub const BETA_MULTIPLIERS: [f64; 6] = [0.5, 0.75, 1.0, 1.5, 2.0, 3.0];
pub const ABSOLUTE_BETAS: [f64; 7] = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0];
pub const PRIMAL_LRS: [f64; 3] = [0.001, 0.005, 0.01];

/// A beta grid: multiples of `center` when one is known, absolute levels otherwise.
pub fn beta_grid(center: Option<f64>) -> Vec<(f64, Option<f64>)> {
    match center {
        Some(c) => BETA_MULTIPLIERS.iter().map(|&m| (c * m, Some(m))).collect(),
        None => ABSOLUTE_BETAS.iter().map(|&b| (b, None)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Fields other than `primal_lr`, `dual_lr`, `beta` and `seed` are taken from here.
    pub base: TrainConfig,
    pub primal_lrs: Vec<f64>,
    /// `(beta, multiplier)`; the multiplier is only reported.
    pub betas: Vec<(f64, Option<f64>)>,
    pub seeds: Vec<u64>,
    /// Tie the dual learning rate to the primal one.
    pub dual_follows_primal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdrCell {
    pub primal_lr: f64,
    pub dual_lr: f64,
    pub beta: f64,
    pub beta_multiplier: Option<f64>,
    pub udr: f64,
    pub pairwise: Vec<f64>,
    pub diverged: Vec<u64>,
    /// Ground-truth MCC per seed (diverged runs score 0), when a reference exists.
    pub gt_mcc: Option<Vec<f64>>,
    pub gt_mcc_mean: Option<f64>,
    pub mean_recon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdrTable {
    pub seeds: Vec<u64>,
    pub median_convention: String,
    pub cells: Vec<UdrCell>,
}

impl UdrTable {
    /// First cell with the highest UDR, in grid order.
    pub fn argmax_udr(&self) -> Option<&UdrCell> {
        first_max(&self.cells, |c| Some(c.udr))
    }

    pub fn best_gt_mcc(&self) -> Option<&UdrCell> {
        first_max(&self.cells, |c| c.gt_mcc_mean)
    }
}

fn first_max<T>(items: &[T], key: impl Fn(&T) -> Option<f64>) -> Option<&T> {
    let mut best: Option<(&T, f64)> = None;
    for it in items {
        if let Some(v) = key(it) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((it, v));
            }
        }
    }
    best.map(|(t, _)| t)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

fn run_or_diverge(inputs: &Matrix, cfg: &TrainConfig) -> Result<Option<TrainOutcome>> {
    match train_inputs(inputs.clone(), cfg) {
        Ok(o) => Ok(Some(o)),
        Err(Error::DivergedNaN { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Every (lr, beta, seed) run on the shared `inputs`, then per-cell UDR from
/// cross-seed encoder MCC. `reference`, if given, holds the true shifts
/// aligned with the rows of `inputs`.
pub fn udr_sweep(
    inputs: &Matrix,
    grid: &GridSpec,
    reference: Option<&Matrix>,
    threads: usize,
) -> Result<UdrTable> {
    if grid.seeds.len() < 2 {
        return Err(Error::InvalidConfig("UDR needs at least two seeds".into()));
    }
    if grid.primal_lrs.is_empty() || grid.betas.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    let mut jobs = Vec::new();
    for &lr in &grid.primal_lrs {
        for &(beta, mult) in &grid.betas {
            for &seed in &grid.seeds {
                let mut cfg = grid.base.clone();
                cfg.primal_lr = lr;
                if grid.dual_follows_primal {
                    cfg.dual_lr = lr;
                }
                cfg.beta = beta;
                cfg.seed = seed;
                cfg.validate()?;
                jobs.push((cfg, mult));
            }
        }
    }
    let outcomes: Vec<Option<TrainOutcome>> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|(cfg, _)| run_or_diverge(inputs, cfg))
            .collect::<Result<Vec<_>>>()
    })?;

    let s = grid.seeds.len();
    let mut cells = Vec::new();
    for (chunk, runs) in jobs.chunks(s).zip(outcomes.chunks(s)) {
        let cfg = &chunk[0].0;
        cells.push(score_cell(cfg, chunk[0].1, &grid.seeds, runs, inputs, reference)?);
    }
    Ok(UdrTable {
        seeds: grid.seeds.clone(),
        median_convention: "lower-middle".into(),
        cells,
    })
}

fn score_cell(
    cfg: &TrainConfig,
    multiplier: Option<f64>,
    seeds: &[u64],
    runs: &[Option<TrainOutcome>],
    inputs: &Matrix,
    reference: Option<&Matrix>,
) -> Result<UdrCell> {
    let alive: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].is_some()).collect();
    let views: Vec<RunView<'_>> = alive
        .iter()
        .map(|&i| {
            let r = runs[i].as_ref().expect("alive");
            RunView { params: &r.params, bn: &r.bn }
        })
        .collect();
    // Pairs with a diverged member score 0.
    let n = runs.len();
    let mut pairwise = vec![0.0; n * (n - 1) / 2];
    let index = |a: usize, b: usize| a * n - a * (a + 1) / 2 + (b - a - 1);
    if views.len() >= 2 {
        for p in mcc_cross_seed(&views, inputs)? {
            pairwise[index(alive[p.run_a], alive[p.run_b])] = p.encoder.mcc;
        }
    }
    let report = udr(&pairwise)?;

    let gt_mcc = match reference {
        Some(reference) => Some(
            runs.iter()
                .map(|r| match r {
                    Some(o) => Ok(mcc(&encode_eval(&o.params, &o.bn, inputs)?, reference)?.mcc),
                    None => Ok(0.0),
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    let gt_mcc_mean = gt_mcc.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64);
    let recon: Vec<f64> = runs.iter().flatten().map(|o| o.report.final_recon).collect();
    let mean_recon = if recon.is_empty() {
        f64::NAN
    } else {
        recon.iter().sum::<f64>() / recon.len() as f64
    };
    Ok(UdrCell {
        primal_lr: cfg.primal_lr,
        dual_lr: cfg.dual_lr,
        beta: cfg.beta,
        beta_multiplier: multiplier,
        udr: report.udr,
        pairwise,
        diverged: (0..n).filter(|&i| runs[i].is_none()).map(|i| seeds[i]).collect(),
        gt_mcc,
        gt_mcc_mean,
        mean_recon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSweepRow {
    pub latent_dim: usize,
    pub mode: Mode,
    pub seed: u64,
    pub beta: f64,
    /// `None` when the run diverged.
    pub mcc: Option<f64>,
    pub final_recon: Option<f64>,
}

/// Trains both modes for every `k` and seed. `beta_for(k)` supplies the
/// constraint level; MCC against `reference` is rectangular when `k` differs
/// from the number of reference columns.
pub fn latent_dim_sweep(
    inputs: &Matrix,
    base: &TrainConfig,
    latent_dims: &[usize],
    seeds: &[u64],
    beta_for: impl Fn(usize) -> f64 + Sync,
    reference: Option<&Matrix>,
    threads: usize,
) -> Result<Vec<LatentSweepRow>> {
    let mut jobs = Vec::new();
    for &k in latent_dims {
        for mode in [Mode::Ssae, Mode::Affine] {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.latent_dim = k;
                cfg.mode = mode;
                cfg.seed = seed;
                cfg.beta = beta_for(k);
                cfg.validate()?;
                jobs.push(cfg);
            }
        }
    }
    pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let out = run_or_diverge(inputs, cfg)?;
                let score = match (&out, reference) {
                    (Some(o), Some(r)) => Some(mcc(&encode_eval(&o.params, &o.bn, inputs)?, r)?.mcc),
                    _ => None,
                };
                Ok(LatentSweepRow {
                    latent_dim: cfg.latent_dim,
                    mode: cfg.mode,
                    seed: cfg.seed,
                    beta: cfg.beta,
                    mcc: score,
                    final_recon: out.map(|o| o.report.final_recon),
                })
            })
            .collect()
    })
}
