//! Reference implementations used as test oracles. Deliberately naive:
//! explicit loops, no shared code with the library beyond the data types.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssae::model::SsaeParams;
use ssae::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Best total score over all injective row->column maps (or the transpose).
pub fn brute_force_best(scores: &Matrix) -> f64 {
    let (r, c) = (scores.nrows(), scores.ncols());
    if r > c {
        return brute_force_best(&scores.transpose());
    }
    fn go(s: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == s.nrows() {
            *best = best.max(acc);
            return;
        }
        for j in 0..s.ncols() {
            if !used[j] {
                used[j] = true;
                go(s, row + 1, used, acc + s[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(scores, 0, &mut vec![false; c], 0.0, &mut best);
    if r == 0 {
        0.0
    } else {
        best
    }
}

pub fn random_params(d: usize, k: usize, seed: u64) -> SsaeParams {
    let mut g = rng(seed);
    let mut p = SsaeParams::zeros(d, k);
    for v in p.w_e.iter_mut() {
        *v = g.random_range(-1.0..1.0);
    }
    for v in p.b_e.iter_mut() {
        *v = g.random_range(-0.5..0.5);
    }
    for v in p.w_d.iter_mut() {
        *v = g.random_range(-1.0..1.0);
    }
    for v in p.b_d.iter_mut() {
        *v = g.random_range(-0.5..0.5);
    }
    p
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut g = rng(seed);
    Matrix::from_fn(rows, cols, |_, _| g.random_range(-2.0..2.0))
}

/// `loss + lambda * constraint` for one batch, recomputed from scratch.
pub fn naive_lagrangian(p: &SsaeParams, x: &Matrix, lambda: f64, batch_norm: bool) -> f64 {
    let (b, d, k) = (x.nrows(), x.ncols(), p.w_e.nrows());
    let mut h = vec![vec![0.0; k]; b];
    for i in 0..b {
        for j in 0..k {
            let mut s = p.b_e[j];
            for t in 0..d {
                s += p.w_e[(j, t)] * (x[(i, t)] - p.b_d[t]);
            }
            h[i][j] = s;
        }
    }
    if batch_norm {
        for j in 0..k {
            let mean: f64 = (0..b).map(|i| h[i][j]).sum::<f64>() / b as f64;
            let var: f64 = (0..b).map(|i| (h[i][j] - mean).powi(2)).sum::<f64>() / b as f64;
            for row in h.iter_mut() {
                row[j] = (row[j] - mean) / (var + 1e-8).sqrt();
            }
        }
    }
    let mut loss = 0.0;
    let mut l1 = 0.0;
    for i in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..d {
            let mut rec = p.b_d[t];
            for j in 0..k {
                rec += p.w_d[(t, j)] * h[i][j];
            }
            num += (x[(i, t)] - rec).powi(2);
            den += x[(i, t)].powi(2);
        }
        loss += num / den;
        l1 += h[i].iter().map(|v| v.abs()).sum::<f64>();
    }
    loss / b as f64 + lambda * l1 / (k * b) as f64
}

/// Central finite differences of [`naive_lagrangian`] in the flat parameter order.
pub fn finite_difference_grad(p: &SsaeParams, x: &Matrix, lambda: f64, batch_norm: bool, h: f64) -> Vec<f64> {
    let base = p.to_flat();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = p.clone();
    for i in 0..base.len() {
        let mut f = base.clone();
        f[i] = base[i] + h;
        probe.copy_from_flat(&f);
        let up = naive_lagrangian(&probe, x, lambda, batch_norm);
        f[i] = base[i] - h;
        probe.copy_from_flat(&f);
        let down = naive_lagrangian(&probe, x, lambda, batch_norm);
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Pearson correlation of two columns, by the textbook formula.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// MCC by brute force over all matchings, using [`pearson`].
pub fn brute_force_mcc(learned: &Matrix, reference: &Matrix) -> f64 {
    let cols = |m: &Matrix, j: usize| m.column(j).iter().copied().collect::<Vec<f64>>();
    let c = Matrix::from_fn(learned.ncols(), reference.ncols(), |i, j| {
        pearson(&cols(learned, i), &cols(reference, j)).abs()
    });
    brute_force_best(&c) / learned.ncols().min(reference.ncols()) as f64
}

/// Outcome of one oracle suite.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

pub fn assignment_suite(instances: u64) -> Check {
    use ssae::assignment::{matching_total, max_weight_matching};
    let mut worst = 0.0_f64;
    let mut failures = 0;
    for i in 0..instances {
        let mut g = rng(1000 + i);
        let r = g.random_range(1..=7);
        let c = g.random_range(1..=7);
        let s = Matrix::from_fn(r, c, |_, _| g.random_range(0.0..1.0));
        let m = max_weight_matching(&s);
        let mut rows: Vec<usize> = m.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = m.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let valid = m.len() == r.min(c) && rows.len() == m.len() && cols.len() == m.len();
        let gap = (matching_total(&s, &m) - brute_force_best(&s)).abs();
        worst = worst.max(gap);
        if !valid || gap > 1e-12 {
            failures += 1;
        }
    }
    Check {
        pass: failures == 0,
        detail: format!("{instances} instances, {failures} mismatches, max gap {worst:.1e}"),
    }
}

pub fn gradient_suite(instances: u64) -> Check {
    use ssae::model::BatchNormState;
    use ssae::trainer::batch_objective;
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let mut g = rng(2000 + i);
        let d = g.random_range(3..=8);
        let k = g.random_range(1..=5);
        let b = g.random_range(4..=10);
        let lambda = if i % 4 == 0 { 0.0 } else { g.random_range(0.1..2.0) };
        let bn = i % 2 == 1;
        let p = random_params(d, k, 3000 + i);
        let x = random_matrix(b, d, 4000 + i);
        let mut state = BatchNormState::new(k, bn);
        let analytic = batch_objective(&p, &mut state, &x, lambda).expect("objective").grads.to_flat();
        let numeric = finite_difference_grad(&p, &x, lambda, bn, 1e-6);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Check {
        pass: worst <= 1e-3,
        detail: format!("{instances} instances, max relative error {worst:.2e} (limit 1e-3)"),
    }
}

pub fn mcc_invariance_suite(instances: u64) -> Check {
    use ssae::metrics::mcc;
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let mut g = rng(5000 + i);
        let n = 200;
        let k = g.random_range(2..=6);
        let z = random_matrix(n, k, 6000 + i);
        let other = random_matrix(n, k, 7000 + i);
        let mut perm: Vec<usize> = (0..k).collect();
        for j in (1..k).rev() {
            perm.swap(j, g.random_range(0..=j));
        }
        let scales: Vec<f64> = (0..k)
            .map(|_| {
                let s = g.random_range(0.1..10.0);
                if g.random_bool(0.5) {
                    -s
                } else {
                    s
                }
            })
            .collect();
        let shift: Vec<f64> = (0..k).map(|_| g.random_range(-5.0..5.0)).collect();
        let t = Matrix::from_fn(n, k, |r, j| z[(r, perm[j])] * scales[j] + shift[j]);
        let self_match = (mcc(&t, &z).expect("mcc").mcc - 1.0).abs();
        let invariance = (mcc(&t, &other).expect("mcc").mcc - mcc(&z, &other).expect("mcc").mcc).abs();
        let brute = (mcc(&z, &other).expect("mcc").mcc - brute_force_mcc(&z, &other)).abs();
        worst = worst.max(self_match).max(invariance).max(brute);
    }
    Check {
        pass: worst <= 1e-9,
        detail: format!("{instances} instances, max deviation {worst:.1e} (limit 1e-9)"),
    }
}

/// Steps a trainer 50 times, checking decoder norms and the multiplier after each.
pub fn training_trace_suite() -> Check {
    use ssae::datagen::{synthesize, DgpConfig};
    use ssae::trainer::{prepare_inputs, unit_decoder_beta, Trainer, TrainConfig};
    let mut worst_norm = 0.0_f64;
    let mut min_lambda = f64::INFINITY;
    let mut max_lambda = 0.0_f64;
    for bn in [false, true] {
        let cfg = DgpConfig {
            num_pairs: 1600,
            ..DgpConfig::synth(3, 2).with_seed(7)
        };
        let (pairs, truth) = synthesize(&cfg).expect("data");
        // Half the tight level keeps the constraint active.
        let mut tc = TrainConfig::new(3, 0.5 * unit_decoder_beta(&truth, 3));
        tc.layernorm_input = false;
        tc.bn_enabled = bn;
        tc.primal_lr = 0.01;
        tc.dual_lr = 0.05;
        let mut t = Trainer::from_inputs(prepare_inputs(&pairs, false), &tc).expect("trainer");
        for step in 0..50 {
            let idx: Vec<usize> = (step * 32..(step + 1) * 32).collect();
            t.step_on(&idx).expect("step");
            worst_norm = worst_norm.max(t.params().max_column_norm_error());
            min_lambda = min_lambda.min(t.lambda());
            max_lambda = max_lambda.max(t.lambda());
        }
    }
    Check {
        pass: worst_norm <= 1e-6 && min_lambda >= 0.0 && max_lambda > 0.0,
        detail: format!(
            "2 x 50 steps, max |norm - 1| {worst_norm:.1e} (limit 1e-6), lambda in [{min_lambda:.3e}, {max_lambda:.3e}]"
        ),
    }
}
