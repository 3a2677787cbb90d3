use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use ssae::datagen::{sample_singleton_pairs, synthesize, synthesize_entangled, DgpConfig};
use ssae::metrics::{mcc, mcc_cross_seed, udr, RunView};
use ssae::model::encode_eval;
use ssae::steering::{
    align_by_labels, calibrated_eval, extract_steering_vectors, mean_difference_vectors,
    LabeledPairs, Provenance, SteeringSpace,
};
use ssae::store::{self, ArtifactKind, Checkpoint, Labels, PairLabel};
use ssae::sweep::{beta_grid, latent_dim_sweep, udr_sweep, GridSpec, PRIMAL_LRS};
use ssae::trainer::{calibrated_beta, prepare_inputs, train, Mode, TrainConfig};
use ssae::{ErrorKind, GroundTruth, PairedEmbeddings};

const JSON_SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_FILE: &str = "checkpoint.ssck";

#[derive(Parser, Debug)]
#[command(name = "ssae", version, about = "Sparse shift autoencoders on paired embeddings")]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic paired embeddings with a ground-truth sidecar.
    GenData(GenDataArgs),
    /// Train one model on a pair file.
    Train(TrainArgs),
    /// MCC against the ground truth, or across checkpoints without one.
    EvalMcc(EvalMccArgs),
    /// UDR over a (primal_lr x beta) grid of seeds, as CSV.
    EvalUdr(EvalUdrArgs),
    /// Latent-dimension misspecification study, as CSV.
    Sweep(SweepArgs),
    /// Evaluate steering vectors on labeled single-concept pairs.
    Steer(SteerArgs),
    /// Print the header and dimensions of an artifact.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataSpec {
    Synth,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = DataSpec::Synth)]
    spec: DataSpec,
    /// Number of concepts.
    #[arg(long)]
    v: usize,
    /// Largest number of concepts varying in one pair.
    #[arg(long)]
    max_s: usize,
    #[arg(long, default_value_t = 50)]
    dz: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Apply a random invertible linear map to every embedding.
    #[arg(long)]
    entangle: bool,
    /// Also write this many held-out single-concept pairs per concept.
    #[arg(long, default_value_t = 0)]
    heldout_per_concept: usize,
    #[arg(long, default_value = "pairs")]
    name: String,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum ModeArg {
    Ssae,
    Affine,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ssae => Mode::Ssae,
            ModeArg::Affine => Mode::Affine,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Latent dimension; defaults to the sidecar's concept count.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Ssae)]
    mode: ModeArg,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.005)]
    primal_lr: f64,
    /// Defaults to the primal learning rate.
    #[arg(long)]
    dual_lr: Option<f64>,
    /// Batch normalization (no learned scale or shift) on the encoder output.
    #[arg(long)]
    bn: bool,
    /// Train on raw differences instead of layer-normalized ones.
    #[arg(long)]
    no_layernorm: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Sparsity level.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "beta_mult")]
    beta: Option<f64>,
    /// Sparsity level as a multiple of the tight level computed from the sidecar.
    #[arg(long)]
    beta_mult: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalMccArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint files or training output directories.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Include the full correlation matrix in the report.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct EvalUdrArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of training seeds per cell, starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_delimiter = ',')]
    primal_lrs: Option<Vec<f64>>,
    /// Absolute beta levels; defaults to multiples of the tight level, or a
    /// fixed grid without a sidecar.
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    latent_dims: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Fixed beta for every k; defaults to the tight level per k from the sidecar.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum MethodArg {
    Model,
    MeanDifference,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum SpaceArg {
    /// Normalized differences if the model trained on them, else raw embeddings.
    Auto,
    Embedding,
    Normalized,
}

#[derive(Args, Debug)]
struct SteerArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Single-concept pairs to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Labels for --data; defaults to the sibling `.labels.json`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Pairs per concept reserved to align columns and fit scales.
    #[arg(long, default_value_t = 5)]
    calibration_per_concept: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Model)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = SpaceArg::Auto)]
    space: SpaceArg,
    /// Mark the report as out-of-distribution.
    #[arg(long)]
    ood: bool,
    /// Also write the steering vectors as a matrix file.
    #[arg(long)]
    export_vectors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

/// A command-line usage problem detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<ssae::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    json: bool,
    threads: usize,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn echo_config<T: Serialize>(&self, command: &str, config: &T) -> Result<()> {
        let echo = json!({
            "schema_version": JSON_SCHEMA_VERSION,
            "command": command,
            "seed": self.seed,
            "threads": self.threads,
            "args": config,
        });
        store::write_json(&self.path(&format!("{command}.config.json")), &echo)?;
        Ok(())
    }

    /// `text` for humans, or the JSON summary with `--json`.
    fn emit(&self, command: &str, text: String, summary: serde_json::Value) -> Result<()> {
        if self.json {
            let doc = json!({
                "schema_version": JSON_SCHEMA_VERSION,
                "command": command,
                "result": summary,
            });
            println!("{}", serde_json::to_string(&doc)?);
        } else {
            println!("{text}");
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out,
        json: cli.json,
        threads: cli.threads,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::EvalMcc(a) => eval_mcc(&ctx, a),
        Command::EvalUdr(a) => eval_udr(&ctx, a),
        Command::Sweep(a) => sweep_cmd(&ctx, a),
        Command::Steer(a) => steer(&ctx, a),
        Command::Inspect(a) => inspect(&ctx, a),
    }
}

fn load_pairs(path: &Path) -> Result<(PairedEmbeddings, Option<GroundTruth>)> {
    let (header, pairs) =
        store::read_pairs(path).with_context(|| format!("reading {}", path.display()))?;
    let truth = if header.has_ground_truth() {
        let gt = store::read_ground_truth(&store::sidecar_path(path))?;
        if gt.delta_c.nrows() != pairs.len() {
            return Err(ssae::Error::DimensionMismatch(format!(
                "sidecar has {} shifts for {} pairs",
                gt.delta_c.nrows(),
                pairs.len()
            ))
            .into());
        }
        Some(gt)
    } else {
        None
    };
    Ok((pairs, truth))
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    let path = checkpoint_path(p);
    store::read_checkpoint(&path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Serialize)]
struct GenDataEcho {
    data: DgpConfig,
    entangle: bool,
    heldout_per_concept: usize,
    name: String,
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let DataSpec::Synth = a.spec;
    if a.name.is_empty() || a.name.contains(['/', '\\']) {
        return Err(usage("--name must be a plain file stem"));
    }
    let cfg = DgpConfig {
        embed_dim: a.dz,
        num_pairs: a.n,
        ..DgpConfig::synth(a.v, a.max_s).with_seed(ctx.seed)
    };
    let (pairs, truth) = if a.entangle {
        synthesize_entangled(&cfg)?
    } else {
        synthesize(&cfg)?
    };
    ctx.echo_config(
        "gen-data",
        &GenDataEcho {
            data: cfg.clone(),
            entangle: a.entangle,
            heldout_per_concept: a.heldout_per_concept,
            name: a.name.clone(),
        },
    )?;
    let path = ctx.path(&format!("{}.ssb", a.name));
    store::write_ground_truth(&store::sidecar_path(&path), &truth)?;
    store::write_pairs(&path, &pairs, true)?;

    let mut summary = json!({
        "pairs": path,
        "embed_dim": pairs.embed_dim(),
        "num_pairs": pairs.len(),
        "num_concepts": truth.num_concepts(),
    });
    let mut text = format!(
        "wrote {} ({} pairs, d_z={}, {} concepts)",
        path.display(),
        pairs.len(),
        pairs.embed_dim(),
        truth.num_concepts()
    );
    if a.heldout_per_concept > 0 {
        let held = sample_singleton_pairs(&cfg, &truth, a.heldout_per_concept, ctx.seed)?;
        let hpath = ctx.path(&format!("{}.heldout.ssb", a.name));
        let labels = Labels::new(
            (0..truth.num_concepts()).map(|k| format!("concept_{k}")).collect(),
            held.concept.iter().map(|&k| PairLabel { varying: vec![k] }).collect(),
        );
        store::write_labels(&store::labels_path(&hpath), &labels)?;
        store::write_pairs(&hpath, &held.pairs, false)?;
        summary["heldout"] = json!(hpath);
        text.push_str(&format!("\nwrote {} ({} held-out pairs)", hpath.display(), held.pairs.len()));
    }
    ctx.emit("gen-data", text, summary)
}

fn model_config(
    m: &ModelArgs,
    truth: Option<&GroundTruth>,
    beta: f64,
    seed: u64,
) -> Result<TrainConfig> {
    let latent_dim = match (m.latent_dim, truth) {
        (Some(k), _) => k,
        (None, Some(t)) => t.num_concepts(),
        (None, None) => return Err(usage("--latent-dim is required without a ground-truth sidecar")),
    };
    let mut cfg = TrainConfig::new(latent_dim, beta);
    cfg.mode = m.mode.into();
    cfg.epochs = m.epochs;
    cfg.batch_size = m.batch_size;
    cfg.primal_lr = m.primal_lr;
    cfg.dual_lr = m.dual_lr.unwrap_or(m.primal_lr);
    cfg.bn_enabled = m.bn;
    cfg.layernorm_input = !m.no_layernorm;
    cfg.seed = seed;
    Ok(cfg)
}

fn resolve_beta(
    beta: Option<f64>,
    beta_mult: Option<f64>,
    pairs: &PairedEmbeddings,
    truth: Option<&GroundTruth>,
    k: usize,
    layernorm: bool,
) -> Result<f64> {
    match (beta, beta_mult, truth) {
        (Some(b), _, _) => Ok(b),
        (None, mult, Some(t)) => Ok(calibrated_beta(pairs, t, k, layernorm) * mult.unwrap_or(1.0)),
        (None, Some(_), None) => Err(usage("--beta-mult needs a ground-truth sidecar")),
        (None, None, None) => Err(usage("--beta is required without a ground-truth sidecar")),
    }
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let (pairs, truth) = load_pairs(&a.data)?;
    let mut cfg = model_config(&a.model, truth.as_ref(), 1.0, ctx.seed)?;
    cfg.beta = resolve_beta(a.beta, a.beta_mult, &pairs, truth.as_ref(), cfg.latent_dim, cfg.layernorm_input)?;
    cfg.validate()?;
    ctx.echo_config("train", &json!({ "data": a.data, "train": cfg }))?;
    let out = train(&pairs, &cfg)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        params: out.params.clone(),
        bn: out.bn.clone(),
        lambda: out.report.final_lambda,
        seed: cfg.seed,
    };
    store::write_checkpoint(&ctx.path(CHECKPOINT_FILE), &ck)?;
    store::write_json(&ctx.path("report.json"), &out.report)?;
    let mut summary = json!({
        "checkpoint": ctx.path(CHECKPOINT_FILE),
        "beta": cfg.beta,
        "final_recon": out.report.final_recon,
        "final_l1": out.report.final_l1,
        "final_lambda": out.report.final_lambda,
    });
    let mut text = format!(
        "trained {} epochs: recon={:.6} l1={:.6} beta={:.6} lambda={:.6}",
        cfg.epochs, out.report.final_recon, out.report.final_l1, cfg.beta, out.report.final_lambda
    );
    if let Some(t) = &truth {
        let inputs = prepare_inputs(&pairs, cfg.layernorm_input);
        let score = mcc(&encode_eval(&out.params, &out.bn, &inputs)?, &t.delta_c)?.mcc;
        summary["mcc"] = json!(score);
        text.push_str(&format!("\nmcc={score:.4}"));
    }
    ctx.emit("train", text, summary)
}

fn eval_mcc(ctx: &Ctx, a: EvalMccArgs) -> Result<()> {
    let (pairs, truth) = load_pairs(&a.data)?;
    let cks: Vec<Checkpoint> = a.checkpoint.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    for (p, ck) in a.checkpoint.iter().zip(&cks) {
        if ck.params.embed_dim() != pairs.embed_dim() {
            return Err(ssae::Error::DimensionMismatch(format!(
                "{} expects d_z={}, data has {}",
                p.display(),
                ck.params.embed_dim(),
                pairs.embed_dim()
            ))
            .into());
        }
    }
    ctx.echo_config("eval-mcc", &json!({ "data": a.data, "checkpoints": a.checkpoint, "full": a.full }))?;
    if let Some(t) = &truth {
        let mut reports = Vec::new();
        let mut lines = Vec::new();
        for (p, ck) in a.checkpoint.iter().zip(&cks) {
            let inputs = prepare_inputs(&pairs, ck.config.layernorm_input);
            let codes = encode_eval(&ck.params, &ck.bn, &inputs)?;
            let r = ssae::metrics::mcc_with(&codes, &t.delta_c, ssae::metrics::MccMode::GroundTruth, a.full)?;
            lines.push(format!("{}: mcc={:.4}", p.display(), r.mcc));
            reports.push(json!({ "checkpoint": p, "report": r }));
        }
        let doc = json!({ "schema_version": JSON_SCHEMA_VERSION, "mode": "ground_truth", "runs": reports });
        store::write_json(&ctx.path("mcc.json"), &doc)?;
        let mccs: Vec<f64> = reports.iter().map(|r| r["report"]["mcc"].as_f64().unwrap_or(0.0)).collect();
        return ctx.emit("eval-mcc", lines.join("\n"), json!({ "mode": "ground_truth", "mcc": mccs }));
    }
    if cks.len() < 2 {
        return Err(usage("without a ground-truth sidecar, eval-mcc needs at least two checkpoints"));
    }
    let ln = cks[0].config.layernorm_input;
    if cks.iter().any(|c| c.config.layernorm_input != ln) {
        return Err(usage("checkpoints disagree on input layer normalization"));
    }
    let inputs = prepare_inputs(&pairs, ln);
    let views: Vec<RunView<'_>> = cks.iter().map(|c| RunView { params: &c.params, bn: &c.bn }).collect();
    let pairwise = mcc_cross_seed(&views, &inputs)?;
    let enc: Vec<f64> = pairwise.iter().map(|p| p.encoder.mcc).collect();
    let report = udr(&enc)?;
    let doc = json!({
        "schema_version": JSON_SCHEMA_VERSION,
        "mode": "cross_seed",
        "checkpoints": a.checkpoint,
        "pairwise": pairwise,
        "udr": report,
    });
    store::write_json(&ctx.path("mcc.json"), &doc)?;
    let mut text: Vec<String> = pairwise
        .iter()
        .map(|p| format!("runs {} vs {}: encoder mcc={:.4} decoder mcc={:.4}", p.run_a, p.run_b, p.encoder.mcc, p.decoder.mcc))
        .collect();
    text.push(format!("udr={:.4}", report.udr));
    ctx.emit("eval-mcc", text.join("\n"), json!({ "mode": "cross_seed", "pairwise": enc, "udr": report.udr }))
}

fn seed_list(start: u64, count: u64) -> Vec<u64> {
    (start..start + count).collect()
}

fn eval_udr(ctx: &Ctx, a: EvalUdrArgs) -> Result<()> {
    if a.seeds < 2 {
        return Err(usage("--seeds must be at least 2"));
    }
    let (pairs, truth) = load_pairs(&a.data)?;
    let base = model_config(&a.model, truth.as_ref(), 1.0, ctx.seed)?;
    let betas = match (&a.betas, &truth) {
        (Some(b), _) => b.iter().map(|&x| (x, None)).collect(),
        (None, Some(t)) => beta_grid(Some(calibrated_beta(&pairs, t, base.latent_dim, base.layernorm_input))),
        (None, None) => beta_grid(None),
    };
    let grid = GridSpec {
        base: base.clone(),
        primal_lrs: a.primal_lrs.clone().unwrap_or_else(|| PRIMAL_LRS.to_vec()),
        betas,
        seeds: seed_list(ctx.seed, a.seeds),
        dual_follows_primal: a.model.dual_lr.is_none(),
    };
    ctx.echo_config(
        "eval-udr",
        &json!({
            "data": a.data,
            "base": base,
            "primal_lrs": grid.primal_lrs,
            "betas": grid.betas,
            "seeds": grid.seeds,
        }),
    )?;
    let inputs = prepare_inputs(&pairs, base.layernorm_input);
    let table = udr_sweep(&inputs, &grid, truth.as_ref().map(|t| &t.delta_c), ctx.threads)?;

    let csv_path = ctx.path("udr.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(["primal_lr", "dual_lr", "beta", "beta_multiplier", "udr", "gt_mcc", "mean_recon", "diverged"])?;
    for c in &table.cells {
        w.write_record([
            c.primal_lr.to_string(),
            c.dual_lr.to_string(),
            c.beta.to_string(),
            c.beta_multiplier.map(|m| m.to_string()).unwrap_or_default(),
            c.udr.to_string(),
            c.gt_mcc_mean.map(|m| m.to_string()).unwrap_or_default(),
            c.mean_recon.to_string(),
            c.diverged.len().to_string(),
        ])?;
    }
    w.flush()?;
    store::write_json(&ctx.path("udr.json"), &table)?;
    let best = table.argmax_udr().expect("non-empty grid");
    let text = format!(
        "wrote {} ({} cells); best UDR {:.4} at primal_lr={} beta={:.4}",
        csv_path.display(),
        table.cells.len(),
        best.udr,
        best.primal_lr,
        best.beta
    );
    ctx.emit(
        "eval-udr",
        text,
        json!({ "csv": csv_path, "best": { "primal_lr": best.primal_lr, "beta": best.beta, "udr": best.udr, "gt_mcc": best.gt_mcc_mean } }),
    )
}

fn sweep_cmd(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let (pairs, truth) = load_pairs(&a.data)?;
    let mut model = a.model.clone();
    model.latent_dim = Some(a.latent_dims[0]);
    let base = model_config(&model, truth.as_ref(), 1.0, ctx.seed)?;
    if a.beta.is_none() && truth.is_none() {
        return Err(usage("--beta is required without a ground-truth sidecar"));
    }
    let seeds = seed_list(ctx.seed, a.seeds);
    ctx.echo_config(
        "sweep",
        &json!({ "data": a.data, "base": base, "latent_dims": a.latent_dims, "seeds": seeds, "beta": a.beta }),
    )?;
    let inputs = prepare_inputs(&pairs, base.layernorm_input);
    let ln = base.layernorm_input;
    let beta_for = |k: usize| match (a.beta, &truth) {
        (Some(b), _) => b,
        (None, Some(t)) => calibrated_beta(&pairs, t, k, ln),
        (None, None) => unreachable!("checked above"),
    };
    let rows = latent_dim_sweep(
        &inputs,
        &base,
        &a.latent_dims,
        &seeds,
        beta_for,
        truth.as_ref().map(|t| &t.delta_c),
        ctx.threads,
    )?;
    let csv_path = ctx.path("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(["latent_dim", "mode", "seed", "beta", "mcc", "final_recon"])?;
    for r in &rows {
        let mode = match r.mode {
            Mode::Ssae => "ssae",
            Mode::Affine => "affine",
        };
        w.write_record([
            r.latent_dim.to_string(),
            mode.to_string(),
            r.seed.to_string(),
            r.beta.to_string(),
            r.mcc.map(|m| m.to_string()).unwrap_or_default(),
            r.final_recon.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let text = format!("wrote {} ({} runs)", csv_path.display(), rows.len());
    ctx.emit("sweep", text, json!({ "csv": csv_path, "rows": rows }))
}

fn steer(ctx: &Ctx, a: SteerArgs) -> Result<()> {
    let (pairs, _) = load_pairs(&a.data)?;
    let labels_file = a.labels.clone().unwrap_or_else(|| store::labels_path(&a.data));
    let labels = store::read_labels(&labels_file).with_context(|| format!("reading {}", labels_file.display()))?;
    if labels.pairs.len() != pairs.len() {
        return Err(ssae::Error::DimensionMismatch(format!(
            "{} labels for {} pairs",
            labels.pairs.len(),
            pairs.len()
        ))
        .into());
    }
    let single = labels.single_concept();
    let keep: Vec<usize> = (0..single.len()).filter(|&i| single[i].is_some()).collect();
    if keep.is_empty() {
        return Err(ssae::Error::EmptyInput("no single-concept pairs in the labels").into());
    }
    let concept_all: Vec<usize> = single.iter().map(|c| c.unwrap_or(usize::MAX)).collect();
    let labeled = LabeledPairs::new(pairs, concept_all)?.subset(&keep)?;
    let num_concepts = labels.concepts.len();
    let (calib, heldout) = labeled.split_calibration(a.calibration_per_concept)?;
    if calib.pairs.is_empty() {
        return Err(usage("--calibration-per-concept must be at least 1"));
    }

    ctx.echo_config(
        "steer",
        &json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "labels": labels_file,
            "calibration_per_concept": a.calibration_per_concept,
            "method": format!("{:?}", a.method),
            "space": format!("{:?}", a.space),
            "ood": a.ood,
        }),
    )?;

    let (vectors, alignment, trained_ln) = match a.method {
        MethodArg::Model => {
            let path = a.checkpoint.as_ref().ok_or_else(|| usage("--checkpoint is required for --method model"))?;
            let ck = load_checkpoint(path)?;
            if ck.params.embed_dim() != calib.pairs.embed_dim() {
                return Err(ssae::Error::DimensionMismatch(format!(
                    "checkpoint expects d_z={}, data has {}",
                    ck.params.embed_dim(),
                    calib.pairs.embed_dim()
                ))
                .into());
            }
            let ln = ck.config.layernorm_input;
            let inputs = prepare_inputs(&calib.pairs, ln);
            let alignment = align_by_labels(&ck.params, &ck.bn, &inputs, &calib.concept, num_concepts)?;
            let mut v = extract_steering_vectors(&ck.params, ck.config.mode.into());
            v.alignment = Some(alignment.clone());
            (v, alignment, ln)
        }
        MethodArg::MeanDifference => {
            let v = mean_difference_vectors(&calib, num_concepts)?;
            debug_assert_eq!(v.provenance, Provenance::MeanDifference);
            (v, (0..num_concepts).collect(), false)
        }
    };
    let space = match a.space {
        SpaceArg::Embedding => SteeringSpace::Embedding,
        SpaceArg::Normalized => SteeringSpace::NormalizedDifference,
        SpaceArg::Auto if trained_ln => SteeringSpace::NormalizedDifference,
        SpaceArg::Auto => SteeringSpace::Embedding,
    };
    let report = calibrated_eval(&vectors, &calib, &heldout, &alignment, space, a.ood)?;
    for k in &report.omitted_concepts {
        eprintln!("warning: no held-out pairs for concept {k}; omitted");
    }
    if let Some(p) = &a.export_vectors {
        store::write_matrix(p, &vectors.vectors)?;
    }
    store::write_json(&ctx.path("steering.json"), &report)?;
    let mut text: Vec<String> = report
        .concepts
        .iter()
        .map(|c| {
            format!(
                "concept {} (column {}, {} pairs): cosine={:.4} raw={:.4} scale={:.4}",
                c.concept, c.column, c.count, c.mean_cosine, c.mean_cosine_raw, c.scale
            )
        })
        .collect();
    text.push(format!("mean cosine={:.4}", report.mean_cosine()));
    ctx.emit("steer", text.join("\n"), serde_json::to_value(&report)?)
}

fn inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    let (text, summary) = match store::sniff(&bytes) {
        Some(ArtifactKind::Pairs) => {
            let h = store::decode_pair_header(&bytes)?;
            let (_, pairs) = store::decode_pairs(&bytes)?;
            let sidecar = store::sidecar_path(&a.path);
            let text = format!(
                "pairs v{}: d_z={} N={} sidecar_flag={} sidecar_present={}",
                h.version,
                h.embed_dim,
                h.num_pairs,
                h.has_ground_truth(),
                sidecar.exists()
            );
            debug_assert_eq!(pairs.len() as u64, h.num_pairs);
            (text, json!({ "kind": "pairs", "header": h, "sidecar_present": sidecar.exists() }))
        }
        Some(ArtifactKind::Checkpoint) => {
            let ck = store::decode_checkpoint(&bytes)?;
            let text = format!(
                "checkpoint: d_z={} k={} mode={:?} bn={} layernorm={} seed={} lambda={}",
                ck.params.embed_dim(),
                ck.params.latent_dim(),
                ck.config.mode,
                ck.bn.enabled,
                ck.config.layernorm_input,
                ck.seed,
                ck.lambda
            );
            let summary = json!({
                "kind": "checkpoint",
                "embed_dim": ck.params.embed_dim(),
                "latent_dim": ck.params.latent_dim(),
                "config": ck.config,
                "lambda": ck.lambda,
                "seed": ck.seed,
            });
            (text, summary)
        }
        Some(ArtifactKind::Matrix) => {
            let m = store::decode_matrix(&bytes)?;
            (
                format!("matrix: {} x {}", m.nrows(), m.ncols()),
                json!({ "kind": "matrix", "rows": m.nrows(), "cols": m.ncols() }),
            )
        }
        Some(ArtifactKind::Json) => inspect_json(&bytes)?,
        None => return Err(ssae::Error::schema(a.path.display().to_string(), "unrecognized artifact").into()),
    };
    ctx.emit("inspect", text, summary)
}

fn inspect_json(bytes: &[u8]) -> Result<(String, serde_json::Value)> {
    let v: serde_json::Value = serde_json::from_slice(bytes).map_err(ssae::Error::from)?;
    if v.get("delta_c").is_some() {
        let gt = store::decode_ground_truth(bytes)?;
        let text = format!(
            "ground truth: N={} concepts={} d_z={} entangler={}",
            gt.delta_c.nrows(),
            gt.num_concepts(),
            gt.mixing.nrows(),
            gt.entangler.is_some()
        );
        let summary = json!({
            "kind": "ground_truth",
            "num_pairs": gt.delta_c.nrows(),
            "num_concepts": gt.num_concepts(),
            "embed_dim": gt.mixing.nrows(),
            "entangled": gt.entangler.is_some(),
        });
        return Ok((text, summary));
    }
    if v.get("concepts").is_some() && v.get("pairs").is_some() {
        let labels = store::decode_labels(bytes)?;
        let single = labels.single_concept().iter().filter(|c| c.is_some()).count();
        let text = format!(
            "labels: {} concepts, {} pairs ({} single-concept)",
            labels.concepts.len(),
            labels.pairs.len(),
            single
        );
        let summary = json!({
            "kind": "labels",
            "concepts": labels.concepts,
            "num_pairs": labels.pairs.len(),
            "single_concept": single,
        });
        return Ok((text, summary));
    }
    let keys: Vec<&String> = v.as_object().map(|o| o.keys().collect()).unwrap_or_default();
    Ok((format!("json report with keys {keys:?}"), json!({ "kind": "json", "keys": keys })))
}
