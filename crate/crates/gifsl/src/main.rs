//! Command-line front end: run the episodic and incremental protocols,
//! ablation sweeps, the gradient-check suite, and synthetic data export.
//!
//! Configuration comes from an optional TOML file whose sections mirror
//! the config structs; command-line flags override file values, and the
//! fully resolved configuration is echoed into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gifsl::data::{self, FeatureDataset, Split};
use gifsl::error::{Error, Result};
use gifsl::losses;
use gifsl::metrics::EpisodeMetrics;
use gifsl::model::{BackboneConfig, ClassifierHead, HeadMode, ModelState};
use gifsl::numcore::{finite_diff_grad, max_rel_err, Matrix, GRADCHECK_H, GRADCHECK_TOL};
use gifsl::phases::{self, PhaseConfig, Regularizer};
use gifsl::protocol::{
    base_label_map, labeled_rows, run_gfsl, run_gfsl_with_curves, run_ifsl, Ablation, CurveSink,
    IfslConfig, ProtocolConfig, LAMBDA_SWEEP_GRID,
};
use gifsl::report::{atomic_write, render_curves_csv, render_episodes_csv, render_report};

const OUTPUT_ROOT_ENV: &str = "GIFSL_OUTPUT_ROOT";
const PHASE1_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DatasetConfig {
    /// Feature file to load; when absent a synthetic dataset is generated.
    path: Option<PathBuf>,
    /// Explicit class-id splits, required when loading from a file.
    base_class_ids: Option<Vec<u32>>,
    validation_ids: Option<Vec<u32>>,
    novel_pool_ids: Option<Vec<u32>>,
    // synthetic generator parameters
    base_classes: usize,
    validation_classes: usize,
    novel_pool_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    cluster_spread: f64,
    data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            base_class_ids: None,
            validation_ids: None,
            novel_pool_ids: None,
            base_classes: 20,
            validation_classes: 0,
            novel_pool_classes: 10,
            dim: 32,
            train_per_class: 50,
            test_per_class: 15,
            cluster_spread: data::DEFAULT_CLUSTER_SPREAD,
            data_seed: 1,
        }
    }
}

impl DatasetConfig {
    /// Produces the (base, validation, novel-pool) datasets.
    fn prepare(&self) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
        if let Some(path) = &self.path {
            let ds = if path.extension().is_some_and(|e| e == "csv") {
                data::load_csv(path)?
            } else {
                data::load_binary(path)?
            };
            let cfg = data::SplitConfig {
                base_class_ids: self.base_class_ids.clone().ok_or_else(|| {
                    Error::Config("base_class_ids required with a dataset path".into())
                })?,
                validation_ids: self.validation_ids.clone().unwrap_or_default(),
                novel_pool_ids: self.novel_pool_ids.clone().ok_or_else(|| {
                    Error::Config("novel_pool_ids required with a dataset path".into())
                })?,
            };
            data::split(&ds, &cfg)
        } else {
            let total = self.base_classes + self.validation_classes + self.novel_pool_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
            let ds = data::generate_synthetic(
                total,
                self.dim,
                self.train_per_class,
                self.test_per_class,
                self.cluster_spread,
                &mut rng,
            )?;
            let b = self.base_classes as u32;
            let v = b + self.validation_classes as u32;
            let cfg = data::SplitConfig {
                base_class_ids: (0..b).collect(),
                validation_ids: (b..v).collect(),
                novel_pool_ids: (v..total as u32).collect(),
            };
            data::split(&ds, &cfg)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelConfig {
    d_hidden: usize,
    d_emb: usize,
    use_bias: bool,
    use_norm: bool,
    head: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_hidden: 64,
            d_emb: 64,
            use_bias: true,
            use_norm: true,
            head: HeadMode::NoBias,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct IfslSection {
    tasks: usize,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    skip_phase2: bool,
    persist_phase3: bool,
    /// Weight-constraint strength of the incremental replay phase.
    phase3_lambda: f64,
    // synthetic defaults sized for the incremental sequence
    base_classes: usize,
    novel_pool_classes: usize,
}

impl Default for IfslSection {
    fn default() -> Self {
        IfslSection {
            tasks: 4,
            n_way: 3,
            k_shot: 5,
            query_per_class: 15,
            skip_phase2: false,
            persist_phase3: false,
            phase3_lambda: 100.0,
            base_classes: 12,
            novel_pool_classes: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ExperimentConfig {
    dataset: DatasetConfig,
    model: ModelConfig,
    phase1: PhaseConfig,
    protocol: ProtocolConfig,
    ifsl: IfslSection,
    ablation: Ablation,
    output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            phase1: PhaseConfig::phase1_default(),
            protocol: ProtocolConfig::synthetic_default(),
            ifsl: IfslSection::default(),
            ablation: Ablation::Default,
            output_dir: None,
        }
    }
}

// ------------------------------------------------------------------- cli

#[derive(Parser)]
#[command(
    name = "gifsl",
    about = "Three-phase generalized/incremental few-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic generalized few-shot evaluation.
    Gfsl(RunArgs),
    /// Sequential incremental few-shot evaluation.
    Ifsl(RunArgs),
    /// Run one or more named pipeline variants and compare them.
    Ablate(AblateArgs),
    /// Compare every analytic gradient against the finite-difference oracle.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic feature dataset file.
    GenData(GenDataArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature dataset path (CSV or binary); omit for synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Force synthetic data even if the config names a path.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    episodes: Option<usize>,
    /// Master seed; per-episode seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Incremental task count (ifsl only).
    #[arg(long)]
    tasks: Option<usize>,
    /// Pipeline variant to run.
    #[arg(long)]
    ablation: Option<String>,
    /// Output directory (default: $GIFSL_OUTPUT_ROOT/<command> or ./runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Variants to run (repeatable); default: the four loss/constraint combinations.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Run every variant.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Clone)]
struct GradcheckArgs {
    /// Deliberately corrupt one analytic gradient (negative control).
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args, Clone)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// "csv" or "binary".
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long, default_value_t = 30)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 15)]
    test_per_class: usize,
    #[arg(long, default_value_t = data::DEFAULT_CLUSTER_SPREAD)]
    spread: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gfsl(args) => cmd_gfsl(&args),
        Command::Ifsl(args) => cmd_ifsl(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::GenData(args) => cmd_gen_data(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

// ------------------------------------------------------------ resolution

fn load_config(args: &RunArgs, command: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?
        }
        None => ExperimentConfig::default(),
    };
    if args.synthetic {
        cfg.dataset.path = None;
    }
    if let Some(p) = &args.data {
        cfg.dataset.path = Some(p.clone());
    }
    if let Some(n) = args.episodes {
        cfg.protocol.episodes = n;
    }
    if let Some(s) = args.seed {
        cfg.protocol.master_seed = s;
    }
    if let Some(n) = args.n_way {
        cfg.protocol.n_way = n;
        cfg.ifsl.n_way = n;
    }
    if let Some(k) = args.k_shot {
        cfg.protocol.k_shot = k;
        cfg.ifsl.k_shot = k;
    }
    if let Some(t) = args.tasks {
        cfg.ifsl.tasks = t;
    }
    if let Some(a) = &args.ablation {
        cfg.ablation = a.parse()?;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command)
        });
    cfg.output_dir = Some(out.clone());
    Ok((cfg, out))
}

fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    atomic_write(&out.join("config.toml"), text.as_bytes())
}

fn backbone_config(model: &ModelConfig, d_in: usize) -> BackboneConfig {
    BackboneConfig {
        d_in,
        d_hidden: model.d_hidden,
        d_emb: model.d_emb,
        use_bias: model.use_bias,
        use_norm: model.use_norm,
    }
}

/// Builds and pretrains the base model; appends the phase-1 loss curve.
fn pretrain(
    cfg: &ExperimentConfig,
    head_mode: HeadMode,
    base: &FeatureDataset,
    curves: &mut CurveSink,
) -> Result<ModelState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.protocol.master_seed ^ PHASE1_SEED_SALT);
    let bcfg = backbone_config(&cfg.model, base.dim());
    let mut model = ModelState::new(&bcfg, head_mode, base.num_classes(), &mut rng);
    let map = base_label_map(base);
    let rows: Vec<usize> = (0..base.len())
        .filter(|&i| base.splits[i] == Split::Train)
        .collect();
    let train = labeled_rows(base, &rows, |c| map[&c]);
    let mut losses = Vec::new();
    let mut obs = |_e: usize, l: f64, _m: &ModelState| losses.push(l);
    phases::run_phase1(&mut model, &train, &cfg.phase1, &mut rng, Some(&mut obs))?;
    curves.push(("phase1_loss".into(), losses));
    Ok(model)
}

// -------------------------------------------------------------- commands

fn cmd_gfsl(args: &RunArgs) -> Result<()> {
    let (mut cfg, out) = load_config(args, "gfsl")?;
    if cfg.ablation == Ablation::LambdaSweep {
        return lambda_sweep(&cfg, &out);
    }
    cfg.ablation.apply(&mut cfg.protocol);
    let head_mode = match cfg.ablation {
        Ablation::Cosine | Ablation::Bias => cfg.ablation.head_mode(),
        _ => cfg.model.head,
    };
    let (base, _val, novel) = cfg.dataset.prepare()?;
    let mut curves: CurveSink = Vec::new();
    let checkpoint = pretrain(&cfg, head_mode, &base, &mut curves)?;
    let outcome =
        run_gfsl_with_curves(&checkpoint, &base, &novel, &cfg.protocol, Some(&mut curves))?;

    let finals: Vec<EpisodeMetrics> = outcome.episodes.iter().map(|e| e.final_metrics).collect();
    atomic_write(
        &out.join("report.txt"),
        render_report(&outcome.aggregate).as_bytes(),
    )?;
    atomic_write(
        &out.join("report_phase2.txt"),
        render_report(&outcome.aggregate_after_phase2).as_bytes(),
    )?;
    atomic_write(
        &out.join("episodes.csv"),
        render_episodes_csv(&finals).as_bytes(),
    )?;
    atomic_write(
        &out.join("curves.csv"),
        render_curves_csv(&curves).as_bytes(),
    )?;
    echo_config(&cfg, &out)?;
    println!("{}", render_report(&outcome.aggregate));
    Ok(())
}

fn ifsl_config(cfg: &ExperimentConfig) -> IfslConfig {
    let mut phase3 = cfg.protocol.phase3.clone();
    phase3.regularizer = Regularizer::WeightConstraint;
    phase3.lambda = cfg.ifsl.phase3_lambda;
    IfslConfig {
        tasks: cfg.ifsl.tasks,
        n_way: cfg.ifsl.n_way,
        k_shot: cfg.ifsl.k_shot,
        query_per_class: cfg.ifsl.query_per_class,
        master_seed: cfg.protocol.master_seed,
        skip_phase2: cfg.ifsl.skip_phase2,
        persist_phase3: cfg.ifsl.persist_phase3,
        phase2: cfg.protocol.phase2.clone(),
        phase3,
    }
}

fn cmd_ifsl(args: &RunArgs) -> Result<()> {
    let (mut cfg, out) = load_config(args, "ifsl")?;
    // the incremental sequence needs a larger novel pool than the default
    // episodic split; resize only when generating synthetic data
    if cfg.dataset.path.is_none() {
        cfg.dataset.base_classes = cfg.ifsl.base_classes;
        cfg.dataset.novel_pool_classes = cfg.ifsl.novel_pool_classes;
    }
    if cfg.ablation == Ablation::SkipPhase2 {
        cfg.ifsl.skip_phase2 = true;
    }
    let (base, _val, novel) = cfg.dataset.prepare()?;
    let mut curves: CurveSink = Vec::new();
    let checkpoint = pretrain(&cfg, cfg.model.head, &base, &mut curves)?;
    let icfg = ifsl_config(&cfg);
    let reports = run_ifsl(&checkpoint, &base, &novel, &icfg)?;

    let mut report = String::new();
    let mut csv =
        String::from("task,joint_dim,b_over_b,n_over_n,b_over_j,n_over_j,j_over_j,hm,am\n");
    report.push_str(&format!(
        "base_joint_dim {}\n",
        checkpoint.num_joint_classes()
    ));
    for r in &reports {
        report.push_str(&format!("task {}\n", r.task));
        report.push_str(&format!("joint_dim {}\n", r.joint_dim));
        csv.push_str(&format!("{},{}", r.task, r.joint_dim));
        for (key, v) in r.metrics.fields() {
            report.push_str(&format!("{key} {v:.6}\n"));
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
    }
    atomic_write(&out.join("report.txt"), report.as_bytes())?;
    atomic_write(&out.join("tasks.csv"), csv.as_bytes())?;
    atomic_write(
        &out.join("curves.csv"),
        render_curves_csv(&curves).as_bytes(),
    )?;
    echo_config(&cfg, &out)?;
    println!("{report}");
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.run, "ablate")?;
    let variants: Vec<Ablation> = if args.all {
        Ablation::ALL
            .into_iter()
            .filter(|a| *a != Ablation::LambdaSweep)
            .collect()
    } else if args.variants.is_empty() {
        vec![
            Ablation::Default,
            Ablation::NoCeBn,
            Ablation::NoWc,
            Ablation::Neither,
        ]
    } else {
        args.variants
            .iter()
            .map(|v| v.parse())
            .collect::<Result<_>>()?
    };

    let (base, _val, novel) = cfg.dataset.prepare()?;
    let mut csv = String::from("ablation,hm,am,b_over_b,n_over_n,b_over_j,n_over_j,j_over_j\n");
    // checkpoints are shared across variants with the same head mode
    let mut checkpoints: Vec<(HeadMode, ModelState)> = Vec::new();
    for variant in &variants {
        let head_mode = match variant {
            Ablation::Cosine | Ablation::Bias => variant.head_mode(),
            _ => cfg.model.head,
        };
        if !checkpoints.iter().any(|(m, _)| *m == head_mode) {
            let mut curves = Vec::new();
            let ckpt = pretrain(&cfg, head_mode, &base, &mut curves)?;
            checkpoints.push((head_mode, ckpt));
        }
        let checkpoint = &checkpoints.iter().find(|(m, _)| *m == head_mode).unwrap().1;
        let mut pcfg = cfg.protocol.clone();
        variant.apply(&mut pcfg);
        let outcome = run_gfsl(checkpoint, &base, &novel, &pcfg)?;
        let a = &outcome.aggregate;
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            variant.name(),
            a.hm.mean,
            a.am.mean,
            a.b_over_b.mean,
            a.n_over_n.mean,
            a.b_over_j.mean,
            a.n_over_j.mean,
            a.j_over_j.mean,
        ));
    }
    atomic_write(&out.join("ablations.csv"), csv.as_bytes())?;
    echo_config(&cfg, &out)?;
    println!("{csv}");
    Ok(())
}

/// End-of-calibration metrics across the weight-constraint strength grid.
fn lambda_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (base, _val, novel) = cfg.dataset.prepare()?;
    let mut curves = Vec::new();
    let checkpoint = pretrain(cfg, cfg.model.head, &base, &mut curves)?;
    let mut csv = String::from("lambda,b_over_b,n_over_n,n_over_j,hm,displacement_sq\n");
    for &lambda in &LAMBDA_SWEEP_GRID {
        let mut pcfg = cfg.protocol.clone();
        pcfg.run_phase3 = false;
        pcfg.phase2.regularizer = Regularizer::WeightConstraint;
        pcfg.phase2.lambda = lambda;
        let outcome = run_gfsl(&checkpoint, &base, &novel, &pcfg)?;
        let a = &outcome.aggregate_after_phase2;
        let disp = outcome
            .episodes
            .iter()
            .map(|e| e.displacement_sq)
            .sum::<f64>()
            / outcome.episodes.len() as f64;
        csv.push_str(&format!(
            "{lambda},{:.6},{:.6},{:.6},{:.6},{disp:.6e}\n",
            a.b_over_b.mean, a.n_over_n.mean, a.n_over_j.mean, a.hm.mean,
        ));
    }
    atomic_write(&out.join("lambda_sweep.csv"), csv.as_bytes())?;
    echo_config(cfg, out)?;
    println!("{csv}");
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let ds = data::generate_synthetic(
        args.classes,
        args.dim,
        args.train_per_class,
        args.test_per_class,
        args.spread,
        &mut rng,
    )?;
    match args.format.as_str() {
        "csv" => data::save_csv(&args.out, &ds),
        "binary" | "bin" => data::save_binary(&args.out, &ds),
        other => Err(Error::Config(format!("unknown format {other:?}"))),
    }
}

// ------------------------------------------------------------- gradcheck

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let checks = gradient_checks(args.corrupt);
    let mut ok = true;
    println!("{:<40} {:>12}  status", "check", "max_rel_err");
    for (name, err) in checks {
        let pass = err < GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{name:<40} {err:>12.3e}  {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "one or more gradient checks exceeded tolerance".into(),
        ))
    }
}

fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
}

fn gradient_checks(corrupt: bool) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let mut out = Vec::new();

    // softmax cross-entropy w.r.t. logits
    {
        let logits = random_logits(&mut rng, 4, 5);
        let targets = [1usize, 0, 4, 2];
        let (_, mut grad) = losses::softmax_ce(&logits, &targets).unwrap();
        if corrupt {
            grad.set(0, 0, grad.get(0, 0) + 0.5);
        }
        let numeric = finite_diff_grad(
            |l| losses::softmax_ce(l, &targets).unwrap().0,
            &logits,
            GRADCHECK_H,
        )
        .unwrap();
        out.push(("softmax_ce/logits".into(), max_rel_err(&grad, &numeric)));
    }

    // base-normalized cross-entropy w.r.t. both logit blocks
    {
        let novel = random_logits(&mut rng, 4, 5);
        let base = random_logits(&mut rng, 4, 7);
        let targets = [2usize, 2, 0, 4];
        let (_, d_novel, d_base) = losses::base_normalized_ce(&novel, &base, &targets).unwrap();
        let n_num = finite_diff_grad(
            |l| losses::base_normalized_ce(l, &base, &targets).unwrap().0,
            &novel,
            GRADCHECK_H,
        )
        .unwrap();
        let b_num = finite_diff_grad(
            |l| losses::base_normalized_ce(&novel, l, &targets).unwrap().0,
            &base,
            GRADCHECK_H,
        )
        .unwrap();
        out.push((
            "base_normalized_ce/novel_logits".into(),
            max_rel_err(&d_novel, &n_num),
        ));
        out.push((
            "base_normalized_ce/base_logits".into(),
            max_rel_err(&d_base, &b_num),
        ));
    }

    // squared-L2 weight constraint w.r.t. current parameters
    {
        let prev = random_logits(&mut rng, 3, 4);
        let cur = random_logits(&mut rng, 3, 4);
        let (_, grads) = losses::l2_wc(&[&cur], &[&prev]).unwrap();
        let numeric = finite_diff_grad(
            |c| losses::l2_wc(&[c], &[&prev]).unwrap().0,
            &cur,
            GRADCHECK_H,
        )
        .unwrap();
        out.push(("l2_wc/current".into(), max_rel_err(&grads[0], &numeric)));
    }

    // combined calibration loss w.r.t. constrained parameters
    {
        let novel = random_logits(&mut rng, 3, 4);
        let base = random_logits(&mut rng, 3, 6);
        let targets = [0usize, 2, 3];
        let prev = random_logits(&mut rng, 2, 3);
        let cur = prev.map(|v| v + 0.01);
        let lambda = 500.0;
        let (_, _, _, grads) =
            losses::phase2_loss(&novel, &base, &targets, &[&cur], &[&prev], lambda).unwrap();
        let numeric = finite_diff_grad(
            |c| {
                losses::phase2_loss(&novel, &base, &targets, &[c], &[&prev], lambda)
                    .unwrap()
                    .0
            },
            &cur,
            GRADCHECK_H,
        )
        .unwrap();
        out.push((
            "phase2_loss/constrained_params".into(),
            max_rel_err(&grads[0], &numeric),
        ));
    }

    // distillation loss w.r.t. current logits
    {
        let cur = random_logits(&mut rng, 4, 6);
        let old = random_logits(&mut rng, 4, 6);
        let (_, grad) = losses::kd_kl(&cur, &old, losses::DEFAULT_KD_TEMPERATURE).unwrap();
        let numeric = finite_diff_grad(
            |c| {
                losses::kd_kl(c, &old, losses::DEFAULT_KD_TEMPERATURE)
                    .unwrap()
                    .0
            },
            &cur,
            GRADCHECK_H,
        )
        .unwrap();
        out.push(("kd_kl/current_logits".into(), max_rel_err(&grad, &numeric)));
    }

    // full backbone, with and without the normalization layer
    for use_norm in [false, true] {
        let cfg = BackboneConfig {
            d_in: 5,
            d_hidden: 6,
            d_emb: 4,
            use_bias: true,
            use_norm,
        };
        let backbone = gifsl::model::Backbone::new(&cfg, &mut rng);
        let x = random_logits(&mut rng, 6, 5);
        // scalar probe: half the squared Frobenius norm of the embedding
        let loss_of = |b: &gifsl::model::Backbone| {
            let mut b = b.clone();
            let (emb, _) = b.forward(&x, true).unwrap();
            0.5 * emb.frobenius_sq()
        };
        let mut work = backbone.clone();
        work.zero_grad();
        let (emb, tape) = work.forward(&x, true).unwrap();
        work.backward(&tape, &emb).unwrap();
        let mut worst = 0.0f64;
        let n_params = work.params_mut().len();
        for idx in 0..n_params {
            let analytic = work.params_mut()[idx].grad.clone();
            let value = work.params_mut()[idx].value.clone();
            let numeric = finite_diff_grad(
                |candidate| {
                    let mut probe = backbone.clone();
                    probe.params_mut()[idx].value = candidate.clone();
                    loss_of(&probe)
                },
                &value,
                GRADCHECK_H,
            )
            .unwrap();
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
        let label = if use_norm {
            "backbone/with_norm"
        } else {
            "backbone/linear"
        };
        out.push((label.into(), worst));
    }

    // classifier heads, all modes, w.r.t. weights and embeddings
    for mode in [HeadMode::NoBias, HeadMode::Bias, HeadMode::Cosine] {
        let head = ClassifierHead::new(mode, 3, 4, &mut rng);
        let emb = random_logits(&mut rng, 5, 4);
        let loss_weights = |w: &Matrix| {
            let mut h = head.clone();
            h.weights.value = w.clone();
            let (logits, _) = h.forward(&emb).unwrap();
            0.5 * logits.frobenius_sq()
        };
        let mut work = head.clone();
        work.zero_grad();
        let (logits, cache) = work.forward(&emb).unwrap();
        let d_emb = work.backward(&cache, &logits).unwrap();
        let w_num = finite_diff_grad(&loss_weights, &head.weights.value, GRADCHECK_H).unwrap();
        let mut worst = max_rel_err(&work.weights.grad, &w_num);
        let loss_emb = |e: &Matrix| {
            let (logits, _) = head.forward(e).unwrap();
            0.5 * logits.frobenius_sq()
        };
        let e_num = finite_diff_grad(&loss_emb, &emb, GRADCHECK_H).unwrap();
        worst = worst.max(max_rel_err(&d_emb, &e_num));
        let label = match mode {
            HeadMode::NoBias => "head/no_bias",
            HeadMode::Bias => "head/bias",
            HeadMode::Cosine => "head/cosine",
        };
        out.push((label.into(), worst));
    }

    out
}
