mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand};

use l2flow::autoschedule::{measure_c, predict_lambda, AutoL2Config, AutoL2State, TimeUnits};
use l2flow::data::{Dataset, TargetMode};
use l2flow::flow::{
    closed_form_solution, deep_linear_fixed_point, deep_linear_transition_lambda, evolve_ode,
    geometric_grid, loss_peak_time, BetaMode, FlowLoss, FlowProblem, KernelEigensystem,
};
use l2flow::harness::{
    extract_tstar, preset, run_sweep, scaling_report, BudgetPolicy, ModelSpec, PresetName,
    PresetPlan, SweepConfig,
};
use l2flow::linalg::{Mat, SymMatrix};
use l2flow::network::{Activation, MLPModel, Parameterization};
use l2flow::trainer::{train, LrSchedule, Loss, MetricsSeries, TrainConfig};

use config::{resolve, RunConfig};

#[derive(Parser)]
#[command(name = "l2flow", version, about = "L2-regularized training dynamics toolkit")]
struct Cli {
    /// key=value run configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for run artifacts
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    /// Override every seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and kernel computations
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory holding the IDX data files (conventional names)
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the scaling identities of a bias-free model over random draws
    Verify {
        /// Comma-separated layer widths, e.g. 8,16,1
        #[arg(long, default_value = "8,16,16,1")]
        widths: String,
        #[arg(long, default_value = "relu")]
        activation: String,
        /// Number of random (model, input) draws
        #[arg(long, default_value_t = 100)]
        draws: usize,
        /// Set to test the rejection path for biased models
        #[arg(long, default_value_t = false)]
        use_bias: bool,
    },
    /// Evolve the kernel flow and export the trajectory as CSV
    Flow,
    /// One training run with metrics logging
    Train,
    /// (eta, lambda) grid sweep with per-cell budgets and a scaling report
    Sweep,
    /// Training run driven by the dynamic L2 schedule
    Autol2,
    /// Probe-measure the time-scaling coefficient and predict lambda
    PredictLambda,
    /// Deep-linear fixed point vs an actually trained linear network
    Deeplinear,
    /// Emit (or run) a canned experiment
    Preset {
        #[arg(long)]
        name: String,
        /// Execute the preset instead of only writing its config
        #[arg(long, default_value_t = false)]
        run: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // configuration/validation problems exit 2, runtime failures 1
            if is_validation_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_validation_error(e: &anyhow::Error) -> bool {
    use l2flow::Error as E;
    if let Some(core) = e.downcast_ref::<E>() {
        return matches!(
            core,
            E::Config(_)
                | E::UnknownMode(_)
                | E::UnknownPreset(_)
                | E::UnitMismatch { .. }
                | E::SubsetTooLarge { .. }
                | E::DimensionMismatch { .. }
                | E::BiasedModel
        );
    }
    // config-file parse errors are raised as plain anyhow messages
    let msg = format!("{e:#}");
    msg.contains("config") || msg.contains("unknown key") || msg.contains("not a directory")
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("model.seed", seed);
        cfg.set("data.subset_seed", seed);
    }
    if let Some(dir) = &cli.data_dir {
        if !dir.is_dir() {
            bail!("config error: --data-dir `{}` is not a directory", dir.display());
        }
        cfg.set("data.dir", dir.display());
    }

    match &cli.command {
        Command::Verify { widths, activation, draws, use_bias } => {
            cmd_verify(widths, activation, *draws, *use_bias)
        }
        Command::Flow => cmd_flow(&cfg, &cli.out).map(|_| ExitCode::SUCCESS),
        Command::Train => cmd_train(&cfg, &cli.out).map(|_| ExitCode::SUCCESS),
        Command::Sweep => cmd_sweep(&cfg, &cli.out).map(|_| ExitCode::SUCCESS),
        Command::Autol2 => cmd_autol2(&cfg, &cli.out).map(|_| ExitCode::SUCCESS),
        Command::PredictLambda => cmd_predict_lambda(&cfg, &cli.out).map(|_| ExitCode::SUCCESS),
        Command::Deeplinear => cmd_deeplinear(&cfg).map(|_| ExitCode::SUCCESS),
        Command::Preset { name, run } => cmd_preset(&cfg, &cli.out, name, *run).map(|_| ExitCode::SUCCESS),
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| anyhow!("bad width `{t}`: {e}")))
        .collect()
}

fn cmd_verify(widths: &str, activation: &str, draws: usize, use_bias: bool) -> Result<ExitCode> {
    let widths = parse_widths(widths)?;
    let activation: Activation = activation.parse()?;
    if use_bias {
        let m = MLPModel::init(&widths, activation, Parameterization::Ntk, 1.0, 0.5, true, 0);
        match m.euler_residual(&vec![0.1; m.input_dim()], 0) {
            Err(e) => {
                eprintln!("biased model rejected as expected: {e}");
                return Ok(ExitCode::from(2));
            }
            Ok(_) => bail!("biased model was not rejected"),
        }
    }

    let k = widths.len() - 1;
    let (mut worst_euler, mut worst_euler1, mut worst_hom) = (0.0f64, 0.0f64, 0.0f64);
    for draw in 0..draws {
        let m = MLPModel::init(
            &widths,
            activation,
            Parameterization::Ntk,
            2.0_f64.sqrt(),
            0.0,
            false,
            draw as u64,
        );
        let x: Vec<f64> = (0..m.input_dim())
            .map(|j| (0.9 * ((draw * 131 + j * 17) as f64)).sin())
            .collect();
        worst_euler = worst_euler.max(m.euler_residual(&x, 0)?);
        if draw % 10 == 0 {
            worst_euler1 = worst_euler1.max(m.euler_residual(&x, 1)?);
        }
        let a = 0.5 + 1.5 * (0.37 * draw as f64).sin().abs();
        worst_hom = worst_hom.max(m.homogeneity_residual(&x, a)?);
    }
    let euler_ok = worst_euler < 1e-8;
    let euler1_ok = worst_euler1 < 1e-4;
    let hom_ok = worst_hom < 1e-8;
    println!(
        "k={k}, euler residual (order 0) < 1e-8: {} (worst {worst_euler:.3e})",
        pass(euler_ok)
    );
    println!(
        "k={k}, euler residual (order 1, finite differences) < 1e-4: {} (worst {worst_euler1:.3e})",
        pass(euler1_ok)
    );
    println!("k={k}, homogeneity residual < 1e-8: {} (worst {worst_hom:.3e})", pass(hom_ok));
    Ok(if euler_ok && euler1_ok && hom_ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Dataset pair per the config (bundled digit fixtures by default).
fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let source = cfg.get("data.source").unwrap_or("digits");
    let targets: TargetMode = cfg
        .get("data.targets")
        .unwrap_or("onehot")
        .parse()
        ?;
    let (mut train_ds, mut test_ds) = match source {
        "digits" => {
            let dir = match cfg.get("data.dir") {
                Some(d) => PathBuf::from(d),
                None => l2flow::data::find_data_dir()
                    .ok_or_else(|| anyhow!("config error: no data directory found; pass --data-dir"))?,
            };
            Dataset::load_dir(&dir)?
        }
        "synthetic" => {
            let d = cfg.parsed_or("data.synthetic_d", 64usize)?;
            let classes = cfg.parsed_or("data.synthetic_classes", 10usize)?;
            let noise = cfg.parsed_or("data.synthetic_noise", 1.0f64)?;
            let scale = cfg.parsed_or("data.synthetic_scale", 3.0f64)?;
            let seed = cfg.parsed_or("data.synthetic_seed", 0u64)?;
            let train = Dataset::synthetic_classes(2000, d, classes, noise, seed, scale);
            let test = Dataset::synthetic_classes(500, d, classes, noise, seed + 1, scale);
            (train, test)
        }
        other => bail!("config error: unknown data.source `{other}`"),
    };
    if let Some(n) = cfg.parsed::<usize>("data.train_n")? {
        train_ds = train_ds.subset(n, cfg.parsed_or("data.subset_seed", 0u64)?)?;
    }
    if let Some(n) = cfg.parsed::<usize>("data.test_n")? {
        test_ds = test_ds.subset(n, cfg.parsed_or("data.subset_seed", 0u64)?)?;
    }
    train_ds.encode_targets(targets)?;
    test_ds.encode_targets(targets)?;
    Ok((train_ds, test_ds))
}

fn model_spec(cfg: &RunConfig, input_dim: usize, output_dim: usize) -> Result<ModelSpec> {
    let widths = match cfg.get("model.widths") {
        Some(w) => parse_widths(w)?,
        None => vec![input_dim, 2048, 2048, 2048, output_dim],
    };
    if widths[0] != input_dim {
        bail!("config error: model.widths input {} does not match data dimension {input_dim}", widths[0]);
    }
    Ok(ModelSpec {
        layer_widths: widths,
        activation: cfg.get("model.activation").unwrap_or("relu").parse()?,
        parameterization: cfg
            .get("model.parameterization")
            .unwrap_or("standard")
            .parse()
            ?,
        sigma_w: cfg.parsed_or("model.sigma_w", 2.0_f64.sqrt())?,
        sigma_b: cfg.parsed_or("model.sigma_b", 0.0f64)?,
        use_bias: cfg.parsed_or("model.use_bias", false)?,
        init_seed: cfg.parsed_or("model.seed", 0u64)?,
    })
}

fn train_config(cfg: &RunConfig, train_n: usize) -> Result<TrainConfig> {
    let batch = cfg.parsed_or("train.batch_size", train_n)?;
    let epochs = cfg.parsed_or("train.epochs", 100usize)?;
    let loss: Loss = cfg.get("train.loss").unwrap_or("softmax_norm").parse()?;
    let mut config = TrainConfig::new(
        cfg.parsed_or("train.eta", 0.15f64)?,
        cfg.parsed_or("train.lambda", 0.01f64)?,
        batch,
        loss,
        epochs,
    );
    config.momentum = cfg.parsed_or("train.momentum", 0.0f64)?;
    config.eval_every = cfg.parsed_or("train.eval_every", 1usize)?;
    config.patience = cfg.parsed::<usize>("train.patience")?;
    config.seed = cfg.parsed_or("model.seed", 0u64)?;
    if let Some(boundaries) = cfg.list_usize("train.lr_boundaries")? {
        config.lr_schedule = LrSchedule::Piecewise {
            boundaries,
            factor: cfg.parsed_or("train.lr_factor", 0.2f64)?,
        };
    }
    config.validate().map_err(|e| anyhow!("config error: {e}"))?;
    Ok(config)
}

fn write_run_artifacts(out: &Path, cfg: &RunConfig, series: &MetricsSeries, summary: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.snapshot"), cfg.snapshot())?;
    let mut csv = std::fs::File::create(out.join("metrics.csv"))?;
    series.write_csv(&mut csv)?;
    let mut log = String::new();
    for r in &series.records {
        log.push_str(&MetricsSeries::format_record(r));
        log.push('\n');
    }
    std::fs::write(out.join("metrics.log"), log)?;
    std::fs::write(out.join("summary.txt"), summary)?;
    println!("{summary}");
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let spec = model_spec(cfg, train_ds.dim(), target_dim(&train_ds))?;
    let config = train_config(cfg, train_ds.len())?;
    let (_, series) = train(&spec.build(), &train_ds, &test_ds, &config, None, None)?;
    let (t_star, max_acc) = extract_tstar(&series, 0.005)?;
    let summary = format!(
        "train: {} records, max test accuracy {max_acc:.4}, t* = {:.2} epochs (step {})",
        series.records.len(),
        t_star.epochs,
        t_star.step
    );
    write_run_artifacts(out, cfg, &series, &summary)
}

fn target_dim(ds: &Dataset) -> usize {
    ds.targets.as_ref().map_or(10, |t| t.cols())
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let spec = model_spec(cfg, train_ds.dim(), target_dim(&train_ds))?;
    let base = train_config(cfg, train_ds.len())?;
    let etas = cfg.list_f64("sweep.etas")?.unwrap_or_else(|| vec![base.eta]);
    let lambdas = cfg
        .list_f64("sweep.lambdas")?
        .ok_or_else(|| anyhow!("config error: sweep.lambdas is required"))?;
    let kappa = cfg.parsed_or("sweep.kappa", 2.0f64)?;
    let max_epochs = cfg.parsed_or("sweep.max_epochs", 4000usize)?;
    let budget = match cfg.get("sweep.budget").unwrap_or("inverse_eta") {
        "fixed" => BudgetPolicy::Fixed { epochs: base.epochs },
        "inverse" => BudgetPolicy::InverseLambda { kappa, include_eta: false, max_epochs },
        "inverse_eta" => BudgetPolicy::InverseLambda { kappa, include_eta: true, max_epochs },
        other => bail!("config error: unknown sweep.budget `{other}`"),
    };
    let sweep = SweepConfig {
        model: spec,
        base,
        etas: etas.clone(),
        lambdas,
        sigma_ws: cfg.list_f64("sweep.sigma_ws")?,
        budget,
        eval_points: cfg.parsed_or("sweep.eval_points", 256usize)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.snapshot"), cfg.snapshot())?;
    let result = run_sweep(&sweep, &train_ds, &test_ds, Some(out))?;
    println!("{}", SweepResultDisplay(&result));
    for &eta in &etas {
        match scaling_report(&result, eta) {
            Ok(report) => {
                println!(
                    "eta={eta}: t*(lambda) ~ {:.3} * lambda^{:.3} (rms residual {:.3}), plateau spread {:.4} over lambdas {:?}{}",
                    report.fit.coefficient,
                    report.fit.exponent,
                    report.fit.residual,
                    report.plateau_spread,
                    report.plateau_lambdas,
                    report
                        .lambda0_acc
                        .map(|a| format!(", lambda=0 reference acc {a:.4}"))
                        .unwrap_or_default()
                );
            }
            Err(e) => println!("eta={eta}: no scaling report ({e})"),
        }
    }
    Ok(())
}

struct SweepResultDisplay<'a>(&'a l2flow::harness::SweepResult);

impl std::fmt::Display for SweepResultDisplay<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{}", l2flow::harness::SweepResult::CSV_HEADER)?;
        for c in &self.0.cells {
            writeln!(
                f,
                "{},{},{},{:.3},{:.4},{},{},{}",
                c.eta,
                c.lambda,
                c.sigma_w,
                c.t_star_epochs,
                c.max_test_acc,
                c.t_fit_epochs.map_or(String::new(), |t| format!("{t:.2}")),
                c.budget_epochs,
                c.blow_up
            )?;
        }
        Ok(())
    }
}

fn cmd_autol2(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let spec = model_spec(cfg, train_ds.dim(), target_dim(&train_ds))?;
    let mut config = train_config(cfg, train_ds.len())?;
    if let Some(epochs) = cfg.parsed::<usize>("autol2.epochs")? {
        config.epochs = epochs;
    }
    let auto_cfg = AutoL2Config {
        lambda0: cfg.parsed_or("autol2.lambda0", 0.1f64)?,
        decay_factor: cfg.parsed_or("autol2.decay_factor", 10.0f64)?,
        measure_every: cfg.parsed_or("autol2.measure_every", 10usize)?,
        refractory_constant: cfg.parsed_or("autol2.refractory_constant", 0.1f64)?,
        lambda_floor: 1e-8,
    };
    config.lambda = auto_cfg.lambda0;
    let mut hook = AutoL2State::new(auto_cfg);
    let (_, series) = train(&spec.build(), &train_ds, &test_ds, &config, Some(&mut hook), None)?;
    let (t_star, max_acc) = extract_tstar(&series, 0.005)?;
    let summary = format!(
        "autol2: max test accuracy {max_acc:.4}, t* = {:.2} epochs, {} decays, final lambda {:.3e}",
        t_star.epochs,
        hook.decays.len(),
        hook.current_lambda
    );
    std::fs::create_dir_all(out)?;
    let mut lam_csv = format!("step,lambda\n0,{}\n", hook.config.lambda0);
    for (step, lam) in &hook.decays {
        lam_csv.push_str(&format!("{step},{lam}\n"));
    }
    std::fs::write(out.join("lambda_trajectory.csv"), lam_csv)?;
    write_run_artifacts(out, cfg, &series, &summary)
}

fn cmd_predict_lambda(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let spec = model_spec(cfg, train_ds.dim(), target_dim(&train_ds))?;
    let base = train_config(cfg, train_ds.len())?;
    let lambda_probe = cfg.parsed_or("predict.lambda_probe", 0.1f64)?;
    let patience = cfg.parsed_or("predict.patience", 5usize)?;
    let budget = cfg.parsed_or("predict.budget", base.epochs as f64)?;

    let mut probe_cfg = base.clone();
    probe_cfg.lr_schedule = LrSchedule::Constant;
    let (c, probe_series) = measure_c(
        &spec.build(),
        &train_ds,
        &test_ds,
        &probe_cfg,
        lambda_probe,
        patience,
        TimeUnits::Epochs,
    )?;
    let t1 = match (&base.lr_schedule, cfg.parsed::<f64>("predict.t1")?) {
        (_, Some(t1)) => Some(t1),
        (LrSchedule::Piecewise { boundaries, .. }, None) => boundaries.first().map(|&b| b as f64),
        (LrSchedule::Constant, None) => None,
    };
    let lambda_pred = predict_lambda(&c, budget, TimeUnits::Epochs, t1)?;
    let mut summary = format!(
        "probe lambda={lambda_probe}: t*={:.2} epochs, c = {:.4}\npredicted lambda for budget {budget}{}: {lambda_pred:.4e}",
        c.t_star_probe,
        c.c,
        t1.map(|t| format!(" (first LR decay at {t})")).unwrap_or_default(),
    );

    // when a sweep grid is supplied, compare against the tuned value
    if let Some(lambdas) = cfg.list_f64("sweep.lambdas")? {
        let sweep = SweepConfig {
            model: spec,
            base: base.clone(),
            etas: vec![base.eta],
            lambdas,
            sigma_ws: None,
            budget: BudgetPolicy::Fixed { epochs: budget.ceil() as usize },
            eval_points: cfg.parsed_or("sweep.eval_points", 256usize)?,
        };
        let result = run_sweep(&sweep, &train_ds, &test_ds, None)?;
        if let Some(best) = result.best_positive_lambda_cell() {
            let gap = (lambda_pred / best.lambda).log10();
            summary.push_str(&format!(
                "\ntuned lambda (argmax accuracy under the same budget): {} (acc {:.4}); log10(pred/tuned) = {gap:.2}",
                best.lambda, best.max_test_acc
            ));
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.snapshot"), cfg.snapshot())?;
    let mut csv = std::fs::File::create(out.join("probe_metrics.csv"))?;
    probe_series.write_csv(&mut csv)?;
    std::fs::write(out.join("summary.txt"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn cmd_deeplinear(cfg: &RunConfig) -> Result<()> {
    let depth = cfg.parsed_or("deeplinear.depth", 2u32)?;
    let width = cfg.parsed_or("deeplinear.width", 100usize)?;
    let lambda = cfg.parsed_or("deeplinear.lambda", 0.01f64)?;
    let eta = cfg.parsed_or("deeplinear.eta", 0.05f64)?;
    let beta = match cfg.get("deeplinear.beta").unwrap_or("ntk") {
        "ntk" => BetaMode::Ntk,
        "standard" => BetaMode::Standard,
        other => bail!("config error: unknown deeplinear.beta `{other}`"),
    };
    let fp = deep_linear_fixed_point(depth, width, lambda, beta, 1.0, 1.0);
    let gd = train_deep_linear_gd(depth, width, lambda, beta, eta)?;
    println!(
        "fixed point: f = {:.6}{}; algebraic roots: {:?}",
        fp.f,
        if fp.trivial { " (trivial only)" } else { "" },
        fp.roots
    );
    println!("GD-trained network: f = {gd:.6}");
    println!("difference: {:.3e}", (fp.f - gd).abs());
    let lc = deep_linear_transition_lambda(depth, width, beta, 1.0, 1.0);
    println!("trivial/non-trivial transition at lambda ~ {lc:.4e}");
    Ok(())
}

/// Train a bias-free deep linear net on the single sample x = y = 1 by
/// full-batch GD until the output settles.
fn train_deep_linear_gd(depth: u32, width: usize, lambda: f64, beta: BetaMode, eta: f64) -> Result<f64> {
    let mut widths = vec![1usize];
    widths.extend(std::iter::repeat(width).take(depth as usize - 1));
    widths.push(1);
    let parameterization = match beta {
        BetaMode::Ntk => Parameterization::Ntk,
        BetaMode::Standard => Parameterization::Standard,
    };
    let model = MLPModel::init(&widths, Activation::Linear, parameterization, 1.0, 0.0, false, 0);

    let mut ds = Dataset::synthetic_teacher(1, 1, 0, 1.0);
    ds.inputs.as_mut_slice()[0] = 1.0;
    ds.targets.as_mut().unwrap().as_mut_slice()[0] = 1.0;
    ds.labels[0] = 0;

    let steps_budget = ((20.0 / (eta * lambda.max(1e-4))).ceil() as usize).min(2_000_000);
    let mut config = TrainConfig::new(eta, lambda, 1, Loss::Mse, steps_budget);
    config.eval_every = (steps_budget / 200).max(1);
    let (trained, _) = train(&model, &ds, &ds, &config, None, None)?;
    Ok(trained.forward(&[1.0])[0])
}

fn load_kernel_matrix(path: &Path) -> Result<SymMatrix> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split([',', ' ', '\t'])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|e| anyhow!("bad kernel entry `{t}`: {e}")))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mat = Mat::from_rows(&rows)?;
    SymMatrix::new(mat).map_err(anyhow::Error::from)
}

fn cmd_flow(cfg: &RunConfig, out: &Path) -> Result<()> {
    let k = cfg.parsed_or("flow.k", 2u32)?;
    let lambda = cfg.parsed_or("flow.lambda", 0.01f64)?;
    let t_max = cfg.parsed_or("flow.t_max", 2.0 / lambda.max(1e-12))?;
    let loss = match cfg.get("flow.loss").unwrap_or("mse") {
        "mse" => FlowLoss::Mse,
        "logistic_norm" => FlowLoss::LogisticNorm,
        other => bail!("config error: unknown flow.loss `{other}`"),
    };

    // kernel + labels: either a matrix file (labels alternate +-1) or the
    // empirical tangent kernel of a fresh model on the configured data
    let (kernel, y, f0) = match cfg.get("flow.kernel").unwrap_or("empirical") {
        "empirical" => {
            let (train_ds, _) = load_datasets(cfg)?;
            let spec = model_spec(cfg, train_ds.dim(), 1)?;
            let model = spec.build();
            let n = train_ds.len();
            let mut theta = model.empirical_ntk(&train_ds.inputs, 0)?.into_mat();
            // mean-loss convention
            theta.scale_in_place(1.0 / n as f64);
            let kernel = KernelEigensystem::from_kernel(&SymMatrix::symmetrize(theta)?)
                ?;
            let y: Vec<f64> = (0..n).map(|i| train_ds.targets.as_ref().unwrap()[(i, 0)]).collect();
            let f0: Vec<f64> = (0..n).map(|i| model.forward(train_ds.inputs.row(i))[0]).collect();
            (kernel, y, Some(f0))
        }
        spec => {
            let path = spec.strip_prefix("file:").ok_or_else(|| anyhow!("config error: bad flow.kernel"))?;
            let sym = load_kernel_matrix(&resolve(Path::new("."), path))?;
            let n = sym.n();
            let kernel = KernelEigensystem::from_kernel(&sym)?;
            let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            (kernel, y, None)
        }
    };

    let problem = FlowProblem::new(kernel, k, lambda, y, f0, loss)?;
    let grid = if t_max <= 0.0 {
        vec![0.0]
    } else {
        let g_max = problem.kernel.gamma_max().max(1e-12);
        let mut grid = vec![0.0];
        grid.extend(geometric_grid((0.01 / g_max).min(t_max / 10.0), t_max, cfg.parsed_or("flow.points_per_decade", 200usize)?));
        grid
    };
    let solution = match (k, loss) {
        (1, FlowLoss::Mse) => closed_form_solution(&problem, &grid)?,
        (_, FlowLoss::Mse) if lambda > 0.0 => closed_form_solution(&problem, &grid)?,
        _ => evolve_ode(&problem, &grid, None)?,
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.snapshot"), cfg.snapshot())?;
    let mut csv = std::fs::File::create(out.join("flow.csv"))?;
    solution.write_csv(&mut csv)?;

    let min_idx = solution.argmin_loss();
    let late = solution.modes.last().map(|m| m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))).unwrap_or(0.0);
    let t_min_report = match (k, loss) {
        (k, FlowLoss::Mse) if k >= 2 && lambda > 0.0 => match loss_peak_time(&problem) {
            Ok(t) => format!("{t:.4}"),
            Err(e) => format!("none ({e})"),
        },
        _ => format!("grid argmin {:.4}", solution.t_grid[min_idx]),
    };
    let summary = format!(
        "flow: k={k}, lambda={lambda}, N={} modes; loss-min time: {t_min_report}; max |f| at t={t_max}: {late:.3e}",
        problem.n()
    );
    std::fs::write(out.join("summary.txt"), &summary)?;
    println!("{summary}");
    println!("trajectory in {}", out.join("flow.csv").display());
    Ok(())
}

fn cmd_preset(cfg: &RunConfig, out: &Path, name: &str, run: bool) -> Result<()> {
    let preset_name: PresetName = name.parse()?;
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let seed = cfg.parsed_or("model.seed", 0u64)?;
    let plan = preset(preset_name, train_ds.dim(), seed);
    std::fs::create_dir_all(out)?;
    match plan {
        PresetPlan::Sweep { config: sweep, notes } => {
            println!("preset `{name}`: {notes}");
            let desc = format!(
                "etas = {:?}\nlambdas = {:?}\nsigma_ws = {:?}\nbudget = {:?}\nmodel = {:?}\n",
                sweep.etas, sweep.lambdas, sweep.sigma_ws, sweep.budget, sweep.model.layer_widths
            );
            std::fs::write(out.join("preset.txt"), &desc)?;
            if run {
                let result = run_sweep(&sweep, &train_ds, &test_ds, Some(out))?;
                println!("{}", SweepResultDisplay(&result));
            } else {
                println!("{desc}\n(re-run with --run to execute)");
            }
        }
        PresetPlan::TheoryVsExperiment { width, n_samples, eta, lambda, notes } => {
            println!("preset `{name}`: {notes}");
            if run {
                run_theory_vs_experiment(&train_ds, out, width, n_samples, eta, lambda, seed)?;
            } else {
                println!(
                    "width = {width}, samples = {n_samples}, eta = {eta}, lambda = {lambda}\n(re-run with --run to execute)"
                );
            }
        }
    }
    Ok(())
}

/// Train a wide 2-layer relu net on even/odd labels and compare its loss
/// curve against the k = 2 kernel-flow prediction from its own empirical
/// tangent kernel (and the k = 1 static-kernel reference).
fn run_theory_vs_experiment(
    base_ds: &Dataset,
    out: &Path,
    width: usize,
    n_samples: usize,
    eta: f64,
    lambda: f64,
    seed: u64,
) -> Result<()> {
    let mut ds = base_ds.subset(n_samples, seed)?;
    ds.encode_targets(TargetMode::EvenOdd)?;
    let model = MLPModel::init(
        &[ds.dim(), width, 1],
        Activation::Relu,
        Parameterization::Ntk,
        2.0_f64.sqrt(),
        0.0,
        false,
        seed,
    );
    let n = ds.len();
    let mut theta = model.empirical_ntk(&ds.inputs, 0)?.into_mat();
    theta.scale_in_place(1.0 / n as f64);
    let kernel = KernelEigensystem::from_kernel(&SymMatrix::symmetrize(theta)?)
        ?;
    let y: Vec<f64> = (0..n).map(|i| ds.targets.as_ref().unwrap()[(i, 0)]).collect();
    let f0: Vec<f64> = (0..n).map(|i| model.forward(ds.inputs.row(i))[0]).collect();

    let p2 = FlowProblem::new(kernel.clone(), 2, lambda, y.clone(), Some(f0.clone()), FlowLoss::Mse)
        ?;
    let t_min = loss_peak_time(&p2)?;
    let t_max = 1.5 * t_min;
    let steps = (t_max / eta).ceil() as usize;

    let mut config = TrainConfig::new(eta, lambda, n, Loss::Mse, steps);
    config.eval_every = (steps / 400).max(1);
    let (_, series) = train(&model, &ds, &ds, &config, None, None)?;

    let grid: Vec<f64> = series.records.iter().map(|r| r.step as f64 * eta).collect();
    let theory2 = closed_form_solution(&p2, &grid)?;
    let p1 = FlowProblem::new(kernel, 1, lambda, y, Some(f0), FlowLoss::Mse)?;
    let theory1 = closed_form_solution(&p1, &grid)?;

    let mut csv = String::from("t,loss_experiment,loss_k2_theory,loss_k1_theory\n");
    let mut worst: f64 = 0.0;
    for (i, r) in series.records.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            grid[i], r.train_loss, theory2.train_loss[i], theory1.train_loss[i]
        ));
        if grid[i] <= t_min {
            worst = worst.max((r.train_loss - theory2.train_loss[i]).abs() / theory2.train_loss[i].max(1e-12));
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("theory_vs_experiment.csv"), csv)?;
    println!(
        "theory loss-min at t = {t_min:.2}; worst relative loss deviation through the minimum: {:.2}%",
        100.0 * worst
    );
    println!("curves in {}", out.join("theory_vs_experiment.csv").display());
    Ok(())
}
