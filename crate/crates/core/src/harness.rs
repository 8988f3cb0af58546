//! Experiment orchestration: (eta, lambda) grid sweeps with per-cell
//! budgets, t* extraction, power-law fits of t*(lambda), plateau summaries,
//! and canned experiment presets. Cells are independent runs and execute on
//! the worker pool; results do not depend on scheduling.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Activation, MLPModel, Parameterization};
use crate::numerics::{fit_power_law, PowerLawFit};
use crate::parallel::map_items;
use crate::trainer::{train, Loss, MetricsSeries, TrainConfig};

/// Earliest time within tolerance of the maximum test accuracy.
#[derive(Debug, Clone, Copy)]
pub struct TStar {
    pub step: usize,
    pub epochs: f64,
}

/// Scan a metrics series for the maximum test accuracy and the earliest
/// evaluation within `tol` (absolute accuracy points) of it.
pub fn extract_tstar(series: &MetricsSeries, tol: f64) -> Result<(TStar, f64)> {
    if series.records.is_empty() {
        return Err(Error::InsufficientCells { needed: 1, found: 0 });
    }
    let max_acc = series.max_test_accuracy();
    let hit = series
        .records
        .iter()
        .find(|r| r.test_accuracy >= max_acc - tol)
        .expect("max exists, so some record is within tolerance");
    Ok((TStar { step: hit.step, epochs: hit.epoch }, max_acc))
}

/// Model construction recipe shared by every cell of a sweep (same init
/// seed everywhere, so cells differ only in their hyperparameters).
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub use_bias: bool,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn build(&self) -> MLPModel {
        MLPModel::init(
            &self.layer_widths,
            self.activation,
            self.parameterization,
            self.sigma_w,
            self.sigma_b,
            self.use_bias,
            self.init_seed,
        )
    }

    pub fn with_sigma_w(&self, sigma_w: f64) -> ModelSpec {
        ModelSpec { sigma_w, ..self.clone() }
    }
}

/// Per-cell training budget.
#[derive(Debug, Clone, Copy)]
pub enum BudgetPolicy {
    Fixed { epochs: usize },
    /// epochs = kappa / lambda, or kappa / (eta * lambda) when
    /// `include_eta` (the vanilla-SGD convention). Clamped to
    /// [1, max_epochs].
    InverseLambda { kappa: f64, include_eta: bool, max_epochs: usize },
}

impl BudgetPolicy {
    pub fn epochs_for(&self, eta: f64, lambda: f64) -> usize {
        match *self {
            BudgetPolicy::Fixed { epochs } => epochs,
            BudgetPolicy::InverseLambda { kappa, include_eta, max_epochs } => {
                assert!(lambda > 0.0, "inverse-lambda budget needs lambda > 0");
                let denom = if include_eta { eta * lambda } else { lambda };
                ((kappa / denom).ceil() as usize).clamp(1, max_epochs)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub model: ModelSpec,
    /// Template config; eta/lambda (and sigma_w) are overridden per cell.
    pub base: TrainConfig,
    pub etas: Vec<f64>,
    /// May contain 0.0: reference cells trained for (at least) the longest
    /// budget of any lambda > 0 cell.
    pub lambdas: Vec<f64>,
    /// Extra sweep axis for initialization-scale studies; `None` keeps the
    /// model spec's sigma_w.
    pub sigma_ws: Option<Vec<f64>>,
    pub budget: BudgetPolicy,
    /// Target number of evaluation records per run.
    pub eval_points: usize,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub eta: f64,
    pub lambda: f64,
    pub sigma_w: f64,
    pub budget_epochs: usize,
    pub t_star_epochs: f64,
    pub t_star_step: usize,
    pub max_test_acc: f64,
    pub t_fit_epochs: Option<f64>,
    pub blow_up: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str =
        "eta,lambda,sigma_w,t_star,max_acc,t_fit,budget,blow_up";

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.eta,
                c.lambda,
                c.sigma_w,
                c.t_star_epochs,
                c.max_test_acc,
                c.t_fit_epochs.map_or(String::from(""), |t| t.to_string()),
                c.budget_epochs,
                c.blow_up
            )?;
        }
        Ok(())
    }

    /// Highest max-test-accuracy cell with lambda > 0.
    pub fn best_positive_lambda_cell(&self) -> Option<&SweepCell> {
        self.cells
            .iter()
            .filter(|c| !c.blow_up && c.lambda > 0.0)
            .max_by(|a, b| a.max_test_acc.partial_cmp(&b.max_test_acc).unwrap())
    }
}

/// Run one training cell and summarize it.
fn run_cell(
    spec: &ModelSpec,
    base: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    eta: f64,
    lambda: f64,
    sigma_w: f64,
    budget_epochs: usize,
    eval_points: usize,
    out_dir: Option<&Path>,
) -> Result<SweepCell> {
    let model = spec.with_sigma_w(sigma_w).build();
    let steps_per_epoch = train_ds.len().div_ceil(base.batch_size);
    let total_steps = steps_per_epoch * budget_epochs;
    let mut config = base.clone();
    config.eta = eta;
    config.lambda = lambda;
    config.epochs = budget_epochs;
    config.eval_every = (total_steps / eval_points.max(1)).max(1);

    let cell = match train(&model, train_ds, test_ds, &config, None, None) {
        Ok((_, series)) => {
            let (t_star, max_acc) = extract_tstar(&series, 0.005)?;
            if let Some(dir) = out_dir {
                let mut f = std::fs::File::create(dir.join(format!(
                    "cell_eta{eta}_lambda{lambda}_sw{sigma_w}.csv"
                )))?;
                series.write_csv(&mut f)?;
            }
            SweepCell {
                eta,
                lambda,
                sigma_w,
                budget_epochs,
                t_star_epochs: t_star.epochs,
                t_star_step: t_star.step,
                max_test_acc: max_acc,
                t_fit_epochs: series.time_to_fit_epochs(),
                blow_up: false,
            }
        }
        Err(Error::TrainBlowUp { .. }) => SweepCell {
            eta,
            lambda,
            sigma_w,
            budget_epochs,
            t_star_epochs: 0.0,
            t_star_step: 0,
            max_test_acc: 0.0,
            t_fit_epochs: None,
            blow_up: true,
        },
        Err(e) => return Err(e),
    };
    Ok(cell)
}

/// Run every (eta, lambda[, sigma_w]) cell of the grid. Cells share the
/// model init seed; blow-ups are recorded and the sweep continues.
pub fn run_sweep(
    config: &SweepConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    assert!(!config.etas.is_empty() && !config.lambdas.is_empty(), "empty sweep grid");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let sigma_ws = config.sigma_ws.clone().unwrap_or_else(|| vec![config.model.sigma_w]);

    // lambda = 0 reference cells run at least as long as the longest
    // regularized cell
    let max_budget = config
        .etas
        .iter()
        .flat_map(|&eta| {
            config
                .lambdas
                .iter()
                .filter(|&&l| l > 0.0)
                .map(move |&l| config.budget.epochs_for(eta, l))
        })
        .max()
        .unwrap_or(1);

    let mut cell_specs = Vec::new();
    for &eta in &config.etas {
        for &lambda in &config.lambdas {
            for &sw in &sigma_ws {
                let budget = if lambda > 0.0 {
                    config.budget.epochs_for(eta, lambda)
                } else {
                    max_budget
                };
                cell_specs.push((eta, lambda, sw, budget));
            }
        }
    }

    let cells: Result<Vec<SweepCell>> = map_items(&cell_specs, |&(eta, lambda, sw, budget)| {
        run_cell(
            &config.model,
            &config.base,
            train_ds,
            test_ds,
            eta,
            lambda,
            sw,
            budget,
            config.eval_points,
            out_dir,
        )
    })
    .into_iter()
    .collect();
    let result = SweepResult { cells: cells? };
    if let Some(dir) = out_dir {
        let mut f = std::fs::File::create(dir.join("grid.csv"))?;
        result.write_csv(&mut f)?;
    }
    Ok(result)
}

/// Power-law fit of t*(lambda) at a fixed learning rate plus the
/// small-lambda accuracy plateau summary.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub fit: PowerLawFit,
    /// max - min of max_test_acc over the two smallest decades of lambda.
    pub plateau_spread: f64,
    /// The lambdas included in the plateau band.
    pub plateau_lambdas: Vec<f64>,
    /// Reference accuracy of the lambda = 0 cell, when present.
    pub lambda0_acc: Option<f64>,
}

pub fn scaling_report(result: &SweepResult, eta: f64) -> Result<ScalingReport> {
    let good: Vec<&SweepCell> = result
        .cells
        .iter()
        .filter(|c| c.eta == eta && c.lambda > 0.0 && !c.blow_up && c.t_star_epochs > 0.0)
        .collect();
    if good.len() < 3 {
        return Err(Error::InsufficientCells { needed: 3, found: good.len() });
    }
    let points: Vec<(f64, f64)> = good.iter().map(|c| (c.lambda, c.t_star_epochs)).collect();
    let fit = fit_power_law(&points)?;

    let lambda_min = good.iter().map(|c| c.lambda).fold(f64::INFINITY, f64::min);
    let band: Vec<&&SweepCell> = good.iter().filter(|c| c.lambda <= 100.0 * lambda_min).collect();
    let accs: Vec<f64> = band.iter().map(|c| c.max_test_acc).collect();
    let spread = accs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - accs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let lambda0_acc = result
        .cells
        .iter()
        .filter(|c| c.eta == eta && c.lambda == 0.0 && !c.blow_up)
        .map(|c| c.max_test_acc)
        .fold(None, |best: Option<f64>, acc| Some(best.map_or(acc, |b| b.max(acc))));
    Ok(ScalingReport {
        fit,
        plateau_spread: spread,
        plateau_lambdas: band.iter().map(|c| c.lambda).collect(),
        lambda0_acc,
    })
}

/// Canned experiments at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    /// MSE at aggressive learning rates: accuracy-at-fit varies with eta,
    /// accuracy at t* flattens out.
    Catapult,
    /// Initialization-scale sweep: late-time accuracy depends only mildly
    /// on sigma_w.
    SigmaW,
    /// Epochs to reach training accuracy 1 scale like 1/eta at small eta.
    TimeToFit,
    /// Wide 2-layer net vs the kernel-flow prediction on its own empirical
    /// tangent kernel.
    TheoryVsExperiment,
}

impl std::str::FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "catapult" => Ok(PresetName::Catapult),
            "sigma_w" => Ok(PresetName::SigmaW),
            "time_to_fit" => Ok(PresetName::TimeToFit),
            "theory_vs_experiment" => Ok(PresetName::TheoryVsExperiment),
            other => Err(Error::UnknownPreset(other.into())),
        }
    }
}

/// A ready-to-run experiment recipe.
#[derive(Debug, Clone)]
pub enum PresetPlan {
    Sweep { config: SweepConfig, notes: &'static str },
    TheoryVsExperiment { width: usize, n_samples: usize, eta: f64, lambda: f64, notes: &'static str },
}

/// Build the desk-scale recipe for a named experiment on `input_dim`-dimensional
/// data with 10 classes.
pub fn preset(name: PresetName, input_dim: usize, seed: u64) -> PresetPlan {
    let fc_spec = ModelSpec {
        layer_widths: vec![input_dim, 2048, 2048, 2048, 10],
        activation: Activation::Relu,
        parameterization: Parameterization::Standard,
        sigma_w: 2.0_f64.sqrt(),
        sigma_b: 0.0,
        use_bias: false,
        init_seed: seed,
    };
    match name {
        PresetName::Catapult => PresetPlan::Sweep {
            config: SweepConfig {
                model: fc_spec,
                base: TrainConfig::new(0.1, 0.01, 512, Loss::Mse, 1),
                etas: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
                lambdas: vec![0.01],
                sigma_ws: None,
                budget: BudgetPolicy::InverseLambda { kappa: 1.0, include_eta: true, max_epochs: 4000 },
                eval_points: 256,
            },
            notes: "MSE loss; compare accuracy at first train-accuracy-1 epoch \
                    (strong eta dependence) against accuracy at t* (flat in eta)",
        },
        PresetName::SigmaW => PresetPlan::Sweep {
            config: SweepConfig {
                model: fc_spec,
                base: TrainConfig::new(0.15, 0.01, 512, Loss::SoftmaxNorm, 1),
                etas: vec![0.15],
                lambdas: vec![0.01],
                sigma_ws: Some(vec![1.0, 2.0_f64.sqrt(), 2.0]),
                budget: BudgetPolicy::InverseLambda { kappa: 2.0, include_eta: true, max_epochs: 4000 },
                eval_points: 256,
            },
            notes: "late-time accuracies across init scales should sit in a narrow band",
        },
        PresetName::TimeToFit => PresetPlan::Sweep {
            config: SweepConfig {
                model: fc_spec,
                base: TrainConfig::new(0.1, 1e-4, 512, Loss::SoftmaxNorm, 1),
                etas: vec![0.025, 0.05, 0.1, 0.2, 0.4],
                lambdas: vec![1e-4],
                sigma_ws: None,
                budget: BudgetPolicy::Fixed { epochs: 1200 },
                eval_points: 512,
            },
            notes: "t_fit * eta approximately constant across small eta",
        },
        PresetName::TheoryVsExperiment => PresetPlan::TheoryVsExperiment {
            width: 10_000,
            n_samples: 200,
            eta: 0.01,
            lambda: 0.002,
            notes: "train a wide 2-layer relu net on even/odd labels with MSE and \
                    compare its loss curve against the k=2 kernel-flow prediction \
                    from its own empirical tangent kernel",
        },
    }
}
