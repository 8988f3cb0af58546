//! The two L2-parameter procedures built on the t* ~ c / lambda law:
//! measuring c with a cheap large-lambda probe and predicting the optimal
//! coefficient for a budget, and the autol2 dynamic schedule that starts
//! large and decays lambda when the empirical loss stops improving.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::extract_tstar;
use crate::network::MLPModel;
use crate::trainer::{train, MetricsSeries, ScheduleHook, TrainConfig};

/// Probe coefficient measured on a Wide ResNet 28-10 / CIFAR-10 benchmark
/// (momentum 0.9, eta 0.2, data augmentation). Not reproducible at desk
/// scale; kept as a reference input for prediction examples.
pub const WRN_REFERENCE_C: f64 = 0.0066;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeUnits {
    Epochs,
    Steps,
}

impl TimeUnits {
    fn name(self) -> &'static str {
        match self {
            TimeUnits::Epochs => "epochs",
            TimeUnits::Steps => "steps",
        }
    }
}

/// Result of a probe run: c = lambda_probe * t*_probe.
#[derive(Debug, Clone, Copy)]
pub struct CMeasurement {
    pub lambda_probe: f64,
    pub t_star_probe: f64,
    pub c: f64,
    pub units: TimeUnits,
}

/// Measure the time-scaling coefficient by training with a large L2
/// coefficient until test accuracy peaks (no improvement for `patience`
/// consecutive evaluations), then reading off the earliest time within
/// 0.5% of the probe's maximum.
pub fn measure_c(
    model: &MLPModel,
    train_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    lambda_probe: f64,
    patience: usize,
    units: TimeUnits,
) -> Result<(CMeasurement, MetricsSeries)> {
    let mut config = base.clone();
    config.lambda = lambda_probe;
    config.patience = Some(patience);
    let (_, series) = train(model, train_ds, test_ds, &config, None, None)?;

    // a peak only counts if training stopped before exhausting the budget
    // (i.e. accuracy sat below its max for `patience` evaluations)
    let steps_per_epoch = train_ds.len().div_ceil(config.batch_size);
    let budget_steps = steps_per_epoch * config.epochs;
    let last_step = series.records.last().map_or(0, |r| r.step);
    if last_step >= budget_steps {
        return Err(Error::NoPeakInBudget);
    }

    let (t_star, _max_acc) = extract_tstar(&series, 0.005)?;
    let t = match units {
        TimeUnits::Epochs => t_star.epochs,
        TimeUnits::Steps => t_star.step as f64,
    };
    Ok((
        CMeasurement { lambda_probe, t_star_probe: t, c: lambda_probe * t, units },
        series,
    ))
}

/// Build a measurement directly from an existing metrics series (used when
/// the probe run already happened elsewhere).
pub fn c_from_series(series: &MetricsSeries, lambda_probe: f64, units: TimeUnits) -> Result<CMeasurement> {
    let (t_star, _) = extract_tstar(series, 0.005)?;
    let t = match units {
        TimeUnits::Epochs => t_star.epochs,
        TimeUnits::Steps => t_star.step as f64,
    };
    Ok(CMeasurement { lambda_probe, t_star_probe: t, c: lambda_probe * t, units })
}

/// lambda_pred = c / T, the smallest coefficient whose accuracy peak fits
/// inside the budget. With a piecewise learning-rate schedule, pass the
/// first-decay time as `t1` and the prediction becomes c / T1.
pub fn predict_lambda(
    c: &CMeasurement,
    budget: f64,
    budget_units: TimeUnits,
    t1: Option<f64>,
) -> Result<f64> {
    if budget_units != c.units {
        return Err(Error::UnitMismatch { c_units: c.units.name(), t_units: budget_units.name() });
    }
    let horizon = t1.unwrap_or(budget);
    assert!(horizon > 0.0, "budget must be positive");
    Ok(c.c / horizon)
}

#[derive(Debug, Clone)]
pub struct AutoL2Config {
    pub lambda0: f64,
    pub decay_factor: f64,
    /// Steps between measurements of the batch loss/error.
    pub measure_every: usize,
    /// Refractory window after a decay, in units of 1/lambda_new steps.
    pub refractory_constant: f64,
    /// lambda stops decaying below this.
    pub lambda_floor: f64,
}

impl Default for AutoL2Config {
    fn default() -> Self {
        AutoL2Config {
            lambda0: 0.1,
            decay_factor: 10.0,
            measure_every: 10,
            refractory_constant: 0.1,
            lambda_floor: 1e-8,
        }
    }
}

/// State of the dynamic L2 schedule.
///
/// Every `measure_every` steps the hook sees the batch empirical loss and
/// training error. When the current AND the previous measurement of either
/// quantity sit above its running minimum (two in a row, so a single
/// fluctuation never triggers), and the refractory window has passed,
/// lambda decays by `decay_factor` and further decays are forbidden for
/// `refractory_constant / lambda_new` steps. Otherwise the minima absorb
/// the PREVIOUS measurement.
#[derive(Debug, Clone)]
pub struct AutoL2State {
    pub config: AutoL2Config,
    pub current_lambda: f64,
    pub minloss: f64,
    pub minerror: f64,
    /// Step index before which decay is forbidden.
    pub min_step: f64,
    prev: Option<(f64, f64)>,
    /// (step, new lambda) for every decay that fired.
    pub decays: Vec<(usize, f64)>,
}

impl AutoL2State {
    pub fn new(config: AutoL2Config) -> Self {
        let lambda0 = config.lambda0;
        AutoL2State {
            config,
            current_lambda: lambda0,
            minloss: f64::INFINITY,
            minerror: f64::INFINITY,
            min_step: 0.0,
            prev: None,
            decays: Vec::new(),
        }
    }
}

impl ScheduleHook for AutoL2State {
    fn measure_every(&self) -> usize {
        self.config.measure_every
    }

    fn observe(&mut self, step: usize, loss: f64, error: f64) -> f64 {
        let Some((prev_loss, prev_error)) = self.prev else {
            self.prev = Some((loss, error));
            return self.current_lambda;
        };
        let increases = (loss > self.minloss && prev_loss > self.minloss)
            || (error > self.minerror && prev_error > self.minerror);
        let next_lambda = self.current_lambda / self.config.decay_factor;
        if increases && (step as f64) >= self.min_step && next_lambda >= self.config.lambda_floor {
            self.current_lambda = next_lambda;
            // refractory window counts in units of the NEW lambda
            self.min_step = self.config.refractory_constant / self.current_lambda + step as f64;
            self.decays.push((step, self.current_lambda));
        } else {
            self.minloss = self.minloss.min(prev_loss);
            self.minerror = self.minerror.min(prev_error);
        }
        self.prev = Some((loss, error));
        self.current_lambda
    }
}
