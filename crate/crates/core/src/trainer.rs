//! Finite-width training loop: (mini-batch) gradient descent with optional
//! momentum, an L2 term on all weights, MSE and normalized-softmax losses,
//! piecewise learning-rate schedules, and per-step metrics logging.
//!
//! Runs are deterministic per seed: batch order comes from a stream seeded
//! by (run seed, epoch index), and every floating-point reduction has a
//! fixed order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, TargetMode};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::network::{ForwardCache, GradientBundle, MLPModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    /// Cross-entropy scaled by 1/(2 C |B|): minus the mean one-hot
    /// log-probability with an extra 1/(2C) factor.
    SoftmaxNorm,
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "softmax_norm" => Ok(Loss::SoftmaxNorm),
            other => Err(Error::UnknownMode(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply eta by `factor` at the start of each boundary epoch.
    Piecewise { boundaries: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    /// The classic step schedule: decay by `factor` at 0.3T, 0.6T, 0.9T.
    pub fn thirds(total_epochs: usize, factor: f64) -> LrSchedule {
        let b = |f: f64| ((total_epochs as f64) * f).round() as usize;
        LrSchedule::Piecewise { boundaries: vec![b(0.3), b(0.6), b(0.9)], factor }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub eta: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: Loss,
    pub epochs: usize,
    pub lr_schedule: LrSchedule,
    /// Steps between metric records (each record carries a test evaluation).
    pub eval_every: usize,
    /// Stop when test accuracy has not improved for this many consecutive
    /// records.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(eta: f64, lambda: f64, batch_size: usize, loss: Loss, epochs: usize) -> Self {
        TrainConfig {
            eta,
            lambda,
            momentum: 0.0,
            batch_size,
            loss,
            epochs,
            lr_schedule: LrSchedule::Constant,
            eval_every: 1,
            patience: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, eval_every and epochs must be >= 1".into()));
        }
        if let LrSchedule::Piecewise { boundaries, .. } = &self.lr_schedule {
            if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("lr boundaries must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// One evaluation point. `wall_time` is excluded from determinism
/// comparisons; everything else is bit-stable per seed.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: f64,
    /// Empirical loss on the step's batch, without the L2 term.
    pub train_loss: f64,
    /// (lambda/2) |theta|^2 at the current lambda.
    pub l2_term: f64,
    /// Classification error on the step's batch.
    pub train_error: f64,
    pub test_accuracy: f64,
    pub lambda: f64,
    pub eta: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsSeries {
    pub records: Vec<MetricsRecord>,
}

impl MetricsSeries {
    pub const CSV_HEADER: &'static str =
        "step,epoch,train_loss,l2_term,train_error,test_accuracy,lambda,eta,wall_time";

    pub fn max_test_accuracy(&self) -> f64 {
        self.records.iter().map(|r| r.test_accuracy).fold(f64::NEG_INFINITY, f64::max)
    }

    /// First epoch at which the batch training error hits zero.
    pub fn time_to_fit_epochs(&self) -> Option<f64> {
        self.records.iter().find(|r| r.train_error == 0.0).map(|r| r.epoch)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.step, r.epoch, r.train_loss, r.l2_term, r.train_error, r.test_accuracy,
                r.lambda, r.eta, r.wall_time
            )?;
        }
        Ok(())
    }

    /// One `key=value` line per record, for streaming consumers.
    pub fn format_record(r: &MetricsRecord) -> String {
        format!(
            "step={} epoch={:.4} train_loss={:.6e} l2_term={:.6e} train_error={:.4} test_accuracy={:.4} lambda={:.3e} eta={:.3e}",
            r.step, r.epoch, r.train_loss, r.l2_term, r.train_error, r.test_accuracy, r.lambda, r.eta
        )
    }
}

/// Seam for dynamic L2 schedules: observes (batch) empirical loss and
/// training error every `measure_every` steps and may move the current
/// lambda.
pub trait ScheduleHook {
    fn measure_every(&self) -> usize;
    /// Returns the lambda to use from this step on.
    fn observe(&mut self, step: usize, empirical_loss: f64, train_error: f64) -> f64;
}

/// Mean loss, its gradient with respect to the outputs, and the
/// misclassification error of a batch.
pub fn batch_loss(outputs: &Mat, targets: &Mat, labels: &[u8], mode: TargetMode, loss: Loss) -> (f64, Mat, f64) {
    let n = outputs.rows();
    let c = outputs.cols();
    let nf = n as f64;
    let mut d_out = Mat::zeros(n, c);
    let mut total = 0.0;
    let mut errors = 0usize;
    match loss {
        Loss::Mse => {
            for i in 0..n {
                for j in 0..c {
                    let r = outputs[(i, j)] - targets[(i, j)];
                    total += 0.5 * r * r / nf;
                    d_out[(i, j)] = r / nf;
                }
            }
        }
        Loss::SoftmaxNorm => {
            let norm = 1.0 / (2.0 * c as f64 * nf);
            for i in 0..n {
                let row = outputs.row(i);
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let log_z = m + row.iter().map(|&f| (f - m).exp()).sum::<f64>().ln();
                for j in 0..c {
                    let log_p = outputs[(i, j)] - log_z;
                    total -= norm * targets[(i, j)] * log_p;
                    d_out[(i, j)] = norm * (log_p.exp() - targets[(i, j)]);
                }
            }
        }
    }
    for i in 0..n {
        if misclassified(outputs.row(i), labels[i], mode) {
            errors += 1;
        }
    }
    (total, d_out, errors as f64 / nf)
}

fn misclassified(output: &[f64], label: u8, mode: TargetMode) -> bool {
    match mode {
        TargetMode::OneHot => {
            let pred = output
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            pred != label as usize
        }
        TargetMode::EvenOdd => {
            let want = if label % 2 == 0 { 1.0 } else { -1.0 };
            output[0] * want <= 0.0
        }
    }
}

/// Mean loss and summed parameter gradient of a batch (no L2 term; the L2
/// gradient is applied by the optimizer step).
pub fn loss_and_grad(
    model: &MLPModel,
    inputs: &Mat,
    targets: &Mat,
    labels: &[u8],
    mode: TargetMode,
    loss: Loss,
) -> (f64, GradientBundle) {
    let cache = model.forward_batch(inputs);
    let (value, d_out, _) = batch_loss(cache.output(), targets, labels, mode, loss);
    let grads = model.backward_batch(&cache, &d_out);
    (value, grads)
}

/// One optimizer step: g_total = grad + lambda * theta, velocity
/// v <- momentum * v + g_total, theta <- theta - eta * v. With
/// momentum = 0 this is plain SGD with coupled weight decay.
pub fn sgd_step(
    model: &mut MLPModel,
    grads: &GradientBundle,
    velocity: &mut GradientBundle,
    eta: f64,
    lambda: f64,
    momentum: f64,
) {
    for l in 0..model.weights.len() {
        let w = model.weights[l].as_mut_slice();
        let g = grads.weights[l].as_slice();
        let v = velocity.weights[l].as_mut_slice();
        for i in 0..w.len() {
            let g_total = g[i] + lambda * w[i];
            v[i] = momentum * v[i] + g_total;
            w[i] -= eta * v[i];
        }
    }
    if let (Some(bs), Some(gbs), Some(vbs)) =
        (model.biases.as_mut(), grads.biases.as_ref(), velocity.biases.as_mut())
    {
        for l in 0..bs.len() {
            for i in 0..bs[l].len() {
                let g_total = gbs[l][i] + lambda * bs[l][i];
                vbs[l][i] = momentum * vbs[l][i] + g_total;
                bs[l][i] -= eta * vbs[l][i];
            }
        }
    }
}

fn l2_term(model: &MLPModel, lambda: f64) -> f64 {
    let mut sq = 0.0;
    for w in &model.weights {
        sq += w.as_slice().iter().map(|x| x * x).sum::<f64>();
    }
    if let Some(bs) = &model.biases {
        sq += bs.iter().flatten().map(|x| x * x).sum::<f64>();
    }
    0.5 * lambda * sq
}

/// Accuracy of the model on a dataset, evaluated in batches.
pub fn evaluate_accuracy(model: &MLPModel, ds: &Dataset) -> f64 {
    let mode = ds.target_mode.expect("dataset must have encoded targets");
    let n = ds.len();
    let mut correct = 0usize;
    let chunk = 1024;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut xs = Mat::zeros(end - start, ds.dim());
        for i in start..end {
            xs.row_mut(i - start).copy_from_slice(ds.inputs.row(i));
        }
        let cache = model.forward_batch(&xs);
        for i in start..end {
            if !misclassified(cache.output().row(i - start), ds.labels[i], mode) {
                correct += 1;
            }
        }
        start = end;
    }
    correct as f64 / n as f64
}

/// Observer invoked at every metrics record, with read access to the
/// in-training model (e.g. to track kernel quantities along the run).
pub type Observer<'a> = &'a mut dyn FnMut(&MLPModel, &MetricsRecord);

/// Train a private copy of `model`. Metrics are recorded every
/// `eval_every` steps (plus the final step); a [`ScheduleHook`], when
/// given, observes batch loss/error at its own cadence and drives lambda.
pub fn train(
    model: &MLPModel,
    train_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
    mut hook: Option<&mut dyn ScheduleHook>,
    mut observer: Option<Observer<'_>>,
) -> Result<(MLPModel, MetricsSeries)> {
    config.validate()?;
    let mode = train_ds.target_mode.ok_or(Error::NoRawLabels)?;
    let targets = train_ds.targets.as_ref().ok_or(Error::NoRawLabels)?;
    assert_eq!(model.input_dim(), train_ds.dim(), "model/data dimension mismatch");

    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let full_batch = config.batch_size >= n;

    let mut m = model.clone();
    let mut velocity = GradientBundle::zeros_like(&m);
    let mut eta = config.eta;
    let mut lambda = config.lambda;
    let mut series = MetricsSeries::default();
    let started = Instant::now();
    let mut best_acc = f64::NEG_INFINITY;
    let mut stale = 0usize;

    let mut step = 0usize;
    'epochs: for epoch in 0..config.epochs {
        if let LrSchedule::Piecewise { boundaries, factor } = &config.lr_schedule {
            if boundaries.contains(&epoch) && epoch > 0 {
                eta *= factor;
            }
        }
        let order: Vec<usize> = if full_batch {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            let epoch_seed =
                config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            idx
        };

        for batch_idx in order.chunks(config.batch_size) {
            // assemble the batch (full-batch runs reuse the dataset matrix)
            let (bx, bt, bl): (Mat, Mat, Vec<u8>) = if full_batch {
                (train_ds.inputs.clone(), targets.clone(), train_ds.labels.clone())
            } else {
                let mut bx = Mat::zeros(batch_idx.len(), train_ds.dim());
                let mut bt = Mat::zeros(batch_idx.len(), targets.cols());
                let mut bl = Vec::with_capacity(batch_idx.len());
                for (r, &i) in batch_idx.iter().enumerate() {
                    bx.row_mut(r).copy_from_slice(train_ds.inputs.row(i));
                    bt.row_mut(r).copy_from_slice(targets.row(i));
                    bl.push(train_ds.labels[i]);
                }
                (bx, bt, bl)
            };

            let cache: ForwardCache = m.forward_batch(&bx);
            let (batch_loss_val, d_out, batch_err) =
                batch_loss(cache.output(), &bt, &bl, mode, config.loss);
            let grads = m.backward_batch(&cache, &d_out);
            if !batch_loss_val.is_finite() || !grads.is_finite() {
                return Err(Error::TrainBlowUp { step });
            }

            if let Some(h) = hook.as_deref_mut() {
                if step % h.measure_every() == 0 {
                    lambda = h.observe(step, batch_loss_val, batch_err);
                }
            }

            sgd_step(&mut m, &grads, &mut velocity, eta, lambda, config.momentum);
            step += 1;

            if step % config.eval_every == 0 || step == total_steps {
                let test_accuracy = evaluate_accuracy(&m, test_ds);
                let record = MetricsRecord {
                    step,
                    epoch: step as f64 / steps_per_epoch as f64,
                    train_loss: batch_loss_val,
                    l2_term: l2_term(&m, lambda),
                    train_error: batch_err,
                    test_accuracy,
                    lambda,
                    eta,
                    wall_time: started.elapsed().as_secs_f64(),
                };
                if let Some(obs) = observer.as_deref_mut() {
                    obs(&m, &record);
                }
                series.records.push(record);
                if let Some(patience) = config.patience {
                    if test_accuracy > best_acc {
                        best_acc = test_accuracy;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= patience {
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }
    Ok((m, series))
}
