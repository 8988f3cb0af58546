//! Infinite-width theory engine.
//!
//! For a k-homogeneous network trained by gradient flow on
//! `L + (lambda/2)|theta|^2`, the function on the training set evolves as
//!
//! ```text
//! df/dt = -exp(-2(k-1) lambda t) Theta0 dl/df - k lambda f
//! ```
//!
//! with the tangent kernel decaying as `Theta_t = exp(-2(k-1) lambda t) Theta0`.
//! For MSE loss each kernel mode decouples and admits a closed form; this
//! module evaluates that closed form (in log space, so large `gamma/lambda`
//! ratios never overflow), integrates the general ODE for other losses,
//! cross-checks the matrix-exponential form of the solution, and solves the
//! deep-linear fixed-point relation for the late-time function value.

use crate::error::{Error, Result};
use crate::linalg::{Mat, SymMatrix};
use crate::numerics::{eig_sym, find_root, integrate_ode, integrate_quad, Eigensystem};
use crate::parallel::map_indexed;

/// Eigenvalues/eigenvectors of the initial tangent kernel on the training
/// set, with tiny negative eigenvalues (numerical PSD noise) clamped to 0.
#[derive(Debug, Clone)]
pub struct KernelEigensystem {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl KernelEigensystem {
    /// Clamping threshold for negative eigenvalues, relative to the trace.
    pub const PSD_TOL: f64 = 1e-8;

    pub fn from_kernel(kernel: &SymMatrix) -> Result<Self> {
        Self::from_eigensystem(eig_sym(kernel)?)
    }

    pub fn from_eigensystem(es: Eigensystem) -> Result<Self> {
        let trace: f64 = es.values.iter().sum();
        let floor = -Self::PSD_TOL * trace.abs().max(1e-300);
        let mut values = es.values;
        for g in &mut values {
            if *g < floor {
                return Err(Error::NonFinite(format!(
                    "kernel eigenvalue {g:.3e} below PSD tolerance {floor:.3e}"
                )));
            }
            if *g < 0.0 {
                *g = 0.0;
            }
        }
        Ok(KernelEigensystem { values, vectors: es.vectors })
    }

    /// Diagonal kernel with the given eigenvalues (identity eigenvectors);
    /// handy for synthetic mode-level studies.
    pub fn diagonal(values: Vec<f64>) -> Self {
        let n = values.len();
        KernelEigensystem { values, vectors: Mat::identity(n) }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn gamma_max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0).max(0.0)
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|a| (0..n).map(|i| self.vectors[(i, a)] * x[i]).sum()).collect()
    }

    pub fn unproject(&self, modes: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|i| (0..n).map(|a| self.vectors[(i, a)] * modes[a]).sum()).collect()
    }

    /// Reconstruct the kernel matrix V diag(gamma) V^T.
    pub fn to_matrix(&self) -> Mat {
        let n = self.n();
        let mut scaled = Mat::zeros(n, n);
        for i in 0..n {
            for a in 0..n {
                scaled[(i, a)] = self.vectors[(i, a)] * self.values[a];
            }
        }
        scaled.matmul_nt(&self.vectors)
    }
}

/// Sample losses the flow can evolve. MSE has the closed-form mode
/// solution; the normalized logistic path (the scalar counterpart of the
/// trainer's normalized softmax, C = 2) is ODE-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowLoss {
    Mse,
    LogisticNorm,
}

impl FlowLoss {
    /// Per-sample loss l(f, y).
    pub fn value(self, f: f64, y: f64) -> f64 {
        match self {
            FlowLoss::Mse => 0.5 * (f - y) * (f - y),
            FlowLoss::LogisticNorm => {
                // 1/(2C) = 1/4 normalization with C = 2 classes
                let t = if y > 0.0 { 1.0 } else { 0.0 };
                0.25 * (softplus(-f) + (1.0 - t) * f)
            }
        }
    }

    /// dl/df.
    pub fn deriv(self, f: f64, y: f64) -> f64 {
        match self {
            FlowLoss::Mse => f - y,
            FlowLoss::LogisticNorm => {
                let t = if y > 0.0 { 1.0 } else { 0.0 };
                0.25 * (sigmoid(f) - t)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One flow evolution problem: kernel, homogeneity degree, L2 coefficient,
/// labels and initial function (kept in both the sample and mode bases).
///
/// The kernel normalization must match the loss convention of whatever the
/// trajectory will be compared against: a trainer that averages the loss
/// over N samples corresponds to `Theta0 / N` here.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub kernel: KernelEigensystem,
    pub k: u32,
    pub lambda: f64,
    pub y_samples: Vec<f64>,
    pub f0_samples: Vec<f64>,
    pub y_modes: Vec<f64>,
    pub f0_modes: Vec<f64>,
    pub loss: FlowLoss,
}

impl FlowProblem {
    /// `f0 = None` starts every mode at zero (the theory default).
    pub fn new(
        kernel: KernelEigensystem,
        k: u32,
        lambda: f64,
        y_samples: Vec<f64>,
        f0_samples: Option<Vec<f64>>,
        loss: FlowLoss,
    ) -> Result<Self> {
        assert!(k >= 1, "homogeneity degree must be >= 1");
        assert!(lambda >= 0.0, "lambda must be non-negative");
        let n = kernel.n();
        if y_samples.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y_samples.len() });
        }
        let f0_samples = f0_samples.unwrap_or_else(|| vec![0.0; n]);
        if f0_samples.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: f0_samples.len() });
        }
        let y_modes = kernel.project(&y_samples);
        let f0_modes = kernel.project(&f0_samples);
        Ok(FlowProblem { kernel, k, lambda, y_samples, f0_samples, y_modes, f0_modes, loss })
    }

    pub fn n(&self) -> usize {
        self.kernel.n()
    }

    /// Default RK4 step: resolves both the fast learning scale 1/gamma_max
    /// and the slow decay scale 1/lambda.
    pub fn default_step(&self) -> f64 {
        let g = self.kernel.gamma_max();
        let fast = if g > 0.0 { 0.01 / g } else { f64::INFINITY };
        let slow = 0.01 / self.lambda.max(1e-12);
        fast.min(slow).min(1e6)
    }

    /// Mean empirical loss at mode coefficients `fm` (mean over samples,
    /// without the L2 term).
    pub fn train_loss_from_modes(&self, fm: &[f64]) -> f64 {
        let n = self.n() as f64;
        match self.loss {
            FlowLoss::Mse => {
                // orthonormal basis: the squared residual is basis-free
                fm.iter()
                    .zip(&self.y_modes)
                    .map(|(f, y)| 0.5 * (f - y) * (f - y))
                    .sum::<f64>()
                    / n
            }
            FlowLoss::LogisticNorm => {
                let fs = self.kernel.unproject(fm);
                fs.iter()
                    .zip(&self.y_samples)
                    .map(|(&f, &y)| self.loss.value(f, y))
                    .sum::<f64>()
                    / n
            }
        }
    }
}

/// Kernel decay factor exp(-2(k-1) lambda t): the entire effect of the L2
/// term on the infinite-width kernel.
pub fn kernel_scale(k: u32, lambda: f64, t: f64) -> f64 {
    (-2.0 * (f64::from(k) - 1.0) * lambda * t).exp()
}

/// Closed-form evolution of one kernel mode for MSE loss, valid for k >= 2
/// and lambda > 0:
///
/// ```text
/// f_a(t) = exp(g_a(t)/(2(k-1)L) - kLt) { exp(-g_a/(2(k-1)L)) f_a(0)
///          + g_a y_a  Int_0^t exp(-g_a(t')/(2(k-1)L) - (k-2)Lt') dt' }
/// ```
///
/// Exponents are combined before exponentiation, so every factor stays in
/// [0, 1] even when `gamma/lambda` is in the thousands.
pub fn mode_solution(problem: &FlowProblem, a: usize, t: f64) -> Result<f64> {
    if problem.k < 2 || problem.lambda <= 0.0 {
        return Err(Error::ModeSolutionDomain { k: problem.k, lambda: problem.lambda });
    }
    assert!(t >= 0.0, "time must be non-negative");
    let k = f64::from(problem.k);
    let lambda = problem.lambda;
    let gamma = problem.kernel.values[a];
    let f0 = problem.f0_modes[a];
    let y = problem.y_modes[a];

    let two_km1_l = 2.0 * (k - 1.0) * lambda;
    let s_t = kernel_scale(problem.k, lambda, t);
    let gamma_t = gamma * s_t;

    // both exponents are <= 0 for t' in [0, t]
    let term0 = f0 * ((gamma_t - gamma) / two_km1_l - k * lambda * t).exp();
    if gamma == 0.0 || y == 0.0 {
        return Ok(term0);
    }
    let integrand = |tp: f64| {
        let gamma_tp = gamma * kernel_scale(problem.k, lambda, tp);
        ((gamma_t - gamma_tp) / two_km1_l - k * lambda * t - (k - 2.0) * lambda * tp).exp()
    };
    let integral = integrate_quad(integrand, 0.0, t, 1e-10)?;
    Ok(term0 + gamma * y * integral)
}

/// Closed-form k = 1 (static kernel) trajectory in the sample basis:
/// per mode, `f_a(t) = y_a g/(g+L) (1 - e^{-(g+L)t}) + f_a(0) e^{-(g+L)t}`.
/// As `t -> inf` this converges to the ridge solution
/// `Theta (Theta + L I)^{-1} y`.
pub fn ridge_flow(
    kernel: &KernelEigensystem,
    lambda: f64,
    y_samples: &[f64],
    f0_samples: &[f64],
    t: f64,
) -> Vec<f64> {
    let ym = kernel.project(y_samples);
    let f0m = kernel.project(f0_samples);
    let modes: Vec<f64> = kernel
        .values
        .iter()
        .zip(ym.iter().zip(&f0m))
        .map(|(&g, (&y, &f0))| ridge_mode(g, lambda, y, f0, t))
        .collect();
    kernel.unproject(&modes)
}

/// Single-mode k = 1 closed form.
pub fn ridge_mode(gamma: f64, lambda: f64, y: f64, f0: f64, t: f64) -> f64 {
    let rate = gamma + lambda;
    if rate == 0.0 {
        return f0;
    }
    let decay = (-rate * t).exp();
    y * gamma / rate * (1.0 - decay) + f0 * decay
}

/// Trajectory of the full function vector plus per-time kernel scale and
/// mean empirical loss.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub t_grid: Vec<f64>,
    /// `modes[i]` holds the mode coefficients at `t_grid[i]`.
    pub modes: Vec<Vec<f64>>,
    pub kernel_scale: Vec<f64>,
    pub train_loss: Vec<f64>,
}

impl FlowSolution {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,mode_index,f_value,kernel_scale,train_loss")?;
        for (i, &t) in self.t_grid.iter().enumerate() {
            for (a, &f) in self.modes[i].iter().enumerate() {
                writeln!(w, "{t},{a},{f},{},{}", self.kernel_scale[i], self.train_loss[i])?;
            }
        }
        Ok(())
    }

    /// Index of the smallest training loss.
    pub fn argmin_loss(&self) -> usize {
        self.train_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn solution_from_modes(problem: &FlowProblem, t_grid: Vec<f64>, modes: Vec<Vec<f64>>) -> FlowSolution {
    let kernel_scale: Vec<f64> =
        t_grid.iter().map(|&t| kernel_scale(problem.k, problem.lambda, t)).collect();
    let train_loss: Vec<f64> =
        modes.iter().map(|fm| problem.train_loss_from_modes(fm)).collect();
    FlowSolution { t_grid, modes, kernel_scale, train_loss }
}

/// Evaluate the closed-form MSE solution on a time grid (k >= 2, or k = 1
/// via the ridge path). Modes are independent and evaluated concurrently.
pub fn closed_form_solution(problem: &FlowProblem, t_grid: &[f64]) -> Result<FlowSolution> {
    assert_eq!(problem.loss, FlowLoss::Mse, "closed form exists for MSE only");
    let n = problem.n();
    let per_time: Result<Vec<Vec<f64>>> = t_grid
        .iter()
        .map(|&t| {
            if problem.k == 1 {
                Ok(problem
                    .kernel
                    .values
                    .iter()
                    .enumerate()
                    .map(|(a, &g)| {
                        ridge_mode(g, problem.lambda, problem.y_modes[a], problem.f0_modes[a], t)
                    })
                    .collect())
            } else {
                map_indexed(n, |a| mode_solution(problem, a, t)).into_iter().collect()
            }
        })
        .collect();
    Ok(solution_from_modes(problem, t_grid.to_vec(), per_time?))
}

/// Numerically integrate the flow ODE for any differentiable loss.
///
/// The state is the mode-coefficient vector; for non-MSE losses the loss
/// derivative is evaluated in the sample basis and projected back, which
/// is exact because the kernel eigenvectors never rotate. Grid times are
/// snapped to whole RK4 steps.
pub fn evolve_ode(problem: &FlowProblem, t_grid: &[f64], step: Option<f64>) -> Result<FlowSolution> {
    let step = step.unwrap_or_else(|| problem.default_step());
    let n = problem.n();
    let k = f64::from(problem.k);
    let lambda = problem.lambda;
    let two_km1_l = 2.0 * (k - 1.0) * lambda;

    let t0 = t_grid.first().copied().unwrap_or(0.0);
    let snapped: Vec<f64> = {
        let mut v: Vec<f64> = t_grid
            .iter()
            .map(|&t| t0 + ((t - t0) / step).round() * step)
            .collect();
        v.dedup_by(|a, b| (*a - *b).abs() < step * 0.5);
        v
    };

    let rhs = |t: f64, fm: &[f64], out: &mut [f64]| {
        let s = (-two_km1_l * t).exp();
        match problem.loss {
            FlowLoss::Mse => {
                for a in 0..n {
                    out[a] = -s * problem.kernel.values[a] * (fm[a] - problem.y_modes[a])
                        - k * lambda * fm[a];
                }
            }
            FlowLoss::LogisticNorm => {
                let fs = problem.kernel.unproject(fm);
                let lp: Vec<f64> = fs
                    .iter()
                    .zip(&problem.y_samples)
                    .map(|(&f, &y)| problem.loss.deriv(f, y))
                    .collect();
                let lp_modes = problem.kernel.project(&lp);
                for a in 0..n {
                    out[a] = -s * problem.kernel.values[a] * lp_modes[a] - k * lambda * fm[a];
                }
            }
        }
    };

    let states = integrate_ode(rhs, &problem.f0_modes, &snapped, step)?;
    Ok(solution_from_modes(problem, snapped, states))
}

/// Evaluate the matrix-exponential (functional) form of the MSE solution at
/// time `t` and return its maximum deviation from the per-mode closed form.
///
/// The functional form lives in the sample basis:
///
/// ```text
/// f_t = e^{-kLt} { exp[(Th_t - Th_0)/(2(k-1)L)] f_0
///       + Int_0^t e^{-(k-2)Lt'} exp[(Th_t - Th_t')/(2(k-1)L)] Th_0 y dt' }
/// ```
///
/// The matrix exponentials are diagonal in the kernel eigenbasis, but here
/// they are assembled as explicit matrices and applied to sample-basis
/// vectors, which cross-checks the eigendecomposition plumbing end to end.
pub fn functional_form_check(problem: &FlowProblem, t: f64) -> Result<f64> {
    if problem.k < 2 || problem.lambda <= 0.0 {
        return Err(Error::ModeSolutionDomain { k: problem.k, lambda: problem.lambda });
    }
    let n = problem.n();
    let k = f64::from(problem.k);
    let lambda = problem.lambda;
    let two_km1_l = 2.0 * (k - 1.0) * lambda;
    let s_t = kernel_scale(problem.k, lambda, t);

    // exp[diag weights] conjugated back to the sample basis
    let expm = |weights: &[f64]| -> Mat {
        let v = &problem.kernel.vectors;
        let mut scaled = Mat::zeros(n, n);
        for i in 0..n {
            for a in 0..n {
                scaled[(i, a)] = v[(i, a)] * weights[a];
            }
        }
        scaled.matmul_nt(v)
    };

    let w0: Vec<f64> = problem
        .kernel
        .values
        .iter()
        .map(|&g| ((g * s_t - g) / two_km1_l).exp())
        .collect();
    let term0 = expm(&w0).matvec(&problem.f0_samples);

    // Theta0 y in the sample basis
    let theta_y = problem.kernel.to_matrix().matvec(&problem.y_samples);

    // vector-valued Simpson with interval halving on the matrix integrand
    let eval = |tp: f64| -> Vec<f64> {
        let s_tp = kernel_scale(problem.k, lambda, tp);
        let w: Vec<f64> = problem
            .kernel
            .values
            .iter()
            .map(|&g| ((g * s_t - g * s_tp) / two_km1_l - (k - 2.0) * lambda * tp).exp())
            .collect();
        expm(&w).matvec(&theta_y)
    };
    let simpson = |m: usize| -> Vec<f64> {
        let h = t / m as f64;
        let mut acc = eval(0.0);
        let end = eval(t);
        for (a, e) in acc.iter_mut().zip(end) {
            *a += e;
        }
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            let v = eval(h * i as f64);
            for (a, e) in acc.iter_mut().zip(v) {
                *a += w * e;
            }
        }
        acc.iter().map(|x| x * h / 3.0).collect()
    };
    let integral = if t == 0.0 {
        vec![0.0; n]
    } else {
        let mut m = 16;
        let mut prev = simpson(m);
        loop {
            m *= 2;
            let cur = simpson(m);
            let diff = cur
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            let scale = cur.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
            if diff <= 1e-10 * scale || m >= 1 << 22 {
                break cur;
            }
            prev = cur;
        }
    };

    let e_klt = (-k * lambda * t).exp();
    let f_func: Vec<f64> = term0
        .iter()
        .zip(&integral)
        .map(|(a, b)| e_klt * (a + b))
        .collect();

    // compare against the per-mode closed form
    let f_func_modes = problem.kernel.project(&f_func);
    let mut worst = 0.0f64;
    for a in 0..n {
        let f_mode = mode_solution(problem, a, t)?;
        worst = worst.max((f_func_modes[a] - f_mode).abs());
    }
    Ok(worst)
}

/// Geometric time grid with `per_decade` points per decade.
pub fn geometric_grid(t_min: f64, t_max: f64, per_decade: usize) -> Vec<f64> {
    assert!(t_min > 0.0 && t_max > t_min);
    let decades = (t_max / t_min).log10();
    let steps = (decades * per_decade as f64).ceil() as usize;
    (0..=steps)
        .map(|i| t_min * 10f64.powf(decades * i as f64 / steps as f64))
        .collect()
}

/// Time of the interior minimum of the mean empirical loss (MSE closed
/// form, k >= 2): geometric scan over `[1e-3/gamma_max, 20/lambda]`, then a
/// bisection refinement of the loss slope around the best grid point.
///
/// Flagged as monotone when the minimum sits on the scan boundary or does
/// not improve on the initial loss by at least 4x (shallow dips of modes
/// with `gamma < lambda` do not count as a fit).
pub fn loss_peak_time(problem: &FlowProblem) -> Result<f64> {
    if problem.k < 2 || problem.lambda <= 0.0 {
        return Err(Error::ModeSolutionDomain { k: problem.k, lambda: problem.lambda });
    }
    assert_eq!(problem.loss, FlowLoss::Mse, "loss minimum scan uses the MSE closed form");
    let g_max = problem.kernel.gamma_max();
    let t_lo = if g_max > 0.0 { 1e-3 / g_max } else { 1e-3 / problem.lambda };
    let t_hi = 20.0 / problem.lambda;
    // coarse scan; the bisection refinement below recovers the precision
    let grid = geometric_grid(t_lo.min(t_hi * 1e-6), t_hi, 48);

    let loss_at = |t: f64| -> Result<f64> {
        let fm: Result<Vec<f64>> = (0..problem.n()).map(|a| mode_solution(problem, a, t)).collect();
        Ok(problem.train_loss_from_modes(&fm?))
    };

    let losses: Result<Vec<f64>> = map_indexed(grid.len(), |i| loss_at(grid[i])).into_iter().collect();
    let losses = losses?;
    let l0 = problem.train_loss_from_modes(&problem.f0_modes);
    let (best, &best_loss) = losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    if best == 0 || best + 1 == grid.len() || best_loss > 0.25 * l0 {
        return Err(Error::MonotoneLoss);
    }

    // refine: bisect the sign change of the loss slope
    let slope = |t: f64| -> f64 {
        let h = t * 1e-5;
        let lp = loss_at(t + h).unwrap_or(f64::NAN);
        let lm = loss_at(t - h).unwrap_or(f64::NAN);
        (lp - lm) / (2.0 * h)
    };
    let (lo, hi) = (grid[best - 1], grid[best + 1]);
    match find_root(slope, (lo, hi), lo * 1e-4) {
        Ok(t) => Ok(t),
        // slope evaluation can be flat to rounding near the minimum; the
        // grid argmin is then the answer
        Err(_) => Ok(grid[best]),
    }
}

/// Which normalization the deep-linear fixed point uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMode {
    /// beta = n^{-(depth-1)/2}
    Ntk,
    /// beta = 1
    Standard,
}

/// Late-time fixed point of a depth-`depth` bias-free linear network
/// (`depth` = number of weight matrices, >= 2) trained on a single sample
/// `(x, y)` with MSE and L2 coefficient `lambda`.
#[derive(Debug, Clone)]
pub struct DeepLinearFixedPoint {
    /// The gradient-flow-reachable fixed point (0 when only the trivial
    /// fixed point exists).
    pub f: f64,
    /// True when no non-trivial root exists in the bracket.
    pub trivial: bool,
    /// All roots of the fixed-point relation found in `[-10|y|, 10|y|]`.
    pub roots: Vec<f64>,
}

/// Solve the algebraic fixed-point relation
/// `lambda^depth / beta^2 = (-(f-y) f)^(depth-2) (f-y)^2 x^2`
/// for the network output `f` at the stationary point of gradient flow.
///
/// Among all roots, gradient flow from small initialization reaches the
/// one continuously connected to the interpolating solution `f = y` at
/// `lambda = 0`: the root with `sign(f) = sign(y)` and `|f| <= |y|`
/// closest to `y` (the aligned weight configuration can only shrink the
/// output, never overshoot it).
pub fn deep_linear_fixed_point(
    depth: u32,
    width: usize,
    lambda: f64,
    beta_mode: BetaMode,
    x: f64,
    y: f64,
) -> DeepLinearFixedPoint {
    assert!(depth >= 2, "a deep linear model needs at least two weight layers");
    assert!(lambda >= 0.0);
    if lambda == 0.0 {
        return DeepLinearFixedPoint { f: y, trivial: false, roots: vec![y] };
    }
    let beta = match beta_mode {
        BetaMode::Ntk => (width as f64).powf(-(f64::from(depth) - 1.0) / 2.0),
        BetaMode::Standard => 1.0,
    };
    let lhs = lambda.powi(depth as i32) / (beta * beta);
    let g = |f: f64| -> f64 {
        let r = f - y;
        (-r * f).powi(depth as i32 - 2) * r * r * x * x - lhs
    };

    // scan for sign changes, then polish each bracket
    let span = 10.0 * y.abs().max(1.0);
    let steps = 4000;
    let mut roots = Vec::new();
    let mut prev_f = -span;
    let mut prev_g = g(prev_f);
    for i in 1..=steps {
        let cur_f = -span + 2.0 * span * i as f64 / steps as f64;
        let cur_g = g(cur_f);
        if prev_g == 0.0 {
            roots.push(prev_f);
        } else if prev_g * cur_g < 0.0 {
            if let Ok(r) = find_root(g, (prev_f, cur_f), span * 1e-14) {
                roots.push(r);
            }
        }
        prev_f = cur_f;
        prev_g = cur_g;
    }

    let reachable = roots
        .iter()
        .copied()
        .filter(|&r| r.signum() == y.signum() && r.abs() <= y.abs() + span * 1e-12)
        .min_by(|a, b| (a - y).abs().partial_cmp(&(b - y).abs()).unwrap());
    match reachable {
        Some(f) => DeepLinearFixedPoint { f, trivial: false, roots },
        None => DeepLinearFixedPoint { f: 0.0, trivial: true, roots },
    }
}

/// Largest lambda at which the non-trivial fixed point still exists,
/// located by bisection. Scales as `width^{-(depth-1)/depth}` under NTK
/// normalization.
pub fn deep_linear_transition_lambda(
    depth: u32,
    width: usize,
    beta_mode: BetaMode,
    x: f64,
    y: f64,
) -> f64 {
    let has_root = |lambda: f64| -> bool {
        !deep_linear_fixed_point(depth, width, lambda, beta_mode, x, y).trivial
    };
    let mut lo = 1e-12;
    let mut hi = 1e3;
    if !has_root(lo) {
        return lo;
    }
    while has_root(hi) {
        hi *= 10.0;
        if hi > 1e9 {
            return hi;
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if has_root(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-10 {
            break;
        }
    }
    (lo * hi).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::{Rng, SeedableRng};

    fn random_psd_kernel(n: usize, seed: u64) -> (KernelEigensystem, SymMatrix) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = Mat::zeros(n, n);
        for v in b.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let theta = SymMatrix::symmetrize(b.matmul_nt(&b)).unwrap();
        (KernelEigensystem::from_kernel(&theta).unwrap(), theta)
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn kernel_scale_cases() {
        assert_eq!(kernel_scale(2, 0.0, 123.0), 1.0);
        assert_eq!(kernel_scale(1, 0.5, 123.0), 1.0);
        let v = kernel_scale(2, 0.01, 50.0);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn mode_solution_zero_gamma_is_pure_decay() {
        let kernel = KernelEigensystem::diagonal(vec![0.0]);
        let p = FlowProblem::new(kernel, 2, 0.05, vec![0.7], Some(vec![1.3]), FlowLoss::Mse).unwrap();
        for t in [0.0, 1.0, 7.0, 30.0] {
            let f = mode_solution(&p, 0, t).unwrap();
            let want = 1.3 * (-2.0 * 0.05 * t).exp();
            assert!((f - want).abs() < 1e-12, "t={t}: {f} vs {want}");
        }
    }

    #[test]
    fn mode_solution_zero_data_stays_zero() {
        let kernel = KernelEigensystem::diagonal(vec![2.0]);
        let p = FlowProblem::new(kernel, 3, 0.01, vec![0.0], None, FlowLoss::Mse).unwrap();
        for t in [0.0, 0.5, 10.0, 300.0] {
            assert_eq!(mode_solution(&p, 0, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn mode_solution_rejects_k1_and_lambda0() {
        let kernel = KernelEigensystem::diagonal(vec![1.0]);
        let p = FlowProblem::new(kernel.clone(), 1, 0.1, vec![1.0], None, FlowLoss::Mse).unwrap();
        assert!(matches!(mode_solution(&p, 0, 1.0), Err(Error::ModeSolutionDomain { .. })));
        let p = FlowProblem::new(kernel, 2, 0.0, vec![1.0], None, FlowLoss::Mse).unwrap();
        assert!(matches!(mode_solution(&p, 0, 1.0), Err(Error::ModeSolutionDomain { .. })));
    }

    /// RK4 oracle for the single-mode ODE
    /// df/dt = -e^{-2(k-1)Lt} gamma (f - y) - kL f.
    fn rk4_mode_oracle(k: u32, lambda: f64, gamma: f64, y: f64, f0: f64, t: f64, step: f64) -> f64 {
        let kf = f64::from(k);
        let sol = integrate_ode(
            |tt, f, df| {
                let s = (-2.0 * (kf - 1.0) * lambda * tt).exp();
                df[0] = -s * gamma * (f[0] - y) - kf * lambda * f[0];
            },
            &[f0],
            &[0.0, t],
            step,
        )
        .unwrap();
        sol[1][0]
    }

    #[test]
    fn mode_solution_matches_rk4_oracle() {
        // gamma/lambda = 100: the mode sits near (a few percent below) the
        // unregularized value 1 - e^-5 at t = 5; the RK4 oracle is the
        // authority on the exact number (0.97120...)
        let kernel = KernelEigensystem::diagonal(vec![1.0]);
        let p = FlowProblem::new(kernel, 2, 0.01, vec![1.0], None, FlowLoss::Mse).unwrap();
        let f = mode_solution(&p, 0, 5.0).unwrap();
        let oracle = rk4_mode_oracle(2, 0.01, 1.0, 1.0, 0.0, 5.0, 1e-4);
        assert!((f - oracle).abs() < 1e-6, "closed form {f} vs RK4 {oracle}");
        assert!((f - (1.0 - (-5.0f64).exp())).abs() < 0.03, "expected near 1 - e^-5, got {f}");

        // a harsher ratio: gamma/lambda = 1000 must not overflow
        let kernel = KernelEigensystem::diagonal(vec![1.0]);
        let p = FlowProblem::new(kernel, 2, 0.001, vec![1.0], Some(vec![0.5]), FlowLoss::Mse).unwrap();
        for t in [0.1, 10.0, 1000.0] {
            let f = mode_solution(&p, 0, t).unwrap();
            let oracle = rk4_mode_oracle(2, 0.001, 1.0, 1.0, 0.5, t, 5e-4);
            assert!((f - oracle).abs() < 1e-6, "t={t}: {f} vs {oracle}");
        }
    }

    #[test]
    fn ridge_limits() {
        // lambda = 0, gamma > 0: interpolates the labels as t -> inf
        let (kernel, _) = random_psd_kernel(6, 3);
        let y = random_vec(6, 4);
        let f = ridge_flow(&kernel, 0.0, &y, &[0.0; 6], 1e7);
        for (a, b) in f.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }

        // identity kernel, lambda = 1: converges to y/2
        let kernel = KernelEigensystem::diagonal(vec![1.0, 1.0, 1.0]);
        let y = vec![2.0, -4.0, 0.5];
        let f = ridge_flow(&kernel, 1.0, &y, &[0.0; 3], 1e4);
        for (a, b) in f.iter().zip(&y) {
            assert!((a - b / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ridge_flow_matches_direct_solve() {
        let (kernel, theta) = random_psd_kernel(20, 9);
        let y = random_vec(20, 10);
        let lambda = 0.37;
        let f = ridge_flow(&kernel, lambda, &y, &vec![0.0; 20], 1e4 / lambda);
        let theta_y = theta.mat().matvec(&y);
        let direct = crate::linalg::solve_spd_shifted(&theta, lambda, &theta_y).unwrap();
        for (a, b) in f.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-8, "ridge flow {a} vs direct solve {b}");
        }
    }

    #[test]
    fn evolve_ode_matches_closed_form_for_mse() {
        let (kernel, _) = random_psd_kernel(12, 21);
        let y = random_vec(12, 22);
        let lambda = 0.05;
        let p = FlowProblem::new(kernel, 2, lambda, y, None, FlowLoss::Mse).unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.5 / lambda / 10.0).collect();
        let ode = evolve_ode(&p, &grid, None).unwrap();
        let closed = closed_form_solution(&p, &ode.t_grid).unwrap();
        for (i, t) in ode.t_grid.iter().enumerate() {
            for a in 0..p.n() {
                let d = (ode.modes[i][a] - closed.modes[i][a]).abs();
                assert!(d < 1e-6, "t={t}, mode {a}: deviation {d}");
            }
        }
    }

    #[test]
    fn evolve_ode_k1_matches_ridge_closed_form() {
        let (kernel, _) = random_psd_kernel(10, 71);
        let y = random_vec(10, 72);
        let f0 = random_vec(10, 73);
        let lambda = 0.2;
        let p = FlowProblem::new(kernel.clone(), 1, lambda, y.clone(), Some(f0.clone()), FlowLoss::Mse).unwrap();
        let t_end = 3.0;
        let sol = evolve_ode(&p, &[0.0, t_end], Some(1e-4)).unwrap();
        let want = ridge_flow(&kernel, lambda, &y, &f0, t_end);
        let got = kernel.unproject(sol.modes.last().unwrap());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "ODE endpoint {a} vs ridge closed form {b}");
        }
    }

    #[test]
    fn evolve_ode_lambda0_is_constant_kernel_flow() {
        let kernel = KernelEigensystem::diagonal(vec![2.0, 0.5]);
        let p = FlowProblem::new(kernel, 3, 0.0, vec![1.0, -1.0], None, FlowLoss::Mse).unwrap();
        let grid = [0.0, 1.0, 3.0];
        let sol = evolve_ode(&p, &grid, Some(1e-3)).unwrap();
        for (i, &t) in sol.t_grid.iter().enumerate() {
            let want0 = 1.0 - (-2.0 * t).exp();
            let want1 = -(1.0 - (-0.5 * t).exp());
            assert!((sol.modes[i][0] - want0).abs() < 1e-8);
            assert!((sol.modes[i][1] - want1).abs() < 1e-8);
            assert_eq!(sol.kernel_scale[i], 1.0);
        }
    }

    #[test]
    fn eigenvectors_never_rotate_under_mse_flow() {
        // the discretized update is diagonal in the eigenbasis: V^T Theta V
        // must be diagonal to eigensolver precision
        let (kernel, theta) = random_psd_kernel(16, 31);
        let tv: Vec<Vec<f64>> = (0..16)
            .map(|a| theta.mat().matvec(&kernel.vectors.column(a)))
            .collect();
        let scale = kernel.gamma_max();
        for a in 0..16 {
            for b in 0..16 {
                let coupling = dot(&kernel.vectors.column(b), &tv[a]);
                if a != b {
                    assert!(
                        coupling.abs() < 1e-10 * scale,
                        "off-diagonal coupling ({a},{b}) = {coupling:.3e}"
                    );
                }
            }
        }
    }

    #[test]
    fn late_time_decay_for_k2_k3() {
        let (kernel, _) = random_psd_kernel(10, 41);
        let y = random_vec(10, 42);
        let f0 = random_vec(10, 43);
        for k in [2u32, 3] {
            for lambda in [1e-2, 1e-1] {
                let p = FlowProblem::new(
                    kernel.clone(),
                    k,
                    lambda,
                    y.clone(),
                    Some(f0.clone()),
                    FlowLoss::Mse,
                )
                .unwrap();
                for a in 0..10 {
                    let f = mode_solution(&p, a, 20.0 / lambda).unwrap();
                    let bound = 1e-6 * (p.f0_modes[a].abs() + p.y_modes[a].abs());
                    assert!(
                        f.abs() < bound.max(1e-12),
                        "k={k}, lambda={lambda}, mode {a}: |f| = {:.3e}",
                        f.abs()
                    );
                }
            }
        }
    }

    #[test]
    fn functional_form_matches_modes() {
        // single mode: reduces to the closed form exactly
        let kernel = KernelEigensystem::diagonal(vec![1.5]);
        let p = FlowProblem::new(kernel, 2, 0.02, vec![1.0], Some(vec![0.2]), FlowLoss::Mse).unwrap();
        let dev = functional_form_check(&p, 3.0).unwrap();
        assert!(dev < 1e-9, "single-mode deviation {dev}");

        // t = 0 returns f0
        let dev0 = functional_form_check(&p, 0.0).unwrap();
        assert!(dev0 < 1e-12);

        // full random kernel at t = 1/lambda
        let (kernel, _) = random_psd_kernel(20, 51);
        let y = random_vec(20, 52);
        let lambda = 0.05;
        let p = FlowProblem::new(kernel, 2, lambda, y, None, FlowLoss::Mse).unwrap();
        let dev = functional_form_check(&p, 1.0 / lambda).unwrap();
        assert!(dev < 1e-8, "N=20 deviation {dev}");
    }

    #[test]
    fn loss_peak_time_scales_inversely_with_lambda() {
        // the 1/lambda law needs a kernel whose spectrum spans decades
        // around lambda (as empirical kernels do); isolated modes far above
        // lambda sit in a logarithmic regime instead
        let gammas: Vec<f64> = (1..=40).map(|a| (a as f64).powf(-1.5)).collect();
        let kernel = KernelEigensystem::diagonal(gammas);
        let y = vec![1.0; 40];
        let lambda = 0.002;
        let p1 = FlowProblem::new(kernel.clone(), 2, lambda, y.clone(), None, FlowLoss::Mse).unwrap();
        let p2 = FlowProblem::new(kernel, 2, lambda / 2.0, y, None, FlowLoss::Mse).unwrap();
        let t1 = loss_peak_time(&p1).unwrap();
        let t2 = loss_peak_time(&p2).unwrap();
        let ratio = t2 / t1;
        assert!(
            (ratio - 2.0).abs() <= 0.6,
            "t_min(lambda/2)/t_min(lambda) = {ratio}, expected 2 +- 30%"
        );
    }

    #[test]
    fn loss_peak_time_two_regimes_and_monotone_flag() {
        // gamma/lambda >> 1: fit near 1/gamma, decay near 1/lambda,
        // interior minimum in between
        let kernel = KernelEigensystem::diagonal(vec![1.0]);
        let p = FlowProblem::new(kernel, 2, 0.01, vec![1.0], None, FlowLoss::Mse).unwrap();
        let t_min = loss_peak_time(&p).unwrap();
        assert!(t_min > 1.0 && t_min < 20.0 / 0.01, "t_min = {t_min}");
        // the mode is essentially fitted at the minimum
        let f = mode_solution(&p, 0, t_min).unwrap();
        assert!((f - 1.0).abs() < 0.1, "mode at loss minimum: {f}");

        // gamma/lambda < 1: shallow dip only; flagged
        let kernel = KernelEigensystem::diagonal(vec![0.005]);
        let p = FlowProblem::new(kernel, 2, 0.01, vec![1.0], None, FlowLoss::Mse).unwrap();
        assert!(matches!(loss_peak_time(&p), Err(Error::MonotoneLoss)));
    }

    #[test]
    fn logistic_flow_decreases_loss_then_decays() {
        let (kernel, _) = random_psd_kernel(8, 61);
        let y: Vec<f64> = random_vec(8, 62).iter().map(|v| v.signum()).collect();
        let p = FlowProblem::new(kernel, 2, 0.01, y, None, FlowLoss::LogisticNorm).unwrap();
        let grid = [0.0, 5.0, 2000.0];
        let sol = evolve_ode(&p, &grid, Some(2e-3)).unwrap();
        assert!(sol.train_loss[1] < sol.train_loss[0], "loss should fall early");
        // late times: the function decays toward zero, loss returns to the
        // zero-logit level ln(2)/4
        let l_inf = 0.25 * 2.0f64.ln();
        assert!((sol.train_loss[2] - l_inf).abs() < 0.05 * l_inf);
    }

    #[test]
    fn deep_linear_fixed_point_cases() {
        // lambda = 0: interpolation
        let fp = deep_linear_fixed_point(2, 100, 0.0, BetaMode::Ntk, 1.0, 1.0);
        assert_eq!(fp.f, 1.0);
        assert!(!fp.trivial);

        // depth 2, width 100, lambda = 0.01: |f - y| = lambda sqrt(n) = 0.1.
        // The flow-reachable branch shrinks toward zero.
        let fp = deep_linear_fixed_point(2, 100, 0.01, BetaMode::Ntk, 1.0, 1.0);
        assert!(!fp.trivial);
        assert!((fp.f - 0.9).abs() < 1e-9, "reachable root {}", fp.f);
        // both algebraic branches are reported
        assert!(fp.roots.iter().any(|r| (r - 1.1).abs() < 1e-9));
        assert!(fp.roots.iter().any(|r| (r - 0.9).abs() < 1e-9));

        // standard normalization: |f - y| = lambda, width-independent
        let fp = deep_linear_fixed_point(2, 12345, 0.25, BetaMode::Standard, 1.0, 1.0);
        assert!((fp.f - 0.75).abs() < 1e-9);

        // beyond the transition the only fixed point is trivial
        let fp = deep_linear_fixed_point(2, 100, 0.2, BetaMode::Ntk, 1.0, 1.0);
        assert!(fp.trivial);
        assert_eq!(fp.f, 0.0);
    }

    #[test]
    fn deep_linear_transition_scales_with_width() {
        // depth 2 (one hidden layer): lambda_c = y / sqrt(n)
        let l100 = deep_linear_transition_lambda(2, 100, BetaMode::Ntk, 1.0, 1.0);
        let l10k = deep_linear_transition_lambda(2, 10_000, BetaMode::Ntk, 1.0, 1.0);
        assert!((l100 - 0.1).abs() < 0.01, "lambda_c(100) = {l100}");
        assert!((l10k - 0.01).abs() < 0.001, "lambda_c(10000) = {l10k}");
        let ratio = l100 / l10k;
        assert!(ratio > 10.0 / 3.0 && ratio < 30.0, "scaling ratio {ratio}");
    }

    #[test]
    fn csv_export_shape() {
        let kernel = KernelEigensystem::diagonal(vec![1.0, 0.5]);
        let p = FlowProblem::new(kernel, 2, 0.1, vec![1.0, -1.0], None, FlowLoss::Mse).unwrap();
        let sol = closed_form_solution(&p, &[0.0, 1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,mode_index,f_value,kernel_scale,train_loss");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert_eq!(sol.kernel_scale[0], 1.0);
    }
}
