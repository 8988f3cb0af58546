//! Classical fixed-step fourth-order Runge-Kutta integration.

use crate::error::{Error, Result};

/// Integrate `d state / dt = rhs(t, state)` from `t_grid[0]`, returning the
/// state at every grid point. Grid points are snapped to whole numbers of
/// steps from the start (no interpolation): the state reported for `t` is
/// the state after `round((t - t0)/step)` steps.
///
/// The rhs writes its output into the provided buffer to keep the hot loop
/// allocation-free. A NaN/Inf state aborts with the time of blow-up.
pub fn integrate_ode<F>(
    mut rhs: F,
    state0: &[f64],
    t_grid: &[f64],
    step: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    assert!(step > 0.0, "step must be positive");
    assert!(!t_grid.is_empty(), "empty time grid");
    assert!(
        t_grid.windows(2).all(|w| w[0] < w[1]),
        "time grid must be strictly increasing"
    );

    let n = state0.len();
    let t0 = t_grid[0];
    let mut state = state0.to_vec();
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(state.clone());

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let mut steps_done: u64 = 0;
    for &t_target in &t_grid[1..] {
        let steps_needed = ((t_target - t0) / step).round() as u64;
        while steps_done < steps_needed {
            let t = t0 + steps_done as f64 * step;

            rhs(t, &state, &mut k1);
            for i in 0..n {
                tmp[i] = state[i] + 0.5 * step * k1[i];
            }
            rhs(t + 0.5 * step, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = state[i] + 0.5 * step * k2[i];
            }
            rhs(t + 0.5 * step, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = state[i] + step * k3[i];
            }
            rhs(t + step, &tmp, &mut k4);
            for i in 0..n {
                state[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            steps_done += 1;

            if state.iter().any(|x| !x.is_finite()) {
                return Err(Error::OdeBlowUp { t: t0 + steps_done as f64 * step });
            }
        }
        out.push(state.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_linear_decay() {
        // x' = -x, x(0) = 1 -> e^-1 at t = 1
        let sol = integrate_ode(|_, x, dx| dx[0] = -x[0], &[1.0], &[0.0, 1.0], 1e-3).unwrap();
        assert!((sol[1][0] - (-1.0_f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn zero_rhs_is_constant() {
        let sol = integrate_ode(
            |_, _, dx| dx.fill(0.0),
            &[3.0, -2.0],
            &[0.0, 0.5, 1.0, 2.0],
            0.01,
        )
        .unwrap();
        for s in &sol {
            assert_eq!(s, &vec![3.0, -2.0]);
        }
    }

    #[test]
    fn fourth_order_convergence() {
        // halving the step shrinks the error by >= 8x until the rounding floor
        let exact = (-2.0_f64).exp();
        let err = |h: f64| {
            let sol = integrate_ode(|_, x, dx| dx[0] = -x[0], &[1.0], &[0.0, 2.0], h).unwrap();
            (sol[1][0] - exact).abs()
        };
        let mut prev = err(0.2);
        for k in 1..5 {
            let cur = err(0.2 / 2f64.powi(k));
            if prev < 1e-13 {
                break; // rounding floor
            }
            assert!(
                cur * 8.0 <= prev * 1.05,
                "expected 4th-order error reduction, got {prev:.3e} -> {cur:.3e}"
            );
            prev = cur;
        }
    }

    #[test]
    fn blow_up_reports_time() {
        // x' = x^2 with x(0)=1 blows up at t=1
        let res = integrate_ode(|_, x, dx| dx[0] = x[0] * x[0], &[1.0], &[0.0, 2.0], 1e-3);
        match res {
            Err(Error::OdeBlowUp { t }) => assert!(t > 0.9 && t < 1.5, "blow-up at t = {t}"),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
