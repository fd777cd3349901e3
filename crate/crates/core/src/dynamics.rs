//! Rigid-body time integration over the quasi-static Stokes solve: the
//! Dormand-Prince 5(4) embedded pair with adaptive step control (the ode45
//! tableau), where each stage evaluation runs the full adaptive solve and
//! extracts the solid velocities.

use crate::assembly::Forcing;
use crate::error::Error;
use crate::geometry::{wrap_angle, Domain, Vec2};
use crate::refine::{adapt_loop, AdaptConfig, LevelReport};

/// Positions and orientations of the bodies plus the integrator clock.
#[derive(Debug, Clone)]
pub struct BodyState {
    pub positions: Vec<Vec2>,
    pub orientations: Vec<f64>,
    pub t: f64,
    pub dt: f64,
}

impl BodyState {
    pub fn from_domain(domain: &Domain, dt0: f64) -> Self {
        BodyState {
            positions: domain.bodies.iter().map(|b| b.position).collect(),
            orientations: domain.bodies.iter().map(|b| b.orientation).collect(),
            t: 0.0,
            dt: dt0,
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.positions.len());
        for (p, th) in self.positions.iter().zip(&self.orientations) {
            v.push(p.x);
            v.push(p.y);
            v.push(*th);
        }
        v
    }

    fn assign(&mut self, v: &[f64]) {
        for (k, (p, th)) in self
            .positions
            .iter_mut()
            .zip(self.orientations.iter_mut())
            .enumerate()
        {
            p.x = v[3 * k];
            p.y = v[3 * k + 1];
            *th = *v.get(3 * k + 2).unwrap_or(th);
        }
    }
}

/// Solid velocities extracted from one quasi-static solve, with the per-level
/// solver reports of the adaptive loop that produced them.
pub struct RhsEval {
    pub velocities: Vec<Vec2>,
    pub angular: Vec<f64>,
    pub reports: Vec<LevelReport>,
    pub converged: bool,
}

/// Run the full adaptive solve for the body configuration in `state` and
/// return the rigid-body velocity DOFs.
pub fn quasi_static_rhs(
    base: &Domain,
    state: &BodyState,
    forcing: &Forcing,
    cfg: &AdaptConfig,
) -> Result<RhsEval, Error> {
    let mut domain = base.clone();
    for (b, body) in domain.bodies.iter_mut().enumerate() {
        body.position = state.positions[b];
        body.orientation = wrap_angle(state.orientations[b]);
    }
    let outcome = adapt_loop(&domain, forcing, cfg)?;
    let chi = outcome.solutions.last().expect("at least one level");
    let sys = &outcome.hierarchy.levels[outcome.hierarchy.finest()].system;
    let mut velocities = Vec::with_capacity(domain.bodies.len());
    let mut angular = Vec::with_capacity(domain.bodies.len());
    for b in 0..domain.bodies.len() {
        let o = sys.map.body(b);
        velocities.push(Vec2::new(chi[o], chi[o + 1]));
        angular.push(chi[o + 2]);
    }
    Ok(RhsEval {
        velocities,
        angular,
        reports: outcome.reports,
        converged: outcome.converged,
    })
}

// Dormand-Prince 5(4) coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    /// Abort threshold for the shrinking step size.
    pub dt_min: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            rtol: 1e-5,
            atol: 1e-8,
            dt_min: 1e-8,
        }
    }
}

pub struct StepOutcome {
    pub state: BodyState,
    pub accepted_dt: f64,
    /// Step size proposed for the next step.
    pub next_dt: f64,
    pub rejections: usize,
    /// Derivative at the accepted endpoint (FSAL), reusable as the first
    /// stage of the next step.
    pub end_derivative: Vec<f64>,
    pub stage_evals: usize,
}

/// One accepted adaptive step of the Dormand-Prince 5(4) pair. `first_stage`
/// carries the FSAL derivative from the previous accepted step when
/// available; otherwise the derivative is evaluated fresh.
pub fn step_rk45<F>(
    state: &BodyState,
    mut rhs: F,
    control: &StepControl,
    first_stage: Option<Vec<f64>>,
) -> Result<StepOutcome, Error>
where
    F: FnMut(&BodyState) -> Result<Vec<f64>, Error>,
{
    let y0 = state.to_vec();
    let n = y0.len();
    let mut dt = state.dt;
    let mut rejections = 0usize;
    let mut stage_evals = 0usize;
    let k1 = match first_stage {
        Some(k) => k,
        None => {
            stage_evals += 1;
            rhs(state)?
        }
    };

    loop {
        if dt < control.dt_min {
            return Err(Error::TimeIntegration(format!(
                "step size underflow: dt = {dt:.3e} at t = {}",
                state.t
            )));
        }
        let mut k = vec![k1.clone()];
        for stage in 0..6 {
            let mut y = y0.clone();
            for (s, ks) in k.iter().enumerate() {
                let a = A[stage][s];
                if a != 0.0 {
                    for (yi, ki) in y.iter_mut().zip(ks) {
                        *yi += dt * a * ki;
                    }
                }
            }
            let mut probe = state.clone();
            probe.assign(&y);
            probe.t = state.t + dt;
            stage_evals += 1;
            k.push(rhs(&probe)?);
        }

        // 5th-order solution and embedded 4th-order error estimate.
        let mut y5 = y0.clone();
        let mut err = vec![0.0; n];
        for s in 0..7 {
            for i in 0..n {
                y5[i] += dt * B5[s] * k[s][i];
                err[i] += dt * (B5[s] - B4[s]) * k[s][i];
            }
        }
        let mut err_norm = 0.0f64;
        for i in 0..n {
            let scale = control.atol + control.rtol * y0[i].abs().max(y5[i].abs());
            err_norm = err_norm.max((err[i] / scale).abs());
        }
        if !err_norm.is_finite() {
            return Err(Error::TimeIntegration("non-finite step error".into()));
        }

        let factor = if err_norm == 0.0 {
            5.0
        } else {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        if err_norm <= 1.0 {
            let mut new_state = state.clone();
            new_state.assign(&y5);
            for th in new_state.orientations.iter_mut() {
                *th = wrap_angle(*th);
            }
            new_state.t = state.t + dt;
            new_state.dt = dt * factor;
            // k7 is the derivative at (t + dt, y5): the FSAL stage.
            let end_derivative = k[6].clone();
            return Ok(StepOutcome {
                state: new_state,
                accepted_dt: dt,
                next_dt: dt * factor,
                rejections,
                end_derivative,
                stage_evals,
            });
        }
        rejections += 1;
        dt *= factor;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_body_state(x: f64, dt: f64) -> BodyState {
        BodyState {
            positions: vec![Vec2::new(x, 0.0)],
            orientations: vec![0.0],
            t: 0.0,
            dt,
        }
    }

    #[test]
    fn constant_rhs_is_exact() {
        let state = one_body_state(1.0, 0.5);
        let c = Vec2::new(0.3, -0.7);
        let out = step_rk45(
            &state,
            |_s| Ok(vec![c.x, c.y, 0.25]),
            &StepControl::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.rejections, 0);
        assert_relative_eq!(out.state.positions[0].x, 1.0 + c.x * 0.5, epsilon = 1e-14);
        assert_relative_eq!(out.state.positions[0].y, c.y * 0.5, epsilon = 1e-14);
        assert_relative_eq!(out.state.orientations[0], 0.125, epsilon = 1e-14);
        // Polynomial exactness drives the error estimate to zero, so the
        // controller grows the step by its maximum factor.
        assert_relative_eq!(out.next_dt, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        // x' = -x with x(0) = 1, integrated to t = 1.
        let control = StepControl {
            rtol: 1e-5,
            atol: 1e-10,
            dt_min: 1e-12,
        };
        let mut state = one_body_state(1.0, 0.2);
        let mut fsal: Option<Vec<f64>> = None;
        let rhs = |s: &BodyState| Ok(vec![-s.positions[0].x, 0.0, 0.0]);
        while state.t < 1.0 {
            let remaining = 1.0 - state.t;
            if state.dt > remaining {
                state.dt = remaining;
                fsal = None;
            }
            let out = step_rk45(&state, rhs, &control, fsal.take()).unwrap();
            state = out.state;
            fsal = Some(out.end_derivative);
        }
        assert_relative_eq!(state.positions[0].x, (-1.0f64).exp(), epsilon = 1e-5);
    }

    #[test]
    fn oversized_step_gets_rejected_then_recovers() {
        let control = StepControl {
            rtol: 1e-8,
            atol: 1e-12,
            dt_min: 1e-12,
        };
        // Fast decay with a huge initial step forces at least one rejection.
        let state = one_body_state(1.0, 10.0);
        let out = step_rk45(
            &state,
            |s| Ok(vec![-40.0 * s.positions[0].x, 0.0, 0.0]),
            &control,
            None,
        )
        .unwrap();
        assert!(out.rejections >= 1, "expected a rejection");
        assert!(out.accepted_dt < 10.0);
        // The accepted step agrees with the analytic solution to its
        // tolerance scale.
        let exact = (-40.0 * out.accepted_dt).exp();
        assert!(
            (out.state.positions[0].x - exact).abs() < 1e-6,
            "{} vs {exact}",
            out.state.positions[0].x
        );
    }

    #[test]
    fn zero_angular_velocity_keeps_orientation() {
        let mut state = BodyState {
            positions: vec![Vec2::zeros(), Vec2::new(0.5, 0.5)],
            orientations: vec![0.3, -1.2],
            t: 0.0,
            dt: 0.1,
        };
        let rhs = |s: &BodyState| {
            Ok(vec![
                -s.positions[0].y,
                s.positions[0].x,
                0.0,
                0.2,
                0.1,
                0.0,
            ])
        };
        for _ in 0..5 {
            let out = step_rk45(&state, rhs, &StepControl::default(), None).unwrap();
            state = out.state;
        }
        assert_relative_eq!(state.orientations[0], 0.3, epsilon = 1e-13);
        assert_relative_eq!(state.orientations[1], -1.2, epsilon = 1e-13);
    }

    #[test]
    fn step_underflow_aborts() {
        let control = StepControl {
            rtol: 1e-14,
            atol: 1e-16,
            dt_min: 1e-8,
        };
        let state = one_body_state(1.0, 1.0);
        // A discontinuous right-hand side never meets the tolerance.
        let mut flip = false;
        let res = step_rk45(
            &state,
            move |_s| {
                flip = !flip;
                Ok(vec![if flip { 1e6 } else { -1e6 }, 0.0, 0.0])
            },
            &control,
            None,
        );
        assert!(matches!(res, Err(Error::TimeIntegration(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let control = StepControl::default();
        let rhs = |s: &BodyState| {
            Ok(vec![
                (s.t + s.positions[0].x).sin(),
                s.positions[0].x * 0.5,
                0.1,
            ])
        };
        let run = || {
            let mut state = one_body_state(0.7, 0.2);
            let mut trace = Vec::new();
            for _ in 0..4 {
                let out = step_rk45(&state, rhs, &control, None).unwrap();
                state = out.state;
                trace.push((
                    state.t.to_bits(),
                    state.positions[0].x.to_bits(),
                    state.positions[0].y.to_bits(),
                    state.orientations[0].to_bits(),
                ));
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
