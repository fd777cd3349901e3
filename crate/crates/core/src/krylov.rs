//! Right-preconditioned restarted GMRES with modified Gram-Schmidt and one
//! re-orthogonalization pass.

use crate::error::Error;

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub iterations: usize,
    pub final_relres: f64,
    pub residual_history: Vec<f64>,
    pub wall_time: f64,
    pub restarts: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GmresConfig {
    pub tol: f64,
    pub restart: usize,
    pub max_iterations: usize,
}

impl Default for GmresConfig {
    fn default() -> Self {
        GmresConfig {
            tol: 1e-6,
            restart: 100,
            max_iterations: 1000,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve A x = y with right preconditioning: GMRES runs on A M and returns
/// x = M z, so the stopping criterion measures the true residual of the
/// original system. `apply_m` is expected to be a fixed linear operator.
pub fn gmres<A, M>(
    apply_a: A,
    apply_m: M,
    y: &[f64],
    config: &GmresConfig,
) -> Result<(Vec<f64>, SolverReport), Error>
where
    A: Fn(&[f64]) -> Vec<f64>,
    M: Fn(&[f64]) -> Vec<f64>,
{
    let start = std::time::Instant::now();
    let n = y.len();
    let norm_y = norm(y).max(1e-300);
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    let mut total_iters = 0usize;
    let mut restarts = 0usize;
    let restart = config.restart.max(1);

    // Initial residual (x = 0).
    let mut r = y.to_vec();
    let mut beta = norm(&r);
    history.push(beta / norm_y);
    if beta / norm_y <= config.tol {
        return Ok((
            x,
            SolverReport {
                iterations: 0,
                final_relres: beta / norm_y,
                residual_history: history,
                wall_time: start.elapsed().as_secs_f64(),
                restarts: 0,
                converged: true,
            },
        ));
    }

    'outer: while total_iters < config.max_iterations {
        // Arnoldi basis and Hessenberg entries for this cycle.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(restart + 1);
        let mut h = vec![vec![0.0f64; restart]; restart + 1];
        let mut cs = vec![0.0f64; restart];
        let mut sn = vec![0.0f64; restart];
        let mut g = vec![0.0f64; restart + 1];
        g[0] = beta;
        basis.push(r.iter().map(|v| v / beta).collect());

        let mut k_used = 0;
        for k in 0..restart {
            if total_iters >= config.max_iterations {
                break;
            }
            total_iters += 1;
            let z = apply_m(&basis[k]);
            let mut w = apply_a(&z);
            // Modified Gram-Schmidt with one re-orthogonalization pass.
            for i in 0..=k {
                let hik = dot(&basis[i], &w);
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(&basis[i]) {
                    *wj -= hik * vj;
                }
            }
            for i in 0..=k {
                let corr = dot(&basis[i], &w);
                h[i][k] += corr;
                for (wj, vj) in w.iter_mut().zip(&basis[i]) {
                    *wj -= corr * vj;
                }
            }
            let wn = norm(&w);
            if !wn.is_finite() {
                return Err(Error::Solver("non-finite Arnoldi vector".into()));
            }
            h[k + 1][k] = wn;

            // Apply accumulated Givens rotations to the new column.
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                // Happy breakdown with a zero pivot: solution already exact.
                k_used = k + 1;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];

            let relres = g[k + 1].abs() / norm_y;
            if !relres.is_finite() {
                return Err(Error::Solver("non-finite residual in GMRES".into()));
            }
            history.push(relres);
            k_used = k + 1;

            if relres <= config.tol || wn < 1e-14 * norm_y {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }

        // Back-substitute the triangular system for the cycle update.
        let mut yk = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * yk[j];
            }
            yk[i] = s / h[i][i];
        }
        let mut update = vec![0.0; n];
        for (j, &c) in yk.iter().enumerate() {
            for (u, v) in update.iter_mut().zip(&basis[j]) {
                *u += c * v;
            }
        }
        let mz = apply_m(&update);
        for (xi, zi) in x.iter_mut().zip(&mz) {
            *xi += zi;
        }

        // True residual decides convergence across restarts.
        let ax = apply_a(&x);
        r = y.iter().zip(&ax).map(|(yi, ai)| yi - ai).collect();
        beta = norm(&r);
        let relres = beta / norm_y;
        if relres <= config.tol {
            return Ok((
                x,
                SolverReport {
                    iterations: total_iters,
                    final_relres: relres,
                    residual_history: history,
                    wall_time: start.elapsed().as_secs_f64(),
                    restarts,
                    converged: true,
                },
            ));
        }
        if total_iters >= config.max_iterations {
            break 'outer;
        }
        restarts += 1;
    }

    let ax = apply_a(&x);
    let relres = norm(&y.iter().zip(&ax).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm_y;
    Ok((
        x,
        SolverReport {
            iterations: total_iters,
            final_relres: relres,
            residual_history: history,
            wall_time: start.elapsed().as_secs_f64(),
            restarts,
            converged: false,
        },
    ))
}

/// Unpreconditioned convenience wrapper.
pub fn gmres_unpreconditioned<A>(
    apply_a: A,
    y: &[f64],
    config: &GmresConfig,
) -> Result<(Vec<f64>, SolverReport), Error>
where
    A: Fn(&[f64]) -> Vec<f64>,
{
    gmres(apply_a, |v: &[f64]| v.to_vec(), y, config)
}
