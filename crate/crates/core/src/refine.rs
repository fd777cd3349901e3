//! The adaptive refinement loop: recovery-based error estimation, greedy
//! marking, narrow-gap preprocessing, quasi-uniformity enforcement, and the
//! SOLVE -> ESTIMATE -> MARK -> REFINE iteration that also produces the
//! multigrid hierarchy.

use crate::assembly::{assemble, BlockSystem, Forcing};
use crate::error::Error;
use crate::geometry::Domain;
use crate::gmls::{build_stencils, support_factor, Stencils};
use crate::krylov::GmresConfig;
use crate::multigrid::{Hierarchy, MgConfig};
use crate::point_cloud::{drop_ghosts, refine_nodes, seed_uniform, NodeSet};
use nalgebra::Matrix2;
use rayon::prelude::*;

/// Recovery-based error field: per-node indicator, volume weights, and the
/// volume-weighted global indicator normalized by the velocity-gradient
/// energy.
pub struct ErrorField {
    /// Per-node recovered error eta_i (squared-gradient units).
    pub local: Vec<f64>,
    /// Volume weight per node, dx_i^d with d = 2.
    pub volume: Vec<f64>,
    /// Global recovered error eta^r.
    pub total: f64,
}

/// Per-node indicator from cross-evaluation tables:
/// eta_i = sum_j ||R_j - G(i->j)||^2 V_j / sum_j V_j over i's neighborhood.
pub fn local_error_from_tables(
    neighbor_lists: &[Vec<usize>],
    volumes: &[f64],
    recovered: &[Matrix2<f64>],
    pair_grad: impl Fn(usize, usize) -> Matrix2<f64> + Sync,
) -> Vec<f64> {
    neighbor_lists
        .par_iter()
        .enumerate()
        .map(|(i, nbrs)| {
            let mut num = 0.0;
            let mut den = 0.0;
            for &j in nbrs {
                let gap = recovered[j] - pair_grad(i, j);
                num += gap.norm_squared() * volumes[j];
                den += volumes[j];
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect()
}

/// Global indicator: sum_i eta_i V_i / sum_i ||grad u_i||^2 V_i. All nodes
/// contribute to the denominator.
pub fn total_error(local: &[f64], volumes: &[f64], direct_grad_sq: &[f64]) -> f64 {
    let num: f64 = local
        .iter()
        .zip(volumes)
        .map(|(e, v)| e * v)
        .sum();
    let den: f64 = direct_grad_sq
        .iter()
        .zip(volumes)
        .map(|(g, v)| g * v)
        .sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Evaluate the recovery-based estimator for a converged velocity solution.
pub fn estimate(
    set: &NodeSet,
    stencils: &Stencils,
    system: &BlockSystem,
    chi: &[f64],
) -> ErrorField {
    let n = set.len();
    let map = &system.map;
    // Fit coefficients of every node's divergence-free reconstruction.
    let coeffs: Vec<nalgebra::DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let st = &stencils.divfree[i];
            let mut samples = nalgebra::DVector::zeros(2 * st.neighbors.len());
            for (k, &j) in st.neighbors.iter().enumerate() {
                samples[2 * k] = chi[map.u(j)];
                samples[2 * k + 1] = chi[map.v(j)];
            }
            st.fit(&samples)
        })
        .collect();

    let grad_at = |i: usize, x: crate::geometry::Vec2| -> Matrix2<f64> {
        stencils.divfree[i].grad_from_coeffs(&coeffs[i], x)
    };

    // Recovered gradient at each node: average of the neighbors'
    // reconstructions evaluated there.
    let recovered: Vec<Matrix2<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let nbrs = &stencils.divfree[j].neighbors;
            let mut acc = Matrix2::zeros();
            for &k in nbrs {
                acc += grad_at(k, set.nodes[j].position);
            }
            acc / nbrs.len() as f64
        })
        .collect();

    let volumes: Vec<f64> = set
        .nodes
        .iter()
        .map(|nd| nd.spacing * nd.spacing)
        .collect();
    let neighbor_lists: Vec<Vec<usize>> = (0..n)
        .map(|i| stencils.divfree[i].neighbors.clone())
        .collect();
    let local = local_error_from_tables(&neighbor_lists, &volumes, &recovered, |i, j| {
        grad_at(i, set.nodes[j].position)
    });
    let direct_sq: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| grad_at(i, set.nodes[i].position).norm_squared())
        .collect();
    let total = total_error(&local, &volumes, &direct_sq);
    ErrorField {
        local,
        volume: volumes,
        total,
    }
}

/// Greedy marking: the smallest prefix of nodes, sorted by weighted error
/// descending (ties broken by node id), whose cumulative weighted error
/// reaches the fraction `alpha` of the total.
pub fn mark(field: &ErrorField, alpha: f64) -> Vec<usize> {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    let weighted: Vec<f64> = field
        .local
        .iter()
        .zip(&field.volume)
        .map(|(e, v)| e * v)
        .collect();
    let total: f64 = weighted.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..weighted.len()).collect();
    order.sort_by(|&a, &b| weighted[b].total_cmp(&weighted[a]).then(a.cmp(&b)));
    let mut marked = Vec::new();
    let mut acc = 0.0;
    for i in order {
        if weighted[i] <= 0.0 {
            break;
        }
        marked.push(i);
        acc += weighted[i];
        if acc >= alpha * total - 1e-15 * total {
            break;
        }
    }
    marked.sort_unstable();
    marked
}

/// Check the narrow-gap rule: no boundary node may have a boundary node of a
/// different boundary inside its epsilon-neighborhood.
pub fn gap_rule_satisfied(set: &NodeSet, m: usize) -> bool {
    find_gap_violations(set, m).is_empty()
}

fn find_gap_violations(set: &NodeSet, m: usize) -> Vec<usize> {
    let c = support_factor(m);
    (0..set.len())
        .into_par_iter()
        .filter(|&i| {
            let node = &set.nodes[i];
            let Some(bid) = node.kind.boundary() else {
                return false;
            };
            if node.ghost {
                return false;
            }
            let eps = c * node.spacing;
            set.neighbors(i, eps).into_iter().any(|j| {
                set.nodes[j]
                    .kind
                    .boundary()
                    .is_some_and(|other| other != bid)
            })
        })
        .collect()
}

/// Preprocessing for narrow gaps: while any boundary node sees a different
/// boundary inside its epsilon-neighborhood, refine that node and all its
/// neighbors. During this pass children may land inside solids and are kept
/// as ghost nodes so refinement can cascade into gaps narrower than the
/// node spacing; ghosts are dropped from the final set.
pub fn preprocess_gaps(set: NodeSet, domain: &Domain, m: usize) -> Result<NodeSet, Error> {
    let c = support_factor(m);
    let mut current = set;
    for _round in 0..20 {
        let violations = find_gap_violations(&current, m);
        if violations.is_empty() {
            let cleaned = drop_ghosts(&current);
            return Ok(NodeSet::new(cleaned.nodes, 0));
        }
        let mut marked = vec![false; current.len()];
        for &i in &violations {
            marked[i] = true;
            let eps = c * current.nodes[i].spacing;
            for j in current.neighbors(i, eps) {
                marked[j] = true;
            }
        }
        current = refine_nodes(&current, domain, &marked, true).next;
    }
    Err(Error::RefinementStalled(format!(
        "gap preprocessing did not satisfy the neighborhood rule within 20 rounds ({} violations left)",
        find_gap_violations(&current, m).len()
    )))
}

/// Check quasi-uniformity: within every epsilon-neighborhood the spacing
/// ratio max(dx_j)/min(dx_k) stays at or below 2.
pub fn quasi_uniformity_satisfied(set: &NodeSet, m: usize) -> bool {
    quasi_uniform_marks(set, m).iter().all(|&m| !m)
}

fn quasi_uniform_marks(set: &NodeSet, m: usize) -> Vec<bool> {
    // Each boundary is kept uniformly sampled at its finest local rate:
    // mixed spacings along one curve cluster the staggered-fit edge
    // midpoints of the coarser nodes and their div-grad rows degenerate.
    let mut finest: std::collections::HashMap<crate::point_cloud::BoundaryRef, f64> =
        std::collections::HashMap::new();
    for n in &set.nodes {
        if let Some(b) = n.kind.boundary() {
            let e = finest.entry(b).or_insert(f64::INFINITY);
            *e = e.min(n.spacing);
        }
    }
    let boundary_marks: Vec<bool> = set
        .nodes
        .iter()
        .map(|n| {
            n.kind
                .boundary()
                .is_some_and(|b| n.spacing > finest[&b] * (1.0 + 1e-9))
        })
        .collect();

    let c = support_factor(m);
    let per_node: Vec<Vec<usize>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let eps = c * set.nodes[i].spacing;
            let nbrs = set.neighbors(i, eps);
            let mut dmax = 0.0f64;
            let mut dmin = f64::INFINITY;
            for &j in &nbrs {
                dmax = dmax.max(set.nodes[j].spacing);
                dmin = dmin.min(set.nodes[j].spacing);
            }
            let mut out: Vec<usize> = if dmax > 2.0 * dmin * (1.0 + 1e-12) {
                // Mark the coarsest nodes of the violating neighborhood.
                nbrs.iter()
                    .copied()
                    .filter(|&j| set.nodes[j].spacing > dmax * (1.0 - 1e-12))
                    .collect()
            } else {
                Vec::new()
            };
            out
        })
        .collect();
    let mut marks = boundary_marks;
    for list in per_node {
        for j in list {
            marks[j] = true;
        }
    }
    marks
}

/// Refine the coarsest nodes of every neighborhood violating the spacing
/// ratio rule until the rule holds everywhere.
pub fn enforce_quasi_uniform(set: NodeSet, domain: &Domain, m: usize) -> Result<NodeSet, Error> {
    let mut current = set;
    for _round in 0..20 {
        let marks = quasi_uniform_marks(&current, m);
        if marks.iter().all(|&m| !m) {
            return Ok(current);
        }
        current = refine_nodes(&current, domain, &marks, false).next;
    }
    Err(Error::RefinementStalled(
        "quasi-uniformity enforcement did not converge within 20 rounds".into(),
    ))
}

/// One level transition: split the marked nodes and then restore
/// quasi-uniformity, composing parent-child links across the internal
/// rounds so the restriction operator sees the net descendants.
pub struct LevelTransition {
    pub next: NodeSet,
    /// Final descendants of each coarse node; empty for carried-over nodes.
    pub children: Vec<Vec<usize>>,
    pub discarded: usize,
}

pub fn refine_level(
    set: &NodeSet,
    domain: &Domain,
    marked: &[bool],
    m: usize,
) -> Result<LevelTransition, Error> {
    let n_coarse = set.len();
    let mut outcome = refine_nodes(set, domain, marked, false);
    let mut discarded = outcome.discarded;
    // origin[f] = coarse ancestor; changed[i] = some split happened below i.
    let mut origin: Vec<usize> = outcome
        .next
        .nodes
        .iter()
        .map(|nd| nd.parent.expect("refine_nodes sets parents"))
        .collect();
    let mut changed = vec![false; n_coarse];
    for (i, ch) in outcome.children.iter().enumerate() {
        if !ch.is_empty() {
            changed[i] = true;
        }
    }
    let mut current = outcome.next;

    for round in 0..20 {
        let marks = quasi_uniform_marks(&current, m);
        if marks.iter().all(|&m| !m) {
            break;
        }
        if round == 19 {
            return Err(Error::RefinementStalled(
                "quasi-uniformity enforcement did not converge within 20 rounds".into(),
            ));
        }
        outcome = refine_nodes(&current, domain, &marks, false);
        discarded += outcome.discarded;
        let mut new_origin = Vec::with_capacity(outcome.next.len());
        for nd in &outcome.next.nodes {
            let p = nd.parent.expect("refine_nodes sets parents");
            new_origin.push(origin[p]);
        }
        for (i, ch) in outcome.children.iter().enumerate() {
            if !ch.is_empty() {
                changed[origin[i]] = true;
            }
        }
        origin = new_origin;
        current = outcome.next;
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_coarse];
    for (f, &o) in origin.iter().enumerate() {
        if changed[o] {
            children[o].push(f);
        }
    }
    // Fix the composed parent links so each fine node points at its coarse
    // ancestor.
    let mut nodes = current.nodes;
    for (f, nd) in nodes.iter_mut().enumerate() {
        nd.parent = Some(origin[f]);
    }
    let level = set.level + 1;
    Ok(LevelTransition {
        next: NodeSet::new(nodes, level),
        children,
        discarded,
    })
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub m: usize,
    pub dx0: f64,
    pub alpha: f64,
    pub eps_tol: f64,
    /// Maximum number of levels (including the initial one).
    pub max_levels: usize,
    pub gmres: GmresConfig,
    pub mg: MgConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            m: 2,
            dx0: 0.25,
            alpha: 0.8,
            eps_tol: 1e-3,
            max_levels: 10,
            gmres: GmresConfig::default(),
            mg: MgConfig::default(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub n_nodes: usize,
    pub dofs: usize,
    pub eta: f64,
    pub gmres_iterations: usize,
    pub relative_residual: f64,
    pub wall_time: f64,
}

pub struct AdaptOutcome {
    pub hierarchy: Hierarchy,
    /// Solution vector per level, in level order.
    pub solutions: Vec<Vec<f64>>,
    pub reports: Vec<LevelReport>,
    /// True when the loop stopped because eta^r reached the tolerance.
    pub converged: bool,
}

enum MarkStrategy<'a> {
    Estimator { alpha: f64, eps_tol: f64 },
    UniformLevels(&'a dyn Fn(usize) -> bool),
}

fn run_loop(
    domain: &Domain,
    forcing: &Forcing,
    cfg: &AdaptConfig,
    strategy: MarkStrategy,
) -> Result<AdaptOutcome, Error> {
    domain.validate()?;
    let mut set = seed_uniform(domain, cfg.dx0)?;
    set = preprocess_gaps(set, domain, cfg.m)?;
    set = enforce_quasi_uniform(set, domain, cfg.m)?;
    set.check_separation(1e-12)?;

    let mut hierarchy: Option<Hierarchy> = None;
    let mut solutions = Vec::new();
    let mut reports = Vec::new();
    let mut converged = false;
    let mut pending: Option<Vec<Vec<usize>>> = None;

    for level in 0..cfg.max_levels {
        let start = std::time::Instant::now();
        let stencils = build_stencils(&set, cfg.m)?;
        let system = assemble(&set, domain, &stencils, forcing)?;
        match (&mut hierarchy, pending.take()) {
            (None, _) => {
                hierarchy = Some(Hierarchy::new(set, &stencils, system, cfg.mg)?);
            }
            (Some(h), Some(children)) => {
                h.push_level(set, &stencils, system, &children)?;
            }
            (Some(_), None) => unreachable!("transition missing for level > 0"),
        }
        let hier = hierarchy.as_ref().unwrap();
        let (chi, solve_report) = hier.solve(&cfg.gmres).map_err(|e| {
            Error::Solver(format!("level {level}: {e}"))
        })?;
        let lvl = &hier.levels[hier.finest()];
        let field = estimate(&lvl.set, &stencils, &lvl.system, &chi);
        reports.push(LevelReport {
            level,
            n_nodes: lvl.set.len(),
            dofs: lvl.system.ndofs(),
            eta: field.total,
            gmres_iterations: solve_report.iterations,
            relative_residual: solve_report.final_relres,
            wall_time: start.elapsed().as_secs_f64(),
        });
        solutions.push(chi);

        let marked: Vec<bool> = match &strategy {
            MarkStrategy::Estimator { alpha, eps_tol } => {
                if field.total <= *eps_tol {
                    converged = true;
                    break;
                }
                let ids = mark(&field, *alpha);
                if ids.is_empty() {
                    converged = true;
                    break;
                }
                let mut flags = vec![false; lvl.set.len()];
                for id in ids {
                    flags[id] = true;
                }
                flags
            }
            MarkStrategy::UniformLevels(continue_fn) => {
                if !continue_fn(level) {
                    converged = true;
                    break;
                }
                vec![true; lvl.set.len()]
            }
        };
        if level + 1 >= cfg.max_levels {
            break;
        }
        let tr = refine_level(&lvl.set, domain, &marked, cfg.m)?;
        set = tr.next;
        pending = Some(tr.children);
    }

    Ok(AdaptOutcome {
        hierarchy: hierarchy.expect("at least one level"),
        solutions,
        reports,
        converged,
    })
}

/// The four-stage adaptive loop, stopping when the global recovered error
/// drops below the tolerance or the level cap is reached.
pub fn adapt_loop(
    domain: &Domain,
    forcing: &Forcing,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome, Error> {
    run_loop(
        domain,
        forcing,
        cfg,
        MarkStrategy::Estimator {
            alpha: cfg.alpha,
            eps_tol: cfg.eps_tol,
        },
    )
}

/// Uniform-refinement variant: every node is marked on each of
/// `extra_levels` transitions. Used by the convergence studies.
pub fn uniform_loop(
    domain: &Domain,
    forcing: &Forcing,
    cfg: &AdaptConfig,
    extra_levels: usize,
) -> Result<AdaptOutcome, Error> {
    let continue_fn = move |level: usize| level < extra_levels;
    let mut cfg = cfg.clone();
    cfg.max_levels = extra_levels + 1;
    run_loop(domain, forcing, &cfg, MarkStrategy::UniformLevels(&continue_fn))
}
