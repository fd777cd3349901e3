//! Assembly of the monolithic block linear system and its right-hand side.
//!
//! DOF layout: per-node (u, v, p) interleaved, then 3 DOFs per solid body
//! (X_dot_x, X_dot_y, Theta_dot). Row meanings:
//!   interior node:  nu curl-curl u + grad p / rho = f   and  -lap p / rho = -div f
//!   wall node:      u = w (identity)                    and  the boundary pressure row
//!   solid node:     u - X_dot - Theta_dot x (x - X) = 0 and  the boundary pressure row
//!   per solid:      force and torque balance from the boundary quadrature
//!
//! The boundary pressure row collocates -lap_h p / rho = -div f with the
//! inhomogeneous Neumann condition n . grad_h p = rho (n.f - nu n.curl-curl u)
//! imposed exactly inside the constrained staggered fit; the constraint
//! sensitivity contributes the velocity (B-block) entries and carries n . f
//! onto the right-hand side.
//!
//! The zero-mean pressure constraint is fused into the operator application:
//! input pressure is projected, pressure-row output is projected, and the
//! removed constant mode is carried through so the operator stays nonsingular.

use crate::error::Error;
use crate::geometry::{Domain, Vec2};
use crate::gmls::{build_scalar_stencil, Stencils};
use crate::point_cloud::{NodeKind, NodeSet};
use crate::sparse::CsrMatrix;
use rayon::prelude::*;
use std::sync::Arc;

pub type FieldFn = Arc<dyn Fn(Vec2) -> Vec2 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(Vec2) -> f64 + Send + Sync>;

/// Problem data: body force, optionally its analytic divergence, and the
/// outer-wall velocity. Obstacle walls are always no-slip.
#[derive(Clone)]
pub struct Forcing {
    pub body_force: FieldFn,
    pub div_force: Option<ScalarFn>,
    pub wall_velocity: FieldFn,
}

impl Forcing {
    pub fn quiescent() -> Self {
        Forcing {
            body_force: Arc::new(|_| Vec2::zeros()),
            div_force: Some(Arc::new(|_| 0.0)),
            wall_velocity: Arc::new(|_| Vec2::zeros()),
        }
    }
}

/// DOF indexing for one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofMap {
    pub n_nodes: usize,
    pub n_bodies: usize,
}

impl DofMap {
    pub fn u(&self, i: usize) -> usize {
        3 * i
    }
    pub fn v(&self, i: usize) -> usize {
        3 * i + 1
    }
    pub fn p(&self, i: usize) -> usize {
        3 * i + 2
    }
    /// First DOF of body n: translational x, then y, then angular.
    pub fn body(&self, n: usize) -> usize {
        3 * self.n_nodes + 3 * n
    }
    pub fn total(&self) -> usize {
        3 * self.n_nodes + 3 * self.n_bodies
    }
    pub fn is_pressure(&self, dof: usize) -> bool {
        dof < 3 * self.n_nodes && dof % 3 == 2
    }
    pub fn is_solid(&self, dof: usize) -> bool {
        dof >= 3 * self.n_nodes
    }
}

/// Labeled blocks of the monolithic matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    K,
    G,
    C,
    B,
    L,
    D,
    T,
}

/// Classify a nonzero by its row/column DOF types. Velocity identity rows on
/// boundary nodes count as K, matching the block map of the coefficient
/// matrix.
pub fn block_of(map: &DofMap, row: usize, col: usize) -> Option<Block> {
    let row_kind = if map.is_solid(row) {
        2
    } else if map.is_pressure(row) {
        1
    } else {
        0
    };
    let col_kind = if map.is_solid(col) {
        2
    } else if map.is_pressure(col) {
        1
    } else {
        0
    };
    match (row_kind, col_kind) {
        (0, 0) => Some(Block::K),
        (0, 1) => Some(Block::G),
        (0, 2) => Some(Block::C),
        (1, 0) => Some(Block::B),
        (1, 1) => Some(Block::L),
        (2, 0) => Some(Block::D),
        (2, 1) => Some(Block::T),
        _ => None,
    }
}

/// Assembled system for one refinement level.
pub struct BlockSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub map: DofMap,
    pressure_dofs: Vec<usize>,
}

impl BlockSystem {
    /// Wrap a bare matrix (e.g. a Galerkin coarse product) in the block
    /// bookkeeping of a level; the right-hand side is unused.
    pub fn raw(matrix: CsrMatrix, map: DofMap) -> Self {
        let rhs = vec![0.0; map.total()];
        let pressure_dofs = (0..map.n_nodes).map(|i| map.p(i)).collect();
        BlockSystem {
            matrix,
            rhs,
            map,
            pressure_dofs,
        }
    }

    pub fn shallow_clone(&self) -> Self {
        BlockSystem {
            matrix: self.matrix.clone(),
            rhs: self.rhs.clone(),
            map: self.map,
            pressure_dofs: self.pressure_dofs.clone(),
        }
    }

    pub fn ndofs(&self) -> usize {
        self.map.total()
    }

    pub fn pressure_dofs(&self) -> &[usize] {
        &self.pressure_dofs
    }

    fn pressure_mean(&self, x: &[f64]) -> f64 {
        let s: f64 = self.pressure_dofs.iter().map(|&d| x[d]).sum();
        s / self.pressure_dofs.len() as f64
    }

    /// Matrix-free application of the zero-mean-projected operator. The
    /// constant pressure mode is mapped to itself so the operator stays
    /// nonsingular on the full space.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let pm = self.pressure_mean(x);
        let mut xp = x.to_vec();
        for &d in &self.pressure_dofs {
            xp[d] -= pm;
        }
        let mut y = self.matrix.mul_vec_alloc(&xp);
        let ym = self.pressure_mean(&y);
        for &d in &self.pressure_dofs {
            y[d] += pm - ym;
        }
        y
    }

    /// Project the pressure rows of a right-hand side to zero mean.
    pub fn project_rhs(&self, y: &mut [f64]) {
        let ym = self.pressure_mean(y);
        for &d in &self.pressure_dofs {
            y[d] -= ym;
        }
    }

    pub fn projected_rhs(&self) -> Vec<f64> {
        let mut y = self.rhs.clone();
        self.project_rhs(&mut y);
        y
    }

    /// Residual of the projected system at `x`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let ax = self.apply(x);
        self.projected_rhs()
            .iter()
            .zip(&ax)
            .map(|(y, a)| y - a)
            .collect()
    }
}

/// Subtract the mean from a pressure-sized vector (the zero-mean projector,
/// applied matrix-free).
pub fn zero_mean_apply(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn wall_velocity_at(forcing: &Forcing, kind: NodeKind, x: Vec2) -> Vec2 {
    match kind {
        NodeKind::Wall(0) => (forcing.wall_velocity)(x),
        NodeKind::Wall(_) => Vec2::zeros(),
        _ => unreachable!("wall velocity requested for non-wall node"),
    }
}

/// Assemble the monolithic block system for one node set.
pub fn assemble(
    set: &NodeSet,
    domain: &Domain,
    stencils: &Stencils,
    forcing: &Forcing,
) -> Result<BlockSystem, Error> {
    let n = set.len();
    if stencils.divfree.len() != n || stencils.staggered.len() != n {
        return Err(Error::Assembly(format!(
            "stencil count {} / {} does not match node count {n}",
            stencils.divfree.len(),
            stencils.staggered.len()
        )));
    }
    if set.nodes.iter().any(|nd| nd.ghost) {
        return Err(Error::Assembly(
            "node set still contains preprocessing ghost nodes".into(),
        ));
    }
    let map = DofMap {
        n_nodes: n,
        n_bodies: domain.bodies.len(),
    };
    let nu = domain.nu;
    let inv_rho = 1.0 / domain.rho;

    // Divergence of the body force: analytic when provided, otherwise a
    // scalar GMLS differentiation of sampled values.
    let div_f: Vec<f64> = match &forcing.div_force {
        Some(df) => set.nodes.iter().map(|nd| df(nd.position)).collect(),
        None => {
            let rows: Result<Vec<f64>, Error> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let st = build_scalar_stencil(set, i, stencils.m)?;
                    let (rx, ry) = st.grad_rows(st.center);
                    let mut acc = 0.0;
                    for (k, &j) in st.neighbors.iter().enumerate() {
                        let f = (forcing.body_force)(set.nodes[j].position);
                        acc += rx[k] * f.x + ry[k] * f.y;
                    }
                    Ok(acc)
                })
                .collect();
            rows?
        }
    };

    let node_rows: Vec<[(Vec<(usize, f64)>, f64); 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let node = &set.nodes[i];
            let x = node.position;
            let f = (forcing.body_force)(x);
            let dfs = &stencils.divfree[i];
            let stg = &stencils.staggered[i];

            let mut u_row: Vec<(usize, f64)> = Vec::new();
            let mut v_row: Vec<(usize, f64)> = Vec::new();
            let mut p_row: Vec<(usize, f64)> = Vec::new();
            let (u_rhs, v_rhs, p_rhs);

            match node.kind {
                NodeKind::Interior => {
                    // nu curl-curl u + grad p / rho = f
                    let (ccx, ccy) = dfs.curl_curl_rows(x);
                    for (k, &j) in dfs.neighbors.iter().enumerate() {
                        u_row.push((map.u(j), nu * ccx[2 * k]));
                        u_row.push((map.v(j), nu * ccx[2 * k + 1]));
                        v_row.push((map.u(j), nu * ccy[2 * k]));
                        v_row.push((map.v(j), nu * ccy[2 * k + 1]));
                    }
                    let (gx, gy) = stg.grad();
                    let mut sum_x = 0.0;
                    let mut sum_y = 0.0;
                    for (k, &j) in stg.neighbors.iter().enumerate() {
                        u_row.push((map.p(j), inv_rho * gx.edge_weights[k]));
                        v_row.push((map.p(j), inv_rho * gy.edge_weights[k]));
                        sum_x += gx.edge_weights[k];
                        sum_y += gy.edge_weights[k];
                    }
                    u_row.push((map.p(i), -inv_rho * sum_x));
                    v_row.push((map.p(i), -inv_rho * sum_y));

                    // -lap p / rho = -div f
                    let lap = stg.laplacian();
                    let mut sum = 0.0;
                    for (k, &j) in stg.neighbors.iter().enumerate() {
                        p_row.push((map.p(j), -inv_rho * lap.edge_weights[k]));
                        sum += lap.edge_weights[k];
                    }
                    p_row.push((map.p(i), inv_rho * sum));

                    u_rhs = f.x;
                    v_rhs = f.y;
                    p_rhs = -div_f[i];
                }
                NodeKind::Wall(_) | NodeKind::SolidBoundary(_) => {
                    let normal = node.normal.expect("boundary node carries a normal");
                    u_row.push((map.u(i), 1.0));
                    v_row.push((map.v(i), 1.0));
                    match node.kind {
                        NodeKind::Wall(_) => {
                            let w = wall_velocity_at(forcing, node.kind, x);
                            u_rhs = w.x;
                            v_rhs = w.y;
                        }
                        NodeKind::SolidBoundary(b) => {
                            // u - X_dot - Theta_dot x (x - X) = 0
                            let body = &domain.bodies[b];
                            let r = x - body.position;
                            let o = map.body(b);
                            u_row.push((o, -1.0));
                            u_row.push((o + 2, r.y));
                            v_row.push((o + 1, -1.0));
                            v_row.push((o + 2, -r.x));
                            u_rhs = 0.0;
                            v_rhs = 0.0;
                        }
                        NodeKind::Interior => unreachable!(),
                    }

                    // Constrained pressure Poisson row from the nodal
                    // boundary fit: -(1/rho) lap_h p = -div f with the
                    // Neumann data g = rho (n.f - nu n.curl-curl u) folded
                    // in through the constraint sensitivity. The row is
                    // scaled by the node spacing so the constraint channel
                    // (which grows like 1/dx) stays level-uniform under the
                    // multigrid restriction.
                    let bp = stencils.boundary_pressure[i]
                        .as_ref()
                        .expect("boundary node carries a constrained pressure fit");
                    let (lap_w, lg) = bp.laplacian();
                    let scale = node.spacing;
                    for (k, &j) in bp.neighbors.iter().enumerate() {
                        p_row.push((map.p(j), -scale * inv_rho * lap_w[k]));
                    }
                    let (ccx, ccy) = dfs.curl_curl_rows(x);
                    for (k, &j) in dfs.neighbors.iter().enumerate() {
                        let cu = scale * nu * lg * (normal.x * ccx[2 * k] + normal.y * ccy[2 * k]);
                        let cv = scale
                            * nu
                            * lg
                            * (normal.x * ccx[2 * k + 1] + normal.y * ccy[2 * k + 1]);
                        p_row.push((map.u(j), cu));
                        p_row.push((map.v(j), cv));
                    }
                    p_rhs = scale * (-div_f[i] + lg * normal.dot(&f));
                }
            }
            [(u_row, u_rhs), (v_row, v_rhs), (p_row, p_rhs)]
        })
        .collect();

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(map.total());
    let mut rhs = Vec::with_capacity(map.total());
    for triple in node_rows {
        for (row, b) in triple {
            rows.push(row);
            rhs.push(b);
        }
    }
    for bindex in 0..domain.bodies.len() {
        let (frows, frhs) = force_torque_rows(set, domain, stencils, bindex, &map)?;
        for (row, b) in frows.into_iter().zip(frhs) {
            rows.push(row);
            rhs.push(b);
        }
    }

    let matrix = CsrMatrix::from_rows(map.total(), map.total(), rows);
    let pressure_dofs = (0..n).map(|i| map.p(i)).collect();
    Ok(BlockSystem {
        matrix,
        rhs,
        map,
        pressure_dofs,
    })
}

/// The three quadrature rows (force x, force y, torque) for one body:
/// sum_i sigma_h(x_i) . (dA_i n_i) + f_e = 0, with
/// sigma = -p I + nu (grad u + grad u^T).
pub fn force_torque_rows(
    set: &NodeSet,
    domain: &Domain,
    stencils: &Stencils,
    body_index: usize,
    map: &DofMap,
) -> Result<(Vec<Vec<(usize, f64)>>, Vec<f64>), Error> {
    let body = &domain.bodies[body_index];
    let nu = domain.nu;
    let mut fx_row: Vec<(usize, f64)> = Vec::new();
    let mut fy_row: Vec<(usize, f64)> = Vec::new();
    let mut tq_row: Vec<(usize, f64)> = Vec::new();

    for (i, node) in set.nodes.iter().enumerate() {
        if node.kind != NodeKind::SolidBoundary(body_index) {
            continue;
        }
        let normal = node.normal.expect("boundary node carries a normal");
        let da = node.arc_weight;
        let r = node.position - body.position;

        // Pressure part: -p (dA n); torque arm r x t.
        fx_row.push((map.p(i), -da * normal.x));
        fy_row.push((map.p(i), -da * normal.y));
        tq_row.push((map.p(i), -da * (r.x * normal.y - r.y * normal.x)));

        // Viscous part: nu (grad u + grad u^T) . (dA n).
        let dfs = &stencils.divfree[i];
        let g = dfs.grad_rows(node.position);
        for (k, &j) in dfs.neighbors.iter().enumerate() {
            for comp in 0..2 {
                let uxx = g[0][2 * k + comp];
                let uxy = g[1][2 * k + comp];
                let vxx = g[2][2 * k + comp];
                let vxy = g[3][2 * k + comp];
                let tx = nu * da * (2.0 * normal.x * uxx + normal.y * (uxy + vxx));
                let ty = nu * da * (normal.x * (uxy + vxx) + 2.0 * normal.y * vxy);
                let col = if comp == 0 { map.u(j) } else { map.v(j) };
                fx_row.push((col, tx));
                fy_row.push((col, ty));
                tq_row.push((col, r.x * ty - r.y * tx));
            }
        }
    }

    if fx_row.is_empty() {
        return Err(Error::Assembly(format!(
            "body {body_index} has no boundary nodes in the set"
        )));
    }
    let rhs = vec![
        -body.external_force.x,
        -body.external_force.y,
        -body.external_torque,
    ];
    Ok((vec![fx_row, fy_row, tq_row], rhs))
}
