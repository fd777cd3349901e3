//! Monolithic geometric multigrid preconditioner: level transfer operators
//! built from the refinement hierarchy, a two-stage physics-split smoother,
//! and the V-cycle.
//!
//! Interpolation is a GMLS approximation from coarse-level source nodes to
//! fine-level targets (scalar basis for pressure, divergence-free basis for
//! velocity, identity for solid DOFs and for carried-over nodes).
//! Restriction averages a refined parent's surviving children and is the
//! identity elsewhere. The coarsest level is solved directly from a dense
//! factorization with the zero-mean pressure projection pinned.

use crate::assembly::BlockSystem;
use crate::error::Error;
use crate::gmls::{cross_divfree_value_rows, cross_scalar_value_row, support_factor, Stencils};
use crate::krylov::{gmres, GmresConfig, SolverReport};
use crate::point_cloud::{NodeKind, NodeSet};
use crate::sparse::CsrMatrix;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

/// Fluid-stage relaxation variant.
///
/// `NodeBlockGs` is the node-wise block Gauss-Seidel sweep: forward passes
/// updating each node's (u, v, p) triple by inverting its 3x3 diagonal
/// block against the current residual. It is the method of choice on
/// uniformly refined node sets, where it yields level-independent GMRES
/// counts, but its triangular cascade is violently unstable on the graded
/// sets produced by adaptive refinement (the boundary div-grad rows lose
/// any usable diagonal there).
///
/// `RowProjection` replaces each block update by the orthogonal projection
/// of the iterate onto the solution set of the node's three rows
/// (chi += A_i^T (A_i A_i^T)^-1 r_i, swept forward then backward). It is
/// non-expansive for any nonsingular system and is the default for
/// adaptive runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmootherKind {
    NodeBlockGs,
    RowProjection,
}

#[derive(Debug, Clone, Copy)]
pub struct MgConfig {
    pub smoother: SmootherKind,
    /// Sweeps per smoothing stage.
    pub k_sweeps: usize,
    /// Relaxation factor of the node-wise updates.
    pub omega: f64,
}

impl Default for MgConfig {
    fn default() -> Self {
        MgConfig {
            smoother: SmootherKind::NodeBlockGs,
            k_sweeps: 3,
            omega: 1.0,
        }
    }
}

/// Per-solid smoother data: the submatrix over the solid's boundary nodes,
/// their epsilon-neighborhoods, and the solid's own DOFs, with the
/// approximate Schur complement of the solid block.
struct SolidSmoother {
    /// Global DOFs: (u, v, p) triples of the Q_n nodes, then the 3 solid DOFs.
    dofs: Vec<usize>,
    n_fluid: usize,
    sub: CsrMatrix,
    /// Fluid part F_n^C of the submatrix (fluid rows and columns only).
    fsub: CsrMatrix,
    /// Row-block Gram inverses of F_n^C for the projection sweep.
    fluid_grams: Vec<Matrix3<f64>>,
    /// Inverted 3x3 diagonal blocks of F_n^C for the Schur approximation.
    fluid_diag: Vec<Matrix3<f64>>,
    psi_inv: Matrix3<f64>,
}

/// Smoother state for one level: per-node row-block Gram inverses for the
/// node-wise sweep plus the per-solid Schur data.
///
/// The fluid sweep visits one node at a time in node order like a
/// Gauss-Seidel pass, but each (u, v, p) block update is the orthogonal
/// projection of the iterate onto the solution set of that node's three
/// rows (chi += A_i^T (A_i A_i^T)^-1 r_i). On adaptively graded node sets
/// the 3x3-diagonal-block sweep is violently unstable (boundary pressure
/// rows on mixed-spacing stencils lose diagonal dominance entirely), while
/// the projection update is non-expansive for any nonsingular system and
/// damps the same high-frequency content.
pub struct SmootherState {
    node_grams: Vec<Matrix3<f64>>,
    node_diags: Vec<Matrix3<f64>>,
    is_boundary: Vec<bool>,
    solids: Vec<SolidSmoother>,
}

/// Gram matrix of three consecutive sparse rows (base .. base+3).
fn row_block_gram(matrix: &CsrMatrix, base: usize) -> Matrix3<f64> {
    let mut g = Matrix3::zeros();
    for r in 0..3 {
        for c in r..3 {
            let (cr, vr) = matrix.row(base + r);
            let (cc, vc) = matrix.row(base + c);
            let mut dot = 0.0;
            let (mut p, mut q) = (0, 0);
            while p < cr.len() && q < cc.len() {
                match cr[p].cmp(&cc[q]) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        dot += vr[p] * vc[q];
                        p += 1;
                        q += 1;
                    }
                }
            }
            g[(r, c)] = dot;
            g[(c, r)] = dot;
        }
    }
    g
}

fn invert_block(block: Matrix3<f64>, context: &str) -> Matrix3<f64> {
    match block.try_inverse() {
        Some(inv) => inv,
        None => {
            eprintln!("warning: singular 3x3 diagonal block in {context}; regularizing");
            let shifted = block + Matrix3::identity() * 1e-12;
            shifted.try_inverse().unwrap_or_else(Matrix3::identity)
        }
    }
}

fn diag_block(matrix: &CsrMatrix, base: usize) -> Matrix3<f64> {
    let mut b = Matrix3::zeros();
    for r in 0..3 {
        let (cols, vals) = matrix.row(base + r);
        for (&c, &v) in cols.iter().zip(vals) {
            if c >= base && c < base + 3 {
                b[(r, c - base)] = v;
            }
        }
    }
    b
}

impl SmootherState {
    pub fn build(
        system: &BlockSystem,
        solid_q: &[Vec<usize>],
        is_boundary: Vec<bool>,
    ) -> Result<Self, Error> {
        let n = system.map.n_nodes;
        let map = &system.map;
        let node_grams: Vec<Matrix3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| invert_block(row_block_gram(&system.matrix, map.u(i)), "fluid smoother"))
            .collect();
        let node_diags: Vec<Matrix3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| invert_block(diag_block(&system.matrix, map.u(i)), "fluid smoother"))
            .collect();

        let mut solids = Vec::new();
        for b in 0..map.n_bodies {
            let q_nodes = &solid_q[b];
            if q_nodes.is_empty() {
                return Err(Error::Solver(format!("solid {b} has no smoother nodes")));
            }
            let mut dofs = Vec::with_capacity(3 * q_nodes.len() + 3);
            for &i in q_nodes {
                dofs.extend_from_slice(&[map.u(i), map.v(i), map.p(i)]);
            }
            let o = map.body(b);
            dofs.extend_from_slice(&[o, o + 1, o + 2]);
            let sub = system.matrix.extract(&dofs);
            let n_fluid = 3 * q_nodes.len();
            let fsub = system.matrix.extract(&dofs[..n_fluid]);

            let fluid_grams: Vec<Matrix3<f64>> = (0..q_nodes.len())
                .map(|k| invert_block(row_block_gram(&fsub, 3 * k), "solid smoother"))
                .collect();
            let fluid_diag: Vec<Matrix3<f64>> = (0..q_nodes.len())
                .map(|k| invert_block(diag_block(&fsub, 3 * k), "solid Schur diagonal"))
                .collect();

            // Approximate Schur complement of the zero solid-solid block:
            // psi = -[D T] blockdiag(F)^-1 [C; 0], inverted directly.
            let mut psi = Matrix3::zeros();
            for col in 0..3 {
                // C' e_col restricted to fluid rows.
                let mut ce = vec![0.0; n_fluid];
                for (r, item) in ce.iter_mut().enumerate() {
                    let (cols, vals) = sub.row(r);
                    for (&c, &v) in cols.iter().zip(vals) {
                        if c == n_fluid + col {
                            *item = v;
                        }
                    }
                }
                // blockdiag^-1 applied per node triple.
                let mut t = vec![0.0; n_fluid];
                for (k, inv) in fluid_diag.iter().enumerate() {
                    let r = Vector3::new(ce[3 * k], ce[3 * k + 1], ce[3 * k + 2]);
                    let z = inv * r;
                    t[3 * k] = z[0];
                    t[3 * k + 1] = z[1];
                    t[3 * k + 2] = z[2];
                }
                // Rows D, T of the submatrix times t.
                for row in 0..3 {
                    let (cols, vals) = sub.row(n_fluid + row);
                    let mut acc = 0.0;
                    for (&c, &v) in cols.iter().zip(vals) {
                        if c < n_fluid {
                            acc += v * t[c];
                        }
                    }
                    psi[(row, col)] = -acc;
                }
            }
            let psi_inv = psi.try_inverse().ok_or_else(|| {
                Error::Solver(format!(
                    "singular approximate Schur complement for solid {b}"
                ))
            })?;

            solids.push(SolidSmoother {
                dofs,
                n_fluid,
                sub,
                fsub,
                fluid_grams,
                fluid_diag,
                psi_inv,
            });
        }

        Ok(SmootherState {
            node_grams,
            node_diags,
            is_boundary,
            solids,
        })
    }

    /// One forward node-wise sweep on the fluid DOFs of the full system:
    /// each node's (u, v, p) triple of rows is satisfied in turn by the
    /// minimal-norm update of the current iterate, in node order.
    /// One fluid-stage sweep; see [`SmootherKind`] for the two variants.
    fn fluid_sweep(
        &self,
        system: &BlockSystem,
        y: &[f64],
        chi: &mut [f64],
        kind: SmootherKind,
        omega: f64,
    ) {
        let map = &system.map;
        let a = &system.matrix;
        let n = self.node_grams.len();
        let passes = match kind {
            SmootherKind::NodeBlockGs => 1,
            SmootherKind::RowProjection => 2,
        };
        for pass in 0..passes {
            for k in 0..n {
                let i = if pass == 0 { k } else { n - 1 - k };
                let base = map.u(i);
                let r = Vector3::new(
                    y[base] - a.row_dot(base, chi),
                    y[base + 1] - a.row_dot(base + 1, chi),
                    y[base + 2] - a.row_dot(base + 2, chi),
                );
                match kind {
                    SmootherKind::NodeBlockGs => {
                        let d = self.node_diags[i] * r * omega;
                        chi[base] += d[0];
                        chi[base + 1] += d[1];
                        chi[base + 2] += d[2];
                    }
                    SmootherKind::RowProjection => {
                        let t = self.node_grams[i] * r * omega;
                        for row in 0..3 {
                            let (cols, vals) = a.row(base + row);
                            for (&c, &v) in cols.iter().zip(vals) {
                                chi[c] += v * t[row];
                            }
                        }
                    }
                }
            }
        }
    }

    /// One node-wise projection sweep on F_n^C from a zero initial guess:
    /// the approximate inverse used inside the Schur product.
    fn sub_fluid_sweep(&self, s: &SolidSmoother, rhs: &[f64], omega: f64) -> Vec<f64> {
        let mut z = vec![0.0; s.n_fluid];
        for (k, gram_inv) in s.fluid_grams.iter().enumerate() {
            let base = 3 * k;
            let r = Vector3::new(
                rhs[base] - s.fsub.row_dot(base, &z),
                rhs[base + 1] - s.fsub.row_dot(base + 1, &z),
                rhs[base + 2] - s.fsub.row_dot(base + 2, &z),
            );
            let t = gram_inv * r * omega;
            for row in 0..3 {
                let (cols, vals) = s.fsub.row(base + row);
                for (&c, &v) in cols.iter().zip(vals) {
                    z[c] += v * t[row];
                }
            }
        }
        z
    }

    /// Approximate inverse of the solid submatrix applied to a local
    /// residual, via the triangular Schur-complement product.
    fn solid_correction(&self, s: &SolidSmoother, r_local: &[f64], omega: f64) -> Vec<f64> {
        let nf = s.n_fluid;
        // Lower factor: t_s = r_s - [D T] Ftilde^-1 r_F.
        let t1 = self.sub_fluid_sweep(s, &r_local[..nf], omega);
        let mut ts = Vector3::zeros();
        for row in 0..3 {
            let mut acc = r_local[nf + row];
            let (cols, vals) = s.sub.row(nf + row);
            for (&c, &v) in cols.iter().zip(vals) {
                if c < nf {
                    acc -= v * t1[c];
                }
            }
            ts[row] = acc;
        }
        // Diagonal factor.
        let zs = s.psi_inv * ts;
        // Upper factor: z_F = t1 - Ftilde^-1 (C' z_s).
        let mut czs = vec![0.0; s.dofs.len()];
        for (r, item) in czs.iter_mut().enumerate().take(nf) {
            let (cols, vals) = s.sub.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if c >= nf {
                    *item += v * zs[c - nf];
                }
            }
        }
        let t2 = self.sub_fluid_sweep(s, &czs, omega);
        let mut z = vec![0.0; s.dofs.len()];
        for k in 0..nf {
            z[k] = t1[k] - t2[k];
        }
        z[nf] = zs[0];
        z[nf + 1] = zs[1];
        z[nf + 2] = zs[2];
        z
    }

    /// Additive Schwarz correction over all solids against the projected
    /// residual of the current iterate.
    fn solid_stage(&self, system: &BlockSystem, y: &[f64], chi: &mut [f64], omega: f64) {
        if self.solids.is_empty() {
            return;
        }
        let ax = system.apply(chi);
        let r: Vec<f64> = y.iter().zip(&ax).map(|(a, b)| a - b).collect();
        let corrections: Vec<Vec<f64>> = self
            .solids
            .par_iter()
            .map(|s| {
                let r_local: Vec<f64> = s.dofs.iter().map(|&d| r[d]).collect();
                self.solid_correction(s, &r_local, omega)
            })
            .collect();
        for (s, corr) in self.solids.iter().zip(corrections) {
            for (&d, c) in s.dofs.iter().zip(corr) {
                chi[d] += c;
            }
        }
    }

    /// The two-stage smoother: k node-wise sweeps on the fluid DOFs, then
    /// one additive Schwarz correction for the solids. Starts from zero.
    pub fn smooth(&self, system: &BlockSystem, y: &[f64], cfg: &MgConfig) -> Vec<f64> {
        let mut chi = vec![0.0; system.ndofs()];
        for _ in 0..cfg.k_sweeps {
            self.fluid_sweep(system, y, &mut chi, cfg.smoother, cfg.omega);
        }
        self.solid_stage(system, y, &mut chi, cfg.omega);
        chi
    }
}

/// One multigrid level: the node set, the system assembled from its own
/// stencils (solved when this level is the finest), and the transfer
/// operators connecting it to the level below.
pub struct Level {
    pub set: NodeSet,
    pub system: BlockSystem,
    /// Coarse-to-fine interpolation (absent on the coarsest level).
    pub interpolation: Option<CsrMatrix>,
    /// Fine-to-coarse restriction (absent on the coarsest level).
    pub restriction: Option<CsrMatrix>,
    /// Per body: boundary nodes and their epsilon-neighborhoods.
    solid_q: Vec<Vec<usize>>,
}

impl Level {
    /// Apply the finest-level smoother to a right-hand side from a zero
    /// guess (exposed for the smoother unit tests).
    pub fn smooth(&self, y: &[f64], cfg: &MgConfig) -> Vec<f64> {
        let is_boundary: Vec<bool> = self.set.nodes.iter().map(|n| n.kind.is_boundary()).collect();
        let smoother =
            SmootherState::build(&self.system, &self.solid_q, is_boundary).expect("smoother build");
        smoother.smooth(&self.system, y, cfg)
    }
}

fn solid_neighborhoods(set: &NodeSet, stencils: &Stencils, n_bodies: usize) -> Vec<Vec<usize>> {
    let n = set.len();
    (0..n_bodies)
        .map(|b| {
            let mut in_q = vec![false; n];
            for (i, node) in set.nodes.iter().enumerate() {
                if node.kind == NodeKind::SolidBoundary(b) {
                    in_q[i] = true;
                    for &j in &stencils.divfree[i].neighbors {
                        in_q[j] = true;
                    }
                    for &j in &stencils.staggered[i].neighbors {
                        in_q[j] = true;
                    }
                }
            }
            (0..n).filter(|&i| in_q[i]).collect()
        })
        .collect()
}

pub struct Hierarchy {
    pub levels: Vec<Level>,
    pub config: MgConfig,
    /// Operator driving the V-cycle at each level: the assembled system at
    /// the finest level and Galerkin products R A I below it, so the coarse
    /// correction is algebraically consistent with the fine residual on the
    /// graded node sets produced by adaptive refinement.
    cycle_ops: Vec<Option<BlockSystem>>,
    smoothers: Vec<SmootherState>,
    coarse_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Dense coarsest-level matrix with the zero-mean projection applied on the
/// pressure rows/columns and the removed constant mode pinned.
fn projected_dense(system: &BlockSystem) -> DMatrix<f64> {
    let mut d = system.matrix.to_dense();
    let pd = system.pressure_dofs();
    let np = pd.len() as f64;
    // Column projection (input pressure mean removed).
    let mut cvec = DVector::zeros(d.nrows());
    for &c in pd {
        cvec += d.column(c);
    }
    cvec /= np;
    for &c in pd {
        let col = d.column(c) - &cvec;
        d.set_column(c, &col);
    }
    // Row projection (pressure-row mean removed).
    let mut rvec = DVector::zeros(d.ncols());
    for &r in pd {
        rvec += d.row(r).transpose();
    }
    rvec /= np;
    for &r in pd {
        let row = d.row(r) - rvec.transpose();
        d.set_row(r, &row);
    }
    // Pin the constant mode.
    for &r in pd {
        for &c in pd {
            d[(r, c)] += 1.0 / np;
        }
    }
    d
}

impl Hierarchy {
    /// Start a hierarchy from the coarsest level; its (projected, pinned)
    /// matrix is factorized once for the direct bottom solve.
    pub fn new(
        set: NodeSet,
        stencils: &Stencils,
        system: BlockSystem,
        config: MgConfig,
    ) -> Result<Self, Error> {
        let solid_q = solid_neighborhoods(&set, stencils, system.map.n_bodies);
        let is_boundary: Vec<bool> = set.nodes.iter().map(|n| n.kind.is_boundary()).collect();
        let smoother = SmootherState::build(&system, &solid_q, is_boundary)?;
        let coarse_lu = projected_dense(&system).lu();
        let level = Level {
            set,
            system,
            interpolation: None,
            restriction: None,
            solid_q,
        };
        Ok(Hierarchy {
            levels: vec![level],
            config,
            cycle_ops: vec![None],
            smoothers: vec![smoother],
            coarse_lu,
        })
    }

    fn cycle_op(&self, level: usize) -> &BlockSystem {
        self.cycle_ops[level]
            .as_ref()
            .unwrap_or(&self.levels[level].system)
    }

    /// Rebuild the Galerkin chain and per-level smoothers below the current
    /// finest level.
    fn rebuild_cycle(&mut self) -> Result<(), Error> {
        let top = self.finest();
        self.cycle_ops = (0..=top).map(|_| None).collect();
        if std::env::var("MG_REDISCRETIZED").is_err() {
            for l in (0..top).rev() {
                let fine_op = self.cycle_op(l + 1);
                let lvl = &self.levels[l + 1];
                let r = lvl.restriction.as_ref().unwrap();
                let i = lvl.interpolation.as_ref().unwrap();
                let matrix = r.matmul(&fine_op.matrix).matmul(i);
                self.cycle_ops[l] = Some(BlockSystem::raw(matrix, self.levels[l].system.map));
            }
        }
        let mut smoothers = Vec::with_capacity(top + 1);
        for l in 0..=top {
            let is_boundary: Vec<bool> = self.levels[l]
                .set
                .nodes
                .iter()
                .map(|n| n.kind.is_boundary())
                .collect();
            smoothers.push(SmootherState::build(
                self.cycle_op(l),
                &self.levels[l].solid_q,
                is_boundary,
            )?);
        }
        self.smoothers = smoothers;
        self.coarse_lu = projected_dense(self.cycle_op(0)).lu();
        Ok(())
    }

    pub fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    /// Add a refined level; `children` maps each coarse node to the fine
    /// nodes it was split into (empty for carried-over nodes). The level
    /// operator is the system assembled from the level's own stencils.
    pub fn push_level(
        &mut self,
        set: NodeSet,
        stencils: &Stencils,
        system: BlockSystem,
        children: &[Vec<usize>],
    ) -> Result<(), Error> {
        let coarse = &self.levels[self.finest()];
        let interpolation = build_interpolation(&coarse.set, &set, &system, stencils.m)?;
        let restriction = build_restriction(&coarse.set, &coarse.system, &set, &system, children);
        let solid_q = solid_neighborhoods(&set, stencils, system.map.n_bodies);
        self.levels.push(Level {
            set,
            system,
            interpolation: Some(interpolation),
            restriction: Some(restriction),
            solid_q,
        });
        self.rebuild_cycle()
    }

    /// V-cycle at `level` for right-hand side `y`, used as the preconditioner
    /// application. Linear in `y` by construction.
    pub fn vcycle(&self, level: usize, y: &[f64]) -> Vec<f64> {
        if level == 0 {
            let sys = self.cycle_op(0);
            let mut rhs = DVector::from_column_slice(y);
            let pd = sys.pressure_dofs();
            let mean: f64 = pd.iter().map(|&d| rhs[d]).sum::<f64>() / pd.len() as f64;
            for &d in pd {
                rhs[d] -= mean;
            }
            let sol = self.coarse_lu.solve(&rhs).expect("coarse factorization");
            return sol.as_slice().to_vec();
        }
        let lvl = &self.levels[level];
        let sys = self.cycle_op(level);

        // Pre-smooth from zero.
        let mut chi = self.smoothers[level].smooth(sys, y, &self.config);
        // Restrict the projected residual.
        let ax = sys.apply(&chi);
        let r: Vec<f64> = y.iter().zip(&ax).map(|(a, b)| a - b).collect();
        let yc = lvl.restriction.as_ref().unwrap().mul_vec_alloc(&r);
        // Coarse correction.
        let z = self.vcycle(level - 1, &yc);
        let corr = lvl.interpolation.as_ref().unwrap().mul_vec_alloc(&z);
        for (c, d) in chi.iter_mut().zip(&corr) {
            *c += d;
        }
        // Post-smooth against the updated residual.
        let ax = sys.apply(&chi);
        let r2: Vec<f64> = y.iter().zip(&ax).map(|(a, b)| a - b).collect();
        let ds = self.smoothers[level].smooth(sys, &r2, &self.config);
        for (c, d) in chi.iter_mut().zip(&ds) {
            *c += d;
        }
        chi
    }

    /// Solve the finest-level system with V-cycle-preconditioned GMRES.
    pub fn solve(&self, gmres_cfg: &GmresConfig) -> Result<(Vec<f64>, SolverReport), Error> {
        let level = self.finest();
        let sys = &self.levels[level].system;
        let rhs = sys.projected_rhs();
        let (chi, report) = gmres(
            |x| sys.apply(x),
            |v| self.vcycle(level, v),
            &rhs,
            gmres_cfg,
        )?;
        if !report.converged {
            return Err(Error::Solver(format!(
                "GMRES stagnated at relative residual {:.3e} after {} iterations",
                report.final_relres, report.iterations
            )));
        }
        Ok((chi, report))
    }
}

/// Interpolation operator: identity rows for carried-over fine nodes and for
/// solid DOFs; GMLS evaluation from coarse sources for refined children
/// (scalar basis for pressure, divergence-free basis for velocity).
pub fn build_interpolation(
    coarse: &NodeSet,
    fine: &NodeSet,
    fine_system: &BlockSystem,
    m: usize,
) -> Result<CsrMatrix, Error> {
    let fmap = &fine_system.map;
    let cmap_nodes = coarse.len();
    let c_total = 3 * cmap_nodes + 3 * fmap.n_bodies;
    let coarse_u = |i: usize| 3 * i;
    let coarse_p = |i: usize| 3 * i + 2;

    // Carried-over fine nodes keep their coarse values directly (same
    // position and spacing as their parent).
    let carried: Vec<Option<usize>> = fine
        .nodes
        .iter()
        .map(|nd| {
            nd.parent.filter(|&p| {
                (coarse.nodes[p].position - nd.position).norm() < 1e-14
                    && (coarse.nodes[p].spacing - nd.spacing).abs() < 1e-14
            })
        })
        .collect();

    let rows_per_node: Result<Vec<[Vec<(usize, f64)>; 3]>, Error> = (0..fine.len())
        .into_par_iter()
        .map(|j| {
            if let Some(p) = carried[j] {
                return Ok([
                    vec![(coarse_u(p), 1.0)],
                    vec![(coarse_u(p) + 1, 1.0)],
                    vec![(coarse_p(p), 1.0)],
                ]);
            }
            let target = fine.nodes[j].position;
            let base_eps = support_factor(m) * 2.0 * fine.nodes[j].spacing;
            let (p_nbrs, p_row) = cross_scalar_value_row(coarse, target, base_eps, m, j)?;
            let (u_nbrs, u_row, v_row) = cross_divfree_value_rows(coarse, target, base_eps, m, j)?;
            let mut pr = Vec::with_capacity(p_nbrs.len());
            for (k, &c) in p_nbrs.iter().enumerate() {
                pr.push((coarse_p(c), p_row[k]));
            }
            let mut ur = Vec::with_capacity(2 * u_nbrs.len());
            let mut vr = Vec::with_capacity(2 * u_nbrs.len());
            for (k, &c) in u_nbrs.iter().enumerate() {
                ur.push((coarse_u(c), u_row[2 * k]));
                ur.push((coarse_u(c) + 1, u_row[2 * k + 1]));
                vr.push((coarse_u(c), v_row[2 * k]));
                vr.push((coarse_u(c) + 1, v_row[2 * k + 1]));
            }
            Ok([ur, vr, pr])
        })
        .collect();
    let rows_per_node = rows_per_node?;

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(fmap.total());
    for triple in rows_per_node {
        for row in triple {
            rows.push(row);
        }
    }
    for b in 0..fmap.n_bodies {
        let co = 3 * cmap_nodes + 3 * b;
        for k in 0..3 {
            rows.push(vec![(co + k, 1.0)]);
        }
    }
    Ok(CsrMatrix::from_rows(fmap.total(), c_total, rows))
}

/// Restriction operator: a refined parent's row averages its surviving
/// children; carried-over nodes and solid DOFs are identity.
pub fn build_restriction(
    coarse: &NodeSet,
    coarse_system: &BlockSystem,
    fine: &NodeSet,
    fine_system: &BlockSystem,
    children: &[Vec<usize>],
) -> CsrMatrix {
    let cmap = &coarse_system.map;
    let fmap = &fine_system.map;
    // Fine copy of each carried-over coarse node.
    let mut copy_of = vec![usize::MAX; coarse.len()];
    for (j, nd) in fine.nodes.iter().enumerate() {
        if let Some(p) = nd.parent {
            if children[p].is_empty() {
                copy_of[p] = j;
            }
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cmap.total());
    for i in 0..coarse.len() {
        if !children[i].is_empty() {
            let w = 1.0 / children[i].len() as f64;
            let mut ur = Vec::new();
            let mut vr = Vec::new();
            let mut pr = Vec::new();
            for &c in &children[i] {
                ur.push((fmap.u(c), w));
                vr.push((fmap.v(c), w));
                pr.push((fmap.p(c), w));
            }
            rows.push(ur);
            rows.push(vr);
            rows.push(pr);
        } else {
            let j = copy_of[i];
            debug_assert!(j != usize::MAX, "coarse node {i} has no fine copy");
            rows.push(vec![(fmap.u(j), 1.0)]);
            rows.push(vec![(fmap.v(j), 1.0)]);
            rows.push(vec![(fmap.p(j), 1.0)]);
        }
    }
    for b in 0..cmap.n_bodies {
        for k in 0..3 {
            rows.push(vec![(fmap.body(b) + k, 1.0)]);
        }
    }
    CsrMatrix::from_rows(cmap.total(), fmap.total(), rows)
}
