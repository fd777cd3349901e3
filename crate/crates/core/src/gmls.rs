//! Local weighted least-squares reconstructions: scalar Taylor basis,
//! divergence-free vector basis, derivative functionals, and the staggered
//! edge-difference discretization of the pressure div-grad operator.
//!
//! Every fit is built on an epsilon-scaled basis so design-matrix entries
//! stay O(1) on the neighborhood, and factorized by column-pivoted QR of the
//! sqrt(W)-scaled design matrix (forming the moment matrix explicitly would
//! square its condition number).

use crate::error::Error;
use crate::geometry::Vec2;
use crate::point_cloud::NodeSet;
use nalgebra::{DMatrix, DVector};

/// Compact-support quartic weight: `(1 - r/eps)^4` inside the support, 0
/// outside. The weight must be sharply peaked at the center; with a
/// flat-top profile the local fits are bulk-dominated, the assembled
/// operators become severely ill-conditioned, and neither relaxation nor
/// multigrid transfer behaves.
pub fn weight(r: f64, eps: f64) -> f64 {
    if r < eps {
        (1.0 - r / eps).powi(4)
    } else {
        0.0
    }
}

/// Support radius multiplier `c_m`; the neighborhood is grown from
/// `c_m * dx_i` until the fit is unisolvent.
pub fn support_factor(m: usize) -> f64 {
    if let Ok(v) = std::env::var("GMLS_SUPPORT_PROBE") {
        return v.parse().unwrap();
    }
    match m {
        2 => 2.6,
        4 => 4.2,
        _ => 2.6 + 0.8 * (m as f64 - 2.0),
    }
}

pub fn scalar_dim(m: usize) -> usize {
    (m + 1) * (m + 2) / 2
}

pub fn divfree_dim(m: usize) -> usize {
    (m + 2) * (m + 3) / 2 - 1
}

const COND_LIMIT: f64 = 1e12;
const GROWTH: f64 = 1.2;
const MIN_COUNT_FACTOR: f64 = 1.5;

/// x^a with the convention x^0 = 1 even at x = 0.
fn mono(x: f64, a: i32) -> f64 {
    if a < 0 {
        0.0
    } else {
        x.powi(a)
    }
}

/// d^k/dx^k of x^a evaluated at x (falling-factorial prefactor).
fn mono_d(x: f64, a: i32, k: i32) -> f64 {
    if a < k {
        return 0.0;
    }
    let mut f = 1.0;
    for j in 0..k {
        f *= (a - j) as f64;
    }
    f * mono(x, a - k)
}

/// Epsilon-scaled Taylor monomials of total degree <= m, ordered by degree so
/// evaluation at the center gives (1, 0, ..., 0).
#[derive(Debug, Clone)]
pub struct ScalarBasis {
    pub m: usize,
    exps: Vec<(i32, i32)>,
}

impl ScalarBasis {
    pub fn new(m: usize) -> Self {
        let mut exps = Vec::new();
        for deg in 0..=m as i32 {
            for a in (0..=deg).rev() {
                exps.push((a, deg - a));
            }
        }
        ScalarBasis { m, exps }
    }

    pub fn dim(&self) -> usize {
        self.exps.len()
    }

    pub fn eval(&self, xi: Vec2) -> DVector<f64> {
        DVector::from_iterator(
            self.exps.len(),
            self.exps.iter().map(|&(a, b)| mono(xi.x, a) * mono(xi.y, b)),
        )
    }

    /// (d/dxi, d/deta) rows in scaled coordinates.
    pub fn grad(&self, xi: Vec2) -> (DVector<f64>, DVector<f64>) {
        let gx = DVector::from_iterator(
            self.exps.len(),
            self.exps
                .iter()
                .map(|&(a, b)| mono_d(xi.x, a, 1) * mono(xi.y, b)),
        );
        let gy = DVector::from_iterator(
            self.exps.len(),
            self.exps
                .iter()
                .map(|&(a, b)| mono(xi.x, a) * mono_d(xi.y, b, 1)),
        );
        (gx, gy)
    }

    pub fn laplacian(&self, xi: Vec2) -> DVector<f64> {
        DVector::from_iterator(
            self.exps.len(),
            self.exps.iter().map(|&(a, b)| {
                mono_d(xi.x, a, 2) * mono(xi.y, b) + mono(xi.x, a) * mono_d(xi.y, b, 2)
            }),
        )
    }
}

/// Divergence-free 2D vector polynomials of degree <= m, built as curls of
/// stream-function monomials of degree 1..m+1. Dimension (m+2)(m+3)/2 - 1,
/// each element has identically zero analytic divergence.
#[derive(Debug, Clone)]
pub struct DivFreeBasis {
    pub m: usize,
    streams: Vec<(i32, i32)>,
}

impl DivFreeBasis {
    pub fn new(m: usize) -> Self {
        let mut streams = Vec::new();
        for deg in 1..=(m + 1) as i32 {
            for a in (0..=deg).rev() {
                streams.push((a, deg - a));
            }
        }
        DivFreeBasis { m, streams }
    }

    pub fn dim(&self) -> usize {
        self.streams.len()
    }

    /// Field components (u, v) of every basis element at scaled coordinates:
    /// u = d(psi)/d(eta), v = -d(psi)/d(xi).
    pub fn eval(&self, xi: Vec2) -> (DVector<f64>, DVector<f64>) {
        let u = DVector::from_iterator(
            self.streams.len(),
            self.streams
                .iter()
                .map(|&(a, b)| mono(xi.x, a) * mono_d(xi.y, b, 1)),
        );
        let v = DVector::from_iterator(
            self.streams.len(),
            self.streams
                .iter()
                .map(|&(a, b)| -mono_d(xi.x, a, 1) * mono(xi.y, b)),
        );
        (u, v)
    }

    /// Scaled-coordinate first derivatives: [du/dxi, du/deta, dv/dxi, dv/deta].
    pub fn grad(&self, xi: Vec2) -> [DVector<f64>; 4] {
        let n = self.streams.len();
        let mut rows = [
            DVector::zeros(n),
            DVector::zeros(n),
            DVector::zeros(n),
            DVector::zeros(n),
        ];
        for (k, &(a, b)) in self.streams.iter().enumerate() {
            rows[0][k] = mono_d(xi.x, a, 1) * mono_d(xi.y, b, 1);
            rows[1][k] = mono(xi.x, a) * mono_d(xi.y, b, 2);
            rows[2][k] = -mono_d(xi.x, a, 2) * mono(xi.y, b);
            rows[3][k] = -mono_d(xi.x, a, 1) * mono_d(xi.y, b, 1);
        }
        rows
    }

    /// Scaled-coordinate curl-curl rows:
    /// (d2v/dxi deta - d2u/deta2, d2u/dxi deta - d2v/dxi2).
    pub fn curl_curl(&self, xi: Vec2) -> (DVector<f64>, DVector<f64>) {
        let n = self.streams.len();
        let mut cx = DVector::zeros(n);
        let mut cy = DVector::zeros(n);
        for (k, &(a, b)) in self.streams.iter().enumerate() {
            let u_ee = mono(xi.x, a) * mono_d(xi.y, b, 3);
            let u_xe = mono_d(xi.x, a, 1) * mono_d(xi.y, b, 2);
            let v_xx = -mono_d(xi.x, a, 3) * mono(xi.y, b);
            let v_xe = -mono_d(xi.x, a, 2) * mono_d(xi.y, b, 1);
            cx[k] = v_xe - u_ee;
            cy[k] = u_xe - v_xx;
        }
        (cx, cy)
    }
}

/// Least-squares map `c* = coeff * samples` from a column-pivoted QR of the
/// sqrt(W)-scaled design matrix; `cond` estimates the condition number of the
/// (implicit) moment matrix.
fn weighted_ls_map(design: &DMatrix<f64>, weights: &[f64]) -> Result<(DMatrix<f64>, f64), String> {
    let (n, dim) = design.shape();
    if n < dim {
        return Err(format!("{n} samples for a basis of dimension {dim}"));
    }
    let mut scaled = design.clone();
    for (k, w) in weights.iter().enumerate() {
        let s = w.max(0.0).sqrt();
        scaled.row_mut(k).scale_mut(s);
    }
    let qr = scaled.col_piv_qr();
    let r = qr.r();
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for k in 0..dim {
        let d = r[(k, k)].abs();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if dmin == 0.0 {
        return Err("rank-deficient design matrix".into());
    }
    let cond = (dmax / dmin).powi(2);
    if cond > COND_LIMIT {
        return Err(format!("moment matrix condition {cond:.3e} exceeds limit"));
    }
    let q = qr.q();
    let qt = q.transpose();
    let mut x = r
        .solve_upper_triangular(&qt)
        .ok_or("singular R factor".to_string())?;
    // Undo the column pivoting: coefficients are in permuted basis order.
    qr.p().inv_permute_rows(&mut x);
    for (k, w) in weights.iter().enumerate() {
        let s = w.max(0.0).sqrt();
        x.column_mut(k).scale_mut(s);
    }
    Ok((x, cond))
}

/// Scalar GMLS stencil: reconstructs a scalar field and its derivatives from
/// point samples at the neighbors.
#[derive(Debug, Clone)]
pub struct ScalarStencil {
    pub node: usize,
    pub neighbors: Vec<usize>,
    pub center: Vec2,
    pub eps: f64,
    pub cond: f64,
    basis: ScalarBasis,
    /// dim x n: c* = coeff * psi.
    pub coeff: DMatrix<f64>,
}

impl ScalarStencil {
    pub fn fit(&self, samples: &DVector<f64>) -> DVector<f64> {
        &self.coeff * samples
    }

    /// Functional weights over the samples for the value at `x`.
    pub fn value_row(&self, x: Vec2) -> DVector<f64> {
        let l = self.basis.eval((x - self.center) / self.eps);
        self.coeff.tr_mul(&l).column(0).into_owned()
    }

    pub fn grad_rows(&self, x: Vec2) -> (DVector<f64>, DVector<f64>) {
        let (gx, gy) = self.basis.grad((x - self.center) / self.eps);
        let rx = self.coeff.tr_mul(&gx) / self.eps;
        let ry = self.coeff.tr_mul(&gy) / self.eps;
        (rx.column(0).into_owned(), ry.column(0).into_owned())
    }

    pub fn laplacian_row(&self, x: Vec2) -> DVector<f64> {
        let l = self.basis.laplacian((x - self.center) / self.eps);
        (self.coeff.tr_mul(&l) / (self.eps * self.eps))
            .column(0)
            .into_owned()
    }
}

/// Divergence-free vector GMLS stencil. Samples are interleaved
/// (u_0, v_0, u_1, v_1, ...) over the neighbor list.
#[derive(Debug, Clone)]
pub struct DivFreeStencil {
    pub node: usize,
    pub neighbors: Vec<usize>,
    pub center: Vec2,
    pub eps: f64,
    pub cond: f64,
    basis: DivFreeBasis,
    /// dim x 2n.
    pub coeff: DMatrix<f64>,
}

impl DivFreeStencil {
    pub fn fit(&self, samples: &DVector<f64>) -> DVector<f64> {
        &self.coeff * samples
    }

    fn row(&self, l: &DVector<f64>, scale: f64) -> DVector<f64> {
        (self.coeff.tr_mul(l) * scale).column(0).into_owned()
    }

    /// Velocity value rows (u, v) at `x`, as weights over interleaved samples.
    pub fn value_rows(&self, x: Vec2) -> (DVector<f64>, DVector<f64>) {
        let (u, v) = self.basis.eval((x - self.center) / self.eps);
        (self.row(&u, 1.0), self.row(&v, 1.0))
    }

    /// Gradient rows [du/dx, du/dy, dv/dx, dv/dy] at `x`.
    pub fn grad_rows(&self, x: Vec2) -> [DVector<f64>; 4] {
        let g = self.basis.grad((x - self.center) / self.eps);
        [
            self.row(&g[0], 1.0 / self.eps),
            self.row(&g[1], 1.0 / self.eps),
            self.row(&g[2], 1.0 / self.eps),
            self.row(&g[3], 1.0 / self.eps),
        ]
    }

    /// Curl-curl rows at `x`.
    pub fn curl_curl_rows(&self, x: Vec2) -> (DVector<f64>, DVector<f64>) {
        let (cx, cy) = self.basis.curl_curl((x - self.center) / self.eps);
        let s = 1.0 / (self.eps * self.eps);
        (self.row(&cx, s), self.row(&cy, s))
    }

    /// Evaluate the gradient tensor of a fitted reconstruction at `x`:
    /// rows of [du/dx du/dy; dv/dx dv/dy] from coefficients.
    pub fn grad_from_coeffs(&self, coeffs: &DVector<f64>, x: Vec2) -> nalgebra::Matrix2<f64> {
        let g = self.basis.grad((x - self.center) / self.eps);
        nalgebra::Matrix2::new(
            g[0].dot(coeffs) / self.eps,
            g[1].dot(coeffs) / self.eps,
            g[2].dot(coeffs) / self.eps,
            g[3].dot(coeffs) / self.eps,
        )
    }
}

/// Staggered edge-difference stencil for the pressure div-grad operator.
/// The fit runs over edge data (p_j - p_i) evaluated at edge midpoints; the
/// recovered gradient and Laplacian at the center carry the 1/2 and 1/4
/// midpoint prefactors.
#[derive(Debug, Clone)]
pub struct StaggeredStencil {
    pub node: usize,
    pub neighbors: Vec<usize>,
    pub center: Vec2,
    pub eps: f64,
    pub cond: f64,
    basis: ScalarBasis,
    /// dim x n over edge differences.
    pub coeff: DMatrix<f64>,
    /// Sensitivity of the coefficients to the Neumann constraint value g
    /// (constrained fits only).
    pub g_coeff: Option<DVector<f64>>,
}

/// A linear functional over edge differences (p_j - p_i), plus its
/// sensitivity to the constraint value g for constrained fits.
#[derive(Debug, Clone)]
pub struct EdgeFunctional {
    /// Weight per neighbor edge.
    pub edge_weights: DVector<f64>,
    /// Coefficient multiplying the constraint value g.
    pub g_weight: f64,
}

impl EdgeFunctional {
    /// Apply to nodal values: sum_j w_j (p_j - p_i) + g_weight * g.
    pub fn apply(&self, p_center: f64, p_neighbors: &[f64], g: f64) -> f64 {
        let mut acc = 0.0;
        for (w, p) in self.edge_weights.iter().zip(p_neighbors) {
            acc += w * (p - p_center);
        }
        acc + self.g_weight * g
    }
}

impl StaggeredStencil {
    fn functional(&self, l: &DVector<f64>, scale: f64) -> EdgeFunctional {
        let edge_weights = (self.coeff.tr_mul(l) * scale).column(0).into_owned();
        let g_weight = self.g_coeff.as_ref().map_or(0.0, |gc| gc.dot(l) * scale);
        EdgeFunctional {
            edge_weights,
            g_weight,
        }
    }

    /// Gradient components at the center (the 1/2 prefactor included).
    pub fn grad(&self) -> (EdgeFunctional, EdgeFunctional) {
        let (gx, gy) = self.basis.grad(Vec2::zeros());
        (
            self.functional(&gx, 0.5 / self.eps),
            self.functional(&gy, 0.5 / self.eps),
        )
    }

    /// Laplacian at the center (the 1/4 prefactor included).
    pub fn laplacian(&self) -> EdgeFunctional {
        let l = self.basis.laplacian(Vec2::zeros());
        self.functional(&l, 0.25 / (self.eps * self.eps))
    }

    /// Normal derivative at the center: n . grad.
    pub fn normal_gradient(&self, normal: Vec2) -> EdgeFunctional {
        let (gx, gy) = self.grad();
        EdgeFunctional {
            edge_weights: gx.edge_weights * normal.x + gy.edge_weights * normal.y,
            g_weight: gx.g_weight * normal.x + gy.g_weight * normal.y,
        }
    }
}

pub fn build_scalar_stencil(set: &NodeSet, node: usize, m: usize) -> Result<ScalarStencil, Error> {
    let basis = ScalarBasis::new(m);
    let center = set.nodes[node].position;
    let min_count = (MIN_COUNT_FACTOR * basis.dim() as f64).ceil() as usize;
    let base = support_factor(m) * set.nodes[node].spacing;
    let mut builder = |neighbors: &[usize], eps: f64| {
        let mut design = DMatrix::zeros(neighbors.len(), basis.dim());
        let mut weights = Vec::with_capacity(neighbors.len());
        for (k, &j) in neighbors.iter().enumerate() {
            let xj = set.nodes[j].position;
            design
                .row_mut(k)
                .copy_from(&basis.eval((xj - center) / eps).transpose());
            weights.push(weight((xj - center).norm(), eps));
        }
        weighted_ls_map(&design, &weights)
    };
    let (neighbors, eps, coeff, cond) =
        grow_neighbors_scaled(set, node, min_count, base, &mut builder)?;
    Ok(ScalarStencil {
        node,
        neighbors,
        center,
        eps,
        cond,
        basis,
        coeff,
    })
}

fn grow_neighbors_scaled(
    set: &NodeSet,
    node: usize,
    min_count: usize,
    base: f64,
    build: &mut impl FnMut(&[usize], f64) -> Result<(DMatrix<f64>, f64), String>,
) -> Result<(Vec<usize>, f64, DMatrix<f64>, f64), Error> {
    grow_neighbors_filtered(set, node, min_count, base, false, build)
}

fn grow_neighbors_filtered(
    set: &NodeSet,
    node: usize,
    min_count: usize,
    base: f64,
    interior_only: bool,
    build: &mut impl FnMut(&[usize], f64) -> Result<(DMatrix<f64>, f64), String>,
) -> Result<(Vec<usize>, f64, DMatrix<f64>, f64), Error> {
    let mut eps = base;
    let mut last_err = String::new();
    for _ in 0..8 {
        let neighbors: Vec<usize> = set
            .neighbors(node, eps)
            .into_iter()
            .filter(|&j| {
                !set.nodes[j].ghost && (!interior_only || j == node || !set.nodes[j].kind.is_boundary())
            })
            .collect();
        if neighbors.len() < min_count {
            last_err = format!("{} neighbors, need {min_count}", neighbors.len());
            eps *= GROWTH;
            continue;
        }
        match build(&neighbors, eps) {
            Ok((coeff, cond)) => return Ok((neighbors, eps, coeff, cond)),
            Err(e) => {
                last_err = e;
                eps *= GROWTH;
            }
        }
    }
    Err(Error::Unisolvency {
        node,
        detail: format!("after radius growth to {eps:.3e}: {last_err}"),
    })
}

pub fn build_divfree_stencil(
    set: &NodeSet,
    node: usize,
    m: usize,
) -> Result<DivFreeStencil, Error> {
    let basis = DivFreeBasis::new(m);
    let center = set.nodes[node].position;
    let min_count = (MIN_COUNT_FACTOR * basis.dim() as f64).ceil() as usize;
    let base = support_factor(m) * set.nodes[node].spacing;
    let mut builder = |neighbors: &[usize], eps: f64| {
        let mut design = DMatrix::zeros(2 * neighbors.len(), basis.dim());
        let mut weights = Vec::with_capacity(2 * neighbors.len());
        for (k, &j) in neighbors.iter().enumerate() {
            let xj = set.nodes[j].position;
            let (u, v) = basis.eval((xj - center) / eps);
            design.row_mut(2 * k).copy_from(&u.transpose());
            design.row_mut(2 * k + 1).copy_from(&v.transpose());
            let w = weight((xj - center).norm(), eps);
            weights.push(w);
            weights.push(w);
        }
        weighted_ls_map(&design, &weights)
    };
    let (neighbors, eps, coeff, cond) =
        grow_neighbors_scaled(set, node, min_count, base, &mut builder)?;
    Ok(DivFreeStencil {
        node,
        neighbors,
        center,
        eps,
        cond,
        basis,
        coeff,
    })
}

/// Build the staggered stencil; `constraint` carries the outward normal for
/// boundary nodes, imposing n . grad_h p = g exactly through null-space
/// elimination.
pub fn build_staggered_stencil(
    set: &NodeSet,
    node: usize,
    m: usize,
    constraint: Option<Vec2>,
) -> Result<StaggeredStencil, Error> {
    let basis = ScalarBasis::new(m);
    let center = set.nodes[node].position;
    let min_count = (MIN_COUNT_FACTOR * basis.dim() as f64).ceil() as usize;
    let base = support_factor(m) * set.nodes[node].spacing;
    let mut g_coeff_out: Option<DVector<f64>> = None;
    let mut builder = |neighbors: &[usize], eps: f64| {
        let mut design = DMatrix::zeros(neighbors.len(), basis.dim());
        let mut weights = Vec::with_capacity(neighbors.len());
        for (k, &j) in neighbors.iter().enumerate() {
            let xj = set.nodes[j].position;
            // Edge midpoint in scaled coordinates.
            let xi_mid = (xj - center) / (2.0 * eps);
            design.row_mut(k).copy_from(&basis.eval(xi_mid).transpose());
            weights.push(weight((xj - center).norm(), eps));
        }
        match constraint {
            None => {
                g_coeff_out = None;
                weighted_ls_map(&design, &weights)
            }
            Some(normal) => {
                let (gx, gy) = basis.grad(Vec2::zeros());
                let a = (gx * normal.x + gy * normal.y) * (0.5 / eps);
                let (coeff, g_coeff, cond) = constrained_ls_map(&design, &weights, &a)?;
                g_coeff_out = Some(g_coeff);
                Ok((coeff, cond))
            }
        }
    };
    let (neighbors, eps, coeff, cond) =
        grow_neighbors_scaled(set, node, min_count, base, &mut builder)?;
    Ok(StaggeredStencil {
        node,
        neighbors,
        center,
        eps,
        cond,
        basis,
        coeff,
        g_coeff: g_coeff_out,
    })
}

/// Equality-constrained weighted least squares via null-space elimination:
/// minimize ||sqrt(W)(B c - d)|| subject to a^T c = g. Returns the data map,
/// the g sensitivity, and the condition estimate of the reduced problem.
fn constrained_ls_map(
    design: &DMatrix<f64>,
    weights: &[f64],
    a: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, f64), String> {
    let dim = design.ncols();
    let na = a.norm();
    if na == 0.0 {
        return Err("degenerate constraint row".into());
    }
    // Householder reflector H (symmetric, orthogonal) with H a = |a| e1.
    let mut v = a.clone();
    v[0] -= na;
    let vn = v.norm();
    let h = if vn < 1e-300 {
        DMatrix::identity(dim, dim)
    } else {
        DMatrix::identity(dim, dim) - (&v * v.transpose()) * (2.0 / (vn * vn))
    };
    // c = H y with y1 = g/|a| fixed by the constraint.
    let bh = design * &h;
    let b1 = bh.column(0).into_owned();
    let b2 = bh.columns(1, dim - 1).into_owned();
    let (s2, cond) = weighted_ls_map(&b2, weights)?;
    // y2 = S2 (d - b1 y1);  c = H [y1; y2].
    let mut coeff = DMatrix::zeros(dim, design.nrows());
    coeff.rows_mut(1, dim - 1).copy_from(&s2);
    let coeff = &h * coeff;
    let mut e_part = DVector::zeros(dim);
    e_part[0] = 1.0;
    let s2b1 = &s2 * &b1;
    let mut y_g = DVector::zeros(dim);
    y_g[0] = 1.0 / na;
    for k in 0..dim - 1 {
        y_g[k + 1] = -s2b1[k] / na;
    }
    let g_coeff = &h * y_g;
    Ok((coeff, g_coeff, cond))
}

/// Neumann-constrained scalar reconstruction at a boundary node: nodal
/// pressure samples with the hard constraint n . grad_h p = g. Used for the
/// boundary pressure Poisson rows, where the staggered edge-midpoint fit is
/// too fragile (one-sided cloud compressed by the midpoint map).
#[derive(Debug, Clone)]
pub struct BoundaryPressureStencil {
    pub node: usize,
    pub neighbors: Vec<usize>,
    pub center: Vec2,
    pub eps: f64,
    pub cond: f64,
    basis: ScalarBasis,
    /// dim x n over nodal samples.
    coeff: DMatrix<f64>,
    g_coeff: DVector<f64>,
}

impl BoundaryPressureStencil {
    /// Laplacian functional at the center: nodal weights and the g channel.
    pub fn laplacian(&self) -> (DVector<f64>, f64) {
        let l = self.basis.laplacian(Vec2::zeros());
        let scale = 1.0 / (self.eps * self.eps);
        let weights = (self.coeff.tr_mul(&l) * scale).column(0).into_owned();
        let gw = self.g_coeff.dot(&l) * scale;
        (weights, gw)
    }

    /// Normal-gradient residual check: n . grad of the constrained fit.
    pub fn normal_gradient(&self, normal: Vec2) -> (DVector<f64>, f64) {
        let (gx, gy) = self.basis.grad(Vec2::zeros());
        let l = gx * normal.x + gy * normal.y;
        let scale = 1.0 / self.eps;
        let weights = (self.coeff.tr_mul(&l) * scale).column(0).into_owned();
        let gw = self.g_coeff.dot(&l) * scale;
        (weights, gw)
    }
}

pub fn build_boundary_pressure_stencil(
    set: &NodeSet,
    node: usize,
    m: usize,
    normal: Vec2,
) -> Result<BoundaryPressureStencil, Error> {
    let basis = ScalarBasis::new(m);
    let center = set.nodes[node].position;
    let min_count = (MIN_COUNT_FACTOR * basis.dim() as f64).ceil() as usize;
    let base = support_factor(m) * set.nodes[node].spacing;
    let mut g_coeff_out = DVector::zeros(basis.dim());
    let mut builder = |neighbors: &[usize], eps: f64| {
        let mut design = DMatrix::zeros(neighbors.len(), basis.dim());
        let mut weights = Vec::with_capacity(neighbors.len());
        for (k, &j) in neighbors.iter().enumerate() {
            let xj = set.nodes[j].position;
            design
                .row_mut(k)
                .copy_from(&basis.eval((xj - center) / eps).transpose());
            weights.push(weight((xj - center).norm(), eps));
        }
        let (gx, gy) = basis.grad(Vec2::zeros());
        let a = (gx * normal.x + gy * normal.y) / eps;
        let (coeff, g_coeff, cond) = constrained_ls_map(&design, &weights, &a)?;
        g_coeff_out = g_coeff;
        Ok((coeff, cond))
    };
    let (neighbors, eps, coeff, cond) =
        grow_neighbors_scaled(set, node, min_count, base, &mut builder)?;
    Ok(BoundaryPressureStencil {
        node,
        neighbors,
        center,
        eps,
        cond,
        basis,
        coeff,
        g_coeff: g_coeff_out,
    })
}

/// Per-node stencils for one node set.
pub struct Stencils {
    pub m: usize,
    pub divfree: Vec<DivFreeStencil>,
    pub staggered: Vec<StaggeredStencil>,
    /// Constrained nodal fits for boundary nodes (None at interior nodes).
    pub boundary_pressure: Vec<Option<BoundaryPressureStencil>>,
}

/// Build divergence-free and staggered stencils for every node. Boundary
/// nodes get the Neumann-constrained staggered variant: their div-grad
/// functionals satisfy n . grad_h p = g exactly, so the boundary pressure
/// rows collocate the pressure Poisson equation with the boundary data
/// folded in through the constraint sensitivity.
pub fn build_stencils(set: &NodeSet, m: usize) -> Result<Stencils, Error> {
    use rayon::prelude::*;
    let divfree: Result<Vec<_>, Error> = (0..set.len())
        .into_par_iter()
        .map(|i| build_divfree_stencil(set, i, m))
        .collect();
    let staggered: Result<Vec<_>, Error> = (0..set.len())
        .into_par_iter()
        .map(|i| build_staggered_stencil(set, i, m, set.nodes[i].normal))
        .collect();
    let boundary_pressure: Result<Vec<_>, Error> = (0..set.len())
        .into_par_iter()
        .map(|i| match set.nodes[i].normal {
            Some(nrm) => build_boundary_pressure_stencil(set, i, m, nrm).map(Some),
            None => Ok(None),
        })
        .collect();
    Ok(Stencils {
        m,
        divfree: divfree?,
        staggered: staggered?,
        boundary_pressure: boundary_pressure?,
    })
}

/// Cross-level scalar evaluation row: GMLS value functional at `target` from
/// source-set neighbors, growing the radius until unisolvent (at most 5
/// growths beyond the base).
pub fn cross_scalar_value_row(
    source: &NodeSet,
    target: Vec2,
    base_eps: f64,
    m: usize,
    node_id: usize,
) -> Result<(Vec<usize>, DVector<f64>), Error> {
    let basis = ScalarBasis::new(m);
    let min_count = (MIN_COUNT_FACTOR * basis.dim() as f64).ceil() as usize;
    let mut eps = base_eps;
    let mut last_err = String::new();
    for _ in 0..6 {
        let neighbors: Vec<usize> = source
            .neighbors_of_point(target, eps)
            .into_iter()
            .filter(|&j| !source.nodes[j].ghost)
            .collect();
        if neighbors.len() < min_count {
            last_err = format!("{} coarse neighbors, need {min_count}", neighbors.len());
            eps *= GROWTH;
            continue;
        }
        let mut design = DMatrix::zeros(neighbors.len(), basis.dim());
        let mut weights = Vec::with_capacity(neighbors.len());
        for (k, &j) in neighbors.iter().enumerate() {
            let xj = source.nodes[j].position;
            design
                .row_mut(k)
                .copy_from(&basis.eval((xj - target) / eps).transpose());
            weights.push(weight((xj - target).norm(), eps));
        }
        match weighted_ls_map(&design, &weights) {
            Ok((coeff, _)) => {
                let l = basis.eval(Vec2::zeros());
                let row = coeff.tr_mul(&l).column(0).into_owned();
                return Ok((neighbors, row));
            }
            Err(e) => {
                last_err = e;
                eps *= GROWTH;
            }
        }
    }
    Err(Error::Unisolvency {
        node: node_id,
        detail: format!("cross-level scalar fit: {last_err}"),
    })
}

/// Cross-level divergence-free evaluation rows (u, v) over interleaved
/// source samples.
pub fn cross_divfree_value_rows(
    source: &NodeSet,
    target: Vec2,
    base_eps: f64,
    m: usize,
    node_id: usize,
) -> Result<(Vec<usize>, DVector<f64>, DVector<f64>), Error> {
    let basis = DivFreeBasis::new(m);
    let min_count = (MIN_COUNT_FACTOR * basis.dim() as f64).ceil() as usize;
    let mut eps = base_eps;
    let mut last_err = String::new();
    for _ in 0..6 {
        let neighbors: Vec<usize> = source
            .neighbors_of_point(target, eps)
            .into_iter()
            .filter(|&j| !source.nodes[j].ghost)
            .collect();
        if neighbors.len() < min_count {
            last_err = format!("{} coarse neighbors, need {min_count}", neighbors.len());
            eps *= GROWTH;
            continue;
        }
        let mut design = DMatrix::zeros(2 * neighbors.len(), basis.dim());
        let mut weights = Vec::with_capacity(2 * neighbors.len());
        for (k, &j) in neighbors.iter().enumerate() {
            let xj = source.nodes[j].position;
            let (u, v) = basis.eval((xj - target) / eps);
            design.row_mut(2 * k).copy_from(&u.transpose());
            design.row_mut(2 * k + 1).copy_from(&v.transpose());
            let w = weight((xj - target).norm(), eps);
            weights.push(w);
            weights.push(w);
        }
        match weighted_ls_map(&design, &weights) {
            Ok((coeff, _)) => {
                let (u, v) = basis.eval(Vec2::zeros());
                let ru = coeff.tr_mul(&u).column(0).into_owned();
                let rv = coeff.tr_mul(&v).column(0).into_owned();
                return Ok((neighbors, ru, rv));
            }
            Err(e) => {
                last_err = e;
                eps *= GROWTH;
            }
        }
    }
    Err(Error::Unisolvency {
        node: node_id,
        detail: format!("cross-level divergence-free fit: {last_err}"),
    })
}
