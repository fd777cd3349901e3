//! Computational domain, solid-body shapes, boundary sampling, and rigid-body
//! kinematics.
//!
//! All shapes are described in a body-local frame with the centroid at the
//! origin; a pose (COM position + orientation angle) maps them into the world
//! frame. Boundaries are parameterized by arclength so that sampling and
//! refinement can place nodes exactly on the curve.

use crate::error::Error;
use nalgebra::Vector2;

pub type Vec2 = Vector2<f64>;

/// Wrap an angle to [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

fn rot(theta: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

/// Closed boundary curve in its local frame. Normals point away from the
/// enclosed solid region.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Circle { radius: f64 },
    RoundedSquare { side: f64, corner_radius: f64 },
    /// Simple polygon, counterclockwise. Normals at vertices are the edge
    /// bisector.
    Polygon { vertices: Vec<Vec2> },
}

impl Shape {
    pub fn circle(radius: f64) -> Result<Self, Error> {
        if radius <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "circle radius must be positive, got {radius}"
            )));
        }
        Ok(Shape::Circle { radius })
    }

    pub fn rounded_square(side: f64, corner_radius: f64) -> Result<Self, Error> {
        if side <= 0.0 || corner_radius <= 0.0 || corner_radius >= side / 2.0 {
            return Err(Error::InvalidGeometry(format!(
                "rounded square needs side > 0 and corner radius in (0, side/2), got side {side}, corner {corner_radius}"
            )));
        }
        Ok(Shape::RoundedSquare {
            side,
            corner_radius,
        })
    }

    /// Regular n-gon with the given side length, one edge horizontal at the
    /// bottom, centroid at the origin.
    pub fn regular_polygon(sides: usize, side: f64) -> Result<Self, Error> {
        if sides < 3 || side <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "regular polygon needs >= 3 sides and side > 0, got {sides}, {side}"
            )));
        }
        let n = sides as f64;
        let circumradius = side / (2.0 * (std::f64::consts::PI / n).sin());
        let phase = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI / n;
        let vertices = (0..sides)
            .map(|k| {
                let a = phase + 2.0 * std::f64::consts::PI * k as f64 / n;
                Vec2::new(circumradius * a.cos(), circumradius * a.sin())
            })
            .collect();
        Ok(Shape::Polygon { vertices })
    }

    pub fn polygon(vertices: Vec<Vec2>) -> Result<Self, Error> {
        if vertices.len() < 3 {
            return Err(Error::InvalidGeometry(
                "polygon needs at least 3 vertices".into(),
            ));
        }
        // Normalize to counterclockwise orientation.
        let area2: f64 = vertices
            .iter()
            .zip(vertices.iter().cycle().skip(1))
            .map(|(a, b)| a.x * b.y - b.x * a.y)
            .sum();
        if area2.abs() < 1e-30 {
            return Err(Error::InvalidGeometry("degenerate polygon".into()));
        }
        let vertices = if area2 > 0.0 {
            vertices
        } else {
            vertices.into_iter().rev().collect()
        };
        Ok(Shape::Polygon { vertices })
    }

    /// Axis-aligned rectangle as a polygon (used for the outer wall).
    pub fn rectangle(lower: Vec2, upper: Vec2) -> Result<Self, Error> {
        if upper.x <= lower.x || upper.y <= lower.y {
            return Err(Error::InvalidGeometry(format!(
                "rectangle needs positive side lengths, got {lower:?}..{upper:?}"
            )));
        }
        Shape::polygon(vec![
            lower,
            Vec2::new(upper.x, lower.y),
            upper,
            Vec2::new(lower.x, upper.y),
        ])
    }

    pub fn perimeter(&self) -> f64 {
        match self {
            Shape::Circle { radius } => 2.0 * std::f64::consts::PI * radius,
            Shape::RoundedSquare {
                side,
                corner_radius,
            } => 4.0 * (side - 2.0 * corner_radius) + 2.0 * std::f64::consts::PI * corner_radius,
            Shape::Polygon { vertices } => edge_lengths(vertices).iter().sum(),
        }
    }

    /// Smallest geometric feature: sampling spacings must stay below this.
    pub fn feature_size(&self) -> f64 {
        match self {
            Shape::Circle { radius } => *radius,
            Shape::RoundedSquare { corner_radius, .. } => *corner_radius,
            Shape::Polygon { vertices } => edge_lengths(vertices)
                .into_iter()
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Point and outward normal at arclength `s` (measured counterclockwise,
    /// wrapped by the perimeter).
    pub fn point_at(&self, s: f64) -> (Vec2, Vec2) {
        let s = s.rem_euclid(self.perimeter());
        match self {
            Shape::Circle { radius } => {
                let theta = s / radius;
                let n = Vec2::new(theta.cos(), theta.sin());
                (n * *radius, n)
            }
            Shape::RoundedSquare { .. } => {
                let pieces = self.rounded_square_pieces();
                let mut acc = 0.0;
                for p in &pieces {
                    if s <= acc + p.len || p as *const _ == pieces.last().unwrap() as *const _ {
                        return p.at(s - acc);
                    }
                    acc += p.len;
                }
                unreachable!()
            }
            Shape::Polygon { vertices } => {
                let lens = edge_lengths(vertices);
                let nv = vertices.len();
                let mut acc = 0.0;
                for k in 0..nv {
                    let l = lens[k];
                    if s <= acc + l || k == nv - 1 {
                        let local = s - acc;
                        let a = vertices[k];
                        let b = vertices[(k + 1) % nv];
                        let t = (b - a) / l;
                        let n = Vec2::new(t.y, -t.x);
                        // Exactly at a vertex: bisector of the adjacent edges.
                        let tol = 1e-12 * self.perimeter().max(1.0);
                        if local.abs() <= tol {
                            return (a, self.vertex_normal(vertices, k));
                        }
                        if (local - l).abs() <= tol {
                            return (b, self.vertex_normal(vertices, (k + 1) % nv));
                        }
                        return (a + t * local, n);
                    }
                    acc += l;
                }
                unreachable!()
            }
        }
    }

    fn vertex_normal(&self, vertices: &[Vec2], k: usize) -> Vec2 {
        let nv = vertices.len();
        let prev = vertices[(k + nv - 1) % nv];
        let cur = vertices[k];
        let next = vertices[(k + 1) % nv];
        let t0 = (cur - prev).normalize();
        let t1 = (next - cur).normalize();
        let n0 = Vec2::new(t0.y, -t0.x);
        let n1 = Vec2::new(t1.y, -t1.x);
        (n0 + n1).normalize()
    }

    /// Signed distance: negative inside the shape, positive outside. Exact for
    /// circles and rounded squares; exact up to floating point for polygons.
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        match self {
            Shape::Circle { radius } => p.norm() - radius,
            Shape::RoundedSquare {
                side,
                corner_radius,
            } => {
                let half = side / 2.0 - corner_radius;
                let q = Vec2::new(p.x.abs() - half, p.y.abs() - half);
                let outside = Vec2::new(q.x.max(0.0), q.y.max(0.0)).norm();
                let inside = q.x.max(q.y).min(0.0);
                outside + inside - corner_radius
            }
            Shape::Polygon { vertices } => polygon_signed_distance(vertices, p),
        }
    }

    fn rounded_square_pieces(&self) -> Vec<Piece> {
        let Shape::RoundedSquare {
            side,
            corner_radius,
        } = self
        else {
            unreachable!()
        };
        let r = *corner_radius;
        let half = side / 2.0;
        let h = half - r;
        let straight = 2.0 * h;
        let arc = std::f64::consts::FRAC_PI_2 * r;
        let f = std::f64::consts::FRAC_PI_2;
        vec![
            Piece::line(Vec2::new(-h, -half), Vec2::new(1.0, 0.0), Vec2::new(0.0, -1.0), straight),
            Piece::arc(Vec2::new(h, -h), r, -f, arc),
            Piece::line(Vec2::new(half, -h), Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0), straight),
            Piece::arc(Vec2::new(h, h), r, 0.0, arc),
            Piece::line(Vec2::new(h, half), Vec2::new(-1.0, 0.0), Vec2::new(0.0, 1.0), straight),
            Piece::arc(Vec2::new(-h, h), r, f, arc),
            Piece::line(Vec2::new(-half, h), Vec2::new(0.0, -1.0), Vec2::new(-1.0, 0.0), straight),
            Piece::arc(Vec2::new(-h, -h), r, 2.0 * f, arc),
        ]
    }

    /// Arclength positions for an initial boundary sampling with target
    /// spacing `dx`. Polygons place one node at each vertex; smooth shapes use
    /// per-piece midpoint sampling. The arclength weights sum exactly to the
    /// perimeter.
    pub fn sample_arclengths(&self, dx: f64) -> Result<Vec<(f64, f64)>, Error> {
        if dx <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "boundary spacing must be positive, got {dx}"
            )));
        }
        let feature = self.feature_size();
        if dx >= feature {
            return Err(Error::InvalidInput(format!(
                "boundary spacing {dx} is not smaller than the smallest geometric feature {feature}"
            )));
        }
        match self {
            Shape::Circle { .. } => {
                let per = self.perimeter();
                let n = ((per / dx).round() as usize).max(4);
                let da = per / n as f64;
                Ok((0..n).map(|k| (k as f64 * da, da)).collect())
            }
            Shape::RoundedSquare { .. } => {
                let mut out = Vec::new();
                let mut acc = 0.0;
                for p in self.rounded_square_pieces() {
                    let n = ((p.len / dx).round() as usize).max(1);
                    let da = p.len / n as f64;
                    for k in 0..n {
                        out.push((acc + (k as f64 + 0.5) * da, da));
                    }
                    acc += p.len;
                }
                Ok(out)
            }
            Shape::Polygon { vertices } => {
                let lens = edge_lengths(vertices);
                let segs: Vec<usize> = lens
                    .iter()
                    .map(|l| ((l / dx).round() as usize).max(1))
                    .collect();
                let mut out = Vec::new();
                let mut acc = 0.0;
                for (k, l) in lens.iter().enumerate() {
                    let n = segs[k];
                    let prev = (k + lens.len() - 1) % lens.len();
                    let da_vertex = 0.5 * (lens[prev] / segs[prev] as f64 + l / n as f64);
                    out.push((acc, da_vertex));
                    for j in 1..n {
                        out.push((acc + j as f64 * l / n as f64, l / n as f64));
                    }
                    acc += l;
                }
                Ok(out)
            }
        }
    }
}

struct Piece {
    start: Vec2,
    dir: Vec2,
    normal: Vec2,
    center: Vec2,
    radius: f64,
    angle0: f64,
    len: f64,
    is_arc: bool,
}

impl Piece {
    fn line(start: Vec2, dir: Vec2, normal: Vec2, len: f64) -> Self {
        Piece {
            start,
            dir,
            normal,
            center: Vec2::zeros(),
            radius: 0.0,
            angle0: 0.0,
            len,
            is_arc: false,
        }
    }
    fn arc(center: Vec2, radius: f64, angle0: f64, len: f64) -> Self {
        Piece {
            start: Vec2::zeros(),
            dir: Vec2::zeros(),
            normal: Vec2::zeros(),
            center,
            radius,
            angle0,
            len,
            is_arc: true,
        }
    }
    fn at(&self, local: f64) -> (Vec2, Vec2) {
        if self.is_arc {
            let theta = self.angle0 + local / self.radius;
            let n = Vec2::new(theta.cos(), theta.sin());
            (self.center + n * self.radius, n)
        } else {
            (self.start + self.dir * local, self.normal)
        }
    }
}

fn edge_lengths(vertices: &[Vec2]) -> Vec<f64> {
    let nv = vertices.len();
    (0..nv)
        .map(|k| (vertices[(k + 1) % nv] - vertices[k]).norm())
        .collect()
}

fn polygon_signed_distance(vertices: &[Vec2], p: Vec2) -> f64 {
    let nv = vertices.len();
    let mut d2 = f64::INFINITY;
    let mut inside = false;
    for k in 0..nv {
        let a = vertices[k];
        let b = vertices[(k + 1) % nv];
        let e = b - a;
        let w = p - a;
        let t = (w.dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        d2 = d2.min((w - e * t).norm_squared());
        // Even-odd crossing test.
        let crosses = (a.y > p.y) != (b.y > p.y);
        if crosses && p.x < a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x) {
            inside = !inside;
        }
    }
    let d = d2.sqrt();
    if inside {
        -d
    } else {
        d
    }
}

/// One sampled boundary node: position, outward normal, arclength weight, and
/// the arclength coordinate used for refinement re-projection.
#[derive(Debug, Clone, Copy)]
pub struct BoundarySample {
    pub arclength: f64,
    pub position: Vec2,
    pub normal: Vec2,
    pub arc_weight: f64,
}

/// Sample a boundary curve at target spacing `dx` in its local frame.
pub fn sample_boundary(shape: &Shape, dx: f64) -> Result<Vec<BoundarySample>, Error> {
    let samples = shape.sample_arclengths(dx)?;
    Ok(samples
        .into_iter()
        .map(|(s, da)| {
            let (position, normal) = shape.point_at(s);
            BoundarySample {
                arclength: s,
                position,
                normal,
                arc_weight: da,
            }
        })
        .collect())
}

/// A rigid solid body: shape, pose and kinematic state.
#[derive(Debug, Clone)]
pub struct SolidBody {
    pub shape: Shape,
    pub position: Vec2,
    pub orientation: f64,
    pub velocity: Vec2,
    pub angular_velocity: f64,
    pub external_force: Vec2,
    pub external_torque: f64,
}

impl SolidBody {
    pub fn new(shape: Shape, position: Vec2) -> Self {
        SolidBody {
            shape,
            position,
            orientation: 0.0,
            velocity: Vec2::zeros(),
            angular_velocity: 0.0,
            external_force: Vec2::zeros(),
            external_torque: 0.0,
        }
    }

    pub fn with_orientation(mut self, theta: f64) -> Self {
        self.orientation = wrap_angle(theta);
        self
    }

    pub fn to_world(&self, local: Vec2) -> Vec2 {
        self.position + rot(self.orientation) * local
    }

    pub fn to_local(&self, world: Vec2) -> Vec2 {
        rot(-self.orientation) * (world - self.position)
    }

    pub fn normal_to_world(&self, local_normal: Vec2) -> Vec2 {
        rot(self.orientation) * local_normal
    }

    /// Signed distance in the world frame: negative inside the body.
    pub fn signed_distance(&self, world: Vec2) -> f64 {
        self.shape.signed_distance(self.to_local(world))
    }

    /// Boundary point and outward normal at arclength `s`, in the world frame.
    pub fn point_at(&self, s: f64) -> (Vec2, Vec2) {
        let (p, n) = self.shape.point_at(s);
        (self.to_world(p), self.normal_to_world(n))
    }
}

/// Velocity of a material point `x` on a rigid body:
/// `v = X_dot + theta_dot x (x - X)`.
pub fn rigid_velocity(body: &SolidBody, x: Vec2) -> Vec2 {
    let r = x - body.position;
    Vec2::new(
        body.velocity.x - body.angular_velocity * r.y,
        body.velocity.y + body.angular_velocity * r.x,
    )
}

/// Stationary interior boundary (an obstacle wall with zero velocity).
#[derive(Debug, Clone)]
pub struct Obstacle {
    pub shape: Shape,
    pub position: Vec2,
    pub orientation: f64,
}

impl Obstacle {
    pub fn new(shape: Shape, position: Vec2) -> Self {
        Obstacle {
            shape,
            position,
            orientation: 0.0,
        }
    }

    pub fn to_local(&self, world: Vec2) -> Vec2 {
        rot(-self.orientation) * (world - self.position)
    }

    pub fn signed_distance(&self, world: Vec2) -> f64 {
        self.shape.signed_distance(self.to_local(world))
    }

    pub fn point_at(&self, s: f64) -> (Vec2, Vec2) {
        let (p, n) = self.shape.point_at(s);
        (
            self.position + rot(self.orientation) * p,
            rot(self.orientation) * n,
        )
    }
}

/// The computational domain: rectangular outer wall, obstacles, freely moving
/// solid bodies, and fluid properties.
#[derive(Debug, Clone)]
pub struct Domain {
    pub lower: Vec2,
    pub upper: Vec2,
    pub bodies: Vec<SolidBody>,
    pub obstacles: Vec<Obstacle>,
    /// Kinematic viscosity.
    pub nu: f64,
    /// Fluid density.
    pub rho: f64,
}

impl Domain {
    pub fn new(lower: Vec2, upper: Vec2) -> Result<Self, Error> {
        if upper.x <= lower.x || upper.y <= lower.y {
            return Err(Error::InvalidGeometry(format!(
                "domain rectangle needs positive side lengths: {lower:?}..{upper:?}"
            )));
        }
        Ok(Domain {
            lower,
            upper,
            bodies: Vec::new(),
            obstacles: Vec::new(),
            nu: 1.0,
            rho: 1.0,
        })
    }

    pub fn wall_shape(&self) -> Shape {
        Shape::rectangle(self.lower, self.upper).expect("validated at construction")
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x > self.lower.x && p.x < self.upper.x && p.y > self.lower.y && p.y < self.upper.y
    }

    /// True if `p` lies strictly in the fluid region: inside the rectangle and
    /// outside every body and obstacle.
    pub fn in_fluid(&self, p: Vec2) -> bool {
        self.contains(p)
            && self.bodies.iter().all(|b| b.signed_distance(p) > 0.0)
            && self.obstacles.iter().all(|o| o.signed_distance(p) > 0.0)
    }

    /// Signed distance to the nearest solid surface (bodies and obstacles
    /// only); negative inside a solid.
    pub fn solid_distance(&self, p: Vec2) -> f64 {
        self.bodies
            .iter()
            .map(|b| b.signed_distance(p))
            .chain(self.obstacles.iter().map(|o| o.signed_distance(p)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Validate the finite-separation invariants: bodies and obstacles lie
    /// strictly inside the rectangle and no two solid boundaries touch.
    pub fn validate(&self) -> Result<(), Error> {
        let probes: Vec<(String, Vec<Vec2>)> = self
            .bodies
            .iter()
            .enumerate()
            .map(|(n, b)| (format!("body {n}"), boundary_probe(&b.shape, |p| b.to_world(p))))
            .chain(self.obstacles.iter().enumerate().map(|(n, o)| {
                (
                    format!("obstacle {n}"),
                    boundary_probe(&o.shape, |p| {
                        o.position + rot(o.orientation) * p
                    }),
                )
            }))
            .collect();
        for (name, pts) in &probes {
            for p in pts {
                if !self.contains(*p) {
                    return Err(Error::InvalidGeometry(format!(
                        "{name} is not strictly inside the domain rectangle"
                    )));
                }
            }
        }
        let sdfs: Vec<Box<dyn Fn(Vec2) -> f64 + '_>> = self
            .bodies
            .iter()
            .map(|b| Box::new(move |p| b.signed_distance(p)) as Box<dyn Fn(Vec2) -> f64>)
            .chain(
                self.obstacles
                    .iter()
                    .map(|o| Box::new(move |p| o.signed_distance(p)) as Box<dyn Fn(Vec2) -> f64>),
            )
            .collect();
        for i in 0..probes.len() {
            for j in 0..probes.len() {
                if i == j {
                    continue;
                }
                let gap = probes[i].1.iter().map(|p| sdfs[j](*p)).fold(f64::INFINITY, f64::min);
                if gap <= 0.0 {
                    return Err(Error::InvalidGeometry(format!(
                        "{} and {} boundaries intersect (gap {gap:.3e})",
                        probes[i].0, probes[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Minimum separation between any two solid boundaries (including the
    /// outer wall), estimated from a fine boundary sampling.
    pub fn min_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        let probes: Vec<Vec<Vec2>> = self
            .bodies
            .iter()
            .map(|b| boundary_probe(&b.shape, |p| b.to_world(p)))
            .chain(
                self.obstacles
                    .iter()
                    .map(|o| boundary_probe(&o.shape, |p| o.position + rot(o.orientation) * p)),
            )
            .collect();
        for (i, pts) in probes.iter().enumerate() {
            for p in pts {
                // Wall distance.
                let wall = (p.x - self.lower.x)
                    .min(self.upper.x - p.x)
                    .min(p.y - self.lower.y)
                    .min(self.upper.y - p.y);
                gap = gap.min(wall);
                for (j, body) in self.bodies.iter().enumerate() {
                    if j != i {
                        gap = gap.min(body.signed_distance(*p));
                    }
                }
                for (j, obs) in self.obstacles.iter().enumerate() {
                    if j + self.bodies.len() != i {
                        gap = gap.min(obs.signed_distance(*p));
                    }
                }
            }
        }
        gap
    }
}

fn boundary_probe(shape: &Shape, to_world: impl Fn(Vec2) -> Vec2) -> Vec<Vec2> {
    let per = shape.perimeter();
    let n = 256;
    (0..n)
        .map(|k| {
            let (p, _) = shape.point_at(per * k as f64 / n as f64);
            to_world(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn circle_sampling_uniform() {
        let shape = Shape::circle(1.0).unwrap();
        let dx = 2.0 * std::f64::consts::PI / 64.0;
        let samples = sample_boundary(&shape, dx).unwrap();
        assert_eq!(samples.len(), 64);
        let total: f64 = samples.iter().map(|s| s.arc_weight).sum();
        assert_relative_eq!(total, 2.0 * std::f64::consts::PI, epsilon = 1e-12);
        for s in &samples {
            assert_relative_eq!(s.arc_weight, dx, epsilon = 1e-12);
            assert_relative_eq!(s.normal.norm(), 1.0, epsilon = 1e-12);
            // Outward: aligned with the radial direction.
            assert!(s.normal.dot(&s.position) > 0.99);
            assert!(shape.signed_distance(s.position).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_square_wall_sampling() {
        let shape = Shape::rectangle(Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)).unwrap();
        let samples = sample_boundary(&shape, 0.25).unwrap();
        assert_eq!(samples.len(), 16);
        let total: f64 = samples.iter().map(|s| s.arc_weight).sum();
        assert_relative_eq!(total, 4.0, epsilon = 1e-12);
        let mut corner_count = 0;
        for s in &samples {
            let at_corner = [
                Vec2::new(0.0, 0.0),
                Vec2::new(1.0, 0.0),
                Vec2::new(1.0, 1.0),
                Vec2::new(0.0, 1.0),
            ]
            .iter()
            .any(|v| (s.position - v).norm() < 1e-12);
            if at_corner {
                corner_count += 1;
                // Corner nodes receive the bisector normal.
                assert_relative_eq!(s.normal.x.abs(), s.normal.y.abs(), epsilon = 1e-12);
            } else {
                // Edge nodes have axis-aligned normals.
                assert!(
                    s.normal.x.abs() < 1e-12 || s.normal.y.abs() < 1e-12,
                    "normal {:?} not axis-aligned",
                    s.normal
                );
            }
        }
        assert_eq!(corner_count, 4);
    }

    #[test]
    fn rounded_square_perimeter_reproduced() {
        let side = 0.08;
        let corner = 0.008;
        let shape = Shape::rounded_square(side, corner).unwrap();
        let exact = 4.0 * (side - 2.0 * corner) + 2.0 * std::f64::consts::PI * corner;
        assert_relative_eq!(shape.perimeter(), exact, epsilon = 1e-14);
        let samples = sample_boundary(&shape, 0.004).unwrap();
        let total: f64 = samples.iter().map(|s| s.arc_weight).sum();
        assert!((total - exact).abs() / exact < 0.01);
        for s in &samples {
            assert!(shape.signed_distance(s.position).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_rejects_coarse_spacing() {
        let shape = Shape::rounded_square(0.08, 0.008).unwrap();
        assert!(sample_boundary(&shape, 0.05).is_err());
        assert!(sample_boundary(&shape, -1.0).is_err());
    }

    #[test]
    fn boundary_spacing_within_bounds() {
        for (shape, dx) in [
            (Shape::circle(0.3).unwrap(), 0.07),
            (Shape::rounded_square(1.0, 0.2).unwrap(), 0.11),
            (Shape::regular_polygon(6, 0.2).unwrap(), 0.045),
        ] {
            let samples = sample_boundary(&shape, dx).unwrap();
            let mut sorted: Vec<f64> = samples.iter().map(|s| s.arclength).collect();
            sorted.sort_by(f64::total_cmp);
            for w in sorted.windows(2) {
                let gap = w[1] - w[0];
                assert!(gap >= 0.5 * dx - 1e-12 && gap <= 1.5 * dx + 1e-12, "gap {gap} vs dx {dx}");
            }
        }
    }

    #[test]
    fn rigid_velocity_cases() {
        let mut body = SolidBody::new(Shape::circle(1.0).unwrap(), Vec2::zeros());
        assert_eq!(rigid_velocity(&body, Vec2::new(3.0, -2.0)), Vec2::zeros());

        body.velocity = Vec2::new(1.0, 2.0);
        assert_eq!(rigid_velocity(&body, Vec2::new(5.0, 5.0)), Vec2::new(1.0, 2.0));

        body.velocity = Vec2::zeros();
        body.angular_velocity = 1.0;
        let v = rigid_velocity(&body, Vec2::new(0.0, 1.0));
        assert_relative_eq!(v.x, -1.0, epsilon = 1e-15);
        assert_relative_eq!(v.y, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rigid_velocity_affine_superposition() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let center = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mk = |v: Vec2, w: f64| {
                let mut b = SolidBody::new(Shape::circle(0.1).unwrap(), center);
                b.velocity = v;
                b.angular_velocity = w;
                b
            };
            let v1 = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let v2 = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (w1, w2) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let a = rng.gen_range(-2.0..2.0);
            let lhs = rigid_velocity(&mk(v1 + v2 * a, w1 + w2 * a), x);
            let rhs = rigid_velocity(&mk(v1, w1), x) + rigid_velocity(&mk(v2, w2), x) * a;
            assert_relative_eq!(lhs.x, rhs.x, epsilon = 1e-12);
            assert_relative_eq!(lhs.y, rhs.y, epsilon = 1e-12);
        }
    }

    #[test]
    fn signed_distance_cases() {
        let body = SolidBody::new(Shape::circle(0.04).unwrap(), Vec2::zeros());
        assert_relative_eq!(body.signed_distance(Vec2::new(0.05, 0.0)), 0.01, epsilon = 1e-15);
        assert_relative_eq!(body.signed_distance(Vec2::zeros()), -0.04, epsilon = 1e-15);
    }

    #[test]
    fn two_circle_gap() {
        let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
        domain.bodies.push(SolidBody::new(
            Shape::circle(0.04).unwrap(),
            Vec2::new(-0.0406, 0.0),
        ));
        domain.bodies.push(SolidBody::new(
            Shape::circle(0.04).unwrap(),
            Vec2::new(0.0406, 0.0),
        ));
        // Analytic gap: center distance minus the two radii.
        let analytic = 0.0812 - 0.08;
        let b0 = &domain.bodies[0];
        let b1 = &domain.bodies[1];
        let measured = (0..512)
            .map(|k| {
                let (p, _) = b0.point_at(b0.shape.perimeter() * k as f64 / 512.0);
                b1.signed_distance(p)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((measured - analytic).abs() < 1e-6, "gap {measured} vs {analytic}");
        assert!(domain.validate().is_ok());
    }

    #[test]
    fn overlapping_bodies_rejected() {
        let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
        domain.bodies.push(SolidBody::new(
            Shape::circle(0.1).unwrap(),
            Vec2::new(-0.05, 0.0),
        ));
        domain.bodies.push(SolidBody::new(
            Shape::circle(0.1).unwrap(),
            Vec2::new(0.05, 0.0),
        ));
        assert!(domain.validate().is_err());
    }

    #[test]
    fn refined_arclength_reprojects_onto_circle() {
        let shape = Shape::circle(2.0).unwrap();
        let (p, n) = shape.point_at(1.0);
        assert_relative_eq!(p.norm(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-14);
        // Arclength-to-angle relation on a circle.
        assert_relative_eq!(p.y.atan2(p.x), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -std::f64::consts::PI, 0.0, 3.0, 7.5, 123.4] {
            let w = wrap_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
            assert_relative_eq!(w.sin(), a.sin(), epsilon = 1e-12);
            assert_relative_eq!(w.cos(), a.cos(), epsilon = 1e-12);
        }
    }
}
