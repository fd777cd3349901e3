//! Minimal static 2D kd-tree for radius queries over node positions.
//!
//! Built once per node set, queried read-only from any thread. Radius
//! queries use a strict `< r` predicate to match the neighbor-set
//! definition used by the discretization.

use crate::geometry::Vec2;

pub struct KdTree {
    // Implicit balanced tree over a reordered index array: node = midpoint of
    // the slice, split axis alternates per depth.
    order: Vec<u32>,
    points: Vec<Vec2>,
}

impl KdTree {
    pub fn build(points: &[Vec2]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let pts = points.to_vec();
        if !order.is_empty() {
            build_recursive(&mut order, &pts, 0);
        }
        KdTree { order, points: pts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of all points with `|p - center| < r`, sorted ascending.
    pub fn radius(&self, center: Vec2, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.order.is_empty() {
            self.radius_into(0, self.order.len(), 0, center, r, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_into(
        &self,
        lo: usize,
        hi: usize,
        axis: usize,
        center: Vec2,
        r: f64,
        out: &mut Vec<usize>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid] as usize;
        let p = self.points[idx];
        if (p - center).norm_squared() < r * r {
            out.push(idx);
        }
        let c = if axis == 0 { center.x } else { center.y };
        let v = if axis == 0 { p.x } else { p.y };
        let next = 1 - axis;
        if c - r < v {
            self.radius_into(lo, mid, next, center, r, out);
        }
        if c + r > v {
            self.radius_into(mid + 1, hi, next, center, r, out);
        }
    }
}

fn build_recursive(order: &mut [u32], points: &[Vec2], axis: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        let (pa, pb) = (points[a as usize], points[b as usize]);
        let (ka, kb) = if axis == 0 { (pa.x, pb.x) } else { (pa.y, pb.y) };
        ka.total_cmp(&kb)
    });
    let (left, rest) = order.split_at_mut(mid);
    let right = &mut rest[1..];
    build_recursive(left, points, 1 - axis);
    build_recursive(right, points, 1 - axis);
}
