//! Leveled GMLS node sets: uniform seeding, spatial indexing, neighbor
//! queries, and node splitting for h-refinement.
//!
//! A `NodeSet` is immutable after construction. Refinement produces a new
//! set one level up together with the parent→children map used later by the
//! multigrid restriction operator.

use crate::error::Error;
use crate::geometry::{sample_boundary, Domain, Vec2};
use crate::kdtree::KdTree;

/// Minimum clearance of an interior node from any boundary, as a fraction
/// of the node's own spacing. Nodes closer than this produce degenerate
/// one-sided stencils; the boundary's own nodes already cover that zone.
pub const BOUNDARY_CLEARANCE: f64 = 0.25;

fn clearance_factor() -> f64 {
    std::env::var("CLEARANCE")
        .map(|v| v.parse().unwrap())
        .unwrap_or(BOUNDARY_CLEARANCE)
}

/// True when an interior node at `p` with spacing `dx` keeps adequate
/// clearance from the outer wall and every solid boundary.
pub fn interior_placement_ok(domain: &Domain, p: Vec2, dx: f64) -> bool {
    let clear = clearance_factor() * dx;
    let wall = (p.x - domain.lower.x)
        .min(domain.upper.x - p.x)
        .min(p.y - domain.lower.y)
        .min(domain.upper.y - p.y);
    wall > clear && domain.solid_distance(p) > clear
}

/// Identity of the boundary a node sits on, used when checking whether two
/// boundary nodes belong to different boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryRef {
    /// Outer wall (0) or obstacle wall (1 + obstacle index).
    Wall(usize),
    /// Freely moving solid body.
    Body(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    Wall(usize),
    SolidBoundary(usize),
}

impl NodeKind {
    pub fn boundary(&self) -> Option<BoundaryRef> {
        match self {
            NodeKind::Interior => None,
            NodeKind::Wall(w) => Some(BoundaryRef::Wall(*w)),
            NodeKind::SolidBoundary(n) => Some(BoundaryRef::Body(*n)),
        }
    }

    pub fn is_boundary(&self) -> bool {
        !matches!(self, NodeKind::Interior)
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub position: Vec2,
    /// Local resolution `dx_i`; children carry half the parent spacing.
    pub spacing: f64,
    pub kind: NodeKind,
    /// Outward unit normal (boundary nodes only).
    pub normal: Option<Vec2>,
    /// Arclength quadrature weight (boundary nodes only).
    pub arc_weight: f64,
    /// Arclength coordinate on the owning boundary (boundary nodes only).
    pub arclength: f64,
    /// Index of the node on the previous level this one came from.
    pub parent: Option<usize>,
    /// Preprocessing-only node lying inside a solid; excluded from solves.
    pub ghost: bool,
}

impl Node {
    fn interior(position: Vec2, spacing: f64) -> Self {
        Node {
            position,
            spacing,
            kind: NodeKind::Interior,
            normal: None,
            arc_weight: 0.0,
            arclength: 0.0,
            parent: None,
            ghost: false,
        }
    }
}

pub struct NodeSet {
    pub nodes: Vec<Node>,
    pub level: usize,
    tree: KdTree,
}

impl NodeSet {
    pub fn new(nodes: Vec<Node>, level: usize) -> Self {
        let tree = KdTree::build(&nodes.iter().map(|n| n.position).collect::<Vec<_>>());
        NodeSet { nodes, level, tree }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Indices within strict distance `eps` of node `i` (includes `i` itself).
    pub fn neighbors(&self, i: usize, eps: f64) -> Vec<usize> {
        self.tree.radius(self.nodes[i].position, eps)
    }

    /// Indices within strict distance `eps` of an arbitrary point; used for
    /// cross-level queries where the sources live in this set.
    pub fn neighbors_of_point(&self, p: Vec2, eps: f64) -> Vec<usize> {
        self.tree.radius(p, eps)
    }

    /// Check that no two nodes coincide (pairwise distance > tol).
    pub fn check_separation(&self, tol: f64) -> Result<(), Error> {
        for i in 0..self.nodes.len() {
            let hits = self.tree.radius(self.nodes[i].position, tol);
            if hits.iter().any(|&j| j != i) {
                return Err(Error::InvalidGeometry(format!(
                    "coincident nodes near index {i} at {:?}",
                    self.nodes[i].position
                )));
            }
        }
        Ok(())
    }

    /// Node-set dump: columns x, y, dx, kind, level, parent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,dx,kind,level,parent\n");
        for n in &self.nodes {
            let kind = match n.kind {
                NodeKind::Interior => "interior".to_string(),
                NodeKind::Wall(w) => format!("wall{w}"),
                NodeKind::SolidBoundary(b) => format!("solid{b}"),
            };
            let parent = n.parent.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                n.position.x, n.position.y, n.spacing, kind, self.level, parent
            ));
        }
        out
    }
}

/// Boundary sampling spacing for a curve: the target spacing, capped below
/// the smallest geometric feature so small bodies stay resolvable from a
/// coarse interior lattice.
pub fn boundary_spacing(dx: f64, feature: f64) -> f64 {
    dx.min(0.9 * feature)
}

/// Uniform coarse discretization: interior nodes on a square lattice of
/// pitch `dx0` restricted to the fluid region, boundaries sampled at `dx0`
/// (capped per boundary by its feature size).
pub fn seed_uniform(domain: &Domain, dx0: f64) -> Result<NodeSet, Error> {
    if dx0 <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "seed spacing must be positive, got {dx0}"
        )));
    }
    let extent = domain.upper - domain.lower;
    let nx = (extent.x / dx0).round().max(1.0) as usize;
    let ny = (extent.y / dx0).round().max(1.0) as usize;
    let px = extent.x / nx as f64;
    let py = extent.y / ny as f64;
    let mut nodes = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let p = Vec2::new(
                domain.lower.x + (i as f64 + 0.5) * px,
                domain.lower.y + (j as f64 + 0.5) * py,
            );
            let dx = px.max(py);
            if interior_placement_ok(domain, p, dx) {
                nodes.push(Node::interior(p, dx));
            }
        }
    }
    if nodes.is_empty() {
        return Err(Error::InvalidInput(
            "seed spacing leaves no interior nodes in the fluid region".into(),
        ));
    }

    let wall = domain.wall_shape();
    let dx_wall = boundary_spacing(dx0, wall.feature_size());
    for s in sample_boundary(&wall, dx_wall)? {
        nodes.push(Node {
            position: s.position,
            spacing: s.arc_weight,
            kind: NodeKind::Wall(0),
            normal: Some(s.normal),
            arc_weight: s.arc_weight,
            arclength: s.arclength,
            parent: None,
            ghost: false,
        });
    }
    for (k, obs) in domain.obstacles.iter().enumerate() {
        let dxb = boundary_spacing(dx0, obs.shape.feature_size());
        for s in sample_boundary(&obs.shape, dxb)? {
            let (p, n) = obs.point_at(s.arclength);
            nodes.push(Node {
                position: p,
                spacing: s.arc_weight,
                kind: NodeKind::Wall(k + 1),
                normal: Some(n),
                arc_weight: s.arc_weight,
                arclength: s.arclength,
                parent: None,
                ghost: false,
            });
        }
    }
    for (b, body) in domain.bodies.iter().enumerate() {
        let dxb = boundary_spacing(dx0, body.shape.feature_size());
        for s in sample_boundary(&body.shape, dxb)? {
            let (p, n) = body.point_at(s.arclength);
            nodes.push(Node {
                position: p,
                spacing: s.arc_weight,
                kind: NodeKind::SolidBoundary(b),
                normal: Some(n),
                arc_weight: s.arc_weight,
                arclength: s.arclength,
                parent: None,
                ghost: false,
            });
        }
    }
    Ok(NodeSet::new(nodes, 0))
}

pub struct RefineOutcome {
    pub next: NodeSet,
    /// children[i] lists the fine indices split from coarse node i; empty for
    /// carried-over nodes.
    pub children: Vec<Vec<usize>>,
    pub discarded: usize,
}

/// Split the marked nodes of a set: interior nodes quadrisect to the four
/// quadrant offsets, boundary nodes bisect along arclength and re-project
/// onto the exact boundary. Children falling outside the fluid region are
/// discarded (or kept as ghosts when `keep_ghosts` is set, for the gap
/// preprocessing pass). A marked node whose children all get discarded is
/// carried over unchanged.
pub fn refine_nodes(
    set: &NodeSet,
    domain: &Domain,
    marked: &[bool],
    keep_ghosts: bool,
) -> RefineOutcome {
    assert_eq!(marked.len(), set.len());
    let mut nodes: Vec<Node> = Vec::with_capacity(set.len() * 2);
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); set.len()];
    let mut discarded = 0usize;

    for (i, node) in set.nodes.iter().enumerate() {
        if !marked[i] {
            let mut copy = node.clone();
            copy.parent = Some(i);
            nodes.push(copy);
            continue;
        }
        match node.kind {
            NodeKind::Interior => {
                let q = node.spacing / 4.0;
                let child_dx = node.spacing / 2.0;
                let mut kept = Vec::new();
                for (ox, oy) in [(-q, -q), (q, -q), (-q, q), (q, q)] {
                    let p = node.position + Vec2::new(ox, oy);
                    if !domain.contains(p) {
                        discarded += 1;
                        continue;
                    }
                    let placement_ok = interior_placement_ok(domain, p, child_dx);
                    if !placement_ok && !keep_ghosts {
                        discarded += 1;
                        continue;
                    }
                    let mut child = Node::interior(p, child_dx);
                    child.parent = Some(i);
                    // During gap preprocessing, nodes with inadequate
                    // clearance (possibly inside solids) are kept as ghosts
                    // so refinement can cascade into narrow gaps.
                    child.ghost = !placement_ok;
                    kept.push(child);
                }
                if kept.is_empty() {
                    let mut copy = node.clone();
                    copy.parent = Some(i);
                    nodes.push(copy);
                } else {
                    for child in kept {
                        children[i].push(nodes.len());
                        nodes.push(child);
                    }
                }
            }
            NodeKind::Wall(_) | NodeKind::SolidBoundary(_) => {
                let (shape_point, perim): (Box<dyn Fn(f64) -> (Vec2, Vec2)>, f64) = match node.kind
                {
                    NodeKind::Wall(0) => {
                        let wall = domain.wall_shape();
                        let perim = wall.perimeter();
                        (Box::new(move |s| wall.point_at(s)), perim)
                    }
                    NodeKind::Wall(w) => {
                        let obs = &domain.obstacles[w - 1];
                        (Box::new(move |s| obs.point_at(s)), obs.shape.perimeter())
                    }
                    NodeKind::SolidBoundary(b) => {
                        let body = &domain.bodies[b];
                        (Box::new(move |s| body.point_at(s)), body.shape.perimeter())
                    }
                    NodeKind::Interior => unreachable!(),
                };
                for ds in [-node.spacing / 4.0, node.spacing / 4.0] {
                    let s = (node.arclength + ds).rem_euclid(perim);
                    let (p, nrm) = shape_point(s);
                    let child = Node {
                        position: p,
                        spacing: node.spacing / 2.0,
                        kind: node.kind,
                        normal: Some(nrm),
                        arc_weight: node.spacing / 2.0,
                        arclength: s,
                        parent: Some(i),
                        ghost: false,
                    };
                    children[i].push(nodes.len());
                    nodes.push(child);
                }
            }
        }
    }

    RefineOutcome {
        next: NodeSet::new(nodes, set.level + 1),
        children,
        discarded,
    }
}

/// Drop ghost nodes (preprocessing artifacts inside solids), preserving order.
pub fn drop_ghosts(set: &NodeSet) -> NodeSet {
    let nodes: Vec<Node> = set
        .nodes
        .iter()
        .filter(|n| !n.ghost)
        .map(|n| {
            let mut n = n.clone();
            n.parent = None;
            n
        })
        .collect();
    NodeSet::new(nodes, set.level)
}
