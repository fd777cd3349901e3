//! 2D meshless Stokes fluid–solid interaction solver.
//!
//! The discretization is a spatially adaptive generalized moving least
//! squares (GMLS) collocation scheme: velocity is reconstructed in a
//! divergence-free polynomial space, the pressure div-grad operator uses a
//! staggered edge-difference fit, and the fluid and rigid-body equations are
//! assembled into one monolithic block system. The linear systems are solved
//! by restarted GMRES preconditioned with a monolithic geometric multigrid
//! V-cycle built on the hierarchy of node sets produced by adaptive
//! h-refinement.

pub mod assembly;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod gmls;
pub mod kdtree;
pub mod krylov;
pub mod multigrid;
pub mod point_cloud;
pub mod refine;
pub mod sparse;

pub use error::Error;
pub use geometry::Vec2;
