//! Scratch probe: fluid-solid interaction solves.

use gmls_stokes::assembly::Forcing;
use gmls_stokes::geometry::{Domain, Shape, SolidBody, Vec2};
use gmls_stokes::krylov::GmresConfig;
use gmls_stokes::multigrid::{MgConfig, SmootherKind};
use gmls_stokes::refine::{adapt_loop, AdaptConfig};
use std::f64::consts::PI;
use std::sync::Arc;

fn tg_forcing() -> Forcing {
    Forcing {
        body_force: Arc::new(|p: Vec2| {
            Vec2::new(
                2.0 * PI * PI * (PI * p.x).cos() * (PI * p.y).sin() + 2.0 * PI * (2.0 * PI * p.x).sin(),
                -2.0 * PI * PI * (PI * p.x).sin() * (PI * p.y).cos() + 2.0 * PI * (2.0 * PI * p.y).sin(),
            )
        }),
        div_force: Some(Arc::new(|p: Vec2| {
            4.0 * PI * PI * ((2.0 * PI * p.x).cos() + (2.0 * PI * p.y).cos())
        })),
        wall_velocity: Arc::new(|p: Vec2| {
            Vec2::new((PI * p.x).cos() * (PI * p.y).sin(), -(PI * p.x).sin() * (PI * p.y).cos())
        }),
    }
}

#[test]
fn probe_single_circle() {
    let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
    domain.bodies.push(SolidBody::new(
        Shape::circle(0.2).unwrap(),
        Vec2::new(0.31, 0.17),
    ));
    let cfg = AdaptConfig {
        m: 2,
        dx0: 0.25,
        alpha: 0.8,
        eps_tol: 1e-3,
        max_levels: 6,
        gmres: GmresConfig { tol: 1e-6, restart: std::env::var("RESTART").map(|v| v.parse().unwrap()).unwrap_or(100), max_iterations: 400 },
        mg: MgConfig { smoother: SmootherKind::RowProjection, k_sweeps: 8, omega: 1.0 },
    };
    let out = adapt_loop(&domain, &tg_forcing(), &cfg).expect("solve");
    for rep in &out.reports {
        println!(
            "level {} nodes {} dofs {} iters {} eta {:.4e} t {:.2}s",
            rep.level, rep.n_nodes, rep.dofs, rep.gmres_iterations, rep.eta, rep.wall_time
        );
    }
    let chi = out.solutions.last().unwrap();
    let sys = &out.hierarchy.levels[out.hierarchy.finest()].system;
    let o = sys.map.body(0);
    println!(
        "body velocity = ({:.6e}, {:.6e}), omega = {:.6e}, converged = {}",
        chi[o], chi[o + 1], chi[o + 2], out.converged
    );
}

#[test]
fn probe_single_circle_manual() {
    use gmls_stokes::assembly::assemble;
    use gmls_stokes::gmls::build_stencils;
    use gmls_stokes::multigrid::Hierarchy;
    use gmls_stokes::point_cloud::{seed_uniform, NodeKind};
    use gmls_stokes::refine::{
        enforce_quasi_uniform, estimate, mark, preprocess_gaps, refine_level,
    };

    let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
    domain.bodies.push(SolidBody::new(
        Shape::circle(0.2).unwrap(),
        Vec2::new(0.31, 0.17),
    ));
    let forcing = tg_forcing();
    let mg = MgConfig {
        smoother: SmootherKind::RowProjection,
        k_sweeps: std::env::var("MG_K").map(|v| v.parse().unwrap()).unwrap_or(8),
        omega: std::env::var("OMEGA").map(|v| v.parse().unwrap()).unwrap_or(1.0),
    };
    let gmres_cfg = GmresConfig { tol: 1e-6, restart: 100, max_iterations: 200 };

    let mut set = seed_uniform(&domain, 0.25).unwrap();
    set = preprocess_gaps(set, &domain, 2).unwrap();
    set = enforce_quasi_uniform(set, &domain, 2).unwrap();
    let mut hier: Option<Hierarchy> = None;
    let mut children: Option<Vec<Vec<usize>>> = None;
    for level in 0..6 {
        let st = build_stencils(&set, 2).unwrap();
        let sys = assemble(&set, &domain, &st, &forcing).unwrap();
        match (&mut hier, children.take()) {
            (None, _) => hier = Some(Hierarchy::new(set, &st, sys, mg).unwrap()),
            (Some(h), Some(ch)) => h.push_level(set, &st, sys, &ch).unwrap(),
            _ => unreachable!(),
        }
        let h = hier.as_ref().unwrap();
        let lvl = &h.levels[h.finest()];
        // V-cycle stationary growth on this level.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut e: Vec<f64> = (0..lvl.system.ndofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = 0.0;
        for _ in 0..6 {
            let ae = lvl.system.apply(&e);
            let v = h.vcycle(h.finest(), &ae);
            for (x, y) in e.iter_mut().zip(&v) {
                *x -= y;
            }
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            g = n;
            for x in e.iter_mut() {
                *x /= n;
            }
        }
        let bnd = lvl
            .set
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::SolidBoundary(_)))
            .count();
        let min_dx = lvl.set.nodes.iter().map(|n| n.spacing).fold(f64::INFINITY, f64::min);
        println!(
            "level {level}: nodes {} (body-bnd {bnd}, min dx {min_dx:.4}) vcycle growth {g:.4}",
            lvl.set.len()
        );
        match h.solve(&gmres_cfg) {
            Ok((chi, rep)) => {
                let o = lvl.system.map.body(0);
                println!(
                    "  solve: iters {} relres {:.2e} body=({:+.4e},{:+.4e},{:+.4e})",
                    rep.iterations, rep.final_relres, chi[o], chi[o + 1], chi[o + 2]
                );
                let field = estimate(&lvl.set, &st, &lvl.system, &chi);
                println!("  eta = {:.4e}", field.total);
                let ids = mark(&field, 0.8);
                let mut flags = vec![false; lvl.set.len()];
                for id in ids {
                    flags[id] = true;
                }
                let tr = refine_level(&lvl.set, &domain, &flags, 2).unwrap();
                set = tr.next;
                children = Some(tr.children);
            }
            Err(e) => {
                println!("  solve FAILED: {e}");
                return;
            }
        }
    }
}

#[test]
fn probe_graded_gs_mode() {
    use gmls_stokes::assembly::assemble;
    use gmls_stokes::gmls::build_stencils;
    use gmls_stokes::multigrid::Hierarchy;
    use gmls_stokes::point_cloud::{seed_uniform, NodeKind};
    use gmls_stokes::refine::{
        enforce_quasi_uniform, estimate, mark, preprocess_gaps, refine_level,
    };

    let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
    domain.bodies.push(SolidBody::new(
        Shape::circle(0.2).unwrap(),
        Vec2::new(0.31, 0.17),
    ));
    let forcing = tg_forcing();
    let mg = MgConfig { smoother: SmootherKind::RowProjection, k_sweeps: 1, omega: 1.0 };
    let gmres_cfg = GmresConfig { tol: 1e-6, restart: 100, max_iterations: 200 };

    let mut set = seed_uniform(&domain, 0.25).unwrap();
    set = preprocess_gaps(set, &domain, 2).unwrap();
    set = enforce_quasi_uniform(set, &domain, 2).unwrap();
    let mut hier: Option<Hierarchy> = None;
    let mut children: Option<Vec<Vec<usize>>> = None;
    for level in 0..4 {
        let st = build_stencils(&set, 2).unwrap();
        let sys = assemble(&set, &domain, &st, &forcing).unwrap();
        match (&mut hier, children.take()) {
            (None, _) => hier = Some(Hierarchy::new(set, &st, sys, mg).unwrap()),
            (Some(h), Some(ch)) => h.push_level(set, &st, sys, &ch).unwrap(),
            _ => unreachable!(),
        }
        let h = hier.as_ref().unwrap();
        let lvl = &h.levels[h.finest()];
        if level == 3 {
            // Smoother-only stationary iteration.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut e: Vec<f64> =
                (0..lvl.system.ndofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = 0.0;
            for _ in 0..10 {
                let ae = lvl.system.apply(&e);
                let s = lvl.smooth(&ae, &mg);
                for (x, y) in e.iter_mut().zip(&s) {
                    *x -= y;
                }
                let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                g = n;
                for x in e.iter_mut() {
                    *x /= n;
                }
            }
            println!("level 3 smoother-only growth/sweep: {g:.4e}");
            let mut idx: Vec<usize> = (0..e.len()).collect();
            idx.sort_by(|&a, &b| e[b].abs().total_cmp(&e[a].abs()));
            for &d in idx.iter().take(8) {
                let i = d / 3;
                if i < lvl.set.len() {
                    let n = &lvl.set.nodes[i];
                    let bd = domain.bodies[0].signed_distance(n.position);
                    println!(
                        "  dof {} = {:+.3} [{} node {i} {:?} dx {:.4} body-dist {:+.4}]",
                        d, e[d], ["u", "v", "p"][d % 3], n.kind, n.spacing, bd
                    );
                }
            }
            return;
        }
        let (chi, _) = h.solve(&gmres_cfg).unwrap();
        let field = estimate(&lvl.set, &st, &lvl.system, &chi);
        let ids = mark(&field, 0.8);
        let mut flags = vec![false; lvl.set.len()];
        for id in ids {
            flags[id] = true;
        }
        let tr = refine_level(&lvl.set, &domain, &flags, 2).unwrap();
        set = tr.next;
        children = Some(tr.children);
    }
}

#[test]
fn probe_boundary_row_health() {
    use gmls_stokes::assembly::assemble;
    use gmls_stokes::gmls::build_stencils;
    use gmls_stokes::point_cloud::{seed_uniform, NodeKind};
    use gmls_stokes::refine::{enforce_quasi_uniform, preprocess_gaps, refine_level, estimate, mark};
    use gmls_stokes::multigrid::Hierarchy;

    let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
    domain.bodies.push(SolidBody::new(
        Shape::circle(0.2).unwrap(),
        Vec2::new(0.31, 0.17),
    ));
    let forcing = tg_forcing();
    let mg = MgConfig {
        smoother: SmootherKind::RowProjection,
        k_sweeps: std::env::var("MG_K").map(|v| v.parse().unwrap()).unwrap_or(8),
        omega: std::env::var("OMEGA").map(|v| v.parse().unwrap()).unwrap_or(1.0),
    };
    let gmres_cfg = GmresConfig { tol: 1e-6, restart: 100, max_iterations: 200 };
    let mut set = seed_uniform(&domain, 0.25).unwrap();
    set = preprocess_gaps(set, &domain, 2).unwrap();
    set = enforce_quasi_uniform(set, &domain, 2).unwrap();
    let mut hier: Option<Hierarchy> = None;
    let mut children: Option<Vec<Vec<usize>>> = None;
    for level in 0..4 {
        let st = build_stencils(&set, 2).unwrap();
        let sys = assemble(&set, &domain, &st, &forcing).unwrap();
        match (&mut hier, children.take()) {
            (None, _) => hier = Some(Hierarchy::new(set, &st, sys, mg).unwrap()),
            (Some(h), Some(ch)) => h.push_level(set, &st, sys, &ch).unwrap(),
            _ => unreachable!(),
        }
        let h = hier.as_ref().unwrap();
        let lvl = &h.levels[h.finest()];
        if level == 3 {
            println!("body-boundary p-row health (dx, cond, |diag|, sum|offdiag|, p-col coupling):");
            for (i, n) in lvl.set.nodes.iter().enumerate() {
                if !matches!(n.kind, NodeKind::SolidBoundary(_)) {
                    continue;
                }
                let row = 3 * i + 2;
                let (cols, vals) = lvl.system.matrix.row(row);
                let mut diag = 0.0;
                let mut off = 0.0;
                for (&c, &v) in cols.iter().zip(vals) {
                    if c == row {
                        diag = v;
                    } else {
                        off += v.abs();
                    }
                }
                println!(
                    "  node {i} dx {:.4} cond {:.2e} diag {:+.3e} off {:.3e} ratio {:.1}",
                    n.spacing,
                    st.staggered[i].cond,
                    diag,
                    off,
                    off / diag.abs()
                );
            }
            return;
        }
        let (chi, _) = h.solve(&gmres_cfg).unwrap();
        let field = estimate(&lvl.set, &st, &lvl.system, &chi);
        let ids = mark(&field, 0.8);
        let mut flags = vec![false; lvl.set.len()];
        for id in ids {
            flags[id] = true;
        }
        let tr = refine_level(&lvl.set, &domain, &flags, 2).unwrap();
        set = tr.next;
        children = Some(tr.children);
    }
}

#[test]
fn probe_stall_composition() {
    use gmls_stokes::assembly::assemble;
    use gmls_stokes::gmls::build_stencils;
    use gmls_stokes::krylov::gmres;
    use gmls_stokes::multigrid::Hierarchy;
    use gmls_stokes::point_cloud::{seed_uniform, NodeKind};
    use gmls_stokes::refine::{
        enforce_quasi_uniform, estimate, mark, preprocess_gaps, refine_level,
    };

    let mut domain = Domain::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)).unwrap();
    domain.bodies.push(SolidBody::new(
        Shape::circle(0.2).unwrap(),
        Vec2::new(0.31, 0.17),
    ));
    let forcing = tg_forcing();
    let mg = MgConfig {
        smoother: SmootherKind::RowProjection,
        k_sweeps: 8,
        omega: 1.0,
    };
    let gmres_cfg = GmresConfig {
        tol: 1e-6,
        restart: std::env::var("RESTART").map(|v| v.parse().unwrap()).unwrap_or(100),
        max_iterations: std::env::var("MAXIT").map(|v| v.parse().unwrap()).unwrap_or(200),
    };
    let mut set = seed_uniform(&domain, 0.25).unwrap();
    set = preprocess_gaps(set, &domain, 2).unwrap();
    set = enforce_quasi_uniform(set, &domain, 2).unwrap();
    let mut hier: Option<Hierarchy> = None;
    let mut children: Option<Vec<Vec<usize>>> = None;
    let target: usize = std::env::var("STALL_LEVEL").map(|v| v.parse().unwrap()).unwrap_or(2);
    for level in 0..=target {
        let st = build_stencils(&set, 2).unwrap();
        let sys = assemble(&set, &domain, &st, &forcing).unwrap();
        match (&mut hier, children.take()) {
            (None, _) => hier = Some(Hierarchy::new(set, &st, sys, mg).unwrap()),
            (Some(h), Some(ch)) => h.push_level(set, &st, sys, &ch).unwrap(),
            _ => unreachable!(),
        }
        let h = hier.as_ref().unwrap();
        let lvl = &h.levels[h.finest()];
        if level == target {
            let sys = &lvl.system;
            let rhs = sys.projected_rhs();
            let (chi, rep) = gmres(
                |x| sys.apply(x),
                |v| h.vcycle(h.finest(), v),
                &rhs,
                &gmres_cfg,
            )
            .unwrap();
            println!("iters {} relres {:.3e}", rep.iterations, rep.final_relres);
            let ax = sys.apply(&chi);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(a, b)| a - b).collect();
            let mut cls = [0.0f64; 5];
            for (i, n) in lvl.set.nodes.iter().enumerate() {
                let u2 = r[3 * i].powi(2) + r[3 * i + 1].powi(2);
                let p2 = r[3 * i + 2].powi(2);
                match n.kind {
                    NodeKind::Interior => {
                        cls[0] += u2;
                        cls[1] += p2;
                    }
                    _ => {
                        cls[2] += u2;
                        cls[3] += p2;
                    }
                }
            }
            for d in 3 * lvl.set.len()..sys.ndofs() {
                cls[4] += r[d].powi(2);
            }
            println!(
                "residual classes: int-u {:.2e} int-p {:.2e} bnd-u {:.2e} bnd-p {:.2e} solid {:.2e}",
                cls[0].sqrt(),
                cls[1].sqrt(),
                cls[2].sqrt(),
                cls[3].sqrt(),
                cls[4].sqrt()
            );
            // Largest residual rows.
            let mut idx: Vec<usize> = (0..r.len()).collect();
            idx.sort_by(|&a, &b| r[b].abs().total_cmp(&r[a].abs()));
            for &d in idx.iter().take(6) {
                let i = d / 3;
                if i < lvl.set.len() {
                    let n = &lvl.set.nodes[i];
                    println!(
                        "  r[{d}] = {:+.3e} [{} {:?} dx {:.4} at ({:+.3},{:+.3})]",
                        r[d],
                        ["u", "v", "p"][d % 3],
                        n.kind,
                        n.spacing,
                        n.position.x,
                        n.position.y
                    );
                } else {
                    println!("  r[{d}] = {:+.3e} [solid dof]", r[d]);
                }
            }
            return;
        }
        let (chi, _) = h.solve(&gmres_cfg).unwrap();
        let field = estimate(&lvl.set, &st, &lvl.system, &chi);
        let ids = mark(&field, 0.8);
        let mut flags = vec![false; lvl.set.len()];
        for id in ids {
            flags[id] = true;
        }
        let tr = refine_level(&lvl.set, &domain, &flags, 2).unwrap();
        set = tr.next;
        children = Some(tr.children);
    }
}
