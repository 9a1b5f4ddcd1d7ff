//! Acceptance checks. Each test prints one `criterion N PASS|FAIL` line
//! with the measured quantity next to its tolerance, then asserts.
//!
//! Run with `cargo test -p penalty-spde --test acceptance -- --nocapture`.

use std::sync::Arc;
use std::time::Instant;

use penalty_spde::assembly::{convection_matrix, scalar_mass_matrix, scalar_stiffness_matrix, trilinear_eval};
use penalty_spde::ensemble::{epsilon_sweep, recipe, stability_audit, RunSetup, StepMode};
use penalty_spde::mesh::{generate_l_shape, generate_rect_mesh, l_shape_resolution, BoundaryEdge, Mesh, Rect, TAG_INFLOW};
use penalty_spde::noise::{increment_for, make_noise_model, Gamma, LambdaKind, NoiseModel, StreamId};
use penalty_spde::output::{ledger_csv, sweep_csv};
use penalty_spde::scheme::{monotonicity_check, run_path, PathOptions, Problem, SchemeConfig, SchemeKind};
use penalty_spde::space::{build_space, dirichlet_constraints, BoundaryValues, FEFunction, FunctionSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, what: &str, pass: bool, detail: String, started: Instant) {
    println!(
        "criterion {n:>2} {} {what}: {detail} [{:.1} s]",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {n} ({what}) failed: {detail}");
}

fn unit_square(n: usize) -> Arc<Mesh> {
    Arc::new(generate_rect_mesh(n, n, Rect::UNIT).unwrap())
}

/// Random coefficients in `[-1, 1]`, zeroed on the boundary when `clamp`.
fn random_field(space: &Arc<FunctionSpace>, rng: &mut ChaCha8Rng, clamp: bool) -> FEFunction {
    let mut c: Vec<f64> = (0..space.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
    if clamp {
        let cs = dirichlet_constraints(space, &BoundaryValues::everywhere([0.0, 0.0])).unwrap();
        cs.apply(&mut c);
    }
    FEFunction::new(space.clone(), c).unwrap()
}

/// `curl` of the stream function `sin^2(pi x) sin^2(pi y)`.
fn solenoidal(x: [f64; 2]) -> [f64; 2] {
    use std::f64::consts::PI;
    let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
    let (cx, cy) = ((PI * x[0]).cos(), (PI * x[1]).cos());
    [2.0 * PI * sx * sx * sy * cy, -2.0 * PI * sx * cx * sy * sy]
}

fn h1_sq(space: &FunctionSpace, f: &FEFunction) -> f64 {
    let m = scalar_mass_matrix(space).block_diagonal(2);
    let a = scalar_stiffness_matrix(space).block_diagonal(2);
    m.bilinear(f.coeffs(), f.coeffs()) + a.bilinear(f.coeffs(), f.coeffs())
}

#[test]
fn skew_symmetry_of_convection() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for n in [4, 8, 16] {
        let space = build_space(unit_square(n), 2, 2).unwrap();
        for _ in 0..50 {
            let u = random_field(&space, &mut rng, false);
            let v = random_field(&space, &mut rng, true);
            let bound = (1.0 + h1_sq(&space, &u).sqrt()) * h1_sq(&space, &v);
            let direct = trilinear_eval(&u, &v, &v);
            let matrix = convection_matrix(&space, &u).bilinear(v.coeffs(), v.coeffs());
            worst = worst.max(direct.abs() / bound).max(matrix.abs() / bound);
            pairs += 1;
        }
    }
    let pass = worst <= 1e-11 && t0.elapsed().as_secs_f64() < 10.0;
    report(
        1,
        "skew-symmetry b(u,v,v) = 0",
        pass,
        format!("{pairs} pairs, max |b(u,v,v)| / ((1+|u|_H1)|v|_H1^2) = {worst:.2e} (tol 1e-11)"),
        t0,
    );
}

fn ledger_runs() -> Vec<penalty_spde::scheme::Trajectory> {
    let mesh = unit_square(8);
    let noise = make_noise_model(5, LambdaKind::InverseSquareSum, 1.0, Gamma::Additive { scale: 1.0 }).unwrap();
    let p = Problem::builder(mesh)
        .noise(noise)
        .forcing(|t, x| [t * x[1], -x[0]])
        .initial_velocity(|x| {
            let s = (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin();
            [s * (x[1] - 0.5), -s * (x[0] - 0.5)]
        })
        .initial_pressure(|x| x[0] - x[1] * x[1])
        .build()
        .unwrap();
    let mut out = Vec::new();
    for (eps, seed) in [(1e-1, 3), (1e-2, 4), (1e-3, 5)] {
        let c = SchemeConfig::new(SchemeKind::PenaltyLinear, 1.0, eps, 0.5, 0.01).unwrap();
        assert_eq!(c.steps, 50);
        out.push(run_path(&p, &c, seed, 0, PathOptions::default()).unwrap());
    }
    out
}

#[test]
fn energy_identity_per_step() {
    let t0 = Instant::now();
    let runs = ledger_runs();
    let worst = runs
        .iter()
        .flat_map(|r| r.energy.iter().map(|e| e.residual))
        .fold(0.0f64, f64::max);
    let steps: usize = runs.iter().map(|r| r.energy.len()).sum();
    let pass = worst <= 1e-9 && t0.elapsed().as_secs_f64() < 30.0;
    report(
        2,
        "per-step energy identity",
        pass,
        format!("{} runs, {steps} steps, max relative residual {worst:.2e} (tol 1e-9)", runs.len()),
        t0,
    );
}

#[test]
fn pressure_equation_and_mean() {
    let t0 = Instant::now();
    let runs = ledger_runs();
    let mut res = 0.0f64;
    let mut drift = 0.0f64;
    for r in &runs {
        let p0 = r.energy[0].pressure_mean;
        for e in &r.energy {
            res = res.max(e.pressure_residual);
            drift = drift.max((e.pressure_mean - p0).abs());
        }
        // the initial pressure has zero mean by construction
        drift = drift.max(p0.abs());
    }
    let pass = res <= 1e-9 && drift <= 1e-11;
    report(
        3,
        "pressure update residual and mean conservation",
        pass,
        format!("max |eps Mp dP + k B V|_inf = {res:.2e} (tol 1e-9), max |(P^m,1) - (P^0,1)| = {drift:.2e} (tol 1e-11)"),
        t0,
    );
}

#[test]
fn element_matrix_oracles() {
    let t0 = Instant::now();
    let single = |p: [[f64; 2]; 3]| {
        let edges = [
            BoundaryEdge { vertices: [0, 1], tag: 1 },
            BoundaryEdge { vertices: [1, 2], tag: 1 },
            BoundaryEdge { vertices: [2, 0], tag: 1 },
        ];
        Arc::new(Mesh::new(p.to_vec(), vec![[0, 1, 2]], &edges).unwrap())
    };
    let mut worst = 0.0f64;
    for tri in [[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0.3, -0.2], [2.1, 0.4], [0.9, 1.7]]] {
        let mesh = single(tri);
        let a = mesh.area(0);
        let m = scalar_mass_matrix(&build_space(mesh, 1, 1).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let exact = a / 12.0 * if i == j { 2.0 } else { 1.0 };
                worst = worst.max((m.get(i, j) - exact).abs());
            }
        }
    }
    let k = scalar_stiffness_matrix(&build_space(single([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 1, 1).unwrap());
    let exact = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
    for (i, row) in exact.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            worst = worst.max((k.get(i, j) - e).abs());
        }
    }
    report(
        4,
        "P1 element mass and stiffness",
        worst <= 1e-13,
        format!("max entry deviation {worst:.2e} (tol 1e-13)"),
        t0,
    );
}

#[test]
fn noise_coefficient_statistics() {
    let t0 = Instant::now();
    let model = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
    let n = 100_000usize;
    let k = 0.01;
    let modes = 2 * 25;
    let mut sum = vec![0.0; modes];
    let mut cross = vec![0.0; modes * modes];
    for s in 0..n {
        let inc = increment_for(&model, StreamId::new(11, s as u64, 1), k).unwrap();
        let c = inc.coeffs();
        for a in 0..modes {
            sum[a] += c[a];
            for b in a..modes {
                cross[a * modes + b] += c[a] * c[b];
            }
        }
    }
    let nf = n as f64;
    let (mut mean_ratio, mut var_dev, mut corr) = (0.0f64, 0.0f64, 0.0f64);
    let var: Vec<f64> = (0..modes)
        .map(|a| (cross[a * modes + a] - sum[a] * sum[a] / nf) / (nf - 1.0))
        .collect();
    for a in 0..modes {
        let (i, j) = ((a % 25) / 5 + 1, a % 5 + 1);
        let kl = k * model.lambda(i, j);
        mean_ratio = mean_ratio.max((sum[a] / nf).abs() / (4.0 * kl.sqrt() / nf.sqrt()));
        var_dev = var_dev.max((var[a] / kl - 1.0).abs());
        for b in a + 1..modes {
            let cov = (cross[a * modes + b] - sum[a] * sum[b] / nf) / (nf - 1.0);
            corr = corr.max((cov / (var[a] * var[b]).sqrt()).abs());
        }
    }
    let pass = mean_ratio <= 1.0 && var_dev <= 0.03 && corr <= 0.02 && t0.elapsed().as_secs_f64() < 60.0;
    report(
        5,
        "noise coefficient statistics",
        pass,
        format!(
            "N = {n}, max |mean| / (4 sigma / sqrt N) = {mean_ratio:.3} (tol 1), max |var / k lambda - 1| = {var_dev:.4} (tol 0.03), max |corr| = {corr:.4} (tol 0.02)"
        ),
        t0,
    );
}

#[test]
fn monotonicity_functional() {
    let t0 = Instant::now();
    let space = build_space(unit_square(6), 2, 2).unwrap();
    let noise = NoiseModel::standard(Gamma::Additive { scale: 1.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = f64::INFINITY;
    for s in 0..100 {
        let mut u = random_field(&space, &mut rng, true);
        let mut w = random_field(&space, &mut rng, true);
        // amplitudes spanning several decades
        let (a, b) = (10f64.powi(s % 5 - 2), 10f64.powi((s / 5) % 5 - 2));
        u.coeffs_mut().iter_mut().for_each(|c| *c *= a);
        w.coeffs_mut().iter_mut().for_each(|c| *c *= b);
        let m = monotonicity_check(&u, &w, 1.0, Some(&noise));
        worst = worst.min(m.value / m.scale.max(f64::MIN_POSITIVE));
    }
    let pass = worst >= -1e-9 && t0.elapsed().as_secs_f64() < 30.0;
    report(
        6,
        "monotonicity functional",
        pass,
        format!("100 pairs, min value / scale = {worst:.3e} (tol -1e-9)"),
        t0,
    );
}

#[test]
fn stokes_penalty_eps_bound() {
    let t0 = Instant::now();
    let n = (std::f64::consts::SQRT_2 / 0.25).ceil() as usize;
    let mesh = unit_square(n);
    let h = mesh.h_max();
    let p = Problem::builder(mesh)
        .noise(NoiseModel::standard(Gamma::Additive { scale: 1.0 }))
        .build()
        .unwrap();
    let r = SchemeConfig::new(SchemeKind::StokesSaddle, 1.0, 1e-2, 0.05, 1e-3).unwrap();
    let c = SchemeConfig::new(SchemeKind::StokesPenalty, 1.0, 1e-2, 0.05, 1e-3).unwrap();
    let eps = [1e-2, 1e-3, 1e-4, 1e-5];
    let s = epsilon_sweep(&p, &r, &c, &eps, StepMode::Fixed { k: 1e-3 }, 100, 2024).unwrap();
    let maxms: Vec<String> = s.rows.iter().map(|r| format!("{:.3e}", r.stats.max_ms_error)).collect();
    let pass = s.max_ms_decreasing() && s.c_tilde_spread < 3.0 && t0.elapsed().as_secs_f64() < 600.0;
    report(
        7,
        "Stokes penalty vs saddle, sqrt(eps)/h bound",
        pass,
        format!(
            "h = {h:.4}, max_m E|U_eps - U|^2 = [{}], C~ spread = {:.2} (tol < 3), C~ = {:.3e}",
            maxms.join(", "),
            s.c_tilde_spread,
            s.c_tilde
        ),
        t0,
    );
}

fn l_shape_problem(h_target: f64, noise: bool) -> Arc<Problem> {
    let n = l_shape_resolution(5.0, h_target).unwrap();
    let mesh = Arc::new(generate_l_shape(5.0, n).unwrap());
    let bv = BoundaryValues::everywhere([0.0, 0.0]).with_tag(TAG_INFLOW, |_| [1.0, 0.0]);
    let mut b = Problem::builder(mesh).boundary(bv);
    if noise {
        b = b.noise(NoiseModel::standard(Gamma::Additive { scale: 1.0 }));
    }
    b.build().unwrap()
}

#[test]
fn l_shape_error_trend() {
    let t0 = Instant::now();
    let p = l_shape_problem(0.25, true);
    let h = p.h_max();
    let (eps, k) = recipe(h, 0.1);
    let r = SchemeConfig::new(SchemeKind::Saddle, 1.0, eps, 1.0, k).unwrap();
    let c = SchemeConfig::new(SchemeKind::PenaltyLinear, 1.0, eps, 1.0, k).unwrap();
    let list = [eps, eps / 5.0, eps / 25.0];
    let s = epsilon_sweep(&p, &r, &c, &list, StepMode::Fixed { k: r.k }, 100, 2024).unwrap();
    let ms: Vec<f64> = s.rows.iter().map(|r| r.stats.mean_sq_error).collect();
    let var: Vec<f64> = s.rows.iter().map(|r| r.stats.error_variance).collect();
    let halves = |v: &[f64]| v.windows(2).all(|w| w[1] * 2.0 <= w[0]);
    let pass = halves(&ms) && halves(&var) && t0.elapsed().as_secs_f64() < 1800.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");
    report(
        8,
        "L-shape error and variance trend",
        pass,
        format!(
            "h = {h:.4}, eps0 = {eps:.4e}, k = {:.4e}, E|V - V_eps|^2 = [{}], variance = [{}] (each step needs a factor >= 2)",
            r.k,
            fmt(&ms),
            fmt(&var)
        ),
        t0,
    );
}

#[test]
fn determinism_across_thread_counts() {
    let t0 = Instant::now();
    let mesh = unit_square(6);
    let p = Problem::builder(mesh)
        .noise(NoiseModel::standard(Gamma::Additive { scale: 1.0 }))
        .initial_velocity(|x| [x[1] * (1.0 - x[1]), 0.0])
        .build()
        .unwrap();
    let r = SchemeConfig::new(SchemeKind::Saddle, 1.0, 1e-2, 0.1, 1e-2).unwrap();
    let c = SchemeConfig::new(SchemeKind::PenaltyNonlinear, 1.0, 1e-2, 0.1, 1e-2).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let s = epsilon_sweep(&p, &r, &c, &[1e-2, 1e-3], StepMode::Fixed { k: 1e-2 }, 24, 99).unwrap();
            let traj = run_path(&p, &c, 99, 3, PathOptions::default()).unwrap();
            (sweep_csv(&s).unwrap(), ledger_csv(&traj.energy).unwrap())
        })
    };
    let a = run(1);
    let b = run(4);
    let pass = a == b && t0.elapsed().as_secs_f64() < 300.0;
    report(
        9,
        "bitwise determinism across thread counts",
        pass,
        format!("1 vs 4 threads: sweep CSV equal = {}, ledger CSV equal = {}", a.0 == b.0, a.1 == b.1),
        t0,
    );
}

#[test]
fn stability_audit_levels() {
    let t0 = Instant::now();
    let noise = make_noise_model(5, LambdaKind::InverseSquareSum, 1.0, Gamma::Additive { scale: 1.0 }).unwrap();
    let report_ = stability_audit(
        |h| {
            let n = (std::f64::consts::SQRT_2 / h).ceil() as usize;
            let p = Problem::builder(unit_square(n))
                .noise(noise.clone())
                .initial_velocity(solenoidal)
                .build()?;
            let (eps, k) = recipe(h, 0.1);
            Ok(RunSetup::new(p, SchemeConfig::new(SchemeKind::PenaltyNonlinear, 1.0, eps, 1.0, k)?))
        },
        &[0.5, 0.25, 0.125],
        20,
        4,
    )
    .unwrap();
    let brackets: Vec<String> = report_.levels.iter().map(|l| format!("{:.4e}", l.bracket)).collect();
    let growth: Vec<String> = report_.growth.iter().map(|g| format!("{g:.3}")).collect();
    let pass = !report_.flagged && t0.elapsed().as_secs_f64() < 900.0;
    report(
        10,
        "energy bracket under refinement",
        pass,
        format!("h = 0.5, 0.25, 0.125: bracket = [{}], growth = [{}] (tol < 2)", brackets.join(", "), growth.join(", ")),
        t0,
    );
}

#[test]
fn scheme_degeneration() {
    let t0 = Instant::now();
    let p = Problem::builder(unit_square(4))
        .noise(NoiseModel::standard(Gamma::Additive { scale: 1.0 }))
        .forcing(|t, x| [t + x[1], x[0]])
        .initial_velocity(|x| [x[1] * (1.0 - x[1]) * x[0], -x[0] * (1.0 - x[0]) * x[1]])
        .build()
        .unwrap();
    let base = |kind| SchemeConfig::new(kind, 0.7, 1e-2, 0.05, 1e-2).unwrap();
    let states = |c: &SchemeConfig| {
        let tr = run_path(&p, c, 8, 1, PathOptions { snapshot_stride: Some(1), ledger: false }).unwrap();
        tr.states
            .iter()
            .map(|s| (s.velocity.coeffs().to_vec(), s.pressure.coeffs().to_vec()))
            .collect::<Vec<_>>()
    };
    let mut one_iter = base(SchemeKind::PenaltyNonlinear);
    one_iter.picard.max_iters = 1;
    let alg1_alg2 = states(&one_iter) == states(&base(SchemeKind::PenaltyLinear));
    let mut checks = vec![("nonlinear with one Picard iteration = linearized", alg1_alg2)];
    for (ns, stokes) in [
        (SchemeKind::PenaltyLinear, SchemeKind::StokesPenalty),
        (SchemeKind::PenaltyNonlinear, SchemeKind::StokesPenalty),
        (SchemeKind::Saddle, SchemeKind::StokesSaddle),
    ] {
        let mut c = base(ns);
        c.convection = false;
        checks.push((
            match ns {
                SchemeKind::PenaltyLinear => "linearized penalty without convection = Stokes penalty",
                SchemeKind::PenaltyNonlinear => "nonlinear penalty without convection = Stokes penalty",
                _ => "saddle without convection = Stokes saddle",
            },
            states(&c) == states(&base(stokes)),
        ));
    }
    let pass = checks.iter().all(|c| c.1) && t0.elapsed().as_secs_f64() < 10.0;
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n}: {}", if *ok { "bitwise" } else { "differs" }))
        .collect::<Vec<_>>()
        .join("; ");
    report(11, "scheme degeneration", pass, detail, t0);
}
