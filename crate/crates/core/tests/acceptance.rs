//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! line per criterion and exits non-zero if any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psopt::catalog::{catalog, catalog_file};
use psopt::ocp_model::{jacobian_of, weighted_hessian_of, OcpDefinition, SolutionBundle, SolveStatus, UserGuess, VectorFunction};
use psopt::ps_basis::{assemble_pair, barycentric_interpolate, cond_growth_study, lgl_grid, tunnel_check, PairKind};
use psopt::scale::{apply_scaling, imbalance_report, scale_solution, unscale_solution, ScalingMap};
use psopt::solver::{solve, SolverConfig};
use psopt::transcription::{build_generalized_equation, covector_map, Decision, NlpForm};
use psopt::vnv::{verify, MU_ZERO};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fixed(n: usize) -> SolverConfig {
    SolverConfig { n0: n, n_max: n, ..SolverConfig::default() }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tunnel_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut lagrange_fails = true;
    for n in [4, 8, 16, 32] {
        let g = lgl_grid(n).unwrap();
        let b = tunnel_check(&assemble_pair(&g, PairKind::BirkhoffLeft));
        worst = worst.max(b.a_x_minus_identity).max(b.a_lambda_minus_identity).max(b.a_omega_minus_adjoint);
        lagrange_fails &= !tunnel_check(&assemble_pair(&g, PairKind::LagrangeD)).holds(1e-12);
    }
    outcome(
        worst <= 1e-12 && lagrange_fails,
        format!("Birkhoff max deviation {worst:.2e}; Lagrange pair violates a condition at every N: {lagrange_fails}"),
    )
}

/// Augmented-Lagrangian solve of the direct transcription with t0, tf held
/// at their (fixed) bounds. Newton on the inner problem with a central-difference
/// Hessian of the analytic Lagrangian gradient. Returns the constraint multipliers.
fn augmented_lagrangian(nlp: &NlpForm, z0: Vec<f64>, fixed_cols: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = nlp.constraint_bounds();
    assert!(lo.iter().zip(&hi).all(|(a, b)| a == b), "oracle handles equality constraints only");
    let free: Vec<usize> = (0..z0.len()).filter(|c| !fixed_cols.contains(c)).collect();
    let mut z = z0;
    let mut y = vec![0.0; lo.len()];
    let rho = 10.0;
    let grad = |z: &[f64], y: &[f64]| -> DVector<f64> {
        let c: Vec<f64> = nlp.constraints(z).iter().zip(&lo).map(|(c, l)| c - l).collect();
        let w: Vec<f64> = y.iter().zip(&c).map(|(y, c)| y + rho * c).collect();
        let g = DVector::from_vec(nlp.objective_gradient(z)) + nlp.constraint_jacobian(z).tr_mul(&DVector::from_vec(w));
        DVector::from_iterator(free.len(), free.iter().map(|&k| g[k]))
    };
    for _ in 0..60 {
        for _ in 0..20 {
            let g = grad(&z, &y);
            if g.amax() < 1e-13 {
                break;
            }
            let m = free.len();
            let mut h = DMatrix::zeros(m, m);
            for (j, &k) in free.iter().enumerate() {
                let step = 1e-5 * z[k].abs().max(1.0);
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[k] += step;
                zm[k] -= step;
                h.set_column(j, &((grad(&zp, &y) - grad(&zm, &y)) / (2.0 * step)));
            }
            let h = 0.5 * (&h + h.transpose());
            let d = h.lu().solve(&(-g)).expect("inner Hessian is singular");
            for (j, &k) in free.iter().enumerate() {
                z[k] += d[j];
            }
        }
        let c: Vec<f64> = nlp.constraints(&z).iter().zip(&lo).map(|(c, l)| c - l).collect();
        y.iter_mut().zip(&c).for_each(|(y, c)| *y += rho * c);
        if c.iter().all(|v| v.abs() < 1e-13) {
            break;
        }
    }
    (z, y)
}

fn covector_equivalence() -> Outcome {
    let def = catalog("lq").unwrap();
    let n = 8;
    let grid = lgl_grid(n).unwrap();
    let ge = build_generalized_equation(&def, &grid, 0.0);
    let nlp = NlpForm { ge: &ge };
    let l = ge.layout;
    let head = (2 * l.nx + l.nu) * l.n;
    let mut z0 = vec![0.0; nlp.primal_len()];
    z0[head] = def.time.t0_lo;
    z0[head + 1] = def.time.tf_lo;
    let (_, y) = augmented_lagrangian(&nlp, z0, &[head, head + 1]);
    // Multiplier rows: integration (n_x·N), then the rate rows (n_x·(N+1)).
    let integ = l.nx * (l.n - 1);
    let psi_d = DMatrix::from_fn(l.nx, l.n, |k, i| y[integ + k * l.n + i]);
    let psi_a = DMatrix::from_fn(l.nx, l.n, |k, i| if i == 0 { 0.0 } else { y[k * (l.n - 1) + i - 1] });
    let (lam, _) = covector_map(&psi_d, &psi_a, &grid.weights);
    let b = solve(&def, &fixed(n)).unwrap();
    let diff = max_abs_diff(lam.as_slice(), b.costates.as_slice());
    outcome(diff <= 1e-5, format!("max |Q⁻¹ψ - λ| = {diff:.2e} over {} nodes", l.n))
}

fn condition_growth() -> Outcome {
    let ns = [8, 16, 32, 64];
    let b = cond_growth_study(&ns, PairKind::BirkhoffLeft).unwrap();
    let l = cond_growth_study(&ns, PairKind::LagrangeD).unwrap();
    let gb = b[3].1 / b[0].1;
    let gl = l[3].1 / l[0].1;
    outcome(gb <= 4.0 && gl >= 30.0, format!("Birkhoff growth {gb:.2}x (cond {:.1} -> {:.1}), Lagrange growth {gl:.1}x", b[0].1, b[3].1))
}

fn lq_reproduction() -> Outcome {
    let b = solve(&catalog("lq").unwrap(), &fixed(16)).unwrap();
    let du = b.controls.iter().map(|u| (u - 1.0).abs()).fold(0.0, f64::max);
    let dl = b.costates.iter().map(|l| (l + 1.0).abs()).fold(0.0, f64::max);
    let dh = b.hamiltonian.iter().map(|h| (h + 0.5).abs()).fold(0.0, f64::max);
    let dc = (b.cost - 0.5).abs();
    outcome(
        b.status == SolveStatus::Converged && du <= 1e-6 && dl <= 1e-6 && dh <= 1e-6 && dc <= 1e-8,
        format!("{:?}; |u-1| {du:.1e}, |λ+1| {dl:.1e}, |H+0.5| {dh:.1e}, |J-0.5| {dc:.1e}", b.status),
    )
}

/// Geometric decay by at least half per doubling, until the error sits at the
/// double-precision floor where it may plateau.
fn spectral_convergence() -> Outcome {
    let def = catalog("lq_perturbed").unwrap();
    let floor = 1e-8;
    let mut errs = Vec::new();
    for n in [8, 16, 32] {
        let b = solve(&def, &fixed(n)).unwrap();
        let r = verify(&def, &b, 1e-8).unwrap();
        errs.push(r.terminal_truth_errors[0].abs());
    }
    let ok = errs.windows(2).all(|w| w[1] <= 0.5 * w[0] || w[0].max(w[1]) <= floor);
    // Coarser grid for context only: shows the decay that has already finished by N = 8.
    let coarse = solve(&def, &fixed(4)).ok().and_then(|b| verify(&def, &b, 1e-8).ok()).map(|r| r.terminal_truth_errors[0].abs());
    outcome(
        ok,
        format!(
            "terminal propagation errors at N = 8, 16, 32: {:.2e}, {:.2e}, {:.2e} (N = 4 for reference: {})",
            errs[0],
            errs[1],
            errs[2],
            coarse.map_or("n/a".to_string(), |e| format!("{e:.2e}"))
        ),
    )
}

struct RobotRun {
    def: OcpDefinition,
    bundle: SolutionBundle,
    guess: Arc<UserGuess>,
    elapsed: Duration,
}

fn robot() -> &'static RobotRun {
    static RUN: OnceLock<RobotRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let file = catalog_file("robot").unwrap();
        let mut config = SolverConfig::default();
        config.apply_overrides(&file.solver);
        // A straight-line guess through the tangency point. It must never be read.
        let t: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        let guess = UserGuess::new(t.clone(), t.iter().map(|&s| vec![s, 0.0, 0.0]).collect(), t.iter().map(|_| vec![1.0, 1.0]).collect());
        let def = file.to_definition().unwrap().with_guess(guess);
        let start = Instant::now();
        let bundle = solve(&def, &config).unwrap();
        let elapsed = start.elapsed();
        let guess = def.user_guess.clone().unwrap();
        RobotRun { def, bundle, guess, elapsed }
    })
}

fn robot_guess_free() -> Outcome {
    let run = robot();
    let b = &run.bundle;
    let grid = lgl_grid(b.degree()).unwrap();
    let xs: Vec<f64> = b.states.row(0).iter().cloned().collect();
    let ys: Vec<f64> = b.states.row(1).iter().cloned().collect();
    let clearance = (0..=4000)
        .map(|k| {
            let s = -1.0 + 2.0 * k as f64 / 4000.0;
            let (x, y) = (barycentric_interpolate(&grid, &xs, s), barycentric_interpolate(&grid, &ys, s));
            ((x - 5.0).powi(2) + y * y).sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    let bubble = run.def.constants["bubble"];
    let pass = b.status == SolveStatus::Converged && clearance > bubble && run.elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{:?} at N = {}, tf = {:.6}, min clearance from (5,0) {clearance:.3} > bubble {bubble}, solve time {:.1}s, start: {}",
            b.status,
            b.degree(),
            b.tf(),
            run.elapsed.as_secs_f64(),
            b.diagnostics.start
        ),
    )
}

fn robot_battery() -> Outcome {
    let run = robot();
    let r = verify(&run.def, &run.bundle, 1e-8).unwrap();
    let bat = &r.battery;
    let h_ok = (-1.05..=-0.95).contains(&r.hamiltonian_mean);
    let fr: Vec<f64> = bat.switching.iter().map(|s| s.bang_fraction.unwrap_or(0.0)).collect();
    let bang_ok = fr.iter().all(|&f| f >= 0.95) && bat.switching.iter().all(|s| s.passed);
    let flat_ok = !bat.spike_times.is_empty()
        && bat.flat_costates.contains(&0)
        && bat.flat_costates.contains(&1)
        && bat.costates_flat()
        && !bat.jumps.is_empty()
        && bat.jump_directions_agree()
        && bat.jumps_colocated;
    let untouched = bat.untouched_rows();
    let obstacle_free: Vec<usize> = untouched.iter().cloned().filter(|&l| l < 2).collect();
    let mu_ok = obstacle_free.len() == 1
        && bat.complementarity.iter().filter(|c| c.path_row < 2).all(|c| c.passed)
        && bat.complementarity[obstacle_free[0]].max_abs_mu <= MU_ZERO;
    let prop = r.terminal_truth_errors.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let prop_ok = prop <= 0.15;
    let slope = bat.segments.iter().map(|s| s.slope).fold(0.0, f64::max);
    let detail = format!(
        "(a) mean H {:.5} {}; (b) bang fractions {:.3}/{:.3}, switching law {}; (c) max |dλ/dτ| {slope:.1e} off spikes at t = {:?}, jumps agree {}; (d) untouched obstacle row {:?} max |μ| {:.1e}; propagated errors {:?}",
        r.hamiltonian_mean,
        h_ok,
        fr[0],
        fr[1],
        bat.switching.iter().all(|s| s.passed),
        bat.spike_times.iter().map(|t| (t * 1e3).round() / 1e3).collect::<Vec<_>>(),
        bat.jump_directions_agree(),
        obstacle_free,
        obstacle_free.first().map_or(f64::NAN, |&l| bat.complementarity[l].max_abs_mu),
        r.terminal_truth_errors.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>(),
    );
    outcome(h_ok && bang_ok && flat_ok && mu_ok && prop_ok, detail)
}

fn guess_free_contract() -> Outcome {
    // The robot run covers stabilization with perturbations, mesh growth and refinement.
    let robot_reads = robot().guess.reads();
    let mut reads = robot_reads;
    let mut paths = vec![format!("robot {:?}", robot().bundle.status)];
    let guess = || UserGuess::new(vec![0.0, 1.0], vec![vec![0.3], vec![0.7]], vec![vec![2.0], vec![2.0]]);
    let lq = catalog("lq").unwrap().with_guess(guess());
    let b = solve(&lq, &SolverConfig::default()).unwrap();
    reads += lq.user_guess.as_ref().unwrap().reads();
    paths.push(format!("lq {:?}", b.status));
    // Contradictory events exhaust every candidate and return Infeasible.
    let mut bad = catalog("lq").unwrap().with_guess(guess());
    bad.search.x_lo = vec![-0.5];
    bad.search.x_hi = vec![0.5];
    let mut file = catalog_file("lq").unwrap();
    file.events.expressions = vec!["x0[0]".into(), "x0[0]".into()];
    let contradictory = file.to_definition().unwrap().with_guess(guess());
    let b = solve(&contradictory, &fixed(8)).unwrap();
    reads += contradictory.user_guess.as_ref().unwrap().reads();
    paths.push(format!("contradictory events {:?}", b.status));
    let b = solve(&bad, &fixed(8)).unwrap();
    reads += bad.user_guess.as_ref().unwrap().reads();
    paths.push(format!("target outside the search box {:?}", b.status));
    outcome(reads == 0, format!("user trajectory reads = {reads} across {}", paths.join(", ")))
}

fn central_jacobian(f: &dyn VectorFunction, w: &[f64]) -> DMatrix<f64> {
    let m = f.eval(w).len();
    let mut j = DMatrix::zeros(m, w.len());
    for c in 0..w.len() {
        let h = 1e-6 * w[c].abs().max(1.0);
        let (mut wp, mut wm) = (w.to_vec(), w.to_vec());
        wp[c] += h;
        wm[c] -= h;
        let d = (DVector::from_vec(f.eval(&wp)) - DVector::from_vec(f.eval(&wm))) / (2.0 * h);
        j.set_column(c, &d);
    }
    j
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1.0)
}

fn gradient_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let defs: Vec<OcpDefinition> = ["lq", "lq_perturbed", "robot"].iter().map(|n| catalog(n).unwrap()).collect();
    let mut worst: f64 = 0.0;
    let mut checks = 0usize;
    let uni = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..=hi);
    for _ in 0..100 {
        for def in &defs {
            let s = &def.search;
            let x: Vec<f64> = (0..def.n_x).map(|k| uni(&mut rng, s.x_lo[k], s.x_hi[k])).collect();
            let xf: Vec<f64> = (0..def.n_x).map(|k| uni(&mut rng, s.x_lo[k], s.x_hi[k])).collect();
            let u: Vec<f64> = (0..def.n_u).map(|k| uni(&mut rng, s.u_lo[k], s.u_hi[k])).collect();
            let t = uni(&mut rng, def.time.t0_lo, def.time.tf_hi);
            let w = def.running_arg(&x, &u, t, &[]);
            let q = def.endpoint_arg(&x, &xf, def.time.t0_lo, uni(&mut rng, def.time.tf_lo, def.time.tf_hi), &[]);
            for (f, arg) in [(def.running.as_ref(), &w), (def.endpoint.as_ref(), &q)] {
                let ja = jacobian_of(f, arg);
                worst = worst.max(rel_err(&ja, &central_jacobian(f, arg)));
                // Weighted Hessian against differences of the analytic gradient.
                let y: Vec<f64> = (0..ja.nrows()).map(|_| uni(&mut rng, -1.0, 1.0)).collect();
                let ha = weighted_hessian_of(f, arg, &y);
                let yv = DVector::from_vec(y.clone());
                let mut hf = DMatrix::zeros(arg.len(), arg.len());
                for c in 0..arg.len() {
                    let h = 1e-6 * arg[c].abs().max(1.0);
                    let (mut ap, mut am) = (arg.to_vec(), arg.to_vec());
                    ap[c] += h;
                    am[c] -= h;
                    hf.set_column(c, &((jacobian_of(f, &ap).tr_mul(&yv) - jacobian_of(f, &am).tr_mul(&yv)) / (2.0 * h)));
                }
                worst = worst.max(rel_err(&ha, &hf));
                checks += 2;
            }
            // The assembled optimality system at a random point.
            let grid = lgl_grid(4).unwrap();
            let ge = build_generalized_equation(def, &grid, 1e-2);
            let mut d = Decision::zeros(&ge.layout);
            let n = ge.layout.n;
            for i in 0..n {
                for k in 0..def.n_x {
                    d.x[(k, i)] = uni(&mut rng, s.x_lo[k], s.x_hi[k]);
                    d.v[(k, i)] = uni(&mut rng, -1.0, 1.0);
                    d.lam[(k, i)] = uni(&mut rng, -1.0, 1.0);
                    d.om[(k, i)] = uni(&mut rng, -1.0, 1.0);
                }
                for j in 0..def.n_u {
                    d.u[(j, i)] = uni(&mut rng, s.u_lo[j], s.u_hi[j]);
                }
                for h in 0..def.n_h {
                    d.mu[(h, i)] = uni(&mut rng, -1.0, 1.0);
                }
            }
            d.nu.iter_mut().for_each(|v| *v = uni(&mut rng, -1.0, 1.0));
            d.t0 = def.time.t0_lo;
            d.tf = uni(&mut rng, def.time.tf_lo.max(def.time.t0_lo + 0.5), def.time.tf_hi);
            let z = d.pack();
            let (_, ja) = ge.residual_and_jacobian(&z).unwrap();
            let mut jf = DMatrix::zeros(ja.nrows(), ja.ncols());
            for c in 0..z.len() {
                let h = 1e-6 * z[c].abs().max(1.0);
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[c] += h;
                zm[c] -= h;
                jf.set_column(c, &((ge.residual(&zp).unwrap() - ge.residual(&zm).unwrap()) / (2.0 * h)));
            }
            worst = worst.max(rel_err(&ja, &jf));
            checks += 1;
        }
    }
    outcome(worst <= 1e-5, format!("{checks} Jacobian/Hessian comparisons on 100 seeded points, worst relative error {worst:.2e}"))
}

fn scaling_invariance() -> Outcome {
    let def = catalog("lq").unwrap();
    let cfg = fixed(16);
    let plain = solve(&def, &cfg).unwrap();
    let mut map = ScalingMap::identity(&def);
    map.x.gain = vec![100.0];
    let scaled = unscale_solution(&solve(&apply_scaling(&def, &map), &cfg).unwrap(), &map);
    let du = max_abs_diff(plain.controls.as_slice(), scaled.controls.as_slice());
    let quiet = imbalance_report(&plain).is_empty();

    // With g_J = 1e12 the optimum of the mis-scaled problem has λ̃ = -1e12.
    // Absolute tolerances cannot be met at that magnitude, so the direct solve
    // is reported but the detector is judged on the exact optimum mapped into
    // the mis-scaled coordinates.
    let mut bad = ScalingMap::identity(&def);
    bad.cost_gain = 1e12;
    let direct = solve(&apply_scaling(&def, &bad), &cfg).unwrap();
    let forced = scale_solution(&plain, &bad);
    let warnings = imbalance_report(&forced);
    let fired = forced.costates.amax() > 1e9 && warnings.iter().any(|w| w.channel.starts_with("costate") && w.magnitude > 1e9);
    outcome(
        du <= 1e-5 && quiet && fired,
        format!(
            "max node-wise control difference {du:.1e}; no warning when balanced: {quiet}; mis-scaled optimum warnings: {}; direct mis-scaled solve {:?} with residual {:.1e}",
            warnings.iter().map(|w| format!("{} {:.1e}", w.channel, w.magnitude)).collect::<Vec<_>>().join(", "),
            direct.status,
            direct.diagnostics.residual_norm,
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("tunnel identity", tunnel_identity, Duration::from_secs(1)),
        ("covector mapping equivalence", covector_equivalence, Duration::from_secs(10)),
        ("condition number growth", condition_growth, Duration::from_secs(5)),
        ("analytic LQ reproduction", lq_reproduction, Duration::from_secs(5)),
        ("spectral convergence with floor", spectral_convergence, Duration::from_secs(60)),
        ("robot challenge without a guess", robot_guess_free, Duration::from_secs(300)),
        ("robot necessary-condition battery", robot_battery, Duration::from_secs(300)),
        ("guess-free contract", guess_free_contract, Duration::from_secs(300)),
        ("gradient integrity", gradient_integrity, Duration::from_secs(300)),
        ("scaling argmin invariance", scaling_invariance, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (k, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let pass = res.pass && elapsed <= *limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<36} {} [{:.2}s, limit {}s] {}",
            k + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            res.detail
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
