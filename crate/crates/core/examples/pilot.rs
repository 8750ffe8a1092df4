use nalgebra::{DMatrix, DVector, Dyn};
use rqk_core::bench::{bench_density, BenchMethod};
use rqk_core::gaussian::GaussianModel;
use rqk_core::kernels::KernelSpec;
use rqk_core::optim::LbfgsOptions;
use rqk_core::poisson::PoissonModel;
use rqk_core::sim::{default_poisson_theta, simulate_gaussian, simulate_poisson};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "density" => density(),
        "recover" => recover(),
        "precond" => precond(),
        "bigmap" => bigmap(),
        "mapslope" => mapslope(),
        "poissonfit" => poissonfit(),
        "poissonbig" => poissonbig(),
        "dbg" => dbg(),
        _ => println!("usage: pilot density|recover|precond|bigmap"),
    }
}

fn density() {
    let res = bench_density(&[100], &[2, 4, 8, 16, 32, 64], 5, 11, false).unwrap();
    for row in &res.rows {
        println!("n={} m={:>3} {:>16} {:.6e}s", row.n, row.m, row.method.to_string(), row.median_seconds);
    }
    for s in res.slopes() {
        println!("slope {} n={}: {:.3}", s.method, s.n, s.slope_m);
    }
    let naive2 = res.rows.iter().find(|r| r.m == 2 && r.method == BenchMethod::NaiveCholesky).unwrap();
    let chol2 = res.rows.iter().find(|r| r.m == 2 && r.method == BenchMethod::RqkCholesky).unwrap();
    println!("at m=2: naive {:.3e} vs rqk-chol {:.3e}  ratio {:.2}", naive2.median_seconds, chol2.median_seconds, naive2.median_seconds / chol2.median_seconds);
}

fn recover() {
    let mut rmse_ok = 0usize;
    let mut rmse_total = 0usize;
    let mut sig_ok = 0usize;
    let mut band_cov_acc = 0.0;
    let reps = 10usize;
    let t0 = std::time::Instant::now();
    for seed in 0..reps as u64 {
        let sim = simulate_gaussian(100, 6, 1.0, 1000 + seed).unwrap();
        let model = GaussianModel::new(
            KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
            sim.grid.clone(), sim.data.clone(), 4).unwrap();
        let init = model.heuristic_init();
        let opts = LbfgsOptions { tol: 1e-4, max_iter: 200, ..Default::default() };
        let fit = model.fit_map(&init, None, &opts).unwrap();
        let sig2 = fit.theta_star.get(4).exp();
        if (fit.theta_star.get(4) - 0.0).abs() <= 0.3 { sig_ok += 1; }
        let pg = model.posterior_g(&fit.theta_star).unwrap();
        let gm = pg.mean.clone().reshape_generic(Dyn(100), Dyn(6));
        for i in 0..6 {
            let err = (gm.column(i) - sim.latent.values.column(i)).norm() / (100f64).sqrt();
            rmse_total += 1;
            if err < 1.0 { rmse_ok += 1; }
        }
        // MCMC band for f
        let samples = rqk_core::gaussian::mh_sample(&model, None, &fit.theta_star, &fit.covariance, 1500, 300, seed).unwrap();
        let stride = (samples.draws.len() / 150).max(1);
        let mut means = Vec::new(); let mut sds = Vec::new();
        for (i, d) in samples.draws.iter().enumerate() {
            if i % stride != 0 { continue; }
            let th = fit.theta_star.with_values(d.clone()).unwrap();
            if let Ok(pf) = model.posterior_f(&th) {
                let sd = pf.variance_diag().unwrap().map(|v| v.max(1e-12).sqrt());
                means.push(pf.mean); sds.push(sd);
            }
        }
        let band = rqk_core::gaussian::confidence_band(&means, &sds, 0.05).unwrap();
        let mut inside = 0usize;
        for i in 0..100 {
            if sim.f_truth[i] >= band.lower[i] && sim.f_truth[i] <= band.upper[i] { inside += 1; }
        }
        band_cov_acc += inside as f64 / 100.0;
        println!("seed {seed}: sigma2={sig2:.3} acc_rate={:.2} band_cov={:.2} iters={}", samples.acceptance_rate, inside as f64 / 100.0, fit.optim.iterations);
    }
    println!("rmse ok: {}/{}  sigma ok: {}/{}  mean band cov {:.3}  elapsed {:.1}s",
        rmse_ok, rmse_total, sig_ok, reps, band_cov_acc / reps as f64, t0.elapsed().as_secs_f64());
}

fn precond() {
    let theta = default_poisson_theta();
    let mut wins = 0; let mut ties = 0; let mut total = 0;
    for seed in 0..20u64 {
        // spike-style: sharp onset bump in rates
        let n = 60; let m = 8;
        let sim = simulate_poisson(n, m, 1.0, &theta, 500 + seed).unwrap();
        let model = PoissonModel::new(
            KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
            sim.grid.clone(), sim.counts.clone(), 1.0).unwrap();
        let on = model.find_mode_qn(&theta, None, 1e-8, 1000, true).unwrap();
        let off = model.find_mode_qn(&theta, None, 1e-8, 1000, false).unwrap();
        total += 1;
        if on.iterations < off.iterations { wins += 1; }
        if on.iterations == off.iterations { ties += 1; }
        println!("seed {seed}: on={} off={}", on.iterations, off.iterations);
    }
    println!("wins {wins} ties {ties} of {total}");
}

fn dbg() {
    let theta = default_poisson_theta();
    let sim = simulate_poisson(100, 10, 1.0, &theta, 40).unwrap();
    let model = PoissonModel::new(
        KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
        sim.grid.clone(), sim.counts.clone(), 1.0).unwrap();
    let init = rqk_core::Hyperparams::from_values(&[-1.0, 0.0, -1.0, -0.5]).unwrap();
    match model.laplace(&init) {
        Ok(l) => println!("laplace ok: {:.3} mode iters {}", l.value, l.mode.iterations),
        Err(e) => println!("laplace err: {e}"),
    }
    match model.find_mode_newton(&init, None, 1e-8, 200) {
        Ok(m) => println!("newton ok iters {} grad {:.2e}", m.iterations, m.grad_norm),
        Err(e) => println!("newton err: {e}"),
    }
}

fn poissonfit() {
    let theta = rqk_core::Hyperparams::from_values(&[0.05f64.ln(), 0.0, 0.15f64.ln(), 0.25f64.ln()]).unwrap();
    let mut ok = 0usize;
    let t0 = std::time::Instant::now();
    for seed in 0..20u64 {
        let sim = simulate_poisson(50, 5, 2.0, &theta, 900 + seed).unwrap();
        let model = PoissonModel::new(
            KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
            sim.grid.clone(), sim.counts.clone(), 2.0).unwrap();
        let opts = LbfgsOptions { tol: 1e-3, max_iter: 100, ..Default::default() };
        let base = model.heuristic_init();
        let mut starts = vec![base.clone()];
        for ls in [0.1f64, 0.05] {
            let mut v = base.values().clone();
            v[0] = ls.ln();
            v[2] = ls.ln();
            starts.push(base.with_values(v).unwrap());
        }
        let best = starts.iter().filter_map(|init| model.fit_laplace_map(init, &opts).ok()).max_by(|a, b| a.value.partial_cmp(&b.value).unwrap());
        match best.ok_or(rqk_core::RqkError::EmptyMixture) {
            Ok(fit) => {
                let dev = (fit.theta_star.get(1) - theta.get(1)).abs();
                if dev <= 0.5 { ok += 1; }
                let at_truth = model.laplace(&theta).map(|l| l.value).unwrap_or(f64::NAN);
                println!("seed {seed}: theta2_K {:.3} (true {:.3}) dev {:.2} iters {} L*={:.2} Ltrue={:.2} conv={} gnorm={:.2e} th*={:?}",
                    fit.theta_star.get(1), theta.get(1), dev, fit.optim.iterations, fit.value, at_truth, fit.optim.converged, fit.optim.grad_norm, fit.theta_star.values().as_slice());
            }
            Err(e) => println!("seed {seed}: FIT FAILED {e}"),
        }
    }
    println!("theta2_K within 0.5: {ok}/20   elapsed {:.1}s", t0.elapsed().as_secs_f64());

    // intensity recovery at n=100, m=10, moderate rates
    let mut male_acc = 0.0;
    for seed in 0..5u64 {
        let sim = simulate_poisson(100, 10, 1.0, &theta, 40 + seed).unwrap();
        let model = PoissonModel::new(
            KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
            sim.grid.clone(), sim.counts.clone(), 1.0).unwrap();
        let init = rqk_core::Hyperparams::from_values(&[-1.0, 0.0, -1.0, -0.5]).unwrap();
        let opts = LbfgsOptions { tol: 1e-3, max_iter: 100, ..Default::default() };
        let fit = model.fit_laplace_map(&init, &opts).unwrap();
        let male = (fit.mode.x_star.clone() - sim.latent.vec()).abs().mean();
        male_acc += male;
        println!("seed {seed}: mean abs log-intensity err {male:.3}");
    }
    println!("avg male: {:.3}", male_acc / 5.0);
}

fn poissonbig_instrumented_eval(model: &PoissonModel, theta: &rqk_core::Hyperparams) {
    let t0 = std::time::Instant::now();
    let prior_probe = std::time::Instant::now();
    let mode = model.find_mode_newton(theta, None, 1e-8, 200);
    match &mode {
        Ok(m) => println!("  mode: {:.2}s iters={} ", prior_probe.elapsed().as_secs_f64(), m.iterations),
        Err(e) => println!("  mode err: {e}"),
    }
    let g0 = std::time::Instant::now();
    match model.laplace_grad(theta) {
        Ok(g) => println!("  grad: {:.2}s  estimator {:?} grad {:?}", g0.elapsed().as_secs_f64(), g.trace_estimator, g.grad.as_slice()),
        Err(e) => println!("  grad err: {e}"),
    }
    println!("  eval total {:.2}s", t0.elapsed().as_secs_f64());
}

fn poissonbig() {
    // paper-scale: n=200 bins, m=20 trials, realistic spike totals
    let theta = rqk_core::Hyperparams::from_values(&[0.1f64.ln(), 2.25f64.ln(), 0.2f64.ln(), 0.25f64.ln()]).unwrap();
    let sim = simulate_poisson(200, 20, 0.05, &theta, 31).unwrap();
    let total: f64 = sim.counts.iter().sum();
    println!("total spikes: {total}");
    let model = PoissonModel::new(
        KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
        sim.grid.clone(), sim.counts.clone(), 0.05).unwrap();
    let init = rqk_core::Hyperparams::from_values(&[-1.0, 0.0, -1.0, -0.5]).unwrap();
    let opts = LbfgsOptions { tol: 1e-3, max_iter: 60, ..Default::default() };
    poissonbig_instrumented_eval(&model, &init);
    let t0 = std::time::Instant::now();
    let fit = model.fit_laplace_map(&init, &opts).unwrap();
    println!("n=200 m=20 laplace fit: {:.1}s iters={} value={:.2} grad={:.2e} theta*={:?}",
        t0.elapsed().as_secs_f64(), fit.optim.iterations, fit.value, fit.optim.grad_norm, fit.theta_star.values().as_slice());
    poissonbig_instrumented_eval(&model, &fit.theta_star);
}

fn mapslope() {
    let t0 = std::time::Instant::now();
    let res = rqk_core::bench::bench_map(&[100], &[4, 8, 16, 32, 64], 5, 77).unwrap();
    for row in &res.rows {
        println!("n={} m={:>3} median {:.3}s (reps {})", row.n, row.m, row.median_seconds, row.replicates);
    }
    for s in res.slopes() {
        println!("slope {} n={}: {:.3}", s.method, s.n, s.slope_m);
    }
    println!("failures: {}  total {:.1}s", res.failures, t0.elapsed().as_secs_f64());
}

fn bigmap() {
    let t0 = std::time::Instant::now();
    let sim = simulate_gaussian(1000, 100, 1.0, 4242).unwrap();
    let model = GaussianModel::new(
        KernelSpec::matern52(0, 1), KernelSpec::matern52(2, 3),
        sim.grid.clone(), sim.data.clone(), 4).unwrap();
    let init = model.heuristic_init();
    let opts = LbfgsOptions { tol: 1e-4, max_iter: 200, ..Default::default() };
    let fit = model.fit_map(&init, None, &opts).unwrap();
    println!("n=1000 m=100 fit: {:.1}s, iters={}, converged={}, grad={:.2e}",
        t0.elapsed().as_secs_f64(), fit.optim.iterations, fit.optim.converged, fit.optim.grad_norm);
}
// (appended probe)
