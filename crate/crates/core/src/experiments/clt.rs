//! Fluctuation experiments: quadratic variation against its limit, the initial
//! and trajectory central limit theorems, and the Galerkin Langevin system alone.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::output::num;
use super::rate::reference_path;
use super::{Check, CltSection, ExperimentConfig, GalerkinSection, Outcome, Plot, QvSection, Role, Schedule, Series, SpdeSection, Table, TrajectorySection};
use crate::dynamics::{run, InitialDataSampler, InitialLaw, MeasureSourceSpec, NoiseSource, Population, SpatialGrid};
use crate::error::{Error, Result};
use crate::fluctuation::{
    estimate_g, gaussianity_test, initial_covariance_q, martingale_term, population_pairings, psd_clip, sample_covariance, GEstimate,
};
use crate::langevin::{assemble_galerkin, covariance_ode, simulate_spde, GalerkinSystem};
use crate::model::{CoefficientModel, MeasureMoments};
use crate::quadrature::composite_gauss_legendre;
use crate::stats::{normal_cdf, variance_ratio_test};
use crate::test_space::{TestFunction, TestFunctionDictionary};

fn dictionary(cfg: &ExperimentConfig, model: &dyn CoefficientModel) -> Result<TestFunctionDictionary> {
    TestFunctionDictionary::build(model.d(), model.dv(), cfg.alpha(), &cfg.dictionary)
}

fn select(dict: &TestFunctionDictionary, idx: &[usize], key: &str) -> Result<Vec<TestFunction>> {
    idx.iter()
        .map(|&i| {
            dict.members.get(i).cloned().ok_or_else(|| {
                Error::Config(format!("`{key}`: member {i} is out of range; the dictionary has {} members", dict.len()))
            })
        })
        .collect()
}

fn describe(members: &[TestFunction]) -> Vec<String> {
    members.iter().map(|m| format!("{:?} x {:?}", m.g, m.h)).collect()
}

/// Per-copy spatial means `(1/N) sum_i psi(x_i, u_k(x_i, 0))` for copies `first..first + count`.
fn copy_means(init: &InitialDataSampler, members: &[TestFunction], locations: &[f64], d: usize, dv: usize, first: u64, count: usize) -> Vec<Vec<f64>> {
    let n = locations.len() / d;
    let profile: Vec<f64> = locations.chunks(d).map(|x| init.profile_at(x)).collect();
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let coeffs = init.coefficients(first + k, dv);
            let mut u = vec![0.0; dv];
            let mut acc = vec![0.0; members.len()];
            for i in 0..n {
                for (beta, c) in coeffs.iter().enumerate() {
                    u[beta] = init.level(*c, profile[i]);
                }
                let x = &locations[i * d..(i + 1) * d];
                for (a, m) in acc.iter_mut().zip(members) {
                    *a += m.value(x, &u);
                }
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        })
        .collect()
}

/// `<f_0, psi>` by a fine midpoint grid in `x`. The expectation of the value
/// factor depends on `x` only through the profile value, so it is tabulated
/// over `[0, 1]` by Gauss–Legendre quadrature of the half-normal factors.
fn initial_reference(init: &InitialDataSampler, members: &[TestFunction], d: usize, dv: usize, grid_points: usize) -> Result<Vec<f64>> {
    let grid = SpatialGrid::new(grid_points, d)?;
    let locations = grid.centers();
    let data = match &init.law {
        InitialLaw::Constant { level } => {
            let u = vec![*level; dv];
            return Ok(members.iter().map(|m| locations.chunks(d).map(|x| m.value(x, &u)).sum::<f64>() / grid.n() as f64).collect());
        }
        InitialLaw::Field(data) => data.clone(),
    };
    if dv > 2 || (dv == 2 && data.a1 != 0.0) {
        return Err(Error::Config("the initial reference pairing supports dv = 1, or dv = 2 with a1 = 0".into()));
    }
    // Half-normal |xi| on [0, 9] with density 2 phi.
    let (z, w) = composite_gauss_legendre(10, 6, 0.0, 9.0);
    let w: Vec<f64> = z.iter().zip(&w).map(|(z, w)| w * 2.0 * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()).collect();
    let pairs: Vec<(f64, f64, f64)> = if data.a1 == 0.0 {
        z.iter().zip(&w).map(|(&a, &wa)| (a, 0.0, wa)).collect()
    } else {
        z.iter().zip(&w).flat_map(|(&a, &wa)| z.iter().zip(&w).map(move |(&b, &wb)| (a, b, wa * wb))).collect()
    };
    const TABLE: usize = 4097;
    let table: Vec<Vec<f64>> = (0..TABLE)
        .into_par_iter()
        .map(|k| {
            let p = k as f64 / (TABLE - 1) as f64;
            let level = |&(a, b, _): &(f64, f64, f64)| data.a0 * a * (1.0 + data.c * p) + data.a1 * b;
            let mut acc = vec![0.0; members.len()];
            for q1 in &pairs {
                if dv == 1 {
                    let u = [level(q1)];
                    for (a, m) in acc.iter_mut().zip(members) {
                        *a += q1.2 * m.h.value(&u);
                    }
                } else {
                    for q2 in &pairs {
                        let u = [level(q1), level(q2)];
                        for (a, m) in acc.iter_mut().zip(members) {
                            *a += q1.2 * q2.2 * m.h.value(&u);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let per_x: Vec<Vec<f64>> = locations
        .par_chunks(d)
        .map(|x| {
            let s = init.profile_at(x).clamp(0.0, 1.0) * (TABLE - 1) as f64;
            let k = (s.floor() as usize).min(TABLE - 2);
            let l = s - k as f64;
            members.iter().enumerate().map(|(j, m)| m.g.eval(x) * ((1.0 - l) * table[k][j] + l * table[k + 1][j])).collect()
        })
        .collect();
    let mut out = vec![0.0; members.len()];
    for v in &per_x {
        for (o, a) in out.iter_mut().zip(v) {
            *o += a;
        }
    }
    Ok(out.into_iter().map(|v| v / grid.n() as f64).collect())
}

fn ecdf_plot(title: &str, samples: &[f64], sd: f64) -> Plot {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let emp: Vec<(f64, f64)> = s.iter().enumerate().map(|(i, &v)| (v, (i + 1) as f64 / n)).collect();
    let (lo, hi) = (s[0].min(-3.0 * sd), s[s.len() - 1].max(3.0 * sd));
    let normal: Vec<(f64, f64)> = (0..=100).map(|k| lo + (hi - lo) * k as f64 / 100.0).map(|x| (x, normal_cdf(x, 0.0, sd))).collect();
    Plot::new(title, "pairing", "CDF").with(Series::new("runs", emp)).with(Series::new("N(0, Q)", normal).dashed())
}

pub(super) fn clt_initial(cfg: &ExperimentConfig, sec: &CltSection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let (d, dv) = (model.d(), model.dv());
    let dict = dictionary(cfg, model.as_ref())?;
    let members = select(&dict, &sec.members, "clt.members")?;
    let init = cfg.sampler(Role::RunInit)?;
    let alpha = cfg.alpha();

    let q_grid = SpatialGrid::new(sec.q_grid, d)?;
    let q = initial_covariance_q(&cfg.sampler(Role::Covariance)?, &members, q_grid.centers(), d, dv, sec.q_samples, 0)?;
    let reference = initial_reference(&init, &members, d, dv, sec.ref_grid)?;
    let mut qt = Table::new("covariance", &["p", "q", "value", "stderr"]);
    for i in 0..members.len() {
        for j in 0..members.len() {
            qt.push(vec![sec.members[i].to_string(), sec.members[j].to_string(), num(q.value[(i, j)]), num(q.stderr[(i, j)])]);
        }
    }
    out.note("members", describe(&members));
    out.note("reference_pairing", &reference);
    out.note("q_clip", q.clip);

    let mut pt = Table::new("pairings", &["case", "schedule", "n", "m", "run", "p", "value"]);
    let mut tt = Table::new("tests", &["case", "schedule", "psi_index", "ks_statistic", "p_value", "variance_ratio", "ratio_p_value"]);
    let mut cases = Vec::new();
    for (ci, case) in sec.cases.iter().enumerate() {
        let m = case.schedule.copies(case.n, alpha, d);
        let ratio = super::scaling_ratio(m, case.n, alpha, d);
        let grid = SpatialGrid::new(case.n, d)?;
        let base = ((ci as u64) + 1) << 36;
        let mut samples = vec![Vec::with_capacity(sec.runs); members.len()];
        for r in 0..sec.runs {
            let per_copy = copy_means(&init, &members, grid.centers(), d, dv, base + (r * m) as u64, m);
            for p in 0..members.len() {
                let mean = per_copy.iter().map(|v| v[p]).sum::<f64>() / m as f64;
                let eta = (m as f64).sqrt() * (mean - reference[p]);
                pt.push(vec![ci.to_string(), format!("{:?}", case.schedule).to_lowercase(), case.n.to_string(), m.to_string(), r.to_string(), sec.members[p].to_string(), num(eta)]);
                samples[p].push(eta);
            }
        }
        let mut report = Vec::new();
        for p in 0..members.len() {
            let qpp = q.value[(p, p)];
            let ks = gaussianity_test(&samples[p], qpp)?;
            let vr = variance_ratio_test(&samples[p], qpp);
            tt.push(vec![
                ci.to_string(),
                format!("{:?}", case.schedule).to_lowercase(),
                sec.members[p].to_string(),
                num(ks.statistic),
                num(ks.p_value),
                num(vr.ratio),
                num(vr.p_value),
            ]);
            let name = format!("case {ci} ({:?}, N={}, M={m}) member {}", case.schedule, case.n, sec.members[p]);
            match case.schedule {
                Schedule::Clt => out.checks.push(Check::new(
                    format!("{name}: gaussian"),
                    ks.p_value > sec.min_p_value,
                    format!("KS p = {:.4} (need > {}), variance ratio {:.3}", ks.p_value, sec.min_p_value, vr.ratio),
                )),
                Schedule::Broken => out.checks.push(Check::new(
                    format!("{name}: excess variance"),
                    vr.ratio > sec.min_excess_ratio,
                    format!("variance ratio {:.3} (need > {}), KS p = {:.2e}", vr.ratio, sec.min_excess_ratio, ks.p_value),
                )),
                Schedule::Critical => {}
            }
            report.push(serde_json::json!({"member": sec.members[p], "ks_p": ks.p_value, "ks_stat": ks.statistic, "variance_ratio": vr.ratio}));
        }
        if case.schedule == Schedule::Clt && ratio > 0.1 + 1e-12 {
            out.checks.push(Check::new(format!("case {ci}: schedule"), false, format!("sqrt(M) N^(-alpha/d) = {ratio:.4} exceeds 0.1")));
        }
        out.plots.push((format!("ecdf_case{ci}"), ecdf_plot(&format!("{:?} schedule, N={}, M={m}", case.schedule, case.n), &samples[0], q.value[(0, 0)].sqrt())));
        cases.push(serde_json::json!({"schedule": case.schedule, "n": case.n, "m": m, "scaling_ratio": ratio, "members": report}));
    }
    out.note("cases", cases);
    out.tables.extend([qt, pt, tt]);
    Ok(())
}

pub(super) fn qv_convergence(cfg: &ExperimentConfig, sec: &QvSection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let (d, dv) = (model.d(), model.dv());
    let dict = dictionary(cfg, model.as_ref())?;
    let members = select(&dict, &sec.members, "qv.members")?;
    let steps = cfg.steps();
    let opts = cfg.sim_options();
    let (path, _) = reference_path(cfg, model.as_ref())?;

    let egrid = SpatialGrid::new(sec.ensemble_n, d)?;
    let field = cfg.field(Role::EnsembleNoise, d, dv, egrid.centers())?;
    let mut ensemble = Population::new(model.as_ref(), egrid.centers(), sec.ensemble_k, 0, &cfg.sampler(Role::EnsembleInit)?)?;
    let g = estimate_g(model.as_ref(), &mut ensemble, &field, &path, &members, steps, opts.step, cfg.noise.epsilon, &[])?;
    let g_t = g.g.last().expect("g has the initial entry").clone();

    let init = cfg.sampler(Role::RunInit)?;
    let p = members.len();
    let mut table = Table::new("qv", &["m", "n", "p", "q", "value", "g", "relative_gap"]);
    let mut gaps: Vec<Vec<f64>> = vec![Vec::new(); p];
    for &[m, n] in &sec.sizes {
        let grid = SpatialGrid::new(n, d)?;
        let noise = NoiseSource::Field(cfg.field(Role::RunNoise, d, dv, grid.centers())?);
        let mut qv = DMatrix::<f64>::zeros(p, p);
        for r in 0..sec.runs {
            let mut pop = Population::new(model.as_ref(), grid.centers(), m, r * m, &init)?;
            let (_, _, q) = martingale_term(model.as_ref(), &mut pop, &members, &noise, None, steps, opts.step, (m as f64).sqrt())?;
            qv += DMatrix::from_row_slice(p, p, q.last().expect("qv has the initial entry"));
        }
        qv /= sec.runs as f64;
        for a in 0..p {
            for b in 0..p {
                let gap = (qv[(a, b)] - g_t[(a, b)]).abs() / g_t[(a, b)].abs();
                table.push(vec![m.to_string(), n.to_string(), sec.members[a].to_string(), sec.members[b].to_string(), num(qv[(a, b)]), num(g_t[(a, b)]), num(gap)]);
                if a == b {
                    gaps[a].push(gap);
                }
            }
        }
        log::info!("M={m} N={n}: diagonal gaps {:?}", (0..p).map(|a| gaps[a].last().copied().unwrap_or(f64::NAN)).collect::<Vec<_>>());
    }
    let mut plot = Plot::new("relative gap |QV - g| / g at T", "M N", "relative gap").log_log();
    let sizes: Vec<f64> = sec.sizes.iter().map(|s| (s[0] * s[1]) as f64).collect();
    for a in 0..p {
        let monotone = gaps[a].windows(2).all(|w| w[1] < w[0]);
        let last = *gaps[a].last().unwrap_or(&f64::INFINITY);
        out.checks.push(Check::new(
            format!("member {}: qv gap decreasing", sec.members[a]),
            monotone,
            format!("gaps {:?}", gaps[a].iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>()),
        ));
        out.checks.push(Check::new(
            format!("member {}: final qv gap", sec.members[a]),
            last < sec.max_final_gap,
            format!("{last:.4} (need < {})", sec.max_final_gap),
        ));
        plot = plot.with(Series::new(&format!("member {}", sec.members[a]), sizes.iter().copied().zip(gaps[a].iter().copied()).collect()));
    }
    out.note("members", describe(&members));
    out.note("g_T", g_t.iter().copied().collect::<Vec<f64>>());
    out.tables.push(table);
    out.plots.push(("qv".into(), plot));
    Ok(())
}

/// Galerkin system from an independent McKean–Vlasov ensemble and the initial covariance.
fn galerkin(
    cfg: &ExperimentConfig,
    sec: &GalerkinSection,
    model: &dyn CoefficientModel,
    members: &[TestFunction],
    path: &[MeasureMoments],
) -> Result<(GalerkinSystem, GEstimate)> {
    let (d, dv) = (model.d(), model.dv());
    let steps = cfg.steps();
    let egrid = SpatialGrid::new(sec.ensemble_n, d)?;
    let field = cfg.field(Role::EnsembleNoise, d, dv, egrid.centers())?;
    let mut ensemble = Population::new(model, egrid.centers(), sec.ensemble_k, 0, &cfg.sampler(Role::EnsembleInit)?)?;
    let mut nodes: Vec<usize> = (0..=steps).step_by(sec.node_every).collect();
    if *nodes.last().unwrap() != steps {
        nodes.push(steps);
    }
    let g = estimate_g(model, &mut ensemble, &field, path, members, steps, cfg.sim_options().step, cfg.noise.epsilon, &nodes)?;
    let qgrid = SpatialGrid::new(sec.q_grid, d)?;
    let q = initial_covariance_q(&cfg.sampler(Role::Covariance)?, members, qgrid.centers(), d, dv, sec.q_samples, 0)?;
    let (q0, _) = psd_clip(&q.value);
    let sys = assemble_galerkin(model, members, &g, q0)?;
    Ok((sys, g))
}

fn galerkin_tables(sys: &GalerkinSystem, ode: &[(f64, DMatrix<f64>)], node_times: &[f64]) -> (Table, Table) {
    let p = sys.dim();
    let mut st = Table::new("sigma", &["t", "p", "q", "value"]);
    for (t, s) in ode {
        if node_times.iter().any(|n| (n - t).abs() < 1e-9) {
            for a in 0..p {
                for b in 0..p {
                    st.push(vec![num(*t), a.to_string(), b.to_string(), num(s[(a, b)])]);
                }
            }
        }
    }
    let mut rt = Table::new("galerkin", &["t", "q", "residual", "c_clip"]);
    for (k, t) in sys.times.iter().enumerate() {
        for q in 0..p {
            rt.push(vec![num(*t), q.to_string(), num(sys.residuals[k][q]), num(sys.c_clip[k])]);
        }
    }
    (st, rt)
}

fn galerkin_summary(out: &mut Outcome, sys: &GalerkinSystem) {
    let worst = sys.residuals.iter().flatten().copied().fold(0.0, f64::max);
    let clip = sys.c_clip.iter().copied().fold(0.0, f64::max);
    out.note("max_projection_residual", worst);
    out.note("max_c_clip", clip);
}

pub(super) fn clt_trajectory(cfg: &ExperimentConfig, gsec: &GalerkinSection, sec: &TrajectorySection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let (d, dv) = (model.d(), model.dv());
    let dict = dictionary(cfg, model.as_ref())?;
    let members = dict.members.clone();
    select(&dict, &sec.members, "trajectory.members")?;
    let (path, reference) = reference_path(cfg, model.as_ref())?;
    let (ref_mean, ref_se) = population_pairings(&reference, &members);
    let ref_ratio = cfg.k_ref as f64 / (sec.m * sec.n) as f64;
    if ref_ratio < 25.0 {
        log::warn!("reference ensemble is only {ref_ratio:.1} times the run size; the pairing means carry its error");
    }
    out.note("reference_to_run_ratio", ref_ratio);

    let (sys, _) = galerkin(cfg, gsec, model.as_ref(), &members, &path)?;
    let t = cfg.sim.t_final;
    let ode = covariance_ode(&sys, t, gsec.ode_dt)?;
    let sigma = ode.last().expect("ode has the initial state").1.clone();

    let grid = SpatialGrid::new(sec.n, d)?;
    let noise = NoiseSource::Field(cfg.field(Role::RunNoise, d, dv, grid.centers())?);
    let init = cfg.sampler(Role::RunInit)?;
    let scale = (sec.m as f64).sqrt();
    let mut pt = Table::new("pairings", &["t", "p", "value", "run_id"]);
    let mut etas = Vec::with_capacity(sec.runs);
    for r in 0..sec.runs {
        let mut pop = Population::new(model.as_ref(), grid.centers(), sec.m, r * sec.m, &init)?;
        run(&mut pop, model.as_ref(), cfg.sim_options(), &noise, MeasureSourceSpec::SelfConsistent, &[], None)?;
        let (mean, _) = population_pairings(&pop, &members);
        let eta: Vec<f64> = mean.iter().zip(&ref_mean).map(|(a, b)| scale * (a - b)).collect();
        for (p, v) in eta.iter().enumerate() {
            pt.push(vec![num(t), p.to_string(), num(*v), r.to_string()]);
        }
        etas.push(eta);
    }
    let cov = sample_covariance(&etas)?;
    let p = members.len();
    let mut ct = Table::new("covariance", &["p", "q", "value", "stderr", "sigma"]);
    for a in 0..p {
        for b in 0..p {
            ct.push(vec![a.to_string(), b.to_string(), num(cov.value[(a, b)]), num(cov.stderr[(a, b)]), num(sigma[(a, b)])]);
        }
    }
    let mut report = Vec::new();
    for &a in &sec.members {
        let rel = (cov.value[(a, a)] - sigma[(a, a)]).abs() / sigma[(a, a)];
        out.checks.push(Check::new(
            format!("member {a}: variance at T"),
            rel <= sec.max_rel_error,
            format!("runs {:.5} vs Langevin {:.5}: relative error {rel:.4} (need <= {})", cov.value[(a, a)], sigma[(a, a)], sec.max_rel_error),
        ));
        report.push(serde_json::json!({"member": a, "runs": cov.value[(a, a)], "stderr": cov.stderr[(a, a)], "langevin": sigma[(a, a)], "relative_error": rel}));
    }
    let noisy = ref_se.iter().zip(0..p).any(|(se, a)| scale * se > 0.25 * cov.value[(a, a)].sqrt());
    out.note("reference_noisy", noisy);
    out.note("members", describe(&members));
    out.note("checked", report);
    galerkin_summary(out, &sys);
    let mut plot = Plot::new("variance of the fluctuation pairings", "t", "variance");
    for &a in &sec.members {
        plot = plot
            .with(Series::new(&format!("Langevin {a}"), ode.iter().map(|(t, s)| (*t, s[(a, a)])).collect()).dashed())
            .with(Series::new(&format!("runs {a}"), vec![(t, cov.value[(a, a)])]));
    }
    let (st, rt) = galerkin_tables(&sys, &ode, &sys.times);
    out.tables.extend([pt, ct, st, rt]);
    out.plots.push(("variance".into(), plot));
    Ok(())
}

pub(super) fn spde_only(cfg: &ExperimentConfig, gsec: &GalerkinSection, sec: &SpdeSection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let dict = dictionary(cfg, model.as_ref())?;
    let members = dict.members.clone();
    let (path, _) = reference_path(cfg, model.as_ref())?;
    let (sys, _) = galerkin(cfg, gsec, model.as_ref(), &members, &path)?;
    let t = cfg.sim.t_final;
    let ode = covariance_ode(&sys, t, sec.dt)?;
    let sigma = &ode.last().expect("ode has the initial state").1;
    let paths = simulate_spde(&sys, t, sec.dt, sec.paths, cfg.seed_for(Role::Paths))?;
    let rows: Vec<Vec<f64>> = paths.iter().map(|v| v.iter().copied().collect()).collect();
    let mc = sample_covariance(&rows)?;
    let p = sys.dim();
    let mut ct = Table::new("spde_covariance", &["p", "q", "value", "stderr", "ode"]);
    let mut worst: f64 = 0.0;
    for a in 0..p {
        for b in 0..p {
            ct.push(vec![a.to_string(), b.to_string(), num(mc.value[(a, b)]), num(mc.stderr[(a, b)]), num(sigma[(a, b)])]);
        }
        worst = worst.max((mc.value[(a, a)] - sigma[(a, a)]).abs() / mc.stderr[(a, a)]);
    }
    out.checks.push(Check::new(
        "paths match the covariance ODE",
        worst <= 3.0,
        format!("largest diagonal deviation {worst:.2} standard errors (need <= 3)"),
    ));
    out.note("members", describe(&members));
    galerkin_summary(out, &sys);
    let (st, rt) = galerkin_tables(&sys, &ode, &sys.times);
    let mut plot = Plot::new("Langevin covariance diagonal", "t", "Sigma_pp");
    for a in 0..p.min(6) {
        plot = plot.with(Series::new(&format!("p = {a}"), ode.iter().map(|(t, s)| (*t, s[(a, a)])).collect()));
    }
    out.tables.extend([ct, st, rt]);
    out.plots.push(("sigma".into(), plot));
    Ok(())
}
