//! Exact and cross-solver checks: noise covariance, the linearization identity,
//! the decoupled zero test, Fokker–Planck against the particle ensemble, and
//! transport against brute-force assignment.

use rand::Rng;
use rayon::prelude::*;

use super::output::num;
use super::{Check, ExperimentConfig, OracleSection, Outcome, Plot, Role, Series, Table};
use crate::dynamics::{coupled_run, law_moment_path, InitialData, InitialDataSampler, InitialLaw, NoiseSource, SimOptions, SpatialGrid, StepOptions};
use crate::error::Result;
use crate::fokker_planck::{solve_fp_1d, FpGrid1D};
use crate::measures::WeightedPointCloud;
use crate::model::{audit_regularity, CoefficientModel, Decoupled, DecoupledParams, Homog, HomogParams};
use crate::rng::{stream, Purpose};
use crate::stats::normal_cdf;
use crate::test_space::{generator_pairing, linearized_pairing, TestFunctionDictionary};
use crate::transport::{w1_samples_vs_cdf, wasserstein, TransportMethod};

fn noise_covariance(cfg: &ExperimentConfig, sec: &OracleSection, out: &mut Outcome) -> Result<Table> {
    let eps = cfg.noise.epsilon;
    let mut rng = stream(cfg.seed_for(Role::Oracle), Purpose::Fixture, &[1]);
    let mut locations = Vec::with_capacity(2 * sec.noise_pairs);
    let mut separations = Vec::with_capacity(sec.noise_pairs);
    for _ in 0..sec.noise_pairs {
        let x: f64 = rng.random();
        let r = 2.4 * eps * rng.random::<f64>();
        locations.push(x);
        locations.push(crate::noise_field::wrap_unit(x + r));
        separations.push(r);
    }
    let field = cfg.field(Role::Oracle, 1, 1, &locations)?;
    let dt = cfg.sim.dt;
    let products: Vec<Vec<f64>> = (0..sec.noise_steps as u64)
        .into_par_iter()
        .map(|s| {
            let w = field.sample_increments(0, s);
            (0..sec.noise_pairs).map(|k| w[2 * k] * w[2 * k + 1]).collect()
        })
        .collect();
    let mut table = Table::new("noise", &["pair", "separation", "estimate", "correlation", "abs_error"]);
    let mut worst: f64 = 0.0;
    let mut estimates = Vec::with_capacity(sec.noise_pairs);
    for k in 0..sec.noise_pairs {
        let est = products.iter().map(|p| p[k]).sum::<f64>() / (sec.noise_steps as f64 * dt);
        let r = field.mollifier().correlation(&[separations[k]], eps)?;
        worst = worst.max((est - r).abs());
        table.push(vec![k.to_string(), num(separations[k]), num(est), num(r), num((est - r).abs())]);
        estimates.push(est);
    }
    let mut order: Vec<usize> = (0..sec.noise_pairs).collect();
    order.sort_by(|&a, &b| separations[a].total_cmp(&separations[b]));
    let curve: Vec<(f64, f64)> = (0..=120)
        .map(|k| 2.4 * eps * k as f64 / 120.0)
        .map(|r| field.mollifier().correlation(&[r], eps).map(|c| (r, c)))
        .collect::<Result<_>>()?;
    let empirical = Series::new("cov / dt", order.iter().map(|&k| (separations[k], estimates[k])).collect());
    out.plots.push(("noise".into(), Plot::new("noise correlation", "separation", "correlation").with(empirical).with(Series::new("R", curve).dashed())));
    out.checks.push(Check::new(
        "noise covariance",
        worst <= sec.noise_tol,
        format!("largest |cov / dt - R| = {worst:.4} over {} pairs, {} steps (need <= {})", sec.noise_pairs, sec.noise_steps, sec.noise_tol),
    ));
    let m = field.mollifier();
    let at0 = m.correlation(&[0.0], eps)?;
    out.checks.push(Check::new("correlation at the origin", (at0 - 1.0).abs() <= 1e-8, format!("R(0) = {at0:.12}")));
    let beyond: Vec<f64> = [2.0 * eps * (1.0 + 1e-12), 2.05 * eps, 3.0 * eps, 0.5]
        .iter()
        .map(|&r| m.correlation(&[r], eps))
        .collect::<Result<_>>()?;
    out.checks.push(Check::new(
        "correlation beyond 2 eps",
        beyond.iter().all(|v| *v == 0.0),
        format!("values {beyond:?}"),
    ));
    Ok(table)
}

fn random_cloud(rng: &mut impl Rng, d: usize, dv: usize) -> WeightedPointCloud {
    let n = rng.random_range(1..=8);
    let mut c = WeightedPointCloud::new(d, dv);
    let weights: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights {
        let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let u: Vec<f64> = (0..dv).map(|_| 4.0 * rng.random::<f64>()).collect();
        c.push(&x, &u, w / total);
    }
    c
}

fn exactness_identity(cfg: &ExperimentConfig, sec: &OracleSection, model: &dyn CoefficientModel, out: &mut Outcome) -> Result<()> {
    let dict = TestFunctionDictionary::build(model.d(), model.dv(), cfg.alpha(), &cfg.dictionary)?;
    let mut rng = stream(cfg.seed_for(Role::Oracle), Purpose::Fixture, &[2]);
    let mut worst: f64 = 0.0;
    for k in 0..sec.identity_pairs {
        let mu = random_cloud(&mut rng, model.d(), model.dv());
        let nu = random_cloud(&mut rng, model.d(), model.dv());
        let c = 0.5 + 10.0 * rng.random::<f64>();
        let t = rng.random::<f64>() * cfg.sim.t_final;
        for psi in &dict.members {
            let lhs = c * (generator_pairing(model, &mu, t, psi)? - generator_pairing(model, &nu, t, psi)?);
            let rhs = linearized_pairing(model, &mu, &nu, t, psi, c)?;
            let err = (lhs - rhs).abs();
            if err > worst {
                log::debug!("identity pair {k}: |lhs - rhs| = {err:e}");
            }
            worst = worst.max(err);
        }
    }
    out.checks.push(Check::new(
        "linearization identity",
        worst <= sec.identity_tol,
        format!("largest gap {worst:.3e} over {} cloud pairs x {} members (need <= {:e})", sec.identity_pairs, dict.len(), sec.identity_tol),
    ));
    Ok(())
}

fn decoupled_zero(cfg: &ExperimentConfig, sec: &OracleSection, model: &dyn CoefficientModel, out: &mut Outcome) -> Result<()> {
    let decoupled = Decoupled::new(DecoupledParams {
        d: model.d(),
        dv: model.dv(),
        ..Default::default()
    })?;
    let init = cfg.sampler(Role::ReferenceInit)?;
    let opts = cfg.sim_options();
    let (path, _) = law_moment_path(&decoupled, 8 * crate::noise_field::MarginalNoise::BLOCK, opts, &init, cfg.seed_for(Role::Reference), None)?;
    let run_init = cfg.sampler(Role::RunInit)?;
    let mut errors = Vec::new();
    for &[m, n] in &sec.zero_sizes {
        let grid = SpatialGrid::new(n, model.d())?;
        let noise = NoiseSource::Field(cfg.field(Role::RunNoise, model.d(), model.dv(), grid.centers())?);
        let e = coupled_run(&decoupled, &grid, m, 0, opts, &noise, &run_init, &path)?;
        errors.push((m, n, e.sup_mean_p2));
    }
    out.checks.push(Check::new(
        "decoupled coupled error",
        errors.iter().all(|e| e.2 == 0.0),
        format!("errors {:?}", errors),
    ));
    Ok(())
}

fn fokker_planck(cfg: &ExperimentConfig, sec: &OracleSection, out: &mut Outcome) -> Result<()> {
    let model = Homog::new(HomogParams::default())?;
    let init = InitialDataSampler::new(InitialLaw::Field(InitialData::half_normal()), cfg.seed_for(Role::EnsembleInit))?;
    let opts = SimOptions {
        t_final: sec.fp_t_final,
        step: StepOptions {
            dt: sec.fp_dt,
            blowup_cap: cfg.sim.blowup_cap,
        },
    };
    let (_, pop) = law_moment_path(&model, sec.fp_ensemble, opts, &init, cfg.seed_for(Role::Reference), None)?;
    let grid = FpGrid1D::default();
    let f0 = grid.cell_averages(|u| (2.0 * normal_cdf(u, 0.0, 1.0) - 1.0).max(0.0));
    let steps = (sec.fp_t_final / grid.dt).round() as usize;
    let traj = solve_fp_1d(&model, &f0, sec.fp_t_final, grid, steps)?;
    let k = traj.densities.len() - 1;
    let w1 = w1_samples_vs_cdf(&pop.levels, traj.cdf(k), 0.0, grid.u_max, 24_000);
    out.note("fokker_planck_w1", w1);
    out.checks.push(Check::new(
        "ensemble vs Fokker-Planck",
        w1 < sec.fp_max_w1,
        format!("W1 = {w1:.5} at T = {} with {} particles (need < {})", sec.fp_t_final, sec.fp_ensemble, sec.fp_max_w1),
    ));
    Ok(())
}

/// Minimal mean cost over all permutations.
fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    fn go(row: usize, n: usize, used: &mut Vec<bool>, acc: f64, cost: &[f64], best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(row + 1, n, used, acc + cost[row * n + j], cost, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, n, &mut vec![false; n], 0.0, cost, &mut best);
    best / n as f64
}

fn transport(cfg: &ExperimentConfig, sec: &OracleSection, out: &mut Outcome) -> Result<Table> {
    let mut rng = stream(cfg.seed_for(Role::Oracle), Purpose::Fixture, &[3]);
    let mut table = Table::new("transport", &["instance", "atoms", "p", "simplex", "brute_force", "abs_error"]);
    let mut worst: f64 = 0.0;
    for k in 0..sec.transport_instances {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=2u32);
        let cloud = |rng: &mut rand_chacha::ChaCha8Rng| {
            let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let us: Vec<f64> = (0..n).map(|_| 3.0 * rng.random::<f64>()).collect();
            WeightedPointCloud::uniform(1, 1, xs, us)
        };
        let a = cloud(&mut rng)?;
        let b = cloud(&mut rng)?;
        let simplex = wasserstein(&a, &b, p, TransportMethod::NetworkSimplex)?.value;
        let cost: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a.distance(i, &b, j).powi(p as i32)).collect();
        let brute = brute_force_assignment(&cost, n).powf(1.0 / p as f64);
        worst = worst.max((simplex - brute).abs());
        table.push(vec![k.to_string(), n.to_string(), p.to_string(), num(simplex), num(brute), num((simplex - brute).abs())]);
    }
    out.checks.push(Check::new(
        "transport vs brute force",
        worst <= sec.transport_tol,
        format!("largest gap {worst:.3e} over {} instances (need <= {:e})", sec.transport_instances, sec.transport_tol),
    ));
    Ok(table)
}

pub(super) fn oracle_suite(cfg: &ExperimentConfig, sec: &OracleSection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let noise = noise_covariance(cfg, sec, out)?;
    exactness_identity(cfg, sec, model.as_ref(), out)?;
    decoupled_zero(cfg, sec, model.as_ref(), out)?;
    if model.dv() == 1 {
        fokker_planck(cfg, sec, out)?;
    }
    let transport = transport(cfg, sec, out)?;
    let audit = audit_regularity(model.as_ref(), sec.audit_samples, cfg.seed_for(Role::Oracle))?;
    out.checks.push(Check::new(
        "model regularity audit",
        audit.passed(),
        format!("violations: {:?}", audit.violations),
    ));
    out.note("audit", &audit);
    let mut summary = Table::new("oracle", &["check", "passed"]);
    for c in &out.checks {
        summary.push(vec![c.name.clone(), c.passed.to_string()]);
    }
    out.tables.extend([summary, noise, transport]);
    Ok(())
}
