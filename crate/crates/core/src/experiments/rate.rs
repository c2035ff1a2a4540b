//! Mean-field rate by the coupling method, and Wasserstein decay of the empirical measure.


use super::output::num;
use super::{fit_rate, Check, DecaySection, ExperimentConfig, Outcome, Plot, RateSection, Role, Series, Table};
use crate::dynamics::{coupled_run, law_moment_path, simulate_particle_system, CouplingError, NoiseSource, SpatialGrid};
use crate::error::Result;
use crate::model::{CoefficientModel, MeasureMoments};

/// Reference law path from an independent ensemble.
pub(super) fn reference_path(cfg: &ExperimentConfig, model: &dyn CoefficientModel) -> Result<(Vec<MeasureMoments>, crate::dynamics::Population)> {
    let init = cfg.sampler(Role::ReferenceInit)?;
    law_moment_path(model, cfg.k_ref, cfg.sim_options(), &init, cfg.seed_for(Role::Reference), None)
}

fn pooled_error(
    cfg: &ExperimentConfig,
    model: &dyn CoefficientModel,
    path: &[MeasureMoments],
    m: usize,
    n: usize,
    min_copies: usize,
) -> Result<CouplingError> {
    let grid = SpatialGrid::new(n, model.d())?;
    let noise = NoiseSource::Field(cfg.field(Role::RunNoise, model.d(), model.dv(), grid.centers())?);
    let init = cfg.sampler(Role::RunInit)?;
    let reps = min_copies.div_ceil(m).max(1);
    let parts = (0..reps)
        .map(|r| coupled_run(model, &grid, m, r * m, cfg.sim_options(), &noise, &init, path))
        .collect::<Result<Vec<_>>>()?;
    CouplingError::pool(&parts)
}

pub(super) fn mean_field_rate(cfg: &ExperimentConfig, sec: &RateSection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let (path, _) = reference_path(cfg, model.as_ref())?;
    let mut table = Table::new("rate", &["sweep", "m", "n", "copies", "error", "error_p4"]);
    let mut plot = Plot::new("coupled error", "size", "sup-mean error").log_log();
    for (sweep, sizes, window) in [
        ("m", sec.m_sweep.iter().map(|&m| (m, sec.n_fixed)).collect::<Vec<_>>(), sec.m_slope),
        ("n", sec.n_sweep.iter().map(|&n| (sec.m_fixed, n)).collect::<Vec<_>>(), sec.n_slope),
    ] {
        let mut xs = Vec::new();
        let mut errs = Vec::new();
        for &(m, n) in &sizes {
            let e = pooled_error(cfg, model.as_ref(), &path, m, n, sec.min_copies)?;
            log::info!("{sweep}-sweep M={m} N={n}: error {:.5}", e.sup_mean_p2.sqrt());
            table.push(vec![sweep.into(), m.to_string(), n.to_string(), e.copies.to_string(), num(e.sup_mean_p2.sqrt()), num(e.sup_mean_p4.powf(0.25))]);
            xs.push(if sweep == "m" { m as f64 } else { n as f64 });
            errs.push(e.sup_mean_p2.sqrt());
        }
        let label = format!("{sweep}-sweep");
        if errs.iter().all(|e| *e == 0.0) {
            out.note(&format!("{sweep}_fit"), serde_json::json!({"skipped": "all coupled errors are exactly zero"}));
            if let Some(w) = window {
                out.checks.push(Check::new(format!("{sweep}-slope"), false, format!("no rate to fit; target {} +- {}", w.target, w.tol)));
            }
            continue;
        }
        let fit = match fit_rate(&xs, &errs) {
            Ok(f) => f,
            Err(e) => {
                out.note(&format!("{sweep}_fit"), serde_json::json!({"skipped": e.to_string()}));
                continue;
            }
        };
        plot = plot
            .with(Series::new(&label, xs.iter().copied().zip(errs.iter().copied()).collect()))
            .with(Series::new(&format!("{label} fit {:.3}", fit.slope), xs.iter().map(|&x| (x, fit.predict(x))).collect()).dashed());
        if let Some(w) = window {
            out.checks.push(Check::new(
                format!("{sweep}-slope"),
                w.contains(fit.slope),
                format!("slope {:.4}, target {} +- {}", fit.slope, w.target, w.tol),
            ));
        }
        out.note(&format!("{sweep}_fit"), &fit);
    }
    out.tables.push(table);
    out.plots.push(("rate".into(), plot));
    Ok(())
}

/// `W_1` between uniform samples of different sizes on the line, as `int |F_a - F_b|`.
pub(super) fn w1_uniform(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut last = f64::NAN;
    let mut acc = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if last.is_finite() {
            acc += (i as f64 / na - j as f64 / nb).abs() * (next - last);
        }
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        last = next;
    }
    acc
}

fn level_marginal(levels: &[f64], dv: usize) -> Vec<f64> {
    levels.chunks(dv).map(|u| u[0]).collect()
}

pub(super) fn wasserstein_decay(cfg: &ExperimentConfig, sec: &DecaySection, out: &mut Outcome) -> Result<()> {
    let model = cfg.build_model()?;
    let dv = model.dv();
    let (_, reference) = reference_path(cfg, model.as_ref())?;
    let reference = level_marginal(&reference.levels, dv);
    let grid = SpatialGrid::new(sec.n, model.d())?;
    let mut table = Table::new("decay", &["m", "n", "run", "w1"]);
    let mut xs = Vec::new();
    let mut means = Vec::new();
    for &m in &sec.m_sweep {
        let w: Vec<f64> = (0..sec.runs)
            .map(|r| -> Result<f64> {
                let mut c = cfg.clone();
                c.seed = crate::rng::derive_seed(cfg.seed, crate::rng::Purpose::Replica, &[m as u64, r as u64]);
                let noise = NoiseSource::Field(c.field(Role::RunNoise, model.d(), dv, grid.centers())?);
                let (pop, _) = simulate_particle_system(model.as_ref(), &grid, m, c.sim_options(), &noise, &c.sampler(Role::RunInit)?, &[])?;
                Ok(w1_uniform(&level_marginal(&pop.levels, dv), &reference))
            })
            .collect::<Result<_>>()?;
        for (r, v) in w.iter().enumerate() {
            table.push(vec![m.to_string(), sec.n.to_string(), r.to_string(), num(*v)]);
        }
        xs.push(m as f64);
        means.push(w.iter().sum::<f64>() / w.len() as f64);
    }
    let mut plot = Plot::new("W1 of the level marginal at T", "M", "W1").log_log().with(Series::new("mean W1", xs.iter().copied().zip(means.iter().copied()).collect()));
    match fit_rate(&xs, &means) {
        Ok(fit) => {
            plot = plot.with(Series::new(&format!("fit {:.3}", fit.slope), xs.iter().map(|&x| (x, fit.predict(x))).collect()).dashed());
            out.note("fit", &fit);
        }
        Err(e) => out.note("fit", serde_json::json!({"skipped": e.to_string()})),
    }
    out.tables.push(table);
    out.plots.push(("decay".into(), plot));
    Ok(())
}
