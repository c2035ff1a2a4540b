//! Fluctuation pairings `<eta_t, psi> = C (<f_MN(t), psi> - <f(t), psi>)`, the
//! martingale part of their dynamics and its quadratic variation, the limit
//! covariances `g_t` and `Q`, the semimartingale residual, and the
//! distributional tests behind the central limit theorem.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dynamics::{InitialDataSampler, MeasureSource, NoiseSource, Population, StepOptions, StepView};
use crate::error::{Error, Result};
use crate::measures::WeightedPointCloud;
use crate::model::{moments, CoefficientModel, MeasureMoments};
use crate::noise_field::NoiseFieldSampler;
use crate::stats::{ks_test, normal_cdf, variance_ratio_test, KsResult, VarianceRatio};
use crate::test_space::{Linearized, TestFunction, Generator};

/// `<mu, psi_p>` for every member, with the standard error over independent copies.
///
/// A population with one copy and many sites (a reference ensemble) treats
/// every atom as an independent sample; otherwise the per-copy spatial
/// averages are the samples.
pub fn population_pairings(pop: &Population, members: &[TestFunction]) -> (Vec<f64>, Vec<f64>) {
    let n = pop.sites.len();
    let dv = pop.dv;
    let per_sample: Vec<Vec<f64>> = if pop.copies == 1 {
        (0..n)
            .into_par_iter()
            .map(|i| members.iter().map(|p| p.value(&pop.sites[i].x, &pop.levels[i * dv..(i + 1) * dv])).collect())
            .collect()
    } else {
        (0..pop.copies)
            .into_par_iter()
            .map(|k| {
                let mut acc = vec![0.0; members.len()];
                for i in 0..n {
                    let u = pop.level(i, k);
                    for (a, p) in acc.iter_mut().zip(members) {
                        *a += p.value(&pop.sites[i].x, u);
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
                acc
            })
            .collect()
    };
    let s = per_sample.len() as f64;
    let mut mean = vec![0.0; members.len()];
    for v in &per_sample {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s);
    let mut var = vec![0.0; members.len()];
    for v in &per_sample {
        for p in 0..members.len() {
            var[p] += (v[p] - mean[p]).powi(2);
        }
    }
    let se = var.iter().map(|v| (v / (s - 1.0).max(1.0) / s).sqrt()).collect();
    (mean, se)
}

/// Pairings of the rescaled fluctuation field at recorded times.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FluctuationRecord {
    pub times: Vec<f64>,
    /// `[time][member]`.
    pub pairings: Vec<Vec<f64>>,
    pub scaling: f64,
    pub reference: Vec<Vec<f64>>,
    pub reference_stderr: Vec<Vec<f64>>,
    /// Set when `C * stderr` of the reference exceeds a quarter of the
    /// fluctuation's typical size.
    pub noisy_reference: bool,
}

/// `<eta_t, psi_p> = C (run - reference)` at every time.
pub fn fluctuation_pairings(
    times: &[f64],
    run: &[Vec<f64>],
    reference: &[Vec<f64>],
    reference_stderr: &[Vec<f64>],
    scaling: f64,
) -> Result<FluctuationRecord> {
    if run.len() != times.len() || reference.len() != times.len() || reference_stderr.len() != times.len() {
        return Err(Error::domain("run, reference and times must have equal length"));
    }
    let pairings: Vec<Vec<f64>> = run
        .iter()
        .zip(reference)
        .map(|(r, f)| r.iter().zip(f).map(|(a, b)| scaling * (a - b)).collect())
        .collect();
    if pairings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite fluctuation pairing"));
    }
    let rms = (pairings.iter().flatten().map(|v| v * v).sum::<f64>() / pairings.iter().flatten().count().max(1) as f64).sqrt();
    let worst = reference_stderr.iter().flatten().cloned().fold(0.0, f64::max);
    let noisy_reference = scaling != 0.0 && scaling.abs() * worst > 0.25 * rms;
    if noisy_reference {
        log::warn!("reference pairings are noisy relative to the fluctuation size ({:.3e} vs rms {:.3e})", scaling.abs() * worst, rms);
    }
    Ok(FluctuationRecord {
        times: times.to_vec(),
        pairings,
        scaling,
        reference: reference.to_vec(),
        reference_stderr: reference_stderr.to_vec(),
        noisy_reference,
    })
}

/// Martingale term and its quadratic variation, accumulated from step hooks.
///
/// For a population of `M` copies at `N` locations,
///
/// ```text
/// dM(psi)          = C / (M N) sum_{i,k} grad psi(x_i, u_ik) . sigma_ik dW_k(x_i)
/// d<M(phi),M(psi)> = C^2 / (M N)^2 sum_k sum_{i,j} sum_beta
///                    (d_beta phi sigma)(x_i, u_ik) (d_beta psi sigma)(x_j, u_jk) R(x_i - x_j) dt
/// ```
///
/// with start-of-step states. `R` is the discrete field correlation, whose
/// stencil factorization makes the double sum linear in `N`.
pub struct MartingaleTracker<'a> {
    members: &'a [TestFunction],
    field: Option<&'a NoiseFieldSampler>,
    locations: Vec<Vec<f64>>,
    copies: usize,
    dv: usize,
    pub scaling: f64,
    pub times: Vec<f64>,
    /// `[time][member]`, starting with zeros at `t = 0`.
    pub values: Vec<Vec<f64>>,
    /// `[time]` of row-major `P x P`, or empty without a field.
    pub qv: Vec<Vec<f64>>,
}

impl<'a> MartingaleTracker<'a> {
    pub fn new(
        members: &'a [TestFunction],
        field: Option<&'a NoiseFieldSampler>,
        pop: &Population,
        scaling: f64,
    ) -> Self {
        let p = members.len();
        Self {
            members,
            field,
            locations: pop.sites.iter().map(|s| s.x.clone()).collect(),
            copies: pop.copies,
            dv: pop.dv,
            scaling,
            times: vec![pop.t],
            values: vec![vec![0.0; p]],
            qv: if field.is_some() { vec![vec![0.0; p * p]] } else { Vec::new() },
        }
    }

    /// Instantaneous rates at one step: `(dM, d<M>/dt)`.
    fn increments(&self, view: &StepView<'_>) -> (Vec<f64>, Vec<f64>) {
        let (n, dv, p) = (self.locations.len(), self.dv, self.members.len());
        let members = self.members;
        let field = self.field;
        let locations = &self.locations;
        let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..self.copies)
            .into_par_iter()
            .map(|k| {
                let mut dm = vec![0.0; p];
                let mut qv = vec![0.0; if field.is_some() { p * p } else { 0 }];
                let mut grad = vec![0.0; dv];
                let mut diag = vec![0.0; dv];
                let cells = field.map_or(0, |f| f.n_cells());
                // a[p][beta][i] = d_beta psi_p sigma_beta at (x_i, u_ik).
                let mut a = vec![0.0; p * dv * n];
                for i in 0..n {
                    let o = (k * n + i) * dv;
                    let u = &view.levels[o..o + dv];
                    for (q, m) in members.iter().enumerate() {
                        m.jet_diag(&locations[i], u, &mut grad, &mut diag);
                        for beta in 0..dv {
                            let v = grad[beta] * view.sigma[o + beta];
                            a[(q * dv + beta) * n + i] = v;
                            dm[q] += v * view.dw[o + beta];
                        }
                    }
                }
                if let Some(f) = field {
                    let mut proj = vec![0.0; p * dv * cells];
                    for qb in 0..p * dv {
                        f.project(&a[qb * n..(qb + 1) * n], &mut proj[qb * cells..(qb + 1) * cells]);
                    }
                    for q1 in 0..p {
                        for q2 in q1..p {
                            let mut s = 0.0;
                            for beta in 0..dv {
                                let x = &proj[(q1 * dv + beta) * cells..(q1 * dv + beta + 1) * cells];
                                let y = &proj[(q2 * dv + beta) * cells..(q2 * dv + beta + 1) * cells];
                                s += x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                            }
                            qv[q1 * p + q2] = s;
                            qv[q2 * p + q1] = s;
                        }
                    }
                }
                (dm, qv)
            })
            .collect();
        let mut dm = vec![0.0; p];
        let mut qv = vec![0.0; if self.field.is_some() { p * p } else { 0 }];
        for (a, b) in &partial {
            for (x, y) in dm.iter_mut().zip(a) {
                *x += y;
            }
            for (x, y) in qv.iter_mut().zip(b) {
                *x += y;
            }
        }
        let mn = (self.copies * n) as f64;
        dm.iter_mut().for_each(|v| *v *= self.scaling / mn);
        qv.iter_mut().for_each(|v| *v *= self.scaling * self.scaling / (mn * mn));
        (dm, qv)
    }

    pub fn observe(&mut self, view: &StepView<'_>) {
        let (dm, rate) = self.increments(view);
        let mut next = self.values.last().unwrap().clone();
        for (a, b) in next.iter_mut().zip(&dm) {
            *a += b;
        }
        self.values.push(next);
        if let Some(last) = self.qv.last() {
            let next: Vec<f64> = last.iter().zip(&rate).map(|(a, r)| a + r * view.dt).collect();
            self.qv.push(next);
        }
        self.times.push(view.t + view.dt);
    }

    /// `<M(psi_p), M(psi_q)>` at the last time.
    pub fn final_qv(&self) -> Option<DMatrix<f64>> {
        let p = self.members.len();
        self.qv.last().map(|v| DMatrix::from_row_slice(p, p, v))
    }
}

/// Accumulate the martingale term by stepping `pop` to `t_final`.
#[allow(clippy::too_many_arguments)]
pub fn martingale_term(
    model: &dyn CoefficientModel,
    pop: &mut Population,
    members: &[TestFunction],
    noise: &NoiseSource,
    measure_path: Option<&[MeasureMoments]>,
    steps: usize,
    opts: StepOptions,
    scaling: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let field = match noise {
        NoiseSource::Field(f) => Some(f),
        NoiseSource::Zero => None,
        NoiseSource::Marginal(_) => return Err(Error::config("the martingale term needs field or zero noise")),
    };
    let mut tracker = MartingaleTracker::new(members, field, pop, scaling);
    for s in 0..steps {
        let src = match measure_path {
            None => MeasureSource::SelfConsistent,
            Some(p) => MeasureSource::External(p.get(s).ok_or_else(|| Error::Missing(format!("no moments for step {s}")))?),
        };
        let mut hook = |v: &StepView<'_>| tracker.observe(v);
        pop.step(model, src, noise, opts, Some(&mut hook))?;
    }
    let MartingaleTracker { times, values, qv, .. } = tracker;
    Ok((times, values, qv))
}

/// Ensemble state kept for later assembly: the cloud and the law moments at one step.
#[derive(Debug, Clone)]
pub struct EnsembleNode {
    pub step: usize,
    pub t: f64,
    pub cloud: WeightedPointCloud,
    pub moments: MeasureMoments,
}

/// Limit covariance `g_t` at every step, plus requested ensemble nodes.
#[derive(Debug, Clone)]
pub struct GEstimate {
    pub epsilon: f64,
    pub times: Vec<f64>,
    /// `[time]` of `P x P`.
    pub g: Vec<DMatrix<f64>>,
    pub nodes: Vec<EnsembleNode>,
}

/// `g_t(phi, psi)` from a McKean–Vlasov ensemble of `K` copies on a grid.
///
/// The copies see the law through `law_path` and copy `k` is driven by field
/// copy `k` at all its locations, so the pairs `(ubar_k(x_i), ubar_k(x_j))`
/// sample the two-point law. The tracker with scaling `sqrt(K)` then
/// accumulates exactly the left-endpoint sum of the time integral.
#[allow(clippy::too_many_arguments)]
pub fn estimate_g(
    model: &dyn CoefficientModel,
    ensemble: &mut Population,
    field: &NoiseFieldSampler,
    law_path: &[MeasureMoments],
    members: &[TestFunction],
    steps: usize,
    opts: StepOptions,
    epsilon: f64,
    node_steps: &[usize],
) -> Result<GEstimate> {
    if (field.config().epsilon - epsilon).abs() > 1e-15 {
        return Err(Error::config(format!(
            "ensemble noise has epsilon = {} but g was requested for epsilon = {epsilon}",
            field.config().epsilon
        )));
    }
    if law_path.len() < steps + 1 {
        return Err(Error::Missing("law moment path is shorter than the run".into()));
    }
    let p = members.len();
    let mut nodes = Vec::new();
    let take = |pop: &Population, nodes: &mut Vec<EnsembleNode>| {
        if node_steps.contains(&pop.step) {
            nodes.push(EnsembleNode {
                step: pop.step,
                t: pop.t,
                cloud: pop.cloud(),
                moments: law_path[pop.step].clone(),
            });
        }
    };
    take(ensemble, &mut nodes);
    let mut tracker = MartingaleTracker::new(members, Some(field), ensemble, (ensemble.copies as f64).sqrt());
    let noise = NoiseSource::Field(field.clone());
    for s in 0..steps {
        let mut hook = |v: &StepView<'_>| tracker.observe(v);
        ensemble.step(model, MeasureSource::External(&law_path[s]), &noise, opts, Some(&mut hook))?;
        take(ensemble, &mut nodes);
    }
    let g = tracker.qv.iter().map(|v| DMatrix::from_row_slice(p, p, v)).collect();
    Ok(GEstimate {
        epsilon,
        times: tracker.times,
        g,
        nodes,
    })
}

/// Symmetric matrix estimate with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub value: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    /// Sum of magnitudes of negative eigenvalues removed by the PSD clip.
    pub clip: f64,
    pub samples: usize,
}

/// Eigenvalue clip at zero; returns the clipped matrix and the removed magnitude.
pub fn psd_clip(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym: DMatrix<f64> = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let removed: f64 = eig.eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (out, removed)
}

/// Centered sample covariance of rows `samples[s][p]`, standard errors, clip.
pub fn sample_covariance(samples: &[Vec<f64>]) -> Result<CovarianceEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::domain("covariance needs at least two samples"));
    }
    let p = samples[0].len();
    let mut mean = vec![0.0; p];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    let mut value = DMatrix::<f64>::zeros(p, p);
    let mut second = DMatrix::<f64>::zeros(p, p);
    for s in samples {
        for a in 0..p {
            for b in 0..p {
                let prod = (s[a] - mean[a]) * (s[b] - mean[b]);
                value[(a, b)] += prod;
                second[(a, b)] += prod * prod;
            }
        }
    }
    let nf = n as f64;
    let stderr = DMatrix::from_fn(p, p, |a, b| {
        let m = value[(a, b)] / nf;
        ((second[(a, b)] / nf - m * m).max(0.0) / nf).sqrt()
    });
    value /= nf - 1.0;
    let (value, clip) = psd_clip(&value);
    Ok(CovarianceEstimate {
        value,
        stderr,
        clip,
        samples: n,
    })
}

/// `Q(phi, psi)`: covariance over copies of `int_Q psi(x, u_k(x, 0)) dx`,
/// the spatial integral taken as the mean over `locations`.
pub fn initial_covariance_q(
    init: &InitialDataSampler,
    members: &[TestFunction],
    locations: &[f64],
    d: usize,
    dv: usize,
    n_mc: usize,
    copy_offset: u64,
) -> Result<CovarianceEstimate> {
    if n_mc < 1000 {
        return Err(Error::domain("initial covariance needs at least 1000 samples"));
    }
    let n = locations.len() / d;
    let profile: Vec<f64> = locations.chunks(d).map(|x| init.profile_at(x)).collect();
    let samples: Vec<Vec<f64>> = (0..n_mc as u64)
        .into_par_iter()
        .map(|k| {
            let coeffs = init.coefficients(copy_offset + k, dv);
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
        .collect();
    sample_covariance(&samples)
}

/// KS test of samples against `N(0, q)`.
pub fn gaussianity_test(samples: &[f64], q: f64) -> Result<KsResult> {
    if samples.len() < 200 {
        return Err(Error::domain("gaussianity test needs at least 200 runs"));
    }
    if !(q > 0.0) {
        return Err(Error::domain("reference variance must be positive"));
    }
    let sd = q.sqrt();
    Ok(ks_test(samples, |x| normal_cdf(x, 0.0, sd)))
}

/// One-sided test for second moments exceeding `q`.
pub fn excess_variance_test(samples: &[f64], q: f64) -> VarianceRatio {
    variance_ratio_test(samples, q)
}

/// Pieces of the semimartingale decomposition along one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ResidualRecord {
    pub times: Vec<f64>,
    /// `[time][member]` of `<eta_t, psi>`.
    pub pairings: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub martingale: Vec<Vec<f64>>,
    pub residual: Vec<Vec<f64>>,
}

/// `<eta_t,psi> - <eta_0,psi> - sum_r <eta_r, LL_r(f_MN, f)[psi]> dt - M_t(psi)`.
///
/// The run (self-consistent, field noise) and the reference ensemble (its own
/// measure source and noise) are advanced in lockstep; the drift pairs the
/// signed cloud `C (f_MN - f)` with the linearized operator.
#[allow(clippy::too_many_arguments)]
pub fn semimartingale_residual(
    model: &dyn CoefficientModel,
    members: &[TestFunction],
    run: &mut Population,
    run_noise: &NoiseSource,
    reference: &mut Population,
    reference_noise: &NoiseSource,
    steps: usize,
    opts: StepOptions,
    scaling: f64,
) -> Result<ResidualRecord> {
    let field = match run_noise {
        NoiseSource::Field(f) => Some(f),
        NoiseSource::Zero => None,
        NoiseSource::Marginal(_) => return Err(Error::config("the run needs field or zero noise")),
    };
    let pairing = |pop: &Population| -> Vec<f64> {
        let c = pop.cloud();
        members.iter().map(|m| c.pair(|x, u| m.value(x, u))).collect()
    };
    let eta = |run: &Population, reference: &Population| -> Vec<f64> {
        pairing(run).iter().zip(pairing(reference)).map(|(a, b)| scaling * (a - b)).collect()
    };
    let p = members.len();
    let mut rec = ResidualRecord {
        times: vec![run.t],
        pairings: vec![eta(run, reference)],
        drift: vec![vec![0.0; p]],
        martingale: vec![vec![0.0; p]],
        residual: vec![vec![0.0; p]],
    };
    let mut tracker = MartingaleTracker::new(members, field, run, scaling);
    for _ in 0..steps {
        let t = run.t;
        let mu = run.cloud();
        let nu = reference.cloud();
        let (mm, mn) = (moments(model, &mu, t)?, moments(model, &nu, t)?);
        let mut drift = rec.drift.last().unwrap().clone();
        for (q, psi) in members.iter().enumerate() {
            drift[q] += opts.dt * signed_linearized_pairing(model, t, &mm, &mn, &mu, &nu, psi, scaling);
        }
        let mut hook = |v: &StepView<'_>| tracker.observe(v);
        run.step(model, MeasureSource::SelfConsistent, run_noise, opts, Some(&mut hook))?;
        match reference_noise {
            NoiseSource::Marginal(mnoise) => {
                let m_ref = reference.moments(model);
                reference.step_independent(model, &m_ref, mnoise, opts)?;
            }
            other => reference.step(model, MeasureSource::SelfConsistent, other, opts, None)?,
        }
        let pr = eta(run, reference);
        let mart = tracker.values.last().unwrap().clone();
        let resid = (0..p).map(|q| pr[q] - rec.pairings[0][q] - drift[q] - mart[q]).collect();
        rec.times.push(run.t);
        rec.pairings.push(pr);
        rec.drift.push(drift);
        rec.martingale.push(mart);
        rec.residual.push(resid);
    }
    Ok(rec)
}

/// `<C (mu - nu), LL(mu, nu)[psi]>` with precomputed moments.
#[allow(clippy::too_many_arguments)]
fn signed_linearized_pairing(
    model: &dyn CoefficientModel,
    t: f64,
    mm: &MeasureMoments,
    mn: &MeasureMoments,
    mu: &WeightedPointCloud,
    nu: &WeightedPointCloud,
    psi: &TestFunction,
    scaling: f64,
) -> f64 {
    let lin = Linearized::new(model, t, mm, mn, nu, psi);
    let side = |c: &WeightedPointCloud| -> f64 {
        let parts: Vec<f64> = (0..c.len())
            .into_par_iter()
            .map_init(
                || Generator::new(model, t, mm),
                |gen, j| c.weight(j) * lin.apply_with(gen, psi, &model.site(c.x(j)), c.u(j)),
            )
            .collect();
        parts.iter().sum()
    };
    scaling * (side(mu) - side(nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{InitialData, InitialLaw, SpatialGrid};
    use crate::model::{Decoupled, DecoupledParams, HolderProfile, LinRelax, LinRelaxParams};
    use crate::noise_field::NoiseConfig;
    use crate::test_space::{SpatialMode, ValueFactor};

    fn members() -> Vec<TestFunction> {
        vec![
            TestFunction { g: SpatialMode::Constant, h: ValueFactor::gaussian(1, 1.5) },
            TestFunction { g: SpatialMode::Cos { axis: 0, freq: 1 }, h: ValueFactor::gaussian(1, 1.5) },
            TestFunction { g: SpatialMode::Constant, h: ValueFactor::Gaussian { powers: vec![1], scale: 1.5 } },
        ]
    }

    fn field(locs: &[f64], dt: f64, seed: u64) -> NoiseFieldSampler {
        NoiseFieldSampler::new(
            NoiseConfig { epsilon: 0.1, dt, seed, dv: 1, h: None, profile: Default::default() },
            1,
            locs,
        )
        .unwrap()
    }

    #[test]
    fn zero_scaling_and_constants_vanish() {
        let rec = fluctuation_pairings(&[0.0], &[vec![0.3, 0.4]], &[vec![0.1, 0.2]], &[vec![0.0, 0.0]], 0.0).unwrap();
        assert!(rec.pairings[0].iter().all(|v| *v == 0.0));
        let init = InitialDataSampler::new(InitialLaw::default(), 1).unwrap();
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let grid = SpatialGrid::new(8, 1).unwrap();
        let a = Population::new(&model, grid.centers(), 16, 0, &init).unwrap();
        let b = Population::new(&model, grid.centers(), 16, 16, &init).unwrap();
        let one = [TestFunction::constant()];
        let (pa, _) = population_pairings(&a, &one);
        let (pb, _) = population_pairings(&b, &one);
        let rec = fluctuation_pairings(&[0.0], &[pa], &[pb], &[vec![0.0]], 4.0).unwrap();
        assert!(rec.pairings[0][0].abs() < 1e-14);
    }

    #[test]
    fn martingale_vanishes_without_diffusion() {
        let model = Decoupled::new(DecoupledParams { s0: 0.0, ..Default::default() }).unwrap();
        let grid = SpatialGrid::new(8, 1).unwrap();
        let init = InitialDataSampler::new(InitialLaw::default(), 2).unwrap();
        let mut pop = Population::new(&model, grid.centers(), 8, 0, &init).unwrap();
        let f = field(grid.centers(), 0.01, 3);
        let ms = members();
        let (times, values, qv) = martingale_term(
            &model, &mut pop, &ms, &NoiseSource::Field(f), None, 10, StepOptions { dt: 0.01, blowup_cap: 1e6 }, 2.0,
        )
        .unwrap();
        assert_eq!(times.len(), 11);
        assert!(values.iter().flatten().all(|v| *v == 0.0));
        assert!(qv.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn one_step_qv_matches_the_expanded_double_sum() {
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let init = InitialDataSampler::new(InitialLaw::default(), 4).unwrap();
        let dt = 0.01;
        let f = field(&[0.25, 0.3], dt, 5);
        // Two locations closer than 2 eps so the cross terms are nonzero.
        let mut pop = Population::new(&model, &[0.25, 0.3], 2, 0, &init).unwrap();
        let ms = members();
        let scaling = 2f64.sqrt();
        let levels0 = pop.levels.clone();
        let m0 = pop.moments(&model);
        let (_, values, qv) = martingale_term(
            &model, &mut pop, &ms, &NoiseSource::Field(f.clone()), None, 1, StepOptions { dt, blowup_cap: 1e6 }, scaling,
        )
        .unwrap();
        // Oracle: explicit 2 copies x 2 x 2 location pairs.
        let locs = [0.25, 0.3];
        let sig = |i: usize, k: usize| {
            let site = model.site(&[locs[i]]);
            let mut ws = crate::model::Workspace::new(&model);
            let (mut b, mut s) = ([0.0], [0.0]);
            crate::model::coefficients_from_moments(&model, &site, 0.0, &[levels0[k * 2 + i]], &m0, &mut ws, &mut b, &mut s);
            s[0]
        };
        let grad = |q: usize, i: usize, k: usize| {
            let crate::test_space::Derivative::Gradient(g) = ms[q].eval_v(1, &[locs[i]], &[levels0[k * 2 + i]]).unwrap() else {
                panic!()
            };
            g[0]
        };
        for p in 0..3 {
            for q in 0..3 {
                let mut s = 0.0;
                for k in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            s += grad(p, i, k) * sig(i, k) * grad(q, j, k) * sig(j, k) * f.discrete_correlation(i, j);
                        }
                    }
                }
                let oracle = scaling * scaling / 16.0 * s * dt;
                assert!((qv[1][p * 3 + q] - oracle).abs() < 1e-12, "{} vs {oracle}", qv[1][p * 3 + q]);
            }
            let mut m = 0.0;
            for k in 0..2 {
                let dw = f.sample_increments(k as u64, 0);
                for i in 0..2 {
                    m += grad(p, i, k) * sig(i, k) * dw[i];
                }
            }
            assert!((values[1][p] - scaling / 4.0 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn qv_diagonal_is_nondecreasing_and_symmetric() {
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let grid = SpatialGrid::new(16, 1).unwrap();
        let init = InitialDataSampler::new(InitialLaw::default(), 6).unwrap();
        let mut pop = Population::new(&model, grid.centers(), 8, 0, &init).unwrap();
        let ms = members();
        let (_, _, qv) = martingale_term(
            &model, &mut pop, &ms, &NoiseSource::Field(field(grid.centers(), 0.01, 7)), None, 20,
            StepOptions { dt: 0.01, blowup_cap: 1e6 }, 8f64.sqrt(),
        )
        .unwrap();
        for w in qv.windows(2) {
            for p in 0..3 {
                assert!(w[1][p * 3 + p] >= w[0][p * 3 + p]);
                for q in 0..3 {
                    assert_eq!(w[1][p * 3 + q], w[1][q * 3 + p]);
                }
            }
        }
    }

    #[test]
    fn martingale_has_zero_mean_over_runs() {
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let grid = SpatialGrid::new(4, 1).unwrap();
        let ms = members();
        let mut finals = Vec::new();
        for r in 0..200u64 {
            let init = InitialDataSampler::new(InitialLaw::default(), 100 + r).unwrap();
            let mut pop = Population::new(&model, grid.centers(), 4, 0, &init).unwrap();
            let (_, values, _) = martingale_term(
                &model, &mut pop, &ms, &NoiseSource::Field(field(grid.centers(), 0.02, 1000 + r)), None, 10,
                StepOptions { dt: 0.02, blowup_cap: 1e6 }, 2.0,
            )
            .unwrap();
            finals.push(values.last().unwrap().clone());
        }
        for p in 0..3 {
            let col: Vec<f64> = finals.iter().map(|v| v[p]).collect();
            let se = (crate::stats::variance(&col) / col.len() as f64).sqrt();
            assert!(crate::stats::mean(&col).abs() < 3.0 * se);
        }
    }

    #[test]
    fn q_of_constant_is_zero_and_gaussian_fixture_matches_closed_form() {
        let init = InitialDataSampler::new(InitialLaw::Field(InitialData::half_normal()), 8).unwrap();
        let grid = SpatialGrid::new(4, 1).unwrap();
        let one = [TestFunction::constant()];
        let q = initial_covariance_q(&init, &one, grid.centers(), 1, 1, 2000, 0).unwrap();
        assert!(q.value[(0, 0)].abs() < 1e-15);
        let s: f64 = 1.5;
        let psi = [TestFunction { g: SpatialMode::Constant, h: ValueFactor::gaussian(1, s) }];
        let q = initial_covariance_q(&init, &psi, grid.centers(), 1, 1, 40_000, 0).unwrap();
        // u = |xi|: E e^{-u^2/s^2} - (E e^{-u^2/2s^2})^2.
        let oracle = (1.0 + 2.0 / (s * s)).powf(-0.5) - 1.0 / (1.0 + 1.0 / (s * s));
        assert!((q.value[(0, 0)] - oracle).abs() < 3.0 * q.stderr[(0, 0)], "{} vs {oracle}", q.value[(0, 0)]);
        assert!(initial_covariance_q(&init, &psi, grid.centers(), 1, 1, 999, 0).is_err());
    }

    #[test]
    fn synthetic_gaussian_passes_ks() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut ps = Vec::new();
        for _ in 0..20 {
            let xs: Vec<f64> = (0..300).map(|_| Normal::new(0.0, 2.0).unwrap().sample(&mut rng)).collect();
            ps.push(gaussianity_test(&xs, 4.0).unwrap().p_value);
            let big: Vec<f64> = xs.iter().map(|x| 1.5 * x).collect();
            assert!(excess_variance_test(&big, 4.0).ratio > 1.5);
        }
        // Roughly uniform p-values: not all tiny, not all near one.
        let small = ps.iter().filter(|p| **p < 0.5).count();
        assert!((3..=17).contains(&small));
        assert!(gaussianity_test(&[0.0; 10], 1.0).is_err());
    }

    #[test]
    fn residual_starts_at_zero_and_is_first_order_without_noise() {
        let model = Decoupled::new(DecoupledParams { s0: 0.0, profile: HolderProfile::Cosine, ..Default::default() }).unwrap();
        let grid = SpatialGrid::new(8, 1).unwrap();
        let ms = members();
        let resid = |dt: f64| {
            let init = InitialDataSampler::new(InitialLaw::default(), 10).unwrap();
            let ref_init = InitialDataSampler::new(InitialLaw::default(), 11).unwrap();
            let mut run = Population::new(&model, grid.centers(), 16, 0, &init).unwrap();
            let mut reference = Population::new(&model, grid.centers(), 64, 0, &ref_init).unwrap();
            let steps = (0.5 / dt).round() as usize;
            let rec = semimartingale_residual(
                &model, &ms, &mut run, &NoiseSource::Zero, &mut reference, &NoiseSource::Zero, steps,
                StepOptions { dt, blowup_cap: 1e6 }, 4.0,
            )
            .unwrap();
            assert!(rec.residual[0].iter().all(|v| *v == 0.0));
            rec.residual.last().unwrap().iter().map(|v| v.abs()).fold(0.0, f64::max)
        };
        let (a, b) = (resid(0.02), resid(0.01));
        let ratio = a / b;
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio} ({a}, {b})");
    }

    #[test]
    fn psd_clip_removes_negative_part() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
        let (c, r) = psd_clip(&m);
        assert!((r - 0.1).abs() < 1e-15);
        assert!(c[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn g_rejects_mismatched_epsilon_and_vanishes_without_noise() {
        let model = Decoupled::new(DecoupledParams { s0: 0.0, ..Default::default() }).unwrap();
        let grid = SpatialGrid::new(8, 1).unwrap();
        let init = InitialDataSampler::new(InitialLaw::default(), 12).unwrap();
        let mut ens = Population::new(&model, grid.centers(), 8, 0, &init).unwrap();
        let f = field(grid.centers(), 0.01, 13);
        let path = vec![crate::model::MeasureMoments::zeros(&model); 6];
        let ms = members();
        let opts = StepOptions { dt: 0.01, blowup_cap: 1e6 };
        assert!(estimate_g(&model, &mut ens.clone(), &f, &path, &ms, 5, opts, 0.2, &[]).is_err());
        let g = estimate_g(&model, &mut ens, &f, &path, &ms, 5, opts, 0.1, &[0, 5]).unwrap();
        assert!(g.g.iter().all(|m| m.iter().all(|v| *v == 0.0)));
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.nodes[1].cloud.len(), 64);
    }

}
