//! Galerkin form of the linear Langevin equation solved by the limit
//! fluctuations: `d y = A(t)^T y dt + dM`, `d<M> = C(t) dt`, `y_0 ~ N(0, Q0)`,
//! where `y_p = <eta, psi_p>` and `A` is the projection of the linearized
//! operator at `mu = nu = f` onto the dictionary span.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fluctuation::{psd_clip, EnsembleNode, GEstimate};
use crate::model::CoefficientModel;
use crate::rng::{stream, Purpose};
use crate::test_space::{Generator, Linearized, TestFunction};

/// Time-dependent drift and noise matrices at nodes, with the initial covariance.
#[derive(Debug, Clone)]
pub struct GalerkinSystem {
    pub times: Vec<f64>,
    /// `A_pq(t)`: column `q` holds the coefficients of `LL(f,f)[psi_q]`.
    pub a: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub q0: DMatrix<f64>,
    /// Relative weighted residual of each projection, `[time][q]`.
    pub residuals: Vec<Vec<f64>>,
    /// Magnitude removed by the PSD clip of `C` at each node.
    pub c_clip: Vec<f64>,
}

/// Largest eigenvalue ratio tolerated in the projection's normal equations.
pub const MAX_CONDITION: f64 = 1e10;

/// Weighted least squares of `targets` (one column per member) on the members' values.
fn project(
    members: &[TestFunction],
    node: &EnsembleNode,
    targets: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let cloud = &node.cloud;
    let (n, p) = (cloud.len(), members.len());
    let phi = DMatrix::from_fn(n, p, |j, q| cloud.weight(j).sqrt() * members[q].value(cloud.x(j), cloud.u(j)));
    let w_targets = DMatrix::from_fn(n, targets.ncols(), |j, q| cloud.weight(j).sqrt() * targets[(j, q)]);
    let normal = phi.transpose() * &phi;
    let eig = normal.clone().symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::numerical(format!(
            "dictionary Gram matrix under the ensemble is ill-conditioned ({:.2e}); use a smaller dictionary",
            if lo > 0.0 { hi / lo } else { f64::INFINITY }
        )));
    }
    let chol = normal.cholesky().ok_or_else(|| Error::numerical("projection normal matrix is not positive definite"))?;
    let coef = chol.solve(&(phi.transpose() * &w_targets));
    let fitted = &phi * &coef;
    let residuals = (0..targets.ncols())
        .map(|q| {
            let total = w_targets.column(q).norm();
            let miss = (w_targets.column(q) - fitted.column(q)).norm();
            if total == 0.0 {
                miss
            } else {
                miss / total
            }
        })
        .collect();
    Ok((coef, residuals))
}

/// `LL_t(f, f)[psi_q]` at every atom of the node cloud, one column per member.
pub fn linearized_values(model: &dyn CoefficientModel, members: &[TestFunction], node: &EnsembleNode) -> DMatrix<f64> {
    let cloud = &node.cloud;
    let mut out = DMatrix::zeros(cloud.len(), members.len());
    for (q, psi) in members.iter().enumerate() {
        let lin = Linearized::new(model, node.t, &node.moments, &node.moments, cloud, psi);
        let col: Vec<f64> = (0..cloud.len())
            .into_par_iter()
            .map_init(
                || Generator::new(model, node.t, &node.moments),
                |gen, j| lin.apply_with(gen, psi, &model.site(cloud.x(j)), cloud.u(j)),
            )
            .collect();
        out.set_column(q, &DVector::from_vec(col));
    }
    out
}

/// `L_t(f)[psi_q]` at every atom (no measure linearization).
pub fn generator_values(model: &dyn CoefficientModel, members: &[TestFunction], node: &EnsembleNode) -> DMatrix<f64> {
    let cloud = &node.cloud;
    let mut out = DMatrix::zeros(cloud.len(), members.len());
    for (q, psi) in members.iter().enumerate() {
        let col: Vec<f64> = (0..cloud.len())
            .into_par_iter()
            .map_init(
                || Generator::new(model, node.t, &node.moments),
                |gen, j| gen.apply(psi, &model.site(cloud.x(j)), cloud.u(j)),
            )
            .collect();
        out.set_column(q, &DVector::from_vec(col));
    }
    out
}

/// Noise rate `C = dg/dt` at `step` by symmetric differences (one-sided at the ends).
fn rate_at(g: &GEstimate, step: usize) -> Result<DMatrix<f64>> {
    let last = g.g.len() - 1;
    if step > last {
        return Err(Error::Missing(format!("g has no entry for step {step}")));
    }
    let (lo, hi) = (step.saturating_sub(1), (step + 1).min(last));
    if lo == hi {
        return Err(Error::Missing("g needs at least two time points".into()));
    }
    Ok((&g.g[hi] - &g.g[lo]) / (g.times[hi] - g.times[lo]))
}

/// Assemble `A(t)` by projection at every node and `C(t)` from `g`.
pub fn assemble_galerkin(
    model: &dyn CoefficientModel,
    members: &[TestFunction],
    g: &GEstimate,
    q0: DMatrix<f64>,
) -> Result<GalerkinSystem> {
    let p = members.len();
    if g.nodes.is_empty() {
        return Err(Error::Missing("no ensemble nodes to assemble from".into()));
    }
    if q0.shape() != (p, p) {
        return Err(Error::domain("initial covariance has the wrong size"));
    }
    let mut sys = GalerkinSystem {
        times: Vec::new(),
        a: Vec::new(),
        c: Vec::new(),
        q0,
        residuals: Vec::new(),
        c_clip: Vec::new(),
    };
    for node in &g.nodes {
        let targets = linearized_values(model, members, node);
        let (a, res) = project(members, node, &targets)?;
        let (c, clip) = psd_clip(&rate_at(g, node.step)?);
        sys.times.push(node.t);
        sys.a.push(a);
        sys.c.push(c);
        sys.residuals.push(res);
        sys.c_clip.push(clip);
    }
    Ok(sys)
}

/// Projection of the plain generator, for comparison.
pub fn project_generator(model: &dyn CoefficientModel, members: &[TestFunction], node: &EnsembleNode) -> Result<DMatrix<f64>> {
    Ok(project(members, node, &generator_values(model, members, node))?.0)
}

/// Projection of the linearized operator at one node.
pub fn project_linearized(model: &dyn CoefficientModel, members: &[TestFunction], node: &EnsembleNode) -> Result<(DMatrix<f64>, Vec<f64>)> {
    project(members, node, &linearized_values(model, members, node))
}

impl GalerkinSystem {
    /// Time-independent system.
    pub fn constant(a: DMatrix<f64>, c: DMatrix<f64>, q0: DMatrix<f64>) -> Self {
        let p = a.nrows();
        Self {
            times: vec![0.0],
            a: vec![a],
            c: vec![c],
            q0,
            residuals: vec![vec![0.0; p]],
            c_clip: vec![0.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.q0.nrows()
    }

    /// Linear interpolation between nodes, constant outside.
    fn interp(&self, which: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return which[0].clone();
        }
        if t >= self.times[n - 1] {
            return which[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let l = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        &which[k] * (1.0 - l) + &which[k + 1] * l
    }

    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        self.interp(&self.a, t)
    }

    pub fn c_at(&self, t: f64) -> DMatrix<f64> {
        self.interp(&self.c, t)
    }

    fn check_step(&self, dt: f64) -> Result<()> {
        let rho = self
            .a
            .iter()
            .map(|a| a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if !(dt > 0.0) || dt * rho >= 0.1 {
            return Err(Error::config(format!(
                "dt = {dt} does not resolve the drift (spectral radius {rho:.3}); need dt * radius < 0.1"
            )));
        }
        Ok(())
    }
}

/// Factor `L` with `L L^T = m` after clipping negative eigenvalues.
fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym: DMatrix<f64> = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("covariance factorization failed"));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// `Sigma' = A^T Sigma + Sigma A + C`, `Sigma(0) = Q0`, by RK4; returns `(t, Sigma)` at every step.
pub fn covariance_ode(sys: &GalerkinSystem, t_final: f64, dt: f64) -> Result<Vec<(f64, DMatrix<f64>)>> {
    covariance_ode_from(sys, sys.q0.clone(), 0.0, t_final, dt)
}

/// As [`covariance_ode`] from an arbitrary start.
pub fn covariance_ode_from(sys: &GalerkinSystem, start: DMatrix<f64>, t0: f64, t_final: f64, dt: f64) -> Result<Vec<(f64, DMatrix<f64>)>> {
    sys.check_step(dt)?;
    let steps = ((t_final - t0) / dt).round() as usize;
    let f = |t: f64, s: &DMatrix<f64>| -> DMatrix<f64> {
        let a = sys.a_at(t);
        a.transpose() * s + s * &a + sys.c_at(t)
    };
    let mut s = start;
    let mut out = vec![(t0, s.clone())];
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let k1 = f(t, &s);
        let k2 = f(t + 0.5 * dt, &(&s + &k1 * (0.5 * dt)));
        let k3 = f(t + 0.5 * dt, &(&s + &k2 * (0.5 * dt)));
        let k4 = f(t + dt, &(&s + &k3 * dt));
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        out.push((t0 + (k + 1) as f64 * dt, s.clone()));
    }
    Ok(out)
}

/// Euler–Maruyama paths; returns the state at `t_final` of every path.
pub fn simulate_spde(sys: &GalerkinSystem, t_final: f64, dt: f64, n_paths: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    sys.check_step(dt)?;
    let p = sys.dim();
    let steps = (t_final / dt).round() as usize;
    let l0 = psd_factor(&sys.q0)?;
    let mut drift = Vec::with_capacity(steps);
    let mut noise = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * dt;
        drift.push(sys.a_at(t).transpose());
        noise.push(psd_factor(&sys.c_at(t))?);
    }
    let sq = dt.sqrt();
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut rng = stream(seed, Purpose::Galerkin, &[path]);
            let xi = |rng: &mut rand_chacha::ChaCha8Rng| DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
            let mut c = &l0 * xi(&mut rng);
            for k in 0..steps {
                let z = xi(&mut rng);
                c = &c + &drift[k] * &c * dt + &noise[k] * z * sq;
            }
            c
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluctuation::sample_covariance;
    use crate::measures::WeightedPointCloud;
    use crate::model::{Decoupled, DecoupledParams, HolderProfile, LinRelax, LinRelaxParams, MeasureMoments};
    use crate::test_space::{SpatialMode, ValueFactor};
    use rand::{Rng, SeedableRng};

    fn cov_of(paths: &[DVector<f64>]) -> crate::fluctuation::CovarianceEstimate {
        let rows: Vec<Vec<f64>> = paths.iter().map(|v| v.iter().copied().collect()).collect();
        sample_covariance(&rows).unwrap()
    }

    #[test]
    fn frozen_system_keeps_initial_state() {
        let q0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let sys = GalerkinSystem::constant(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), q0.clone());
        let a = simulate_spde(&sys, 0.0, 0.01, 4, 1).unwrap();
        let b = simulate_spde(&sys, 1.0, 0.01, 4, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-15);
        }
        let ode = covariance_ode(&sys, 1.0, 0.01).unwrap();
        assert!((&ode.last().unwrap().1 - &q0).norm() < 1e-14);
    }

    #[test]
    fn additive_noise_accumulates() {
        let q0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let c = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.2]);
        let sys = GalerkinSystem::constant(DMatrix::zeros(2, 2), c.clone(), q0.clone());
        let expected = &q0 + &c * 1.0;
        let ode = covariance_ode(&sys, 1.0, 0.01).unwrap();
        assert!((&ode.last().unwrap().1 - &expected).norm() < 1e-12);
        let mc = cov_of(&simulate_spde(&sys, 1.0, 0.01, 20_000, 2).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                assert!((mc.value[(i, j)] - expected[(i, j)]).abs() < 3.0 * mc.stderr[(i, j)]);
            }
        }
    }

    #[test]
    fn scalar_lyapunov_matches_closed_form() {
        let (a, c, q, t) = (-0.7, 0.3, 0.8, 1.3);
        let sys = GalerkinSystem::constant(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, c), DMatrix::from_element(1, 1, q));
        let got = covariance_ode(&sys, t, 0.001).unwrap().last().unwrap().1[(0, 0)];
        let e = (2.0 * a * t).exp();
        assert!((got - (e * q + c * (e - 1.0) / (2.0 * a))).abs() < 1e-10);
    }

    #[test]
    fn semigroup_composition() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, -0.2, -0.5]);
        let c = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let sys = GalerkinSystem::constant(a, c, DMatrix::identity(2, 2));
        let full = covariance_ode(&sys, 1.0, 0.005).unwrap();
        let half = covariance_ode(&sys, 0.5, 0.005).unwrap();
        let rest = covariance_ode_from(&sys, half.last().unwrap().1.clone(), 0.5, 1.0, 0.005).unwrap();
        assert!((&full.last().unwrap().1 - &rest.last().unwrap().1).norm() < 1e-10);
    }

    #[test]
    fn random_stable_system_matches_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = 3;
        let a = DMatrix::from_fn(p, p, |i, j| if i == j { -1.0 } else { 0.3 * (rng.random::<f64>() - 0.5) });
        let b = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let c = &b * b.transpose();
        let sys = GalerkinSystem::constant(a, c, DMatrix::identity(p, p) * 0.5);
        let ode = covariance_ode(&sys, 1.0, 0.002).unwrap().last().unwrap().1.clone();
        let paths = simulate_spde(&sys, 1.0, 0.002, 20_000, 4).unwrap();
        let mc = cov_of(&paths);
        for i in 0..p {
            assert!((mc.value[(i, i)] - ode[(i, i)]).abs() < 3.0 * mc.stderr[(i, i)] + 0.01 * ode[(i, i)]);
            let xs: Vec<f64> = paths.iter().map(|v| v[i]).collect();
            let ks = crate::stats::ks_test(&xs, |x| crate::stats::normal_cdf(x, 0.0, ode[(i, i)].sqrt()));
            assert!(ks.p_value > 1e-3);
        }
    }

    #[test]
    fn coarse_step_is_rejected() {
        let sys = GalerkinSystem::constant(DMatrix::from_element(1, 1, -10.0), DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
        assert!(covariance_ode(&sys, 1.0, 0.05).is_err());
        assert!(simulate_spde(&sys, 1.0, 0.05, 1, 0).is_err());
    }

    fn node(model: &dyn CoefficientModel, n: usize, seed: u64) -> EnsembleNode {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c = WeightedPointCloud::new(1, 1);
        for _ in 0..n {
            c.push(&[rng.random::<f64>()], &[3.0 * rng.random::<f64>()], 1.0 / n as f64);
        }
        let m: MeasureMoments = crate::model::moments(model, &c, 0.0).unwrap();
        EnsembleNode { step: 0, t: 0.0, cloud: c, moments: m }
    }

    #[test]
    fn ou_generator_is_reproduced_in_the_span() {
        let (s0, s) = (0.7, 1.5);
        let model = Decoupled::new(DecoupledParams { level: 0.0, c_b: 0.0, s0, profile: HolderProfile::Flat, ..Default::default() }).unwrap();
        let members = vec![
            TestFunction::constant(),
            TestFunction { g: SpatialMode::Constant, h: ValueFactor::Gaussian { powers: vec![0], scale: s } },
            TestFunction { g: SpatialMode::Constant, h: ValueFactor::Gaussian { powers: vec![1], scale: s } },
        ];
        let nd = node(&model, 4000, 5);
        let (a, res) = project_linearized(&model, &members, &nd).unwrap();
        let r = s0 * s0 / (2.0 * s * s);
        assert!(a[(1, 1)].abs() > 0.0);
        assert!((a[(1, 1)] + r).abs() < 0.03 * r);
        assert!((a[(2, 1)] - (1.0 + r)).abs() < 0.03 * (1.0 + r));
        assert!(a.column(0).norm() < 1e-12);
        assert!(res[0] < 1e-12 && res[1] < 1e-8);
    }

    #[test]
    fn without_interaction_the_projection_is_the_generator_projection() {
        let model = Decoupled::new(DecoupledParams::default()).unwrap();
        let members: Vec<TestFunction> = SpatialMode::first(3, 1)
            .into_iter()
            .flat_map(|g| (0..2).map(move |m| TestFunction { g, h: ValueFactor::Gaussian { powers: vec![m], scale: 1.5 } }))
            .collect();
        let nd = node(&model, 3000, 6);
        let (a, _) = project_linearized(&model, &members, &nd).unwrap();
        let b = project_generator(&model, &members, &nd).unwrap();
        assert!((a - b).abs().max() < 1e-10);
    }

    #[test]
    fn ill_conditioned_dictionary_is_reported() {
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let psi = TestFunction { g: SpatialMode::Constant, h: ValueFactor::gaussian(1, 1.5) };
        let members = vec![psi.clone(), psi];
        assert!(project_linearized(&model, &members, &node(&model, 100, 7)).is_err());
    }
}
