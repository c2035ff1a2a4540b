//! Finite-volume reference solver for the one-dimensional, x-homogeneous
//! Fokker–Planck equation on `[0, u_max]` with zero flux at both ends.
//!
//! The measure argument is closed by the current density itself, so the
//! solution is the law of a single McKean–Vlasov particle.

use crate::error::{Error, Result};
use crate::measures::WeightedPointCloud;
use crate::model::{coefficients_from_moments, moments, CoefficientModel, Workspace};

/// Cell-centered grid on `[0, u_max]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpGrid1D {
    pub u_max: f64,
    pub n_cells: usize,
    pub dt: f64,
}

impl Default for FpGrid1D {
    fn default() -> Self {
        Self {
            u_max: 12.0,
            n_cells: 800,
            dt: 2e-4,
        }
    }
}

impl FpGrid1D {
    pub fn du(&self) -> f64 {
        self.u_max / self.n_cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.du()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.u_max > 0.0) || self.n_cells < 2 || !(self.dt > 0.0) {
            return Err(Error::config("fokker-planck grid needs u_max > 0, n_cells >= 2, dt > 0"));
        }
        Ok(())
    }

    /// Cell averages of a law given by its CDF.
    pub fn cell_averages(&self, cdf: impl Fn(f64) -> f64) -> Vec<f64> {
        let h = self.du();
        let mut f: Vec<f64> = (0..self.n_cells)
            .map(|i| (cdf((i + 1) as f64 * h) - cdf(i as f64 * h)) / h)
            .collect();
        let mass: f64 = f.iter().sum::<f64>() * h;
        for v in &mut f {
            *v /= mass;
        }
        f
    }
}

/// Density snapshots of a solve.
#[derive(Debug, Clone)]
pub struct FpTrajectory {
    pub grid: FpGrid1D,
    pub times: Vec<f64>,
    pub densities: Vec<Vec<f64>>,
    /// Mass in the outermost tenth of the domain, maximized over snapshots.
    pub boundary_mass: f64,
}

impl FpTrajectory {
    pub fn mass(&self, k: usize) -> f64 {
        self.densities[k].iter().sum::<f64>() * self.grid.du()
    }

    pub fn last(&self) -> &[f64] {
        self.densities.last().expect("trajectory has the initial snapshot")
    }

    /// CDF of snapshot `k`, linear inside cells.
    pub fn cdf(&self, k: usize) -> impl Fn(f64) -> f64 + '_ {
        let h = self.grid.du();
        let f = &self.densities[k];
        let mut cum = Vec::with_capacity(f.len() + 1);
        cum.push(0.0);
        for v in f {
            cum.push(cum.last().unwrap() + v * h);
        }
        move |u: f64| {
            if u <= 0.0 {
                return 0.0;
            }
            let s = u / h;
            let i = s.floor() as usize;
            if i >= f.len() {
                return cum[f.len()];
            }
            cum[i] + (s - i as f64) * f[i] * h
        }
    }
}

/// Cloud of cell centers weighted by cell masses, placed at `x = 0`.
fn density_cloud(model: &dyn CoefficientModel, grid: &FpGrid1D, f: &[f64]) -> WeightedPointCloud {
    let h = grid.du();
    let x = vec![0.0; model.d()];
    let mut c = WeightedPointCloud::with_capacity(model.d(), 1, f.len());
    for (i, v) in f.iter().enumerate() {
        c.push(&x, &[grid.center(i)], v * h);
    }
    c
}

/// Evolve `f0` (cell averages) to `t_final`, keeping a snapshot every `snapshot_every` steps.
///
/// Drift fluxes are upwinded at interfaces, the diffusive flux of
/// `1/2 d_u (sigma^2 f)` is centered, and both boundary fluxes are zero, so mass
/// is conserved up to rounding. Violating
/// `dt (2 max|b| / du + max sigma^2 / du^2) <= 1` is a configuration error.
pub fn solve_fp_1d(
    model: &dyn CoefficientModel,
    f0: &[f64],
    t_final: f64,
    grid: FpGrid1D,
    snapshot_every: usize,
) -> Result<FpTrajectory> {
    grid.validate()?;
    if model.dv() != 1 || !model.is_x_homogeneous() {
        return Err(Error::config("fokker-planck reference needs an x-homogeneous model with dv = 1"));
    }
    if f0.len() != grid.n_cells {
        return Err(Error::domain("initial density has the wrong number of cells"));
    }
    if f0.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::domain("initial density must be nonnegative"));
    }
    let n_steps = (t_final / grid.dt).round() as usize;
    if ((n_steps as f64) * grid.dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(Error::config("t_final must be a multiple of the fokker-planck dt"));
    }
    let every = snapshot_every.max(1);
    let (n, h) = (grid.n_cells, grid.du());
    let site = model.site(&vec![0.0; model.d()]);
    let mut ws = Workspace::new(model);
    let mut f = f0.to_vec();
    let mut b_face = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n];
    let mut flux = vec![0.0; n + 1];
    let (mut bv, mut sv) = ([0.0], [0.0]);
    let tail = n - n / 10;
    let tail_mass = |f: &[f64]| f[tail..].iter().sum::<f64>() * h;
    let mut out = FpTrajectory {
        grid,
        times: vec![0.0],
        densities: vec![f.clone()],
        boundary_mass: tail_mass(&f),
    };
    for step in 0..n_steps {
        let t = step as f64 * grid.dt;
        let m = moments(model, &density_cloud(model, &grid, &f), t)?;
        let mut bmax: f64 = 0.0;
        let mut smax: f64 = 0.0;
        for k in 1..n {
            coefficients_from_moments(model, &site, t, &[k as f64 * h], &m, &mut ws, &mut bv, &mut sv);
            b_face[k] = bv[0];
            bmax = bmax.max(bv[0].abs());
        }
        for (i, s) in s2.iter_mut().enumerate() {
            coefficients_from_moments(model, &site, t, &[grid.center(i)], &m, &mut ws, &mut bv, &mut sv);
            *s = sv[0] * sv[0];
            smax = smax.max(*s);
        }
        if !(grid.dt * (2.0 * bmax / h + smax / (h * h)) <= 1.0) {
            return Err(Error::config(format!(
                "fokker-planck step violates the CFL bound at t = {t}: dt = {}, max|b| = {bmax}, max sigma^2 = {smax}",
                grid.dt
            )));
        }
        for k in 1..n {
            let b = b_face[k];
            let adv = if b > 0.0 { b * f[k - 1] } else { b * f[k] };
            let diff = -0.5 * (s2[k] * f[k] - s2[k - 1] * f[k - 1]) / h;
            flux[k] = adv + diff;
        }
        flux[0] = 0.0;
        flux[n] = 0.0;
        let r = grid.dt / h;
        for i in 0..n {
            f[i] -= r * (flux[i + 1] - flux[i]);
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("fokker-planck density became non-finite at step {step}")));
        }
        if (step + 1) % every == 0 || step + 1 == n_steps {
            out.times.push((step + 1) as f64 * grid.dt);
            out.boundary_mass = out.boundary_mass.max(tail_mass(&f));
            out.densities.push(f.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeclaredConstants, Homog, HomogParams, Nonlinearity, Site};

    /// `b = drift`, `sigma = s`, no interaction.
    #[derive(Debug)]
    struct Constant {
        drift: f64,
        s: f64,
    }

    impl CoefficientModel for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn d(&self) -> usize {
            1
        }
        fn dv(&self) -> usize {
            1
        }
        fn alpha(&self) -> f64 {
            1.0
        }
        fn b0(&self, _: &Site, _: f64, _: &[f64], out: &mut [f64]) {
            out[0] = self.drift;
        }
        fn sigma0(&self, _: &Site, _: f64, _: &[f64], out: &mut [f64]) {
            out[0] = self.s;
        }
        fn b1_rank(&self) -> usize {
            0
        }
        fn b1_left(&self, _: &Site, _: f64, _: &[f64], _: &mut [f64]) {}
        fn b1_right(&self, _: &Site, _: f64, _: &[f64], _: &mut [f64]) {}
        fn sigma1_rank(&self) -> usize {
            0
        }
        fn sigma1_left(&self, _: &Site, _: f64, _: &[f64], _: &mut [f64]) {}
        fn sigma1_right(&self, _: &Site, _: f64, _: &[f64], _: &mut [f64]) {}
        fn phi(&self, _: f64) -> f64 {
            0.0
        }
        fn phi_dot(&self, _: f64) -> f64 {
            0.0
        }
        fn is_x_homogeneous(&self) -> bool {
            true
        }
        fn declared(&self) -> DeclaredConstants {
            DeclaredConstants {
                regularity_b: 0.0,
                regularity_sigma: 0.0,
                growth_b: self.drift.abs(),
                growth_sigma: self.s,
            }
        }
    }

    fn half_normal(grid: &FpGrid1D) -> Vec<f64> {
        grid.cell_averages(|u| 2.0 * crate::stats::normal_cdf(u, 0.0, 1.0) - 1.0)
    }

    #[test]
    fn no_motion_leaves_density_unchanged() {
        let grid = FpGrid1D { u_max: 8.0, n_cells: 200, dt: 0.01 };
        let f0 = half_normal(&grid);
        let tr = solve_fp_1d(&Constant { drift: 0.0, s: 0.0 }, &f0, 1.0, grid, 10).unwrap();
        for (a, b) in tr.last().iter().zip(&f0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wall_drift_relaxes_to_exponential() {
        let grid = FpGrid1D { u_max: 12.0, n_cells: 800, dt: 2e-4 };
        let s: f64 = 1.0;
        let f0 = half_normal(&grid);
        let tr = solve_fp_1d(&Constant { drift: -1.0, s }, &f0, 10.0, grid, 5000).unwrap();
        let rate = 2.0 / (s * s);
        let norm = (1.0 - (-rate * grid.u_max).exp()) / rate;
        let h = grid.du();
        let l1: f64 = tr
            .last()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - (-rate * grid.center(i)).exp() / norm).abs() * h)
            .sum();
        assert!(l1 < 0.02, "L1 = {l1}");
        for k in 0..tr.densities.len() {
            assert!((tr.mass(k) - 1.0).abs() < 1e-10);
            assert!(tr.densities[k].iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn oversized_step_is_a_config_error() {
        let grid = FpGrid1D { u_max: 12.0, n_cells: 800, dt: 0.01 };
        let f0 = half_normal(&grid);
        let err = solve_fp_1d(&Constant { drift: -1.0, s: 1.0 }, &f0, 0.1, grid, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn self_consistent_solve_conserves_mass() {
        let model = Homog::new(HomogParams { phi: Nonlinearity::Tanh, ..Default::default() }).unwrap();
        let grid = FpGrid1D { u_max: 12.0, n_cells: 400, dt: 5e-4 };
        let f0 = half_normal(&grid);
        let tr = solve_fp_1d(&model, &f0, 1.0, grid, 200).unwrap();
        assert_eq!(tr.times.len(), 11);
        assert!(tr.densities.iter().flatten().all(|v| *v >= 0.0));
        for k in 0..tr.densities.len() {
            assert!((tr.mass(k) - 1.0).abs() < 1e-10);
        }
        assert!(tr.boundary_mass < 1e-8);
        let cdf = tr.cdf(tr.densities.len() - 1);
        assert!((cdf(grid.u_max) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_x_dependent_models() {
        let m = crate::model::LinRelax::new(Default::default()).unwrap();
        let grid = FpGrid1D::default();
        assert!(solve_fp_1d(&m, &vec![0.0; grid.n_cells], 0.1, grid, 1).is_err());
    }
}
