//! Spatially correlated, temporally white Gaussian noise on the periodic cube.
//!
//! The field at a point is the convolution of a white-noise sheet with the
//! rescaled mollifier `rho_eps`. Numerically the sheet is a set of Gaussian
//! atoms on an auxiliary periodic grid of spacing `h <= eps/4`; each location
//! owns a fixed stencil of kernel weights normalized to unit sum of squares,
//! so every single-point increment has variance exactly `dt`.

use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, gauss_legendre_on};
use crate::rng::{stream, Purpose};

/// Shape of the radial profile `rho(z) = p(|z|)`, supported in the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadialProfile {
    /// `(1 - r^2)^2`
    #[default]
    Biweight,
    /// `(1 - r^2)^3`
    Triweight,
}

impl RadialProfile {
    fn exponent(self) -> i32 {
        match self {
            RadialProfile::Biweight => 2,
            RadialProfile::Triweight => 3,
        }
    }
}

/// Radial mollifier on `R^d` together with its normalization `C_rho = (int rho^2)^-1`.
#[derive(Debug, Clone, Copy)]
pub struct Mollifier {
    d: usize,
    profile: RadialProfile,
    c_rho: f64,
}

impl Mollifier {
    pub fn new(d: usize, profile: RadialProfile) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("mollifier dimension must be positive"));
        }
        // int_{R^d} (1-|z|^2)^{2q} dz = |S^{d-1}| * B(d/2, 2q+1) / 2
        let m = 2.0 * profile.exponent() as f64;
        let half_d = d as f64 / 2.0;
        let ln_sphere = std::f64::consts::LN_2 + half_d * std::f64::consts::PI.ln() - ln_gamma(half_d);
        let ln_beta = ln_gamma(half_d) + ln_gamma(m + 1.0) - ln_gamma(half_d + m + 1.0);
        let integral = (ln_sphere + ln_beta).exp() / 2.0;
        Ok(Self {
            d,
            profile,
            c_rho: 1.0 / integral,
        })
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn profile(&self) -> RadialProfile {
        self.profile
    }

    /// `C_rho = (int rho^2)^{-1}`.
    pub fn c_rho(&self) -> f64 {
        self.c_rho
    }

    /// Profile as a function of `r^2`.
    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        if r2 >= 1.0 {
            0.0
        } else {
            (1.0 - r2).powi(self.profile.exponent())
        }
    }

    /// `rho(z)`.
    pub fn eval(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.d);
        self.eval_sq(z.iter().map(|v| v * v).sum())
    }

    /// `R^eps(x) = C_rho int rho(z + x/eps) rho(z) dz`.
    pub fn correlation(&self, x: &[f64], epsilon: f64) -> Result<f64> {
        if !(epsilon > 0.0) {
            return Err(Error::domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if x.len() != self.d {
            return Err(Error::domain("displacement dimension mismatch"));
        }
        let a = x.iter().map(|v| v * v).sum::<f64>().sqrt() / epsilon;
        Ok(self.correlation_scaled(a))
    }

    /// Correlation as a function of the scaled separation `a = |x| / eps`.
    pub fn correlation_scaled(&self, a: f64) -> f64 {
        if a >= 2.0 {
            return 0.0;
        }
        self.c_rho * self.overlap_integral(a)
    }

    /// `int rho(z + a e_1) rho(z) dz` by fixed-order Gauss–Legendre.
    fn overlap_integral(&self, a: f64) -> f64 {
        let q = self.profile.exponent();
        if self.d == 1 {
            // Polynomial integrand of degree 4q on the overlap interval: exact.
            let (lo, hi) = ((-1.0f64).max(-1.0 - a), 1.0f64.min(1.0 - a));
            let (z, w) = gauss_legendre_on(2 * q as usize + 1, lo, hi);
            return z
                .iter()
                .zip(&w)
                .map(|(&t, &wt)| wt * self.eval_sq(t * t) * self.eval_sq((t + a) * (t + a)))
                .sum();
        }
        // Along e_1 the transverse radius is bounded by both balls; the two
        // constraints swap at z_1 = -a/2.
        let k = self.d - 2;
        let ln_sphere = std::f64::consts::LN_2 + (k as f64 + 1.0) / 2.0 * std::f64::consts::PI.ln()
            - ln_gamma((k as f64 + 1.0) / 2.0);
        let sphere = ln_sphere.exp();
        let (rn, rw) = gauss_legendre(((4 * q as usize + k) / 2) + 2);
        let inner = |z1: f64| -> f64 {
            let c0 = 1.0 - z1 * z1;
            let c1 = 1.0 - (z1 + a) * (z1 + a);
            let rmax2 = c0.min(c1);
            if rmax2 <= 0.0 {
                return 0.0;
            }
            let rmax = rmax2.sqrt();
            let mut s = 0.0;
            for (&t, &wt) in rn.iter().zip(&rw) {
                let r = 0.5 * rmax * (t + 1.0);
                let r2 = r * r;
                let f = (c0 - r2).powi(q) * (c1 - r2).powi(q);
                s += 0.5 * rmax * wt * f * r.powi(k as i32);
            }
            sphere * s
        };
        let mid = -0.5 * a;
        let lo = (-1.0f64).max(-1.0 - a);
        let hi = 1.0f64.min(1.0 - a);
        let mut total = 0.0;
        for (p, q_) in [(lo, mid), (mid, hi)] {
            if q_ > p {
                let (z, w) = gauss_legendre_on(32, p, q_);
                total += z.iter().zip(&w).map(|(&t, &wt)| wt * inner(t)).sum::<f64>();
            }
        }
        total
    }
}

/// `rho(z)` with the default biweight profile in dimension `z.len()`.
pub fn mollifier_eval(z: &[f64]) -> f64 {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - r2).powi(2)
    }
}

/// `R^eps(x)` for the default biweight mollifier in dimension `x.len()`.
pub fn correlation_r(x: &[f64], epsilon: f64) -> Result<f64> {
    Mollifier::new(x.len(), RadialProfile::Biweight)?.correlation(x, epsilon)
}

/// Signed displacement `a - b` wrapped onto the torus, in `[-1/2, 1/2)`.
#[inline]
pub fn torus_delta(a: f64, b: f64) -> f64 {
    let mut v = a - b;
    v -= v.round();
    v
}

/// Reduce a coordinate to `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Parameters of the correlated field.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub seed: u64,
    pub dv: usize,
    /// Auxiliary grid spacing; defaults to `epsilon / 8`.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub profile: RadialProfile,
}

#[derive(Debug, Clone)]
struct Stencil {
    cells: Vec<u32>,
    weights: Vec<f64>,
}

/// Generator of `Delta W^eps` on a fixed set of locations.
///
/// Copy `k` of the field at time step `n` is a pure function of
/// `(seed, k, n)`: the atoms are drawn from the stream keyed by that tuple,
/// ordered by direction and then by cell index.
#[derive(Debug, Clone)]
pub struct NoiseFieldSampler {
    config: NoiseConfig,
    d: usize,
    mollifier: Mollifier,
    cells_per_side: usize,
    n_cells: usize,
    locations: Vec<f64>,
    stencils: Vec<Stencil>,
}

impl NoiseFieldSampler {
    /// `locations` is a flat array of `n * d` coordinates.
    pub fn new(config: NoiseConfig, d: usize, locations: &[f64]) -> Result<Self> {
        if d == 0 || !locations.len().is_multiple_of(d) {
            return Err(Error::config("locations must be a flat array of d-dimensional points"));
        }
        if !(config.epsilon > 0.0 && config.epsilon <= 0.5) {
            return Err(Error::config(format!(
                "epsilon must lie in (0, 0.5], got {}",
                config.epsilon
            )));
        }
        if !(config.dt > 0.0) || config.dv == 0 {
            return Err(Error::config("dt must be positive and dv at least 1"));
        }
        let h_req = config.h.unwrap_or(config.epsilon / 8.0);
        if !(h_req > 0.0) || h_req > config.epsilon / 4.0 + 1e-15 {
            return Err(Error::config(format!(
                "auxiliary spacing h = {h_req} under-resolves the correlation (need h <= eps/4 = {})",
                config.epsilon / 4.0
            )));
        }
        let cells_per_side = (1.0 / h_req).ceil() as usize;
        let n_cells = cells_per_side
            .checked_pow(d as u32)
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| Error::config("auxiliary grid too large"))?;
        let mollifier = Mollifier::new(d, config.profile)?;
        let locations: Vec<f64> = locations.iter().map(|&x| wrap_unit(x)).collect();
        let mut sampler = Self {
            config,
            d,
            mollifier,
            cells_per_side,
            n_cells,
            locations,
            stencils: Vec::new(),
        };
        sampler.stencils = (0..sampler.n_locations())
            .map(|i| sampler.build_stencil(i))
            .collect();
        Ok(sampler)
    }

    fn build_stencil(&self, i: usize) -> Stencil {
        let x = &self.locations[i * self.d..(i + 1) * self.d];
        let n = self.cells_per_side as i64;
        let h = 1.0 / n as f64;
        let eps = self.config.epsilon;
        let reach = (eps / h).ceil() as i64 + 1;
        // Candidate cell range per axis around the owning cell.
        let base: Vec<i64> = x.iter().map(|&c| (c / h).floor() as i64).collect();
        let span = (2 * reach + 1) as usize;
        let total = span.pow(self.d as u32);
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for lin in 0..total {
            let mut rem = lin;
            let mut cell: u64 = 0;
            let mut r2 = 0.0;
            let mut stride: u64 = 1;
            for ax in 0..self.d {
                let off = (rem % span) as i64 - reach;
                rem /= span;
                let c = (base[ax] + off).rem_euclid(n);
                let center = (c as f64 + 0.5) * h;
                let delta = torus_delta(center, x[ax]) / eps;
                r2 += delta * delta;
                cell += c as u64 * stride;
                stride *= n as u64;
            }
            let w = self.mollifier.eval_sq(r2);
            if w > 0.0 && seen.insert(cell) {
                cells.push(cell as u32);
                weights.push(w);
            }
        }
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        for w in &mut weights {
            *w /= norm;
        }
        Stencil { cells, weights }
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.config
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len() / self.d
    }

    pub fn location(&self, i: usize) -> &[f64] {
        &self.locations[i * self.d..(i + 1) * self.d]
    }

    pub fn auxiliary_spacing(&self) -> f64 {
        1.0 / self.cells_per_side as f64
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Same-time covariance of the discrete field at locations `i`, `j`, divided by `dt`.
    pub fn discrete_correlation(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.stencils[i], &self.stencils[j]);
        let mut s = 0.0;
        for (ca, wa) in a.cells.iter().zip(&a.weights) {
            if let Some(pos) = b.cells.iter().position(|cb| cb == ca) {
                s += wa * b.weights[pos];
            }
        }
        s
    }

    /// Adds `sum_i a_i w_ic` into `out[c]` for every auxiliary cell `c`.
    ///
    /// Since the discrete correlation factors as `sum_c w_ic w_jc`, the form
    /// `sum_ij a_i b_j R_ij` equals the dot product of the two projections.
    pub fn project(&self, a: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_cells);
        for (st, &ai) in self.stencils.iter().zip(a) {
            if ai == 0.0 {
                continue;
            }
            for (&c, &w) in st.cells.iter().zip(&st.weights) {
                out[c as usize] += ai * w;
            }
        }
    }

    /// Increments of field copy `copy` at step `step`, laid out `[location][direction]`.
    pub fn sample_increments(&self, copy: u64, step: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_locations() * self.config.dv];
        let mut scratch = Vec::new();
        self.fill_increments(copy, step, &mut out, &mut scratch);
        out
    }

    /// Allocation-free variant of [`Self::sample_increments`].
    pub fn fill_increments(&self, copy: u64, step: u64, out: &mut [f64], scratch: &mut Vec<f64>) {
        let dv = self.config.dv;
        debug_assert_eq!(out.len(), self.n_locations() * dv);
        scratch.resize(self.n_cells * dv, 0.0);
        let mut rng = stream(self.config.seed, Purpose::FieldNoise, &[copy, step]);
        for z in scratch.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
        let scale = self.config.dt.sqrt();
        for (i, st) in self.stencils.iter().enumerate() {
            for beta in 0..dv {
                let atoms = &scratch[beta * self.n_cells..(beta + 1) * self.n_cells];
                let mut s = 0.0;
                for (&c, &w) in st.cells.iter().zip(&st.weights) {
                    s += w * atoms[c as usize];
                }
                out[i * dv + beta] = scale * s;
            }
        }
    }
}

/// Independent `N(0, dt)` increments per copy: the exact single-point law of the field.
///
/// Used by ensembles that only need the one-particle law, where each copy
/// sits at a single location and the spatial correlation never enters.
/// Copies are grouped in fixed blocks of [`MarginalNoise::BLOCK`], one stream
/// per `(step, block)`.
#[derive(Debug, Clone, Copy)]
pub struct MarginalNoise {
    pub seed: u64,
    pub dt: f64,
    pub dv: usize,
}

impl MarginalNoise {
    pub const BLOCK: usize = 1024;

    /// Fill increments for copies `block * BLOCK ..` into `out` (`[copy][direction]`).
    pub fn fill_block(&self, step: u64, block: usize, out: &mut [f64]) {
        let mut rng = stream(self.seed, Purpose::MarginalNoise, &[step, block as u64]);
        let scale = self.dt.sqrt();
        for z in out.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *z = scale * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::composite_gauss_legendre;

    #[test]
    fn mollifier_examples() {
        assert_eq!(mollifier_eval(&[0.0]), 1.0);
        assert_eq!(mollifier_eval(&[1.2]), 0.0);
        assert_eq!(mollifier_eval(&[0.0, 1.2]), 0.0);
        assert!((mollifier_eval(&[0.5]) - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn normalization_matches_quadrature() {
        // d = 1: int (1-z^2)^4 = 256/315.
        let m = Mollifier::new(1, RadialProfile::Biweight).unwrap();
        assert!((m.c_rho() - 315.0 / 256.0).abs() < 1e-12);
        // d = 2 by polar quadrature.
        let m2 = Mollifier::new(2, RadialProfile::Biweight).unwrap();
        let (r, w) = composite_gauss_legendre(10, 4, 0.0, 1.0);
        let integral: f64 = r
            .iter()
            .zip(&w)
            .map(|(&r, &w)| w * 2.0 * std::f64::consts::PI * r * m2.eval_sq(r * r).powi(2))
            .sum();
        assert!((m2.c_rho() * integral - 1.0).abs() < 1e-8);
    }

    #[test]
    fn correlation_at_origin_is_one() {
        for d in 1..=3 {
            let m = Mollifier::new(d, RadialProfile::Biweight).unwrap();
            let zero = vec![0.0; d];
            for eps in [0.05, 0.1, 0.3] {
                let r = m.correlation(&zero, eps).unwrap();
                assert!((r - 1.0).abs() < 1e-8, "d={d} eps={eps} R(0)={r}");
            }
        }
    }

    #[test]
    fn correlation_vanishes_beyond_two_eps() {
        assert_eq!(correlation_r(&[0.25], 0.1).unwrap(), 0.0);
        assert_eq!(correlation_r(&[0.2, 0.1], 0.1).unwrap(), 0.0);
        assert!(correlation_r(&[0.19], 0.1).unwrap() > 0.0);
    }

    #[test]
    fn correlation_rejects_nonpositive_epsilon() {
        assert!(matches!(correlation_r(&[0.1], 0.0), Err(Error::Domain(_))));
        assert!(matches!(correlation_r(&[0.1], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn correlation_at_eps_matches_trapezoid_oracle() {
        // Trapezoid with step 1e-6 on C_rho int rho(z+1) rho(z) dz over [-1, 0].
        let n = 1_000_000usize;
        let step = 1.0 / n as f64;
        let f = |z: f64| {
            let a = (1.0 - z * z).max(0.0).powi(2);
            let b = (1.0 - (z + 1.0) * (z + 1.0)).max(0.0).powi(2);
            a * b
        };
        let mut s = 0.5 * (f(-1.0) + f(0.0));
        for k in 1..n {
            s += f(-1.0 + k as f64 * step);
        }
        let oracle = 315.0 / 256.0 * s * step;
        let r = correlation_r(&[0.1], 0.1).unwrap();
        assert!((r - oracle).abs() < 1e-6, "R={r} oracle={oracle}");
    }

    #[test]
    fn correlation_is_symmetric_and_radial() {
        let m = Mollifier::new(2, RadialProfile::Biweight).unwrap();
        let a = m.correlation(&[0.05, 0.03], 0.1).unwrap();
        let b = m.correlation(&[-0.05, -0.03], 0.1).unwrap();
        let c = m.correlation(&[0.03, -0.05], 0.1).unwrap();
        assert_eq!(a, b);
        assert!((a - c).abs() < 1e-14);
    }

    #[test]
    fn rejects_under_resolved_grid() {
        let cfg = NoiseConfig {
            epsilon: 0.1,
            dt: 1e-2,
            seed: 1,
            dv: 1,
            h: Some(0.03),
            profile: RadialProfile::Biweight,
        };
        assert!(matches!(NoiseFieldSampler::new(cfg, 1, &[0.5]), Err(Error::Config(_))));
    }

    fn sampler(locs: &[f64], dt: f64, seed: u64) -> NoiseFieldSampler {
        let cfg = NoiseConfig {
            epsilon: 0.1,
            dt,
            seed,
            dv: 1,
            h: None,
            profile: RadialProfile::Biweight,
        };
        NoiseFieldSampler::new(cfg, 1, locs).unwrap()
    }

    #[test]
    fn single_point_variance_is_exact_in_the_discrete_kernel() {
        let s = sampler(&[0.0, 0.123, 0.77], 1e-2, 3);
        for i in 0..3 {
            assert!((s.discrete_correlation(i, i) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn periodic_locations_share_increments() {
        let s = sampler(&[0.375, 1.375, -0.625], 1e-2, 9);
        let w = s.sample_increments(2, 5);
        assert_eq!(w[0], w[1]);
        assert_eq!(w[0], w[2]);
    }

    #[test]
    fn single_location_increments_are_brownian() {
        let dt = 1e-2;
        let s = sampler(&[0.3], dt, 11);
        let n = 10_000;
        let samples: Vec<f64> = (0..n).map(|k| s.sample_increments(0, k)[0] / dt.sqrt()).collect();
        let var = samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "variance/dt = {var}");
        let ks = crate::stats::ks_test(&samples, |x| crate::stats::normal_cdf(x, 0.0, 1.0));
        assert!(ks.p_value > 0.01, "KS p = {}", ks.p_value);
    }

    #[test]
    fn far_locations_are_uncorrelated_and_near_ones_follow_r() {
        let dt = 1e-2;
        let s = sampler(&[0.2, 0.5, 0.3], dt, 13);
        let n = 10_000u64;
        let (mut s01, mut s02) = (0.0, 0.0);
        for k in 0..n {
            let w = s.sample_increments(0, k);
            s01 += w[0] * w[1];
            s02 += w[0] * w[2];
        }
        let c01 = s01 / (n as f64 * dt);
        let c02 = s02 / (n as f64 * dt);
        assert!(c01.abs() < 0.03, "far correlation {c01}");
        let r = correlation_r(&[0.1], 0.1).unwrap();
        assert!((c02 - r).abs() < 0.05, "near correlation {c02} vs R {r}");
    }

    #[test]
    fn increment_difference_variance_scales_quadratically() {
        let eps = 0.1;
        let ratios = [0.05, 0.08, 0.12, 0.2, 0.3, 0.5];
        let m = Mollifier::new(1, RadialProfile::Biweight).unwrap();
        let xs: Vec<f64> = ratios.iter().map(|r: &f64| r.ln()).collect();
        let ys: Vec<f64> = ratios
            .iter()
            .map(|&r| (2.0 - 2.0 * m.correlation(&[r * eps], eps).unwrap()).ln())
            .collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn discrete_kernel_resolves_the_correlation() {
        let s = sampler(&[0.2, 0.25, 0.3, 0.37], 1e-2, 1);
        for (j, dx) in [(1, 0.05), (2, 0.1), (3, 0.17)] {
            let r = correlation_r(&[dx], 0.1).unwrap();
            assert!((s.discrete_correlation(0, j) - r).abs() < 0.01);
        }
    }

    #[test]
    fn marginal_noise_is_deterministic_per_block() {
        let mn = MarginalNoise { seed: 4, dt: 0.01, dv: 1 };
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        mn.fill_block(3, 1, &mut a);
        mn.fill_block(3, 1, &mut b);
        assert_eq!(a, b);
        mn.fill_block(4, 1, &mut b);
        assert_ne!(a, b);
    }
}
