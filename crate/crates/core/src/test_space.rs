//! No-flux test functions `psi(x,u) = g(x) h(u)`, their derivatives, weighted
//! Sobolev surrogate norms, and the generator and its chord linearization.
//!
//! Value factors are products of `f_m(u) = (u/s)^{2m} exp(-u^2 / 2 s^2)`, even
//! in every coordinate, so the normal derivative on each face of the orthant
//! vanishes identically and the reflection term drops out of Itô's formula.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::measures::WeightedPointCloud;
use crate::model::{interaction_args, CoefficientModel, MeasureMoments, Site, Workspace};
use crate::quadrature::{composite_gauss_legendre, gauss_legendre_on};

/// Real Fourier mode on the torus, normalized in `L^2(Q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMode {
    Constant,
    Cos { axis: usize, freq: u32 },
    Sin { axis: usize, freq: u32 },
}

impl SpatialMode {
    /// The first `count` modes: constant, then cosine/sine pairs by frequency and axis.
    pub fn first(count: usize, d: usize) -> Vec<Self> {
        let mut out = vec![SpatialMode::Constant];
        let mut freq = 1;
        while out.len() < count {
            for axis in 0..d {
                out.push(SpatialMode::Cos { axis, freq });
                out.push(SpatialMode::Sin { axis, freq });
            }
            freq += 1;
        }
        out.truncate(count);
        out
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            SpatialMode::Constant => 1.0,
            SpatialMode::Cos { axis, freq } => 2f64.sqrt() * (2.0 * PI * freq as f64 * x[axis]).cos(),
            SpatialMode::Sin { axis, freq } => 2f64.sqrt() * (2.0 * PI * freq as f64 * x[axis]).sin(),
        }
    }
}

/// `h(u) = prod_beta f_{m_beta}(u_beta)`, or `h = 1`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueFactor {
    One,
    Gaussian { powers: Vec<u32>, scale: f64 },
}

/// `(f, f', f'')` of `f_m(u) = z^{2m} e^{-z^2/2}`, `z = u / s`.
#[inline]
fn radial(m: u32, s: f64, u: f64) -> (f64, f64, f64) {
    let z = u / s;
    let e = (-0.5 * z * z).exp();
    let m2 = 2 * m as i32;
    let zp = |k: i32| if k < 0 { 0.0 } else { z.powi(k) };
    let f = zp(m2) * e;
    let f1 = (m2 as f64 * zp(m2 - 1) - zp(m2 + 1)) * e / s;
    let f2 = (m2 as f64 * (m2 as f64 - 1.0) * zp(m2 - 2) - (2.0 * m2 as f64 + 1.0) * zp(m2) + zp(m2 + 2)) * e / (s * s);
    (f, f1, f2)
}

impl ValueFactor {
    pub fn gaussian(dv: usize, scale: f64) -> Self {
        ValueFactor::Gaussian {
            powers: vec![0; dv],
            scale,
        }
    }

    /// Value, gradient and Hessian (row-major `dv x dv`).
    pub fn jet(&self, u: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let dv = u.len();
        match self {
            ValueFactor::One => {
                grad.fill(0.0);
                hess.fill(0.0);
                1.0
            }
            ValueFactor::Gaussian { powers, scale } => {
                let mut f = [(0.0, 0.0, 0.0); 8];
                let mut fv = Vec::new();
                let parts: &mut [(f64, f64, f64)] = if dv <= 8 {
                    &mut f[..dv]
                } else {
                    fv.resize(dv, (0.0, 0.0, 0.0));
                    &mut fv
                };
                for b in 0..dv {
                    parts[b] = radial(powers[b], *scale, u[b]);
                }
                let prod_except = |skip: &[usize]| -> f64 {
                    (0..dv).filter(|b| !skip.contains(b)).map(|b| parts[b].0).product()
                };
                for b in 0..dv {
                    grad[b] = parts[b].1 * prod_except(&[b]);
                    for c in 0..dv {
                        hess[b * dv + c] = if b == c {
                            parts[b].2 * prod_except(&[b])
                        } else {
                            parts[b].1 * parts[c].1 * prod_except(&[b, c])
                        };
                    }
                }
                prod_except(&[])
            }
        }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            ValueFactor::One => 1.0,
            ValueFactor::Gaussian { powers, scale } => {
                powers.iter().zip(u).map(|(&m, &ub)| radial(m, *scale, ub).0).product()
            }
        }
    }

    /// Value, gradient and Hessian diagonal.
    #[inline]
    fn first_and_diag(&self, u: &[f64], grad: &mut [f64], diag: &mut [f64]) -> f64 {
        match self {
            ValueFactor::One => {
                grad.fill(0.0);
                diag.fill(0.0);
                1.0
            }
            ValueFactor::Gaussian { powers, scale } => {
                let dv = u.len();
                if dv == 1 {
                    let (f, f1, f2) = radial(powers[0], *scale, u[0]);
                    grad[0] = f1;
                    diag[0] = f2;
                    return f;
                }
                let parts: Vec<(f64, f64, f64)> = (0..dv).map(|b| radial(powers[b], *scale, u[b])).collect();
                let mut total = 1.0;
                for p in &parts {
                    total *= p.0;
                }
                for b in 0..dv {
                    let rest: f64 = (0..dv).filter(|&c| c != b).map(|c| parts[c].0).product();
                    grad[b] = parts[b].1 * rest;
                    diag[b] = parts[b].2 * rest;
                }
                total
            }
        }
    }
}

/// Member `psi(x,u) = g(x) h(u)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestFunction {
    pub g: SpatialMode,
    pub h: ValueFactor,
}

/// Derivative data of a member at one point.
#[derive(Debug, Clone, PartialEq)]
pub enum Derivative {
    Value(f64),
    Gradient(Vec<f64>),
    /// Row-major `dv x dv`.
    Hessian(Vec<f64>),
}

impl TestFunction {
    pub fn constant() -> Self {
        Self {
            g: SpatialMode::Constant,
            h: ValueFactor::One,
        }
    }

    pub fn value(&self, x: &[f64], u: &[f64]) -> f64 {
        self.g.eval(x) * self.h.value(u)
    }

    /// `D_u^j psi(x,u)` for `j` in `{0, 1, 2}`.
    pub fn eval_v(&self, j: usize, x: &[f64], u: &[f64]) -> Result<Derivative> {
        let dv = u.len();
        let gx = self.g.eval(x);
        let mut grad = vec![0.0; dv];
        let mut hess = vec![0.0; dv * dv];
        let v = self.h.jet(u, &mut grad, &mut hess);
        Ok(match j {
            0 => Derivative::Value(gx * v),
            1 => Derivative::Gradient(grad.into_iter().map(|a| gx * a).collect()),
            2 => Derivative::Hessian(hess.into_iter().map(|a| gx * a).collect()),
            _ => return Err(Error::domain("derivative order must be 0, 1 or 2")),
        })
    }

    /// Value, gradient and Hessian diagonal in one pass.
    #[inline]
    pub fn jet_diag(&self, x: &[f64], u: &[f64], grad: &mut [f64], diag: &mut [f64]) -> f64 {
        let gx = self.g.eval(x);
        let v = self.h.first_and_diag(u, grad, diag);
        for a in grad.iter_mut().chain(diag.iter_mut()) {
            *a *= gx;
        }
        gx * v
    }

    /// Largest `|d_beta psi|` over `n` boundary points with `u_beta = 0`.
    pub fn max_boundary_flux(&self, d: usize, dv: usize, n: usize) -> f64 {
        let mut worst: f64 = 0.0;
        let mut grad = vec![0.0; dv];
        let mut hess = vec![0.0; dv * dv];
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64;
            let x: Vec<f64> = (0..d).map(|a| (t * (a as f64 + 1.7)).fract()).collect();
            for beta in 0..dv {
                let u: Vec<f64> = (0..dv).map(|c| if c == beta { 0.0 } else { 5.0 * t + 0.1 * c as f64 }).collect();
                self.h.jet(&u, &mut grad, &mut hess);
                worst = worst.max((self.g.eval(&x) * grad[beta]).abs());
            }
        }
        worst
    }
}

/// Exponent bookkeeping of the weighted spaces (metadata; only `theta2` enters the Gram weight).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Exponents {
    pub kappa1: f64,
    pub kappa2: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub e_alpha: f64,
}

impl Exponents {
    /// Defaults with `a^+ = a + gamma`.
    pub fn defaults(d: usize, dv: usize, alpha: f64, gamma: f64) -> Self {
        let half = dv as f64 / 2.0;
        let kappa1 = 1.0 + half + gamma;
        let theta2 = 1.0 + half + gamma;
        Self {
            kappa1,
            kappa2: kappa1 + 2f64.max(half + gamma),
            theta1: theta2 + 2f64.max(half + gamma),
            theta2,
            e_alpha: alpha + d as f64 / 2.0 + gamma,
        }
    }
}

/// Tensor quadrature nodes and weights on `[0, U]^dv`.
#[derive(Debug, Clone)]
struct OrthantRule {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl OrthantRule {
    fn new(dv: usize, upper: f64) -> Self {
        let (panels, order) = match dv {
            1 => (96, 10),
            2 => (32, 8),
            _ => (8, 6),
        };
        let (x1, w1) = composite_gauss_legendre(order, panels, 0.0, upper);
        let mut nodes = vec![Vec::new()];
        let mut weights = vec![1.0];
        for _ in 0..dv {
            let mut nn = Vec::with_capacity(nodes.len() * x1.len());
            let mut nw = Vec::with_capacity(nodes.len() * x1.len());
            for (p, w) in nodes.iter().zip(&weights) {
                for (x, wx) in x1.iter().zip(&w1) {
                    let mut q = p.clone();
                    q.push(*x);
                    nn.push(q);
                    nw.push(w * wx);
                }
            }
            nodes = nn;
            weights = nw;
        }
        Self { nodes, weights }
    }
}

/// `||h||^2 = sum_{j<=k} int |D^j h|^2 / (1 + |u|^{2 theta}) du` over the orthant.
fn value_norm_sq(h: &ValueFactor, h2: &ValueFactor, dv: usize, k: usize, theta: f64, rule: &OrthantRule) -> f64 {
    let mut g1 = vec![0.0; dv];
    let mut g2 = vec![0.0; dv];
    let mut hs1 = vec![0.0; dv * dv];
    let mut hs2 = vec![0.0; dv * dv];
    let mut acc = 0.0;
    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
        let a = h.jet(u, &mut g1, &mut hs1);
        let b = h2.jet(u, &mut g2, &mut hs2);
        let mut s = a * b;
        if k >= 1 {
            s += g1.iter().zip(&g2).map(|(p, q)| p * q).sum::<f64>();
        }
        if k >= 2 {
            s += hs1.iter().zip(&hs2).map(|(p, q)| p * q).sum::<f64>();
        }
        let r2: f64 = u.iter().map(|v| v * v).sum();
        acc += w * s / (1.0 + r2.powf(theta));
    }
    acc
}

fn value_upper(h: &ValueFactor) -> f64 {
    match h {
        ValueFactor::One => 50.0,
        ValueFactor::Gaussian { powers, scale } => {
            // Beyond z = 9 + sqrt(4 m) the squared integrand is below 1e-14.
            let m = powers.iter().copied().max().unwrap_or(0) as f64;
            scale * (9.0 + (4.0 * m).sqrt())
        }
    }
}

/// Weighted Sobolev surrogate norm of a member (spatial factor averaged over `Q`).
pub fn weighted_norm(psi: &TestFunction, dv: usize, k: usize, theta: f64) -> f64 {
    // Every spatial mode has unit L^2(Q) norm.
    let rule = OrthantRule::new(dv, value_upper(&psi.h));
    (value_norm_sq(&psi.h, &psi.h, dv, k, theta, &rule)).max(0.0).sqrt()
}

/// Dictionary configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionarySpec {
    pub p_x: usize,
    pub p_u: usize,
    pub scale: f64,
    /// Offset in the `+` convention of the exponent defaults.
    pub gamma: f64,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            p_x: 3,
            p_u: 2,
            scale: 1.5,
            gamma: 0.01,
        }
    }
}

/// Products of spatial modes and value factors with their Gram structure.
#[derive(Debug, Clone)]
pub struct TestFunctionDictionary {
    pub d: usize,
    pub dv: usize,
    pub members: Vec<TestFunction>,
    pub exponents: Exponents,
    /// Gram matrix under `L^2(Q) x H^{2, theta2}`.
    pub gram: DMatrix<f64>,
    /// Rows are coefficients of orthonormal combinations: `C G C^T = I`.
    pub orthonormal: DMatrix<f64>,
    /// Eigenvalue floor added to the Gram diagonal before factorization.
    pub regularization: f64,
}

/// Value-factor multi-indices in graded order.
fn value_powers(dv: usize, count: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut total = 0u32;
    while out.len() < count {
        let mut idx = vec![0u32; dv];
        loop {
            if idx.iter().sum::<u32>() == total {
                out.push(idx.clone());
            }
            let mut b = 0;
            loop {
                if b == dv {
                    break;
                }
                idx[b] += 1;
                if idx[b] <= total {
                    break;
                }
                idx[b] = 0;
                b += 1;
            }
            if b == dv {
                break;
            }
        }
        total += 1;
    }
    out.truncate(count);
    out
}

/// `C` with `C G C^T = I` via Cholesky, `C = L^{-1}`.
pub fn orthonormalize(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("Gram matrix is not positive definite"))?;
    let l = chol.l();
    l.try_inverse().ok_or_else(|| Error::numerical("Gram factor is singular"))
}

impl TestFunctionDictionary {
    pub fn build(d: usize, dv: usize, alpha: f64, spec: &DictionarySpec) -> Result<Self> {
        if spec.p_x == 0 || spec.p_u == 0 {
            return Err(Error::config("dictionary needs p_x, p_u >= 1"));
        }
        if !(spec.scale > 0.0) {
            return Err(Error::config("dictionary scale must be positive"));
        }
        let mut members = Vec::new();
        let modes = SpatialMode::first(spec.p_x, d);
        let powers = value_powers(dv, spec.p_u);
        for g in &modes {
            for p in &powers {
                members.push(TestFunction {
                    g: *g,
                    h: ValueFactor::Gaussian {
                        powers: p.clone(),
                        scale: spec.scale,
                    },
                });
            }
        }
        Self::from_members(d, dv, members, Exponents::defaults(d, dv, alpha, spec.gamma))
    }

    pub fn from_members(d: usize, dv: usize, members: Vec<TestFunction>, exponents: Exponents) -> Result<Self> {
        let p = members.len();
        let upper = members.iter().map(|m| value_upper(&m.h)).fold(0.0, f64::max);
        let rule = OrthantRule::new(dv, upper);
        let mut gram = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v = if members[a].g == members[b].g {
                    value_norm_sq(&members[a].h, &members[b].h, dv, 2, exponents.theta2, &rule)
                } else {
                    0.0
                };
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let trace = gram.trace();
        let mut regularization = 0.0;
        let sym = gram.clone().symmetric_eigen();
        let min_eig = sym.eigenvalues.min();
        if min_eig < 1e-12 * trace {
            regularization = 1e-12 * trace - min_eig;
            for k in 0..p {
                gram[(k, k)] += regularization;
            }
        }
        let orthonormal = orthonormalize(&gram)?;
        Ok(Self {
            d,
            dv,
            members,
            exponents,
            gram,
            orthonormal,
            regularization,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Pairings `<mu, psi_p>` of a cloud with every member.
    pub fn pairings(&self, mu: &WeightedPointCloud) -> Vec<f64> {
        self.members.iter().map(|m| mu.pair(|x, u| m.value(x, u))).collect()
    }

    /// Dual-norm surrogate: Euclidean norm of the pairings with the orthonormalized family.
    pub fn dual_norm(&self, raw_pairings: &[f64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(raw_pairings);
        (&self.orthonormal * v).norm()
    }
}

/// Drift and diffusion vectors with the per-location interaction cache.
struct Coeffs<'a> {
    model: &'a dyn CoefficientModel,
    t: f64,
    m: &'a MeasureMoments,
    ws: Workspace,
}

impl<'a> Coeffs<'a> {
    fn new(model: &'a dyn CoefficientModel, t: f64, m: &'a MeasureMoments) -> Self {
        Self {
            model,
            t,
            m,
            ws: Workspace::new(model),
        }
    }

    fn eval(&mut self, site: &Site, u: &[f64], b: &mut [f64], s: &mut [f64]) -> (f64, f64) {
        let (ab, asg) = interaction_args(self.model, site, self.t, u, self.m, &mut self.ws);
        self.model.b0(site, self.t, u, b);
        self.model.sigma0(site, self.t, u, s);
        let (pb, ps) = (self.model.phi(ab), self.model.phi(asg));
        for v in b.iter_mut() {
            *v += pb;
        }
        for v in s.iter_mut() {
            *v += ps;
        }
        (ab, asg)
    }
}

/// Generator `L_t(mu)[psi](x,u) = sum_beta d_beta psi b_beta + 1/2 sum_beta d_beta^2 psi sigma_beta^2`.
pub struct Generator<'a> {
    coeffs: Coeffs<'a>,
    grad: Vec<f64>,
    diag: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a dyn CoefficientModel, t: f64, moments: &'a MeasureMoments) -> Self {
        let dv = model.dv();
        Self {
            coeffs: Coeffs::new(model, t, moments),
            grad: vec![0.0; dv],
            diag: vec![0.0; dv],
            b: vec![0.0; dv],
            s: vec![0.0; dv],
        }
    }

    pub fn apply(&mut self, psi: &TestFunction, site: &Site, u: &[f64]) -> f64 {
        psi.jet_diag(&site.x, u, &mut self.grad, &mut self.diag);
        self.coeffs.eval(site, u, &mut self.b, &mut self.s);
        let mut acc = 0.0;
        for beta in 0..u.len() {
            acc += self.grad[beta] * self.b[beta] + 0.5 * self.diag[beta] * self.s[beta] * self.s[beta];
        }
        acc
    }
}

/// `L_t(mu)[psi](x,u)` with the cloud as the measure argument.
pub fn apply_l(model: &dyn CoefficientModel, mu: &WeightedPointCloud, t: f64, psi: &TestFunction, x: &[f64], u: &[f64]) -> Result<f64> {
    let m = crate::model::moments(model, mu, t)?;
    Ok(Generator::new(model, t, &m).apply(psi, &model.site(x), u))
}

/// Nodes of the chord quadrature.
pub const CHORD_NODES: usize = 16;

/// `int_0^1 phi'((1 - l) a + l b) dl` by Gauss–Legendre.
pub fn chord_average(model: &dyn CoefficientModel, a: f64, b: f64) -> f64 {
    let (x, w) = gauss_legendre_on(CHORD_NODES, 0.0, 1.0);
    x.iter().zip(&w).map(|(l, wl)| wl * model.phi_dot((1.0 - l) * a + l * b)).sum()
}

/// Linearized operator `LL_t(mu, nu)[psi]`, precomputed for evaluation at many `(y, v)`.
///
/// ```text
/// LL(mu,nu)[psi](y,v) = L(mu)[psi](y,v)
///   + <nu(dx,du), grad psi . 1 * b1(x,y,u,v) Phi_b(x,u)>
///   + <nu(dx,du), 1/2 sum_beta d_beta^2 psi (2 sigma0_beta + phi(s1 nu) + phi(s1 mu)) sigma1(x,y,u,v) Phi_s(x,u)>
/// ```
///
/// with `Phi` the chord averages of `phi'` between the inner integrals under
/// `nu` and `mu`. Because the kernels are separated, both `nu`-integrals reduce
/// to coefficient vectors contracted with the right factors at `(y, v)`.
pub struct Linearized<'a> {
    model: &'a dyn CoefficientModel,
    t: f64,
    mu: MeasureMoments,
    cb: Vec<f64>,
    cs: Vec<f64>,
}

impl<'a> Linearized<'a> {
    pub fn new(
        model: &'a dyn CoefficientModel,
        t: f64,
        mu: &MeasureMoments,
        nu: &MeasureMoments,
        nu_cloud: &WeightedPointCloud,
        psi: &TestFunction,
    ) -> Self {
        let dv = model.dv();
        let (rb, rs) = (model.b1_rank(), model.sigma1_rank());
        let mut cb = vec![0.0; rb];
        let mut cs = vec![0.0; rs];
        let mut ws = Workspace::new(model);
        let mut grad = vec![0.0; dv];
        let mut diag = vec![0.0; dv];
        let mut s0 = vec![0.0; dv];
        let mut left = vec![0.0; rb.max(rs)];
        let (gx, gw) = gauss_legendre_on(CHORD_NODES, 0.0, 1.0);
        let chord = |a: f64, b: f64| -> f64 { gx.iter().zip(&gw).map(|(l, w)| w * model.phi_dot((1.0 - l) * a + l * b)).sum() };
        for j in 0..nu_cloud.len() {
            let w = nu_cloud.weight(j);
            let site = model.site(nu_cloud.x(j));
            let u = nu_cloud.u(j);
            psi.jet_diag(&site.x, u, &mut grad, &mut diag);
            let (ab_nu, as_nu) = interaction_args(model, &site, t, u, nu, &mut ws);
            let (ab_mu, as_mu) = interaction_args(model, &site, t, u, mu, &mut ws);
            let gsum: f64 = grad.iter().sum();
            if rb > 0 && gsum != 0.0 {
                let phi_b = chord(ab_nu, ab_mu);
                model.b1_left(&site, t, u, &mut left[..rb]);
                for r in 0..rb {
                    cb[r] += w * gsum * left[r] * phi_b;
                }
            }
            if rs > 0 {
                model.sigma0(&site, t, u, &mut s0);
                let (pn, pm) = (model.phi(as_nu), model.phi(as_mu));
                let mut factor = 0.0;
                for beta in 0..dv {
                    factor += 0.5 * diag[beta] * (2.0 * s0[beta] + pn + pm);
                }
                if factor != 0.0 {
                    let phi_s = chord(as_nu, as_mu);
                    model.sigma1_left(&site, t, u, &mut left[..rs]);
                    for r in 0..rs {
                        cs[r] += w * factor * left[r] * phi_s;
                    }
                }
            }
        }
        Self {
            model,
            t,
            mu: mu.clone(),
            cb,
            cs,
        }
    }

    /// Evaluate at `(y, v)` given a reusable generator for `L(mu)`.
    pub fn apply(&self, psi: &TestFunction, site: &Site, v: &[f64]) -> f64 {
        let mut gen = Generator::new(self.model, self.t, &self.mu);
        self.apply_with(&mut gen, psi, site, v)
    }

    pub fn apply_with(&self, gen: &mut Generator<'_>, psi: &TestFunction, site: &Site, v: &[f64]) -> f64 {
        let mut acc = gen.apply(psi, site, v);
        let mut right = vec![0.0; self.cb.len().max(self.cs.len())];
        if !self.cb.is_empty() {
            self.model.b1_right(site, self.t, v, &mut right[..self.cb.len()]);
            acc += self.cb.iter().zip(&right).map(|(a, b)| a * b).sum::<f64>();
        }
        if !self.cs.is_empty() {
            self.model.sigma1_right(site, self.t, v, &mut right[..self.cs.len()]);
            acc += self.cs.iter().zip(&right).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    pub fn mu_moments(&self) -> &MeasureMoments {
        &self.mu
    }
}

/// `LL_t(mu, nu)[psi](y, v)` for clouds `mu`, `nu`.
pub fn apply_linearized_l(
    model: &dyn CoefficientModel,
    mu: &WeightedPointCloud,
    nu: &WeightedPointCloud,
    t: f64,
    psi: &TestFunction,
    y: &[f64],
    v: &[f64],
) -> Result<f64> {
    let mm = crate::model::moments(model, mu, t)?;
    let mn = crate::model::moments(model, nu, t)?;
    let lin = Linearized::new(model, t, &mm, &mn, nu, psi);
    Ok(lin.apply(psi, &model.site(y), v))
}

/// `<mu, L(mu)[psi]>` for a cloud.
pub fn generator_pairing(model: &dyn CoefficientModel, mu: &WeightedPointCloud, t: f64, psi: &TestFunction) -> Result<f64> {
    let m = crate::model::moments(model, mu, t)?;
    let mut gen = Generator::new(model, t, &m);
    let mut acc = 0.0;
    for j in 0..mu.len() {
        acc += mu.weight(j) * gen.apply(psi, &model.site(mu.x(j)), mu.u(j));
    }
    Ok(acc)
}

/// `<c (mu - nu), LL(mu,nu)[psi]>`.
pub fn linearized_pairing(
    model: &dyn CoefficientModel,
    mu: &WeightedPointCloud,
    nu: &WeightedPointCloud,
    t: f64,
    psi: &TestFunction,
    c: f64,
) -> Result<f64> {
    let mm = crate::model::moments(model, mu, t)?;
    let mn = crate::model::moments(model, nu, t)?;
    let lin = Linearized::new(model, t, &mm, &mn, nu, psi);
    let mut gen = Generator::new(model, t, &mm);
    let mut acc = 0.0;
    for j in 0..mu.len() {
        acc += mu.weight(j) * lin.apply_with(&mut gen, psi, &model.site(mu.x(j)), mu.u(j));
    }
    for j in 0..nu.len() {
        acc -= nu.weight(j) * lin.apply_with(&mut gen, psi, &model.site(nu.x(j)), nu.u(j));
    }
    Ok(c * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinRelax, LinRelaxParams};
    use rand::{Rng, SeedableRng};

    fn dict(dv: usize) -> TestFunctionDictionary {
        TestFunctionDictionary::build(1, dv, 0.5, &DictionarySpec::default()).unwrap()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> WeightedPointCloud {
        let mut c = WeightedPointCloud::new(1, 1);
        let ws: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        let tot: f64 = ws.iter().sum();
        for w in ws {
            c.push(&[rng.random::<f64>()], &[3.0 * rng.random::<f64>()], w / tot);
        }
        c
    }

    #[test]
    fn single_member_dictionary() {
        let d = TestFunctionDictionary::build(1, 1, 0.5, &DictionarySpec { p_x: 1, p_u: 1, scale: 1.0, gamma: 0.01 }).unwrap();
        assert_eq!(d.len(), 1);
        let psi = &d.members[0];
        for u in [0.0, 0.7, 2.0] {
            assert!((psi.value(&[0.3], &[u]) - (-u * u / 2.0).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn members_have_no_boundary_flux() {
        for dv in [1, 2] {
            for m in &dict(dv).members {
                assert!(m.max_boundary_flux(1, dv, 100) < 1e-12);
            }
        }
    }

    #[test]
    fn gram_is_spd_and_orthonormalization_is_idempotent() {
        let d = dict(2);
        let p = d.len();
        assert_eq!(d.gram.shape(), (p, p));
        assert!(d.gram.clone().symmetric_eigen().eigenvalues.min() > 0.0);
        let c = &d.orthonormal;
        let id = c * &d.gram * c.transpose();
        assert!((id.clone() - DMatrix::identity(p, p)).abs().max() < 1e-8);
        let again = orthonormalize(&id).unwrap();
        assert!((again - DMatrix::identity(p, p)).abs().max() < 1e-8);
    }

    #[test]
    fn second_derivatives_match_finite_differences() {
        for dv in [1, 2] {
            for m in &dict(dv).members {
                for &(x, u0) in &[(0.3, 0.8), (0.71, 1.9)] {
                    let u: Vec<f64> = (0..dv).map(|b| u0 + 0.3 * b as f64).collect();
                    let Derivative::Hessian(h) = m.eval_v(2, &[x], &u).unwrap() else { panic!() };
                    let step = 1e-4;
                    for b in 0..dv {
                        for c in 0..dv {
                            let grad_at = |shift: f64| {
                                let mut w = u.clone();
                                w[c] += shift;
                                let Derivative::Gradient(g) = m.eval_v(1, &[x], &w).unwrap() else { panic!() };
                                g[b]
                            };
                            let fd = (grad_at(step) - grad_at(-step)) / (2.0 * step);
                            let scale = h[b * dv + c].abs().max(1e-3);
                            assert!((fd - h[b * dv + c]).abs() / scale < 1e-6, "{fd} vs {}", h[b * dv + c]);
                        }
                    }
                    let Derivative::Value(v) = m.eval_v(0, &[x], &u).unwrap() else { panic!() };
                    assert_eq!(v, m.value(&[x], &u));
                }
            }
        }
    }

    #[test]
    fn gradient_vanishes_on_the_face() {
        let m = &dict(2).members[3];
        let Derivative::Gradient(g) = m.eval_v(1, &[0.2], &[0.0, 1.3]).unwrap() else { panic!() };
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gaussian_norm_matches_trapezoid_oracle() {
        let psi = TestFunction {
            g: SpatialMode::Constant,
            h: ValueFactor::gaussian(1, 1.0),
        };
        let got = weighted_norm(&psi, 1, 0, 0.0);
        // int_0^inf e^{-u^2} du / 2 with theta = 0 gives weight 1/2.
        let step = 1e-6;
        let n = (12.0 / step) as usize;
        let mut s = 0.0;
        for k in 0..=n {
            let u = k as f64 * step;
            let f = (-u * u).exp() / 2.0;
            s += if k == 0 || k == n { 0.5 * f } else { f };
        }
        let oracle = (s * step).sqrt();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        let zero = TestFunction {
            g: SpatialMode::Constant,
            h: ValueFactor::Gaussian { powers: vec![0], scale: 1.0 },
        };
        assert!((weighted_norm(&zero, 1, 2, 1.0) * 2.0 - {
            let rule = OrthantRule::new(1, 10.0);
            let two = ValueFactor::Gaussian { powers: vec![0], scale: 1.0 };
            (4.0 * value_norm_sq(&two, &two, 1, 2, 1.0, &rule)).sqrt()
        })
        .abs()
            < 1e-10);
    }

    #[test]
    fn generator_of_constant_vanishes_and_matches_closed_form() {
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mu = random_cloud(&mut rng, 5);
        assert_eq!(apply_l(&model, &mu, 0.0, &TestFunction::constant(), &[0.3], &[1.2]).unwrap(), 0.0);
        let psi = TestFunction {
            g: SpatialMode::Constant,
            h: ValueFactor::gaussian(1, 1.0),
        };
        let (x, u) = (0.3, 1.2);
        let b = crate::model::drift_b(&model, &[x], 0.0, &[u], &mu).unwrap()[0];
        let s = crate::model::diffusion_sigma(&model, &[x], 0.0, &[u], &mu).unwrap()[0];
        let e = (-u * u / 2.0).exp();
        let expected = -u * e * b + 0.5 * (u * u - 1.0) * e * s * s;
        let got = apply_l(&model, &mu, 0.0, &psi, &[x], &[u]).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn chord_collapses_when_measures_coincide() {
        let model = LinRelax::new(LinRelaxParams::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mu = random_cloud(&mut rng, 6);
        let psi = &dict(1).members[4];
        let got = apply_linearized_l(&model, &mu, &mu, 0.0, psi, &[0.4], &[1.1]).unwrap();
        // Direct evaluation with phi' at a point.
        let m = crate::model::moments(&model, &mu, 0.0).unwrap();
        let mut ws = Workspace::new(&model);
        let mut acc = apply_l(&model, &mu, 0.0, psi, &[0.4], &[1.1]).unwrap();
        for j in 0..mu.len() {
            let (x, u) = (mu.x(j), mu.u(j));
            let site = model.site(x);
            let (ab, asg) = interaction_args(&model, &site, 0.0, u, &m, &mut ws);
            let Derivative::Gradient(g) = psi.eval_v(1, x, u).unwrap() else { panic!() };
            let Derivative::Hessian(h) = psi.eval_v(2, x, u).unwrap() else { panic!() };
            let kb = crate::model::b1_kernel(&model, x, &[0.4], 0.0, u, &[1.1]);
            let ks = crate::model::sigma1_kernel(&model, x, &[0.4], 0.0, u, &[1.1]);
            let s0 = model.params.s0;
            acc += mu.weight(j) * g[0] * kb * model.phi_dot(ab);
            acc += mu.weight(j) * 0.5 * h[0] * ks * model.phi_dot(asg) * (2.0 * s0 + 2.0 * asg.tanh());
        }
        assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
    }

    #[test]
    fn no_diffusion_coupling_drops_the_last_terms() {
        let model = LinRelax::new(LinRelaxParams {
            kappa: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mu = random_cloud(&mut rng, 4);
        let nu = random_cloud(&mut rng, 5);
        let psi = &dict(1).members[1];
        let mm = crate::model::moments(&model, &mu, 0.0).unwrap();
        let mn = crate::model::moments(&model, &nu, 0.0).unwrap();
        let lin = Linearized::new(&model, 0.0, &mm, &mn, &nu, psi);
        assert!(lin.cs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn exactness_identity_on_random_clouds() {
        let model = LinRelax::new(LinRelaxParams {
            kappa: 0.6,
            lambda: 1.5,
            ..Default::default()
        })
        .unwrap();
        let d = dict(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mu = random_cloud(&mut rng, 7);
            let nu = random_cloud(&mut rng, 5);
            let c = 0.5 + 10.0 * rng.random::<f64>();
            for psi in &d.members {
                let lhs = c * (generator_pairing(&model, &mu, 0.0, psi).unwrap() - generator_pairing(&model, &nu, 0.0, psi).unwrap());
                let rhs = linearized_pairing(&model, &mu, &nu, 0.0, psi, c).unwrap();
                assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn evaluation_operator_bound_holds_with_frozen_constant() {
        let d = dict(1);
        let theta = d.exponents.theta2;
        let bound = |psi: &TestFunction, u: f64| -> f64 {
            let mut worst: f64 = 0.0;
            for j in 0..3 {
                let v = match psi.eval_v(j, &[0.37], &[u]).unwrap() {
                    Derivative::Value(v) => v.abs(),
                    Derivative::Gradient(g) => g[0].abs(),
                    Derivative::Hessian(h) => h[0].abs(),
                };
                worst = worst.max(v / ((1.0 + u).powf(theta) * weighted_norm(psi, 1, 2, theta)));
            }
            worst
        };
        let fit = d
            .members
            .iter()
            .flat_map(|m| (0..200).map(move |k| (m, k as f64 * 0.05)))
            .map(|(m, u)| bound(m, u))
            .fold(0.0, f64::max);
        let frozen = 1.5 * fit;
        for m in &d.members {
            for k in 0..500 {
                assert!(bound(m, 0.013 + k as f64 * 0.031) <= frozen);
            }
        }
    }

    #[test]
    fn norm_is_homogeneous() {
        let psi = dict(1).members[2].clone();
        let rule = OrthantRule::new(1, value_upper(&psi.h));
        let a = value_norm_sq(&psi.h, &psi.h, 1, 2, 1.0, &rule);
        // Bilinear form: <2h, 2h> = 4 <h, h>.
        let mut g = [0.0];
        let mut hs = [0.0];
        let mut s = 0.0;
        for (u, w) in rule.nodes.iter().zip(&rule.weights) {
            let v = 2.0 * psi.h.jet(u, &mut g, &mut hs);
            let (g2, h2) = (2.0 * g[0], 2.0 * hs[0]);
            s += w * (v * v + g2 * g2 + h2 * h2) / (1.0 + (u[0] * u[0]).powf(1.0));
        }
        assert!((s - 4.0 * a).abs() < 1e-10 * s);
    }
}
