//! Drift and diffusion coefficients of mean-field shape.
//!
//! Both coefficients are a local part plus a saturating function of an
//! integral against the measure argument,
//!
//! ```text
//! b(x,t,u,mu)     = b0(x,t,u)     + phi( int b1(x,y,t,u,v) mu(dy,dv) )
//! sigma(x,t,u,mu) = sigma0(x,t,u) + phi( int sigma1(x,y,t,u,v) mu(dy,dv) )
//! ```
//!
//! with one scalar interaction kernel shared by all directions. Kernels are
//! given in separated form `b1(x,y,t,u,v) = sum_r left_r(x,t,u) right_r(y,t,v)`,
//! so the measure enters only through the finite moment vector
//! `<mu, right_r>`; evaluating a coefficient for `n` particles against a cloud
//! of `m` atoms costs `O((n + m) rank)`.

use std::f64::consts::PI;
use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::measures::WeightedPointCloud;

/// A location with model-specific cached features (profile values, trig factors).
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub x: Vec<f64>,
    pub aux: Vec<f64>,
}

impl Site {
    pub fn bare(x: &[f64]) -> Self {
        Self { x: x.to_vec(), aux: Vec::new() }
    }
}

/// Constants the model claims for its regularity and growth bounds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeclaredConstants {
    /// Bound on `|b(x,u,mu) - b(x',u',mu')| / (|x-x'|^a + |u-u'| + W1^a + W1)`.
    pub regularity_b: f64,
    pub regularity_sigma: f64,
    /// Bound on `|b| / (1 + |u| + int |v| dmu)`.
    pub growth_b: f64,
    pub growth_sigma: f64,
}

/// Coefficients of the particle and McKean–Vlasov systems.
pub trait CoefficientModel: Send + Sync + Debug {
    fn name(&self) -> &str;
    /// Spatial dimension of `Q`.
    fn d(&self) -> usize;
    /// Number of activity directions.
    fn dv(&self) -> usize;
    /// Hölder exponent of the spatial dependence.
    fn alpha(&self) -> f64;

    /// Precompute location features. The default stores only the coordinates.
    fn site(&self, x: &[f64]) -> Site {
        Site::bare(x)
    }

    fn b0(&self, site: &Site, t: f64, u: &[f64], out: &mut [f64]);
    fn sigma0(&self, site: &Site, t: f64, u: &[f64], out: &mut [f64]);

    fn b1_rank(&self) -> usize;
    fn b1_left(&self, site: &Site, t: f64, u: &[f64], out: &mut [f64]);
    fn b1_right(&self, site: &Site, t: f64, v: &[f64], out: &mut [f64]);

    fn sigma1_rank(&self) -> usize;
    fn sigma1_left(&self, site: &Site, t: f64, u: &[f64], out: &mut [f64]);
    fn sigma1_right(&self, site: &Site, t: f64, v: &[f64], out: &mut [f64]);

    fn phi(&self, z: f64) -> f64;
    fn phi_dot(&self, z: f64) -> f64;

    /// Whether the left kernel factors depend on `u`. When they do not, the
    /// interaction terms are constant per location and callers may cache them.
    fn interaction_depends_on_u(&self) -> bool {
        true
    }

    /// Whether no coefficient depends on the location.
    fn is_x_homogeneous(&self) -> bool {
        false
    }

    fn declared(&self) -> DeclaredConstants;
}

/// Moment vectors `<mu, right_r>` of a measure for both kernels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasureMoments {
    pub b1: Vec<f64>,
    pub sigma1: Vec<f64>,
}

impl MeasureMoments {
    pub fn zeros(model: &dyn CoefficientModel) -> Self {
        Self {
            b1: vec![0.0; model.b1_rank()],
            sigma1: vec![0.0; model.sigma1_rank()],
        }
    }

    /// `(1 - lambda) self + lambda other`.
    pub fn lerp(&self, other: &Self, lambda: f64) -> Self {
        let f = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
        };
        Self {
            b1: f(&self.b1, &other.b1),
            sigma1: f(&self.sigma1, &other.sigma1),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, w: f64) {
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += w * b;
        }
        for (a, b) in self.sigma1.iter_mut().zip(&other.sigma1) {
            *a += w * b;
        }
    }
}

/// Reusable buffers for per-particle coefficient evaluation.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    left: Vec<f64>,
    right: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &dyn CoefficientModel) -> Self {
        let r = model.b1_rank().max(model.sigma1_rank());
        Self {
            left: vec![0.0; r],
            right: vec![0.0; r],
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interaction integrals `(b1(x,t,u,mu), sigma1(x,t,u,mu))` from moments.
pub fn interaction_args(
    model: &dyn CoefficientModel,
    site: &Site,
    t: f64,
    u: &[f64],
    m: &MeasureMoments,
    ws: &mut Workspace,
) -> (f64, f64) {
    let rb = model.b1_rank();
    model.b1_left(site, t, u, &mut ws.left[..rb]);
    let ab = dot(&ws.left[..rb], &m.b1);
    let rs = model.sigma1_rank();
    model.sigma1_left(site, t, u, &mut ws.left[..rs]);
    let asg = dot(&ws.left[..rs], &m.sigma1);
    (ab, asg)
}

/// Drift and diffusion vectors at `(x,t,u)` against a measure summarized by `m`.
pub fn coefficients_from_moments(
    model: &dyn CoefficientModel,
    site: &Site,
    t: f64,
    u: &[f64],
    m: &MeasureMoments,
    ws: &mut Workspace,
    b_out: &mut [f64],
    s_out: &mut [f64],
) {
    let (ab, asg) = interaction_args(model, site, t, u, m, ws);
    let (pb, ps) = (model.phi(ab), model.phi(asg));
    model.b0(site, t, u, b_out);
    model.sigma0(site, t, u, s_out);
    for v in b_out.iter_mut() {
        *v += pb;
    }
    for v in s_out.iter_mut() {
        *v += ps;
    }
}

/// Accumulate `w * right(y, v)` into the moment vectors.
pub fn accumulate_moments(
    model: &dyn CoefficientModel,
    site: &Site,
    t: f64,
    v: &[f64],
    w: f64,
    ws: &mut Workspace,
    into: &mut MeasureMoments,
) {
    let rb = model.b1_rank();
    model.b1_right(site, t, v, &mut ws.right[..rb]);
    for (a, r) in into.b1.iter_mut().zip(&ws.right[..rb]) {
        *a += w * r;
    }
    let rs = model.sigma1_rank();
    model.sigma1_right(site, t, v, &mut ws.right[..rs]);
    for (a, r) in into.sigma1.iter_mut().zip(&ws.right[..rs]) {
        *a += w * r;
    }
}

/// Moments of a weighted point cloud.
pub fn moments(model: &dyn CoefficientModel, mu: &WeightedPointCloud, t: f64) -> Result<MeasureMoments> {
    if mu.is_empty() {
        return Err(Error::domain("measure argument has no atoms"));
    }
    if mu.d() != model.d() || mu.dv() != model.dv() {
        return Err(Error::domain("measure dimensions do not match the model"));
    }
    let mut m = MeasureMoments::zeros(model);
    let mut ws = Workspace::new(model);
    for j in 0..mu.len() {
        let site = model.site(mu.x(j));
        accumulate_moments(model, &site, t, mu.u(j), mu.weight(j), &mut ws, &mut m);
    }
    Ok(m)
}

/// Pointwise interaction kernel `b1(x,y,t,u,v)`.
pub fn b1_kernel(model: &dyn CoefficientModel, x: &[f64], y: &[f64], t: f64, u: &[f64], v: &[f64]) -> f64 {
    let r = model.b1_rank();
    let (mut l, mut rr) = (vec![0.0; r], vec![0.0; r]);
    model.b1_left(&model.site(x), t, u, &mut l);
    model.b1_right(&model.site(y), t, v, &mut rr);
    dot(&l, &rr)
}

/// Pointwise interaction kernel `sigma1(x,y,t,u,v)`.
pub fn sigma1_kernel(model: &dyn CoefficientModel, x: &[f64], y: &[f64], t: f64, u: &[f64], v: &[f64]) -> f64 {
    let r = model.sigma1_rank();
    let (mut l, mut rr) = (vec![0.0; r], vec![0.0; r]);
    model.sigma1_left(&model.site(x), t, u, &mut l);
    model.sigma1_right(&model.site(y), t, v, &mut rr);
    dot(&l, &rr)
}

fn check_point(model: &dyn CoefficientModel, x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != model.d() || u.len() != model.dv() {
        return Err(Error::domain("point dimensions do not match the model"));
    }
    if u.iter().any(|&v| v < 0.0) {
        return Err(Error::domain("activity levels must be nonnegative"));
    }
    Ok(())
}

/// `b(x,t,u,mu)`.
pub fn drift_b(model: &dyn CoefficientModel, x: &[f64], t: f64, u: &[f64], mu: &WeightedPointCloud) -> Result<Vec<f64>> {
    check_point(model, x, u)?;
    let m = moments(model, mu, t)?;
    let mut ws = Workspace::new(model);
    let (mut b, mut s) = (vec![0.0; model.dv()], vec![0.0; model.dv()]);
    coefficients_from_moments(model, &model.site(x), t, u, &m, &mut ws, &mut b, &mut s);
    Ok(b)
}

/// `sigma(x,t,u,mu)`.
pub fn diffusion_sigma(
    model: &dyn CoefficientModel,
    x: &[f64],
    t: f64,
    u: &[f64],
    mu: &WeightedPointCloud,
) -> Result<Vec<f64>> {
    check_point(model, x, u)?;
    let m = moments(model, mu, t)?;
    let mut ws = Workspace::new(model);
    let (mut b, mut s) = (vec![0.0; model.dv()], vec![0.0; model.dv()]);
    coefficients_from_moments(model, &model.site(x), t, u, &m, &mut ws, &mut b, &mut s);
    Ok(s)
}

/// Saturating nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    /// `phi = 0`: interaction switched off.
    Zero,
}

impl Nonlinearity {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => z.tanh(),
            Nonlinearity::Zero => 0.0,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let c = z.cosh();
                1.0 / (c * c)
            }
            Nonlinearity::Zero => 0.0,
        }
    }
}

/// Spatial profile with values in `[0, 1]`, periodic on `Q`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HolderProfile {
    /// Lacunary cosine series `sum_n 2^{-n alpha} [cos(2 pi 2^n x) + cos(2 pi (2^n + 1) x)] / 2`,
    /// affinely mapped to `[0, 1]`. Exactly `alpha`-Hölder and rough at every scale.
    Lacunary { alpha: f64, terms: usize },
    /// `|sin(pi x)|^alpha`: a single cusp per period.
    SinPower { alpha: f64 },
    /// `(1 + cos 2 pi x) / 2`.
    Cosine,
    /// Identically zero.
    Flat,
}

impl HolderProfile {
    pub fn lacunary(alpha: f64) -> Self {
        HolderProfile::Lacunary { alpha, terms: 30 }
    }

    /// Hölder exponent the profile realizes.
    pub fn alpha(&self) -> f64 {
        match *self {
            HolderProfile::Lacunary { alpha, .. } | HolderProfile::SinPower { alpha } => alpha,
            HolderProfile::Cosine | HolderProfile::Flat => 1.0,
        }
    }

    fn eval_1d(&self, x: f64) -> f64 {
        match *self {
            HolderProfile::Lacunary { alpha, terms } => {
                let mut s = 0.0;
                let mut total = 0.0;
                let mut freq = 1.0f64;
                for n in 0..terms {
                    let a = (-(n as f64) * alpha * std::f64::consts::LN_2).exp();
                    s += 0.5 * a * ((2.0 * PI * freq * x).cos() + (2.0 * PI * (freq + 1.0) * x).cos());
                    total += a;
                    freq *= 2.0;
                }
                (s + total) / (2.0 * total)
            }
            HolderProfile::SinPower { alpha } => (PI * x).sin().abs().powf(alpha),
            HolderProfile::Cosine => 0.5 * (1.0 + (2.0 * PI * x).cos()),
            HolderProfile::Flat => 0.0,
        }
    }

    /// Mean of the one-dimensional profile over the coordinates of `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        x.iter().map(|&c| self.eval_1d(c)).sum::<f64>() / x.len() as f64
    }
}

fn trig_features(x: &[f64], aux: &mut Vec<f64>) {
    for &c in x {
        aux.push((2.0 * PI * c).cos());
    }
    for &c in x {
        aux.push((2.0 * PI * c).sin());
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Parameters of the `linrelax` built-in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinRelaxParams {
    pub d: usize,
    pub dv: usize,
    /// Amplitude of the spatial profile in the drift.
    pub c_b: f64,
    /// Constant diffusion level.
    pub s0: f64,
    /// Strength of the drift interaction kernel.
    pub lambda: f64,
    /// Strength of the diffusion interaction kernel.
    pub kappa: f64,
    pub phi: Nonlinearity,
    pub profile: HolderProfile,
}

impl Default for LinRelaxParams {
    fn default() -> Self {
        Self {
            d: 1,
            dv: 1,
            c_b: 1.0,
            s0: 0.5,
            lambda: 1.0,
            kappa: 0.2,
            phi: Nonlinearity::Tanh,
            profile: HolderProfile::lacunary(0.5),
        }
    }
}

/// Relaxation toward a spatially modulated level with cosine-kernel coupling:
///
/// ```text
/// b0 = -u + 1 + c_b p(x),            sigma0 = s0,
/// b1 = lambda/d sum_a cos(2 pi (x_a - y_a)) |v| / (1 + |v|^2),
/// sigma1 = kappa/d sum_a cos(2 pi (x_a - y_a)) / (1 + |v|^2),
/// phi = tanh.
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LinRelax {
    pub params: LinRelaxParams,
}

impl LinRelax {
    pub fn new(params: LinRelaxParams) -> Result<Self> {
        if params.d == 0 || params.dv == 0 {
            return Err(Error::config("linrelax: dimensions must be positive"));
        }
        if !(params.s0 >= 0.0) {
            return Err(Error::config("linrelax: s0 must be nonnegative"));
        }
        Ok(Self { params })
    }
}

impl CoefficientModel for LinRelax {
    fn name(&self) -> &str {
        "linrelax"
    }
    fn d(&self) -> usize {
        self.params.d
    }
    fn dv(&self) -> usize {
        self.params.dv
    }
    fn alpha(&self) -> f64 {
        self.params.profile.alpha()
    }

    fn site(&self, x: &[f64]) -> Site {
        let mut aux = Vec::with_capacity(1 + 2 * x.len());
        aux.push(self.params.profile.eval(x));
        trig_features(x, &mut aux);
        Site { x: x.to_vec(), aux }
    }

    fn b0(&self, site: &Site, _t: f64, u: &[f64], out: &mut [f64]) {
        let level = 1.0 + self.params.c_b * site.aux[0];
        for (o, &ub) in out.iter_mut().zip(u) {
            *o = level - ub;
        }
    }

    fn sigma0(&self, _site: &Site, _t: f64, _u: &[f64], out: &mut [f64]) {
        out.fill(self.params.s0);
    }

    fn b1_rank(&self) -> usize {
        2 * self.params.d
    }

    fn b1_left(&self, site: &Site, _t: f64, _u: &[f64], out: &mut [f64]) {
        let s = self.params.lambda / self.params.d as f64;
        for (o, a) in out.iter_mut().zip(&site.aux[1..]) {
            *o = s * a;
        }
    }

    fn b1_right(&self, site: &Site, _t: f64, v: &[f64], out: &mut [f64]) {
        let n = norm(v);
        let g = n / (1.0 + n * n);
        for (o, a) in out.iter_mut().zip(&site.aux[1..]) {
            *o = g * a;
        }
    }

    fn sigma1_rank(&self) -> usize {
        2 * self.params.d
    }

    fn sigma1_left(&self, site: &Site, _t: f64, _u: &[f64], out: &mut [f64]) {
        let s = self.params.kappa / self.params.d as f64;
        for (o, a) in out.iter_mut().zip(&site.aux[1..]) {
            *o = s * a;
        }
    }

    fn sigma1_right(&self, site: &Site, _t: f64, v: &[f64], out: &mut [f64]) {
        let n = norm(v);
        let g = 1.0 / (1.0 + n * n);
        for (o, a) in out.iter_mut().zip(&site.aux[1..]) {
            *o = g * a;
        }
    }

    fn phi(&self, z: f64) -> f64 {
        self.params.phi.eval(z)
    }
    fn phi_dot(&self, z: f64) -> f64 {
        self.params.phi.derivative(z)
    }
    fn interaction_depends_on_u(&self) -> bool {
        false
    }

    fn declared(&self) -> DeclaredConstants {
        // |d/du b0| = 1, |b1 right| Lipschitz <= 1 in v and 2 pi in y, tanh' <= 1;
        // the profile term carries its Hölder seminorm. Margins from a grid search.
        let p = &self.params;
        let holder = match p.profile {
            HolderProfile::Flat => 0.0,
            _ => 12.0,
        };
        DeclaredConstants {
            regularity_b: 1.0 + p.c_b.abs() * holder + p.lambda.abs() * 8.0,
            regularity_sigma: p.kappa.abs() * 10.0 + 1e-12,
            growth_b: 2.0 + p.c_b.abs() + p.lambda.abs(),
            growth_sigma: p.s0 + p.kappa.abs().min(1.0) + 1e-12,
        }
    }
}

/// Parameters of the `decoupled` built-in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoupledParams {
    pub d: usize,
    pub dv: usize,
    /// Relaxation rate.
    pub rate: f64,
    /// Constant drift offset.
    pub level: f64,
    pub c_b: f64,
    pub s0: f64,
    pub profile: HolderProfile,
}

impl Default for DecoupledParams {
    fn default() -> Self {
        Self {
            d: 1,
            dv: 1,
            rate: 1.0,
            level: 1.0,
            c_b: 1.0,
            s0: 0.5,
            profile: HolderProfile::lacunary(0.5),
        }
    }
}

/// No interaction: `b1 = sigma1 = 0`, `b0 = -rate u + level + c_b p(x)`, `sigma0 = s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupled {
    pub params: DecoupledParams,
}

impl Decoupled {
    pub fn new(params: DecoupledParams) -> Result<Self> {
        if params.d == 0 || params.dv == 0 {
            return Err(Error::config("decoupled: dimensions must be positive"));
        }
        Ok(Self { params })
    }
}

impl CoefficientModel for Decoupled {
    fn name(&self) -> &str {
        "decoupled"
    }
    fn d(&self) -> usize {
        self.params.d
    }
    fn dv(&self) -> usize {
        self.params.dv
    }
    fn alpha(&self) -> f64 {
        self.params.profile.alpha()
    }
    fn site(&self, x: &[f64]) -> Site {
        Site {
            x: x.to_vec(),
            aux: vec![self.params.profile.eval(x)],
        }
    }
    fn b0(&self, site: &Site, _t: f64, u: &[f64], out: &mut [f64]) {
        let level = self.params.level + self.params.c_b * site.aux[0];
        for (o, &ub) in out.iter_mut().zip(u) {
            *o = level - self.params.rate * ub;
        }
    }
    fn sigma0(&self, _site: &Site, _t: f64, _u: &[f64], out: &mut [f64]) {
        out.fill(self.params.s0);
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
    fn phi(&self, z: f64) -> f64 {
        z.tanh()
    }
    fn phi_dot(&self, z: f64) -> f64 {
        Nonlinearity::Tanh.derivative(z)
    }
    fn interaction_depends_on_u(&self) -> bool {
        false
    }
    fn is_x_homogeneous(&self) -> bool {
        self.params.c_b == 0.0 || self.params.profile == HolderProfile::Flat
    }
    fn declared(&self) -> DeclaredConstants {
        let p = &self.params;
        let holder = match p.profile {
            HolderProfile::Flat => 0.0,
            _ => 12.0,
        };
        DeclaredConstants {
            regularity_b: p.rate.abs() + p.c_b.abs() * holder + 1e-12,
            regularity_sigma: 1e-12,
            growth_b: p.rate.abs() + p.level.abs() + p.c_b.abs() + 1e-12,
            growth_sigma: p.s0 + 1e-12,
        }
    }
}

/// Parameters of the `homog` built-in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogParams {
    pub d: usize,
    pub dv: usize,
    pub level: f64,
    pub s0: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub phi: Nonlinearity,
}

impl Default for HomogParams {
    fn default() -> Self {
        Self {
            d: 1,
            dv: 1,
            level: 1.0,
            s0: 0.5,
            lambda: 1.0,
            kappa: 0.3,
            phi: Nonlinearity::Tanh,
        }
    }
}

/// Location-independent coupling (any `d`, coefficients ignore `x`):
///
/// ```text
/// b0 = -u + level, sigma0 = s0,
/// b1 = lambda |v| / (1 + |v|^2), sigma1 = kappa / (1 + |v|^2), phi = tanh.
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Homog {
    pub params: HomogParams,
}

impl Homog {
    pub fn new(params: HomogParams) -> Result<Self> {
        if params.d == 0 || params.dv == 0 {
            return Err(Error::config("homog: dimensions must be positive"));
        }
        Ok(Self { params })
    }
}

impl CoefficientModel for Homog {
    fn name(&self) -> &str {
        "homog"
    }
    fn d(&self) -> usize {
        self.params.d
    }
    fn dv(&self) -> usize {
        self.params.dv
    }
    fn alpha(&self) -> f64 {
        1.0
    }
    fn b0(&self, _site: &Site, _t: f64, u: &[f64], out: &mut [f64]) {
        for (o, &ub) in out.iter_mut().zip(u) {
            *o = self.params.level - ub;
        }
    }
    fn sigma0(&self, _site: &Site, _t: f64, _u: &[f64], out: &mut [f64]) {
        out.fill(self.params.s0);
    }
    fn b1_rank(&self) -> usize {
        1
    }
    fn b1_left(&self, _: &Site, _: f64, _: &[f64], out: &mut [f64]) {
        out[0] = self.params.lambda;
    }
    fn b1_right(&self, _: &Site, _: f64, v: &[f64], out: &mut [f64]) {
        let n = norm(v);
        out[0] = n / (1.0 + n * n);
    }
    fn sigma1_rank(&self) -> usize {
        1
    }
    fn sigma1_left(&self, _: &Site, _: f64, _: &[f64], out: &mut [f64]) {
        out[0] = self.params.kappa;
    }
    fn sigma1_right(&self, _: &Site, _: f64, v: &[f64], out: &mut [f64]) {
        let n = norm(v);
        out[0] = 1.0 / (1.0 + n * n);
    }
    fn phi(&self, z: f64) -> f64 {
        self.params.phi.eval(z)
    }
    fn phi_dot(&self, z: f64) -> f64 {
        self.params.phi.derivative(z)
    }
    fn interaction_depends_on_u(&self) -> bool {
        false
    }
    fn is_x_homogeneous(&self) -> bool {
        true
    }
    fn declared(&self) -> DeclaredConstants {
        let p = &self.params;
        DeclaredConstants {
            regularity_b: 1.0 + p.lambda.abs() * 1.5,
            regularity_sigma: p.kappa.abs() * 1.5 + 1e-12,
            growth_b: 1.0 + p.level.abs() + p.lambda.abs(),
            growth_sigma: p.s0 + p.kappa.abs().min(1.0) + 1e-12,
        }
    }
}

/// Largest observed regularity and growth ratios of a model, with flags.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AuditReport {
    pub samples: usize,
    pub regularity_b: f64,
    pub regularity_sigma: f64,
    pub growth_b: f64,
    pub growth_sigma: f64,
    pub declared: DeclaredConstants,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn random_cloud(model: &dyn CoefficientModel, rng: &mut impl rand::Rng, atoms: usize) -> WeightedPointCloud {
    let mut c = WeightedPointCloud::with_capacity(model.d(), model.dv(), atoms);
    let x: Vec<f64> = (0..model.d()).map(|_| rng.random()).collect();
    for _ in 0..atoms {
        let xj: Vec<f64> = x.iter().map(|a| crate::noise_field::wrap_unit(a + 0.5 * rng.random::<f64>())).collect();
        let v: Vec<f64> = (0..model.dv()).map(|_| 4.0 * rng.random::<f64>()).collect();
        c.push(&xj, &v, 1.0 / atoms as f64);
    }
    c
}

/// Perturbation of a cloud: every atom moved by at most `scale`.
fn nearby_cloud(c: &WeightedPointCloud, rng: &mut impl rand::Rng, scale: f64) -> WeightedPointCloud {
    let mut out = WeightedPointCloud::with_capacity(c.d(), c.dv(), c.len());
    for j in 0..c.len() {
        let x: Vec<f64> = c.x(j).iter().map(|a| crate::noise_field::wrap_unit(a + scale * (rng.random::<f64>() - 0.5))).collect();
        let v: Vec<f64> = c.u(j).iter().map(|a| (a + scale * (rng.random::<f64>() - 0.5)).abs()).collect();
        out.push(&x, &v, c.weight(j));
    }
    out
}

/// Samples `(x, x', u, u', mu, mu')` and reports
/// `max |b - b'| / (|x - x'|^alpha + |u - u'| + W1^alpha + W1)` and
/// `max |b| / (1 + |u| + int |v| dmu)`, likewise for `sigma`, against the declared constants.
///
/// Half of the tuples are near-diagonal (perturbations between `1e-6` and `1e-1`)
/// so that local jumps are seen.
pub fn audit_regularity(model: &dyn CoefficientModel, n_samples: usize, seed: u64) -> Result<AuditReport> {
    use crate::transport::{wasserstein, TransportMethod};
    use rand::Rng;
    if n_samples < 100 {
        return Err(Error::domain("audit needs at least 100 samples"));
    }
    let (d, dv, alpha) = (model.d(), model.dv(), model.alpha());
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Audit, &[]);
    let mut rep = AuditReport {
        samples: n_samples,
        regularity_b: 0.0,
        regularity_sigma: 0.0,
        growth_b: 0.0,
        growth_sigma: 0.0,
        declared: model.declared(),
        violations: Vec::new(),
    };
    let norm2 = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for k in 0..n_samples {
        let near = k % 2 == 1;
        let scale = if near { 10f64.powf(-1.0 - 5.0 * rng.random::<f64>()) } else { 1.0 };
        let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let u: Vec<f64> = (0..dv).map(|_| 5.0 * rng.random::<f64>()).collect();
        let mu = random_cloud(model, &mut rng, 4);
        let (x2, u2, mu2) = if near {
            let x2: Vec<f64> = x.iter().map(|a| crate::noise_field::wrap_unit(a + scale * (rng.random::<f64>() - 0.5))).collect();
            let u2: Vec<f64> = u.iter().map(|a| (a + scale * (rng.random::<f64>() - 0.5)).abs()).collect();
            let mu2 = nearby_cloud(&mu, &mut rng, scale);
            (x2, u2, mu2)
        } else {
            let x2: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            let u2: Vec<f64> = (0..dv).map(|_| 5.0 * rng.random::<f64>()).collect();
            (x2, u2, random_cloud(model, &mut rng, 4))
        };
        let w1 = wasserstein(&mu, &mu2, 1, TransportMethod::NetworkSimplex)?.value;
        let dx: f64 = x.iter().zip(&x2).map(|(a, b)| crate::noise_field::torus_delta(*a, *b).powi(2)).sum::<f64>().sqrt();
        let du: Vec<f64> = u.iter().zip(&u2).map(|(a, b)| a - b).collect();
        let denom = dx.powf(alpha) + norm2(&du) + w1.powf(alpha) + w1;
        let b = drift_b(model, &x, 0.0, &u, &mu)?;
        let b2 = drift_b(model, &x2, 0.0, &u2, &mu2)?;
        let s = diffusion_sigma(model, &x, 0.0, &u, &mu)?;
        let s2 = diffusion_sigma(model, &x2, 0.0, &u2, &mu2)?;
        let diff = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if denom > 0.0 {
            rep.regularity_b = rep.regularity_b.max(diff(&b, &b2) / denom);
            rep.regularity_sigma = rep.regularity_sigma.max(diff(&s, &s2) / denom);
        }
        let moment: f64 = (0..mu.len()).map(|j| mu.weight(j) * norm2(mu.u(j))).sum();
        let g = 1.0 + norm2(&u) + moment;
        rep.growth_b = rep.growth_b.max(norm2(&b) / g);
        rep.growth_sigma = rep.growth_sigma.max(norm2(&s) / g);
    }
    let c = rep.declared;
    for (name, seen, declared) in [
        ("regularity of b", rep.regularity_b, c.regularity_b),
        ("regularity of sigma", rep.regularity_sigma, c.regularity_sigma),
        ("growth of b", rep.growth_b, c.growth_b),
        ("growth of sigma", rep.growth_sigma, c.growth_sigma),
    ] {
        if !(seen <= declared) {
            rep.violations.push(format!("{name}: observed {seen:.6} exceeds declared {declared:.6}"));
        }
    }
    Ok(rep)
}

/// Model selection by name, as it appears in experiment configurations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Linrelax(#[serde(default)] LinRelaxParams),
    Decoupled(#[serde(default)] DecoupledParams),
    Homog(#[serde(default)] HomogParams),
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn CoefficientModel>> {
        Ok(match self {
            ModelSpec::Linrelax(p) => Box::new(LinRelax::new(p.clone())?),
            ModelSpec::Decoupled(p) => Box::new(Decoupled::new(p.clone())?),
            ModelSpec::Homog(p) => Box::new(Homog::new(p.clone())?),
        })
    }
}
