//! Reflected Euler schemes for the particle system, the McKean–Vlasov
//! ensemble and the coupled pair.
//!
//! All three share one engine: a population of `copies x locations` activity
//! vectors stored copy-major, advanced by an explicit step whose measure
//! argument is frozen at the start of the step. What differs is where the
//! measure argument comes from (the population itself or an external moment
//! path) and which noise drives it (the correlated field or independent
//! one-point increments).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{Configuration, WeightedPointCloud};
use crate::model::{
    accumulate_moments, coefficients_from_moments, interaction_args, CoefficientModel, HolderProfile,
    MeasureMoments, Site, Workspace,
};
use crate::noise_field::{MarginalNoise, NoiseFieldSampler};
use crate::rng::{stream, Purpose};

/// Centers of the `N` equal cells of an equispaced grid on `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    n: usize,
    d: usize,
    side: usize,
    centers: Vec<f64>,
}

impl SpatialGrid {
    /// `n` must be a perfect `d`-th power.
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::config("grid size and dimension must be positive"));
        }
        let side = (n as f64).powf(1.0 / d as f64).round() as usize;
        if side.pow(d as u32) != n {
            return Err(Error::config(format!("N = {n} is not a perfect power of d = {d}")));
        }
        let mut centers = Vec::with_capacity(n * d);
        for idx in 0..n {
            let mut r = idx;
            for _ in 0..d {
                centers.push(((r % side) as f64 + 0.5) / side as f64);
                r /= side;
            }
        }
        Ok(Self { n, d, side, centers })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn side(&self) -> usize {
        self.side
    }
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.d..(i + 1) * self.d]
    }
    pub fn cell_measure(&self) -> f64 {
        1.0 / self.n as f64
    }
    pub fn cell_diameter(&self) -> f64 {
        (self.d as f64).sqrt() / self.side as f64
    }
}

/// Initial activity levels `u_k(x,0) = a0 |xi0| (1 + c p(x)) + a1 |xi1|` per direction,
/// with `(xi0, xi1)` standard normal pairs drawn once per copy and direction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialData {
    pub a0: f64,
    pub a1: f64,
    pub c: f64,
    pub profile: HolderProfile,
}

impl Default for InitialData {
    fn default() -> Self {
        Self {
            a0: 1.0,
            a1: 0.5,
            c: 1.0,
            profile: HolderProfile::lacunary(0.5),
        }
    }
}

impl InitialData {
    /// Half-normal levels without spatial structure (`a0 = 1`, `a1 = 0`, `c = 0`).
    pub fn half_normal() -> Self {
        Self {
            a0: 1.0,
            a1: 0.0,
            c: 0.0,
            profile: HolderProfile::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a0 < 0.0 || self.a1 < 0.0 || self.c < -1.0 {
            return Err(Error::config("initial data needs a0, a1 >= 0 and c >= -1"));
        }
        Ok(())
    }
}

/// Initial-data law: either the random profile field or a deterministic level.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialLaw {
    Field(InitialData),
    Constant { level: f64 },
}

impl Default for InitialLaw {
    fn default() -> Self {
        InitialLaw::Field(InitialData::default())
    }
}

/// Draws initial levels from keyed streams: copy `k` always gets the same `xi`.
#[derive(Debug, Clone)]
pub struct InitialDataSampler {
    pub law: InitialLaw,
    pub seed: u64,
}

/// Per-copy random coefficients of the initial field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialCoefficients {
    pub a: f64,
    pub b: f64,
}

impl InitialDataSampler {
    pub fn new(law: InitialLaw, seed: u64) -> Result<Self> {
        match &law {
            InitialLaw::Field(f) => f.validate()?,
            InitialLaw::Constant { level: v } if *v < 0.0 => return Err(Error::config("initial level must be nonnegative")),
            _ => {}
        }
        Ok(Self { law, seed })
    }

    /// Profile value the sampler needs at `x`.
    pub fn profile_at(&self, x: &[f64]) -> f64 {
        match &self.law {
            InitialLaw::Field(f) => f.profile.eval(x),
            InitialLaw::Constant { .. } => 0.0,
        }
    }

    /// `(a0 |xi0|, a1 |xi1|)` for each direction of copy `copy`.
    pub fn coefficients(&self, copy: u64, dv: usize) -> Vec<InitialCoefficients> {
        match &self.law {
            InitialLaw::Constant { level: v } => vec![InitialCoefficients { a: 0.0, b: *v }; dv],
            InitialLaw::Field(f) => {
                let mut rng = stream(self.seed, Purpose::InitialData, &[copy]);
                (0..dv)
                    .map(|_| {
                        let x0: f64 = StandardNormal.sample(&mut rng);
                        let x1: f64 = StandardNormal.sample(&mut rng);
                        InitialCoefficients {
                            a: f.a0 * x0.abs(),
                            b: f.a1 * x1.abs(),
                        }
                    })
                    .collect()
            }
        }
    }

    #[inline]
    pub fn level(&self, coeff: InitialCoefficients, profile_value: f64) -> f64 {
        match &self.law {
            InitialLaw::Constant { level: v } => *v,
            InitialLaw::Field(f) => coeff.a * (1.0 + f.c * profile_value) + coeff.b,
        }
    }

    /// `u_copy(x, 0)` at one location.
    pub fn sample(&self, copy: u64, x: &[f64], dv: usize) -> Vec<f64> {
        let p = self.profile_at(x);
        self.coefficients(copy, dv).into_iter().map(|c| self.level(c, p)).collect()
    }
}

/// Source of the Gaussian increments driving a population.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    /// Copy `k` of the correlated field, evaluated at the population's locations.
    Field(NoiseFieldSampler),
    /// Independent `N(0, dt)` per copy and location.
    Marginal(MarginalNoise),
    /// No noise.
    Zero,
}

/// Where the measure argument of a step comes from.
#[derive(Debug, Clone, Copy)]
pub enum MeasureSource<'a> {
    /// The population's own cloud, each atom weighted equally.
    SelfConsistent,
    /// A precomputed moment vector.
    External(&'a MeasureMoments),
}

/// Per-step hook data: start-of-step levels, diffusion values and increments.
pub struct StepView<'a> {
    pub step: usize,
    /// Time at the start of the step.
    pub t: f64,
    pub dt: f64,
    pub levels: &'a [f64],
    pub sigma: &'a [f64],
    pub dw: &'a [f64],
    pub moments: &'a MeasureMoments,
}

/// A population of reflected particles: `copies x locations x dv` levels.
#[derive(Debug, Clone)]
pub struct Population {
    pub d: usize,
    pub dv: usize,
    pub sites: Vec<Site>,
    pub copies: usize,
    /// Global index of the first copy; noise and initial data streams are keyed by it.
    pub copy_offset: usize,
    pub levels: Vec<f64>,
    pub ell: Vec<f64>,
    pub t: f64,
    pub step: usize,
    sigma: Vec<f64>,
    dw: Vec<f64>,
}

/// Step options.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub dt: f64,
    pub blowup_cap: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            blowup_cap: 1e6,
        }
    }
}

impl Population {
    /// Population at the given locations with levels from `init`.
    pub fn new(
        model: &dyn CoefficientModel,
        locations: &[f64],
        copies: usize,
        copy_offset: usize,
        init: &InitialDataSampler,
    ) -> Result<Self> {
        let d = model.d();
        let dv = model.dv();
        if !locations.len().is_multiple_of(d) || locations.is_empty() {
            return Err(Error::config("locations must be a nonempty flat array of d-dimensional points"));
        }
        if copies == 0 {
            return Err(Error::config("population needs at least one copy"));
        }
        let n = locations.len() / d;
        let sites: Vec<Site> = locations.chunks(d).map(|x| model.site(x)).collect();
        let profile: Vec<f64> = locations.chunks(d).map(|x| init.profile_at(x)).collect();
        let mut levels = vec![0.0; copies * n * dv];
        levels.par_chunks_mut(n * dv).enumerate().for_each(|(k, chunk)| {
            let coeffs = init.coefficients((copy_offset + k) as u64, dv);
            for i in 0..n {
                for (beta, c) in coeffs.iter().enumerate() {
                    chunk[i * dv + beta] = init.level(*c, profile[i]);
                }
            }
        });
        Ok(Self {
            d,
            dv,
            sites,
            copies,
            copy_offset,
            ell: vec![0.0; levels.len()],
            sigma: vec![0.0; levels.len()],
            dw: vec![0.0; levels.len()],
            levels,
            t: 0.0,
            step: 0,
        })
    }

    /// Population with levels given directly, copy-major.
    pub fn from_levels(model: &dyn CoefficientModel, locations: &[f64], copies: usize, levels: Vec<f64>) -> Result<Self> {
        let d = model.d();
        let n = locations.len() / d;
        if levels.len() != copies * n * model.dv() {
            return Err(Error::domain("level array does not match the population shape"));
        }
        if levels.iter().any(|&u| !(u >= 0.0)) {
            return Err(Error::domain("initial levels must be nonnegative"));
        }
        Ok(Self {
            d,
            dv: model.dv(),
            sites: locations.chunks(d).map(|x| model.site(x)).collect(),
            copies,
            copy_offset: 0,
            ell: vec![0.0; levels.len()],
            sigma: vec![0.0; levels.len()],
            dw: vec![0.0; levels.len()],
            levels,
            t: 0.0,
            step: 0,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.sites.len()
    }

    pub fn locations(&self) -> Vec<f64> {
        self.sites.iter().flat_map(|s| s.x.iter().copied()).collect()
    }

    #[inline]
    pub fn index(&self, location: usize, copy: usize) -> usize {
        (copy * self.n_locations() + location) * self.dv
    }

    pub fn level(&self, location: usize, copy: usize) -> &[f64] {
        let o = self.index(location, copy);
        &self.levels[o..o + self.dv]
    }

    /// Configuration view for the measure helpers (locations as columns).
    pub fn configuration<'a>(&'a self, centers: &'a [f64]) -> Configuration<'a> {
        Configuration {
            d: self.d,
            dv: self.dv,
            centers,
            m: self.copies,
            levels: &self.levels,
        }
    }

    /// Uniform cloud over all atoms.
    pub fn cloud(&self) -> WeightedPointCloud {
        let n = self.n_locations();
        let w = 1.0 / (n * self.copies) as f64;
        let mut c = WeightedPointCloud::with_capacity(self.d, self.dv, n * self.copies);
        for k in 0..self.copies {
            for i in 0..n {
                c.push(&self.sites[i].x, self.level(i, k), w);
            }
        }
        c
    }

    /// Moments of the population's own cloud, summed per copy then in copy order.
    pub fn moments(&self, model: &dyn CoefficientModel) -> MeasureMoments {
        let n = self.n_locations();
        let dv = self.dv;
        let partial: Vec<MeasureMoments> = self
            .levels
            .par_chunks(n * dv)
            .map_init(
                || Workspace::new(model),
                |ws, chunk| {
                    let mut m = MeasureMoments::zeros(model);
                    for i in 0..n {
                        accumulate_moments(model, &self.sites[i], self.t, &chunk[i * dv..(i + 1) * dv], 1.0, ws, &mut m);
                    }
                    m
                },
            )
            .collect();
        let mut total = MeasureMoments::zeros(model);
        for p in &partial {
            total.add_scaled(p, 1.0);
        }
        let w = 1.0 / (n * self.copies) as f64;
        for v in total.b1.iter_mut().chain(total.sigma1.iter_mut()) {
            *v *= w;
        }
        total
    }

    /// One reflected Euler step.
    pub fn step(
        &mut self,
        model: &dyn CoefficientModel,
        measure: MeasureSource<'_>,
        noise: &NoiseSource,
        opts: StepOptions,
        hook: Option<&mut dyn FnMut(&StepView<'_>)>,
    ) -> Result<()> {
        let own;
        let m = match measure {
            MeasureSource::SelfConsistent => {
                own = self.moments(model);
                &own
            }
            MeasureSource::External(m) => m,
        };
        let n = self.n_locations();
        let dv = self.dv;
        let t = self.t;
        let dt = opts.dt;
        let step = self.step;

        // Interaction terms per location when the left factors ignore u.
        let cached: Option<Vec<(f64, f64)>> = if model.interaction_depends_on_u() {
            None
        } else {
            let mut ws = Workspace::new(model);
            let zero = vec![0.0; dv];
            Some(
                self.sites
                    .iter()
                    .map(|s| {
                        let (ab, asg) = interaction_args(model, s, t, &zero, m, &mut ws);
                        (model.phi(ab), model.phi(asg))
                    })
                    .collect(),
            )
        };

        // Increments.
        match noise {
            NoiseSource::Field(sampler) => {
                if sampler.n_locations() != n {
                    return Err(Error::config("noise sampler locations do not match the population"));
                }
                let off = self.copy_offset;
                self.dw
                    .par_chunks_mut(n * dv)
                    .enumerate()
                    .for_each_init(Vec::new, |scratch, (k, chunk)| {
                        sampler.fill_increments((off + k) as u64, step as u64, chunk, scratch);
                    });
            }
            NoiseSource::Marginal(mn) => {
                let block = MarginalNoise::BLOCK * dv;
                if !self.copy_offset.is_multiple_of(MarginalNoise::BLOCK) || n != 1 {
                    return Err(Error::config(
                        "marginal noise needs one location per copy and a block-aligned copy offset",
                    ));
                }
                let first = self.copy_offset / MarginalNoise::BLOCK;
                self.dw.par_chunks_mut(block).enumerate().for_each(|(b, chunk)| {
                    if chunk.len() == block {
                        mn.fill_block(step as u64, first + b, chunk);
                    } else {
                        let mut full = vec![0.0; block];
                        mn.fill_block(step as u64, first + b, &mut full);
                        chunk.copy_from_slice(&full[..chunk.len()]);
                    }
                });
            }
            NoiseSource::Zero => self.dw.fill(0.0),
        }

        if let Some(h) = hook {
            // Diffusion values are needed before the update.
            self.fill_sigma(model, m, cached.as_deref());
            h(&StepView {
                step,
                t,
                dt,
                levels: &self.levels,
                sigma: &self.sigma,
                dw: &self.dw,
                moments: m,
            });
        }

        let sites = &self.sites;
        let dw = &self.dw;
        let cached = cached.as_deref();
        let failures: Vec<Error> = self
            .levels
            .par_chunks_mut(n * dv)
            .zip(self.ell.par_chunks_mut(n * dv))
            .enumerate()
            .filter_map(|(k, (lv, el))| {
                let mut ws = Workspace::new(model);
                let mut b = vec![0.0; dv];
                let mut s = vec![0.0; dv];
                let noise = &dw[k * n * dv..(k + 1) * n * dv];
                for i in 0..n {
                    let u = &mut lv[i * dv..(i + 1) * dv];
                    match cached {
                        Some(c) => {
                            model.b0(&sites[i], t, u, &mut b);
                            model.sigma0(&sites[i], t, u, &mut s);
                            for beta in 0..dv {
                                b[beta] += c[i].0;
                                s[beta] += c[i].1;
                            }
                        }
                        None => coefficients_from_moments(model, &sites[i], t, u, m, &mut ws, &mut b, &mut s),
                    }
                    for beta in 0..dv {
                        if !(b[beta].is_finite() && s[beta].is_finite()) {
                            return Some(Error::NonFinite {
                                copy: k,
                                location: i,
                                message: format!("coefficient b = {}, sigma = {} at step {step}", b[beta], s[beta]),
                            });
                        }
                        let star = u[beta] + b[beta] * dt + s[beta] * noise[i * dv + beta];
                        if star < 0.0 {
                            u[beta] = 0.0;
                            el[i * dv + beta] += star;
                        } else {
                            u[beta] = star;
                        }
                        if !(u[beta].abs() <= opts.blowup_cap) {
                            return Some(Error::BlowUp {
                                value: u[beta].abs(),
                                cap: opts.blowup_cap,
                                step,
                            });
                        }
                    }
                }
                None
            })
            .collect();
        if let Some(e) = failures.into_iter().next() {
            return Err(e);
        }
        self.step += 1;
        self.t = (self.step as f64) * dt;
        Ok(())
    }

    fn fill_sigma(&mut self, model: &dyn CoefficientModel, m: &MeasureMoments, cached: Option<&[(f64, f64)]>) {
        let n = self.n_locations();
        let dv = self.dv;
        let t = self.t;
        let sites = &self.sites;
        self.sigma
            .par_chunks_mut(n * dv)
            .zip(self.levels.par_chunks(n * dv))
            .for_each(|(sg, lv)| {
                let mut ws = Workspace::new(model);
                let mut b = vec![0.0; dv];
                for i in 0..n {
                    let u = &lv[i * dv..(i + 1) * dv];
                    let s = &mut sg[i * dv..(i + 1) * dv];
                    match cached {
                        Some(c) => {
                            model.sigma0(&sites[i], t, u, s);
                            for v in s.iter_mut() {
                                *v += c[i].1;
                            }
                        }
                        None => coefficients_from_moments(model, &sites[i], t, u, m, &mut ws, &mut b, s),
                    }
                }
            });
    }
}

/// Options of a full simulation.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub t_final: f64,
    pub step: StepOptions,
}

impl SimOptions {
    pub fn n_steps(&self) -> Result<usize> {
        let r = self.t_final / self.step.dt;
        let n = r.round();
        if !(self.step.dt > 0.0) || (r - n).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::config("T must be a positive multiple of dt"));
        }
        Ok(n as usize)
    }
}

/// Snapshot of a population at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub levels: Vec<f64>,
    pub ell: Vec<f64>,
}

/// The particle system on a grid: `M` particles per column, self-consistent measure, field noise.
pub fn simulate_particle_system(
    model: &dyn CoefficientModel,
    grid: &SpatialGrid,
    m: usize,
    opts: SimOptions,
    noise: &NoiseSource,
    init: &InitialDataSampler,
    snapshot_steps: &[usize],
) -> Result<(Population, Vec<Snapshot>)> {
    let mut pop = Population::new(model, grid.centers(), m, 0, init)?;
    let snaps = run(&mut pop, model, opts, noise, MeasureSourceSpec::SelfConsistent, snapshot_steps, None)?;
    Ok((pop, snaps))
}

/// McKean–Vlasov ensemble: `K` copies at each of the given locations whose
/// measure argument is the whole ensemble cloud with weight `1 / (N_f K)`.
pub fn simulate_mckean_ensemble(
    model: &dyn CoefficientModel,
    locations: &[f64],
    k: usize,
    opts: SimOptions,
    noise: &NoiseSource,
    init: &InitialDataSampler,
    snapshot_steps: &[usize],
) -> Result<(Population, Vec<Snapshot>)> {
    if k < 2 {
        return Err(Error::config("ensemble needs K >= 2"));
    }
    let mut pop = Population::new(model, locations, k, 0, init)?;
    let snaps = run(&mut pop, model, opts, noise, MeasureSourceSpec::SelfConsistent, snapshot_steps, None)?;
    Ok((pop, snaps))
}

/// Measure source for a whole run.
#[derive(Debug, Clone, Copy)]
pub enum MeasureSourceSpec<'a> {
    SelfConsistent,
    /// Moments per step index.
    Path(&'a [MeasureMoments]),
}

/// Advance `pop` to `opts.t_final`, recording snapshots (step 0 means the initial state).
pub fn run(
    pop: &mut Population,
    model: &dyn CoefficientModel,
    opts: SimOptions,
    noise: &NoiseSource,
    measure: MeasureSourceSpec<'_>,
    snapshot_steps: &[usize],
    mut hook: Option<&mut dyn FnMut(&StepView<'_>)>,
) -> Result<Vec<Snapshot>> {
    let steps = opts.n_steps()?;
    let mut snaps = Vec::new();
    let take = |pop: &Population, snaps: &mut Vec<Snapshot>| {
        if snapshot_steps.contains(&pop.step) {
            snaps.push(Snapshot {
                step: pop.step,
                t: pop.t,
                levels: pop.levels.clone(),
                ell: pop.ell.clone(),
            });
        }
    };
    take(pop, &mut snaps);
    for s in 0..steps {
        let src = match measure {
            MeasureSourceSpec::SelfConsistent => MeasureSource::SelfConsistent,
            MeasureSourceSpec::Path(p) => MeasureSource::External(
                p.get(s).ok_or_else(|| Error::Missing(format!("moment path has no entry for step {s}")))?,
            ),
        };
        let h: Option<&mut dyn FnMut(&StepView<'_>)> = match &mut hook {
            Some(h) => Some(&mut **h),
            None => None,
        };
        pop.step(model, src, noise, opts.step, h)?;
        take(pop, &mut snaps);
    }
    Ok(snaps)
}

/// Large reference ensemble for the one-particle law: each copy sits at its
/// own location (stratified with a random jitter), starts from its own
/// initial datum and is driven by independent one-point increments.
///
/// Returns the moment vector of the ensemble cloud at the start of every step
/// (`steps + 1` entries) together with the final population.
pub fn law_moment_path(
    model: &dyn CoefficientModel,
    k_ref: usize,
    opts: SimOptions,
    init: &InitialDataSampler,
    seed: u64,
    mut hook: Option<&mut dyn FnMut(&Population, &MeasureMoments)>,
) -> Result<(Vec<MeasureMoments>, Population)> {
    let d = model.d();
    let steps = opts.n_steps()?;
    if !k_ref.is_multiple_of(MarginalNoise::BLOCK) {
        return Err(Error::config(format!(
            "reference ensemble size must be a multiple of {}",
            MarginalNoise::BLOCK
        )));
    }
    let locations = stratified_locations(k_ref, d, seed);
    let mut pop = Population::new_per_copy_sites(model, &locations, init)?;
    let noise = MarginalNoise {
        seed: crate::rng::derive_seed(seed, Purpose::MarginalNoise, &[]),
        dt: opts.step.dt,
        dv: model.dv(),
    };
    let mut path = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let m = pop.moments(model);
        if let Some(h) = hook.as_deref_mut() {
            h(&pop, &m);
        }
        pop.step_independent(model, &m, &noise, opts.step)?;
        path.push(m);
    }
    let m = pop.moments(model);
    if let Some(h) = hook {
        h(&pop, &m);
    }
    path.push(m);
    Ok((path, pop))
}

/// `k` points in `[0,1]^d`: stratified along the first axis with uniform jitter,
/// uniform in the remaining axes.
pub fn stratified_locations(k: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * d);
    let mut rng = stream(seed, Purpose::Locations, &[k as u64, d as u64]);
    for j in 0..k {
        let jitter: f64 = rng.random();
        out.push((j as f64 + jitter) / k as f64);
        for _ in 1..d {
            out.push(rng.random::<f64>());
        }
    }
    out
}

impl Population {
    /// One copy per location, copy index = location index.
    pub fn new_per_copy_sites(model: &dyn CoefficientModel, locations: &[f64], init: &InitialDataSampler) -> Result<Self> {
        let d = model.d();
        let dv = model.dv();
        let n = locations.len() / d;
        let sites: Vec<Site> = locations.par_chunks(d).map(|x| model.site(x)).collect();
        let mut levels = vec![0.0; n * dv];
        levels.par_chunks_mut(dv).enumerate().for_each(|(j, u)| {
            let x = &locations[j * d..(j + 1) * d];
            u.copy_from_slice(&init.sample(j as u64, x, dv));
        });
        Ok(Self {
            d,
            dv,
            sites,
            copies: 1,
            copy_offset: 0,
            ell: vec![0.0; levels.len()],
            sigma: vec![0.0; levels.len()],
            dw: vec![0.0; levels.len()],
            levels,
            t: 0.0,
            step: 0,
        })
    }

    /// Step of a per-copy-site population with one-point increments per location.
    pub fn step_independent(
        &mut self,
        model: &dyn CoefficientModel,
        m: &MeasureMoments,
        noise: &MarginalNoise,
        opts: StepOptions,
    ) -> Result<()> {
        let dv = self.dv;
        let step = self.step;
        let block = MarginalNoise::BLOCK * dv;
        self.dw.par_chunks_mut(block).enumerate().for_each(|(b, chunk)| {
            if chunk.len() == block {
                noise.fill_block(step as u64, b, chunk);
            } else {
                let mut full = vec![0.0; block];
                noise.fill_block(step as u64, b, &mut full);
                chunk.copy_from_slice(&full[..chunk.len()]);
            }
        });
        let t = self.t;
        let dt = opts.dt;
        let sites = &self.sites;
        let dw = &self.dw;
        let bad = self
            .levels
            .par_chunks_mut(block)
            .zip(self.ell.par_chunks_mut(block))
            .enumerate()
            .map(|(bi, (lv, el))| {
                let mut ws = Workspace::new(model);
                let mut b = vec![0.0; dv];
                let mut s = vec![0.0; dv];
                for (jj, u) in lv.chunks_mut(dv).enumerate() {
                    let j = bi * MarginalNoise::BLOCK + jj;
                    coefficients_from_moments(model, &sites[j], t, u, m, &mut ws, &mut b, &mut s);
                    for beta in 0..dv {
                        let star = u[beta] + b[beta] * dt + s[beta] * dw[j * dv + beta];
                        if star < 0.0 {
                            u[beta] = 0.0;
                            el[jj * dv + beta] += star;
                        } else {
                            u[beta] = star;
                        }
                        if !u[beta].is_finite() || u[beta] > opts.blowup_cap {
                            return Some(j);
                        }
                    }
                }
                None
            })
            .find_first(|r| r.is_some())
            .flatten();
        if let Some(j) = bad {
            return Err(Error::NonFinite {
                copy: j,
                location: j,
                message: format!("reference ensemble left the admissible range at step {step}"),
            });
        }
        self.step += 1;
        self.t = self.step as f64 * dt;
        Ok(())
    }
}

/// Result of a coupled run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CouplingError {
    /// `max_i mean_k sup_t |u_ik - ubar_ik|^p` for `p = 2` and `p = 4`.
    pub sup_mean_p2: f64,
    pub sup_mean_p4: f64,
    /// Per-location means for `p = 2`, for pooling across replicas.
    pub per_location_p2: Vec<f64>,
    pub per_location_p4: Vec<f64>,
    /// Copies averaged.
    pub copies: usize,
}

/// Particle system and McKean–Vlasov copies on the same grid, driven by the
/// same initial data and field noise; the copies see the law through
/// `law_path` (moments per step).
///
/// `copy_offset` selects which field copies and initial data are used, so
/// independent replicas of a run use disjoint offsets.
pub fn coupled_run(
    model: &dyn CoefficientModel,
    grid: &SpatialGrid,
    m: usize,
    copy_offset: usize,
    opts: SimOptions,
    noise: &NoiseSource,
    init: &InitialDataSampler,
    law_path: &[MeasureMoments],
) -> Result<CouplingError> {
    let steps = opts.n_steps()?;
    if law_path.len() < steps {
        return Err(Error::Missing("law moment path is shorter than the run".into()));
    }
    let mut real = Population::new(model, grid.centers(), m, copy_offset, init)?;
    let mut mv = real.clone();
    let n = grid.n();
    let dv = model.dv();
    let mut sup = vec![0.0f64; n * m];
    for s in 0..steps {
        real.step(model, MeasureSource::SelfConsistent, noise, opts.step, None)?;
        mv.step(model, MeasureSource::External(&law_path[s]), noise, opts.step, None)?;
        sup.par_iter_mut().enumerate().for_each(|(j, v)| {
            let mut e2 = 0.0;
            for beta in 0..dv {
                let diff = real.levels[j * dv + beta] - mv.levels[j * dv + beta];
                e2 += diff * diff;
            }
            if e2 > *v {
                *v = e2;
            }
        });
    }
    let mut per2 = vec![0.0; n];
    let mut per4 = vec![0.0; n];
    for k in 0..m {
        for i in 0..n {
            let e2 = sup[k * n + i];
            per2[i] += e2;
            per4[i] += e2 * e2;
        }
    }
    for v in per2.iter_mut().chain(per4.iter_mut()) {
        *v /= m as f64;
    }
    Ok(CouplingError {
        sup_mean_p2: per2.iter().cloned().fold(0.0, f64::max),
        sup_mean_p4: per4.iter().cloned().fold(0.0, f64::max),
        per_location_p2: per2,
        per_location_p4: per4,
        copies: m,
    })
}

impl CouplingError {
    /// Pool replicas with equal copy counts per location, then take the max over locations.
    pub fn pool(parts: &[CouplingError]) -> Result<CouplingError> {
        let first = parts.first().ok_or_else(|| Error::Missing("no replicas to pool".into()))?;
        let n = first.per_location_p2.len();
        let total: usize = parts.iter().map(|p| p.copies).sum();
        let mut per2 = vec![0.0; n];
        let mut per4 = vec![0.0; n];
        for p in parts {
            let w = p.copies as f64 / total as f64;
            for i in 0..n {
                per2[i] += w * p.per_location_p2[i];
                per4[i] += w * p.per_location_p4[i];
            }
        }
        Ok(CouplingError {
            sup_mean_p2: per2.iter().cloned().fold(0.0, f64::max),
            sup_mean_p4: per4.iter().cloned().fold(0.0, f64::max),
            per_location_p2: per2,
            per_location_p4: per4,
            copies: total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Decoupled, DecoupledParams, LinRelax, LinRelaxParams};
    use crate::noise_field::NoiseConfig;

    /// `b = -1`, `sigma = 0` everywhere.
    #[derive(Debug)]
    struct ConstantDrift;

    impl CoefficientModel for ConstantDrift {
        fn name(&self) -> &str {
            "constant-drift"
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
            out[0] = -1.0;
        }
        fn sigma0(&self, _: &Site, _: f64, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
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
        fn declared(&self) -> crate::model::DeclaredConstants {
            crate::model::DeclaredConstants {
                regularity_b: 0.0,
                regularity_sigma: 0.0,
                growth_b: 1.0,
                growth_sigma: 0.0,
            }
        }
    }

    fn one_step(u0: f64) -> (f64, f64) {
        let mut pop = Population::from_levels(&ConstantDrift, &[0.5], 1, vec![u0]).unwrap();
        pop.step(
            &ConstantDrift,
            MeasureSource::SelfConsistent,
            &NoiseSource::Zero,
            StepOptions { dt: 0.25, blowup_cap: 1e6 },
            None,
        )
        .unwrap();
        (pop.levels[0], pop.ell[0])
    }

    #[test]
    fn euler_step_without_reflection() {
        let (u, l) = one_step(0.5);
        assert!((u - 0.25).abs() < 1e-15);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn euler_step_with_projection() {
        let (u, l) = one_step(0.1);
        assert_eq!(u, 0.0);
        assert!((l + 0.15).abs() < 1e-15);
    }

    #[test]
    fn grid_cells() {
        let g = SpatialGrid::new(16, 2).unwrap();
        assert_eq!(g.side(), 4);
        assert!((g.cell_measure() - 1.0 / 16.0).abs() < 1e-15);
        assert!((g.cell_diameter() - 2f64.sqrt() / 4.0).abs() < 1e-15);
        assert!(g.centers().iter().all(|&c| c > 0.0 && c < 1.0));
        assert!(SpatialGrid::new(8, 2).is_err());
    }

    #[test]
    fn deterministic_decay_of_decoupled_model() {
        let model = Decoupled::new(DecoupledParams {
            s0: 0.0,
            level: 0.0,
            c_b: 0.0,
            ..Default::default()
        })
        .unwrap();
        let grid = SpatialGrid::new(4, 1).unwrap();
        let init = InitialDataSampler::new(InitialLaw::Constant { level: 1.0 }, 0).unwrap();
        let opts = SimOptions {
            t_final: 0.5,
            step: StepOptions { dt: 0.01, blowup_cap: 1e6 },
        };
        let (pop, _) = simulate_particle_system(&model, &grid, 3, opts, &NoiseSource::Zero, &init, &[]).unwrap();
        let expected = (1.0f64 - 0.01).powi(50);
        for &u in &pop.levels {
            assert!((u - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn linrelax_step_matches_scalar_oracle() {
        // Two particles in one column; independent evaluation of the closed form.
        let p = LinRelaxParams::default();
        let model = LinRelax::new(p.clone()).unwrap();
        let grid = SpatialGrid::new(1, 1).unwrap();
        let noise_cfg = NoiseConfig {
            epsilon: 0.1,
            dt: 0.01,
            seed: 11,
            dv: 1,
            h: None,
            profile: Default::default(),
        };
        let sampler = NoiseFieldSampler::new(noise_cfg, 1, grid.centers()).unwrap();
        let u0 = vec![0.7, 1.9];
        let mut pop = Population::from_levels(&model, grid.centers(), 2, u0.clone()).unwrap();
        let noise = NoiseSource::Field(sampler.clone());
        pop.step(
            &model,
            MeasureSource::SelfConsistent,
            &noise,
            StepOptions { dt: 0.01, blowup_cap: 1e6 },
            None,
        )
        .unwrap();
        let x = 0.5f64;
        let prof = p.profile.eval(&[x]);
        // cos(2 pi (x - y)) = 1 for a single column.
        let g = |v: f64| v / (1.0 + v * v);
        let h = |v: f64| 1.0 / (1.0 + v * v);
        let ab = p.lambda * (g(u0[0]) + g(u0[1])) / 2.0;
        let asg = p.kappa * (h(u0[0]) + h(u0[1])) / 2.0;
        for k in 0..2 {
            let dw = sampler.sample_increments(k as u64, 0)[0];
            let b = -u0[k] + 1.0 + p.c_b * prof + ab.tanh();
            let s = p.s0 + asg.tanh();
            let expected = (u0[k] + b * 0.01 + s * dw).max(0.0);
            assert!((pop.levels[k] - expected).abs() < 1e-14);
        }
    }

    fn small_linrelax_run(threads: usize) -> Vec<f64> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model = LinRelax::new(LinRelaxParams::default()).unwrap();
            let grid = SpatialGrid::new(8, 1).unwrap();
            let cfg = NoiseConfig {
                epsilon: 0.1,
                dt: 0.01,
                seed: 3,
                dv: 1,
                h: None,
                profile: Default::default(),
            };
            let noise = NoiseSource::Field(NoiseFieldSampler::new(cfg, 1, grid.centers()).unwrap());
            let init = InitialDataSampler::new(InitialLaw::default(), 4).unwrap();
            let opts = SimOptions {
                t_final: 0.2,
                step: StepOptions { dt: 0.01, blowup_cap: 1e6 },
            };
            simulate_particle_system(&model, &grid, 37, opts, &noise, &init, &[]).unwrap().0.levels
        })
    }

    #[test]
    fn runs_are_bit_identical_across_thread_counts() {
        let a = small_linrelax_run(1);
        for t in [2, 4, 8] {
            assert_eq!(a, small_linrelax_run(t));
        }
    }

    #[test]
    fn decoupled_coupling_error_is_exactly_zero() {
        let model = Decoupled::new(DecoupledParams::default()).unwrap();
        let grid = SpatialGrid::new(8, 1).unwrap();
        let cfg = NoiseConfig {
            epsilon: 0.1,
            dt: 0.01,
            seed: 5,
            dv: 1,
            h: None,
            profile: Default::default(),
        };
        let noise = NoiseSource::Field(NoiseFieldSampler::new(cfg, 1, grid.centers()).unwrap());
        let init = InitialDataSampler::new(InitialLaw::default(), 6).unwrap();
        let opts = SimOptions {
            t_final: 0.3,
            step: StepOptions { dt: 0.01, blowup_cap: 1e6 },
        };
        let path = vec![MeasureMoments::zeros(&model); 30];
        let e = coupled_run(&model, &grid, 16, 0, opts, &noise, &init, &path).unwrap();
        assert_eq!(e.sup_mean_p2, 0.0);
        assert_eq!(e.sup_mean_p4, 0.0);
    }

    #[test]
    fn reflection_bookkeeping() {
        let model = Decoupled::new(DecoupledParams {
            level: 0.0,
            c_b: 0.0,
            s0: 1.0,
            ..Default::default()
        })
        .unwrap();
        let grid = SpatialGrid::new(4, 1).unwrap();
        let cfg = NoiseConfig {
            epsilon: 0.2,
            dt: 0.01,
            seed: 8,
            dv: 1,
            h: None,
            profile: Default::default(),
        };
        let noise = NoiseSource::Field(NoiseFieldSampler::new(cfg, 1, grid.centers()).unwrap());
        let init = InitialDataSampler::new(InitialLaw::Constant { level: 0.05 }, 0).unwrap();
        let mut pop = Population::new(&model, grid.centers(), 16, 0, &init).unwrap();
        let mut prev_ell = pop.ell.clone();
        let mut touched = false;
        for _ in 0..100 {
            pop.step(
                &model,
                MeasureSource::SelfConsistent,
                &noise,
                StepOptions { dt: 0.01, blowup_cap: 1e6 },
                None,
            )
            .unwrap();
            for j in 0..pop.levels.len() {
                assert!(pop.levels[j] >= 0.0);
                assert!(pop.ell[j] <= prev_ell[j]);
                let inc = pop.ell[j] - prev_ell[j];
                assert_eq!(pop.levels[j] * inc, 0.0);
                touched |= inc < 0.0;
            }
            prev_ell = pop.ell.clone();
        }
        assert!(touched);
    }

    #[test]
    fn initial_data_is_nonnegative_and_keyed_by_copy() {
        let init = InitialDataSampler::new(InitialLaw::default(), 9).unwrap();
        let a = init.sample(3, &[0.2], 2);
        let b = init.sample(3, &[0.2], 2);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v >= 0.0));
        assert_ne!(a, init.sample(4, &[0.2], 2));
    }

    #[test]
    fn blow_up_is_reported() {
        let model = Decoupled::new(DecoupledParams {
            rate: -50.0,
            ..Default::default()
        })
        .unwrap();
        let grid = SpatialGrid::new(2, 1).unwrap();
        let init = InitialDataSampler::new(InitialLaw::Constant { level: 1.0 }, 0).unwrap();
        let opts = SimOptions {
            t_final: 1.0,
            step: StepOptions { dt: 0.01, blowup_cap: 1e3 },
        };
        let r = simulate_particle_system(&model, &grid, 2, opts, &NoiseSource::Zero, &init, &[]);
        assert!(matches!(r, Err(Error::BlowUp { .. })));
    }
}
