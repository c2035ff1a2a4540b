//! Configuration-driven experiments. Each experiment returns an [`Outcome`]
//! holding tables, plots and acceptance checks; [`Outcome::write`] puts them on disk.

mod clt;
pub mod fit;
mod oracle;
pub mod output;
mod rate;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{InitialDataSampler, InitialLaw, SimOptions, StepOptions};
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ModelSpec};
use crate::noise_field::{NoiseConfig, NoiseFieldSampler, RadialProfile};
use crate::rng::{derive_seed, Purpose};
use crate::test_space::DictionarySpec;

pub use fit::{fit_rate, RateFit};
pub use output::{Plot, Series, Table};

/// The runnable experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    MeanFieldRate,
    WassersteinDecay,
    QvConvergence,
    CltInitial,
    CltTrajectory,
    SpdeOnly,
    OracleSuite,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::MeanFieldRate,
        Experiment::WassersteinDecay,
        Experiment::QvConvergence,
        Experiment::CltInitial,
        Experiment::CltTrajectory,
        Experiment::SpdeOnly,
        Experiment::OracleSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::MeanFieldRate => "mean-field-rate",
            Experiment::WassersteinDecay => "wasserstein-decay",
            Experiment::QvConvergence => "qv-convergence",
            Experiment::CltInitial => "clt-initial",
            Experiment::CltTrajectory => "clt-trajectory",
            Experiment::SpdeOnly => "spde-only",
            Experiment::OracleSuite => "oracle-suite",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Correlated-noise settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub epsilon: f64,
    pub h: Option<f64>,
    pub profile: RadialProfile,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            h: None,
            profile: RadialProfile::default(),
        }
    }
}

/// Time stepping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub t_final: f64,
    pub dt: f64,
    pub blowup_cap: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            dt: 1e-3,
            blowup_cap: 1e6,
        }
    }
}

/// Acceptance window `|value - target| <= tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub target: f64,
    pub tol: f64,
}

impl Window {
    pub fn contains(&self, v: f64) -> bool {
        (v - self.target).abs() <= self.tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSection {
    pub m_sweep: Vec<usize>,
    pub n_fixed: usize,
    pub n_sweep: Vec<usize>,
    pub m_fixed: usize,
    /// Replicas are pooled until at least this many copies are averaged.
    pub min_copies: usize,
    pub m_slope: Option<Window>,
    pub n_slope: Option<Window>,
}

impl Default for RateSection {
    fn default() -> Self {
        Self {
            m_sweep: vec![16, 64, 256, 1024],
            n_fixed: 256,
            n_sweep: vec![8, 32, 128, 512],
            m_fixed: 1024,
            min_copies: 1024,
            m_slope: None,
            n_slope: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySection {
    pub m_sweep: Vec<usize>,
    pub n: usize,
    pub runs: usize,
}

impl Default for DecaySection {
    fn default() -> Self {
        Self {
            m_sweep: vec![16, 64, 256, 1024],
            n: 64,
            runs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QvSection {
    /// `(M, N)` pairs in increasing order.
    pub sizes: Vec<[usize; 2]>,
    /// Dictionary indices of the members checked.
    pub members: Vec<usize>,
    pub runs: usize,
    pub ensemble_k: usize,
    pub ensemble_n: usize,
    pub max_final_gap: f64,
}

impl Default for QvSection {
    fn default() -> Self {
        Self {
            sizes: vec![[64, 16], [256, 64], [1024, 256]],
            members: vec![0, 1, 2],
            runs: 1,
            ensemble_k: 2048,
            ensemble_n: 512,
            max_final_gap: 0.1,
        }
    }
}

/// Joint growth of `M` with `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// `sqrt(M) = 0.1 N^{alpha/d}`.
    Clt,
    /// `sqrt(M) = N^{alpha/d}`.
    Critical,
    /// `sqrt(M) = 3 N^{alpha/d}`.
    Broken,
}

impl Schedule {
    pub fn factor(self) -> f64 {
        match self {
            Schedule::Clt => 0.1,
            Schedule::Critical => 1.0,
            Schedule::Broken => 3.0,
        }
    }

    /// Number of copies at `n` grid points, at least 1. The `clt` schedule rounds down
    /// so that `sqrt(M) N^{-alpha/d}` never exceeds its factor.
    pub fn copies(self, n: usize, alpha: f64, d: usize) -> usize {
        let m = (self.factor() * (n as f64).powf(alpha / d as f64)).powi(2);
        let m = match self {
            Schedule::Clt => (m * (1.0 + 1e-12)).floor(),
            _ => m.round(),
        };
        (m as usize).max(1)
    }
}

/// `sqrt(M) N^{-alpha/d}`.
pub fn scaling_ratio(m: usize, n: usize, alpha: f64, d: usize) -> f64 {
    (m as f64).sqrt() * (n as f64).powf(-alpha / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltCase {
    pub schedule: Schedule,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltSection {
    pub cases: Vec<CltCase>,
    pub runs: usize,
    pub members: Vec<usize>,
    /// Copies used for the initial covariance.
    pub q_samples: usize,
    /// Spatial points for the initial covariance and the reference pairing.
    pub q_grid: usize,
    pub ref_grid: usize,
    pub min_p_value: f64,
    pub min_excess_ratio: f64,
}

impl Default for CltSection {
    fn default() -> Self {
        Self {
            cases: vec![
                CltCase {
                    schedule: Schedule::Clt,
                    n: 16384,
                },
                CltCase {
                    schedule: Schedule::Broken,
                    n: 64,
                },
            ],
            runs: 300,
            members: vec![0, 1, 2],
            q_samples: 20000,
            q_grid: 4096,
            ref_grid: 1 << 18,
            min_p_value: 0.01,
            min_excess_ratio: 1.5,
        }
    }
}

/// Ensemble and integration settings of the Galerkin Langevin system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalerkinSection {
    pub ensemble_k: usize,
    pub ensemble_n: usize,
    /// Steps between assembly nodes.
    pub node_every: usize,
    pub ode_dt: f64,
    pub q_samples: usize,
    pub q_grid: usize,
}

impl Default for GalerkinSection {
    fn default() -> Self {
        Self {
            ensemble_k: 1024,
            ensemble_n: 256,
            node_every: 5,
            ode_dt: 1e-3,
            q_samples: 20000,
            q_grid: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub m: usize,
    pub n: usize,
    pub runs: usize,
    pub members: Vec<usize>,
    pub max_rel_error: f64,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self {
            m: 1024,
            n: 256,
            runs: 200,
            members: vec![0, 1, 2],
            max_rel_error: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpdeSection {
    pub paths: usize,
    pub dt: f64,
}

impl Default for SpdeSection {
    fn default() -> Self {
        Self { paths: 4000, dt: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub noise_pairs: usize,
    pub noise_steps: usize,
    pub noise_tol: f64,
    pub identity_pairs: usize,
    pub identity_tol: f64,
    pub zero_sizes: Vec<[usize; 2]>,
    pub fp_ensemble: usize,
    pub fp_t_final: f64,
    pub fp_dt: f64,
    pub fp_max_w1: f64,
    pub transport_instances: usize,
    pub transport_tol: f64,
    pub audit_samples: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            noise_pairs: 64,
            noise_steps: 10_000,
            noise_tol: 0.05,
            identity_pairs: 100,
            identity_tol: 1e-8,
            zero_sizes: vec![[4, 8], [16, 32], [64, 64]],
            fp_ensemble: 1 << 16,
            fp_t_final: 1.0,
            fp_dt: 1e-3,
            fp_max_w1: 0.05,
            transport_instances: 50,
            transport_tol: 1e-9,
            audit_samples: 1000,
        }
    }
}

fn default_seed() -> u64 {
    20240601
}

fn default_k_ref() -> usize {
    1 << 16
}

/// The experiment configuration tree, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(default)]
    pub init: InitialLaw,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub sim: SimSection,
    /// Regularity used by the scaling schedules; defaults to the initial profile's.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_k_ref")]
    pub k_ref: usize,
    #[serde(default)]
    pub dictionary: DictionarySpec,
    pub rate: Option<RateSection>,
    pub decay: Option<DecaySection>,
    pub qv: Option<QvSection>,
    pub clt: Option<CltSection>,
    pub galerkin: Option<GalerkinSection>,
    pub trajectory: Option<TrajectorySection>,
    pub spde: Option<SpdeSection>,
    pub oracle: Option<OracleSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}`: {why}")));
        if !(self.noise.epsilon > 0.0 && self.noise.epsilon <= 0.5) {
            return bad("noise.epsilon", "must lie in (0, 0.5]");
        }
        if !(self.sim.dt > 0.0) || !(self.sim.t_final > 0.0) {
            return bad("sim", "t_final and dt must be positive");
        }
        self.sim_options().n_steps().map_err(|_| Error::Config("`sim.t_final` must be a multiple of `sim.dt`".into()))?;
        if self.k_ref == 0 || !self.k_ref.is_multiple_of(crate::noise_field::MarginalNoise::BLOCK) {
            return bad("k_ref", "must be a positive multiple of 1024");
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad("alpha", "must lie in (0, 1]");
            }
        }
        let positive = |key: &str, v: &[usize]| -> Result<()> {
            if v.is_empty() || v.contains(&0) {
                return bad(key, "sizes must be positive and nonempty");
            }
            Ok(())
        };
        if let Some(r) = &self.rate {
            positive("rate.m_sweep", &r.m_sweep)?;
            positive("rate.n_sweep", &r.n_sweep)?;
            positive("rate.n_fixed", &[r.n_fixed, r.m_fixed, r.min_copies])?;
        }
        if let Some(r) = &self.decay {
            positive("decay.m_sweep", &r.m_sweep)?;
            positive("decay.n", &[r.n, r.runs])?;
        }
        if let Some(q) = &self.qv {
            positive("qv.sizes", &q.sizes.iter().flatten().copied().collect::<Vec<_>>())?;
            positive("qv.runs", &[q.runs, q.ensemble_n])?;
            if q.ensemble_k < 2 {
                return bad("qv.ensemble_k", "needs at least 2 copies");
            }
        }
        if let Some(c) = &self.clt {
            positive("clt.cases", &c.cases.iter().map(|c| c.n).collect::<Vec<_>>())?;
            if c.runs < 200 {
                return bad("clt.runs", "the Gaussianity test needs at least 200 runs");
            }
            if c.q_samples < 1000 {
                return bad("clt.q_samples", "needs at least 1000 samples");
            }
        }
        if let Some(g) = &self.galerkin {
            positive("galerkin", &[g.ensemble_k, g.ensemble_n, g.node_every, g.q_grid])?;
            if g.q_samples < 1000 {
                return bad("galerkin.q_samples", "needs at least 1000 samples");
            }
        }
        if let Some(t) = &self.trajectory {
            positive("trajectory", &[t.m, t.n])?;
            if t.runs < 2 {
                return bad("trajectory.runs", "needs at least 2 runs");
            }
        }
        Ok(())
    }

    /// Canonical JSON form, the input of the config hash.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        output::sha256_hex(self.canonical().as_bytes())
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            t_final: self.sim.t_final,
            step: StepOptions {
                dt: self.sim.dt,
                blowup_cap: self.sim.blowup_cap,
            },
        }
    }

    pub fn steps(&self) -> usize {
        self.sim_options().n_steps().expect("validated")
    }

    pub fn build_model(&self) -> Result<Box<dyn CoefficientModel>> {
        self.model.build()
    }

    /// Child seed for one role of the experiment.
    pub fn seed_for(&self, role: Role) -> u64 {
        derive_seed(self.seed, Purpose::Replica, &[role as u64])
    }

    pub fn sampler(&self, role: Role) -> Result<InitialDataSampler> {
        InitialDataSampler::new(self.init.clone(), self.seed_for(role))
    }

    pub fn field(&self, role: Role, d: usize, dv: usize, locations: &[f64]) -> Result<NoiseFieldSampler> {
        let cfg = NoiseConfig {
            epsilon: self.noise.epsilon,
            dt: self.sim.dt,
            seed: self.seed_for(role),
            dv,
            h: self.noise.h,
            profile: self.noise.profile,
        };
        NoiseFieldSampler::new(cfg, d, locations)
    }

    /// Regularity exponent for the schedules.
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match &self.init {
            InitialLaw::Field(data) => data.profile.alpha(),
            InitialLaw::Constant { .. } => 1.0,
        })
    }

    fn section<T: Clone + Default>(&self, s: &Option<T>) -> T {
        s.clone().unwrap_or_default()
    }
}

/// Independent random roles within one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    RunInit = 1,
    RunNoise = 2,
    Reference = 3,
    ReferenceInit = 4,
    EnsembleInit = 5,
    EnsembleNoise = 6,
    Covariance = 7,
    Paths = 8,
    Oracle = 9,
}

/// One acceptance rule and its verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub experiment: Experiment,
    pub config_hash: String,
    pub seed: u64,
    pub tables: Vec<Table>,
    pub plots: Vec<(String, Plot)>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

impl Outcome {
    fn new(experiment: Experiment, cfg: &ExperimentConfig) -> Self {
        Self {
            experiment,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            tables: Vec::new(),
            plots: Vec::new(),
            checks: Vec::new(),
            summary: serde_json::Map::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Rendered CSV files by name.
    pub fn csv(&self) -> Vec<(String, String)> {
        self.tables
            .iter()
            .map(|t| (format!("{}.csv", t.name), t.render(self.experiment.name(), &self.config_hash, self.seed)))
            .collect()
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(value).expect("serializable summary entry"));
    }

    /// Write CSVs, plots and `summary.json`; returns the written paths.
    pub fn write(&self, dir: &Path, elapsed_seconds: f64) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, text) in self.csv() {
            let p = dir.join(name);
            std::fs::write(&p, text)?;
            paths.push(p);
        }
        for (name, plot) in &self.plots {
            paths.push(plot.write(dir, name)?);
        }
        let summary = serde_json::json!({
            "experiment": self.experiment.name(),
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "passed": self.passed(),
            "checks": self.checks,
            "elapsed_seconds": elapsed_seconds,
            "results": self.summary,
        });
        let p = dir.join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
        paths.push(p);
        Ok(paths)
    }
}

/// Run one experiment in the current rayon pool.
pub fn run_experiment(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut out = Outcome::new(experiment, cfg);
    match experiment {
        Experiment::MeanFieldRate => rate::mean_field_rate(cfg, &cfg.section(&cfg.rate), &mut out)?,
        Experiment::WassersteinDecay => rate::wasserstein_decay(cfg, &cfg.section(&cfg.decay), &mut out)?,
        Experiment::QvConvergence => clt::qv_convergence(cfg, &cfg.section(&cfg.qv), &mut out)?,
        Experiment::CltInitial => clt::clt_initial(cfg, &cfg.section(&cfg.clt), &mut out)?,
        Experiment::CltTrajectory => clt::clt_trajectory(
            cfg,
            &cfg.section(&cfg.galerkin),
            &cfg.section(&cfg.trajectory),
            &mut out,
        )?,
        Experiment::SpdeOnly => clt::spde_only(cfg, &cfg.section(&cfg.galerkin), &cfg.section(&cfg.spde), &mut out)?,
        Experiment::OracleSuite => oracle::oracle_suite(cfg, &cfg.section(&cfg.oracle), &mut out)?,
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[model]
name = "linrelax"
c_b = 1.25
[sim]
t_final = 0.1
dt = 0.01
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.steps(), 10);
        assert_eq!(cfg.noise.epsilon, 0.1);
        assert!((cfg.alpha() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_builtin_model_parses() {
        for m in ["name = \"decoupled\"\nrate = 2.0", "name = \"homog\"\nd = 2\nkappa = 0.1", "name = \"linrelax\""] {
            let text = format!("[model]\n{m}\n");
            let cfg = ExperimentConfig::from_toml(&text).unwrap();
            cfg.build_model().unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[rate]\nm_swep = [1]\n")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("m_swep"), "{err}");
        let err = ExperimentConfig::from_toml("[model]\nname = \"homog\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for extra in ["[noise]\nepsilon = 0.7", "k_ref = 1000"] {
            let err = ExperimentConfig::from_toml(&format!("{MINIMAL}\n{extra}\n")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{extra}: {err}");
        }
        let err = ExperimentConfig::from_toml("[model]\nname = \"linrelax\"\n[sim]\nt_final = 0.105\ndt = 0.01\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn schedules_respect_their_ratio() {
        for n in [16usize, 64, 1024, 16384] {
            let m = Schedule::Clt.copies(n, 0.5, 1);
            assert!(scaling_ratio(m, n, 0.5, 1) <= 0.1 || m == 1);
            let b = Schedule::Broken.copies(n, 0.5, 1);
            assert!((scaling_ratio(b, n, 0.5, 1) - 3.0).abs() < 0.1);
        }
        assert_eq!(Schedule::Critical.copies(64, 0.5, 1), 64);
        assert_eq!(Schedule::Clt.copies(16384, 0.5, 1), 163);
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }
}
