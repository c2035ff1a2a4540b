//! Empirical measures on `Q x R+^dv` and their pairings with test functions.

use crate::error::{Error, Result};
use crate::noise_field::torus_delta;

/// Weighted atoms `(x_j, u_j)`; `d = 0` gives a pure activity-level cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedPointCloud {
    d: usize,
    dv: usize,
    xs: Vec<f64>,
    us: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedPointCloud {
    pub fn new(d: usize, dv: usize) -> Self {
        Self {
            d,
            dv,
            ..Default::default()
        }
    }

    pub fn with_capacity(d: usize, dv: usize, n: usize) -> Self {
        Self {
            d,
            dv,
            xs: Vec::with_capacity(n * d),
            us: Vec::with_capacity(n * dv),
            weights: Vec::with_capacity(n),
        }
    }

    /// Uniform weights over the atoms given as flat coordinate arrays.
    pub fn uniform(d: usize, dv: usize, xs: Vec<f64>, us: Vec<f64>) -> Result<Self> {
        let n = us.len() / dv.max(1);
        if us.len() != n * dv || xs.len() != n * d {
            return Err(Error::domain("coordinate arrays do not match the atom count"));
        }
        Ok(Self {
            d,
            dv,
            xs,
            us,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn push(&mut self, x: &[f64], u: &[f64], w: f64) {
        debug_assert_eq!(x.len(), self.d);
        debug_assert_eq!(u.len(), self.dv);
        self.xs.extend_from_slice(x);
        self.us.extend_from_slice(u);
        self.weights.push(w);
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn dv(&self) -> usize {
        self.dv
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn x(&self, j: usize) -> &[f64] {
        &self.xs[j * self.d..(j + 1) * self.d]
    }
    pub fn u(&self, j: usize) -> &[f64] {
        &self.us[j * self.dv..(j + 1) * self.dv]
    }
    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Whether weights are nonnegative, sum to one, and all levels are nonnegative.
    pub fn is_probability(&self) -> bool {
        self.weights.iter().all(|&w| w >= 0.0)
            && (self.total_weight() - 1.0).abs() <= 1e-12 * self.len().max(1) as f64
            && self.us.iter().all(|&u| u >= 0.0)
    }

    /// Whether all weights coincide.
    pub fn has_uniform_weights(&self) -> bool {
        match self.weights.first() {
            None => true,
            Some(&w0) => self.weights.iter().all(|&w| (w - w0).abs() <= 1e-15 * w0.abs().max(1e-300)),
        }
    }

    /// `<mu, psi>`.
    pub fn pair(&self, psi: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
        (0..self.len()).map(|j| self.weights[j] * psi(self.x(j), self.u(j))).sum()
    }

    /// The activity-level marginal as a `d = 0` cloud.
    pub fn u_marginal(&self) -> Self {
        Self {
            d: 0,
            dv: self.dv,
            xs: Vec::new(),
            us: self.us.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Atoms with a convex combination of weights, `(1 - lambda) self + lambda other`.
    pub fn mixture(&self, other: &Self, lambda: f64) -> Result<Self> {
        if self.d != other.d || self.dv != other.dv {
            return Err(Error::domain("mixture of clouds with different dimensions"));
        }
        let mut out = Self::with_capacity(self.d, self.dv, self.len() + other.len());
        for j in 0..self.len() {
            out.push(self.x(j), self.u(j), (1.0 - lambda) * self.weight(j));
        }
        for j in 0..other.len() {
            out.push(other.x(j), other.u(j), lambda * other.weight(j));
        }
        Ok(out)
    }

    /// Uniformly resample `n` atoms (with replacement, proportional to weight) into a uniform cloud.
    pub fn resample(&self, n: usize, rng: &mut impl rand::Rng) -> Self {
        let total = self.total_weight();
        let mut cum = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w / total;
            cum.push(acc);
        }
        let mut out = Self::with_capacity(self.d, self.dv, n);
        for _ in 0..n {
            let r: f64 = rng.random();
            let j = cum.partition_point(|&c| c <= r).min(self.len() - 1);
            out.push(self.x(j), self.u(j), 1.0 / n as f64);
        }
        out
    }

    /// Product-space distance with the torus metric on the location part.
    pub fn distance(&self, j: usize, other: &Self, k: usize) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.x(j).iter().zip(other.x(k)) {
            let t = torus_delta(*a, *b);
            s += t * t;
        }
        for (a, b) in self.u(j).iter().zip(other.u(k)) {
            s += (a - b) * (a - b);
        }
        s.sqrt()
    }
}

/// Atoms `(x, y, u, v)` of a joint empirical measure over column pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointPointCloud {
    pub d: usize,
    pub dv: usize,
    /// Per atom: `x` (d), `y` (d), `u` (dv), `v` (dv).
    pub coords: Vec<f64>,
    pub weights: Vec<f64>,
    /// Number of column pairs kept when the pair set was subsampled.
    pub subsampled_pairs: Option<usize>,
}

impl JointPointCloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    fn stride(&self) -> usize {
        2 * (self.d + self.dv)
    }
    pub fn atom(&self, j: usize) -> (&[f64], &[f64], &[f64], &[f64]) {
        let s = self.stride();
        let a = &self.coords[j * s..(j + 1) * s];
        let (x, rest) = a.split_at(self.d);
        let (y, rest) = rest.split_at(self.d);
        let (u, v) = rest.split_at(self.dv);
        (x, y, u, v)
    }

    pub fn pair(&self, psi: impl Fn(&[f64], &[f64], &[f64], &[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|j| {
                let (x, y, u, v) = self.atom(j);
                self.weights[j] * psi(x, y, u, v)
            })
            .sum()
    }

    /// Marginal over `(y, v)`.
    pub fn first_marginal(&self) -> WeightedPointCloud {
        let mut out = WeightedPointCloud::with_capacity(self.d, self.dv, self.len());
        for j in 0..self.len() {
            let (x, _, u, _) = self.atom(j);
            out.push(x, u, self.weights[j]);
        }
        out
    }
}

/// Copy-major view of a particle configuration: `levels[(k * n + i) * dv + beta]`.
#[derive(Debug, Clone, Copy)]
pub struct Configuration<'a> {
    pub d: usize,
    pub dv: usize,
    /// Column centers, `n * d` values.
    pub centers: &'a [f64],
    pub m: usize,
    pub levels: &'a [f64],
}

impl Configuration<'_> {
    pub fn n(&self) -> usize {
        self.centers.len() / self.d.max(1)
    }
    pub fn level(&self, i: usize, k: usize) -> &[f64] {
        let o = (k * self.n() + i) * self.dv;
        &self.levels[o..o + self.dv]
    }
    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.d..(i + 1) * self.d]
    }
}

/// Uniform atoms `(x_i, u_ik)` with weight `1 / (M N)`.
pub fn empirical_measure(c: Configuration<'_>) -> WeightedPointCloud {
    let n = c.n();
    let w = 1.0 / (n * c.m) as f64;
    let mut out = WeightedPointCloud::with_capacity(c.d, c.dv, n * c.m);
    for i in 0..n {
        for k in 0..c.m {
            out.push(c.center(i), c.level(i, k), w);
        }
    }
    out
}

/// Atoms `(x_i, x_j, u_ik, u_jk)` with weight `1 / (M N^2)`, sharing the copy index.
///
/// When `N^2 M` exceeds `max_atoms`, column pairs are drawn uniformly at random
/// (with replacement) and reweighted; the number of pairs kept is recorded.
pub fn joint_empirical(c: Configuration<'_>, max_atoms: usize, seed: u64) -> JointPointCloud {
    let n = c.n();
    let mut out = JointPointCloud {
        d: c.d,
        dv: c.dv,
        ..Default::default()
    };
    let push = |out: &mut JointPointCloud, i: usize, j: usize, w: f64| {
        for k in 0..c.m {
            out.coords.extend_from_slice(c.center(i));
            out.coords.extend_from_slice(c.center(j));
            out.coords.extend_from_slice(c.level(i, k));
            out.coords.extend_from_slice(c.level(j, k));
            out.weights.push(w);
        }
    };
    if n * n * c.m <= max_atoms {
        let w = 1.0 / (c.m * n * n) as f64;
        for i in 0..n {
            for j in 0..n {
                push(&mut out, i, j, w);
            }
        }
    } else {
        use rand::Rng;
        let pairs = (max_atoms / c.m).max(1);
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Subsample, &[n as u64, c.m as u64]);
        let w = 1.0 / (c.m * pairs) as f64;
        for _ in 0..pairs {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            push(&mut out, i, j, w);
        }
        out.subsampled_pairs = Some(pairs);
    }
    out
}
