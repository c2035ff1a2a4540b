//! Discrete optimal transport and Wasserstein distances.

use rand::SeedableRng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::WeightedPointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMethod {
    /// Sorted quantile coupling for equal-size uniform one-dimensional clouds.
    ExactOneD,
    /// Exact discrete transport by the transportation simplex.
    #[default]
    NetworkSimplex,
    /// Mean of exact distances between `repeats` uniform resamples of `n` atoms.
    Subsampled { n: usize, repeats: usize, seed: u64 },
}

impl TransportMethod {
    pub fn subsampled(seed: u64) -> Self {
        TransportMethod::Subsampled { n: 512, repeats: 8, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WassersteinEstimate {
    pub value: f64,
    /// Standard error for the subsampled method.
    pub stderr: Option<f64>,
}

/// Largest cloud handled by the exact solvers.
pub const MAX_EXACT_ATOMS: usize = 2048;

/// `W_p(a, b)` under the product metric with torus distance on `Q`.
pub fn wasserstein(a: &WeightedPointCloud, b: &WeightedPointCloud, p: u32, method: TransportMethod) -> Result<WassersteinEstimate> {
    if a.d() != b.d() || a.dv() != b.dv() {
        return Err(Error::domain("clouds live in different spaces"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("empty cloud"));
    }
    if p == 0 {
        return Err(Error::domain("order must be positive"));
    }
    match method {
        TransportMethod::ExactOneD => {
            let one_d = a.d() + a.dv() == 1;
            if one_d && a.len() == b.len() && a.has_uniform_weights() && b.has_uniform_weights() {
                let xs: Vec<f64> = (0..a.len()).map(|j| coord(a, j)).collect();
                let ys: Vec<f64> = (0..b.len()).map(|j| coord(b, j)).collect();
                if a.d() == 1 {
                    // Sorted coupling is not optimal on the circle.
                    return exact(a, b, p);
                }
                return Ok(WassersteinEstimate {
                    value: wasserstein_1d_sorted(&xs, &ys, p),
                    stderr: None,
                });
            }
            log::debug!("exact-1d not applicable; using network simplex");
            exact(a, b, p)
        }
        TransportMethod::NetworkSimplex => exact(a, b, p),
        TransportMethod::Subsampled { n, repeats, seed } => {
            if repeats < 2 {
                return Err(Error::config("subsampled transport needs at least 2 repeats"));
            }
            let values: Vec<f64> = (0..repeats)
                .into_par_iter()
                .map(|r| {
                    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Subsample, &[r as u64]);
                    let sa = a.resample(n, &mut rng);
                    let sb = b.resample(n, &mut rng);
                    let cost = cost_matrix(&sa, &sb, p);
                    assignment_cost(&cost, n, n) / n as f64
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|c| c.max(0.0).powf(1.0 / p as f64))
                .collect();
            let mean = crate::stats::mean(&values);
            let se = (crate::stats::variance(&values) / repeats as f64).sqrt();
            Ok(WassersteinEstimate {
                value: mean,
                stderr: Some(se),
            })
        }
    }
}

fn coord(c: &WeightedPointCloud, j: usize) -> f64 {
    if c.d() == 1 {
        c.x(j)[0]
    } else {
        c.u(j)[0]
    }
}

fn exact(a: &WeightedPointCloud, b: &WeightedPointCloud, p: u32) -> Result<WassersteinEstimate> {
    if a.len() > MAX_EXACT_ATOMS || b.len() > MAX_EXACT_ATOMS {
        return Err(Error::domain(format!(
            "exact transport limited to {MAX_EXACT_ATOMS} atoms; use the subsampled method"
        )));
    }
    let cost = cost_matrix(a, b, p);
    let total = transport_cost(&cost, a.weights(), b.weights())?;
    Ok(WassersteinEstimate {
        value: total.max(0.0).powf(1.0 / p as f64),
        stderr: None,
    })
}

fn cost_matrix(a: &WeightedPointCloud, b: &WeightedPointCloud, p: u32) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            c.push(a.distance(i, b, j).powi(p as i32));
        }
    }
    c
}

/// `W_p` between equal-size uniform samples on the line.
pub fn wasserstein_1d_sorted(xs: &[f64], ys: &[f64], p: u32) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs().powi(p as i32)).sum();
    (s / xs.len() as f64).powf(1.0 / p as f64)
}

/// `W_1` between uniform samples and a distribution given by its CDF on `[lo, hi]`,
/// as `int |F_n - F|` by composite midpoint quadrature on `n_grid` cells.
pub fn w1_samples_vs_cdf(samples: &[f64], cdf: impl Fn(f64) -> f64, lo: f64, hi: f64, n_grid: usize) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let h = (hi - lo) / n_grid as f64;
    let mut acc = 0.0;
    for c in 0..n_grid {
        let u = lo + (c as f64 + 0.5) * h;
        let fe = s.partition_point(|&v| v <= u) as f64 / n;
        acc += (fe - cdf(u)).abs() * h;
    }
    acc
}

/// Minimal cost of transporting `supply` onto `demand` (totals are matched by
/// rescaling `demand`), by the transportation simplex with MODI potentials.
///
/// `cost` is row-major `supply.len() x demand.len()`.
pub fn transport_cost(cost: &[f64], supply: &[f64], demand: &[f64]) -> Result<f64> {
    let (n, m) = (supply.len(), demand.len());
    if cost.len() != n * m {
        return Err(Error::domain("cost matrix shape mismatch"));
    }
    if supply.iter().chain(demand).any(|&w| !(w >= 0.0)) {
        return Err(Error::domain("transport weights must be nonnegative"));
    }
    let ta: f64 = supply.iter().sum();
    let tb: f64 = demand.iter().sum();
    if !(ta > 0.0 && tb > 0.0) {
        return Err(Error::domain("transport weights must have positive total"));
    }
    let a: Vec<f64> = supply.iter().map(|w| w / ta).collect();
    let b: Vec<f64> = demand.iter().map(|w| w / tb).collect();
    let flow = TransportSimplex::new(cost, &a, &b).solve()?;
    Ok(flow.iter().map(|&(i, j, f)| f * cost[i * m + j]).sum::<f64>() * ta)
}

/// Optimal flows `(row, column, mass)` on the basis returned by the simplex.
pub fn transport_plan(cost: &[f64], supply: &[f64], demand: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
    let ta: f64 = supply.iter().sum();
    let tb: f64 = demand.iter().sum();
    let a: Vec<f64> = supply.iter().map(|w| w / ta).collect();
    let b: Vec<f64> = demand.iter().map(|w| w / tb).collect();
    let mut flow = TransportSimplex::new(cost, &a, &b).solve()?;
    for f in &mut flow {
        f.2 *= ta;
    }
    Ok(flow)
}

struct TransportSimplex<'a> {
    cost: &'a [f64],
    n: usize,
    m: usize,
    /// Basic cells `(i, j)` and their flows; always `n + m - 1` entries.
    basis: Vec<(usize, usize, f64)>,
}

impl<'a> TransportSimplex<'a> {
    fn new(cost: &'a [f64], a: &[f64], b: &[f64]) -> Self {
        let (n, m) = (a.len(), b.len());
        // North-west corner start; every step retires one row or column so the
        // basis is a spanning tree of the bipartite row/column graph.
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let mut basis = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let f = ra[i].min(rb[j]);
            basis.push((i, j, f));
            ra[i] -= f;
            rb[j] -= f;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && ra[i] <= rb[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { cost, n, m, basis }
    }

    fn solve(mut self) -> Result<Vec<(usize, usize, f64)>> {
        let (n, m) = (self.n, self.m);
        let scale = self.cost.iter().fold(0.0f64, |s, c| s.max(c.abs())).max(1e-300);
        let tol = 1e-12 * scale;
        let max_iter = 50 * (n + m) * (n + m) + 1000;
        let nodes = n + m;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        let mut pot = vec![0.0; nodes];
        let mut parent = vec![(usize::MAX, usize::MAX); nodes];
        let mut order = Vec::with_capacity(nodes);
        for _ in 0..max_iter {
            for a in adj.iter_mut() {
                a.clear();
            }
            for (e, &(i, j, _)) in self.basis.iter().enumerate() {
                adj[i].push((n + j, e));
                adj[n + j].push((i, e));
            }
            // Potentials u_i + v_j = c_ij along the tree rooted at row 0.
            parent.fill((usize::MAX, usize::MAX));
            order.clear();
            order.push(0);
            parent[0] = (0, usize::MAX);
            pot[0] = 0.0;
            let mut head = 0;
            while head < order.len() {
                let v = order[head];
                head += 1;
                for &(w, e) in &adj[v] {
                    if parent[w].0 == usize::MAX {
                        parent[w] = (v, e);
                        let (i, j, _) = self.basis[e];
                        let c = self.cost[i * m + j];
                        pot[w] = c - pot[v];
                        order.push(w);
                    }
                }
            }
            if order.len() != nodes {
                return Err(Error::numerical("transport basis is not a spanning tree"));
            }
            let mut best = (-tol, usize::MAX, usize::MAX);
            for i in 0..n {
                let ui = pot[i];
                let row = &self.cost[i * m..(i + 1) * m];
                for (j, &c) in row.iter().enumerate() {
                    let r = c - ui - pot[n + j];
                    if r < best.0 {
                        best = (r, i, j);
                    }
                }
            }
            if best.1 == usize::MAX {
                return Ok(self.basis);
            }
            let (ei, ej) = (best.1, best.2);
            // The cycle closes the tree path from column ej back to row ei.
            let path = tree_path(&parent, &order, n + ej, ei);
            let mut theta = f64::INFINITY;
            let mut leave = usize::MAX;
            for (k, &e) in path.iter().enumerate() {
                if k % 2 == 0 && self.basis[e].2 < theta {
                    theta = self.basis[e].2;
                    leave = e;
                }
            }
            for (k, &e) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.basis[e].2 -= theta;
                } else {
                    self.basis[e].2 += theta;
                }
            }
            self.basis[leave] = (ei, ej, theta);
        }
        Err(Error::numerical("transport simplex did not converge"))
    }
}

/// Basis edges on the tree path from `from` to `to`, in order starting at `from`.
fn tree_path(parent: &[(usize, usize)], order: &[usize], from: usize, to: usize) -> Vec<usize> {
    let mut depth = vec![0usize; parent.len()];
    for &v in order.iter().skip(1) {
        depth[v] = depth[parent[v].0] + 1;
    }
    let (mut a, mut b) = (from, to);
    let mut head = Vec::new();
    let mut tail = Vec::new();
    while depth[a] > depth[b] {
        head.push(parent[a].1);
        a = parent[a].0;
    }
    while depth[b] > depth[a] {
        tail.push(parent[b].1);
        b = parent[b].0;
    }
    while a != b {
        head.push(parent[a].1);
        a = parent[a].0;
        tail.push(parent[b].1);
        b = parent[b].0;
    }
    tail.reverse();
    head.extend(tail);
    head
}

/// Minimal total cost of a perfect assignment in an `n x n` cost matrix
/// (shortest augmenting paths with potentials, `O(n^3)`).
pub fn assignment_cost(cost: &[f64], n: usize, m: usize) -> f64 {
    assert_eq!(n, m, "assignment needs a square cost matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[(p[j] - 1) * n + (j - 1)]).sum()
}

/// Seeded generator for random transport instances used by tests and the oracle suite.
pub fn instance_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
