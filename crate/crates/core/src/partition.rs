//! State-space partition: maps reduced concrete states to abstract state ids.

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_blocks;

/// Abstract state identifier. `StateId::UNSEEN` marks a state outside the
/// fitted abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u64);

impl StateId {
    pub const UNSEEN: StateId = StateId(u64::MAX);

    pub fn is_unseen(self) -> bool {
        self == Self::UNSEEN
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_unseen() {
            f.write_str("UNSEEN")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Sliding N-step window over a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryComposer {
    pub window: usize,
}

impl HistoryComposer {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("history window must be >= 1".into()));
        }
        Ok(HistoryComposer { window })
    }

    pub fn compose(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        compose_history(rows, self.window)
    }
}

impl Default for HistoryComposer {
    fn default() -> Self {
        HistoryComposer { window: 1 }
    }
}

/// Concatenates every run of `window` consecutive rows into one row.
pub fn compose_history(rows: ArrayView2<f64>, window: usize) -> Result<Array2<f64>> {
    let t = rows.nrows();
    if window == 0 {
        return Err(Error::InvalidConfig("history window must be >= 1".into()));
    }
    if t < window {
        return Err(Error::TraceTooShort {
            needed: window,
            got: t,
        });
    }
    if window == 1 {
        return Ok(rows.to_owned());
    }
    let windows: Vec<Array2<f64>> = (0..window)
        .map(|offset| {
            rows.slice(s![offset..t - window + 1 + offset, ..])
                .to_owned()
        })
        .collect();
    let views: Vec<ArrayView2<f64>> = windows.iter().map(|w| w.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("equal row counts"))
}

fn column_std(rows: ArrayView2<f64>) -> Array1<f64> {
    rows.std_axis(Axis(0), 0.0)
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

fn check_dim(expected: usize, rows: ArrayView2<f64>) -> Result<()> {
    if rows.ncols() != expected {
        return Err(Error::DimMismatch {
            expected,
            got: rows.ncols(),
        });
    }
    Ok(())
}

/// Uniform grid over the training bounding box, `m` cells per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPartitioner {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub m: usize,
    /// Per-dimension training standard deviation (perturbation scale for SEN).
    pub scale: Vec<f64>,
}

impl GridPartitioner {
    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    /// Size of the abstract id space, `m^dims`, if it fits in a u64.
    pub fn id_space(&self) -> Option<u64> {
        (self.m as u64).checked_pow(u32::try_from(self.dims()).ok()?)
    }

    fn cell(&self, dim: usize, x: f64) -> Option<u64> {
        let (lo, hi) = (self.lo[dim], self.hi[dim]);
        if x < lo || x > hi {
            return None;
        }
        if lo == hi {
            return Some(0);
        }
        let raw = ((x - lo) * self.m as f64 / (hi - lo)).floor() as u64;
        Some(raw.min(self.m as u64 - 1))
    }

    pub fn assign_row(&self, row: ArrayView1<f64>) -> StateId {
        let mut id = 0u64;
        let mut radix = 1u64;
        for (dim, &x) in row.iter().enumerate() {
            match self.cell(dim, x) {
                Some(c) => id += c * radix,
                None => return StateId::UNSEEN,
            }
            radix = radix.wrapping_mul(self.m as u64);
        }
        StateId(id)
    }
}

pub fn grid_fit(train_rows: ArrayView2<f64>, m: usize) -> Result<GridPartitioner> {
    if train_rows.nrows() == 0 || train_rows.ncols() == 0 {
        return Err(Error::EmptyInput("grid training rows".into()));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("grid m must be >= 1".into()));
    }
    let lo: Vec<f64> = train_rows
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let hi: Vec<f64> = train_rows
        .axis_iter(Axis(1))
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let grid = GridPartitioner {
        lo,
        hi,
        m,
        scale: column_std(train_rows).to_vec(),
    };
    if grid.id_space().is_none_or(|n| n == u64::MAX) {
        return Err(Error::InvalidConfig(format!(
            "grid id space {m}^{} overflows u64",
            grid.dims()
        )));
    }
    Ok(grid)
}

pub fn grid_assign(p: &GridPartitioner, rows: ArrayView2<f64>) -> Result<Vec<StateId>> {
    check_dim(p.dims(), rows)?;
    Ok(rows.outer_iter().map(|r| p.assign_row(r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    KMeans,
    Gmm,
}

/// Cluster-based partition (k-means centers or diagonal GMM components).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartitioner {
    pub method: ClusterMethod,
    #[serde(with = "serde_blocks::array2")]
    pub centers: Array2<f64>,
    #[serde(with = "serde_blocks::option_array1")]
    pub gmm_weights: Option<Array1<f64>>,
    #[serde(with = "serde_blocks::option_array2")]
    pub gmm_diag_variances: Option<Array2<f64>>,
    /// Largest distance from a training row to its assigned center.
    pub max_train_dist: f64,
    #[serde(with = "serde_blocks::array1")]
    pub scale: Array1<f64>,
    #[serde(skip)]
    pub(crate) gmm_terms: GmmTermsCache,
}

/// Per-component constants of a diagonal Gaussian mixture:
/// `ln w_c - 0.5 * sum_j ln(2 pi v_cj)` and `1 / v_cj`.
#[derive(Debug, Clone, PartialEq)]
struct GmmTerms {
    log_norm: Vec<f64>,
    inv_var: Array2<f64>,
}

impl GmmTerms {
    fn new(weights: &Array1<f64>, vars: &Array2<f64>) -> Self {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let log_norm = vars
            .outer_iter()
            .zip(weights)
            .map(|(v, w)| w.ln() - 0.5 * v.iter().map(|vi| ln_2pi + vi.ln()).sum::<f64>())
            .collect();
        GmmTerms {
            log_norm,
            inv_var: vars.mapv(|v| 1.0 / v),
        }
    }

    /// `ln w_c + ln N(x; mu_c, diag v_c)`.
    fn log_joint(&self, c: usize, x: &[f64], mean: &[f64]) -> f64 {
        let d = x.len();
        let iv = &self.inv_var.as_slice().expect("standard layout")[c * d..(c + 1) * d];
        let q: f64 = x
            .iter()
            .zip(mean)
            .zip(iv)
            .map(|((&xi, &mi), &iv)| (xi - mi) * (xi - mi) * iv)
            .sum();
        self.log_norm[c] - 0.5 * q
    }
}

/// Lazily built [`GmmTerms`]; ignored by equality and serialization.
#[derive(Debug, Clone, Default)]
pub(crate) struct GmmTermsCache(OnceLock<GmmTerms>);

impl PartialEq for GmmTermsCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl ClusterPartitioner {
    pub fn n_states(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dims(&self) -> usize {
        self.centers.ncols()
    }

    fn nearest(&self, row: ArrayView1<f64>) -> (usize, f64) {
        nearest_center(self.centers.view(), row)
    }

    fn gmm_argmax(&self, row: ArrayView1<f64>) -> usize {
        let terms = self.gmm_terms.0.get_or_init(|| {
            GmmTerms::new(
                self.gmm_weights.as_ref().expect("gmm weights"),
                self.gmm_diag_variances.as_ref().expect("gmm variances"),
            )
        });
        let mut best = 0;
        let mut best_lp = f64::NEG_INFINITY;
        let row = row.as_standard_layout();
        let row = row.as_slice().expect("contiguous");
        let centers = self.centers.as_standard_layout();
        let centers = centers.as_slice().expect("standard layout");
        let d = row.len();
        for c in 0..self.n_states() {
            let lp = terms.log_joint(c, row, &centers[c * d..(c + 1) * d]);
            if lp > best_lp {
                best_lp = lp;
                best = c;
            }
        }
        best
    }

    /// Assigned component ignoring the UNSEEN rule.
    fn raw_assign(&self, row: ArrayView1<f64>) -> usize {
        match self.method {
            ClusterMethod::KMeans => self.nearest(row).0,
            ClusterMethod::Gmm => self.gmm_argmax(row),
        }
    }

    pub fn assign_row(&self, row: ArrayView1<f64>) -> StateId {
        let (c, d2) = self.nearest(row);
        if d2.sqrt() > self.max_train_dist {
            return StateId::UNSEEN;
        }
        match self.method {
            ClusterMethod::KMeans => StateId(c as u64),
            ClusterMethod::Gmm => StateId(self.raw_assign(row) as u64),
        }
    }

    /// For k-means, a radius within which every point keeps the row's
    /// assignment (including its seen/unseen status).
    pub fn stable_radius(&self, row: ArrayView1<f64>) -> Option<f64> {
        if self.method != ClusterMethod::KMeans {
            return None;
        }
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for center in self.centers.outer_iter() {
            let d = squared_distance(center, row);
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
        let (d1, d2) = (d1.sqrt(), d2.sqrt());
        let boundary = if d1 > self.max_train_dist {
            d1 - self.max_train_dist
        } else {
            self.max_train_dist - d1
        };
        Some(((d2 - d1) / 2.0).min(boundary))
    }
}

fn nearest_center(centers: ArrayView2<f64>, row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.outer_iter().enumerate() {
        let d = squared_distance(center, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn count_distinct_rows(rows: ArrayView2<f64>) -> usize {
    rows.outer_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Result of a k-means fit with its per-iteration within-cluster SSE.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub partitioner: ClusterPartitioner,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans_fit(
    train_rows: ArrayView2<f64>,
    n_states: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterPartitioner> {
    kmeans_fit_traced(train_rows, n_states, seed, max_iter, tol).map(|f| f.partitioner)
}

fn kmeans_plus_plus(rows: ArrayView2<f64>, n_states: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = rows.nrows();
    let mut centers = Array2::zeros((n_states, rows.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&rows.row(first));
    let mut d2: Vec<f64> = rows
        .outer_iter()
        .map(|r| squared_distance(r, centers.row(0)))
        .collect();
    for c in 1..n_states {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // All remaining mass is zero: fall back to the farthest row.
            Err(_) => argmax(&d2),
        };
        centers.row_mut(c).assign(&rows.row(next));
        for (i, r) in rows.outer_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(r, centers.row(c)));
        }
    }
    centers
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn kmeans_fit_traced(
    train_rows: ArrayView2<f64>,
    n_states: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let (n, dims) = train_rows.dim();
    if n == 0 || dims == 0 {
        return Err(Error::EmptyInput("k-means training rows".into()));
    }
    if n_states == 0 {
        return Err(Error::InvalidConfig("cluster count must be >= 1".into()));
    }
    let distinct = count_distinct_rows(train_rows);
    if n_states > distinct {
        return Err(Error::TooFewDistinctRows {
            requested: n_states,
            distinct,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(train_rows, n_states, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut dist2 = vec![0f64; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut sse = 0.0;
        for (i, r) in train_rows.outer_iter().enumerate() {
            let (c, d) = nearest_center(centers.view(), r);
            assignment[i] = c;
            dist2[i] = d;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = Array2::<f64>::zeros((n_states, dims));
        let mut counts = vec![0usize; n_states];
        for (i, r) in train_rows.outer_iter().enumerate() {
            let mut row = sums.row_mut(assignment[i]);
            row += &r;
            counts[assignment[i]] += 1;
        }
        let mut new_centers = centers.clone();
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                new_centers
                    .row_mut(c)
                    .assign(&(&sums.row(c) / count as f64));
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = argmax(&dist2);
                new_centers.row_mut(c).assign(&train_rows.row(far));
                dist2[far] = 0.0;
            }
        }
        let shift = centers
            .outer_iter()
            .zip(new_centers.outer_iter())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        if shift < tol {
            break;
        }
    }

    let mut max_dist2: f64 = 0.0;
    for r in train_rows.outer_iter() {
        max_dist2 = max_dist2.max(nearest_center(centers.view(), r).1);
    }
    Ok(KMeansFit {
        partitioner: ClusterPartitioner {
            method: ClusterMethod::KMeans,
            centers,
            gmm_weights: None,
            gmm_diag_variances: None,
            max_train_dist: max_dist2.sqrt(),
            scale: column_std(train_rows),
            gmm_terms: GmmTermsCache::default(),
        },
        sse_history,
        iterations,
    })
}

/// Result of a GMM fit with its per-iteration log-likelihood.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub partitioner: ClusterPartitioner,
    pub loglik_history: Vec<f64>,
}

pub fn gmm_fit(
    train_rows: ArrayView2<f64>,
    n_states: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    var_floor: f64,
) -> Result<ClusterPartitioner> {
    gmm_fit_traced(train_rows, n_states, seed, max_iter, tol, var_floor).map(|f| f.partitioner)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn gmm_fit_traced(
    train_rows: ArrayView2<f64>,
    n_states: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    var_floor: f64,
) -> Result<GmmFit> {
    if !(var_floor > 0.0) {
        return Err(Error::InvalidConfig(
            "variance floor must be positive".into(),
        ));
    }
    let km = kmeans_fit(train_rows, n_states, seed, 100, 1e-9)?;
    let (n, dims) = train_rows.dim();

    // Initialize from the k-means partition.
    let mut means = km.centers.clone();
    let mut weights = Array1::<f64>::zeros(n_states);
    let mut vars = Array2::<f64>::zeros((n_states, dims));
    let labels: Vec<usize> = train_rows
        .outer_iter()
        .map(|r| nearest_center(means.view(), r).0)
        .collect();
    for (i, r) in train_rows.outer_iter().enumerate() {
        let c = labels[i];
        weights[c] += 1.0;
        let diff = &r - &means.row(c);
        let mut v = vars.row_mut(c);
        v += &diff.mapv(|x| x * x);
    }
    for c in 0..n_states {
        let cnt = weights[c];
        if cnt > 0.0 {
            vars.row_mut(c).mapv_inplace(|v| (v / cnt).max(var_floor));
        } else {
            vars.row_mut(c).fill(var_floor);
        }
    }
    weights.mapv_inplace(|w| w.max(1.0) / n as f64);
    let total: f64 = weights.sum();
    weights /= total;

    let x = train_rows.as_standard_layout();
    let x = x.as_slice().expect("standard layout");
    let mut resp = vec![0f64; n * n_states];
    let mut loglik_history = Vec::new();
    for _ in 0..max_iter.max(1) {
        // E-step
        let terms = GmmTerms::new(&weights, &vars);
        let mu = means.as_slice().expect("standard layout");
        let mut ll = 0.0;
        for (r, g) in x.chunks(dims).zip(resp.chunks_mut(n_states)) {
            for (c, gc) in g.iter_mut().enumerate() {
                *gc = terms.log_joint(c, r, &mu[c * dims..(c + 1) * dims]);
            }
            let lse = log_sum_exp(g);
            ll += lse;
            g.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let gain = loglik_history.last().map(|&prev| ll - prev);
        loglik_history.push(ll);
        if gain.is_some_and(|g| g < tol) {
            break;
        }

        // M-step, row-major passes: weighted sums, then spreads.
        let mut nk = vec![0f64; n_states];
        let mut sums = vec![0f64; n_states * dims];
        for (xr, g) in x.chunks(dims).zip(resp.chunks(n_states)) {
            for (c, &gc) in g.iter().enumerate() {
                if gc == 0.0 {
                    continue;
                }
                nk[c] += gc;
                for (s, &v) in sums[c * dims..(c + 1) * dims].iter_mut().zip(xr) {
                    *s += gc * v;
                }
            }
        }
        let mut mu = means
            .as_standard_layout()
            .into_owned()
            .into_raw_vec_and_offset()
            .0;
        for c in 0..n_states {
            if nk[c] > 0.0 {
                for j in 0..dims {
                    mu[c * dims + j] = sums[c * dims + j] / nk[c];
                }
            }
        }
        let mut spread = vec![0f64; n_states * dims];
        for (xr, g) in x.chunks(dims).zip(resp.chunks(n_states)) {
            for (c, &gc) in g.iter().enumerate() {
                if gc == 0.0 || nk[c] <= 0.0 {
                    continue;
                }
                let m = &mu[c * dims..(c + 1) * dims];
                for ((s, &v), &mj) in spread[c * dims..(c + 1) * dims].iter_mut().zip(xr).zip(m) {
                    *s += gc * (v - mj) * (v - mj);
                }
            }
        }
        for c in 0..n_states {
            if nk[c] <= 0.0 {
                continue;
            }
            for j in 0..dims {
                vars[[c, j]] = (spread[c * dims + j] / nk[c]).max(var_floor);
            }
        }
        means = Array2::from_shape_vec((n_states, dims), mu).expect("shape");
        weights = Array1::from_iter(nk.iter().map(|&w| (w / n as f64).max(f64::MIN_POSITIVE)));
        let total = weights.sum();
        weights /= total;
    }

    let mut partitioner = ClusterPartitioner {
        method: ClusterMethod::Gmm,
        centers: means,
        gmm_weights: Some(weights),
        gmm_diag_variances: Some(vars),
        max_train_dist: 0.0,
        scale: column_std(train_rows),
        gmm_terms: GmmTermsCache::default(),
    };
    let mut d_max: f64 = 0.0;
    for r in train_rows.outer_iter() {
        let c = partitioner.gmm_argmax(r);
        d_max = d_max.max(squared_distance(r, partitioner.centers.row(c)).sqrt());
    }
    partitioner.max_train_dist = d_max;
    Ok(GmmFit {
        partitioner,
        loglik_history,
    })
}

pub fn cluster_assign(p: &ClusterPartitioner, rows: ArrayView2<f64>) -> Result<Vec<StateId>> {
    check_dim(p.dims(), rows)?;
    Ok(rows.outer_iter().map(|r| p.assign_row(r)).collect())
}

/// Either kind of fitted partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Partitioner {
    Grid(GridPartitioner),
    Cluster(ClusterPartitioner),
}

impl Partitioner {
    pub fn dims(&self) -> usize {
        match self {
            Partitioner::Grid(g) => g.dims(),
            Partitioner::Cluster(c) => c.dims(),
        }
    }

    pub fn scale(&self) -> ArrayView1<'_, f64> {
        match self {
            Partitioner::Grid(g) => ArrayView1::from(g.scale.as_slice()),
            Partitioner::Cluster(c) => c.scale.view(),
        }
    }

    pub fn assign_row(&self, row: ArrayView1<f64>) -> StateId {
        match self {
            Partitioner::Grid(g) => g.assign_row(row),
            Partitioner::Cluster(c) => c.assign_row(row),
        }
    }

    pub fn stable_radius(&self, row: ArrayView1<f64>) -> Option<f64> {
        match self {
            Partitioner::Grid(_) => None,
            Partitioner::Cluster(c) => c.stable_radius(row),
        }
    }

    pub fn assign(&self, rows: ArrayView2<f64>) -> Result<Vec<StateId>> {
        match self {
            Partitioner::Grid(g) => grid_assign(g, rows),
            Partitioner::Cluster(c) => cluster_assign(c, rows),
        }
    }
}

/// Reduced (post-PCA) trace with optional per-position semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTrace {
    pub rows: Array2<f64>,
    pub semantics: Option<Vec<f64>>,
}

/// Sequence of abstract states, with semantics aligned to each position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractTrace {
    pub states: Vec<StateId>,
    pub semantics: Option<Vec<f64>>,
}

impl AbstractTrace {
    pub fn new(states: Vec<StateId>) -> Self {
        AbstractTrace {
            states,
            semantics: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Windows, partitions and aligns each reduced trace. Semantics of a window
/// are taken from its last position.
pub fn abstract_traces(
    partitioner: &Partitioner,
    composer: &HistoryComposer,
    traces: &[ReducedTrace],
) -> Result<Vec<AbstractTrace>> {
    traces
        .iter()
        .map(|trace| {
            let composed = composer.compose(trace.rows.view())?;
            let states = partitioner.assign(composed.view())?;
            let semantics = match &trace.semantics {
                Some(sem) => {
                    if sem.len() != trace.rows.nrows() {
                        return Err(Error::MisalignedSemantics(format!(
                            "{} semantics for {} rows",
                            sem.len(),
                            trace.rows.nrows()
                        )));
                    }
                    Some(sem[composer.window - 1..].to_vec())
                }
                None => None,
            };
            Ok(AbstractTrace { states, semantics })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::StandardNormal;

    #[test]
    fn compose_windows() {
        let rows = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]];
        let c = compose_history(rows.view(), 2).unwrap();
        assert_eq!(c, array![[1.0, 10.0, 2.0, 20.0], [2.0, 20.0, 3.0, 30.0]]);
        assert_eq!(compose_history(rows.view(), 1).unwrap(), rows);
        let short = array![[1.0], [2.0]];
        assert!(matches!(
            compose_history(short.view(), 3),
            Err(Error::TraceTooShort { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn grid_cells() {
        let g = grid_fit(array![[0.0], [1.0]].view(), 2).unwrap();
        let ids =
            grid_assign(&g, array![[0.3], [0.7], [1.0], [0.5], [1.5], [-0.1]].view()).unwrap();
        assert_eq!(
            ids,
            vec![
                StateId(0),
                StateId(1),
                StateId(1),
                StateId(1),
                StateId::UNSEEN,
                StateId::UNSEEN
            ]
        );
    }

    #[test]
    fn grid_constant_column() {
        let g = grid_fit(array![[2.0], [2.0], [2.0]].view(), 4).unwrap();
        assert_eq!(g.lo, g.hi);
        let ids = grid_assign(&g, array![[2.0], [2.5]].view()).unwrap();
        assert_eq!(ids, vec![StateId(0), StateId::UNSEEN]);
    }

    #[test]
    fn grid_mixed_radix() {
        let g = grid_fit(array![[0.0, 0.0], [3.0, 3.0]].view(), 3).unwrap();
        assert_eq!(g.id_space(), Some(9));
        // cell (2, 1) -> 2 + 1*3
        let ids = grid_assign(&g, array![[2.5, 1.5]].view()).unwrap();
        assert_eq!(ids, vec![StateId(5)]);
        assert!(matches!(
            grid_assign(&g, array![[1.0]].view()),
            Err(Error::DimMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn grid_overflow_rejected() {
        let rows = Array2::from_shape_fn((2, 70), |(i, _)| i as f64);
        assert!(matches!(
            grid_fit(rows.view(), 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn kmeans_two_pairs() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]];
        let p = kmeans_fit(x.view(), 2, 7, 100, 1e-12).unwrap();
        let mut centers: Vec<(f64, f64)> = p.centers.outer_iter().map(|r| (r[0], r[1])).collect();
        centers.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(centers, vec![(0.0, 0.5), (10.0, 10.5)]);
        assert_abs_diff_eq!(p.max_train_dist, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_one_center_per_distinct_point() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [5.0, 5.0]];
        let p = kmeans_fit(x.view(), 4, 3, 100, 1e-12).unwrap();
        assert_eq!(p.max_train_dist, 0.0);
        let ids = cluster_assign(&p, x.view()).unwrap();
        let distinct: HashSet<_> = ids.iter().collect();
        assert_eq!(distinct.len(), 4);
        assert_eq!(ids[1], ids[3]);
        assert!(matches!(
            kmeans_fit(x.view(), 5, 3, 100, 1e-12),
            Err(Error::TooFewDistinctRows {
                requested: 5,
                distinct: 4
            })
        ));
    }

    #[test]
    fn kmeans_sse_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Array2::from_shape_fn((200, 3), |_| rng.sample::<f64, _>(StandardNormal));
        for seed in 0..10 {
            let fit = kmeans_fit_traced(x.view(), 5, seed, 200, 0.0).unwrap();
            assert!(fit.sse_history.len() > 1);
            for w in fit.sse_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{w:?}");
            }
        }
    }

    fn blobs(seed: u64) -> (Array2<f64>, [f64; 2], [f64; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = [-5.0, 0.0];
        let b = [5.0, 3.0];
        let x = Array2::from_shape_fn((200, 2), |(i, j)| {
            let base = if i < 100 { a[j] } else { b[j] };
            base + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, a, b)
    }

    #[test]
    fn gmm_recovers_blobs() {
        let (x, _, _) = blobs(5);
        // Oracle: sample means of each blob.
        let ma = x.slice(s![..100, ..]).mean_axis(Axis(0)).unwrap();
        let mb = x.slice(s![100.., ..]).mean_axis(Axis(0)).unwrap();
        let p = gmm_fit(x.view(), 2, 1, 100, 1e-10, 1e-6).unwrap();
        let w = p.gmm_weights.as_ref().unwrap();
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-9);
        let mut found = [false, false];
        for c in p.centers.outer_iter() {
            for (k, m) in [&ma, &mb].iter().enumerate() {
                if squared_distance(c, m.view()).sqrt() < 0.1 {
                    found[k] = true;
                }
            }
        }
        assert_eq!(found, [true, true]);
    }

    #[test]
    fn gmm_single_component_closed_form() {
        let (x, _, _) = blobs(8);
        let p = gmm_fit(x.view(), 1, 0, 50, 1e-12, 1e-9).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = x.var_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert_abs_diff_eq!(p.centers[[0, j]], mean[j], epsilon = 1e-9);
            assert_abs_diff_eq!(
                p.gmm_diag_variances.as_ref().unwrap()[[0, j]],
                var[j],
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn gmm_loglik_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((150, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let fit = gmm_fit_traced(x.view(), 3, 2, 50, f64::NEG_INFINITY, 1e-6).unwrap();
        assert_eq!(fit.loglik_history.len(), 50);
        for w in fit.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{w:?}");
        }
    }

    #[test]
    fn cluster_assign_rules() {
        let p = ClusterPartitioner {
            method: ClusterMethod::KMeans,
            centers: array![[0.0, 0.0], [4.0, 0.0], [2.0, 2.0]],
            gmm_weights: None,
            gmm_diag_variances: None,
            max_train_dist: 2.0,
            scale: array![1.0, 1.0],
            gmm_terms: Default::default(),
        };
        let ids = cluster_assign(&p, array![[4.0, 0.0], [1.0, 1.0], [-3.0, -3.0]].view()).unwrap();
        // (1,1) is equidistant from centers 0 and 2: lowest index wins.
        assert_eq!(ids, vec![StateId(1), StateId(0), StateId::UNSEEN]);
        // just beyond d from every center
        let ids = cluster_assign(&p, array![[-2.0 - 1e-9, 0.0]].view()).unwrap();
        assert_eq!(ids, vec![StateId::UNSEEN]);
    }

    #[test]
    fn training_rows_never_unseen() {
        let (x, _, _) = blobs(11);
        let km = kmeans_fit(x.view(), 6, 0, 100, 1e-9).unwrap();
        assert!(cluster_assign(&km, x.view())
            .unwrap()
            .iter()
            .all(|s| !s.is_unseen()));
        let gm = gmm_fit(x.view(), 3, 0, 30, 1e-9, 1e-6).unwrap();
        assert!(cluster_assign(&gm, x.view())
            .unwrap()
            .iter()
            .all(|s| !s.is_unseen()));
        let g = grid_fit(x.view(), 7).unwrap();
        assert!(grid_assign(&g, x.view())
            .unwrap()
            .iter()
            .all(|s| !s.is_unseen()));
    }

    #[test]
    fn abstract_trace_alignment() {
        let g = Partitioner::Grid(grid_fit(array![[0.0], [4.0]].view(), 4).unwrap());
        let trace = ReducedTrace {
            rows: array![[0.5], [1.5], [2.5], [3.5], [0.5]],
            semantics: Some(vec![0.1, 0.2, 0.3, 0.4, 0.5]),
        };
        let one = abstract_traces(
            &g,
            &HistoryComposer::default(),
            std::slice::from_ref(&trace),
        )
        .unwrap();
        assert_eq!(one[0].len(), 5);

        let g2 = Partitioner::Grid(grid_fit(array![[0.0, 0.0], [4.0, 4.0]].view(), 4).unwrap());
        let two =
            abstract_traces(&g2, &HistoryComposer::new(2).unwrap(), &[trace.clone()]).unwrap();
        assert_eq!(two[0].len(), 4);
        assert_eq!(two[0].semantics.as_deref(), Some(&[0.2, 0.3, 0.4, 0.5][..]));

        let same = ReducedTrace {
            rows: Array2::from_elem((4, 1), 1.0),
            semantics: None,
        };
        let out = abstract_traces(&g, &HistoryComposer::default(), &[same]).unwrap();
        assert!(out[0].states.iter().all(|&s| s == out[0].states[0]));

        let err = abstract_traces(&g2, &HistoryComposer::new(6).unwrap(), &[trace]);
        assert!(matches!(err, Err(Error::TraceTooShort { .. })));
    }

    #[test]
    fn stable_radius_certifies_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = Array2::from_shape_fn((300, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let p = kmeans_fit(rows.view(), 7, 1, 100, 1e-9).unwrap();
        for i in 0..200 {
            let row = Array1::from_shape_fn(3, |_| 1.5 * rng.sample::<f64, _>(StandardNormal));
            let r = p.stable_radius(row.view()).unwrap();
            assert!(r >= 0.0, "row {i}");
            let base = p.assign_row(row.view());
            for _ in 0..50 {
                let dir = Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal));
                let moved = &row + &(&dir * (0.999 * r / dir.dot(&dir).sqrt()));
                assert_eq!(p.assign_row(moved.view()), base, "row {i}");
            }
        }
    }
}
