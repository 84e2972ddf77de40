//! Cluster-level averaging, completion of the clustered outcome matrix and
//! expansion back to individual user-item predictions.

use std::collections::VecDeque;

use log::debug;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterAssignment, PairIndexSets};
use crate::error::{Error, Result};
use crate::observation::ObservationSet;

/// Cluster-pair averages; cells with fewer than `threshold` observations are
/// left unrevealed.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredMatrix {
    pub values: Array2<f64>,
    pub revealed: Array2<bool>,
    pub counts: Array2<usize>,
    pub threshold: usize,
}

impl ClusteredMatrix {
    /// A clustered matrix with the given revealed cells, for direct use.
    pub fn from_parts(values: Array2<f64>, revealed: Array2<bool>) -> Result<Self> {
        if values.dim() != revealed.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", values.dim()),
                got: format!("{:?}", revealed.dim()),
            });
        }
        let counts = revealed.mapv(usize::from);
        let values = Array2::from_shape_fn(values.dim(), |c| if revealed[c] { values[c] } else { 0.0 });
        Ok(Self {
            values,
            revealed,
            counts,
            threshold: 1,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn n_revealed(&self) -> usize {
        self.revealed.iter().filter(|&&r| r).count()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.revealed[[i, j]].then(|| self.values[[i, j]])
    }

    fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .zip(self.revealed.iter())
            .filter(|(_, &r)| r)
            .fold(0.0f64, |acc, (v, _)| acc.max(v.abs()))
    }
}

/// Averages the observations of each cluster pair, keeping pairs with at
/// least `threshold` observations.
pub fn build_clustered_matrix(
    obs: &ObservationSet,
    sets: &PairIndexSets,
    threshold: usize,
) -> Result<ClusteredMatrix> {
    if threshold == 0 {
        return Err(Error::invalid("observation threshold must be at least 1"));
    }
    let dim = (sets.n_user_clusters, sets.n_item_clusters);
    let mut values = Array2::zeros(dim);
    let mut revealed = Array2::from_elem(dim, false);
    let mut counts = Array2::zeros(dim);
    let entries = obs.entries();
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let cells = sets.cells(i, j);
            counts[[i, j]] = cells.len();
            if cells.len() >= threshold {
                let mut sum = 0.0;
                for (&(k, l), &pos) in cells.iter().zip(sets.positions(i, j)) {
                    sum += entries
                        .get(pos)
                        .filter(|e| (e.row, e.col) == (k, l))
                        .ok_or_else(|| Error::invalid(format!("index set cell ({k}, {l}) is not observed")))?
                        .value;
                }
                values[[i, j]] = sum / cells.len() as f64;
                revealed[[i, j]] = true;
            }
        }
    }
    Ok(ClusteredMatrix {
        values,
        revealed,
        counts,
        threshold,
    })
}

/// Bipartite graph whose edges are the revealed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterGraph {
    /// Item clusters adjacent to each user cluster, ascending.
    pub user_adj: Vec<Vec<usize>>,
    /// User clusters adjacent to each item cluster, ascending.
    pub item_adj: Vec<Vec<usize>>,
}

impl ClusterGraph {
    pub fn new(h: &ClusteredMatrix) -> Self {
        let (r, c) = h.dim();
        let mut user_adj = vec![Vec::new(); r];
        let mut item_adj = vec![Vec::new(); c];
        for i in 0..r {
            for j in 0..c {
                if h.revealed[[i, j]] {
                    user_adj[i].push(j);
                    item_adj[j].push(i);
                }
            }
        }
        Self { user_adj, item_adj }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathOptions {
    /// Smallest admissible magnitude of a denominator, relative to the
    /// largest revealed magnitude.
    pub relative_floor: f64,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            relative_floor: 1e-6,
        }
    }
}

/// Breadth-first search from one user cluster, expanding neighbors in
/// ascending order. For each item cluster it returns the telescoping product
/// along the BFS-tree path, `None` when unreachable, or the pivot error.
struct PathSearch<'a> {
    h: &'a ClusteredMatrix,
    graph: &'a ClusterGraph,
    floor: f64,
}

type PivotResult = std::result::Result<f64, (usize, usize, f64)>;

impl PathSearch<'_> {
    fn reach_from(&self, start: usize) -> Vec<Option<PivotResult>> {
        let (r, c) = self.h.dim();
        // Accumulated product at user nodes; value estimate at item nodes.
        let mut user_acc: Vec<Option<PivotResult>> = vec![None; r];
        let mut item_val: Vec<Option<PivotResult>> = vec![None; c];
        user_acc[start] = Some(Ok(1.0));
        let mut queue = VecDeque::from([Node::User(start)]);
        while let Some(node) = queue.pop_front() {
            match node {
                Node::User(u) => {
                    let acc = user_acc[u].expect("queued nodes are labelled");
                    for &j in &self.graph.user_adj[u] {
                        if item_val[j].is_none() {
                            item_val[j] = Some(acc.map(|a| a * self.h.values[[u, j]]));
                            queue.push_back(Node::Item(j));
                        }
                    }
                }
                Node::Item(j) => {
                    let val = item_val[j].expect("queued nodes are labelled");
                    for &u in &self.graph.item_adj[j] {
                        if user_acc[u].is_none() {
                            let pivot = self.h.values[[u, j]];
                            user_acc[u] = Some(val.and_then(|v| {
                                if pivot.abs() < self.floor {
                                    Err((u, j, pivot))
                                } else {
                                    Ok(v / pivot)
                                }
                            }));
                            queue.push_back(Node::User(u));
                        }
                    }
                }
            }
        }
        item_val
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    User(usize),
    Item(usize),
}

fn pivot_error((row, col, value): (usize, usize, f64)) -> Error {
    Error::NearZeroPivot { row, col, value }
}

/// Rank-one imputation of cell `(i, j)` as the telescoping product of
/// revealed entries along a shortest path from user cluster `i` to item
/// cluster `j`; 0 when no path exists. A revealed cell returns its value.
pub fn impute_path(h: &ClusteredMatrix, i: usize, j: usize, opts: PathOptions) -> Result<f64> {
    let (r, c) = h.dim();
    if i >= r || j >= c {
        return Err(Error::invalid(format!("cell ({i}, {j}) outside a {r}x{c} matrix")));
    }
    if let Some(v) = h.get(i, j) {
        return Ok(v);
    }
    let graph = ClusterGraph::new(h);
    let search = PathSearch {
        h,
        graph: &graph,
        floor: opts.relative_floor * h.max_abs(),
    };
    match search.reach_from(i)[j] {
        None => Ok(0.0),
        Some(res) => res.map_err(pivot_error),
    }
}

/// Revealed cells pass through; every missing cell is imputed by
/// [`impute_path`].
pub fn impute_all_path(h: &ClusteredMatrix, opts: PathOptions) -> Result<Array2<f64>> {
    let (r, c) = h.dim();
    let graph = ClusterGraph::new(h);
    let search = PathSearch {
        h,
        graph: &graph,
        floor: opts.relative_floor * h.max_abs(),
    };
    let mut out = h.values.clone();
    for i in 0..r {
        if (0..c).all(|j| h.revealed[[i, j]]) {
            continue;
        }
        let reached = search.reach_from(i);
        for j in 0..c {
            if h.revealed[[i, j]] {
                continue;
            }
            out[[i, j]] = match reached[j] {
                None => 0.0,
                Some(res) => res.map_err(pivot_error)?,
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlsOptions {
    pub rank: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            rank: 1,
            lambda: 1e-2,
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlsStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct AlsResult {
    pub imputed: Array2<f64>,
    pub row_factors: Array2<f64>,
    pub col_factors: Array2<f64>,
    /// Objective after initialization and after every full iteration.
    pub objective: Vec<f64>,
    pub status: AlsStatus,
    pub empty_rows: Vec<usize>,
    pub empty_cols: Vec<usize>,
}

/// Low-rank completion of the revealed cells by alternating ridge
/// regressions, minimizing
/// `sum_revealed (h_ij - w_i . z_j)^2 + lambda (|W|_F^2 + |Z|_F^2)`.
pub fn impute_als(h: &ClusteredMatrix, opts: AlsOptions) -> Result<AlsResult> {
    if opts.rank == 0 {
        return Err(Error::invalid("ALS rank must be at least 1"));
    }
    if !(opts.lambda >= 0.0) {
        return Err(Error::invalid("ALS regularization must be nonnegative"));
    }
    let (nr, nc) = h.dim();
    let k = opts.rank;
    let graph = ClusterGraph::new(h);
    let empty_rows: Vec<usize> = (0..nr).filter(|&i| graph.user_adj[i].is_empty()).collect();
    let empty_cols: Vec<usize> = (0..nc).filter(|&j| graph.item_adj[j].is_empty()).collect();
    if !empty_rows.is_empty() || !empty_cols.is_empty() {
        debug!(
            "ALS: {} rows and {} columns have no revealed cells; their factors are zero",
            empty_rows.len(),
            empty_cols.len()
        );
    }

    let rows = RevealedLists::by_row(h);
    let cols = RevealedLists::by_col(h);
    let n_rev = rows.value.len();
    let mean_abs = if n_rev == 0 {
        0.0
    } else {
        rows.value.iter().map(|v| v.abs()).sum::<f64>() / n_rev as f64
    };
    let scale = (mean_abs / k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut init = |n: usize, empty: &[usize]| {
        let mut m: Vec<f64> = (0..n * k)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        for &e in empty {
            m[e * k..(e + 1) * k].fill(0.0);
        }
        m
    };
    let mut w = init(nr, &empty_rows);
    let mut z = init(nc, &empty_cols);

    let mut objective = vec![als_objective(&rows, &w, &z, k, opts.lambda)];
    let mut status = AlsStatus::MaxIterations;
    for _ in 0..opts.max_iters {
        ridge_half_step(&rows, &z, &mut w, k, opts.lambda);
        ridge_half_step(&cols, &w, &mut z, k, opts.lambda);
        let obj = als_objective(&rows, &w, &z, k, opts.lambda);
        let prev = *objective.last().expect("nonempty");
        objective.push(obj);
        let decrease = prev - obj;
        if decrease <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
            status = AlsStatus::Converged;
            break;
        }
    }

    let w = Array2::from_shape_vec((nr, k), w).expect("row factor shape");
    let z = Array2::from_shape_vec((nc, k), z).expect("column factor shape");
    let mut imputed = w.dot(&z.t());
    for ((cell, out), &rev) in imputed.indexed_iter_mut().zip(h.revealed.iter()) {
        if rev {
            *out = h.values[cell];
        }
    }
    Ok(AlsResult {
        imputed,
        row_factors: w,
        col_factors: z,
        objective,
        status,
        empty_rows,
        empty_cols,
    })
}

/// Revealed cells grouped by row (or by column), with values.
struct RevealedLists {
    offsets: Vec<usize>,
    index: Vec<usize>,
    value: Vec<f64>,
}

impl RevealedLists {
    fn by_row(h: &ClusteredMatrix) -> Self {
        Self::collect(h.dim().0, h.dim().1, |a, b| (a, b), h)
    }

    fn by_col(h: &ClusteredMatrix) -> Self {
        Self::collect(h.dim().1, h.dim().0, |a, b| (b, a), h)
    }

    fn collect(
        outer: usize,
        inner: usize,
        cell: impl Fn(usize, usize) -> (usize, usize),
        h: &ClusteredMatrix,
    ) -> Self {
        let mut offsets = Vec::with_capacity(outer + 1);
        let mut index = Vec::new();
        let mut value = Vec::new();
        offsets.push(0);
        for a in 0..outer {
            for b in 0..inner {
                let c = cell(a, b);
                if h.revealed[c] {
                    index.push(b);
                    value.push(h.values[c]);
                }
            }
            offsets.push(index.len());
        }
        Self { offsets, index, value }
    }

    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn list(&self, t: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[t]..self.offsets[t + 1];
        (&self.index[r.clone()], &self.value[r])
    }
}

/// Re-solves every row of `target` (row-major, `k` wide) given `fixed`.
fn ridge_half_step(lists: &RevealedLists, fixed: &[f64], target: &mut [f64], k: usize, lambda: f64) {
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for t in 0..lists.len() {
        let (index, value) = lists.list(t);
        let out = &mut target[t * k..(t + 1) * k];
        if index.is_empty() {
            out.fill(0.0);
            continue;
        }
        gram.fill(0.0);
        rhs.fill(0.0);
        for (&s, &v) in index.iter().zip(value) {
            let f = &fixed[s * k..(s + 1) * k];
            for a in 0..k {
                rhs[a] += v * f[a];
                let row = &mut gram[a * k..a * k + a + 1];
                for (g, &fb) in row.iter_mut().zip(f) {
                    *g += f[a] * fb;
                }
            }
        }
        for a in 0..k {
            gram[a * k + a] += lambda;
            for b in 0..a {
                gram[b * k + a] = gram[a * k + b];
            }
        }
        solve_spd(&mut gram, &mut rhs, k);
        out.copy_from_slice(&rhs);
    }
}

/// Solves `A x = b` for symmetric positive semi-definite `A` (row-major,
/// overwritten) by Cholesky; `b` is overwritten with `x`. A singular system
/// is regularized with a trace-relative jitter.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let original = a.to_vec();
    let mut jitter = 0.0;
    for attempt in 0..6 {
        if attempt > 0 {
            a.copy_from_slice(&original);
            jitter = if jitter == 0.0 { 1e-12 * trace.max(1e-300) } else { jitter * 100.0 };
            for i in 0..n {
                a[i * n + i] += jitter;
            }
        }
        if cholesky_in_place(a, n) {
            // forward then backward substitution with L L^T
            for i in 0..n {
                let mut s = b[i];
                for j in 0..i {
                    s -= a[i * n + j] * b[j];
                }
                b[i] = s / a[i * n + i];
            }
            for i in (0..n).rev() {
                let mut s = b[i];
                for j in (i + 1)..n {
                    s -= a[j * n + i] * b[j];
                }
                b[i] = s / a[i * n + i];
            }
            return;
        }
    }
    b.iter_mut().for_each(|x| *x = 0.0);
}

fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= a[j * n + p] * a[j * n + p];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn als_objective(rows: &RevealedLists, w: &[f64], z: &[f64], k: usize, lambda: f64) -> f64 {
    let mut fit = 0.0;
    for i in 0..rows.len() {
        let wi = &w[i * k..(i + 1) * k];
        let (index, value) = rows.list(i);
        for (&j, &v) in index.iter().zip(value) {
            let zj = &z[j * k..(j + 1) * k];
            let r = v - wi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>();
            fit += r * r;
        }
    }
    let reg = w.iter().chain(z).map(|x| x * x).sum::<f64>();
    fit + lambda * reg
}

/// Expands the completed clustered matrix to every user-item pair: each
/// cell copies the value of its (user cluster, item cluster).
pub fn predict(imputed: &Array2<f64>, assignment: &ClusterAssignment) -> Result<Array2<f64>> {
    let expected = (assignment.n_user_clusters(), assignment.n_item_clusters());
    if imputed.dim() != expected {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            got: format!("{:?}", imputed.dim()),
        });
    }
    let rows = assignment.user_cluster();
    let cols = assignment.item_cluster();
    Ok(Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
        imputed[[rows[i], cols[j]]]
    }))
}
