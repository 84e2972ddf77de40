//! Greedy separated-center clustering over estimated distances.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::observation::ObservationSet;

/// Centers and memberships for both sides of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Central users in selection order (ascending index).
    pub central_users: Vec<usize>,
    pub central_items: Vec<usize>,
    /// `user_center[k]` is the central user that user `k` belongs to.
    pub user_center: Vec<usize>,
    pub item_center: Vec<usize>,
    pub epsilon: f64,
}

impl ClusterAssignment {
    /// Position of each user's center within `central_users`, i.e. its row
    /// in the clustered outcome matrix.
    pub fn user_cluster(&self) -> Vec<usize> {
        positions(&self.central_users, &self.user_center)
    }

    pub fn item_cluster(&self) -> Vec<usize> {
        positions(&self.central_items, &self.item_center)
    }

    pub fn n_user_clusters(&self) -> usize {
        self.central_users.len()
    }

    pub fn n_item_clusters(&self) -> usize {
        self.central_items.len()
    }

    /// Every unit is its own center.
    pub fn singletons(n_users: usize, n_items: usize) -> Self {
        Self {
            central_users: (0..n_users).collect(),
            central_items: (0..n_items).collect(),
            user_center: (0..n_users).collect(),
            item_center: (0..n_items).collect(),
            epsilon: 0.0,
        }
    }
}

fn positions(centers: &[usize], center_of: &[usize]) -> Vec<usize> {
    let len = center_of
        .len()
        .max(centers.iter().max().map_or(0, |m| m + 1));
    let mut slot = vec![usize::MAX; len];
    for (pos, &c) in centers.iter().enumerate() {
        slot[c] = pos;
    }
    center_of.iter().map(|&c| slot[c]).collect()
}

/// Observed cells grouped by (user cluster, item cluster), stored flat with
/// one offset per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndexSets {
    pub n_user_clusters: usize,
    pub n_item_clusters: usize,
    offsets: Vec<usize>,
    cells: Vec<(usize, usize)>,
    /// Position of each cell in the entries of the observation set.
    positions: Vec<usize>,
}

impl PairIndexSets {
    fn range(&self, i: usize, j: usize) -> std::ops::Range<usize> {
        let p = i * self.n_item_clusters + j;
        self.offsets[p]..self.offsets[p + 1]
    }

    /// Cells of cluster pair `(i, j)`, indexed by position in the center lists.
    pub fn cells(&self, i: usize, j: usize) -> &[(usize, usize)] {
        &self.cells[self.range(i, j)]
    }

    /// Positions of the cells of pair `(i, j)` in `obs.entries()`.
    pub fn positions(&self, i: usize, j: usize) -> &[usize] {
        &self.positions[self.range(i, j)]
    }

    pub fn count(&self, i: usize, j: usize) -> usize {
        self.range(i, j).len()
    }

    pub fn total(&self) -> usize {
        self.cells.len()
    }
}

/// Greedy maximal separated subset: scanning indices in ascending order, an
/// index becomes a center iff its distance to every earlier center is at
/// least `six_eps`.
pub fn select_centers(dist: &Array2<f64>, six_eps: f64) -> Result<Vec<usize>> {
    check_square(dist)?;
    if !(six_eps > 0.0) {
        return Err(Error::invalid("center separation must be positive"));
    }
    let mut centers: Vec<usize> = Vec::new();
    for i in 0..dist.nrows() {
        let row = dist.row(i);
        if centers.iter().all(|&c| row[c] >= six_eps) {
            centers.push(i);
        }
    }
    Ok(centers)
}

/// Nearest center for every index; ties go to the lowest center index.
pub fn assign_to_centers(dist: &Array2<f64>, centers: &[usize]) -> Result<Vec<usize>> {
    check_square(dist)?;
    if centers.is_empty() {
        return Err(Error::invalid("no centers to assign to"));
    }
    let mut sorted = centers.to_vec();
    sorted.sort_unstable();
    Ok((0..dist.nrows())
        .map(|i| {
            let row = dist.row(i);
            let mut best = sorted[0];
            for &c in &sorted[1..] {
                if row[c] < row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn check_square(dist: &Array2<f64>) -> Result<()> {
    if dist.nrows() != dist.ncols() || dist.nrows() == 0 {
        return Err(Error::invalid(format!(
            "distance matrix must be square and nonempty, got {:?}",
            dist.dim()
        )));
    }
    Ok(())
}

/// Clusters both sides with separation `6 * epsilon`.
pub fn cluster(
    user_dist: &Array2<f64>,
    item_dist: &Array2<f64>,
    epsilon: f64,
) -> Result<ClusterAssignment> {
    let six_eps = 6.0 * epsilon;
    let central_users = select_centers(user_dist, six_eps)?;
    let central_items = select_centers(item_dist, six_eps)?;
    let user_center = assign_to_centers(user_dist, &central_users)?;
    let item_center = assign_to_centers(item_dist, &central_items)?;
    Ok(ClusterAssignment {
        central_users,
        central_items,
        user_center,
        item_center,
        epsilon,
    })
}

/// Partitions the observed cells by the cluster pair of their user and item.
pub fn build_index_sets(
    assignment: &ClusterAssignment,
    obs: &ObservationSet,
) -> Result<PairIndexSets> {
    if assignment.user_center.len() != obs.n_users()
        || assignment.item_center.len() != obs.n_items()
    {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", obs.dim()),
            got: format!(
                "({}, {})",
                assignment.user_center.len(),
                assignment.item_center.len()
            ),
        });
    }
    let rows = assignment.user_cluster();
    let cols = assignment.item_cluster();
    let (nr, nc) = (assignment.n_user_clusters(), assignment.n_item_clusters());
    let keys: Vec<usize> = obs.entries().iter().map(|e| rows[e.row] * nc + cols[e.col]).collect();
    let mut offsets = vec![0usize; nr * nc + 1];
    for &key in &keys {
        offsets[key + 1] += 1;
    }
    for p in 0..nr * nc {
        offsets[p + 1] += offsets[p];
    }
    let mut next = offsets[..nr * nc].to_vec();
    let mut cells = vec![(0, 0); keys.len()];
    let mut positions = vec![0; keys.len()];
    for (k, (&key, e)) in keys.iter().zip(obs.entries()).enumerate() {
        cells[next[key]] = (e.row, e.col);
        positions[next[key]] = k;
        next[key] += 1;
    }
    Ok(PairIndexSets {
        n_user_clusters: nr,
        n_item_clusters: nc,
        offsets,
        cells,
        positions,
    })
}
