//! End-to-end fitting: MNN (distances, clustering, completion, expansion) and
//! the USVT baselines behind one interface.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_usvt_known_rank, fit_usvt_standard, Clip, UsvtModel};
use crate::cluster::{build_index_sets, cluster, ClusterAssignment, PairIndexSets};
use crate::complete::{
    build_clustered_matrix, impute_all_path, impute_als, AlsOptions, AlsStatus, PathOptions,
};
use crate::distance::{estimate_distances, prepare_mask, DistanceEstimates, DistanceStatus};
use crate::error::{Error, Result};
use crate::eval::CvPipeline;
use crate::observation::ObservationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    MnnPath,
    MnnAls,
    UsvtKnownRank,
    UsvtStandard,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MnnPath => "mnn_path",
            Algorithm::MnnAls => "mnn_als",
            Algorithm::UsvtKnownRank => "usvt_known_rank",
            Algorithm::UsvtStandard => "usvt_standard",
        }
    }

    pub fn is_mnn(self) -> bool {
        matches!(self, Algorithm::MnnPath | Algorithm::MnnAls)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnn_path" => Ok(Algorithm::MnnPath),
            "mnn_als" | "mnn" => Ok(Algorithm::MnnAls),
            "usvt_known_rank" | "usvt" => Ok(Algorithm::UsvtKnownRank),
            "usvt_standard" => Ok(Algorithm::UsvtStandard),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of one fit. MNN fields are ignored by the USVT variants
/// and vice versa.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// Latent dimension used for distance estimation.
    pub d: usize,
    /// Cluster radius; centers are `6 * epsilon` apart.
    pub epsilon: f64,
    /// Minimum observations for a revealed cluster pair.
    pub min_count: usize,
    pub als: AlsOptions,
    pub path: PathOptions,
    /// USVT target rank.
    pub rank: usize,
    /// USVT threshold slack.
    pub eta: f64,
    pub clip: Clip,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            d: 5,
            epsilon: 0.1,
            min_count: 1,
            als: AlsOptions {
                rank: 5,
                ..AlsOptions::default()
            },
            path: PathOptions::default(),
            rank: 5,
            eta: 0.02,
            clip: Clip::Observed,
        }
    }
}

/// Lists of candidate values; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub d: Vec<usize>,
    /// Absolute cluster radii. When empty, [`HyperGrid::with_epsilon_scale`]
    /// fills it from `epsilon_scale`.
    pub epsilon: Vec<f64>,
    /// Radii as multiples of the schedule value `n^(-(1 - beta/2) / d)`.
    pub epsilon_scale: Vec<f64>,
    pub min_count: Vec<usize>,
    pub als_rank: Vec<usize>,
    pub als_lambda: Vec<f64>,
    pub rank: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            d: vec![],
            epsilon: vec![],
            epsilon_scale: vec![0.4, 0.5, 0.6, 0.8],
            min_count: vec![1, 2, 5, 10, 20],
            als_rank: vec![],
            als_lambda: vec![],
            rank: vec![],
        }
    }
}

impl HyperGrid {
    /// Absolute radii for a problem whose schedule radius is `epsilon_n`;
    /// explicit `epsilon` values take precedence.
    pub fn with_epsilon_scale(&self, epsilon_n: f64) -> HyperGrid {
        let mut out = self.clone();
        if out.epsilon.is_empty() {
            out.epsilon = self.epsilon_scale.iter().map(|s| s * epsilon_n).collect();
        }
        out
    }

    /// Grid points for `algorithm`, starting from `base`. Empty lists keep
    /// the base value; lists irrelevant to the algorithm are ignored.
    pub fn expand(&self, base: &Hyper, algorithm: Algorithm) -> Vec<Hyper> {
        fn axis<T: Copy>(values: &[T], fallback: T) -> Vec<T> {
            if values.is_empty() {
                vec![fallback]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        if algorithm.is_mnn() {
            for d in axis(&self.d, base.d) {
                for als_rank in axis(&self.als_rank, base.als.rank) {
                    for als_lambda in axis(&self.als_lambda, base.als.lambda) {
                        for epsilon in axis(&self.epsilon, base.epsilon) {
                            for min_count in axis(&self.min_count, base.min_count) {
                                let mut h = *base;
                                h.d = d;
                                h.epsilon = epsilon;
                                h.min_count = min_count;
                                h.als.rank = als_rank;
                                h.als.lambda = als_lambda;
                                out.push(h);
                            }
                        }
                    }
                }
            }
        } else {
            for rank in axis(&self.rank, base.rank) {
                let mut h = *base;
                h.rank = rank;
                out.push(h);
            }
        }
        out
    }
}

/// A fitted MNN estimator: cluster memberships and the completed clustered
/// matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnnModel {
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    pub central_users: Vec<usize>,
    pub central_items: Vec<usize>,
    /// Row-major completed clustered matrix.
    pub imputed: Vec<Vec<f64>>,
    pub revealed_fraction: f64,
    pub als_status: Option<AlsStatus>,
    pub no_signal: bool,
}

impl MnnModel {
    pub fn predict_cell(&self, i: usize, j: usize) -> f64 {
        self.imputed[self.user_cluster[i]][self.item_cluster[j]]
    }

    pub fn predict_full(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.user_cluster.len(), self.item_cluster.len()), |(i, j)| {
            self.predict_cell(i, j)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Mnn(MnnModel),
    Usvt(UsvtModel),
}

impl Model {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            Model::Mnn(m) => (m.user_cluster.len(), m.item_cluster.len()),
            Model::Usvt(m) => (m.left.len(), m.right.len()),
        }
    }

    pub fn predict_cell(&self, i: usize, j: usize) -> f64 {
        match self {
            Model::Mnn(m) => m.predict_cell(i, j),
            Model::Usvt(m) => m.predict_cell(i, j),
        }
    }

    pub fn predict_cells(&self, cells: &[(usize, usize)]) -> Vec<f64> {
        cells.iter().map(|&(i, j)| self.predict_cell(i, j)).collect()
    }

    pub fn predict_full(&self) -> Array2<f64> {
        match self {
            Model::Mnn(m) => m.predict_full(),
            Model::Usvt(m) => m.predict_full(),
        }
    }
}

/// Distance estimation for MNN, stage one.
pub fn mnn_distances(obs: &ObservationSet, d: usize) -> Result<DistanceEstimates> {
    let mask = prepare_mask(obs).map_err(|e| e.in_stage("distance"))?;
    estimate_distances(&mask, d).map_err(|e| e.in_stage("distance"))
}

/// Clustering at `hyper.epsilon`, stage two.
pub fn mnn_cluster(dist: &DistanceEstimates, hyper: &Hyper) -> Result<ClusterAssignment> {
    cluster(&dist.user, &dist.item, hyper.epsilon).map_err(|e| e.in_stage("cluster"))
}

/// Averaging, completion and membership bookkeeping, stage three.
pub fn mnn_complete(
    obs: &ObservationSet,
    assignment: &ClusterAssignment,
    algorithm: Algorithm,
    hyper: &Hyper,
    no_signal: bool,
) -> Result<MnnModel> {
    let sets = build_index_sets(assignment, obs).map_err(|e| e.in_stage("index_sets"))?;
    complete_from_sets(obs, assignment, &sets, algorithm, hyper, no_signal)
}

fn complete_from_sets(
    obs: &ObservationSet,
    assignment: &ClusterAssignment,
    sets: &PairIndexSets,
    algorithm: Algorithm,
    hyper: &Hyper,
    no_signal: bool,
) -> Result<MnnModel> {
    let h = build_clustered_matrix(obs, sets, hyper.min_count)
        .map_err(|e| e.in_stage("clustered_matrix"))?;
    let (imputed, als_status) = match algorithm {
        Algorithm::MnnPath => (
            impute_all_path(&h, hyper.path).map_err(|e| e.in_stage("impute"))?,
            None,
        ),
        Algorithm::MnnAls => {
            let res = impute_als(&h, hyper.als).map_err(|e| e.in_stage("impute"))?;
            (res.imputed, Some(res.status))
        }
        other => {
            return Err(Error::invalid(format!("{other} is not an MNN variant")).in_stage("impute"))
        }
    };
    let (r, c) = h.dim();
    Ok(MnnModel {
        user_cluster: assignment.user_cluster(),
        item_cluster: assignment.item_cluster(),
        central_users: assignment.central_users.clone(),
        central_items: assignment.central_items.clone(),
        imputed: imputed.rows().into_iter().map(|row| row.to_vec()).collect(),
        revealed_fraction: h.n_revealed() as f64 / (r * c) as f64,
        als_status,
        no_signal,
    })
}

/// Fits `algorithm` on `obs`.
pub fn fit(obs: &ObservationSet, algorithm: Algorithm, hyper: &Hyper) -> Result<Model> {
    match algorithm {
        Algorithm::MnnPath | Algorithm::MnnAls => {
            let dist = mnn_distances(obs, hyper.d)?;
            let assignment = mnn_cluster(&dist, hyper)?;
            let no_signal = dist.status == DistanceStatus::NoSignal;
            Ok(Model::Mnn(mnn_complete(obs, &assignment, algorithm, hyper, no_signal)?))
        }
        Algorithm::UsvtKnownRank => fit_usvt_known_rank(obs, hyper.rank, hyper.clip)
            .map(Model::Usvt)
            .map_err(|e| e.in_stage("usvt")),
        Algorithm::UsvtStandard => fit_usvt_standard(obs, hyper.eta, hyper.clip)
            .map(Model::Usvt)
            .map_err(|e| e.in_stage("usvt")),
    }
}

/// Full `n_users x n_items` estimate.
pub fn fit_predict(obs: &ObservationSet, algorithm: Algorithm, hyper: &Hyper) -> Result<Array2<f64>> {
    Ok(fit(obs, algorithm, hyper)?.predict_full())
}

/// Cross-validation adapter. For MNN the distance estimate of a training
/// fold is computed once per latent dimension and the clustering once per
/// radius, then shared by the remaining grid axes.
pub struct AlgorithmPipeline {
    pub algorithm: Algorithm,
}

impl CvPipeline for AlgorithmPipeline {
    type Params = Hyper;

    fn fit_predict_grid(
        &self,
        train: &ObservationSet,
        grid: &[Hyper],
        cells: &[(usize, usize)],
    ) -> Vec<Result<Vec<f64>>> {
        if !self.algorithm.is_mnn() {
            return grid
                .iter()
                .map(|h| Ok(fit(train, self.algorithm, h)?.predict_cells(cells)))
                .collect();
        }
        let mut distances: BTreeMap<usize, Result<DistanceEstimates>> = BTreeMap::new();
        type Clustered = (ClusterAssignment, PairIndexSets);
        let mut clusters: BTreeMap<(usize, u64), Result<Clustered>> = BTreeMap::new();
        grid.iter()
            .map(|h| {
                let dist = distances
                    .entry(h.d)
                    .or_insert_with(|| mnn_distances(train, h.d))
                    .as_ref()
                    .map_err(clone_error)?;
                let (assignment, sets) = clusters
                    .entry((h.d, h.epsilon.to_bits()))
                    .or_insert_with(|| {
                        let a = mnn_cluster(dist, h)?;
                        let sets = build_index_sets(&a, train).map_err(|e| e.in_stage("index_sets"))?;
                        Ok((a, sets))
                    })
                    .as_ref()
                    .map_err(clone_error)?;
                let no_signal = dist.status == DistanceStatus::NoSignal;
                let model = complete_from_sets(train, assignment, sets, self.algorithm, h, no_signal)?;
                Ok(cells.iter().map(|&(i, j)| model.predict_cell(i, j)).collect())
            })
            .collect()
    }
}

fn clone_error(e: &Error) -> Error {
    Error::invalid(e.to_string())
}
