//! Accuracy metrics, theoretical hyperparameter schedules and k-fold
//! cross-validation.

use std::fmt::Debug;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::ObservationSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Coefficient of determination; `None` when the truth has zero variance.
    pub r2: Option<f64>,
    pub mse: f64,
    pub mae: f64,
    pub n_evaluated: usize,
}

/// R², MSE and MAE of `pred` against `truth`, over `cells` when given and
/// over the whole matrix otherwise.
pub fn compute_metrics(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    cells: Option<&[(usize, usize)]>,
) -> Result<MetricsReport> {
    if pred.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", truth.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    match cells {
        None => metrics_from_pairs(pred.iter().copied().zip(truth.iter().copied())),
        Some(cells) => {
            let (n, m) = truth.dim();
            if let Some(&(i, j)) = cells.iter().find(|&&(i, j)| i >= n || j >= m) {
                return Err(Error::invalid(format!("cell ({i}, {j}) outside a {n}x{m} matrix")));
            }
            metrics_from_pairs(cells.iter().map(|&c| (pred[c], truth[c])))
        }
    }
}

/// Metrics over paired slices.
pub fn compute_metrics_slices(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len().to_string(),
            got: pred.len().to_string(),
        });
    }
    metrics_from_pairs(pred.iter().copied().zip(truth.iter().copied()))
}

fn metrics_from_pairs<I>(pairs: I) -> Result<MetricsReport>
where
    I: Iterator<Item = (f64, f64)> + Clone,
{
    let mut n = 0usize;
    let mut sum_truth = 0.0;
    let mut ss_res = 0.0;
    let mut abs_res = 0.0;
    for (p, t) in pairs.clone() {
        let r = t - p;
        n += 1;
        sum_truth += t;
        ss_res += r * r;
        abs_res += r.abs();
    }
    if n == 0 {
        return Err(Error::invalid("no cells to evaluate"));
    }
    let mean = sum_truth / n as f64;
    let ss_tot: f64 = pairs.map(|(_, t)| (t - mean) * (t - mean)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(MetricsReport {
        r2,
        mse: ss_res / n as f64,
        mae: abs_res / n as f64,
        n_evaluated: n,
    })
}

/// `(d - 2) / (4d - 1)`: sparsity exponents below this keep the distance
/// error smaller than the clustering radius.
pub fn gamma_threshold(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::invalid(format!("gamma threshold needs d >= 2, got {d}")));
    }
    let d = d as f64;
    Ok((d - 2.0) / (4.0 * d - 1.0))
}

/// Inputs to [`theory_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub sigma: f64,
    /// Lipschitz constant of the outcome factors.
    pub lipschitz: f64,
    /// Upper bound of the outcome factors.
    pub b_high: f64,
    /// Failure probability.
    pub delta: f64,
    /// Unknown absolute constant of the distance bound.
    pub c: f64,
}

impl TheoryParams {
    /// Constants of the exponential-separable generator: factors
    /// `exp(sqrt(d) x)` on `[-1, 1]` are bounded by `e^sqrt(d)` with
    /// Lipschitz constant `sqrt(d) e^sqrt(d)`.
    pub fn for_exp_separable(n: usize, d: usize, beta: f64, sigma: f64) -> Self {
        let s = (d as f64).sqrt();
        Self {
            n,
            d,
            beta,
            sigma,
            lipschitz: s * s.exp(),
            b_high: s.exp(),
            delta: 0.1,
            c: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheorySchedule {
    pub rho: f64,
    pub epsilon_n: f64,
    pub n_cov: f64,
    pub n_obs: f64,
    pub delta_dist: f64,
    pub delta_noise: f64,
    /// `None` for `d < 2`.
    pub gamma_d: Option<f64>,
    pub admissible: bool,
}

/// Closed-form hyperparameters and error terms from the consistency
/// analysis. Diagnostic only: at practical sizes `n_obs` is far below 1.
pub fn theory_schedule(p: &TheoryParams) -> Result<TheorySchedule> {
    if p.n == 0 || p.d == 0 {
        return Err(Error::invalid("theory schedule needs positive n and d"));
    }
    if !(0.0..1.0).contains(&p.beta) || !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(Error::invalid("beta must lie in [0, 1) and delta in (0, 1)"));
    }
    let n = p.n as f64;
    let d = p.d as f64;
    let rho = n.powf(-p.beta);
    let epsilon_n = n.powf(-(1.0 - p.beta / 2.0) / d);
    let n_cov = n / 8.0 * (epsilon_n / 2.0).powf(d - 1.0);
    let n_obs = 0.25 * rho * n_cov * n_cov;
    let delta_dist = p.c / (rho * rho) * (d.powi(3) / n * (2.0 * n / p.delta).ln()).sqrt();
    let delta_noise = 14.0 * p.lipschitz * p.b_high * epsilon_n
        + (p.sigma * p.sigma / (2.0 * n_obs) * (2.0 * n * n / p.delta).ln()).sqrt();
    let gamma_d = gamma_threshold(p.d).ok();
    Ok(TheorySchedule {
        rho,
        epsilon_n,
        n_cov,
        n_obs,
        delta_dist,
        delta_noise,
        gamma_d,
        admissible: gamma_d.is_some_and(|g| p.beta < g),
    })
}

/// A fit-and-predict procedure evaluated by [`cross_validate`].
pub trait CvPipeline: Sync {
    type Params: Clone + Debug + Send + Sync;

    /// Fits on `train` for every grid point and predicts `cells`. One result
    /// per grid point, in grid order; implementations may share work across
    /// the grid.
    fn fit_predict_grid(
        &self,
        train: &ObservationSet,
        grid: &[Self::Params],
        cells: &[(usize, usize)],
    ) -> Vec<Result<Vec<f64>>>;
}

/// Adapts a per-grid-point closure into a [`CvPipeline`].
pub struct FnPipeline<P, F> {
    f: F,
    _params: std::marker::PhantomData<fn(P)>,
}

impl<P, F> FnPipeline<P, F> {
    pub fn new(f: F) -> Self {
        Self {
            f,
            _params: std::marker::PhantomData,
        }
    }
}

impl<P, F> CvPipeline for FnPipeline<P, F>
where
    P: Clone + Debug + Send + Sync,
    F: Fn(&ObservationSet, &P, &[(usize, usize)]) -> Result<Vec<f64>> + Sync,
{
    type Params = P;

    fn fit_predict_grid(&self, train: &ObservationSet, grid: &[P], cells: &[(usize, usize)]) -> Vec<Result<Vec<f64>>> {
        grid.iter().map(|p| (self.f)(train, p, cells)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome<P> {
    pub best_index: usize,
    pub best_params: P,
    /// Mean held-out MSE per grid point.
    pub mean_scores: Vec<f64>,
    /// `fold_scores[g][f]`: held-out MSE of grid point `g` on fold `f`.
    pub fold_scores: Vec<Vec<f64>>,
}

/// Randomly splits the observed entries into `folds` disjoint parts of
/// near-equal size. Returns positions into `obs.entries()`.
pub fn fold_partition<R: Rng + ?Sized>(n_entries: usize, folds: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let mut order: Vec<usize> = (0..n_entries).collect();
    order.shuffle(rng);
    let mut parts = vec![Vec::new(); folds];
    for (slot, pos) in order.into_iter().enumerate() {
        parts[slot % folds].push(pos);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    if let Some(fold) = parts.iter().position(Vec::is_empty) {
        return Err(Error::EmptyFold { fold });
    }
    Ok(parts)
}

/// Complement of a sorted fold.
fn complement(n_entries: usize, held_out: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_entries - held_out.len());
    let mut skip = held_out.iter().peekable();
    for k in 0..n_entries {
        if skip.peek() == Some(&&k) {
            skip.next();
        } else {
            out.push(k);
        }
    }
    out
}

/// K-fold cross-validation over observed cells. Every grid point is fitted
/// on each fold's complement and scored by MSE on the held-out cells; the
/// grid point with the lowest mean wins, ties going to the earlier one.
pub fn cross_validate<P, R>(
    obs: &ObservationSet,
    folds: usize,
    grid: &[P::Params],
    pipeline: &P,
    rng: &mut R,
) -> Result<CvOutcome<P::Params>>
where
    P: CvPipeline,
    R: Rng + ?Sized,
{
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    let parts = fold_partition(obs.len(), folds, rng)?;
    let entries = obs.entries();
    let per_fold: Vec<Vec<Result<f64>>> = parts
        .par_iter()
        .map(|held| {
            let train = obs.select(&complement(entries.len(), held));
            let cells: Vec<(usize, usize)> = held.iter().map(|&k| (entries[k].row, entries[k].col)).collect();
            let truth: Vec<f64> = held.iter().map(|&k| entries[k].value).collect();
            pipeline
                .fit_predict_grid(&train, grid, &cells)
                .into_iter()
                .map(|pred| {
                    let pred = pred?;
                    Ok(compute_metrics_slices(&pred, &truth)?.mse)
                })
                .collect()
        })
        .collect();

    let mut fold_scores = vec![Vec::with_capacity(folds); grid.len()];
    for fold in per_fold {
        for (g, score) in fold.into_iter().enumerate() {
            let score = score.map_err(|e| Error::GridPoint {
                index: g,
                label: format!("{:?}", grid[g]),
                source: Box::new(e),
            })?;
            fold_scores[g].push(score);
        }
    }
    let mean_scores: Vec<f64> = fold_scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let mut best_index = 0;
    for (g, &s) in mean_scores.iter().enumerate() {
        if s < mean_scores[best_index] {
            best_index = g;
        }
    }
    Ok(CvOutcome {
        best_index,
        best_params: grid[best_index].clone(),
        mean_scores,
        fold_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::Observation;
    use crate::synth::rng_from_seed;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let t = array![[1.0, 2.0], [3.0, 5.0]];
        let m = compute_metrics(&t, &t, None).unwrap();
        assert_eq!(m.r2, Some(1.0));
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.n_evaluated, 4);
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let t = array![[1.0, 2.0], [3.0, 5.0]];
        let p = Array2::from_elem((2, 2), 2.75);
        assert!(compute_metrics(&p, &t, None).unwrap().r2.unwrap().abs() < 1e-12);
    }

    #[test]
    fn hand_computed_pair() {
        let m = compute_metrics_slices(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae, m.r2), (1.0, 1.0, Some(0.0)));
    }

    #[test]
    fn masked_evaluation_and_errors() {
        let t = array![[1.0, 2.0], [3.0, 5.0]];
        let p = array![[1.0, 0.0], [0.0, 5.0]];
        let m = compute_metrics(&p, &t, Some(&[(0, 0), (1, 1)])).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!(compute_metrics(&p, &t, Some(&[])).is_err());
        assert!(compute_metrics(&p, &t, Some(&[(2, 0)])).is_err());
        let flat = compute_metrics_slices(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(flat.r2, None);
        assert!((flat.mse - 2.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mae_bounded_by_root_mse(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..64)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = compute_metrics_slices(&p, &t).unwrap();
            prop_assert!(m.mae <= m.mse.sqrt() + 1e-12);
        }

        #[test]
        fn shift_invariance(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..32),
            shift in -100.0f64..100.0,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let base = compute_metrics_slices(&p, &t).unwrap();
            let ps: Vec<f64> = p.iter().map(|x| x + shift).collect();
            let ts: Vec<f64> = t.iter().map(|x| x + shift).collect();
            let moved = compute_metrics_slices(&ps, &ts).unwrap();
            prop_assert!((base.mse - moved.mse).abs() < 1e-8 * (1.0 + base.mse));
            prop_assert!((base.mae - moved.mae).abs() < 1e-8 * (1.0 + base.mae));
            if let (Some(a), Some(b)) = (base.r2, moved.r2) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_threshold(2).unwrap(), 0.0);
        assert!((gamma_threshold(5).unwrap() - 3.0 / 19.0).abs() < 1e-15);
        assert!((gamma_threshold(100).unwrap() - 98.0 / 399.0).abs() < 1e-15);
        assert!(gamma_threshold(100).unwrap() < 0.25);
        assert!(gamma_threshold(1).is_err());
    }

    #[test]
    fn schedule_values() {
        let s = theory_schedule(&TheoryParams::for_exp_separable(3162, 5, 0.25, 1.0)).unwrap();
        assert!((s.epsilon_n - 3162f64.powf(-0.175)).abs() < 1e-15);
        assert!((s.epsilon_n - 0.2441).abs() < 1e-4);
        assert!(!s.admissible);

        let s = theory_schedule(&TheoryParams::for_exp_separable(1000, 5, 0.0, 1.0)).unwrap();
        assert!((s.epsilon_n - 0.2512).abs() < 1e-4);
        let want = 125.0 * (s.epsilon_n / 2.0).powi(4);
        assert!((s.n_cov - want).abs() < 1e-15);
        assert!((s.n_cov - 0.0311).abs() < 1e-4);
        assert!((s.n_obs - 0.25 * s.n_cov * s.n_cov).abs() < 1e-18);
        assert!(s.admissible);
    }

    #[test]
    fn observation_count_formula() {
        // rho = 1, N_cov = 10 gives N_obs = 25
        let (rho, n_cov) = (1.0f64, 10.0f64);
        assert_eq!(0.25 * rho * n_cov * n_cov, 25.0);
    }

    #[test]
    fn schedule_monotone_in_n() {
        let grid = [100, 300, 1000, 3000, 10_000, 100_000];
        let s: Vec<TheorySchedule> = grid
            .iter()
            .map(|&n| theory_schedule(&TheoryParams::for_exp_separable(n, 3, 0.1, 1.0)).unwrap())
            .collect();
        for (w, n) in s.windows(2).zip(grid.windows(2)) {
            assert!(w[1].epsilon_n < w[0].epsilon_n);
            let growth = |k: usize, sch: &TheorySchedule| k as f64 * sch.epsilon_n.powi(2);
            assert_eq!(w[1].n_cov > w[0].n_cov, growth(n[1], &w[1]) > growth(n[0], &w[0]));
        }
    }

    fn toy_obs(n: usize) -> ObservationSet {
        let entries = (0..n)
            .flat_map(|i| (0..n).map(move |j| Observation { row: i, col: j, value: (i * n + j) as f64 }))
            .collect();
        ObservationSet::new(n, n, entries).unwrap()
    }

    #[test]
    fn folds_partition_the_entries() {
        let parts = fold_partition(103, 7, &mut rng_from_seed(3)).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| p.len() == 14 || p.len() == 15));
        assert_eq!(parts, fold_partition(103, 7, &mut rng_from_seed(3)).unwrap());
        assert!(matches!(fold_partition(3, 4, &mut rng_from_seed(3)), Err(Error::EmptyFold { .. })));
        assert!(fold_partition(10, 1, &mut rng_from_seed(3)).is_err());
    }

    #[test]
    fn single_point_grid() {
        let obs = toy_obs(6);
        let pipe = FnPipeline::new(|_: &ObservationSet, c: &f64, cells: &[(usize, usize)]| Ok(vec![*c; cells.len()]));
        let out = cross_validate(&obs, 4, &[3.0], &pipe, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.best_index, 0);
        assert_eq!(out.fold_scores[0].len(), 4);
        assert!(out.mean_scores[0] > 0.0);
    }

    #[test]
    fn oracle_wins() {
        let obs = toy_obs(6);
        let n = 6;
        // true = oracle that knows the value formula, false = constant guess
        let pipe = FnPipeline::new(move |_: &ObservationSet, oracle: &bool, cells: &[(usize, usize)]| {
            Ok(cells
                .iter()
                .map(|&(i, j)| if *oracle { (i * n + j) as f64 } else { 10.0 })
                .collect())
        });
        let out = cross_validate(&obs, 3, &[false, true], &pipe, &mut rng_from_seed(1)).unwrap();
        assert!(out.best_params);
        assert_eq!(out.mean_scores[1], 0.0);
    }

    #[test]
    fn ties_and_failures() {
        let obs = toy_obs(4);
        let same = FnPipeline::new(|_: &ObservationSet, _: &u8, cells: &[(usize, usize)]| Ok(vec![0.0; cells.len()]));
        let out = cross_validate(&obs, 2, &[7u8, 9u8], &same, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.best_params, 7);

        let failing = FnPipeline::new(|_: &ObservationSet, p: &u8, cells: &[(usize, usize)]| {
            if *p == 2 {
                Err(Error::invalid("boom"))
            } else {
                Ok(vec![0.0; cells.len()])
            }
        });
        let err = cross_validate(&obs, 2, &[1u8, 2u8], &failing, &mut rng_from_seed(1)).unwrap_err();
        assert!(matches!(err, Error::GridPoint { index: 1, .. }), "{err}");
        assert!(cross_validate(&obs, 2, &[] as &[u8], &same, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn training_sets_exclude_the_held_out_fold() {
        let obs = toy_obs(5);
        let pipe = FnPipeline::new(|train: &ObservationSet, _: &(), cells: &[(usize, usize)]| {
            assert!(cells.iter().all(|&(i, j)| !train.is_observed(i, j)));
            assert_eq!(train.len() + cells.len(), 25);
            Ok(vec![0.0; cells.len()])
        });
        cross_validate(&obs, 5, &[()], &pipe, &mut rng_from_seed(2)).unwrap();
    }
}
