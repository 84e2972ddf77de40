//! Synthetic latent-factor data with observation probabilities tied to the
//! same latent factors as the outcomes.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::{Observation, ObservationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    /// `x_ij = sum_k exp(sqrt(d) u_ik) exp(sqrt(d) v_jk)`.
    #[default]
    ExpSeparable,
    /// Caller-supplied outcome function, see [`outcome_matrix_with`].
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    pub r: usize,
    pub beta: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub outcome_kind: OutcomeKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 1000,
            d: 5,
            r: 5,
            beta: 0.0,
            noise_sigma: 1.0,
            seed: 0,
            outcome_kind: OutcomeKind::ExpSeparable,
        }
    }
}

impl ModelConfig {
    pub fn square(n: usize, d: usize, beta: f64, seed: u64) -> Self {
        Self {
            n_users: n,
            n_items: n,
            d,
            r: d,
            beta,
            seed,
            ..Self::default()
        }
    }

    /// Sparsity factor `min(n_users, n_items)^(-beta)`.
    pub fn rho(&self) -> f64 {
        (self.n_users.min(self.n_items) as f64).powf(-self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::invalid("n_users and n_items must be positive"));
        }
        if self.d == 0 || self.d > self.n_users.min(self.n_items) {
            return Err(Error::invalid(format!(
                "latent dimension {} must lie in [1, min(n_users, n_items)]",
                self.d
            )));
        }
        if self.r == 0 {
            return Err(Error::invalid("outcome rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} not in [0, 1)", self.beta)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Unit-norm user (`u`) and item (`v`) latent vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl LatentFactors {
    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    /// True latent distances between all pairs of users.
    pub fn user_distances(&self) -> Array2<f64> {
        pairwise_distances(&self.u)
    }

    pub fn item_distances(&self) -> Array2<f64> {
        pairwise_distances(&self.v)
    }
}

fn pairwise_distances(rows: &Array2<f64>) -> Array2<f64> {
    let n = rows.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (&rows.row(i) - &rows.row(j)).mapv(|x| x * x).sum().sqrt();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Observation probabilities.
    pub p: Array2<f64>,
    /// Noise-free outcomes.
    pub x: Array2<f64>,
}

/// Everything produced by one seeded draw of the generative model.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: ModelConfig,
    pub factors: LatentFactors,
    pub truth: GroundTruth,
    pub observations: ObservationSet,
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws one point uniformly on the unit sphere by normalizing a Gaussian
/// vector. A zero draw is redrawn.
fn sample_unit_row<R: Rng + ?Sized>(d: usize, rng: &mut R, out: &mut [f64]) {
    loop {
        for x in out.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            out.iter_mut().for_each(|x| *x /= norm);
            return;
        }
        debug_assert_eq!(out.len(), d);
    }
}

fn sample_sphere<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for mut row in m.axis_iter_mut(Axis(0)) {
        sample_unit_row(d, rng, row.as_slice_mut().expect("standard layout"));
    }
    m
}

pub fn sample_latent_factors<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<LatentFactors> {
    config.validate()?;
    let u = sample_sphere(config.n_users, config.d, rng);
    let v = sample_sphere(config.n_items, config.d, rng);
    Ok(LatentFactors { u, v })
}

/// `p_ij = (rho / 2) (u_i . v_j + 1)`, clamped to `[0, rho]` against rounding.
pub fn observation_probabilities(factors: &LatentFactors, rho: f64) -> Result<Array2<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho {rho} not in (0, 1]")));
    }
    check_unit_rows(&factors.u)?;
    check_unit_rows(&factors.v)?;
    let dots = factors.u.dot(&factors.v.t());
    Ok(dots.mapv(|g| (0.5 * rho * (g + 1.0)).clamp(0.0, rho)))
}

fn check_unit_rows(m: &Array2<f64>) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("latent row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

pub fn outcome_matrix(factors: &LatentFactors, kind: OutcomeKind) -> Result<Array2<f64>> {
    match kind {
        OutcomeKind::ExpSeparable => {
            let scale = (factors.d() as f64).sqrt();
            let theta = factors.u.mapv(|x| (scale * x).exp());
            let phi = factors.v.mapv(|x| (scale * x).exp());
            Ok(theta.dot(&phi.t()))
        }
        OutcomeKind::Custom => Err(Error::invalid(
            "custom outcome kind needs an explicit function (outcome_matrix_with)",
        )),
    }
}

pub fn outcome_matrix_with<F>(factors: &LatentFactors, f: F) -> Array2<f64>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    Array2::from_shape_fn((factors.u.nrows(), factors.v.nrows()), |(i, j)| {
        f(factors.u.row(i), factors.v.row(j))
    })
}

/// Reveals each cell independently with probability `p_ij` and adds
/// `N(0, sigma^2)` noise to the revealed outcomes.
pub fn sample_observations<R: Rng + ?Sized>(
    truth: &GroundTruth,
    sigma: f64,
    rng: &mut R,
) -> Result<ObservationSet> {
    if truth.p.dim() != truth.x.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", truth.x.dim()),
            got: format!("{:?}", truth.p.dim()),
        });
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let (n, m) = truth.x.dim();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let u: f64 = rng.random();
            if u < truth.p[[i, j]] {
                let value = truth.x[[i, j]] + noise.sample(rng);
                entries.push(Observation { row: i, col: j, value });
            }
        }
    }
    ObservationSet::new(n, m, entries)
}

/// Runs the whole generative model for one seed.
pub fn generate(config: &ModelConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let factors = sample_latent_factors(config, &mut rng)?;
    let rho = config.rho();
    let p = observation_probabilities(&factors, rho)?;
    let x = outcome_matrix(&factors, config.outcome_kind)?;
    let truth = GroundTruth { p, x };
    let observations = sample_observations(&truth, config.noise_sigma, &mut rng)?;
    Ok(SyntheticDataset {
        config: config.clone(),
        factors,
        truth,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn factors(u: Array2<f64>, v: Array2<f64>) -> LatentFactors {
        LatentFactors { u, v }
    }

    #[test]
    fn rows_are_unit_norm_and_deterministic() {
        let cfg = ModelConfig::square(50, 3, 0.0, 11);
        let a = sample_latent_factors(&cfg, &mut rng_from_seed(11)).unwrap();
        let b = sample_latent_factors(&cfg, &mut rng_from_seed(11)).unwrap();
        assert_eq!(a, b);
        for row in a.u.rows().into_iter().chain(a.v.rows()) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_of_a_fixed_draw() {
        let mut row = [3.0, 4.0];
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
        assert_eq!(row, [0.6, 0.8]);
    }

    #[test]
    fn sphere_samples_are_centered() {
        let cfg = ModelConfig {
            n_users: 10_000,
            n_items: 3,
            d: 3,
            ..ModelConfig::default()
        };
        let f = sample_latent_factors(&cfg, &mut rng_from_seed(5)).unwrap();
        let mean = f.u.mean_axis(Axis(0)).unwrap();
        for m in mean {
            assert!(m.abs() < 0.05, "coordinate mean {m}");
        }
    }

    #[test]
    fn probabilities_follow_the_dot_product() {
        let rho = 0.4;
        let f = factors(array![[1.0, 0.0]], array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let p = observation_probabilities(&f, rho).unwrap();
        assert!((p[[0, 0]] - rho).abs() < 1e-15);
        assert!(p[[0, 1]].abs() < 1e-15);
        assert!((p[[0, 2]] - rho / 2.0).abs() < 1e-15);
    }

    #[test]
    fn exp_separable_closed_forms() {
        let mut e1 = Array2::zeros((1, 5));
        e1[[0, 0]] = 1.0;
        let x = outcome_matrix(&factors(e1.clone(), e1), OutcomeKind::ExpSeparable).unwrap();
        let want = (2.0 * 5f64.sqrt()).exp() + 4.0;
        assert!((x[[0, 0]] - want).abs() < 1e-12 * want);

        let x = outcome_matrix(&factors(array![[1.0, 0.0]], array![[0.0, 1.0]]), OutcomeKind::ExpSeparable)
            .unwrap();
        let want = 2.0 * 2f64.sqrt().exp();
        assert!((x[[0, 0]] - want).abs() < 1e-12 * want);
    }

    #[test]
    fn custom_kind_needs_a_function() {
        let f = factors(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        assert!(outcome_matrix(&f, OutcomeKind::Custom).is_err());
        let x = outcome_matrix_with(&f, |u, v| u.dot(&v) + 2.0);
        assert_eq!(x[[0, 0]], 2.0);
    }

    #[test]
    fn exp_separable_cells_are_bounded() {
        let cfg = ModelConfig::square(40, 4, 0.0, 3);
        let data = generate(&cfg).unwrap();
        let s = 2.0 * 4f64.sqrt();
        let (lo, hi) = (4.0 * (-s).exp(), 4.0 * s.exp());
        assert!(data.truth.x.iter().all(|&x| x >= lo && x <= hi && x > 0.0));
        assert!(data.truth.p.iter().all(|&p| (0.0..=cfg.rho()).contains(&p)));
    }

    #[test]
    fn forced_reveal_patterns() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let all = GroundTruth { p: Array2::ones((2, 2)), x: x.clone() };
        let obs = sample_observations(&all, 0.0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(obs.len(), 4);
        assert_eq!(obs.zero_filled(), x);

        let none = GroundTruth { p: Array2::zeros((2, 2)), x };
        assert!(sample_observations(&none, 1.0, &mut rng_from_seed(1)).unwrap().is_empty());
    }

    #[test]
    fn half_probability_reveals_about_half() {
        let truth = GroundTruth {
            p: Array2::from_elem((200, 200), 0.5),
            x: Array2::zeros((200, 200)),
        };
        let obs = sample_observations(&truth, 1.0, &mut rng_from_seed(9)).unwrap();
        assert!((obs.observed_fraction() - 0.5).abs() < 0.02);
    }

    #[test]
    fn single_cell_reveal_frequency_matches_probability() {
        let p = 0.3;
        let truth = GroundTruth {
            p: Array2::from_elem((1, 1), p),
            x: Array2::zeros((1, 1)),
        };
        let mut rng = rng_from_seed(77);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| !sample_observations(&truth, 0.0, &mut rng).unwrap().is_empty())
            .count();
        let freq = hits as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((freq - p).abs() < 5.0 * se);
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = ModelConfig::square(30, 2, 0.25, 123);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.observations, b.observations);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig::square(10, 11, 0.0, 0).validate().is_err());
        assert!(ModelConfig::square(10, 2, 1.0, 0).validate().is_err());
        assert!(ModelConfig { noise_sigma: -1.0, ..ModelConfig::default() }.validate().is_err());
    }
}
