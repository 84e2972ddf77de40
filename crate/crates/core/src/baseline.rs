//! Universal singular value thresholding (USVT) baselines.
//!
//! Both variants zero-fill the unobserved cells, keep a few leading singular
//! triplets of the filled matrix, rescale by the inverse observed fraction
//! and optionally clip.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::ObservationSet;
use crate::spectral::truncated_svd;

/// Output clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clip {
    Off,
    /// Clip to the smallest and largest observed value.
    #[default]
    Observed,
    Range { lo: f64, hi: f64 },
}

impl Clip {
    fn resolve(self, obs: &ObservationSet) -> Option<(f64, f64)> {
        match self {
            Clip::Off => None,
            Clip::Observed => obs.value_range(),
            Clip::Range { lo, hi } => Some((lo, hi)),
        }
    }
}

/// A fitted low-rank estimate, kept in factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsvtModel {
    /// `n_users x k`, singular values and the `1/p` rescaling folded in.
    pub left: Vec<Vec<f64>>,
    /// `n_items x k`.
    pub right: Vec<Vec<f64>>,
    pub clip: Option<(f64, f64)>,
}

impl UsvtModel {
    pub fn retained_rank(&self) -> usize {
        self.left.first().map_or(0, Vec::len)
    }

    pub fn predict_cell(&self, i: usize, j: usize) -> f64 {
        let raw: f64 = self.left[i].iter().zip(&self.right[j]).map(|(a, b)| a * b).sum();
        match self.clip {
            Some((lo, hi)) => raw.clamp(lo, hi),
            None => raw,
        }
    }

    pub fn predict_full(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.left.len(), self.right.len()), |(i, j)| self.predict_cell(i, j))
    }
}

fn fit_from_triplets(
    sigma: &Array1<f64>,
    left: &Array2<f64>,
    right: &Array2<f64>,
    keep: usize,
    p_hat: f64,
    clip: Option<(f64, f64)>,
) -> UsvtModel {
    let rows = |m: &Array2<f64>, scale: &dyn Fn(usize) -> f64| -> Vec<Vec<f64>> {
        m.rows()
            .into_iter()
            .map(|r| (0..keep).map(|c| r[c] * scale(c)).collect())
            .collect()
    };
    UsvtModel {
        left: rows(left, &|c| sigma[c] / p_hat),
        right: rows(right, &|_| 1.0),
        clip,
    }
}

fn fill(obs: &ObservationSet) -> Result<(Array2<f64>, f64)> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    Ok((obs.zero_filled(), obs.observed_fraction()))
}

/// USVT with a known target rank `r`.
pub fn fit_usvt_known_rank(obs: &ObservationSet, r: usize, clip: Clip) -> Result<UsvtModel> {
    let (y, p_hat) = fill(obs)?;
    let svd = truncated_svd(&y, r)?;
    Ok(fit_from_triplets(
        &svd.singular_values,
        &svd.left,
        &svd.right,
        r,
        p_hat,
        clip.resolve(obs),
    ))
}

pub fn usvt_known_rank(obs: &ObservationSet, r: usize, clip: Clip) -> Result<Array2<f64>> {
    Ok(fit_usvt_known_rank(obs, r, clip)?.predict_full())
}

/// Threshold used by [`usvt_standard`]: `(2 + eta) sqrt(max(n, m) p_hat)`.
pub fn usvt_threshold(n_users: usize, n_items: usize, p_hat: f64, eta: f64) -> f64 {
    (2.0 + eta) * (n_users.max(n_items) as f64 * p_hat).sqrt()
}

/// USVT keeping every singular value above [`usvt_threshold`].
pub fn fit_usvt_standard(obs: &ObservationSet, eta: f64, clip: Clip) -> Result<UsvtModel> {
    if !(eta > 0.0) {
        return Err(Error::invalid("USVT eta must be positive"));
    }
    let (y, p_hat) = fill(obs)?;
    let (n, m) = y.dim();
    let cap = n.min(m);
    let threshold = usvt_threshold(n, m, p_hat, eta);
    let mut k = cap.min(8);
    loop {
        let svd = truncated_svd(&y, k)?;
        let keep = svd.singular_values.iter().take_while(|&&s| s > threshold).count();
        if keep < k || k == cap {
            return Ok(fit_from_triplets(
                &svd.singular_values,
                &svd.left,
                &svd.right,
                keep,
                p_hat,
                clip.resolve(obs),
            ));
        }
        k = (2 * k).min(cap);
    }
}

pub fn usvt_standard(obs: &ObservationSet, eta: f64, clip: Clip) -> Result<Array2<f64>> {
    Ok(fit_usvt_standard(obs, eta, clip)?.predict_full())
}
