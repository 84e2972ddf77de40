//! Latent distance estimation from the reveal pattern.
//!
//! The expected reveal matrix is `(rho/2)(U V^T + 1 1^T)`, so after removing
//! the constant part its rows are linear images of the user latent vectors.
//! A low-rank reconstruction of the (centered) mask therefore recovers
//! user-user distances up to a known scale, and symmetrically for items.

use log::warn;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::observation::ObservationSet;
use crate::spectral::truncated_svd;

/// The mask handed to the spectral step.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredMask {
    pub matrix: Array2<f64>,
    pub rho_used: f64,
    /// `false` when `matrix` is the raw 0/1 mask.
    pub centered: bool,
}

impl CenteredMask {
    /// Reconstruction rank for latent dimension `d`: the raw mask carries one
    /// extra constant direction.
    pub fn reconstruction_rank(&self, d: usize) -> usize {
        let cap = self.matrix.nrows().min(self.matrix.ncols());
        if self.centered { d } else { d + 1 }.min(cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceStatus {
    Ok,
    /// The mask had no low-rank signal; every distance is zero.
    NoSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEstimates {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
    pub status: DistanceStatus,
}

/// `A - (rho/2) 1 1^T`.
pub fn center_observations(obs: &ObservationSet, rho: f64) -> Result<CenteredMask> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho {rho} not in (0, 1]")));
    }
    let shift = rho / 2.0;
    Ok(CenteredMask {
        matrix: obs.mask_matrix().mapv(|a| a - shift),
        rho_used: rho,
        centered: true,
    })
}

/// The raw 0/1 mask, for when the sparsity factor is unknown. The scale
/// prefactor then uses `rho = 2 * observed fraction`, capped at 1.
pub fn raw_observations(obs: &ObservationSet) -> Result<CenteredMask> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    Ok(CenteredMask {
        matrix: obs.mask_matrix(),
        rho_used: (2.0 * obs.observed_fraction()).min(1.0),
        centered: false,
    })
}

/// Centers with the known sparsity factor when `obs` carries one, otherwise
/// falls back to the raw mask.
pub fn prepare_mask(obs: &ObservationSet) -> Result<CenteredMask> {
    match obs.rho_hint() {
        Some(rho) => center_observations(obs, rho),
        None => raw_observations(obs),
    }
}

/// Estimated user-user and item-item latent distances for latent dimension `d`.
///
/// User distances are `(2/rho) sqrt(d/m) ||P_i - P_j||` over rows of the
/// low-rank reconstruction `P` (`m` = number of items); item distances use
/// columns and `sqrt(d/n)`.
pub fn estimate_distances(mask: &CenteredMask, d: usize) -> Result<DistanceEstimates> {
    let (n, m) = mask.matrix.dim();
    if d == 0 || d > n.min(m) {
        return Err(Error::invalid(format!(
            "latent dimension {d} must lie in [1, {}]",
            n.min(m)
        )));
    }
    if mask.matrix.iter().all(|&x| x == 0.0) {
        warn!("mask carries no signal; all estimated distances are zero");
        return Ok(DistanceEstimates {
            user: Array2::zeros((n, n)),
            item: Array2::zeros((m, m)),
            status: DistanceStatus::NoSignal,
        });
    }
    let svd = truncated_svd(&mask.matrix, mask.reconstruction_rank(d))?;
    let d = d as f64;
    let user_scale = 2.0 / mask.rho_used * (d / m as f64).sqrt();
    let item_scale = 2.0 / mask.rho_used * (d / n as f64).sqrt();
    Ok(DistanceEstimates {
        user: scaled_row_distances(&svd.scaled_left(), user_scale),
        item: scaled_row_distances(&svd.scaled_right(), item_scale),
        status: DistanceStatus::Ok,
    })
}

/// `scale * ||rows_i - rows_j||` for every pair; exactly symmetric with a
/// zero diagonal.
fn scaled_row_distances(rows: &Array2<f64>, scale: f64) -> Array2<f64> {
    let n = rows.nrows();
    let k = rows.ncols();
    let flat: Vec<f64> = rows.iter().copied().collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let ri = &flat[i * k..(i + 1) * k];
        for j in (i + 1)..n {
            let rj = &flat[j * k..(j + 1) * k];
            let sq: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
            let dist = scale * sq.sqrt();
            out[[i, j]] = dist;
            out[[j, i]] = dist;
        }
    }
    out
}

/// High-probability bound on the distance estimation error,
/// `C / rho^2 * sqrt(d^3 / n * ln(2n / delta))`. The constant `C` is not
/// known; this is a diagnostic.
pub fn distance_error_bound(n: usize, d: usize, rho: f64, delta: f64, c: f64) -> Result<f64> {
    if n == 0 || d == 0 || !(rho > 0.0) || !(c > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(
            "distance_error_bound needs positive n, d, rho, C and delta in (0, 1)",
        ));
    }
    let (n, d) = (n as f64, d as f64);
    Ok(c / (rho * rho) * (d.powi(3) / n * (2.0 * n / delta).ln()).sqrt())
}
