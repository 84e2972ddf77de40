//! Truncated singular value decomposition.
//!
//! Small matrices go through a one-sided Jacobi SVD. Larger ones use
//! Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization; the
//! projected bidiagonal problem is then solved with the same Jacobi routine.
//! The Krylov space grows until the leading `k` Ritz triplets have residuals
//! below `1e-10 * sigma_1` or the space reaches 300 vectors (or full rank).

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Matrices whose smaller side is at most this use the dense Jacobi path.
pub const DENSE_CUTOFF: usize = 96;
pub const MAX_KRYLOV_DIM: usize = 300;
pub const RESIDUAL_TOL: f64 = 1e-10;

const START_SEED: u64 = 0x5eed_5eed;
const JACOBI_MAX_SWEEPS: usize = 80;

/// The `k` leading singular triplets of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// Non-increasing, nonnegative.
    pub singular_values: Array1<f64>,
    /// `n x k`, orthonormal columns.
    pub left: Array2<f64>,
    /// `m x k`, orthonormal columns.
    pub right: Array2<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `sum_i sigma_i q_i w_i^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        self.scaled_left().dot(&self.right.t())
    }

    /// Left vectors scaled by their singular values (`Q Sigma`). Row `i` has
    /// the same pairwise distances as row `i` of the reconstruction.
    pub fn scaled_left(&self) -> Array2<f64> {
        let mut q = self.left.clone();
        for (mut col, &s) in q.columns_mut().into_iter().zip(self.singular_values.iter()) {
            col *= s;
        }
        q
    }

    /// Right vectors scaled by their singular values (`W Sigma`).
    pub fn scaled_right(&self) -> Array2<f64> {
        let mut w = self.right.clone();
        for (mut col, &s) in w.columns_mut().into_iter().zip(self.singular_values.iter()) {
            col *= s;
        }
        w
    }

    fn truncate(mut self, k: usize) -> Self {
        if k < self.rank() {
            self.singular_values = self.singular_values.slice(ndarray::s![..k]).to_owned();
            self.left = self.left.slice(ndarray::s![.., ..k]).to_owned();
            self.right = self.right.slice(ndarray::s![.., ..k]).to_owned();
        }
        self
    }
}

/// Rank-`k` reconstruction of a decomposition.
pub fn low_rank_approx(svd: &TruncatedSvd) -> Array2<f64> {
    svd.reconstruct()
}

/// The `k` leading singular triplets of `m`.
pub fn truncated_svd(m: &Array2<f64>, k: usize) -> Result<TruncatedSvd> {
    validate(m.view(), k)?;
    let (rows, cols) = m.dim();
    if rows.min(cols) <= DENSE_CUTOFF {
        Ok(jacobi_svd(m.view()).truncate(k))
    } else {
        Ok(lanczos_svd_unchecked(m.view(), k, MAX_KRYLOV_DIM))
    }
}

/// Forces the Lanczos path regardless of size, with an explicit Krylov cap.
pub fn lanczos_svd(m: &Array2<f64>, k: usize, max_dim: usize) -> Result<TruncatedSvd> {
    validate(m.view(), k)?;
    Ok(lanczos_svd_unchecked(m.view(), k, max_dim.max(k)))
}

fn validate(m: ArrayView2<f64>, k: usize) -> Result<()> {
    let (rows, cols) = m.dim();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::RankOutOfRange { k, rows, cols });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Thin SVD of a dense matrix by one-sided (Hestenes) Jacobi rotations.
/// Returns `min(rows, cols)` triplets.
pub fn jacobi_svd(m: ArrayView2<f64>) -> TruncatedSvd {
    let (rows, cols) = m.dim();
    if rows < cols {
        let t = jacobi_svd(m.t());
        return TruncatedSvd {
            singular_values: t.singular_values,
            left: t.right,
            right: t.left,
        };
    }
    // Column-major working copies: `a` is rows x cols, `v` is cols x cols.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * rows as f64;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = {
                    let (ap, aq) = (&a[p], &a[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in ap.iter().zip(aq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let zero_floor = sigma_max * f64::EPSILON * rows.max(cols) as f64;
    let mut left = Array2::zeros((rows, cols));
    let mut right = Array2::zeros((cols, cols));
    let mut singular_values = Array1::zeros(cols);
    let mut needs_completion = Vec::new();
    for (out, &src) in order.iter().enumerate() {
        let s = norms[src];
        singular_values[out] = s;
        for r in 0..cols {
            right[[r, out]] = v[src][r];
        }
        if s > zero_floor && s > 0.0 {
            for r in 0..rows {
                left[[r, out]] = a[src][r] / s;
            }
        } else {
            needs_completion.push(out);
        }
    }
    complete_orthonormal(&mut left, &needs_completion);
    TruncatedSvd {
        singular_values,
        left,
        right,
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column, drawn from the canonical basis by Gram-Schmidt.
fn complete_orthonormal(q: &mut Array2<f64>, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let rows = q.nrows();
    let mut filled: Vec<usize> = (0..q.ncols()).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &target in missing {
        while candidate < rows {
            let mut e = Array1::<f64>::zeros(rows);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &c in &filled {
                    let col = q.column(c);
                    let proj = col.dot(&e);
                    e.scaled_add(-proj, &col);
                }
            }
            let norm = e.dot(&e).sqrt();
            if norm > 1e-8 {
                q.column_mut(target).assign(&(e / norm));
                filled.push(target);
                break;
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Classical Gram-Schmidt against `basis`, applied twice.
fn reorthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let proj = dot(b, x);
            axpy(-proj, b, x);
        }
    }
}

/// Unit vector orthogonal to `basis`, or `None` if the basis spans the space.
fn fresh_direction(len: usize, basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if basis.len() >= len {
        return None;
    }
    for _ in 0..8 {
        let mut x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        reorthogonalize(&mut x, basis);
        let n = norm(&x);
        if n > 1e-8 {
            x.iter_mut().for_each(|v| *v /= n);
            return Some(x);
        }
    }
    None
}

struct Operator<'a> {
    m: ArrayView2<'a, f64>,
}

impl Operator<'_> {
    /// `y = M x`
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (yi, row) in y.iter_mut().zip(self.m.rows()) {
            *yi = match row.as_slice() {
                Some(r) => dot(r, x),
                None => row.iter().zip(x).map(|(a, b)| a * b).sum(),
            };
        }
    }

    /// `y = M^T x`
    fn apply_t(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (&xi, row) in x.iter().zip(self.m.rows()) {
            if xi == 0.0 {
                continue;
            }
            match row.as_slice() {
                Some(r) => axpy(xi, r, y),
                None => {
                    for (yj, a) in y.iter_mut().zip(row.iter()) {
                        *yj += xi * a;
                    }
                }
            }
        }
    }
}

fn lanczos_svd_unchecked(m: ArrayView2<f64>, k: usize, max_dim: usize) -> TruncatedSvd {
    let (rows, cols) = m.dim();
    let op = Operator { m };
    let max_dim = max_dim.min(rows.min(cols)).max(k);
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);

    let mut us: Vec<Vec<f64>> = Vec::with_capacity(max_dim);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(max_dim + 1);
    let mut alphas: Vec<f64> = Vec::with_capacity(max_dim);
    let mut betas: Vec<f64> = Vec::with_capacity(max_dim);

    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);
    let breakdown = scale * f64::EPSILON * (rows.max(cols) as f64);

    vs.push(fresh_direction(cols, &[], &mut rng).expect("nonempty space"));
    let mut next_check = (k + 10).max(20).min(max_dim);
    let mut p = vec![0.0; rows];
    let mut r = vec![0.0; cols];

    loop {
        let j = alphas.len();
        op.apply(&vs[j], &mut p);
        if j > 0 {
            axpy(-betas[j - 1], &us[j - 1], &mut p);
        }
        reorthogonalize(&mut p, &us);
        let mut alpha = norm(&p);
        let u = if alpha > breakdown {
            p.iter().map(|x| x / alpha).collect()
        } else {
            alpha = 0.0;
            match fresh_direction(rows, &us, &mut rng) {
                Some(u) => u,
                None => break,
            }
        };
        us.push(u);
        alphas.push(alpha);

        op.apply_t(&us[j], &mut r);
        axpy(-alpha, &vs[j], &mut r);
        reorthogonalize(&mut r, &vs);
        let beta = norm(&r);
        let dim = j + 1;

        let invariant = beta <= breakdown;
        let at_cap = dim >= max_dim;
        if (dim >= k && (invariant || at_cap)) || (dim >= next_check && dim >= k) {
            let beta_eff = if invariant { 0.0 } else { beta };
            if invariant || at_cap || ritz_converged(&alphas, &betas, beta_eff, k) {
                break;
            }
            next_check = ((next_check as f64 * 1.4).ceil() as usize).min(max_dim);
        }

        if invariant {
            betas.push(0.0);
            match fresh_direction(cols, &vs, &mut rng) {
                Some(v) => vs.push(v),
                None => break,
            }
        } else {
            betas.push(beta);
            vs.push(r.iter().map(|x| x / beta).collect());
        }
    }

    let dim = alphas.len();
    let b = bidiagonal(&alphas, &betas[..dim.saturating_sub(1)]);
    let small = jacobi_svd(b.view());
    let kk = k.min(dim);
    let mut left = Array2::zeros((rows, kk));
    let mut right = Array2::zeros((cols, kk));
    for c in 0..kk {
        for (t, u) in us.iter().enumerate().take(dim) {
            let w = small.left[[t, c]];
            if w != 0.0 {
                for (dst, src) in left.column_mut(c).iter_mut().zip(u) {
                    *dst += w * src;
                }
            }
        }
        for (t, v) in vs.iter().enumerate().take(dim) {
            let w = small.right[[t, c]];
            if w != 0.0 {
                for (dst, src) in right.column_mut(c).iter_mut().zip(v) {
                    *dst += w * src;
                }
            }
        }
    }
    TruncatedSvd {
        singular_values: small.singular_values.slice(ndarray::s![..kk]).to_owned(),
        left,
        right,
    }
}

fn bidiagonal(alphas: &[f64], betas: &[f64]) -> Array2<f64> {
    let dim = alphas.len();
    let mut b = Array2::zeros((dim, dim));
    for (i, &a) in alphas.iter().enumerate() {
        b[[i, i]] = a;
    }
    for (i, &beta) in betas.iter().enumerate().take(dim.saturating_sub(1)) {
        b[[i, i + 1]] = beta;
    }
    b
}

/// Residual of Ritz triplet `i` is `|beta_last * x_i[last]|` where `x_i` is
/// the left singular vector of the projected bidiagonal matrix.
fn ritz_converged(alphas: &[f64], betas: &[f64], beta_last: f64, k: usize) -> bool {
    let dim = alphas.len();
    let b = bidiagonal(alphas, &betas[..dim - 1]);
    let small = jacobi_svd(b.view());
    let sigma1 = small.singular_values[0];
    if sigma1 == 0.0 {
        return true;
    }
    (0..k.min(dim)).all(|i| (beta_last * small.left[[dim - 1, i]]).abs() <= RESIDUAL_TOL * sigma1)
}
