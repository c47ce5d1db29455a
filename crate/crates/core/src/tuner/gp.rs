//! Gaussian-process surrogate on the unit square.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Diagonal jitter added to every Gram matrix.
pub const JITTER: f64 = 1e-6;
const VAR_FLOOR: f64 = 1e-12;
pub const LENGTH_SCALES: [f64; 8] = [0.05, 0.0767, 0.1177, 0.1806, 0.2770, 0.4249, 0.6519, 1.0];
pub const SIGNAL_VARIANCES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// Posterior of a zero-mean GP with squared-exponential ARD kernel, fitted
/// to standardized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    xs: Vec<[f64; 2]>,
    y_mean: f64,
    y_sd: f64,
    /// Standardized targets.
    ys: Vec<f64>,
    length_scales: [f64; 2],
    signal_var: f64,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    log_marginal: f64,
}

fn kernel(a: &[f64; 2], b: &[f64; 2], ls: &[f64; 2], s2: f64) -> f64 {
    let d0 = (a[0] - b[0]) / ls[0];
    let d1 = (a[1] - b[1]) / ls[1];
    s2 * (-0.5 * (d0 * d0 + d1 * d1)).exp()
}

/// Lower Cholesky factor; `None` if the matrix is not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn back_sub_t(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

impl GpPosterior {
    /// Fits with fixed hyperparameters.
    pub fn with_hyperparameters(
        xs: &[[f64; 2]],
        ys: &[f64],
        length_scales: [f64; 2],
        signal_var: f64,
    ) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::arg(
                "a GP needs one target per input and at least one input",
            ));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("GP target".into()));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_sd = var.max(VAR_FLOOR).sqrt();
        let std: Vec<f64> = ys.iter().map(|y| (y - y_mean) / y_sd).collect();
        Self::fit_standardized(xs, std, y_mean, y_sd, length_scales, signal_var)
            .ok_or_else(|| Error::NonFinite("GP Gram matrix is not positive definite".into()))
    }

    fn fit_standardized(
        xs: &[[f64; 2]],
        ys: Vec<f64>,
        y_mean: f64,
        y_sd: f64,
        length_scales: [f64; 2],
        signal_var: f64,
    ) -> Option<Self> {
        let n = xs.len();
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        kernel(&xs[i], &xs[j], &length_scales, signal_var)
                            + if i == j { JITTER } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let chol = cholesky(&gram)?;
        let alpha = back_sub_t(&chol, &forward_sub(&chol, &ys));
        let fit: f64 = ys.iter().zip(&alpha).map(|(y, a)| y * a).sum();
        let log_det: f64 = (0..n).map(|i| chol[i][i].ln()).sum();
        let log_marginal =
            -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Some(GpPosterior {
            xs: xs.to_vec(),
            y_mean,
            y_sd,
            ys,
            length_scales,
            signal_var,
            chol,
            alpha,
            log_marginal,
        })
    }

    /// Fits with the hyperparameters that maximize the log marginal
    /// likelihood over the 8×8×4 grid. Ties keep the first grid point.
    pub fn fit(xs: &[[f64; 2]], ys: &[f64]) -> Result<Self> {
        let mut best: Option<Self> = None;
        for &l0 in &LENGTH_SCALES {
            for &l1 in &LENGTH_SCALES {
                for &s2 in &SIGNAL_VARIANCES {
                    let Ok(gp) = Self::with_hyperparameters(xs, ys, [l0, l1], s2) else {
                        continue;
                    };
                    if best
                        .as_ref()
                        .is_none_or(|b| gp.log_marginal > b.log_marginal)
                    {
                        best = Some(gp);
                    }
                }
            }
        }
        best.ok_or_else(|| Error::NonFinite("no GP hyperparameters gave a valid fit".into()))
    }

    pub fn length_scales(&self) -> [f64; 2] {
        self.length_scales
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_var
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Lowest standardized target.
    pub fn best_standardized(&self) -> f64 {
        self.ys.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_sd
    }

    /// Posterior mean and variance in standardized units.
    pub fn predict_standardized(&self, x: &[f64; 2]) -> (f64, f64) {
        let k: Vec<f64> = self
            .xs
            .iter()
            .map(|xi| kernel(xi, x, &self.length_scales, self.signal_var))
            .collect();
        let mean = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward_sub(&self.chol, &k);
        let var = self.signal_var - v.iter().map(|a| a * a).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Posterior mean and variance in the units of the targets.
    pub fn predict(&self, x: &[f64; 2]) -> (f64, f64) {
        let (m, v) = self.predict_standardized(x);
        (self.y_mean + self.y_sd * m, v * self.y_sd * self.y_sd)
    }
}

/// Expected improvement below `best` of a normal belief `N(mu, sigma²)`.
pub fn ei_closed_form(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma <= 1e-12 {
        return (best - mu).max(0.0);
    }
    let n = Normal::standard();
    let z = (best - mu) / sigma;
    (sigma * (z * n.cdf(z) + n.pdf(z))).max(0.0)
}

/// Expected improvement at a normalized point, in standardized units.
pub fn expected_improvement(post: &GpPosterior, candidate: &[f64; 2], best: f64) -> f64 {
    let (mu, var) = post.predict_standardized(candidate);
    let sigma = var.sqrt();
    if sigma <= 1e-12 {
        return 0.0;
    }
    ei_closed_form(mu, sigma, best)
}
