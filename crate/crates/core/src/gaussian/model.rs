use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::metrics::MonteCarloEstimate;
use crate::rng;

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate normal `N(mu, sigma)` with a validated covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl GaussianModel {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional Gaussian".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::shape(
                "covariance",
                format!("{d}x{d}"),
                format!("{}x{}", sigma.nrows(), sigma.ncols()),
            ));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > SYM_TOL || !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let eigenvalues = SymmetricEigen::new(sigma.clone()).eigenvalues;
        if let Some(min) = eigenvalues.iter().copied().reduce(f64::min) {
            if min < -PSD_TOL {
                return Err(Error::NotPositiveDefinite(format!(
                    "covariance has eigenvalue {min:e}"
                )));
            }
        }
        Ok(Self {
            mu,
            sigma,
            eigenvalues,
        })
    }

    pub fn from_slices(mu: &[f64], sigma_rows: &[f64]) -> Result<Self> {
        let d = mu.len();
        if sigma_rows.len() != d * d {
            return Err(Error::shape("covariance entries", d * d, sigma_rows.len()));
        }
        Self::new(
            DVector::from_column_slice(mu),
            DMatrix::from_row_slice(d, d, sigma_rows),
        )
    }

    /// `N(mu, s I)`.
    pub fn isotropic(mu: &[f64], s: f64) -> Result<Self> {
        let d = mu.len();
        Self::new(
            DVector::from_column_slice(mu),
            DMatrix::identity(d, d) * s,
        )
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Covariance spectrum (unordered).
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }

    /// Sum of absolute eigenvalues.
    pub fn nuclear_norm(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.abs()).sum()
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        if self.eigenvalues.iter().any(|&v| v <= 0.0) {
            return Err(Error::NotPositiveDefinite("singular covariance".into()));
        }
        Cholesky::new(self.sigma.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorisation failed".into()))
    }

    fn log_det(&self) -> Result<f64> {
        let l = self.cholesky()?;
        Ok(2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    /// `(d/2)(1 + ln 2 pi) + (1/2) ln det Sigma`.
    pub fn entropy(&self) -> Result<f64> {
        let d = self.dim() as f64;
        Ok(0.5 * d * (1.0 + LN_2PI) + 0.5 * self.log_det()?)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("density point", self.dim(), x.len()));
        }
        Ok(self.density()?.log_density(x))
    }

    fn density(&self) -> Result<Density<'_>> {
        let l = self.cholesky()?.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Density {
            model: self,
            l,
            log_det,
        })
    }

    /// `KL(self || q)` in closed form.
    pub fn kl(&self, q: &GaussianModel) -> Result<f64> {
        if self.dim() != q.dim() {
            return Err(Error::shape("KL operands", self.dim(), q.dim()));
        }
        let lq = q.cholesky()?;
        let diff = &self.mu - &q.mu;
        let maha = diff.dot(&lq.solve(&diff));
        let tr = lq.solve(&self.sigma).trace();
        // log det(Sq^-1 Sp) = log det Sp - log det Sq; Sp may be singular only
        // if we are about to return +inf
        let ld_p = match self.log_det() {
            Ok(v) => v,
            Err(_) => return Ok(f64::INFINITY),
        };
        let ld_q = 2.0 * lq.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let kl = 0.5 * (maha - (ld_p - ld_q) + tr - self.dim() as f64);
        Ok(kl.max(0.0))
    }

    /// Symmetric square root used for sampling PSD (possibly singular) models.
    fn sqrt_cov(&self) -> DMatrix<f64> {
        let e = SymmetricEigen::new(self.sigma.clone());
        let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
        &e.eigenvectors * s * e.eigenvectors.transpose()
    }

    /// `n` draws, one per row-major row. Draw `i` uses RNG stream `(seed, i / 4096)`.
    pub fn sample(&self, n: usize, seed: u64, exec: Exec) -> Vec<Vec<f64>> {
        let root = self.sqrt_cov();
        let d = self.dim();
        let ranges = chunk_ranges(n, 4096);
        exec.map(ranges.len(), |c| {
            let mut r = rng::stream(seed, c as u64);
            ranges[c]
                .clone()
                .map(|_| {
                    let z = DVector::from_vec(rng::normal_vec(&mut r, d));
                    (&self.mu + &root * z).as_slice().to_vec()
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Factored covariance, reused across many density evaluations.
struct Density<'a> {
    model: &'a GaussianModel,
    l: DMatrix<f64>,
    log_det: f64,
}

impl Density<'_> {
    fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.model.mu;
        let w = self.l.solve_lower_triangular(&diff).expect("non-singular factor");
        -0.5 * (self.model.dim() as f64 * LN_2PI + self.log_det + w.norm_squared())
    }
}

fn estimate(values: Vec<f64>) -> MonteCarloEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    MonteCarloEstimate {
        mean,
        std_error: (var / n).sqrt(),
    }
}

/// Monte Carlo `E_p[-log p(x)]`.
pub fn entropy_monte_carlo(p: &GaussianModel, n: usize, seed: u64, exec: Exec) -> Result<MonteCarloEstimate> {
    let xs = p.sample(n, seed, exec);
    let dp = p.density()?;
    let vals = exec.map(xs.len(), |i| -dp.log_density(&xs[i]));
    Ok(estimate(vals))
}

/// Monte Carlo `E_p[log p(x) - log q(x)]`.
pub fn kl_monte_carlo(
    p: &GaussianModel,
    q: &GaussianModel,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<MonteCarloEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::shape("KL operands", p.dim(), q.dim()));
    }
    let xs = p.sample(n, seed, exec);
    let (dp, dq) = (p.density()?, q.density()?);
    let vals = exec.map(xs.len(), |i| dp.log_density(&xs[i]) - dq.log_density(&xs[i]));
    Ok(estimate(vals))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// `KL(p || N(x, eps I))` through the spectrum of `Sigma_p`:
/// `(1/2)[||x - mu||^2 / eps - ln(det Sigma / eps^d) + tr Sigma / eps - d]`.
pub fn point_mem_kl(p: &GaussianModel, x: &[f64], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if x.len() != p.dim() {
        return Err(Error::shape("data point", p.dim(), x.len()));
    }
    if p.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite("point metric needs a positive-definite model".into()));
    }
    let d = p.dim() as f64;
    let dist2: f64 = x.iter().zip(p.mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let log_det: f64 = p.eigenvalues.iter().map(|v| v.ln()).sum();
    let trace: f64 = p.eigenvalues.iter().sum();
    Ok(0.5 * (dist2 / eps - (log_det - d * eps.ln()) + trace / eps - d))
}

/// Sum of [`point_mem_kl`] over every row of `data`. Smaller means more
/// memorisation.
pub fn dataset_mem_metric(p: &GaussianModel, data: &[Vec<f64>], eps: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    data.iter().map(|x| point_mem_kl(p, x, eps)).sum()
}

/// Small-epsilon limit of `point_mem_kl(cond) / point_mem_kl(pooled)`:
/// `(||z - mu_c||^2 + tr Sigma_c) / (||z - mu||^2 + tr Sigma)`.
pub fn theorem1_ratio(cond: &GaussianModel, pooled: &GaussianModel, z: &[f64]) -> Result<f64> {
    if cond.dim() != pooled.dim() || z.len() != cond.dim() {
        return Err(Error::shape("ratio operands", cond.dim(), z.len()));
    }
    let sq = |m: &DVector<f64>| z.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let num = sq(&cond.mu) + cond.eigenvalues.sum();
    let den = sq(&pooled.mu) + pooled.eigenvalues.sum();
    if den <= 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate pooled model: zero denominator".into(),
        ));
    }
    Ok(num / den)
}

/// Both hypotheses under which the ratio is at most one: a smaller
/// conditional trace and a point no farther from its class mean.
pub fn theorem1_hypotheses(cond: &GaussianModel, pooled: &GaussianModel, z: &[f64]) -> bool {
    let sq = |m: &DVector<f64>| z.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    cond.trace() <= pooled.trace() && sq(&cond.mu) <= sq(&pooled.mu)
}

/// Per-point KL ratio at finite epsilon.
pub fn kl_ratio(cond: &GaussianModel, pooled: &GaussianModel, z: &[f64], eps: f64) -> Result<f64> {
    Ok(point_mem_kl(cond, z, eps)? / point_mem_kl(pooled, z, eps)?)
}

/// Linear Richardson extrapolation to `eps -> 0` from ratios at `10 e` and `e`.
pub fn richardson_limit(coarse: f64, fine: f64) -> f64 {
    (10.0 * fine - coarse) / 9.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub label: usize,
    pub count: usize,
    pub model: GaussianModel,
    /// `sum_i ||z_i - mu_c||^2` over the class.
    pub scatter_within: f64,
    /// `sum_i ||z_i - mu||^2` over the class, against the pooled mean.
    pub scatter_pooled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub pooled: GaussianModel,
    pub classes: Vec<ClassStats>,
}

fn empirical(rows: &[&[f64]]) -> Result<GaussianModel> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    // exact symmetry before validation
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianModel::new(mu, cov)
}

/// Empirical per-class and pooled Gaussians (unbiased covariances) with
/// scatter sums.
pub fn latent_stats(latents: &[Vec<f64>], labels: &[usize]) -> Result<LatentStats> {
    if latents.len() != labels.len() {
        return Err(Error::shape("latent labels", latents.len(), labels.len()));
    }
    if latents.len() < 2 {
        return Err(Error::InvalidArgument("need at least two latents".into()));
    }
    let d = latents[0].len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(Error::InvalidArgument("latents have mixed widths".into()));
    }
    let all: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
    let pooled = empirical(&all)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut classes = Vec::new();
    for c in 0..k {
        let rows: Vec<&[f64]> = all
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(r, _)| *r)
            .collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(Error::InvalidArgument(format!("class {c} has fewer than two samples")));
        }
        let model = empirical(&rows)?;
        let scatter = |m: &DVector<f64>| {
            rows.iter()
                .map(|r| r.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
        };
        classes.push(ClassStats {
            label: c,
            count: rows.len(),
            scatter_within: scatter(&model.mu),
            scatter_pooled: scatter(&pooled.mu),
            model,
        });
    }
    Ok(LatentStats { pooled, classes })
}
