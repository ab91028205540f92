use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use super::model::*;
use crate::error::Result;
use crate::exec::Exec;
use crate::rng;

/// One row of the identity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn abs(name: &str, observed: f64, expected: f64, tolerance: f64) -> Self {
        let error = (observed - expected).abs();
        Self {
            name: name.to_string(),
            observed,
            expected,
            error,
            tolerance,
            passed: error <= tolerance,
        }
    }

    fn rel(name: &str, observed: f64, expected: f64, tolerance: f64) -> Self {
        let mut c = Self::abs(name, observed, expected, tolerance);
        c.error /= expected.abs().max(f64::MIN_POSITIVE);
        c.passed = c.error <= tolerance;
        c
    }

    fn holds(name: &str, ok: bool, observed: f64) -> Self {
        Self {
            name: name.to_string(),
            observed,
            expected: 1.0,
            error: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        }
    }
}

fn random_model(d: usize, r: &mut rng::Rng) -> Result<GaussianModel> {
    let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
    let mu = DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0));
    GaussianModel::new(mu, &a * a.transpose() + DMatrix::identity(d, d) * 0.3)
}

/// Evaluate the Gaussian identities on fixed and seeded random inputs.
/// `mc_samples` sets the Monte Carlo size for the entropy and KL checks.
pub fn verify_identities(seed: u64, mc_samples: usize, exec: Exec) -> Result<Vec<IdentityCheck>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();

    let unit = GaussianModel::isotropic(&[0.0], 1.0)?;
    out.push(IdentityCheck::abs(
        "entropy of N(0, 1)",
        unit.entropy()?,
        0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()),
        1e-12,
    ));

    let p = GaussianModel::isotropic(&[1.0, 0.0], 1.0)?;
    let q = GaussianModel::isotropic(&[0.0, 0.0], 1.0)?;
    out.push(IdentityCheck::abs("KL of unit mean shift", p.kl(&q)?, 0.5, 1e-12));
    out.push(IdentityCheck::abs("KL(p || p)", p.kl(&p)?, 0.0, 1e-12));

    let m = random_model(4, &mut r)?;
    let mc = entropy_monte_carlo(&m, mc_samples, seed, exec)?;
    out.push(IdentityCheck::rel("entropy vs Monte Carlo (d=4)", mc.mean, m.entropy()?, 0.01));
    for d in [2, 4, 8] {
        let a = random_model(d, &mut r)?;
        let b = random_model(d, &mut r)?;
        let mc = kl_monte_carlo(&a, &b, mc_samples, seed ^ d as u64, exec)?;
        out.push(IdentityCheck::rel(
            &format!("KL vs Monte Carlo (d={d})"),
            mc.mean,
            a.kl(&b)?,
            0.01,
        ));
    }

    let mut worst = 0.0f64;
    for d in [1, 3, 6] {
        let a = random_model(d, &mut r)?;
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        for eps in [0.5, 0.1, 1e-3] {
            let direct = a.kl(&GaussianModel::isotropic(&x, eps)?)?;
            let closed = point_mem_kl(&a, &x, eps)?;
            worst = worst.max((direct - closed).abs() / direct.abs().max(1.0));
        }
    }
    out.push(IdentityCheck::abs("point metric equals KL to N(x, eps I)", worst, 0.0, 1e-10));

    let cond = GaussianModel::isotropic(&[0.0, 0.0], 0.5)?;
    let pooled = GaussianModel::isotropic(&[0.0, 0.0], 1.0)?;
    out.push(IdentityCheck::abs(
        "ratio limit, Sigma_c = I/2, Sigma = I",
        theorem1_ratio(&cond, &pooled, &[0.0, 0.0])?,
        0.5,
        1e-12,
    ));

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = random_model(3, &mut r)?;
        let p = random_model(3, &mut r)?;
        let z: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let lim = richardson_limit(kl_ratio(&c, &p, &z, 1e-3)?, kl_ratio(&c, &p, &z, 1e-4)?);
        worst = worst.max((lim - theorem1_ratio(&c, &p, &z)?).abs());
    }
    out.push(IdentityCheck::abs("extrapolated KL ratio vs limit", worst, 0.0, 1e-3));

    let mut ok = true;
    let mut checked = 0;
    for _ in 0..200 {
        let c = random_model(3, &mut r)?;
        let wider = c.covariance() + random_model(3, &mut r)?.covariance();
        let p = GaussianModel::new(random_model(3, &mut r)?.mean().clone(), wider)?;
        let z: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        if theorem1_hypotheses(&c, &p, &z) {
            checked += 1;
            ok &= theorem1_ratio(&c, &p, &z)? <= 1.0 + 1e-12;
        }
    }
    out.push(IdentityCheck::holds("ratio <= 1 under both hypotheses", ok && checked > 0, checked as f64));

    let a = random_model(3, &mut r)?;
    let x = [1.5, -0.5, 0.7];
    let v: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&e| point_mem_kl(&a, &x, e))
        .collect::<Result<_>>()?;
    out.push(IdentityCheck::holds("point metric grows as eps -> 0", v[0] < v[1] && v[1] < v[2], v[2]));

    let a = random_model(6, &mut r)?;
    out.push(IdentityCheck::abs("nuclear norm equals trace", a.nuclear_norm(), a.trace(), 1e-10));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_identities_hold() {
        let checks = verify_identities(7, 1_000_000, Exec::Parallel).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(checks.len(), 13);
    }
}
