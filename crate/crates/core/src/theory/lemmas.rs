//! Numeric checks of the auxiliary inequalities used by the convergence proof.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Slack granted to floating-point comparisons of the inequalities.
pub const INEQUALITY_SLACK: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty support".into()));
    }
    if let Some(i) = p.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("mass {} at {i} is not a probability", p[i])));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("masses sum to {s}")));
    }
    Ok(())
}

fn validate_pair(p: &[f64], q: &[f64]) -> Result<()> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "supports differ in size: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_pair(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p || q)` in nats; infinite when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_pair(p, q)?;
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += a * (a / b).ln();
    }
    // Rounding can leave a tiny negative value for near-identical inputs.
    Ok(kl.max(0.0))
}

/// Random distribution on `n` points; roughly a quarter of draws have a zero cell.
pub fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
    if n > 1 && rng.random_bool(0.25) {
        let i = rng.random_range(0..n);
        w[i] = 0.0;
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PinskerOutcome {
    pub tv: f64,
    pub kl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `TV(p, q) <= sqrt(KL(p || q) / 2)`.
pub fn pinsker_check(p: &[f64], q: &[f64]) -> Result<PinskerOutcome> {
    let tv = total_variation(p, q)?;
    let kl = kl_divergence(p, q)?;
    let bound = (kl / 2.0).sqrt();
    Ok(PinskerOutcome {
        tv,
        kl,
        bound,
        holds: tv <= bound + INEQUALITY_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftOutcome {
    pub shift: f64,
    pub sup_norm: f64,
    pub tv: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `|E_q h - E_p h| <= 2 B TV(p, q)` for vector-valued `h` with `|h(x)| <= B`.
///
/// `values[x]` is `h(x)`; `B` is taken as the largest norm among them.
pub fn expectation_shift_check(p: &[f64], q: &[f64], values: &[Vec<f64>]) -> Result<ShiftOutcome> {
    let tv = total_variation(p, q)?;
    if values.len() != p.len() {
        return Err(Error::invalid("values", format!("need {} vectors, got {}", p.len(), values.len())));
    }
    let m = values[0].len();
    if values.iter().any(|v| v.len() != m || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid("values", "vectors must be finite and of equal length"));
    }
    let sup_norm = values
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let shift = (0..m)
        .map(|j| {
            let d: f64 = values.iter().zip(p.iter().zip(q)).map(|(v, (a, b))| (b - a) * v[j]).sum();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let bound = 2.0 * sup_norm * tv;
    Ok(ShiftOutcome {
        shift,
        sup_norm,
        tv,
        bound,
        holds: shift <= bound + INEQUALITY_SLACK,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvPinskerReport {
    pub instances: usize,
    pub pinsker_violations: usize,
    pub shift_violations: usize,
    /// Largest `TV / sqrt(KL / 2)` seen over instances with finite positive KL.
    pub worst_pinsker_ratio: f64,
    /// Largest `shift / (2 B TV)` seen over instances with positive TV and `B`.
    pub worst_shift_ratio: f64,
}

impl TvPinskerReport {
    pub fn holds(&self) -> bool {
        self.pinsker_violations == 0 && self.shift_violations == 0
    }
}

/// Draw `instances` random pairs on `support` points, each with a random
/// `h` of dimension `value_dim`, and check both inequalities on every one.
pub fn tv_pinsker_check(instances: usize, support: usize, value_dim: usize, seed: u64) -> Result<TvPinskerReport> {
    if support == 0 || value_dim == 0 {
        return Err(Error::invalid("support", "support and value dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TvPinskerReport {
        instances,
        pinsker_violations: 0,
        shift_violations: 0,
        worst_pinsker_ratio: 0.0,
        worst_shift_ratio: 0.0,
    };
    for _ in 0..instances {
        let p = random_distribution(support, &mut rng);
        let q = random_distribution(support, &mut rng);
        let values: Vec<Vec<f64>> = (0..support)
            .map(|_| (0..value_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let pk = pinsker_check(&p, &q)?;
        let sh = expectation_shift_check(&p, &q, &values)?;
        report.pinsker_violations += usize::from(!pk.holds);
        report.shift_violations += usize::from(!sh.holds);
        if pk.bound.is_finite() && pk.bound > 0.0 {
            report.worst_pinsker_ratio = report.worst_pinsker_ratio.max(pk.tv / pk.bound);
        }
        if sh.bound > 0.0 {
            report.worst_shift_ratio = report.worst_shift_ratio.max(sh.shift / sh.bound);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientVarianceReport {
    pub clients: usize,
    pub samples: usize,
    /// Monte-Carlo mean of `|g_I - grad F|^2`.
    pub empirical: f64,
    pub standard_error: f64,
    /// Closed-form value of the same expectation.
    pub exact: f64,
    /// `sigma2_priv + (1/K) sum |grad F_i - grad F|^2`.
    pub bound: f64,
    pub slack: f64,
}

/// Sample a client uniformly, perturb its gradient with isotropic Gaussian
/// noise of total variance `sigma2_priv`, and measure the squared deviation
/// from the average gradient.
pub fn client_variance_check(
    gradients: &[Vec<f64>],
    sigma2_priv: f64,
    samples: usize,
    seed: u64,
) -> Result<ClientVarianceReport> {
    let k = gradients.len();
    if k == 0 {
        return Err(Error::invalid("gradients", "need at least one client"));
    }
    let dim = gradients[0].len();
    if dim == 0 || gradients.iter().any(|g| g.len() != dim || g.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid("gradients", "need finite vectors of one positive length"));
    }
    if !(sigma2_priv.is_finite() && sigma2_priv >= 0.0) {
        return Err(Error::invalid("sigma2_priv", "must be finite and >= 0"));
    }
    if samples < 2 {
        return Err(Error::invalid("samples", "need at least two samples"));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| gradients.iter().map(|g| g[j]).sum::<f64>() / k as f64)
        .collect();
    let spread: Vec<f64> = gradients
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let heterogeneity = spread.iter().sum::<f64>() / k as f64;

    let per_coord = (sigma2_priv / dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let g = &gradients[rng.random_range(0..k)];
        let mut s = 0.0;
        for j in 0..dim {
            let noise: f64 = if per_coord > 0.0 {
                per_coord * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let d = g[j] + noise - mean[j];
            s += d * d;
        }
        sum += s;
        sum_sq += s * s;
    }
    let n = samples as f64;
    let empirical = sum / n;
    let var = ((sum_sq - n * empirical * empirical) / (n - 1.0)).max(0.0);
    let bound = sigma2_priv + heterogeneity;
    Ok(ClientVarianceReport {
        clients: k,
        samples,
        empirical,
        standard_error: (var / n).sqrt(),
        exact: sigma2_priv + heterogeneity,
        bound,
        slack: bound - empirical,
    })
}
