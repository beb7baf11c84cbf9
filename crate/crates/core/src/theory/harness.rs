//! Biased SGD on a synthetic heterogeneous quadratic.
//!
//! Client `i` has private objective `F_i(x) = 1/2 (x - c_i)' A (x - c_i)`.
//! The reference objective is `Phi(x) = 1/2 F(x) + 1/2 G(x)` where `F` is
//! the client average and `G` shares the optimum `c = mean(c_i)`, so
//! `grad Phi(x) = A (x - c)` in closed form. Each step samples one client and
//! uses
//!
//! `g = 1/2 grad F_I(x) + 1/2 grad G(x) + b + xi`
//!
//! with a bias `b` of fixed norm (the surrogate-minus-reference public
//! gradient, at most half the gap) and isotropic Gaussian noise `xi` with
//! `E|xi|^2 = sigma^2`. The conditional variance of `g` is then exactly
//! `sigma^2 + zeta^2 / 4` with `zeta^2 = mean_i |A (c_i - c)|^2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bound::{delta_t, stationarity_rhs, GapParams, StationarityBound, StationarityParams};
use crate::encoder::splitmix64;
use crate::error::{Error, Result};

/// Direction of the injected bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Against the true gradient, the direction that slows descent most.
    #[default]
    Opposing,
    /// Uniformly random direction each step.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticProblem {
    /// Symmetric PSD curvature, row-major `dim x dim`.
    curvature: Vec<f64>,
    dim: usize,
    smoothness: f64,
    client_optima: Vec<Vec<f64>>,
    start: Vec<f64>,
    /// Standard deviation of the total gradient noise, `E|xi|^2 = noise^2`.
    pub noise: f64,
    /// Norm of the injected bias; `None` uses half the gap.
    pub bias: Option<f64>,
    pub bias_mode: BiasMode,
    pub seed: u64,
}

fn mat_vec(a: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
    (0..dim)
        .map(|r| (0..dim).map(|c| a[r * dim + c] * x[c]).sum())
        .collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl SyntheticProblem {
    /// Curvature `Q diag(eigenvalues) Q'` for a seeded random rotation `Q`.
    /// The largest eigenvalue is the smoothness constant.
    pub fn new(
        eigenvalues: &[f64],
        client_optima: Vec<Vec<f64>>,
        start: Vec<f64>,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim = eigenvalues.len();
        if dim == 0 {
            return Err(Error::invalid("eigenvalues", "dimension must be positive"));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("eigenvalues", "curvature must be positive semidefinite"));
        }
        let smoothness = eigenvalues.iter().copied().fold(0.0, f64::max);
        if smoothness <= 0.0 {
            return Err(Error::invalid("eigenvalues", "largest eigenvalue must be positive"));
        }
        if client_optima.is_empty() || client_optima.iter().any(|c| c.len() != dim) || start.len() != dim {
            return Err(Error::invalid("client_optima", format!("need >= 1 client and vectors of length {dim}")));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::invalid("noise", "must be finite and >= 0"));
        }

        // Gram-Schmidt on a seeded Gaussian matrix gives the rotation.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while q.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = norm2(&v).sqrt();
            if n > 1e-8 {
                q.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut curvature = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                curvature[r * dim + c] = (0..dim).map(|k| eigenvalues[k] * q[k][r] * q[k][c]).sum();
            }
        }
        Ok(Self {
            curvature,
            dim,
            smoothness,
            client_optima,
            start,
            noise,
            bias: None,
            bias_mode: BiasMode::Opposing,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn optimum(&self) -> Vec<f64> {
        let k = self.client_optima.len() as f64;
        (0..self.dim)
            .map(|j| self.client_optima.iter().map(|c| c[j]).sum::<f64>() / k)
            .collect()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = x.iter().zip(self.optimum()).map(|(a, b)| a - b).collect();
        mat_vec(&self.curvature, self.dim, &diff)
    }

    /// `Phi(start) - inf Phi`.
    pub fn init_gap(&self) -> f64 {
        let diff: Vec<f64> = self.start.iter().zip(self.optimum()).map(|(a, b)| a - b).collect();
        let ad = mat_vec(&self.curvature, self.dim, &diff);
        0.5 * diff.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `mean_i |grad F_i - grad F|^2`, constant in `x` for quadratics.
    pub fn heterogeneity(&self) -> f64 {
        let c = self.optimum();
        let k = self.client_optima.len() as f64;
        self.client_optima
            .iter()
            .map(|ci| {
                let d: Vec<f64> = c.iter().zip(ci).map(|(a, b)| a - b).collect();
                norm2(&mat_vec(&self.curvature, self.dim, &d))
            })
            .sum::<f64>()
            / k
    }

    /// Run `steps` biased SGD steps and return the average of `|grad Phi|^2`
    /// over iterates `0..steps`.
    pub fn run(&self, step: f64, steps: u64, bias: f64, run_seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let dim = self.dim;
        let c = self.optimum();
        let per_coord = self.noise / (dim as f64).sqrt();
        let mut x = self.start.clone();
        let mut total = 0.0;
        for _ in 0..steps {
            let grad = self.gradient(&x);
            let gn2 = norm2(&grad);
            total += gn2;

            let ci = &self.client_optima[rng.random_range(0..self.client_optima.len())];
            let client_diff: Vec<f64> = x.iter().zip(ci).map(|(a, b)| a - b).collect();
            let client_grad = mat_vec(&self.curvature, dim, &client_diff);
            let public_diff: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            let public_grad = mat_vec(&self.curvature, dim, &public_diff);

            let direction: Vec<f64> = match self.bias_mode {
                BiasMode::Opposing => {
                    let n = gn2.sqrt();
                    if n > 0.0 {
                        grad.iter().map(|g| -g / n).collect()
                    } else {
                        vec![0.0; dim]
                    }
                }
                BiasMode::Random => {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let n = norm2(&v).sqrt();
                    v.into_iter().map(|a| a / n).collect()
                }
            };
            for j in 0..dim {
                let xi: f64 = if per_coord > 0.0 {
                    per_coord * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let g = 0.5 * client_grad[j] + 0.5 * public_grad[j] + bias * direction[j] + xi;
                x[j] -= step * g;
            }
        }
        total / steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckReport {
    pub runs: usize,
    pub bias: f64,
    /// Per-run average squared gradient norm, in seed order.
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub rhs: StationarityBound,
    /// Runs whose average exceeded the bound.
    pub violations: usize,
    pub holds: bool,
}

/// Run the harness for `runs` seeds and compare against the stationarity bound.
///
/// `gap.total_steps` is the number of SGD steps per run. Instances violating
/// the bound's hypotheses (bias above Delta/2, step above 1/(4L)) are rejected rather than reported as failures.
pub fn empirical_bound_check(
    problem: &SyntheticProblem,
    gap: &GapParams,
    step: f64,
    runs: usize,
) -> Result<BoundCheckReport> {
    if runs == 0 {
        return Err(Error::invalid("runs", "must be positive"));
    }
    let params = StationarityParams {
        gap: *gap,
        smoothness: problem.smoothness,
        step,
        noise_var: problem.noise * problem.noise,
        heterogeneity: problem.heterogeneity(),
        init_gap: problem.init_gap(),
    };
    let rhs = stationarity_rhs(&params)?;
    let half_gap = delta_t(gap)? / 2.0;
    let bias = problem.bias.unwrap_or(half_gap);
    if !(bias >= 0.0 && bias <= half_gap * (1.0 + 1e-12)) {
        return Err(Error::invalid(
            "bias",
            format!("injected bias {bias} must lie in [0, Delta/2 = {half_gap}]"),
        ));
    }
    let per_run: Vec<f64> = (0..runs as u64)
        .into_par_iter()
        .map(|r| problem.run(step, gap.total_steps, bias, splitmix64(problem.seed ^ splitmix64(r))))
        .collect();
    let violations = per_run.iter().filter(|v| **v > rhs.total).count();
    let mean = per_run.iter().sum::<f64>() / runs as f64;
    let max = per_run.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BoundCheckReport {
        runs,
        bias,
        mean,
        max,
        holds: violations == 0 && mean <= rhs.total,
        violations,
        per_run,
        rhs,
    })
}
