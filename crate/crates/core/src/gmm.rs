//! Spherical (diagonal) Gaussian mixtures with fixed component weights, and
//! the EM machinery used both for the short within-domain tuning and for
//! running to convergence.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Scaler, Space};
use crate::error::{ensure, Error, Result};
use crate::seed;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on every per-dimension standard deviation, in scaled units.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Exponent rate used to pick the number of EM steps from the shot count.
pub const Z_BETA: f64 = 0.015;

/// Component responsibility mass below which a component keeps its old
/// parameters during the M-step.
pub const STARVATION_MASS: f64 = 1e-12;

/// Ascending weights `w_j = j / (1 + 2 + ... + J)`.
pub fn fixed_weights(j: usize) -> Result<Vec<f64>> {
    ensure!(j >= 1, InvalidArgument, "component count must be at least 1");
    let total = (j * (j + 1) / 2) as f64;
    Ok((1..=j).map(|k| k as f64 / total).collect())
}

/// Number of EM steps for `n` shots: `int(exp(beta * n))`, at least 1.
pub fn z_schedule(n: usize, beta: f64) -> Result<usize> {
    ensure!(n >= 1, InvalidArgument, "shot count must be at least 1");
    ensure!(beta.is_finite(), InvalidArgument, "beta must be finite");
    let z = (beta * n as f64).exp().trunc();
    Ok(if z.is_finite() && z >= 1.0 { z as usize } else { 1 })
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphericalGmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigmas: Vec<Vec<f64>>,
}

/// `N x J` matrix of posterior component probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub gamma: Vec<Vec<f64>>,
}

impl Responsibilities {
    pub fn column_mass(&self, j: usize) -> f64 {
        self.gamma.iter().map(|row| row[j]).sum()
    }
}

impl SphericalGmm {
    /// Builds a mixture with the fixed weights for `means.len()` components.
    pub fn new(means: Vec<Vec<f64>>, sigmas: Vec<Vec<f64>>) -> Result<Self> {
        let j = means.len();
        let weights = fixed_weights(j)?;
        ensure!(
            sigmas.len() == j,
            Shape,
            "{} mean rows but {} sigma rows",
            j,
            sigmas.len()
        );
        let t = means[0].len();
        ensure!(t >= 1, Shape, "dimension must be at least 1");
        for (m, s) in means.iter().zip(&sigmas) {
            ensure!(
                m.len() == t && s.len() == t,
                Shape,
                "all means and sigmas must have length {t}"
            );
            ensure!(
                m.iter().all(|v| v.is_finite()),
                Numeric,
                "non-finite mean"
            );
            ensure!(
                s.iter().all(|v| v.is_finite() && *v > 0.0),
                Numeric,
                "sigmas must be finite and positive"
            );
        }
        Ok(SphericalGmm {
            weights,
            means,
            sigmas,
        })
    }

    /// Same mean and sigma for every component.
    pub fn uniform(j: usize, mean: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        ensure!(j >= 1, InvalidArgument, "component count must be at least 1");
        SphericalGmm::new(vec![mean; j], vec![sigma; j])
    }

    pub fn j(&self) -> usize {
        self.means.len()
    }

    pub fn t(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigmas(&self) -> &[Vec<f64>] {
        &self.sigmas
    }

    /// Row-major `J x T` copy of the means.
    pub fn means_flat(&self) -> Vec<f64> {
        self.means.concat()
    }

    pub fn sigmas_flat(&self) -> Vec<f64> {
        self.sigmas.concat()
    }

    pub fn from_flat(j: usize, t: usize, means: &[f64], sigmas: &[f64]) -> Result<Self> {
        ensure!(
            means.len() == j * t && sigmas.len() == j * t,
            Shape,
            "flat parameter length does not match J={j}, T={t}"
        );
        let rows = |v: &[f64]| v.chunks(t).map(<[f64]>::to_vec).collect();
        SphericalGmm::new(rows(means), rows(sigmas))
    }

    /// `log w_j + log N(x | mu_j, diag(sigma_j^2))` for each component.
    fn component_log_terms(&self, x: &[f64], out: &mut [f64]) {
        let t = x.len() as f64;
        for (k, ((w, mu), sd)) in self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.sigmas)
            .enumerate()
        {
            let mut quad = 0.0;
            let mut log_sd = 0.0;
            for ((xi, m), s) in x.iter().zip(mu).zip(sd) {
                let z = (xi - m) / s;
                quad += z * z;
                log_sd += s.ln();
            }
            out[k] = w.ln() - 0.5 * t * LN_2PI - log_sd - 0.5 * quad;
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        ensure!(
            x.len() == self.t(),
            Shape,
            "sample has length {}, mixture dimension is {}",
            x.len(),
            self.t()
        );
        Ok(())
    }

    /// `log sum_j w_j N(x | mu_j, sigma_j)`, stabilised with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut terms = vec![0.0; self.j()];
        self.component_log_terms(x, &mut terms);
        Ok(log_sum_exp(&terms))
    }

    /// Negative log-likelihood summed over `samples`.
    pub fn nll(&self, samples: &[Vec<f64>]) -> Result<f64> {
        ensure!(!samples.is_empty(), InvalidArgument, "nll of an empty sample set");
        let mut terms = vec![0.0; self.j()];
        let mut lls = Vec::with_capacity(samples.len());
        for x in samples {
            self.check_dim(x)?;
            self.component_log_terms(x, &mut terms);
            lls.push(-log_sum_exp(&terms));
        }
        Ok(compensated_sum(lls))
    }

    pub fn e_step(&self, samples: &[Vec<f64>]) -> Result<Responsibilities> {
        ensure!(!samples.is_empty(), InvalidArgument, "e-step on an empty sample set");
        let mut gamma = Vec::with_capacity(samples.len());
        for x in samples {
            self.check_dim(x)?;
            let mut row = vec![0.0; self.j()];
            self.component_log_terms(x, &mut row);
            let lse = log_sum_exp(&row);
            for g in row.iter_mut() {
                *g = (*g - lse).exp();
            }
            // Renormalise so rounding never lets a row drift from 1.
            let s: f64 = row.iter().sum();
            for g in row.iter_mut() {
                *g /= s;
            }
            gamma.push(row);
        }
        Ok(Responsibilities { gamma })
    }

    /// Weighted mean/variance updates per component and dimension; sigmas are
    /// floored, starved components keep their previous parameters.
    pub fn m_step(
        &self,
        samples: &[Vec<f64>],
        resp: &Responsibilities,
        sigma_floor: f64,
    ) -> Result<SphericalGmm> {
        ensure!(
            resp.gamma.len() == samples.len(),
            Shape,
            "{} responsibility rows for {} samples",
            resp.gamma.len(),
            samples.len()
        );
        let t = self.t();
        let mut means = self.means.clone();
        let mut sigmas = self.sigmas.clone();
        for j in 0..self.j() {
            let mass: f64 = resp.gamma.iter().map(|r| r[j]).sum();
            if mass < STARVATION_MASS {
                continue;
            }
            let mut mu = vec![0.0; t];
            for (x, r) in samples.iter().zip(&resp.gamma) {
                for (m, xi) in mu.iter_mut().zip(x) {
                    *m += r[j] * xi;
                }
            }
            mu.iter_mut().for_each(|m| *m /= mass);
            let mut var = vec![0.0; t];
            for (x, r) in samples.iter().zip(&resp.gamma) {
                for ((v, xi), m) in var.iter_mut().zip(x).zip(&mu) {
                    let d = xi - m;
                    *v += r[j] * d * d;
                }
            }
            sigmas[j] = var
                .iter()
                .map(|v| (v / mass).sqrt().max(sigma_floor))
                .collect();
            means[j] = mu;
        }
        SphericalGmm::new(means, sigmas)
    }

    pub fn em_step(&self, samples: &[Vec<f64>], sigma_floor: f64) -> Result<SphericalGmm> {
        let resp = self.e_step(samples)?;
        self.m_step(samples, &resp, sigma_floor)
    }

    /// Draws `m` profiles: a component by weight, then independent normals.
    pub fn sample(&self, m: usize, seed: u64, clip_nonneg: bool) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed, &[0x6a11]);
        let mut cdf = Vec::with_capacity(self.j());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        (0..m)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let k = cdf.iter().position(|c| u < *c).unwrap_or(self.j() - 1);
                self.means[k]
                    .iter()
                    .zip(&self.sigmas[k])
                    .map(|(mu, s)| {
                        let z: f64 = rng.sample(StandardNormal);
                        let v = mu + s * z;
                        if clip_nonneg {
                            v.max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Parameters expressed in physical units.
    pub fn to_physical(&self, scaler: &Scaler) -> SphericalGmm {
        let map = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| scaler.invert_values(r)).collect()
        };
        SphericalGmm {
            weights: self.weights.clone(),
            means: map(&self.means),
            sigmas: map(&self.sigmas),
        }
    }
}

/// Runs exactly `z` EM steps from `theta_o` on the shots.
pub fn within_domain_tuning(
    theta_o: &SphericalGmm,
    shots: &[Vec<f64>],
    z: usize,
    sigma_floor: f64,
) -> Result<SphericalGmm> {
    ensure!(z >= 1, InvalidArgument, "z must be at least 1");
    ensure!(!shots.is_empty(), InvalidArgument, "no shots to tune on");
    let mut theta = theta_o.clone();
    for _ in 0..z {
        theta = theta.em_step(shots, sigma_floor)?;
    }
    Ok(theta)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub sigma_floor: f64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            tol: 1e-6,
            max_iter: 500,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Converged {
    pub gmm: SphericalGmm,
    pub iterations: usize,
    pub nll: f64,
}

/// Iterates EM until the relative NLL improvement drops below `tol`.
pub fn run_to_convergence(
    theta_o: &SphericalGmm,
    samples: &[Vec<f64>],
    opts: ConvergenceOptions,
) -> Result<Converged> {
    ensure!(!samples.is_empty(), InvalidArgument, "no samples to fit");
    ensure!(opts.max_iter >= 1, InvalidArgument, "max_iter must be at least 1");
    let mut theta = theta_o.clone();
    let mut prev = theta.nll(samples)?;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let next = theta.em_step(samples, opts.sigma_floor)?;
        let cur = next.nll(samples)?;
        iterations += 1;
        theta = next;
        let improvement = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
        prev = cur;
        if !(improvement >= opts.tol) {
            break;
        }
    }
    if !prev.is_finite() {
        return Err(Error::Numeric("EM produced a non-finite likelihood".into()));
    }
    Ok(Converged {
        gmm: theta,
        iterations,
        nll: prev,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    pub subsample: usize,
    pub convergence: ConvergenceOptions,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            subsample: 50_000,
            convergence: ConvergenceOptions::default(),
        }
    }
}

/// Shared starting mixture fitted on pooled source profiles.
///
/// Component `j` starts at the per-dimension quantile at the middle of its
/// cumulative-weight band, `(W_{j-1} + W_j) / 2`, with the
/// pooled per-dimension standard deviation, then EM runs to convergence on a
/// seeded subsample.
pub fn init_theta_o(
    pooled: &[Vec<f64>],
    j: usize,
    seed: u64,
    opts: InitOptions,
) -> Result<SphericalGmm> {
    ensure!(j >= 1, InvalidArgument, "component count must be at least 1");
    ensure!(
        pooled.len() >= 10 * j,
        InvalidArgument,
        "need at least {} pooled samples for J={j}, got {}",
        10 * j,
        pooled.len()
    );
    let t = pooled[0].len();
    ensure!(
        pooled.iter().all(|x| x.len() == t),
        Shape,
        "pooled samples disagree on T"
    );
    let data: Vec<Vec<f64>> = if pooled.len() > opts.subsample {
        let mut rng = seed::rng(seed, &[0x7e7a]);
        let mut picked = index::sample(&mut rng, pooled.len(), opts.subsample).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pooled[i].clone()).collect()
    } else {
        pooled.to_vec()
    };

    let n = data.len() as f64;
    let mut columns: Vec<Vec<f64>> = (0..t)
        .map(|d| data.iter().map(|x| x[d]).collect())
        .collect();
    let mut stds = Vec::with_capacity(t);
    for col in &columns {
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stds.push(var.sqrt());
    }
    if stds.iter().all(|s| *s <= 1e-12) {
        return Err(Error::Numeric("pooled data has zero variance".into()));
    }
    let sigma: Vec<f64> = stds
        .iter()
        .map(|s| s.max(opts.convergence.sigma_floor))
        .collect();
    let weights = fixed_weights(j)?;
    let mut levels = Vec::with_capacity(j);
    let mut cum = 0.0;
    for w in &weights {
        levels.push(100.0 * (cum + w / 2.0));
        cum += w;
    }
    let mut means = vec![vec![0.0; t]; j];
    for (d, col) in columns.iter_mut().enumerate() {
        for (k, row) in means.iter_mut().enumerate() {
            let q = levels[k];
            row[d] = crate::data::percentile(col, q)?;
        }
    }
    let start = SphericalGmm::new(means, vec![sigma; j])?;
    Ok(run_to_convergence(&start, &data, opts.convergence)?.gmm)
}

/// On-disk GMM parameters with the scaler needed to move between units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFile {
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
    pub scaler: Scaler,
    pub space: Space,
}

impl GmmFile {
    pub fn new(gmm: &SphericalGmm, scaler: Scaler, space: Space) -> Self {
        GmmFile {
            j: gmm.j(),
            t: gmm.t(),
            weights: gmm.weights.clone(),
            means: gmm.means.clone(),
            sigmas: gmm.sigmas.clone(),
            scaler,
            space,
        }
    }

    pub fn gmm(&self) -> Result<SphericalGmm> {
        let g = SphericalGmm::new(self.means.clone(), self.sigmas.clone())?;
        ensure!(
            g.j() == self.j && g.t() == self.t,
            Format,
            "declared J={} T={} disagree with parameter shapes",
            self.j,
            self.t
        );
        ensure!(
            self.weights.len() == self.j
                && self.weights.iter().zip(&g.weights).all(|(a, b)| (a - b).abs() <= 1e-12),
            Format,
            "weights are not the fixed ascending weights"
        );
        Ok(g)
    }

    /// Mixture in physical units regardless of the stored space.
    pub fn physical_gmm(&self) -> Result<SphericalGmm> {
        let g = self.gmm()?;
        Ok(match self.space {
            Space::Physical => g,
            Space::Scaled => g.to_physical(&self.scaler),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GmmFile = serde_json::from_str(&text)?;
        file.gmm()?;
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn g1(mu: f64, sd: f64) -> SphericalGmm {
        SphericalGmm::new(vec![vec![mu]], vec![vec![sd]]).unwrap()
    }

    #[test]
    fn weights_examples() {
        assert_eq!(fixed_weights(1).unwrap(), vec![1.0]);
        assert_eq!(fixed_weights(3).unwrap(), vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]);
        let w6 = fixed_weights(6).unwrap();
        let want = [0.04762, 0.09524, 0.14286, 0.19048, 0.23810, 0.28571];
        for (a, b) in w6.iter().zip(want) {
            assert!(close(*a, b, 5e-6));
        }
        assert!(fixed_weights(0).is_err());
        for j in 1..200 {
            assert!((fixed_weights(j).unwrap().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_density_examples() {
        let g = g1(0.0, 1.0);
        assert!(close(g.log_density(&[0.0]).unwrap(), -0.918_938_533_204_672_7, 1e-12));
        let twin = SphericalGmm::new(vec![vec![0.0]; 2], vec![vec![1.0]; 2]).unwrap();
        assert!(close(twin.log_density(&[0.3]).unwrap(), g.log_density(&[0.3]).unwrap(), 1e-14));
        let g2 = SphericalGmm::new(vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
        assert!(close(g2.log_density(&[0.0, 0.0]).unwrap(), -LN_2PI, 1e-12));
        assert!(matches!(g.log_density(&[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn log_density_is_finite_far_from_modes() {
        let g = SphericalGmm::new(vec![vec![0.0; 24]], vec![vec![SIGMA_FLOOR; 24]]).unwrap();
        let v = g.log_density(&[3.0; 24]).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn nll_examples() {
        let g = g1(0.0, 1.0);
        assert!(close(g.nll(&[vec![0.0]]).unwrap(), 0.918_938_533_204_672_7, 1e-12));
        let xs = vec![vec![0.3], vec![-1.2]];
        let doubled: Vec<_> = xs.iter().chain(&xs).cloned().collect();
        assert!(close(g.nll(&doubled).unwrap(), 2.0 * g.nll(&xs).unwrap(), 1e-12));
        let shifted = g1(5.0, 1.0);
        let xs5: Vec<_> = xs.iter().map(|x| vec![x[0] + 5.0]).collect();
        assert!(close(shifted.nll(&xs5).unwrap(), g.nll(&xs).unwrap(), 1e-12));
        assert!(g.nll(&[]).is_err());
    }

    #[test]
    fn e_step_examples() {
        let g = g1(0.0, 1.0);
        let r = g.e_step(&[vec![1.0], vec![-3.0]]).unwrap();
        assert!(r.gamma.iter().all(|row| row == &vec![1.0]));

        let twin = SphericalGmm::new(vec![vec![0.5]; 2], vec![vec![1.0]; 2]).unwrap();
        let r = twin.e_step(&[vec![0.0], vec![2.0]]).unwrap();
        for row in &r.gamma {
            assert!(close(row[0], 1.0 / 3.0, 1e-12) && close(row[1], 2.0 / 3.0, 1e-12));
        }

        let sym = SphericalGmm::new(vec![vec![-1.0], vec![1.0]], vec![vec![1.0]; 2]).unwrap();
        let r = sym.e_step(&[vec![0.0]]).unwrap();
        assert!(close(r.gamma[0][0], 1.0 / 3.0, 1e-12));
        assert!(close(r.gamma[0][1], 2.0 / 3.0, 1e-12));
    }

    #[test]
    fn m_step_examples() {
        let g = g1(0.0, 1.0);
        let xs = vec![vec![0.0], vec![2.0]];
        let r = Responsibilities { gamma: vec![vec![1.0]; 2] };
        let next = g.m_step(&xs, &r, SIGMA_FLOOR).unwrap();
        assert!(close(next.means()[0][0], 1.0, 1e-15));
        assert!(close(next.sigmas()[0][0], 1.0, 1e-15));

        let same = vec![vec![0.4]; 5];
        let r = Responsibilities { gamma: vec![vec![1.0]; 5] };
        let next = g.m_step(&same, &r, SIGMA_FLOOR).unwrap();
        assert_eq!(next.sigmas()[0][0], SIGMA_FLOOR);

        let two = SphericalGmm::new(vec![vec![0.0], vec![9.0]], vec![vec![1.0], vec![2.0]]).unwrap();
        let r = Responsibilities { gamma: vec![vec![1.0, 0.0]; 2] };
        let next = two.m_step(&xs, &r, SIGMA_FLOOR).unwrap();
        assert_eq!(next.means()[1], vec![9.0]);
        assert_eq!(next.sigmas()[1], vec![2.0]);
    }

    #[test]
    fn z_schedule_examples() {
        assert_eq!(z_schedule(4, Z_BETA).unwrap(), 1);
        assert_eq!(z_schedule(25, Z_BETA).unwrap(), 1);
        assert_eq!(z_schedule(47, Z_BETA).unwrap(), 2);
        assert_eq!(z_schedule(46, Z_BETA).unwrap(), 1);
        assert!(z_schedule(0, Z_BETA).is_err());
        assert_eq!(z_schedule(3, -1.0).unwrap(), 1);
    }

    #[test]
    fn single_component_tuning_is_closed_form() {
        let theta = g1(10.0, 3.0);
        let shots = vec![vec![1.0], vec![2.0], vec![6.0]];
        let e = within_domain_tuning(&theta, &shots, 1, SIGMA_FLOOR).unwrap();
        let mean = 3.0;
        let sd = ((4.0 + 1.0 + 9.0) / 3.0f64).sqrt();
        assert!(close(e.means()[0][0], mean, 1e-12));
        assert!(close(e.sigmas()[0][0], sd, 1e-12));
        assert!(within_domain_tuning(&theta, &shots, 0, SIGMA_FLOOR).is_err());
        assert!(within_domain_tuning(&theta, &[], 1, SIGMA_FLOOR).is_err());
    }

    #[test]
    fn tuning_moves_means_toward_shots() {
        let theta = SphericalGmm::new(
            vec![vec![0.0, 0.0], vec![2.0, 2.0]],
            vec![vec![1.0, 1.0]; 2],
        )
        .unwrap();
        let shots = vec![vec![0.3, -0.2], vec![1.8, 2.4], vec![2.1, 2.2]];
        let mut cur = theta.clone();
        let mut last = cur.nll(&shots).unwrap();
        for _ in 0..5 {
            cur = cur.em_step(&shots, SIGMA_FLOOR).unwrap();
            let v = cur.nll(&shots).unwrap();
            assert!(v <= last + 1e-8);
            last = v;
        }
        assert!(cur.means()[0][0] > 0.0 && cur.means()[0][0] <= 0.3 + 1e-9);
    }

    #[test]
    fn tuning_is_composition_of_single_steps() {
        let theta = SphericalGmm::new(
            vec![vec![0.0, 0.1], vec![0.5, 0.4], vec![1.0, 1.0]],
            vec![vec![0.3, 0.2]; 3],
        )
        .unwrap();
        let shots: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.07]).collect();
        let direct = within_domain_tuning(&theta, &shots, 4, SIGMA_FLOOR).unwrap();
        let mut stepped = theta;
        for _ in 0..4 {
            stepped = within_domain_tuning(&stepped, &shots, 1, SIGMA_FLOOR).unwrap();
        }
        assert_eq!(direct, stepped);
    }

    #[test]
    fn infinite_tolerance_is_one_step() {
        let theta = SphericalGmm::new(vec![vec![0.0], vec![1.0]], vec![vec![0.5]; 2]).unwrap();
        let xs = vec![vec![0.1], vec![0.2], vec![0.9], vec![1.3]];
        let opts = ConvergenceOptions { tol: f64::INFINITY, ..Default::default() };
        let c = run_to_convergence(&theta, &xs, opts).unwrap();
        assert_eq!(c.iterations, 1);
        assert_eq!(c.gmm, within_domain_tuning(&theta, &xs, 1, SIGMA_FLOOR).unwrap());
    }

    #[test]
    fn init_single_component_is_pooled_moments() {
        let pooled: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let g = init_theta_o(&pooled, 1, 3, InitOptions::default()).unwrap();
        let n = pooled.len() as f64;
        for d in 0..2 {
            let mean = pooled.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = pooled.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
            assert!(close(g.means()[0][d], mean, 1e-10));
            assert!(close(g.sigmas()[0][d], var.sqrt(), 1e-10));
        }
    }

    #[test]
    fn init_guards() {
        let pooled = vec![vec![0.5, 0.5]; 100];
        assert!(matches!(init_theta_o(&pooled, 3, 0, InitOptions::default()), Err(Error::Numeric(_))));
        let few = vec![vec![0.5]; 29];
        assert!(init_theta_o(&few, 3, 0, InitOptions::default()).is_err());
    }

    #[test]
    fn init_is_deterministic_with_subsampling() {
        let pooled: Vec<Vec<f64>> = (0..300)
            .map(|i| vec![((i * 37) % 101) as f64 / 100.0, ((i * 11) % 53) as f64 / 50.0])
            .collect();
        let opts = InitOptions { subsample: 120, ..Default::default() };
        let a = init_theta_o(&pooled, 3, 8, opts).unwrap();
        let b = init_theta_o(&pooled, 3, 8, opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_concentrates_and_is_deterministic() {
        let g = SphericalGmm::new(vec![vec![1.0, 2.0], vec![-4.0, 0.0]], vec![vec![1e-9; 2]; 2]).unwrap();
        let xs = g.sample(500, 3, false);
        for x in &xs {
            let near = g.means().iter().any(|m| m.iter().zip(x).all(|(a, b)| (a - b).abs() <= 6e-9));
            assert!(near);
        }
        assert_eq!(xs, g.sample(500, 3, false));
        let clipped = g.sample(100, 3, true);
        assert!(clipped.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let means: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64 * 100.0]).collect();
        let g = SphericalGmm::new(means, vec![vec![1e-3]; 6]).unwrap();
        let xs = g.sample(100_000, 11, false);
        let mut counts = [0usize; 6];
        for x in xs {
            counts[(x[0] / 100.0).round() as usize] += 1;
        }
        for (c, w) in counts.iter().zip(fixed_weights(6).unwrap()) {
            assert!((*c as f64 / 1e5 - w).abs() < 0.01);
        }
    }

    #[test]
    fn self_sample_nll_matches_entropy_estimate() {
        // For a well separated mixture the differential entropy is
        // H = sum_j w_j (H_j - ln w_j) with Gaussian entropies H_j.
        let g = SphericalGmm::new(
            vec![vec![0.0, 0.0], vec![40.0, 40.0], vec![-40.0, 40.0]],
            vec![vec![1.0, 2.0], vec![0.5, 0.5], vec![3.0, 1.0]],
        )
        .unwrap();
        let entropy: f64 = g
            .weights()
            .iter()
            .zip(g.sigmas())
            .map(|(w, s)| {
                let hj: f64 = s.iter().map(|sd| 0.5 * (LN_2PI + 1.0) + sd.ln()).sum();
                w * (hj - w.ln())
            })
            .sum();
        let xs = g.sample(100_000, 5, false);
        let per_sample = g.nll(&xs).unwrap() / xs.len() as f64;
        assert!((per_sample - entropy).abs() <= 0.01 * entropy.abs());
    }

    #[test]
    fn gmm_file_round_trip_is_byte_exact() {
        let g = SphericalGmm::new(
            vec![vec![0.1, 0.123456789012345], vec![1.0 / 3.0, 2.0]],
            vec![vec![0.7, 0.01], vec![1e-3, 0.25]],
        )
        .unwrap();
        let f = GmmFile::new(&g, Scaler::new(1.7, 3.0).unwrap(), Space::Scaled);
        let text = f.to_json().unwrap();
        let back: GmmFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.gmm().unwrap(), g);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.contains("\"J\": 2") && text.contains("\"space\": \"scaled\""));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_problem() -> impl Strategy<Value = (SphericalGmm, Vec<Vec<f64>>)> {
            (1usize..5, 1usize..4, 2usize..30).prop_flat_map(|(j, t, n)| {
                (
                    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, t), j),
                    prop::collection::vec(prop::collection::vec(0.05f64..1.5, t), j),
                    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, t), n),
                )
                    .prop_map(|(m, s, x)| (SphericalGmm::new(m, s).unwrap(), x))
            })
        }

        proptest! {
            #[test]
            fn em_never_increases_nll((g, xs) in arb_problem()) {
                let mut cur = g;
                let mut last = cur.nll(&xs).unwrap();
                for _ in 0..4 {
                    cur = cur.em_step(&xs, SIGMA_FLOOR).unwrap();
                    let v = cur.nll(&xs).unwrap();
                    prop_assert!(v <= last + 1e-8, "{} -> {}", last, v);
                    last = v;
                }
            }

            #[test]
            fn responsibility_rows_sum_to_one((g, xs) in arb_problem()) {
                for row in g.e_step(&xs).unwrap().gamma {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
