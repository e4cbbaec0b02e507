//! Distances between a generated sample set and a reference set.
//!
//! Sets are slices of equal-length points. All estimators are pure and
//! deterministic.

use std::path::Path;

use rand::seq::index;
use serde::Serialize;

use crate::data::{Domain, Space};
use crate::error::{ensure, Error, Result};
use crate::gmm::SphericalGmm;
use crate::seed;

pub const KL_K: usize = 5;
pub const DEFAULT_M: usize = 250;
const KL_FLOOR: f64 = 1e-12;

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>], min: usize, what: &str) -> Result<usize> {
    ensure!(
        a.len() >= min && b.len() >= min,
        InvalidArgument,
        "{what} needs at least {min} points per set, got {} and {}",
        a.len(),
        b.len()
    );
    let t = a[0].len();
    ensure!(
        a.iter().chain(b).all(|x| x.len() == t),
        Shape,
        "{what}: points disagree on dimension"
    );
    Ok(t)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median of all pairwise distances over `a` and `b` together, falling back
/// to the median positive distance when more than half the pairs coincide.
fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    let median = |v: &mut Vec<f64>| {
        if v.is_empty() {
            return 0.0;
        }
        let mid = v.len() / 2;
        *v.select_nth_unstable_by(mid, f64::total_cmp).1
    };
    let m = median(&mut d);
    if m > 0.0 {
        return m;
    }
    d.retain(|x| *x > 0.0);
    median(&mut d)
}

fn kernel_mean(x: &[Vec<f64>], y: &[Vec<f64>], gamma: f64) -> f64 {
    let mut total = 0.0;
    for a in x {
        for b in y {
            total += (-gamma * sq_dist(a, b)).exp();
        }
    }
    total / (x.len() * y.len()) as f64
}

/// RBF-kernel MMD (square root of the biased V-statistic) with the median
/// heuristic bandwidth.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b, 2, "mmd")?;
    let bw = median_bandwidth(a, b);
    if bw == 0.0 {
        return Ok(0.0);
    }
    let gamma = 1.0 / (2.0 * bw * bw);
    let v = kernel_mean(a, a, gamma) + kernel_mean(b, b, gamma) - 2.0 * kernel_mean(a, b, gamma);
    Ok(v.max(0.0).sqrt())
}

/// Distance to the `k`-th nearest neighbour of `x` in `set`, skipping index
/// `skip` when given.
fn kth_distance(x: &[f64], set: &[Vec<f64>], k: usize, skip: Option<usize>) -> f64 {
    let mut best = vec![f64::INFINITY; k];
    for (i, y) in set.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let d = sq_dist(x, y);
        if d < best[k - 1] {
            let pos = best.partition_point(|v| *v <= d);
            best.insert(pos, d);
            best.pop();
        }
    }
    best[k - 1].sqrt()
}

/// k-nearest-neighbour estimate of KL(P_A || P_B).
pub fn kl_knn(a: &[Vec<f64>], b: &[Vec<f64>], k: usize) -> Result<f64> {
    ensure!(k >= 1, InvalidArgument, "k must be at least 1");
    let t = check_sets(a, b, 1, "kl_knn")?;
    ensure!(
        a.len() > k && b.len() > k,
        InvalidArgument,
        "kl_knn with k={k} needs more than {k} points per set, got {} and {}",
        a.len(),
        b.len()
    );
    let (ma, mb) = (a.len() as f64, b.len() as f64);
    let sum: f64 = a
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let rho = kth_distance(x, a, k, Some(i)).max(KL_FLOOR);
            let nu = kth_distance(x, b, k, None).max(KL_FLOOR);
            (nu / rho).ln()
        })
        .sum();
    Ok(t as f64 / ma * sum + (mb / (ma - 1.0)).ln())
}

fn column(set: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut c: Vec<f64> = set.iter().map(|x| x[d]).collect();
    c.sort_by(f64::total_cmp);
    c
}

fn ks_1d(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Mean over dimensions of the two-sample Kolmogorov-Smirnov statistic.
pub fn ks_marginal(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let t = check_sets(a, b, 1, "ks_marginal")?;
    let total: f64 = (0..t).map(|d| ks_1d(&column(a, d), &column(b, d))).sum();
    Ok(total / t as f64)
}

fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // Integral of |F_a - F_b| over the merged breakpoints.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(p), Some(q)) => p.min(*q),
            (Some(p), None) => *p,
            (None, Some(q)) => *q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        prev = x;
    }
    total
}

/// Mean over dimensions of the 1-Wasserstein distance between marginals.
pub fn wd_marginal(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let t = check_sets(a, b, 1, "wd_marginal")?;
    let total: f64 = (0..t).map(|d| w1_1d(&column(a, d), &column(b, d))).sum();
    Ok(total / t as f64)
}

fn mean_vector(set: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; set[0].len()];
    for x in set {
        m.iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    m.iter_mut().for_each(|s| *s /= set.len() as f64);
    m
}

/// Mean over dimensions of the squared difference of means.
pub fn mse_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let t = check_sets(a, b, 1, "mse_mean")?;
    let (ma, mb) = (mean_vector(a), mean_vector(b));
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / t as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mmd: f64,
    pub kl: f64,
    pub ks: f64,
    pub wd: f64,
    pub mse_mean: f64,
    pub m_generated: usize,
    pub m_reference: usize,
    pub seed: u64,
}

/// All five metrics of `generated` against `reference`.
///
/// Metrics whose set-size precondition fails on a tiny generated set are
/// reported as NaN rather than failing the whole report; KL uses
/// `k = min(5, m_generated - 1)` when the generated set is small.
pub fn compare(generated: &[Vec<f64>], reference: &[Vec<f64>], seed: u64) -> Result<MetricReport> {
    check_sets(generated, reference, 1, "compare")?;
    let k = KL_K.min(generated.len() - 1).min(reference.len() - 1);
    Ok(MetricReport {
        mmd: if generated.len() >= 2 && reference.len() >= 2 {
            mmd(generated, reference)?
        } else {
            f64::NAN
        },
        kl: if k >= 1 {
            kl_knn(generated, reference, k)?
        } else {
            f64::NAN
        },
        ks: ks_marginal(generated, reference)?,
        wd: wd_marginal(generated, reference)?,
        mse_mean: mse_mean(generated, reference)?,
        m_generated: generated.len(),
        m_reference: reference.len(),
        seed,
    })
}

/// Draws `m` non-negative samples from `gmm` and compares them with the
/// complete domain.
pub fn evaluate_domain(
    gmm: &SphericalGmm,
    space: Space,
    domain: &Domain,
    m: usize,
    seed: u64,
) -> Result<MetricReport> {
    ensure!(
        space == domain.space,
        InvalidArgument,
        "mixture is in {space:?} units but domain {} is {:?}",
        domain.domain_id,
        domain.space
    );
    ensure!(
        gmm.t() == domain.t(),
        Shape,
        "mixture T={} but domain T={}",
        gmm.t(),
        domain.t()
    );
    ensure!(m >= 1, InvalidArgument, "m must be at least 1");
    let generated = gmm.sample(m, seed, true);
    compare(&generated, &domain.points(), seed)
}

/// MMD between random disjoint halves of `points`, `reps` times.
pub fn split_half_null(points: &[Vec<f64>], reps: usize, seed: u64) -> Result<Vec<f64>> {
    ensure!(points.len() >= 4, InvalidArgument, "split-half null needs at least 4 points");
    let half = points.len() / 2;
    (0..reps)
        .map(|r| {
            let mut rng = seed::rng(seed, &[0x5411, r as u64]);
            let perm = index::sample(&mut rng, points.len(), 2 * half).into_vec();
            let a: Vec<Vec<f64>> = perm[..half].iter().map(|&i| points[i].clone()).collect();
            let b: Vec<Vec<f64>> = perm[half..].iter().map(|&i| points[i].clone()).collect();
            mmd(&a, &b)
        })
        .collect()
}

/// One row of the metric report CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub domain_id: String,
    pub n_shots: usize,
    pub method: String,
    pub report: MetricReport,
}

pub const METRIC_HEADER: [&str; 9] = [
    "domain_id", "n_shots", "method", "mmd", "kl", "ks", "wd", "mse_mean", "seed",
];

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_HEADER)?;
    for r in rows {
        let m = &r.report;
        w.write_record([
            r.domain_id.clone(),
            r.n_shots.to_string(),
            r.method.clone(),
            m.mmd.to_string(),
            m.kl.to_string(),
            m.ks.to_string(),
            m.wd.to_string(),
            m.mse_mean.to_string(),
            m.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
