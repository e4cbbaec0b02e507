//! Synthetic households with known mixtures, and the baseline comparison
//! run on held-out targets.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    fit_scaler, sample_shots, DatasetCounts, Domain, DomainCollection, EcpSample, Manifest,
    PreparedDataset, Role, Space, Split, PREPARED_FORMAT_VERSION,
};
use crate::encoder::predict;
use crate::error::{ensure, Error, Result};
use crate::gmm::{
    run_to_convergence, within_domain_tuning, z_schedule, ConvergenceOptions,
    GmmFile, SphericalGmm, Z_BETA,
};
use crate::metrics::{self, MetricReport};
use crate::seed;

/// Generator settings. Ranges are `[lo, hi]`; readings are in kW.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_domains: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "J_true")]
    pub j_true: usize,
    pub samples_per_domain: usize,
    /// Household base load.
    pub base_level: [f64; 2],
    pub harmonics: usize,
    /// Harmonic amplitude relative to the base load, divided by the order.
    pub harmonic_amp: [f64; 2],
    pub morning_hour: [f64; 2],
    pub evening_hour: [f64; 2],
    pub peak_width: [f64; 2],
    /// Peak heights relative to the base load.
    pub morning_height: [f64; 2],
    pub evening_height: [f64; 2],
    /// Per-component log level factor, giving the spread between components.
    pub component_log_level: [f64; 2],
    /// Per-component peak height factor.
    pub component_peak: [f64; 2],
    /// Max shift of a component's peaks, in hours.
    pub peak_jitter: f64,
    /// Standard deviation as a fraction of the component mean.
    pub sigma_rel: [f64; 2],
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_domains: 100,
            t: 24,
            j_true: 6,
            samples_per_domain: 250,
            base_level: [0.15, 0.6],
            harmonics: 3,
            harmonic_amp: [0.0, 0.3],
            morning_hour: [6.0, 9.0],
            evening_hour: [17.0, 21.0],
            peak_width: [0.8, 2.5],
            morning_height: [0.2, 1.5],
            evening_height: [0.5, 2.5],
            component_log_level: [-1.0, 1.0],
            component_peak: [0.85, 1.15],
            peak_jitter: 0.25,
            sigma_rel: [0.1, 0.3],
            master_seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    ensure!(
        r[0].is_finite() && r[1].is_finite() && r[0] < r[1],
        InvalidArgument,
        "{name} range {r:?} is empty"
    );
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.t >= 1, InvalidArgument, "T must be at least 1");
        ensure!(self.j_true >= 1, InvalidArgument, "J_true must be at least 1");
        ensure!(
            (1..=366).contains(&self.samples_per_domain),
            InvalidArgument,
            "samples_per_domain must lie in 1..=366"
        );
        check_range("base_level", self.base_level)?;
        ensure!(self.base_level[0] > 0.0, InvalidArgument, "base_level must be positive");
        for (name, r) in [
            ("harmonic_amp", self.harmonic_amp),
            ("morning_hour", self.morning_hour),
            ("evening_hour", self.evening_hour),
            ("peak_width", self.peak_width),
            ("morning_height", self.morning_height),
            ("evening_height", self.evening_height),
            ("component_log_level", self.component_log_level),
            ("component_peak", self.component_peak),
            ("sigma_rel", self.sigma_rel),
        ] {
            check_range(name, r)?;
        }
        ensure!(
            self.peak_width[0] > 0.0 && self.sigma_rel[0] > 0.0,
            InvalidArgument,
            "peak_width and sigma_rel must be positive"
        );
        ensure!(self.peak_jitter >= 0.0, InvalidArgument, "peak_jitter must be non-negative");
        Ok(())
    }
}

/// A generated domain with the mixture it was drawn from (physical units).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDomain {
    pub domain: Domain,
    pub truth: SphericalGmm,
}

fn draw(rng: &mut seed::Rng, r: [f64; 2]) -> f64 {
    rng.random_range(r[0]..r[1])
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    // Peaks wrap around midnight.
    let d = (hour - centre).rem_euclid(24.0);
    let d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

/// Mixture for domain `index`: one household shape, varied per component.
pub fn draw_truth(config: &SynthConfig, index: usize) -> Result<SphericalGmm> {
    let mut rng = seed::rng(config.master_seed, &[0x5e7, index as u64]);
    let base = draw(&mut rng, config.base_level);
    let harm: Vec<(f64, f64)> = (1..=config.harmonics)
        .map(|k| {
            let amp = draw(&mut rng, config.harmonic_amp) / k as f64;
            (amp, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let morning = (
        draw(&mut rng, config.morning_hour),
        draw(&mut rng, config.peak_width),
        draw(&mut rng, config.morning_height),
    );
    let evening = (
        draw(&mut rng, config.evening_hour),
        draw(&mut rng, config.peak_width),
        draw(&mut rng, config.evening_height),
    );
    let hours: Vec<f64> = (0..config.t).map(|i| 24.0 * i as f64 / config.t as f64).collect();

    let mut comps: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(config.j_true);
    for _ in 0..config.j_true {
        let level = draw(&mut rng, config.component_log_level).exp();
        let peak_scale = [
            draw(&mut rng, config.component_peak),
            draw(&mut rng, config.component_peak),
        ];
        let jitter = config.peak_jitter;
        let shift = if jitter > 0.0 {
            [rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter)]
        } else {
            [0.0, 0.0]
        };
        let rel = draw(&mut rng, config.sigma_rel);
        let mean: Vec<f64> = hours
            .iter()
            .map(|&h| {
                let wave: f64 = harm
                    .iter()
                    .enumerate()
                    .map(|(k, (a, phase))| {
                        a * ((k + 1) as f64 * std::f64::consts::TAU * h / 24.0 + phase).sin()
                    })
                    .sum();
                let peaks = peak_scale[0] * morning.2 * bump(h, morning.0 + shift[0], morning.1)
                    + peak_scale[1] * evening.2 * bump(h, evening.0 + shift[1], evening.1);
                let shape = (1.0 + wave + peaks).max(0.05);
                base * level * shape
            })
            .collect();
        let sigma = mean.iter().map(|m| (rel * m).max(1e-3)).collect();
        comps.push((mean, sigma));
    }
    // Weights rise with the index, so order components by total load: the
    // heavier the day type, the more frequent.
    comps.sort_by(|a, b| a.0.iter().sum::<f64>().total_cmp(&b.0.iter().sum::<f64>()));
    let (means, sigmas) = comps.into_iter().unzip();
    SphericalGmm::new(means, sigmas)
}

/// Draws the domain's profiles from its truth on distinct, ordered days.
pub fn draw_domain(config: &SynthConfig, index: usize, truth: &SphericalGmm) -> Result<Domain> {
    let sample_seed = seed::derive(config.master_seed, &[0x5a3, index as u64]);
    let profiles = truth.sample(config.samples_per_domain, sample_seed, true);
    let mut rng = seed::rng(sample_seed, &[0xda7]);
    let mut days = index::sample(&mut rng, 365, config.samples_per_domain).into_vec();
    days.sort_unstable();
    let samples = profiles
        .into_iter()
        .zip(days)
        .map(|(v, d)| EcpSample::new(v, d as u16 + 1))
        .collect::<Result<Vec<_>>>()?;
    let id = format!("synth{index:05}");
    Domain::new(id.clone(), id, samples, Space::Physical)
}

/// Domains `0..n_domains`, each reproducible from the seed and its index.
pub fn gen_domains(config: &SynthConfig) -> Result<Vec<SynthDomain>> {
    config.validate()?;
    (0..config.n_domains)
        .into_par_iter()
        .map(|i| {
            let truth = draw_truth(config, i)?;
            let domain = draw_domain(config, i, &truth)?;
            Ok(SynthDomain { domain, truth })
        })
        .collect()
}

pub fn gen_collection(config: &SynthConfig) -> Result<(DomainCollection, Vec<SphericalGmm>)> {
    let (domains, truths) = gen_domains(config)?
        .into_iter()
        .map(|s| (s.domain, s.truth))
        .unzip();
    Ok((DomainCollection::new(Role::Source, domains)?, truths))
}

/// Truth record as written next to a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub domain_id: String,
    pub role: Role,
    pub truth: GmmFile,
}

/// Generates `counts = [source, target, validation]` domains in that order
/// and packages them as a prepared dataset with the scaler fitted on the
/// source part.
pub fn synth_dataset(
    config: &SynthConfig,
    counts: [usize; 3],
) -> Result<(PreparedDataset, Vec<TruthRecord>)> {
    ensure!(counts[0] >= 1, InvalidArgument, "need at least one source domain");
    let total: usize = counts.iter().sum();
    let cfg = SynthConfig {
        n_domains: total,
        ..config.clone()
    };
    let mut all = gen_domains(&cfg)?.into_iter();
    let roles = [Role::Source, Role::Target, Role::Validation];
    let mut parts: Vec<(Role, Vec<SynthDomain>)> = Vec::new();
    for (role, n) in roles.into_iter().zip(counts) {
        parts.push((role, all.by_ref().take(n).collect()));
    }
    let mut collections = Vec::new();
    let mut truths_raw = Vec::new();
    for (role, doms) in parts {
        let mut domains = Vec::with_capacity(doms.len());
        for s in doms {
            truths_raw.push((s.domain.domain_id.clone(), role, s.truth));
            domains.push(s.domain);
        }
        collections.push(DomainCollection::new(role, domains)?);
    }
    let [source, test, validation]: [DomainCollection; 3] =
        collections.try_into().expect("three roles");
    let scaler = fit_scaler(&source, 99.0, 3.0)?;
    let truths = truths_raw
        .into_iter()
        .map(|(domain_id, role, g)| TruthRecord {
            domain_id,
            role,
            truth: GmmFile::new(&g, scaler, Space::Physical),
        })
        .collect();
    let manifest = Manifest {
        format_version: PREPARED_FORMAT_VERSION,
        t: config.t,
        window: config.samples_per_domain,
        split_seed: config.master_seed,
        counts: DatasetCounts {
            households: total,
            excluded_households: 0,
            dropped_rows: 0,
            source_domains: source.len(),
            test_domains: test.len(),
            validation_domains: validation.len(),
        },
        scaler: Some(scaler),
    };
    Ok((
        PreparedDataset {
            manifest,
            split: Split {
                source,
                test,
                validation,
            },
        },
        truths,
    ))
}

pub const ORACLE_M: usize = 2000;

/// Squared MMD (biased V-statistic, median-heuristic RBF kernel) between
/// `m = 2000` draws from each mixture; labels play no role.
pub fn oracle_param_error(estimated: &SphericalGmm, truth: &SphericalGmm, seed: u64) -> Result<f64> {
    ensure!(
        estimated.t() == truth.t(),
        Shape,
        "mixtures have T={} and T={}",
        estimated.t(),
        truth.t()
    );
    let a = estimated.sample(ORACLE_M, seed::derive(seed, &[1]), false);
    let b = truth.sample(ORACLE_M, seed::derive(seed, &[2]), false);
    Ok(metrics::mmd(&a, &b)?.powi(2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The shots themselves as a sample set.
    Sampled,
    /// EM run to convergence on the shots.
    ThetaP,
    /// EM-tuned start corrected by the encoder.
    Ours,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Sampled, Method::ThetaP, Method::Ours];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sampled => "sampled",
            Method::ThetaP => "theta_p",
            Method::Ours => "ours",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub domain_id: String,
    pub n_shots: usize,
    pub method: Method,
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregateRow {
    pub n_shots: usize,
    pub method: Method,
    pub mean_mmd: f64,
    pub std_mmd: f64,
    /// Rows with a finite MMD.
    pub count: usize,
}

impl AggregateRow {
    pub fn std_error(&self) -> f64 {
        self.std_mmd / (self.count as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_HEADER: [&str; 6] = ["domain_id", "n_shots", "method", "metric", "value", "seed"];
pub const AGGREGATE_HEADER: [&str; 4] = ["n_shots", "method", "mean_mmd", "std_mmd"];

impl BenchReport {
    /// Per `(n, method)` mean and sample standard deviation of MMD, skipping
    /// undefined values.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(usize, Method)> = self.rows.iter().map(|r| (r.n_shots, r.method)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|(n, method)| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.n_shots == n && r.method == method && r.report.mmd.is_finite())
                    .map(|r| r.report.mmd)
                    .collect();
                let count = vals.len();
                let mean = vals.iter().sum::<f64>() / count as f64;
                let std = if count >= 2 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
                } else {
                    f64::NAN
                };
                AggregateRow {
                    n_shots: n,
                    method,
                    mean_mmd: if count > 0 { mean } else { f64::NAN },
                    std_mmd: std,
                    count,
                }
            })
            .collect()
    }

    /// Per-domain MMD for one `(n, method)`, in row order.
    pub fn mmd_values(&self, n: usize, method: Method) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.n_shots == n && r.method == method)
            .map(|r| r.report.mmd)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(BENCH_HEADER)?;
        for r in &self.rows {
            for (metric, value) in [
                ("mmd", r.report.mmd),
                ("kl", r.report.kl),
                ("ks", r.report.ks),
                ("wd", r.report.wd),
                ("mse_mean", r.report.mse_mean),
            ] {
                w.write_record([
                    r.domain_id.as_str(),
                    &r.n_shots.to_string(),
                    r.method.as_str(),
                    metric,
                    &value.to_string(),
                    &r.seed.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_aggregate_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(AGGREGATE_HEADER)?;
        for a in self.aggregate() {
            w.write_record([
                a.n_shots.to_string(),
                a.method.as_str().to_owned(),
                a.mean_mmd.to_string(),
                a.std_mmd.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores one domain at one shot count with every method. `domain` and the
/// checkpoint's `theta_o` are in scaled units.
pub fn bench_domain(ckpt: &Checkpoint, domain: &Domain, n: usize, run_seed: u64) -> Result<Vec<BenchRow>> {
    let key = seed::derive(run_seed, &[seed::hash_str(&domain.domain_id), n as u64]);
    let shots = sample_shots(domain, n, key)?;
    let points = shots.points();
    let reference = domain.points();
    let m = domain.len();
    let floor = ckpt.model.config.sigma_floor;

    let theta_p = run_to_convergence(
        &ckpt.theta_o,
        &points,
        ConvergenceOptions {
            sigma_floor: floor,
            ..ConvergenceOptions::default()
        },
    )?
    .gmm;
    let theta_e = within_domain_tuning(&ckpt.theta_o, &points, z_schedule(n, Z_BETA)?, floor)?;
    let ours = predict(&ckpt.model, &shots.shots, &theta_e)?;

    let mut rows = Vec::with_capacity(3);
    for method in Method::ALL {
        let metric_seed = seed::derive(key, &[method as u64]);
        let generated = match method {
            Method::Sampled => points.clone(),
            Method::ThetaP => theta_p.sample(m, metric_seed, true),
            Method::Ours => ours.sample(m, metric_seed, true),
        };
        rows.push(BenchRow {
            domain_id: domain.domain_id.clone(),
            n_shots: n,
            method,
            seed: run_seed,
            report: metrics::compare(&generated, &reference, metric_seed)?,
        });
    }
    Ok(rows)
}

/// Compares the three methods on every target, shot count and seed.
/// `targets` must already be scaled with the checkpoint's scaler.
pub fn run_benchmark(
    ckpt: &Checkpoint,
    targets: &DomainCollection,
    shot_counts: &[usize],
    seeds: &[u64],
) -> Result<BenchReport> {
    let cfg = &ckpt.model.config;
    for &n in shot_counts {
        ensure!(
            (1..=cfg.n_max).contains(&n),
            InvalidArgument,
            "shot count {n} outside 1..={}",
            cfg.n_max
        );
    }
    for d in targets.domains() {
        ensure!(
            d.t() == cfg.t,
            Shape,
            "target {} has T={}, model expects {}",
            d.domain_id,
            d.t(),
            cfg.t
        );
    }
    let jobs: Vec<(&Domain, usize, u64)> = seeds
        .iter()
        .flat_map(|&s| {
            targets
                .domains()
                .iter()
                .flat_map(move |d| shot_counts.iter().map(move |&n| (d, n, s)))
        })
        .collect();
    let results: Vec<Result<Vec<BenchRow>>> = jobs
        .par_iter()
        .map(|&(d, n, s)| bench_domain(ckpt, d, n, s))
        .collect();
    let mut rows = Vec::with_capacity(jobs.len() * 3);
    for r in results {
        rows.extend(r?);
    }
    Ok(BenchReport { rows })
}

/// Default shot counts for a benchmark: `1..=24` capped at `n_max`.
pub fn default_shot_counts(n_max: usize) -> Vec<usize> {
    (1..=24.min(n_max)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_model, EncoderConfig};
    use crate::gmm::{fixed_weights, init_theta_o, InitOptions};

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_domains: n,
            master_seed: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_config_gives_empty_collection() {
        let (c, truths) = gen_collection(&small(0)).unwrap();
        assert!(c.is_empty() && truths.is_empty());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = gen_domains(&small(4)).unwrap();
        assert_eq!(a, gen_domains(&small(4)).unwrap());
        let other = SynthConfig {
            master_seed: 9,
            ..small(4)
        };
        assert_ne!(a, gen_domains(&other).unwrap());
        // A domain does not depend on how many were generated.
        assert_eq!(a[1], gen_domains(&small(2)).unwrap()[1]);
    }

    #[test]
    fn domains_look_like_load_profiles() {
        let cfg = small(5);
        for s in gen_domains(&cfg).unwrap() {
            assert_eq!(s.domain.len(), 250);
            assert_eq!(s.domain.t(), 24);
            assert_eq!(s.truth.j(), 6);
            assert_eq!(s.truth.weights(), fixed_weights(6).unwrap().as_slice());
            assert!(s.domain.samples.iter().all(|x| x.values.iter().all(|v| *v >= 0.0)));
            let days: Vec<u16> = s.domain.samples.iter().map(|x| x.day_of_year).collect();
            assert!(days.windows(2).all(|w| w[0] < w[1]));
            for (m, sd) in s.truth.means().iter().zip(s.truth.sigmas()) {
                assert!(m.iter().all(|v| *v > 0.0));
                for (mu, s) in m.iter().zip(sd) {
                    let rel = s / mu;
                    assert!((0.1..=0.3).contains(&rel) || *s == 1e-3, "{rel}");
                }
            }
        }
    }

    #[test]
    fn sample_means_match_the_truth() {
        for s in gen_domains(&small(5)).unwrap() {
            let g = &s.truth;
            let pts = s.domain.points();
            let n = pts.len() as f64;
            for d in 0..g.t() {
                let mean: f64 = (0..g.j()).map(|k| g.weights()[k] * g.means()[k][d]).sum();
                let second: f64 = (0..g.j())
                    .map(|k| g.weights()[k] * (g.sigmas()[k][d].powi(2) + g.means()[k][d].powi(2)))
                    .sum();
                let sd = (second - mean * mean).sqrt();
                let got = pts.iter().map(|p| p[d]).sum::<f64>() / n;
                assert!(
                    (got - mean).abs() <= 3.0 * sd / n.sqrt(),
                    "{} dim {d}: {got} vs {mean}",
                    s.domain.domain_id
                );
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SynthConfig { t: 0, ..small(1) },
            SynthConfig { j_true: 0, ..small(1) },
            SynthConfig { samples_per_domain: 400, ..small(1) },
            SynthConfig { sigma_rel: [0.3, 0.1], ..small(1) },
            SynthConfig { base_level: [0.0, 1.0], ..small(1) },
        ];
        for c in bad {
            assert!(gen_domains(&c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn dataset_splits_in_order() {
        let (ds, truths) = synth_dataset(&small(0), [3, 2, 1]).unwrap();
        assert_eq!(ds.split.source.len(), 3);
        assert_eq!(ds.split.test.len(), 2);
        assert_eq!(ds.split.validation.len(), 1);
        assert_eq!(truths.len(), 6);
        assert_eq!(truths[3].domain_id, ds.split.test.domains()[0].domain_id);
        assert_eq!(truths[3].role, Role::Target);
        assert_eq!(ds.manifest.counts.test_domains, 2);
        assert!(ds.manifest.scaler.is_some());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = PreparedDataset::load(dir.path()).unwrap();
        assert_eq!(back.split.source.domains()[0].samples, ds.split.source.domains()[0].samples);
    }

    #[test]
    fn oracle_error_separates_shifted_truths() {
        let s = &gen_domains(&small(1)).unwrap()[0];
        let same = oracle_param_error(&s.truth, &s.truth, 1).unwrap();
        assert!((0.0..0.01).contains(&same), "{same}");
        let shifted = SphericalGmm::new(
            s.truth.means().iter().map(|m| m.iter().map(|v| v + 1.0).collect()).collect(),
            s.truth.sigmas().to_vec(),
        )
        .unwrap();
        let null: Vec<f64> = (0..5).map(|k| oracle_param_error(&s.truth, &s.truth, 10 + k).unwrap()).collect();
        let max_null = null.iter().cloned().fold(0.0, f64::max);
        let err = oracle_param_error(&shifted, &s.truth, 1).unwrap();
        assert!(err > 0.0 && err > 10.0 * max_null, "{err} vs null {max_null}");
    }

    /// The null here is the error of a truth-started fit on a fresh draw of
    /// the same size, so it carries the 250-sample estimation noise.
    #[test]
    fn full_data_fit_recovers_the_truth() {
        let domains = gen_domains(&small(10)).unwrap();
        let mut hits = 0;
        for (i, s) in domains.iter().enumerate() {
            let pts = s.domain.points();
            let fit = init_theta_o(&pts, 6, 0, InitOptions::default()).unwrap();
            let err = oracle_param_error(&fit, &s.truth, i as u64).unwrap();
            let mut null: Vec<f64> = (0..8u64)
                .map(|k| {
                    let fresh = s.truth.sample(pts.len(), 500 + k, true);
                    let refit = run_to_convergence(&s.truth, &fresh, ConvergenceOptions::default())
                        .unwrap()
                        .gmm;
                    oracle_param_error(&refit, &s.truth, 200 + k).unwrap()
                })
                .collect();
            let p95 = crate::data::percentile(&mut null, 95.0).unwrap();
            if err < p95 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "{hits}/10 domains recovered");
    }

    #[test]
    fn benchmark_reports_every_combination() {
        let (ds, _) = synth_dataset(&small(0), [4, 3, 0]).unwrap();
        let scaler = ds.scaler().unwrap();
        let source = scaler.apply_collection(&ds.split.source).unwrap();
        let targets = scaler.apply_collection(&ds.split.test).unwrap();
        let pooled: Vec<Vec<f64>> = source.domains().iter().flat_map(|d| d.points()).collect();
        let enc = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            ..EncoderConfig::default()
        };
        let ckpt = Checkpoint {
            model: init_model(&enc, 0).unwrap(),
            theta_o: init_theta_o(&pooled, 6, 0, InitOptions::default()).unwrap(),
            scaler: Some(scaler),
            step: 0,
            master_seed: 0,
            train: None,
            optimizer: None,
            lr_scale: 1.0,
            best_val: None,
        };
        let report = run_benchmark(&ckpt, &targets, &[1, 4], &[5]).unwrap();
        assert_eq!(report.rows.len(), 3 * 2 * 3);
        let again = run_benchmark(&ckpt, &targets, &[1, 4], &[5]).unwrap();
        assert_eq!(format!("{report:?}"), format!("{again:?}"));
        // One shot is not a sample set MMD can score.
        assert!(report.mmd_values(1, Method::Sampled).iter().all(|v| v.is_nan()));
        assert!(report.mmd_values(4, Method::Ours).iter().all(|v| v.is_finite() && *v >= 0.0));

        let agg = report.aggregate();
        assert_eq!(agg.len(), 6);
        let sampled1 = agg.iter().find(|a| a.n_shots == 1 && a.method == Method::Sampled).unwrap();
        assert_eq!(sampled1.count, 0);
        let ours4 = agg.iter().find(|a| a.n_shots == 4 && a.method == Method::Ours).unwrap();
        let vals = report.mmd_values(4, Method::Ours);
        assert!((ours4.mean_mmd - vals.iter().sum::<f64>() / 3.0).abs() < 1e-15);

        let dir = tempfile::tempdir().unwrap();
        let long = dir.path().join("bench.csv");
        let short = dir.path().join("agg.csv");
        report.write_csv(&long).unwrap();
        report.write_aggregate_csv(&short).unwrap();
        let text = std::fs::read_to_string(&long).unwrap();
        assert_eq!(text.lines().next().unwrap(), "domain_id,n_shots,method,metric,value,seed");
        assert_eq!(text.lines().count(), 1 + 18 * 5);
        let text = std::fs::read_to_string(&short).unwrap();
        assert_eq!(text.lines().next().unwrap(), "n_shots,method,mean_mmd,std_mmd");
        assert_eq!(text.lines().count(), 7);

        assert!(run_benchmark(&ckpt, &targets, &[26], &[5]).is_err());
    }
}
