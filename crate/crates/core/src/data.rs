//! Daily load profiles, per-household domains, splitting, shot sampling and
//! the global scaler.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;

/// Default number of days per constructed domain.
pub const DEFAULT_WINDOW: usize = 250;
/// Largest shot count the encoder accepts by default.
pub const DEFAULT_N_MAX: usize = 25;

pub const PREPARED_FORMAT_VERSION: u32 = 1;

/// Units a set of profiles (or a GMM over them) is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Scaled,
    Physical,
}

/// One day of consumption: `T` readings plus the day of the year (1..=366).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcpSample {
    pub values: Vec<f64>,
    pub day_of_year: u16,
}

impl EcpSample {
    pub fn new(values: Vec<f64>, day_of_year: u16) -> Result<Self> {
        ensure!(
            (1..=366).contains(&day_of_year),
            InvalidArgument,
            "day_of_year {day_of_year} outside 1..=366"
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "non-finite reading"
        );
        Ok(EcpSample {
            values,
            day_of_year,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub domain_id: String,
    pub source_household_id: String,
    pub samples: Vec<EcpSample>,
    pub space: Space,
}

impl Domain {
    pub fn new(
        domain_id: impl Into<String>,
        source_household_id: impl Into<String>,
        samples: Vec<EcpSample>,
        space: Space,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        if let Some(first) = samples.first() {
            let t = first.len();
            ensure!(
                samples.iter().all(|s| s.len() == t),
                Shape,
                "domain {domain_id}: samples disagree on T"
            );
        }
        Ok(Domain {
            domain_id,
            source_household_id: source_household_id.into(),
            samples,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Profile length, or 0 for an empty domain.
    pub fn t(&self) -> usize {
        self.samples.first().map_or(0, EcpSample::len)
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.values.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainCollection {
    pub role: Role,
    domains: Vec<Domain>,
}

impl DomainCollection {
    pub fn new(role: Role, domains: Vec<Domain>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &domains {
            ensure!(
                seen.insert(d.domain_id.as_str()),
                InvalidArgument,
                "duplicate domain id {}",
                d.domain_id
            );
        }
        Ok(DomainCollection { role, domains })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn into_domains(self) -> Vec<Domain> {
        self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn household_ids(&self) -> BTreeSet<&str> {
        self.domains
            .iter()
            .map(|d| d.source_household_id.as_str())
            .collect()
    }

    pub fn get(&self, domain_id: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.domain_id == domain_id)
    }
}

/// Shots drawn without replacement from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotSet {
    pub domain_id: String,
    pub shots: Vec<EcpSample>,
    pub seed: u64,
}

impl ShotSet {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.shots.iter().map(|s| s.values.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DatedSample {
    pub date: NaiveDate,
    pub sample: EcpSample,
}

/// Chronological daily profiles of one household.
#[derive(Clone, Debug, PartialEq)]
pub struct HouseholdSeries {
    pub household_id: String,
    pub days: Vec<DatedSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDataset {
    pub t: usize,
    pub households: Vec<HouseholdSeries>,
    pub dropped_rows: usize,
}

pub fn hour_columns(t: usize) -> Vec<String> {
    (0..t).map(|k| format!("h{k:02}")).collect()
}

fn check_header(header: &csv::StringRecord, t: usize) -> Result<()> {
    ensure!(
        header.len() == t + 2,
        Format,
        "header has {} columns, expected {} for T={t}",
        header.len(),
        t + 2
    );
    ensure!(
        header.get(0).map(str::trim) == Some("domain_or_household_id")
            && header.get(1).map(str::trim) == Some("date"),
        Format,
        "header must start with domain_or_household_id,date"
    );
    for (k, name) in hour_columns(t).iter().enumerate() {
        ensure!(
            header.get(k + 2).map(str::trim) == Some(name.as_str()),
            Format,
            "header column {} should be {name}",
            k + 2
        );
    }
    Ok(())
}

fn parse_row(record: &csv::StringRecord, t: usize) -> Option<(String, DatedSample)> {
    if record.len() != t + 2 {
        return None;
    }
    let id = record.get(0)?.trim();
    if id.is_empty() {
        return None;
    }
    let date = NaiveDate::parse_from_str(record.get(1)?.trim(), "%Y-%m-%d").ok()?;
    let mut values = Vec::with_capacity(t);
    for field in record.iter().skip(2) {
        let v: f64 = field.trim().parse().ok()?;
        if !v.is_finite() || v < 0.0 {
            return None;
        }
        values.push(v);
    }
    let day = u16::try_from(date.ordinal()).ok()?;
    Some((
        id.to_owned(),
        DatedSample {
            date,
            sample: EcpSample {
                values,
                day_of_year: day,
            },
        },
    ))
}

/// Reads a dataset CSV from any reader.
///
/// Rows with the wrong column count, unparsable dates, or missing, negative
/// or non-finite readings are dropped whole and counted, as are repeated
/// dates within a household.
pub fn parse_dataset_reader<R: std::io::Read>(reader: R, t: usize) -> Result<ParsedDataset> {
    ensure!(t >= 1, InvalidArgument, "T must be positive");
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(Error::Format("missing header row".into())),
    };
    check_header(&header, t)?;

    let mut by_household: BTreeMap<String, BTreeMap<NaiveDate, EcpSample>> = BTreeMap::new();
    let mut dropped = 0;
    for record in records {
        let record = record?;
        match parse_row(&record, t) {
            Some((id, day)) => {
                let days = by_household.entry(id).or_default();
                if days.contains_key(&day.date) {
                    dropped += 1;
                } else {
                    days.insert(day.date, day.sample);
                }
            }
            None => dropped += 1,
        }
    }
    let households = by_household
        .into_iter()
        .map(|(household_id, days)| HouseholdSeries {
            household_id,
            days: days
                .into_iter()
                .map(|(date, sample)| DatedSample { date, sample })
                .collect(),
        })
        .collect();
    Ok(ParsedDataset {
        t,
        households,
        dropped_rows: dropped,
    })
}

pub fn parse_dataset(path: &Path, t: usize) -> Result<ParsedDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_reader(std::io::BufReader::new(file), t)
}

// ---------------------------------------------------------------------------
// Domain construction and splitting
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DomainBuild {
    pub collection: DomainCollection,
    pub excluded_households: usize,
}

/// Cuts each household's series into `window`-day domains.
///
/// Households shorter than `window` are excluded. A household with at least
/// `2 * window` days yields `floor(days / window)` domains over disjoint,
/// randomly chosen days; otherwise one domain of randomly chosen days.
/// Within a domain, days keep chronological order.
pub fn build_domains(series: &[HouseholdSeries], window: usize, seed: u64) -> Result<DomainBuild> {
    ensure!(window >= 1, InvalidArgument, "window must be at least 1");
    let mut domains = Vec::new();
    let mut excluded = 0;
    for hh in series {
        let days = hh.days.len();
        if days < window {
            excluded += 1;
            continue;
        }
        let replicas = if days >= 2 * window { days / window } else { 1 };
        let mut rng = seed::rng(seed, &[seed::hash_str(&hh.household_id)]);
        let mut order: Vec<usize> = (0..days).collect();
        order.shuffle(&mut rng);
        for (r, chunk) in order.chunks_exact(window).take(replicas).enumerate() {
            let mut picked = chunk.to_vec();
            picked.sort_unstable();
            let samples = picked
                .into_iter()
                .map(|i| hh.days[i].sample.clone())
                .collect();
            domains.push(Domain::new(
                format!("{}#{r}", hh.household_id),
                hh.household_id.clone(),
                samples,
                Space::Physical,
            )?);
        }
    }
    Ok(DomainBuild {
        collection: DomainCollection::new(Role::Source, domains)?,
        excluded_households: excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub source: DomainCollection,
    pub test: DomainCollection,
    pub validation: DomainCollection,
}

/// Household-level split: all replica domains of a household land together.
pub fn split_collection(
    collection: &DomainCollection,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Split> {
    ensure!(
        ratios.iter().all(|r| *r >= 0.0) && (ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
        InvalidArgument,
        "split ratios must be non-negative and sum to 1, got {ratios:?}"
    );
    let mut households: Vec<&str> = collection.household_ids().into_iter().collect();
    let n = households.len();
    ensure!(
        n >= 3,
        InvalidArgument,
        "need at least 3 households to split, found {n}"
    );
    households.shuffle(&mut seed::rng(seed, &[0x5111]));

    let count = |r: f64| {
        if r > 0.0 {
            ((r * n as f64).round() as usize).max(1)
        } else {
            0
        }
    };
    let n_test = count(ratios[1]);
    let n_val = count(ratios[2]);
    ensure!(
        n_test + n_val < n || ratios[0] == 0.0,
        InvalidArgument,
        "split leaves no source households"
    );
    let n_source = n - n_test - n_val;

    let assign: BTreeMap<&str, Role> = households
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let role = if i < n_source {
                Role::Source
            } else if i < n_source + n_test {
                Role::Target
            } else {
                Role::Validation
            };
            (*h, role)
        })
        .collect();

    let mut parts: [Vec<Domain>; 3] = Default::default();
    for d in collection.domains() {
        let slot = match assign[d.source_household_id.as_str()] {
            Role::Source => 0,
            Role::Target => 1,
            Role::Validation => 2,
        };
        parts[slot].push(d.clone());
    }
    let [source, test, validation] = parts;
    Ok(Split {
        source: DomainCollection::new(Role::Source, source)?,
        test: DomainCollection::new(Role::Target, test)?,
        validation: DomainCollection::new(Role::Validation, validation)?,
    })
}

fn canonical_order(domain: &Domain) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..domain.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (&domain.samples[a], &domain.samples[b]);
        sa.day_of_year.cmp(&sb.day_of_year).then_with(|| {
            sa.values
                .iter()
                .zip(&sb.values)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    idx
}

/// Draws `n` distinct samples uniformly without replacement.
///
/// Samples are first put in a canonical order (day of year, then values), so
/// the drawn multiset depends only on the domain's contents, `n` and `seed`.
pub fn sample_shots(domain: &Domain, n: usize, seed: u64) -> Result<ShotSet> {
    ensure!(
        n >= 1 && n <= domain.len(),
        InvalidArgument,
        "cannot draw {n} shots from domain {} with {} samples",
        domain.domain_id,
        domain.len()
    );
    let order = canonical_order(domain);
    let mut rng = seed::rng(seed, &[0x5407, n as u64]);
    let shots = index::sample(&mut rng, domain.len(), n)
        .into_iter()
        .map(|k| domain.samples[order[k]].clone())
        .collect();
    Ok(ShotSet {
        domain_id: domain.domain_id.clone(),
        shots,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Scaler
// ---------------------------------------------------------------------------

/// Global divisor applied to every reading, with a ceiling after scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub scale: f64,
    pub clip_hi: f64,
}

/// Linear-interpolated percentile (0..=100) of unsorted data.
pub fn percentile(values: &mut [f64], p: f64) -> Result<f64> {
    ensure!(!values.is_empty(), InvalidArgument, "percentile of empty data");
    ensure!(
        (0.0..=100.0).contains(&p),
        InvalidArgument,
        "percentile {p} outside [0, 100]"
    );
    values.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(values[lo] + (values[hi] - values[lo]) * frac)
}

pub fn fit_scaler(source: &DomainCollection, pct: f64, clip_hi: f64) -> Result<Scaler> {
    ensure!(!source.is_empty(), InvalidArgument, "cannot fit scaler on an empty collection");
    ensure!(clip_hi > 0.0, InvalidArgument, "clip_hi must be positive");
    let mut pooled: Vec<f64> = source
        .domains()
        .iter()
        .flat_map(|d| d.samples.iter().flat_map(|s| s.values.iter().copied()))
        .collect();
    let scale = percentile(&mut pooled, pct)?;
    Scaler::new(scale, clip_hi)
}

impl Scaler {
    pub fn new(scale: f64, clip_hi: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Numeric(format!("degenerate scale {scale}")));
        }
        ensure!(clip_hi > 0.0, InvalidArgument, "clip_hi must be positive");
        Ok(Scaler { scale, clip_hi })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x / self.scale).clamp(0.0, self.clip_hi)
    }

    /// Clipped readings are not recovered.
    pub fn invert(&self, x: f64) -> f64 {
        x * self.scale
    }

    pub fn apply_values(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn invert_values(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.invert(x)).collect()
    }

    pub fn apply_sample(&self, s: &EcpSample) -> EcpSample {
        EcpSample {
            values: self.apply_values(&s.values),
            day_of_year: s.day_of_year,
        }
    }

    pub fn apply_domain(&self, d: &Domain) -> Result<Domain> {
        ensure!(
            d.space == Space::Physical,
            InvalidArgument,
            "domain {} is already scaled",
            d.domain_id
        );
        Ok(Domain {
            domain_id: d.domain_id.clone(),
            source_household_id: d.source_household_id.clone(),
            samples: d.samples.iter().map(|s| self.apply_sample(s)).collect(),
            space: Space::Scaled,
        })
    }

    pub fn apply_collection(&self, c: &DomainCollection) -> Result<DomainCollection> {
        let domains = c
            .domains()
            .iter()
            .map(|d| self.apply_domain(d))
            .collect::<Result<_>>()?;
        DomainCollection::new(c.role, domains)
    }
}

// ---------------------------------------------------------------------------
// Prepared-dataset artifact
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub households: usize,
    pub excluded_households: usize,
    pub dropped_rows: usize,
    pub source_domains: usize,
    pub test_domains: usize,
    pub validation_domains: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(rename = "T")]
    pub t: usize,
    pub window: usize,
    pub split_seed: u64,
    pub counts: DatasetCounts,
    /// Absent when there were no source domains to fit on.
    pub scaler: Option<Scaler>,
}

/// A dataset split into source/test/validation domains, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub manifest: Manifest,
    pub split: Split,
}

const SPLIT_FILES: [(&str, Role); 3] = [
    ("source.csv", Role::Source),
    ("test.csv", Role::Target),
    ("validation.csv", Role::Validation),
];

fn write_split_csv(path: &Path, collection: &DomainCollection, t: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "domain_id".to_owned(),
        "household_id".to_owned(),
        "day_of_year".to_owned(),
    ];
    header.extend(hour_columns(t));
    w.write_record(&header)?;
    for d in collection.domains() {
        for s in &d.samples {
            let mut row = vec![
                d.domain_id.clone(),
                d.source_household_id.clone(),
                s.day_of_year.to_string(),
            ];
            row.extend(s.values.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_split_csv(path: &Path, role: Role, t: usize) -> Result<DomainCollection> {
    let mut rdr = csv::Reader::from_path(path)?;
    let expected = 3 + t;
    ensure!(
        rdr.headers()?.len() == expected,
        Format,
        "{}: expected {expected} columns",
        path.display()
    );
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, (String, Vec<EcpSample>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        ensure!(rec.len() == expected, Format, "{}: ragged row", path.display());
        let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
        let day: u16 = rec[2].parse().map_err(|_| bad("day_of_year"))?;
        let values = rec
            .iter()
            .skip(3)
            .map(|f| f.parse::<f64>().map_err(|_| bad("reading")))
            .collect::<Result<Vec<_>>>()?;
        let entry = grouped.entry(rec[0].to_owned()).or_insert_with(|| {
            order.push(rec[0].to_owned());
            (rec[1].to_owned(), Vec::new())
        });
        entry.1.push(EcpSample::new(values, day)?);
    }
    let domains = order
        .into_iter()
        .map(|id| {
            let (hh, samples) = grouped.remove(&id).expect("grouped id");
            Domain::new(id, hh, samples, Space::Physical)
        })
        .collect::<Result<_>>()?;
    DomainCollection::new(role, domains)
}

impl PreparedDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let t = self.manifest.t;
        for ((file, _), coll) in SPLIT_FILES.iter().zip([
            &self.split.source,
            &self.split.test,
            &self.split.validation,
        ]) {
            write_split_csv(&dir.join(file), coll, t)?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != PREPARED_FORMAT_VERSION {
            return Err(Error::Incompatible {
                path,
                reason: format!(
                    "dataset format version {} (expected {PREPARED_FORMAT_VERSION})",
                    manifest.format_version
                ),
            });
        }
        let t = manifest.t;
        let [source, test, validation] =
            SPLIT_FILES.map(|(file, role)| read_split_csv(&dir.join(file), role, t));
        Ok(PreparedDataset {
            manifest,
            split: Split {
                source: source?,
                test: test?,
                validation: validation?,
            },
        })
    }

    /// Scaler stored in the manifest, or an error when none was fitted.
    pub fn scaler(&self) -> Result<Scaler> {
        self.manifest
            .scaler
            .ok_or_else(|| Error::Format("dataset has no fitted scaler".into()))
    }
}

/// Parses, windows, splits and fits the scaler in one pass.
pub fn prepare(
    parsed: &ParsedDataset,
    window: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<PreparedDataset> {
    let build = build_domains(&parsed.households, window, seed)?;
    let kept = build.collection.household_ids().len();
    let split = if kept == 0 {
        Split {
            source: DomainCollection::new(Role::Source, vec![])?,
            test: DomainCollection::new(Role::Target, vec![])?,
            validation: DomainCollection::new(Role::Validation, vec![])?,
        }
    } else {
        split_collection(&build.collection, ratios, seed)?
    };
    let scaler = if split.source.is_empty() {
        None
    } else {
        Some(fit_scaler(&split.source, 99.0, 3.0)?)
    };
    Ok(PreparedDataset {
        manifest: Manifest {
            format_version: PREPARED_FORMAT_VERSION,
            t: parsed.t,
            window,
            split_seed: seed,
            counts: DatasetCounts {
                households: parsed.households.len(),
                excluded_households: build.excluded_households,
                dropped_rows: parsed.dropped_rows,
                source_domains: split.source.len(),
                test_domains: split.test.len(),
                validation_domains: split.validation.len(),
            },
            scaler,
        },
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_with(rows: &[String], t: usize) -> String {
        let mut s = String::from("domain_or_household_id,date");
        for c in hour_columns(t) {
            s.push(',');
            s.push_str(&c);
        }
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    fn row(id: &str, date: &str, readings: usize) -> String {
        let vals: Vec<String> = (0..readings).map(|k| format!("{}", 0.1 + k as f64 * 0.01)).collect();
        format!("{id},{date},{}", vals.join(","))
    }

    fn series(id: &str, days: usize) -> HouseholdSeries {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        HouseholdSeries {
            household_id: id.into(),
            days: (0..days)
                .map(|i| {
                    let date = start + chrono::Days::new(i as u64);
                    DatedSample {
                        date,
                        sample: EcpSample::new(vec![i as f64, 1.0], date.ordinal() as u16).unwrap(),
                    }
                })
                .collect(),
        }
    }

    fn domain(n: usize) -> Domain {
        let samples = (0..n)
            .map(|i| EcpSample::new(vec![i as f64], (i % 366 + 1) as u16).unwrap())
            .collect();
        Domain::new("d", "h", samples, Space::Physical).unwrap()
    }

    #[test]
    fn parses_single_row_with_day_of_year() {
        let text = csv_with(&[row("h1", "2021-03-02", 24)], 24);
        let parsed = parse_dataset_reader(text.as_bytes(), 24).unwrap();
        assert_eq!(parsed.households.len(), 1);
        assert_eq!(parsed.households[0].days.len(), 1);
        assert_eq!(parsed.households[0].days[0].sample.day_of_year, 61);
        assert_eq!(parsed.dropped_rows, 0);
    }

    #[test]
    fn leap_day_ordinal() {
        let text = csv_with(&[row("h1", "2020-12-31", 24)], 24);
        let parsed = parse_dataset_reader(text.as_bytes(), 24).unwrap();
        assert_eq!(parsed.households[0].days[0].sample.day_of_year, 366);
    }

    #[test]
    fn header_only_is_empty() {
        let parsed = parse_dataset_reader(csv_with(&[], 24).as_bytes(), 24).unwrap();
        assert!(parsed.households.is_empty());
    }

    #[test]
    fn short_row_is_dropped() {
        let text = csv_with(&[row("h1", "2021-03-02", 23), row("h1", "2021-03-03", 24)], 24);
        let parsed = parse_dataset_reader(text.as_bytes(), 24).unwrap();
        assert_eq!(parsed.dropped_rows, 1);
        assert_eq!(parsed.households[0].days.len(), 1);
    }

    #[test]
    fn negative_missing_and_nan_rows_are_dropped() {
        let mut neg = row("h1", "2021-01-01", 24);
        neg = neg.replacen(",0.1,", ",-0.1,", 1);
        let mut missing = row("h1", "2021-01-02", 24);
        missing = missing.replacen(",0.1,", ",,", 1);
        let mut nan = row("h1", "2021-01-03", 24);
        nan = nan.replacen(",0.1,", ",NaN,", 1);
        let text = csv_with(&[neg, missing, nan, row("h1", "2021-01-04", 24)], 24);
        let parsed = parse_dataset_reader(text.as_bytes(), 24).unwrap();
        assert_eq!(parsed.dropped_rows, 3);
        assert_eq!(parsed.households[0].days.len(), 1);
    }

    #[test]
    fn header_errors() {
        let bad = "id,date,h00\n";
        assert!(matches!(parse_dataset_reader(bad.as_bytes(), 1), Err(Error::Format(_))));
        let t_mismatch = csv_with(&[], 23);
        assert!(matches!(
            parse_dataset_reader(t_mismatch.as_bytes(), 24),
            Err(Error::Format(_))
        ));
        assert!(matches!(parse_dataset_reader("".as_bytes(), 24), Err(Error::Format(_))));
    }

    #[test]
    fn rows_are_sorted_chronologically() {
        let text = csv_with(&[row("h1", "2021-03-05", 2), row("h1", "2021-03-01", 2)], 2);
        let parsed = parse_dataset_reader(text.as_bytes(), 2).unwrap();
        let days: Vec<u16> = parsed.households[0].days.iter().map(|d| d.sample.day_of_year).collect();
        assert_eq!(days, vec![60, 64]);
    }

    #[test]
    fn domain_threshold_rules() {
        let b = build_domains(&[series("a", 249)], 250, 1).unwrap();
        assert_eq!(b.collection.len(), 0);
        assert_eq!(b.excluded_households, 1);

        let b = build_domains(&[series("a", 250)], 250, 1).unwrap();
        assert_eq!(b.collection.len(), 1);
        assert_eq!(b.collection.domains()[0].len(), 250);

        let b = build_domains(&[series("a", 499)], 250, 1).unwrap();
        assert_eq!(b.collection.len(), 1);
    }

    #[test]
    fn long_household_yields_disjoint_replicas() {
        let b = build_domains(&[series("a", 510)], 250, 3).unwrap();
        let ds = b.collection.domains();
        assert_eq!(ds.len(), 2);
        let days = |d: &Domain| -> BTreeSet<u64> { d.samples.iter().map(|s| s.values[0] as u64).collect() };
        let (a, b2) = (days(&ds[0]), days(&ds[1]));
        assert_eq!(a.len(), 250);
        assert_eq!(b2.len(), 250);
        assert!(a.is_disjoint(&b2));
        assert_eq!(ds[0].domain_id, "a#0");
        assert_eq!(ds[1].source_household_id, "a");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let all: Vec<_> = (0..10).map(|i| series(&format!("h{i}"), 250)).collect();
        let c = build_domains(&all, 250, 0).unwrap().collection;
        let s = split_collection(&c, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!((s.source.len(), s.test.len(), s.validation.len()), (8, 1, 1));
        assert_eq!(s, split_collection(&c, [0.8, 0.1, 0.1], 9).unwrap());
    }

    #[test]
    fn replicas_stay_together() {
        let mut all: Vec<_> = (0..6).map(|i| series(&format!("h{i}"), 250)).collect();
        all.push(series("big", 600));
        let c = build_domains(&all, 250, 0).unwrap().collection;
        for seed in 0..20 {
            let s = split_collection(&c, [0.6, 0.2, 0.2], seed).unwrap();
            let holders: Vec<usize> = [&s.source, &s.test, &s.validation]
                .iter()
                .map(|c| c.domains().iter().filter(|d| d.source_household_id == "big").count())
                .collect();
            assert_eq!(holders.iter().sum::<usize>(), 2);
            assert!(holders.contains(&2));
        }
    }

    #[test]
    fn split_needs_three_households() {
        let all: Vec<_> = (0..2).map(|i| series(&format!("h{i}"), 250)).collect();
        let c = build_domains(&all, 250, 0).unwrap().collection;
        assert!(split_collection(&c, [0.8, 0.1, 0.1], 0).is_err());
        let all: Vec<_> = (0..3).map(|i| series(&format!("h{i}"), 250)).collect();
        let c = build_domains(&all, 250, 0).unwrap().collection;
        assert!(split_collection(&c, [0.8, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn shot_sampling_rules() {
        let d = domain(30);
        let all = sample_shots(&d, 30, 4).unwrap();
        let mut got: Vec<f64> = all.shots.iter().map(|s| s.values[0]).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (0..30).map(f64::from).collect::<Vec<_>>());

        let one = sample_shots(&d, 1, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert!(d.samples.contains(&one.shots[0]));

        assert_eq!(sample_shots(&d, 5, 11).unwrap(), sample_shots(&d, 5, 11).unwrap());
        assert!(sample_shots(&d, 31, 0).is_err());
        assert!(sample_shots(&d, 0, 0).is_err());
    }

    #[test]
    fn shot_sampling_ignores_storage_order() {
        let d = domain(40);
        let mut reversed = d.clone();
        reversed.samples.reverse();
        let a = sample_shots(&d, 7, 21).unwrap();
        let b = sample_shots(&reversed, 7, 21).unwrap();
        assert_eq!(a.shots, b.shots);
    }

    #[test]
    fn scaler_examples() {
        let samples = (0..=10)
            .map(|v| EcpSample::new(vec![v as f64], 1).unwrap())
            .collect();
        let c = DomainCollection::new(
            Role::Source,
            vec![Domain::new("d", "h", samples, Space::Physical).unwrap()],
        )
        .unwrap();
        let s = fit_scaler(&c, 100.0, 3.0).unwrap();
        assert_eq!(s.scale, 10.0);
        assert_eq!(s.apply(5.0), 0.5);
        assert_eq!(s.invert(s.apply(0.0)), 0.0);
        assert_eq!(s.apply(5.0 * s.scale), 3.0);
    }

    #[test]
    fn scaler_rejects_all_zero() {
        let samples = (0..5).map(|_| EcpSample::new(vec![0.0; 3], 1).unwrap()).collect();
        let c = DomainCollection::new(
            Role::Source,
            vec![Domain::new("d", "h", samples, Space::Physical).unwrap()],
        )
        .unwrap();
        assert!(matches!(fit_scaler(&c, 99.0, 3.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn duplicate_domain_ids_rejected() {
        let d = domain(3);
        assert!(DomainCollection::new(Role::Source, vec![d.clone(), d]).is_err());
    }

    #[test]
    fn prepared_dataset_round_trips() {
        let all: Vec<_> = (0..5).map(|i| series(&format!("h{i}"), 260)).collect();
        let parsed = ParsedDataset { t: 2, households: all, dropped_rows: 2 };
        let prepared = prepare(&parsed, 250, [0.6, 0.2, 0.2], 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        prepared.save(dir.path()).unwrap();
        let loaded = PreparedDataset::load(dir.path()).unwrap();
        assert_eq!(loaded, prepared);
        assert_eq!(loaded.manifest.counts.source_domains, 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scaler_round_trip(scale in 1e-3f64..1e3, frac in 0.0f64..=1.0) {
                let s = Scaler::new(scale, 3.0).unwrap();
                let x = frac * 3.0 * scale;
                let back = s.invert(s.apply(x));
                prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(f64::MIN_POSITIVE));
            }

            #[test]
            fn split_is_partition(n in 3usize..30, seed in any::<u64>()) {
                let all: Vec<_> = (0..n).map(|i| series(&format!("h{i}"), 250)).collect();
                let c = build_domains(&all, 250, 0).unwrap().collection;
                let s = split_collection(&c, [0.8, 0.1, 0.1], seed).unwrap();
                let mut ids: Vec<&str> = Vec::new();
                for part in [&s.source, &s.test, &s.validation] {
                    ids.extend(part.household_ids());
                }
                prop_assert_eq!(ids.len(), n);
                prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), n);
                let expect = 0.8 * n as f64;
                prop_assert!((s.source.len() as f64 - expect).abs() <= 1.0 + 1e-9 || n < 10);
            }
        }
    }
}
