//! Acquisition and cleaning of daily case tables.
//!
//! The raw feed is a CSV with one row per (country, report date). Cleaning
//! turns it into a rectangular [`CasePanel`]:
//!
//! * rows dated on the current day are dropped (the source may still revise them),
//! * negative counts are clamped to zero,
//! * every country is back-filled with zeros to the panel start,
//! * interior gaps are filled with zeros.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Days, NaiveDate, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default feed location (ECDC daily case distribution, CSV flavour).
pub const DEFAULT_FEED_URL: &str =
    "https://opendata.ecdc.europa.eu/covid19/casedistribution/csv";

/// Names of the feed columns that carry the fields we need.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub date: String,
    /// `chrono` format string for the date column.
    pub date_format: String,
    pub cases: String,
    pub country: String,
    /// Optional geo-code column; when absent or empty the country name is the key.
    pub geo_id: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            date: "dateRep".into(),
            date_format: "%d/%m/%Y".into(),
            cases: "cases".into(),
            country: "countriesAndTerritories".into(),
            geo_id: Some("geoId".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCaseRecord {
    pub report_date: NaiveDate,
    /// May be negative in the raw feed (retracted cases).
    pub cases: i64,
    pub country_name: String,
    pub country_id: String,
}

/// Parse a raw case table. Records come back in file order.
pub fn parse_case_table(bytes: &[u8], column_map: &ColumnMap) -> Result<Vec<RawCaseRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let date_col = find(&column_map.date)?;
    let cases_col = find(&column_map.cases)?;
    let country_col = find(&column_map.country)?;
    let geo_col = column_map
        .geo_id
        .as_deref()
        .and_then(|name| find(name).ok());

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row { line, message };

        let raw_date = row.get(date_col).unwrap_or("").trim();
        let report_date = NaiveDate::parse_from_str(raw_date, &column_map.date_format)
            .map_err(|e| row_err(format!("invalid date `{raw_date}`: {e}")))?;
        let raw_cases = row.get(cases_col).unwrap_or("").trim();
        let cases: i64 = raw_cases
            .parse()
            .map_err(|_| row_err(format!("non-integer case count `{raw_cases}`")))?;
        let country_name = row.get(country_col).unwrap_or("").trim().to_string();
        if country_name.is_empty() {
            return Err(row_err("empty country name".into()));
        }
        let country_id = geo_col
            .and_then(|c| row.get(c))
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| country_name.clone());
        out.push(RawCaseRecord {
            report_date,
            cases,
            country_name,
            country_id,
        });
    }
    Ok(out)
}

/// Rectangular N-country by T-day table of non-negative daily counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePanel {
    countries: Vec<String>,
    start: NaiveDate,
    counts: Vec<Vec<u64>>,
}

impl CasePanel {
    pub fn new(countries: Vec<String>, start: NaiveDate, counts: Vec<Vec<u64>>) -> Result<Self> {
        if countries.is_empty() {
            return Err(Error::InsufficientData("panel needs at least one country".into()));
        }
        if countries.len() != counts.len() {
            return Err(Error::Dimension(format!(
                "{} country ids for {} count rows",
                countries.len(),
                counts.len()
            )));
        }
        let t = counts[0].len();
        if t < 2 {
            return Err(Error::InsufficientData(format!(
                "panel needs at least 2 days, got {t}"
            )));
        }
        if let Some(row) = counts.iter().position(|r| r.len() != t) {
            return Err(Error::Dimension(format!(
                "row {row} has {} days, expected {t}",
                counts[row].len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, c) in countries.iter().enumerate() {
            if let Some(j) = seen.insert(c.as_str(), i) {
                return Err(Error::Domain(format!(
                    "duplicate country id `{c}` at rows {j} and {i}"
                )));
            }
        }
        if start.checked_add_days(Days::new(t as u64)).is_none() {
            return Err(Error::Domain("date axis overflows the calendar".into()));
        }
        Ok(Self {
            countries,
            start,
            counts,
        })
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn n_days(&self) -> usize {
        self.counts[0].len()
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.date(self.n_days() - 1)
    }

    /// Date of zero-based day index `t`.
    pub fn date(&self, t: usize) -> NaiveDate {
        self.start + Days::new(t as u64)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_days()).map(|t| self.date(t)).collect()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn series(&self, i: usize) -> &[u64] {
        &self.counts[i]
    }

    pub fn get(&self, i: usize, t: usize) -> u64 {
        self.counts[i][t]
    }

    pub fn country_index(&self, id: &str) -> Option<usize> {
        self.countries.iter().position(|c| c == id)
    }

    /// Drop the last `days` days.
    pub fn truncate_last(&self, days: usize) -> Result<Self> {
        let t = self.n_days();
        if days + 2 > t {
            return Err(Error::InsufficientData(format!(
                "cannot remove {days} of {t} days and keep at least 2"
            )));
        }
        let counts = self.counts.iter().map(|r| r[..t - days].to_vec()).collect();
        Self::new(self.countries.clone(), self.start, counts)
    }

    /// One record per cell, country-major, for round-tripping through [`clean_series`].
    pub fn to_records(&self) -> Vec<RawCaseRecord> {
        let mut out = Vec::with_capacity(self.n_countries() * self.n_days());
        for (i, id) in self.countries.iter().enumerate() {
            for (t, &y) in self.counts[i].iter().enumerate() {
                out.push(RawCaseRecord {
                    report_date: self.date(t),
                    cases: y as i64,
                    country_name: id.clone(),
                    country_id: id.clone(),
                });
            }
        }
        out
    }

    /// Serialize as `country_id,date,cases`, ISO dates, one row per cell.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["country_id", "date", "cases"])?;
        for (i, id) in self.countries.iter().enumerate() {
            for (t, y) in self.counts[i].iter().enumerate() {
                w.write_record([id.as_str(), &self.date(t).to_string(), &y.to_string()])?;
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Inverse of [`CasePanel::to_csv`]. Every (country, date) cell must be present exactly once.
    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(bytes);
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(name.to_string()))
        };
        let (ci, di, yi) = (col("country_id")?, col("date")?, col("cases")?);
        let mut order: Vec<String> = Vec::new();
        let mut cells: HashMap<String, BTreeMap<NaiveDate, u64>> = HashMap::new();
        for row in reader.records() {
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let row_err = |message: String| Error::Row { line, message };
            let id = row.get(ci).unwrap_or("").to_string();
            let date: NaiveDate = row
                .get(di)
                .unwrap_or("")
                .parse()
                .map_err(|e| row_err(format!("invalid date: {e}")))?;
            let y: u64 = row
                .get(yi)
                .unwrap_or("")
                .parse()
                .map_err(|_| row_err("cases must be a non-negative integer".into()))?;
            let series = cells.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                BTreeMap::new()
            });
            if series.insert(date, y).is_some() {
                return Err(row_err(format!("duplicate cell ({id}, {date})")));
            }
        }
        let first = cells
            .get(order.first().ok_or(Error::EmptyPanel)?)
            .expect("first country present");
        let start = *first.keys().next().ok_or(Error::EmptyPanel)?;
        let t = first.len();
        let mut counts = Vec::with_capacity(order.len());
        for id in &order {
            let series = &cells[id];
            let contiguous = series.len() == t
                && series
                    .keys()
                    .enumerate()
                    .all(|(k, d)| *d == start + Days::new(k as u64));
            if !contiguous {
                return Err(Error::Domain(format!(
                    "country `{id}` does not cover the panel date axis"
                )));
            }
            counts.push(series.values().copied().collect());
        }
        Self::new(order, start, counts)
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_csv().expect("in-memory CSV write");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanOptions {
    /// Panel start; defaults to the earliest remaining record date.
    pub start: Option<NaiveDate>,
}

/// Bookkeeping from a cleaning pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub dropped_today: usize,
    pub negative_clamped: usize,
    pub duplicates: usize,
    pub before_start: usize,
    pub zero_filled: usize,
}

/// Clean records into a panel with default options.
pub fn clean_series(records: &[RawCaseRecord], today: NaiveDate) -> Result<CasePanel> {
    clean_series_with(records, today, &CleanOptions::default()).map(|(panel, _)| panel)
}

pub fn clean_series_with(
    records: &[RawCaseRecord],
    today: NaiveDate,
    options: &CleanOptions,
) -> Result<(CasePanel, CleaningReport)> {
    let mut report = CleaningReport::default();
    let kept: Vec<&RawCaseRecord> = records
        .iter()
        .filter(|r| {
            let is_today = r.report_date == today;
            report.dropped_today += usize::from(is_today);
            !is_today
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyPanel);
    }
    report.negative_clamped = kept.iter().filter(|r| r.cases < 0).count();

    let earliest = kept.iter().map(|r| r.report_date).min().expect("non-empty");
    let start = options.start.unwrap_or(earliest);
    let mut order: Vec<&str> = Vec::new();
    let mut cells: HashMap<&str, BTreeMap<NaiveDate, u64>> = HashMap::new();
    for r in &kept {
        if r.report_date < start {
            report.before_start += 1;
            continue;
        }
        let series = cells.entry(r.country_id.as_str()).or_insert_with(|| {
            order.push(r.country_id.as_str());
            BTreeMap::new()
        });
        if series.insert(r.report_date, r.cases.max(0) as u64).is_some() {
            report.duplicates += 1;
            warn!(
                "duplicate row for ({}, {}); keeping the last occurrence",
                r.country_id, r.report_date
            );
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let end = cells
        .values()
        .filter_map(|s| s.keys().next_back())
        .max()
        .copied()
        .expect("non-empty");
    let t = (end - start).num_days() as usize + 1;
    let mut counts = Vec::with_capacity(order.len());
    for id in &order {
        let series = &cells[id];
        let mut row = vec![0u64; t];
        for (date, &y) in series {
            row[(*date - start).num_days() as usize] = y;
        }
        report.zero_filled += t - series.len();
        counts.push(row);
    }
    let panel = CasePanel::new(order.iter().map(|s| s.to_string()).collect(), start, counts)?;
    Ok((panel, report))
}

/// Whether [`fetch_feed`] may touch the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FetchMode {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeedSource {
    Network,
    Cache { retrieved_at: DateTime<Utc> },
}

#[derive(Clone, Debug)]
pub struct FetchedFeed {
    pub bytes: Vec<u8>,
    pub source: FeedSource,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    url: String,
    retrieved_at: DateTime<Utc>,
    sha256: String,
}

pub fn cache_paths(cache_dir: &Path) -> (PathBuf, PathBuf) {
    (cache_dir.join("feed.csv"), cache_dir.join("feed.meta"))
}

const FEED_SIZE_LIMIT: u64 = 512 * 1024 * 1024;

/// Download the feed, caching it under `cache_dir`; fall back to the cache on
/// network failure. HTTP error statuses are reported, not masked by the cache.
pub fn fetch_feed(url: &str, cache_dir: &Path, mode: FetchMode) -> Result<FetchedFeed> {
    if mode == FetchMode::Offline {
        return read_cache(cache_dir)?
            .ok_or_else(|| Error::Fetch(format!("offline and no cache in {}", cache_dir.display())));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into();
    match agent.get(url).call() {
        Ok(mut response) => {
            let bytes = response
                .body_mut()
                .with_config()
                .limit(FEED_SIZE_LIMIT)
                .read_to_vec()
                .map_err(|e| Error::Fetch(format!("reading body from {url}: {e}")))?;
            write_cache(cache_dir, url, &bytes)?;
            Ok(FetchedFeed {
                bytes,
                source: FeedSource::Network,
            })
        }
        Err(ureq::Error::StatusCode(status)) => {
            Err(Error::Fetch(format!("{url} returned HTTP status {status}")))
        }
        Err(e) => match read_cache(cache_dir)? {
            Some(cached) => {
                if let FeedSource::Cache { retrieved_at } = &cached.source {
                    warn!("network fetch of {url} failed ({e}); using stale cache from {retrieved_at}");
                }
                Ok(cached)
            }
            None => Err(Error::Fetch(format!("{url}: {e}; no cached copy"))),
        },
    }
}

fn write_cache(cache_dir: &Path, url: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(cache_dir)?;
    let (data, meta) = cache_paths(cache_dir);
    fs::write(&data, bytes)?;
    let meta_doc = CacheMeta {
        url: url.to_string(),
        retrieved_at: Utc::now(),
        sha256: hex_digest(bytes),
    };
    fs::write(&meta, serde_json::to_vec_pretty(&meta_doc)?)?;
    Ok(())
}

fn read_cache(cache_dir: &Path) -> Result<Option<FetchedFeed>> {
    let (data, meta) = cache_paths(cache_dir);
    if !data.exists() || !meta.exists() {
        return Ok(None);
    }
    let mut bytes = Vec::new();
    fs::File::open(&data)?.read_to_end(&mut bytes)?;
    let meta_doc: CacheMeta = serde_json::from_slice(&fs::read(&meta)?).map_err(|e| Error::Artifact {
        path: meta.clone(),
        message: e.to_string(),
    })?;
    if meta_doc.sha256 != hex_digest(&bytes) {
        return Err(Error::Artifact {
            path: data,
            message: "cached feed does not match its recorded checksum".into(),
        });
    }
    Ok(Some(FetchedFeed {
        bytes,
        source: FeedSource::Cache {
            retrieved_at: meta_doc.retrieved_at,
        },
    }))
}
