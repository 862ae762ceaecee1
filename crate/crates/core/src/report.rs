//! File outputs: newline-delimited records, plot-ready CSV, aligned text
//! tables and the violating-probe feed. Everything written here is a pure
//! function of its inputs so reruns produce identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{aggregate_by_country, error_cdf, probe_error_cdf, probe_summaries, CentroidTable, CountryAggregate, CountryOrder, DetectionReport, SkipTally};
use crate::error::{Error, Result};
use crate::longitudinal::{location_change_cdf, resolution_counts, weeks_to_update_cdf, BucketCount, EpisodeRow, Resolution, ViolationEpisode};
use crate::registry::Registry;

/// Version tag of the detection method carried by the feed.
pub const METHOD_VERSION: &str = concat!("soi-", env!("CARGO_PKG_VERSION"));

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn cdf_csv(header: (&str, &str), points: &[(f64, f64)]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (x, f) in points {
        let _ = writeln!(out, "{x},{f}");
    }
    out
}

/// Country table in the layout of a paper table: code, violators, probes,
/// share.
pub fn render_country_table(title: &str, rows: &[CountryAggregate]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<8} {:>10} {:>8} {:>9}", "Country", "Violators", "Probes", "Share");
    for r in rows {
        let _ = writeln!(out, "{:<8} {:>10} {:>8} {:>8.2}%", r.country_code, r.violator_count, r.probe_count, r.violator_pct);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub generated_at: Option<DateTime<Utc>>,
    pub config_fingerprint: String,
    pub method_version: String,
    pub scanned_pairs: usize,
    pub scanned_probes: usize,
    pub violation_records: usize,
    pub violating_probe_count: usize,
    pub violating_probes: BTreeSet<u64>,
    pub skipped: SkipTally,
    pub skipped_fraction: f64,
}

impl ReportSummary {
    pub fn of(report: &DetectionReport) -> Self {
        ReportSummary {
            generated_at: report.generated_at,
            config_fingerprint: report.config_fingerprint.clone(),
            method_version: METHOD_VERSION.to_string(),
            scanned_pairs: report.scanned_pairs,
            scanned_probes: report.scanned_probes.len(),
            violation_records: report.records.len(),
            violating_probe_count: report.violating_probes.len(),
            violating_probes: report.violating_probes.clone(),
            skipped: report.skipped,
            skipped_fraction: report.skipped_fraction(),
        }
    }
}

pub const REPORT_SUMMARY_FILE: &str = "report.json";

/// Writes every detection artifact into `dir` and returns their paths.
pub fn write_detection_outputs(dir: &Path, report: &DetectionReport, registry: &Registry, centroids: &CentroidTable, centroid_threshold_km: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };

    write_jsonl(&out("violations.jsonl"), &report.records)?;

    let by_count = aggregate_by_country(report, registry, CountryOrder::ByCount, 1);
    let by_pct = aggregate_by_country(report, registry, CountryOrder::ByPct, 1);
    write_jsonl(&out("countries_by_count.jsonl"), &by_count)?;
    write_jsonl(&out("countries_by_pct.jsonl"), &by_pct)?;
    write_text(&out("countries_by_count.txt"), &render_country_table("Countries with the most violating probes", &by_count))?;
    write_text(&out("countries_by_pct.txt"), &render_country_table("Countries with the highest share of violating probes", &by_pct))?;

    write_text(&out("error_cdf.csv"), &cdf_csv(("distance_error_km", "cumulative_fraction"), &error_cdf(report)))?;
    write_text(&out("probe_error_cdf.csv"), &cdf_csv(("distance_error_km", "cumulative_fraction"), &probe_error_cdf(report)))?;
    write_jsonl(&out("probe_summary.jsonl"), probe_summaries(report, registry, Some((centroids, centroid_threshold_km))))?;
    write_json(&out(REPORT_SUMMARY_FILE), &ReportSummary::of(report))?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionShare {
    pub resolution: Resolution,
    pub episodes: usize,
    pub share: f64,
}

pub fn resolution_shares(episodes: &[ViolationEpisode]) -> Vec<ResolutionShare> {
    let total = episodes.len();
    resolution_counts(episodes)
        .into_iter()
        .map(|(resolution, n)| ResolutionShare {
            resolution,
            episodes: n,
            share: if total == 0 { 0.0 } else { n as f64 / total as f64 },
        })
        .collect()
}

/// Writes episode, time-series and CDF artifacts into `dir`.
pub fn write_history_outputs(dir: &Path, episodes: &[ViolationEpisode], series: &[BucketCount]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_jsonl(&out("episodes.jsonl"), episodes.iter().map(EpisodeRow::from))?;
    let mut csv = String::from("bucket_start,violating_probes,responding_probes,violating_ratio\n");
    for b in series {
        let _ = writeln!(csv, "{},{},{},{}", b.bucket_start.to_rfc3339(), b.violating_probes, b.responding_probes, b.violating_ratio);
    }
    write_text(&out("violators_over_time.csv"), &csv)?;
    write_text(&out("weeks_to_update_cdf.csv"), &cdf_csv(("weeks_to_update", "cumulative_fraction"), &weeks_to_update_cdf(episodes)))?;
    write_text(&out("location_change_cdf.csv"), &cdf_csv(("location_change_km", "cumulative_fraction"), &location_change_cdf(episodes)))?;
    write_jsonl(&out("resolutions.jsonl"), resolution_shares(episodes))?;
    Ok(written)
}

/// The published list of currently violating probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedDocument {
    pub generated_at: Option<DateTime<Utc>>,
    pub probe_ids: Vec<u64>,
    pub method_version: String,
}

impl FeedDocument {
    pub fn from_summary(summary: &ReportSummary) -> Self {
        FeedDocument {
            generated_at: summary.generated_at,
            probe_ids: summary.violating_probes.iter().copied().collect(),
            method_version: summary.method_version.clone(),
        }
    }

    pub fn is_stale(&self, now: DateTime<Utc>, max_age: chrono::Duration) -> bool {
        self.generated_at.map_or(true, |t| now - t > max_age)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn summary(ids: &[u64]) -> ReportSummary {
        ReportSummary {
            generated_at: Some(Utc.with_ymd_and_hms(2024, 5, 6, 0, 0, 0).unwrap()),
            config_fingerprint: "f".into(),
            method_version: METHOD_VERSION.into(),
            scanned_pairs: 10,
            scanned_probes: 5,
            violation_records: ids.len(),
            violating_probe_count: ids.len(),
            violating_probes: ids.iter().copied().collect(),
            skipped: SkipTally::default(),
            skipped_fraction: 0.0,
        }
    }

    #[test]
    fn feed_is_sorted_and_stable() {
        let feed = FeedDocument::from_summary(&summary(&[42, 7, 19]));
        assert_eq!(feed.probe_ids, vec![7, 19, 42]);
        let a = serde_json::to_string(&feed).unwrap();
        let b = serde_json::to_string(&FeedDocument::from_summary(&summary(&[19, 42, 7]))).unwrap();
        assert_eq!(a, b);
        let empty = FeedDocument::from_summary(&summary(&[]));
        assert!(empty.probe_ids.is_empty());
        assert!(serde_json::to_string(&empty).unwrap().contains("\"probe_ids\":[]"));
    }

    #[test]
    fn staleness() {
        let feed = FeedDocument::from_summary(&summary(&[1]));
        let t = feed.generated_at.unwrap();
        assert!(!feed.is_stale(t + Duration::days(14), Duration::days(14)));
        assert!(feed.is_stale(t + Duration::days(15), Duration::days(14)));
    }

    #[test]
    fn country_table_layout() {
        let rows = vec![CountryAggregate { country_code: "SZ".into(), violator_count: 1, probe_count: 1, violator_pct: 100.0 }];
        let text = render_country_table("T", &rows);
        assert!(text.contains("SZ                1        1   100.00%"), "{text}");
    }

    #[test]
    fn csv_output() {
        assert_eq!(cdf_csv(("x", "f"), &[(1.5, 0.5), (2.0, 1.0)]), "x,f\n1.5,0.5\n2,1\n");
    }
}
