use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration as StdDuration;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use log::{info, warn};
use serde::Deserialize;
use soi_core::baselines::{
    compare_methods, darwich_probe_stage, darwich_prune, gharaibeh_flags, load_anchor_matrix, load_traceroutes, measurement_cost, BaselineFlag,
    BaselineMethod, ProbeLocation, RouterMatch,
};
use soi_core::detector::{self, select_observations, Selection};
use soi_core::ingest::atlas::{fetch_builtin_measurements, Cadence, FetchPlan, FixtureTransport, MeasurementMap, Transport, API_KEY_ENV};
use soi_core::ingest::campaign::load_ping_campaign;
use soi_core::ingest::store::ObservationStore;
use soi_core::ingest::{campaign_window, historical_window, Sample};
use soi_core::longitudinal::violators_over_time;
use soi_core::registry::{builtin_vp_registry, load_probe_archive, load_vantage_points, parse_timestamp, LineError};
use soi_core::report::{
    write_detection_outputs, write_history_outputs, write_json, write_jsonl, FeedDocument, ReportSummary, REPORT_SUMMARY_FILE,
};
use soi_core::sim::{generate, score, SimScenario, DEFAULT_BUCKET_EDGES_KM};
use soi_core::{aggregate_min_rtt, build_episodes, CentroidTable, GeoPoint, Registry, SoiConfig, Timeline};

use crate::http::HttpTransport;
use crate::manifest::ManifestBuilder;
use crate::{
    CadenceArg, CompareArgs, ConfigArg, DarwichArgs, DetectArgs, FeedArgs, FetchArgs, GharaibehArgs, HistoryArgs, SimulateArgs,
    EXIT_DATA_QUALITY, EXIT_IO,
};

const MANIFEST_FILE: &str = "manifest.json";
const BUILTIN_MEASUREMENTS: &str = include_str!("../data/builtin_measurements.json");

fn load_config(arg: &ConfigArg) -> Result<SoiConfig> {
    let config = match &arg.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SoiConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn report_line_errors(path: &Path, errors: &[LineError]) {
    if errors.is_empty() {
        return;
    }
    warn!("{}: skipped {} unreadable line(s)", path.display(), errors.len());
    for e in errors.iter().take(5) {
        warn!("  line {}: {}", e.line, e.reason);
    }
}

/// Parses `30m`, `12h`, `7d`, `1w` or a bare number of seconds.
pub(crate) fn parse_duration(raw: &str) -> Result<Duration> {
    let raw = raw.trim();
    let split = raw.find(|c: char| !c.is_ascii_digit()).unwrap_or(raw.len());
    let (num, unit) = raw.split_at(split);
    let n: i64 = num.parse().map_err(|_| anyhow!("invalid duration `{raw}`"))?;
    let d = match unit {
        "" | "s" => Duration::seconds(n),
        "m" => Duration::minutes(n),
        "h" => Duration::hours(n),
        "d" => Duration::days(n),
        "w" => Duration::weeks(n),
        _ => bail!("invalid duration unit in `{raw}`"),
    };
    if d <= Duration::zero() {
        bail!("duration must be positive: `{raw}`");
    }
    Ok(d)
}

fn parse_instant(raw: &str) -> Result<DateTime<Utc>> {
    parse_timestamp(raw).ok_or_else(|| anyhow!("unrecognised date or time `{raw}`"))
}

fn parse_date(raw: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d").with_context(|| format!("expected YYYY-MM-DD, got `{raw}`"))
}

fn parse_time(raw: &str) -> Result<NaiveTime> {
    let raw = raw.trim();
    NaiveTime::parse_from_str(raw, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(raw, "%H:%M:%S"))
        .or_else(|_| raw.parse::<u32>().ok().and_then(|h| NaiveTime::from_hms_opt(h, 0, 0)).ok_or(()))
        .map_err(|_| anyhow!("invalid time of day `{raw}`"))
}

/// Probe archive plus the built-in central servers and any extra vantage
/// points.
fn build_registry(probes: Option<&Path>, vps: Option<&Path>, config: &SoiConfig) -> Result<Registry> {
    let mut records = Vec::new();
    if let Some(path) = probes {
        let archive = load_probe_archive(open_reader(path)?)?;
        report_line_errors(path, &archive.errors);
        records = archive.probes;
    }
    let mut registry = Registry::new(records, builtin_vp_registry(config.city_radius_km)?);
    if let Some(path) = vps {
        let extra = load_vantage_points(open_reader(path)?, &path.display().to_string())?;
        registry.add_vantage_points(extra)?;
    }
    Ok(registry)
}

fn load_centroids(path: Option<&Path>) -> Result<CentroidTable> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CentroidTable::from_csv(&text, &p.display().to_string())?)
        }
        None => Ok(CentroidTable::builtin()),
    }
}

fn report_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(REPORT_SUMMARY_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_summary(path: &Path) -> Result<ReportSummary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn fetch(args: FetchArgs) -> Result<u8> {
    let config = load_config(&args.config)?;
    let store = ObservationStore::open(&args.store)?;
    let _lock = store.lock()?;
    let mut manifest = ManifestBuilder::start("fetch", &config);
    manifest.inputs(args.config.config.clone());

    let mut exit = 0;
    let (samples, window) = if let Some(path) = &args.campaign {
        manifest.input(path);
        manifest.inputs(args.vps.clone());
        let registry = build_registry(None, args.vps.as_deref(), &config)?;
        let load = load_ping_campaign(open_reader(path)?, &registry, &path.display().to_string())?;
        report_line_errors(path, &load.malformed);
        info!("{} samples ({} timeouts) from {}", load.samples.len(), load.timeouts, path.display());
        let window = args.window.as_deref().map(parse_duration).transpose()?.unwrap_or_else(campaign_window);
        (load.samples, window)
    } else {
        let (samples, failed) = fetch_from_api(&args, &mut manifest)?;
        if failed {
            exit = EXIT_IO;
        }
        let window = args.window.as_deref().map(parse_duration).transpose()?.unwrap_or_else(historical_window);
        (samples, window)
    };

    // Whatever arrived is kept, even when the pull failed part-way.
    let agg = aggregate_min_rtt(samples, window);
    if agg.rejected > 0 {
        warn!("dropped {} samples with invalid RTTs", agg.rejected);
    }
    let stats = store.upsert(agg.observations)?;
    info!("store: {} inserted, {} replaced, {} unchanged", stats.inserted, stats.replaced, stats.unchanged);
    manifest.finish(&store.files()?, &args.store.join(MANIFEST_FILE))?;
    Ok(exit)
}

/// Returns the samples gathered and whether the pull stopped on an error.
fn fetch_from_api(args: &FetchArgs, manifest: &mut ManifestBuilder) -> Result<(Vec<Sample>, bool)> {
    let (Some(from), Some(to)) = (&args.from, &args.to) else {
        bail!("--from and --to are required unless --campaign is given");
    };
    let mut probe_ids: BTreeSet<u64> = args.probe_ids.iter().copied().collect();
    if let Some(path) = &args.probes {
        manifest.input(path);
        let archive = load_probe_archive(open_reader(path)?)?;
        report_line_errors(path, &archive.errors);
        probe_ids.extend(archive.probes.iter().map(|p| p.probe_id));
    }
    if probe_ids.is_empty() {
        bail!("no probes to fetch; pass --probes or --probe-ids");
    }
    let map = match &args.measurements {
        Some(path) => {
            manifest.input(path);
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            MeasurementMap::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => MeasurementMap::from_json(BUILTIN_MEASUREMENTS)?,
    };
    let vp_ids = if args.vp_ids.is_empty() {
        builtin_vp_registry(0.0)?.into_iter().map(|v| v.vp_id).collect()
    } else {
        args.vp_ids.clone()
    };

    let mut plan = FetchPlan::new(vp_ids, probe_ids, parse_date(from)?, parse_date(to)?);
    if plan.to < plan.from {
        bail!("--to is before --from");
    }
    plan.cadence = match args.cadence {
        CadenceArg::Daily => Cadence::Daily,
        CadenceArg::Weekly => Cadence::Weekly,
    };
    if !args.times.is_empty() {
        plan.sample_times = args.times.iter().map(|t| parse_time(t)).collect::<Result<_>>()?;
    }
    plan.max_in_flight = args.max_in_flight.max(1);
    if let Some(base) = &args.api_base {
        plan.api_base = base.trim_end_matches('/').to_string();
    }
    plan.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());

    let transport: Box<dyn Transport> = match &args.fixture {
        Some(dir) => {
            manifest.inputs(fixture_files(dir)?);
            Box::new(FixtureTransport::new(dir))
        }
        None => Box::new(HttpTransport::new(StdDuration::from_secs(60))?),
    };
    let outcome = fetch_builtin_measurements(transport.as_ref(), &plan, &map);
    info!("{} requests, {} samples, {} malformed results", outcome.requests, outcome.samples.len(), outcome.malformed);
    let failed = match &outcome.failure {
        Some(e) => {
            eprintln!("error: fetch stopped: {e}");
            true
        }
        None => false,
    };
    Ok((outcome.samples, failed))
}

fn fixture_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn detect(args: DetectArgs) -> Result<u8> {
    let mut config = load_config(&args.config)?;
    if let Some(g) = args.guard_ms {
        config.detection.guard_ms = g;
        config.validate()?;
    }
    let store = ObservationStore::open(&args.store)?;
    let _lock = store.lock()?;
    let mut manifest = ManifestBuilder::start("detect", &config);
    manifest.inputs(args.config.config.clone());
    manifest.input(&args.probes);
    manifest.inputs(args.vps.clone());
    manifest.inputs(args.centroids.clone());
    manifest.inputs(store.files()?);

    let registry = build_registry(Some(&args.probes), args.vps.as_deref(), &config)?;
    let centroids = load_centroids(args.centroids.as_deref())?;
    let window = parse_duration(&args.window)?;
    let selection = match (&args.at, args.latest) {
        (Some(at), _) => Selection::At { t: parse_instant(at)?, window },
        (None, true) => Selection::Latest { window },
        (None, false) => Selection::All,
    };
    let observations = select_observations(&store.load_all()?, selection);
    if observations.is_empty() {
        warn!("no observations selected from {}", args.store.display());
    }
    let report = detector::detect(&observations, &registry, &config);
    info!(
        "{} pairs over {} probes: {} violating probes",
        report.scanned_pairs,
        report.scanned_probes.len(),
        report.violating_probes.len()
    );
    let outputs = write_detection_outputs(&args.out, &report, &registry, &centroids, config.detection.centroid_threshold_km)?;
    manifest.finish(&outputs, &args.out.join(MANIFEST_FILE))?;

    let skipped = report.skipped_fraction();
    if skipped > config.detection.max_skipped_fraction {
        let s = &report.skipped;
        eprintln!(
            "data quality: {:.1}% of observations skipped (limit {:.1}%): {} unknown probe, {} unknown vantage point, {} without location, {} invalid RTT",
            skipped * 100.0,
            config.detection.max_skipped_fraction * 100.0,
            s.unknown_probe,
            s.unknown_vp,
            s.no_location,
            s.invalid_rtt
        );
        return Ok(EXIT_DATA_QUALITY);
    }
    Ok(0)
}

pub fn history(args: HistoryArgs) -> Result<u8> {
    let config = load_config(&args.config)?;
    let store = ObservationStore::open(&args.store)?;
    let _lock = store.lock()?;
    let mut manifest = ManifestBuilder::start("history", &config);
    manifest.inputs(args.config.config.clone());
    manifest.input(&args.probes);
    manifest.inputs(args.vps.clone());
    manifest.inputs(store.files()?);

    let registry = build_registry(Some(&args.probes), args.vps.as_deref(), &config)?;
    let observations = store.load_all()?;
    let report = detector::detect(&observations, &registry, &config);
    let mut timeline = Timeline::from_scan(&observations, &report);
    if timeline.distinct_windows() < 2 {
        eprintln!("history requires ≥2 windows (store has {})", timeline.distinct_windows());
        return Ok(EXIT_DATA_QUALITY);
    }
    if let Some(h) = &args.horizon {
        timeline = timeline.with_horizon(parse_instant(h)?);
    }
    let episodes = build_episodes(&timeline, &registry, &config.episodes);
    let series = violators_over_time(&timeline, parse_duration(&args.bucket)?);
    info!("{} episodes across {} windows", episodes.len(), timeline.distinct_windows());
    let outputs = write_history_outputs(&args.out, &episodes, &series)?;
    manifest.finish(&outputs, &args.out.join(MANIFEST_FILE))?;
    Ok(0)
}

pub fn feed(args: FeedArgs) -> Result<u8> {
    let report = report_path(&args.report);
    let summary = read_summary(&report)?;
    let doc = FeedDocument::from_summary(&summary);
    let now = args.now.as_deref().map(parse_instant).transpose()?.unwrap_or_else(Utc::now);
    if doc.is_stale(now, Duration::days(args.max_age_days)) {
        let age = doc.generated_at.map_or_else(|| "unknown age".to_string(), |t| format!("{} days old", (now - t).num_days()));
        eprintln!("warning: detection is stale ({age}); publishing anyway");
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_json(&args.out, &doc)?;

    let mut manifest = ManifestBuilder::start("feed", &SoiConfig::default());
    manifest.input(&report);
    let mut manifest_path = args.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    manifest.finish(std::slice::from_ref(&args.out), Path::new(&manifest_path))?;
    Ok(0)
}

fn probe_locations(registry: &Registry) -> Vec<ProbeLocation> {
    registry
        .probes()
        .filter_map(|p| {
            p.latest_location().map(|location| ProbeLocation {
                probe_id: p.probe_id,
                country_code: p.country_code.clone(),
                location,
            })
        })
        .collect()
}

pub fn gharaibeh(args: GharaibehArgs) -> Result<u8> {
    let mut config = load_config(&args.config)?;
    if args.first_hop {
        config.baselines.router_match = RouterMatch::FirstHop;
    }
    if args.exact_centroid {
        config.baselines.centroid_match_km = None;
    }
    let mut manifest = ManifestBuilder::start("baseline gharaibeh", &config);
    manifest.inputs(args.config.config.clone());
    manifest.input(&args.probes);
    manifest.input(&args.traceroutes);
    manifest.inputs(args.centroids.clone());

    let registry = build_registry(Some(&args.probes), None, &config)?;
    let centroids = load_centroids(args.centroids.as_deref())?;
    let (traceroutes, errors) = load_traceroutes(open_reader(&args.traceroutes)?)?;
    report_line_errors(&args.traceroutes, &errors);
    let outcome = gharaibeh_flags(&probe_locations(&registry), &traceroutes, &centroids, &config.baselines);
    info!(
        "{} probes flagged ({} traceroutes skipped, {} probes without a centroid)",
        outcome.flagged_probes().len(),
        outcome.skipped_traceroutes,
        outcome.missing_centroids
    );

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let flags = args.out.join("flags.jsonl");
    write_jsonl(&flags, &outcome.flags)?;
    manifest.finish(&[flags], &args.out.join(MANIFEST_FILE))?;
    Ok(0)
}

#[derive(Debug, Deserialize)]
struct ProbeRttRow {
    probe_id: u64,
    anchor_id: u64,
    min_rtt_ms: f64,
}

fn load_probe_rtts(path: &Path) -> Result<Vec<(u64, u64, f64)>> {
    let mut out = Vec::new();
    for (idx, line) in open_reader(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ProbeRttRow = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        out.push((row.probe_id, row.anchor_id, row.min_rtt_ms));
    }
    Ok(out)
}

pub fn darwich(args: DarwichArgs) -> Result<u8> {
    let config = load_config(&args.config)?;
    let mut manifest = ManifestBuilder::start("baseline darwich", &config);
    manifest.inputs(args.config.config.clone());
    manifest.input(&args.probes);
    manifest.input(&args.anchor_matrix);
    manifest.inputs(args.probe_rtts.clone());

    let registry = build_registry(Some(&args.probes), None, &config)?;
    let (matrix, errors) = load_anchor_matrix(open_reader(&args.anchor_matrix)?)?;
    report_line_errors(&args.anchor_matrix, &errors);
    let locations: BTreeMap<u64, GeoPoint> = registry.probes().filter_map(|p| p.latest_location().map(|l| (p.probe_id, l))).collect();
    let missing = matrix.anchors().iter().filter(|a| !locations.contains_key(a)).count();
    if missing > 0 {
        warn!("{missing} anchors have no known location and are ignored");
    }
    let pruned = darwich_prune(&matrix, &locations, &config.speeds);
    let mut flags: Vec<BaselineFlag> = pruned.pruned.clone();
    if let Some(path) = &args.probe_rtts {
        let rtts = load_probe_rtts(path)?;
        flags.extend(darwich_probe_stage(&rtts, &pruned.validated, &locations, &locations, &config.speeds));
    }
    info!("{} anchors pruned, {} validated, {} flags", pruned.pruned.len(), pruned.validated.len(), flags.len());

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let flags_path = args.out.join("flags.jsonl");
    let validated_path = args.out.join("validated_anchors.json");
    write_jsonl(&flags_path, &flags)?;
    write_json(&validated_path, &pruned.validated)?;
    manifest.finish(&[flags_path, validated_path], &args.out.join(MANIFEST_FILE))?;
    Ok(0)
}

fn method_family(m: BaselineMethod) -> &'static str {
    match m {
        BaselineMethod::GharaibehDefaultCoord | BaselineMethod::GharaibehSharedRouter => "gharaibeh",
        BaselineMethod::DarwichPruned | BaselineMethod::DarwichProbe => "darwich",
    }
}

pub fn compare(args: CompareArgs) -> Result<u8> {
    let mut manifest = ManifestBuilder::start("baseline compare", &SoiConfig::default());
    let report = report_path(&args.report);
    manifest.input(&report);
    manifest.inputs(args.flags.clone());
    let summary = read_summary(&report)?;

    let mut families: BTreeMap<&'static str, BTreeSet<u64>> = BTreeMap::new();
    for path in &args.flags {
        for (idx, line) in open_reader(path)?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let flag: BaselineFlag = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), idx + 1))?;
            families.entry(method_family(flag.method)).or_default().insert(flag.probe_id);
        }
    }
    let cost = match (args.vps, args.probes, args.anchors) {
        (Some(v), Some(p), Some(a)) => Some(measurement_cost(v, p, a)),
        _ => None,
    };
    let baselines: Vec<(String, BTreeSet<u64>, Option<u64>)> = families
        .into_iter()
        .map(|(name, set)| {
            let pairs = if name == "darwich" { cost.map(|c| c.darwich_pairs) } else { None };
            (name.to_string(), set, pairs)
        })
        .collect();
    let table = compare_methods(&summary.violating_probes, cost.map(|c| c.primary_pairs), &baselines);

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let table_path = args.out.join("comparison.json");
    write_json(&table_path, &table)?;
    let mut outputs = vec![table_path];
    if let Some(c) = cost {
        let cost_path = args.out.join("measurement_cost.json");
        write_json(&cost_path, &c)?;
        outputs.push(cost_path);
    }
    manifest.finish(&outputs, &args.out.join(MANIFEST_FILE))?;
    Ok(0)
}

pub fn simulate(args: SimulateArgs) -> Result<u8> {
    let config = load_config(&args.config)?;
    let text = fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let scenario: SimScenario = if args.scenario.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", args.scenario.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.scenario.display()))?
    };
    let mut manifest = ManifestBuilder::start("simulate", &config);
    manifest.inputs(args.config.config.clone());
    manifest.input(&args.scenario);

    let world = generate(&scenario)?;
    let report = detector::detect(&world.observations, &world.registry, &config);
    let result = score(&world, &report.violating_probes, &DEFAULT_BUCKET_EDGES_KM);
    info!("precision {:.4}, recall {:.4}", result.precision, result.recall);
    if !result.false_positives.is_empty() {
        warn!("{} false positives", result.false_positives.len());
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let result_path = args.out.join("result.json");
    let planted_path = args.out.join("planted.jsonl");
    write_json(&result_path, &result)?;
    write_jsonl(&planted_path, &world.planted)?;
    manifest.finish(&[result_path, planted_path], &args.out.join(MANIFEST_FILE))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        assert_eq!(parse_duration("12h").unwrap(), Duration::hours(12));
        assert_eq!(parse_duration("1w").unwrap(), Duration::days(7));
        assert_eq!(parse_duration("90").unwrap(), Duration::seconds(90));
        assert!(parse_duration("0d").is_err());
        assert!(parse_duration("3y").is_err());
    }

    #[test]
    fn times_of_day() {
        assert_eq!(parse_time("06:00").unwrap(), NaiveTime::from_hms_opt(6, 0, 0).unwrap());
        assert_eq!(parse_time("18").unwrap(), NaiveTime::from_hms_opt(18, 0, 0).unwrap());
        assert!(parse_time("25:00").is_err());
    }

    #[test]
    fn builtin_measurement_map_lists_every_server() {
        let map = MeasurementMap::from_json(BUILTIN_MEASUREMENTS).unwrap();
        let servers: BTreeSet<String> = builtin_vp_registry(0.0).unwrap().into_iter().map(|v| v.vp_id).collect();
        assert_eq!(map.targets.keys().cloned().collect::<BTreeSet<_>>(), servers);
    }
}
