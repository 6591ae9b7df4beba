//! Ping parsing, study-area filtering, per-window activity statistics and
//! cohort selection.
//!
//! Two record formats are accepted:
//!
//! * `CsvV1`: UTF-8, comma separated, columns `user_id,timestamp,lat,lon`,
//!   with an optional header line.
//! * `JsonLines`: one object per line with keys `user_id`, `timestamp`,
//!   `lat` and `lon`.
//!
//! Parsing is streaming: malformed lines are reported with their 1-based
//! line number and never abort the file. Only I/O failures are fatal.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{AnalysisWindow, BoundingBox, GeoPoint, Ping};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error while reading pings: {0}")]
    Io(#[from] io::Error),
    #[error("baseline window '{0}' has no activity map")]
    MissingBaseline(String),
    #[error("invalid cohort criteria: {0}")]
    InvalidCriteria(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A recoverable, per-line parse failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseError {
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PingRecordFormat {
    #[default]
    CsvV1,
    JsonLines,
}

/// One item from a [`PingReader`]: a ping or a recoverable parse error.
pub type ParsedRecord = Result<Ping<f64>, ParseError>;

enum Source<R: BufRead> {
    Csv {
        reader: csv::Reader<R>,
        record: csv::ByteRecord,
    },
    Json {
        reader: R,
        buf: String,
        line: u64,
    },
}

/// Streaming iterator over a ping file. Yields `Err(IngestError::Io)` once
/// on a fatal read failure and then stops.
pub struct PingReader<R: BufRead> {
    source: Source<R>,
    done: bool,
}

/// Starts streaming pings from `reader`.
pub fn parse_pings<R: BufRead>(reader: R, format: PingRecordFormat, has_header: bool) -> PingReader<R> {
    let source = match format {
        PingRecordFormat::CsvV1 => Source::Csv {
            reader: csv::ReaderBuilder::new()
                .has_headers(has_header)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(reader),
            record: csv::ByteRecord::new(),
        },
        PingRecordFormat::JsonLines => Source::Json {
            reader,
            buf: String::new(),
            line: 0,
        },
    };
    PingReader { source, done: false }
}

impl<R: BufRead> Iterator for PingReader<R> {
    type Item = Result<ParsedRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match &mut self.source {
            Source::Csv { reader, record } => next_csv(reader, record),
            Source::Json { reader, buf, line } => next_json(reader, buf, line),
        };
        match item {
            Some(Err(_)) | None => self.done = true,
            Some(Ok(_)) => {}
        }
        item
    }
}

fn next_csv<R: io::Read>(
    reader: &mut csv::Reader<R>,
    record: &mut csv::ByteRecord,
) -> Option<Result<ParsedRecord, IngestError>> {
    match reader.read_byte_record(record) {
        Ok(false) => None,
        Ok(true) => {
            let line = record.position().map_or(0, |p| p.line());
            Some(Ok(csv_fields(record).map_err(|message| ParseError { line, message })))
        }
        Err(e) => {
            let line = e.position().map_or(0, |p| p.line());
            let message = e.to_string();
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Some(Err(IngestError::Io(io))),
                _ => Some(Ok(Err(ParseError { line, message }))),
            }
        }
    }
}

fn csv_fields(record: &csv::ByteRecord) -> Result<Ping<f64>, String> {
    if record.len() != 4 {
        return Err(format!("expected 4 fields, found {}", record.len()));
    }
    let field = |i: usize| std::str::from_utf8(&record[i]).map_err(|_| format!("field {} is not valid UTF-8", i + 1));
    let user_id = field(0)?;
    let timestamp = field(1)?
        .parse::<i64>()
        .map_err(|e| format!("bad timestamp '{}': {e}", field(1).unwrap_or_default()))?;
    let lat = parse_coord(field(2)?, "lat")?;
    let lon = parse_coord(field(3)?, "lon")?;
    build_ping(user_id, timestamp, lat, lon)
}

fn parse_coord(s: &str, what: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("bad {what} '{s}': {e}"))
}

fn build_ping(user_id: &str, timestamp: i64, lat: f64, lon: f64) -> Result<Ping<f64>, String> {
    if user_id.is_empty() {
        return Err("empty user_id".into());
    }
    let point = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    Ping::new(user_id, timestamp, point).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum UserIdRepr {
    Text(String),
    Number(i64),
}

#[derive(Deserialize)]
struct JsonPing {
    user_id: UserIdRepr,
    timestamp: i64,
    lat: f64,
    lon: f64,
}

fn next_json<R: BufRead>(reader: &mut R, buf: &mut String, line: &mut u64) -> Option<Result<ParsedRecord, IngestError>> {
    loop {
        buf.clear();
        match reader.read_line(buf) {
            Ok(0) => return None,
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // read_line has already consumed the offending line
                *line += 1;
                return Some(Ok(Err(ParseError {
                    line: *line,
                    message: "line is not valid UTF-8".into(),
                })));
            }
            Err(e) => return Some(Err(e.into())),
        }
        *line += 1;
        let text = buf.trim();
        if text.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<JsonPing>(text)
            .map_err(|e| e.to_string())
            .and_then(|raw| {
                let uid = match raw.user_id {
                    UserIdRepr::Text(s) => s,
                    UserIdRepr::Number(n) => n.to_string(),
                };
                build_ping(&uid, raw.timestamp, raw.lat, raw.lon)
            });
        return Some(Ok(parsed.map_err(|message| ParseError { line: *line, message })));
    }
}

/// Pings and recoverable errors collected from a whole stream.
#[derive(Debug, Default)]
pub struct ParsedPings {
    pub pings: Vec<Ping<f64>>,
    pub errors: Vec<ParseError>,
}

/// Collects a whole stream into memory. Use [`parse_pings`] directly for
/// large inputs.
pub fn parse_all<R: BufRead>(reader: R, format: PingRecordFormat, has_header: bool) -> Result<ParsedPings, IngestError> {
    let mut out = ParsedPings::default();
    for item in parse_pings(reader, format, has_header) {
        match item? {
            Ok(p) => out.pings.push(p),
            Err(e) => out.errors.push(e),
        }
    }
    Ok(out)
}

pub fn keep_ping(p: &Ping<f64>, bbox: &BoundingBox<f64>, window: &AnalysisWindow) -> bool {
    bbox.contains(&p.point) && window.contains_timestamp(p.timestamp)
}

/// Retains pings inside `bbox` whose local day falls in `window`.
pub fn filter_pings<'a, I>(pings: I, bbox: &'a BoundingBox<f64>, window: &'a AnalysisWindow) -> impl Iterator<Item = Ping<f64>> + 'a
where
    I: IntoIterator<Item = Ping<f64>>,
    I::IntoIter: 'a,
{
    pings.into_iter().filter(move |p| keep_ping(p, bbox, window))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserActivity {
    pub user_id: String,
    pub window_label: String,
    pub active_days: usize,
    pub ping_count: usize,
}

/// Incremental form of [`activity_stats`], for folding a stream one ping at a
/// time. Accumulators for disjoint user shards merge with [`Self::merge`].
#[derive(Debug, Clone, Default)]
pub struct ActivityAccumulator {
    users: BTreeMap<String, (BTreeSet<NaiveDate>, usize)>,
}

impl ActivityAccumulator {
    pub fn add(&mut self, ping: &Ping<f64>, window: &AnalysisWindow) {
        let entry = match self.users.get_mut(&ping.user_id) {
            Some(e) => e,
            None => self.users.entry(ping.user_id.clone()).or_default(),
        };
        entry.0.insert(window.local_day(ping.timestamp));
        entry.1 += 1;
    }

    pub fn merge(&mut self, other: Self) {
        for (user, (days, count)) in other.users {
            let entry = self.users.entry(user).or_default();
            entry.0.extend(days);
            entry.1 += count;
        }
    }

    pub fn finish(self, window: &AnalysisWindow) -> BTreeMap<String, UserActivity> {
        self.users
            .into_iter()
            .map(|(user_id, (days, ping_count))| {
                let activity = UserActivity {
                    user_id: user_id.clone(),
                    window_label: window.label.clone(),
                    active_days: days.len(),
                    ping_count,
                };
                (user_id, activity)
            })
            .collect()
    }
}

/// Per-user distinct local days and ping totals. Pings are expected to be
/// filtered to `window` already.
pub fn activity_stats<'a, I>(pings: I, window: &AnalysisWindow) -> BTreeMap<String, UserActivity>
where
    I: IntoIterator<Item = &'a Ping<f64>>,
{
    let mut acc = ActivityAccumulator::default();
    for p in pings {
        acc.add(p, window);
    }
    acc.finish(window)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortCriteria {
    /// Minimum distinct active days required in every window.
    pub min_active_days_per_window: usize,
    /// Minimum ping count required in the baseline window.
    pub min_pings_baseline: usize,
    pub baseline_window_label: String,
}

impl Default for CohortCriteria {
    fn default() -> Self {
        Self {
            min_active_days_per_window: 25,
            min_pings_baseline: 301,
            baseline_window_label: "pre".into(),
        }
    }
}

impl CohortCriteria {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_active_days_per_window == 0 || self.min_pings_baseline == 0 {
            return Err(IngestError::InvalidCriteria("thresholds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Activity maps keyed by window label, then by user id.
pub type WindowActivity = BTreeMap<String, BTreeMap<String, UserActivity>>;

/// Users meeting the active-day threshold in every window and the ping
/// threshold in the baseline window.
pub fn select_cohort(stats: &WindowActivity, criteria: &CohortCriteria) -> Result<BTreeSet<String>, IngestError> {
    criteria.validate()?;
    let baseline = stats
        .get(&criteria.baseline_window_label)
        .ok_or_else(|| IngestError::MissingBaseline(criteria.baseline_window_label.clone()))?;
    let selected = baseline
        .values()
        .filter(|a| a.ping_count >= criteria.min_pings_baseline)
        .filter(|a| {
            stats.values().all(|window| {
                window
                    .get(&a.user_id)
                    .is_some_and(|w| w.active_days >= criteria.min_active_days_per_window)
            })
        })
        .map(|a| a.user_id.clone())
        .collect();
    Ok(selected)
}

/// Writes the cohort listing: user id, active days per window (in
/// `window_labels` order) and the baseline ping count.
pub fn write_cohort_csv<W: Write>(
    out: W,
    cohort: &BTreeSet<String>,
    stats: &WindowActivity,
    window_labels: &[String],
    baseline_label: &str,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user_id".to_string()];
    header.extend(window_labels.iter().map(|l| format!("active_days_{l}")));
    header.push("baseline_pings".into());
    w.write_record(&header)?;
    for user in cohort {
        let mut row = vec![user.clone()];
        for label in window_labels {
            let days = stats
                .get(label)
                .and_then(|m| m.get(user))
                .map_or(0, |a| a.active_days);
            row.push(days.to_string());
        }
        let pings = stats
            .get(baseline_label)
            .and_then(|m| m.get(user))
            .map_or(0, |a| a.ping_count);
        row.push(pings.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the user ids back from a cohort listing.
pub fn read_cohort_csv<R: io::Read>(input: R) -> Result<BTreeSet<String>, IngestError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = BTreeSet::new();
    for rec in r.records() {
        let rec = rec?;
        if let Some(u) = rec.get(0) {
            out.insert(u.to_string());
        }
    }
    Ok(out)
}

/// Writes pings as headerless `CsvV1`.
pub fn write_pings_csv<W: Write, I>(out: W, pings: I) -> Result<(), IngestError>
where
    I: IntoIterator,
    I::Item: Borrow<Ping<f64>>,
{
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for p in pings {
        let p = p.borrow();
        w.write_record([
            p.user_id.as_str(),
            &p.timestamp.to_string(),
            &p.point.lat.to_string(),
            &p.point.lon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, m, day).unwrap()
    }

    fn jan() -> AnalysisWindow {
        AnalysisWindow::new("pre", d(1, 1), d(1, 31), -300).unwrap()
    }

    fn bbox() -> BoundingBox<f64> {
        BoundingBox::new(33.0, 34.5, -85.0, -83.5).unwrap()
    }

    fn ping(user: &str, ts: i64, lat: f64, lon: f64) -> Ping<f64> {
        Ping::new(user, ts, GeoPoint { lat, lon }).unwrap()
    }

    fn local_ts(day: NaiveDate, hour: u32, minute: u32, offset: i32) -> i64 {
        crate::geo::local_midnight_utc(day, offset) + i64::from(hour * 3600 + minute * 60)
    }

    #[test]
    fn parses_single_csv_line() {
        let parsed = parse_all("u1,1579000000,33.75,-84.39\n".as_bytes(), PingRecordFormat::CsvV1, false).unwrap();
        assert_eq!(parsed.pings, vec![ping("u1", 1_579_000_000, 33.75, -84.39)]);
        assert!(parsed.errors.is_empty());
    }

    #[test]
    fn empty_stream_is_empty() {
        for fmt in [PingRecordFormat::CsvV1, PingRecordFormat::JsonLines] {
            let parsed = parse_all(&b""[..], fmt, false).unwrap();
            assert!(parsed.pings.is_empty() && parsed.errors.is_empty());
        }
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let parsed = parse_all("u1,notanumber,33.75,-84.39\n".as_bytes(), PingRecordFormat::CsvV1, false).unwrap();
        assert!(parsed.pings.is_empty());
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].line, 1);
    }

    #[test]
    fn malformed_lines_do_not_abort() {
        let text = "user_id,timestamp,lat,lon\nu1,100,33.7,-84.3\nu2,100,95.0,-84.3\nu3,100,33.7\nu4,-5,33.7,-84.3\nu5,200,33.8,-84.2\n";
        let parsed = parse_all(text.as_bytes(), PingRecordFormat::CsvV1, true).unwrap();
        let ids: Vec<_> = parsed.pings.iter().map(|p| p.user_id.as_str()).collect();
        assert_eq!(ids, ["u1", "u5"]);
        let lines: Vec<_> = parsed.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, [3, 4, 5]);
    }

    #[test]
    fn parses_jsonl_with_errors() {
        let text = "{\"user_id\":\"a\",\"timestamp\":10,\"lat\":33.7,\"lon\":-84.4}\n\n{\"user_id\":7,\"timestamp\":11,\"lat\":33.7,\"lon\":-84.4}\nnot json\n";
        let parsed = parse_all(text.as_bytes(), PingRecordFormat::JsonLines, false).unwrap();
        assert_eq!(parsed.pings.len(), 2);
        assert_eq!(parsed.pings[1].user_id, "7");
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].line, 4);
    }

    #[test]
    fn non_utf8_csv_line_is_recoverable() {
        let mut bytes = b"u1,100,33.7,-84.3\n".to_vec();
        bytes.extend_from_slice(b"u\xff,100,33.7,-84.3\nu3,100,33.7,-84.3\n");
        let parsed = parse_all(&bytes[..], PingRecordFormat::CsvV1, false).unwrap();
        assert_eq!(parsed.pings.len(), 2);
        assert_eq!(parsed.errors[0].line, 2);
    }

    struct FailingReader;
    impl io::Read for FailingReader {
        fn read(&mut self, _: &mut [u8]) -> io::Result<usize> {
            Err(io::Error::other("disk on fire"))
        }
    }

    #[test]
    fn non_utf8_json_line_is_recoverable() {
        let mut bytes = b"{\"user_id\":\"\xff\",\"timestamp\":10,\"lat\":1.0,\"lon\":1.0}\n".to_vec();
        bytes.extend_from_slice(b"{\"user_id\":\"b\",\"timestamp\":10,\"lat\":1.0,\"lon\":1.0}\n");
        let parsed = parse_all(&bytes[..], PingRecordFormat::JsonLines, false).unwrap();
        assert_eq!(parsed.pings.len(), 1);
        assert_eq!(parsed.errors[0].line, 1);
    }

    #[test]
    fn unreadable_stream_is_fatal() {
        let r = io::BufReader::new(FailingReader);
        assert!(matches!(parse_all(r, PingRecordFormat::CsvV1, false), Err(IngestError::Io(_))));
        let r = io::BufReader::new(FailingReader);
        assert!(matches!(parse_all(r, PingRecordFormat::JsonLines, false), Err(IngestError::Io(_))));
    }

    #[test]
    fn filter_keeps_window_and_box() {
        let w = jan();
        let pings = vec![
            ping("a", local_ts(d(1, 15), 12, 0, -300), 33.75, -84.39),
            ping("a", local_ts(d(2, 1), 12, 0, -300), 33.75, -84.39),
            ping("a", local_ts(d(1, 15), 12, 0, -300), 35.0, -84.39),
        ];
        let kept: Vec<_> = filter_pings(pings.clone(), &bbox(), &w).collect();
        assert_eq!(kept, vec![pings[0].clone()]);
    }

    #[test]
    fn activity_counts_distinct_local_days() {
        let w = jan();
        let pings = vec![
            ping("a", local_ts(d(1, 1), 0, 10, -300), 33.75, -84.39),
            ping("a", local_ts(d(1, 1), 23, 50, -300), 33.75, -84.39),
        ];
        let stats = activity_stats(&pings, &w);
        assert_eq!(stats["a"].active_days, 1);
        assert_eq!(stats["a"].ping_count, 2);
        assert!(!stats.contains_key("b"));

        let many: Vec<_> = (1..=25).map(|day| ping("b", local_ts(d(1, day), 9, 0, -300), 33.7, -84.3)).collect();
        assert_eq!(activity_stats(&many, &w)["b"].active_days, 25);
    }

    fn activity(user: &str, label: &str, days: usize, pings: usize) -> UserActivity {
        UserActivity {
            user_id: user.into(),
            window_label: label.into(),
            active_days: days,
            ping_count: pings,
        }
    }

    fn stats_for(users: &[(&str, [usize; 3], usize)]) -> WindowActivity {
        let labels = ["pre", "lockdown", "post"];
        let mut out = WindowActivity::new();
        for (i, label) in labels.iter().enumerate() {
            let m = out.entry(label.to_string()).or_default();
            for (u, days, pings) in users {
                let p = if i == 0 { *pings } else { 100 };
                m.insert(u.to_string(), activity(u, label, days[i], p));
            }
        }
        out
    }

    #[test]
    fn cohort_thresholds() {
        let stats = stats_for(&[
            ("ok", [25, 25, 25], 400),
            ("low_apr", [25, 20, 25], 400),
            ("few_pings", [25, 25, 25], 299),
            ("exact_days", [24, 25, 25], 400),
            ("exact_pings", [25, 25, 25], 300),
            ("edge_ok", [25, 25, 25], 301),
        ]);
        let cohort = select_cohort(&stats, &CohortCriteria::default()).unwrap();
        assert_eq!(cohort, BTreeSet::from(["edge_ok".to_string(), "ok".to_string()]));
    }

    #[test]
    fn missing_baseline_is_config_error() {
        let stats = stats_for(&[("ok", [25, 25, 25], 400)]);
        let criteria = CohortCriteria {
            baseline_window_label: "jan".into(),
            ..Default::default()
        };
        assert!(matches!(select_cohort(&stats, &criteria), Err(IngestError::MissingBaseline(_))));
    }

    #[test]
    fn cohort_csv_round_trip() {
        let stats = stats_for(&[("ok", [25, 26, 27], 400)]);
        let cohort = select_cohort(&stats, &CohortCriteria::default()).unwrap();
        let labels: Vec<String> = ["pre", "lockdown", "post"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        write_cohort_csv(&mut buf, &cohort, &stats, &labels, "pre").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "user_id,active_days_pre,active_days_lockdown,active_days_post,baseline_pings\nok,25,26,27,400\n"
        );
        assert_eq!(read_cohort_csv(&buf[..]).unwrap(), cohort);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(raw in proptest::collection::vec((0u8..3, 1_577_000_000i64..1_581_000_000, 32.5f64..35.0, -85.5f64..-83.0), 0..60)) {
            let pings: Vec<_> = raw.iter().map(|(u, t, la, lo)| ping(&format!("u{u}"), *t, *la, *lo)).collect();
            let (b, w) = (bbox(), jan());
            let once: Vec<_> = filter_pings(pings, &b, &w).collect();
            let twice: Vec<_> = filter_pings(once.clone(), &b, &w).collect();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn cohort_monotone_under_relaxation(
            users in proptest::collection::vec(([20usize..30, 20..30, 20..30], 290usize..320), 1..30),
            relax_days in 0usize..5,
            relax_pings in 0usize..20,
        ) {
            let named: Vec<(String, [usize; 3], usize)> = users.iter().enumerate().map(|(i, (d, p))| (format!("u{i}"), *d, *p)).collect();
            let borrowed: Vec<(&str, [usize; 3], usize)> = named.iter().map(|(u, d, p)| (u.as_str(), *d, *p)).collect();
            let stats = stats_for(&borrowed);
            let strict = CohortCriteria::default();
            let relaxed = CohortCriteria {
                min_active_days_per_window: strict.min_active_days_per_window - relax_days,
                min_pings_baseline: strict.min_pings_baseline - relax_pings,
                ..strict.clone()
            };
            let a = select_cohort(&stats, &strict).unwrap();
            let b = select_cohort(&stats, &relaxed).unwrap();
            prop_assert!(a.is_subset(&b));
        }
    }
}
