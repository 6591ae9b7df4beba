//! Workplace name resolution for work anchors.
//!
//! Tiers are tried in order: manual override, response cache, remote
//! reverse-geocoding service, nearest point of interest. The first nonempty
//! name wins. Every anchor produces exactly one [`WorkplaceRecord`], possibly
//! `Unresolved`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_km, GeoPoint, EARTH_RADIUS_KM};

type Point = GeoPoint<f64>;

#[derive(Debug, Error)]
pub enum GeocodeError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{what} line {line}: {message}")]
    Malformed { what: &'static str, line: usize, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("service answered HTTP {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl RemoteError {
    /// Failures worth retrying on a later run; their outcome is not cached.
    pub fn is_transient(&self) -> bool {
        match self {
            RemoteError::Transport(_) => true,
            RemoteError::Status(s) => *s == 429 || *s >= 500,
            RemoteError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResolutionSource {
    RemoteApi,
    PoiDb,
    ManualOverride,
    Unresolved,
}

impl ResolutionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ResolutionSource::RemoteApi => "RemoteApi",
            ResolutionSource::PoiDb => "PoiDb",
            ResolutionSource::ManualOverride => "ManualOverride",
            ResolutionSource::Unresolved => "Unresolved",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::RemoteApi, Self::PoiDb, Self::ManualOverride, Self::Unresolved]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkplaceRecord {
    pub user_id: String,
    pub anchor: Point,
    /// Empty exactly when `source` is `Unresolved`.
    pub name: String,
    pub source: ResolutionSource,
    pub category_hint: Option<String>,
}

/// Cache and override key: both coordinates rounded to 5 decimals.
pub fn quantize_key(p: &Point) -> String {
    let q = |v: f64| {
        let s = format!("{v:.5}");
        if s == "-0.00000" {
            "0.00000".to_string()
        } else {
            s
        }
    };
    format!("{},{}", q(p.lat), q(p.lon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiEntry {
    pub name: String,
    pub point: Point,
    pub category_hint: Option<String>,
}

/// Points of interest sorted by latitude; lookups scan a latitude band.
#[derive(Debug, Clone, Default)]
pub struct PoiDb {
    entries: Vec<PoiEntry>,
}

impl PoiDb {
    pub fn new(mut entries: Vec<PoiEntry>) -> Result<Self, GeocodeError> {
        for (i, e) in entries.iter().enumerate() {
            if e.name.trim().is_empty() || !e.point.is_valid() {
                return Err(GeocodeError::Malformed {
                    what: "poi",
                    line: i + 1,
                    message: "empty name or invalid coordinate".into(),
                });
            }
        }
        entries.sort_by(|a, b| a.point.lex_cmp(&b.point).then_with(|| a.name.cmp(&b.name)));
        Ok(Self { entries })
    }

    /// Reads `name,lat,lon,category_hint` with a header line.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, GeocodeError> {
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
        let mut entries = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |message: String| GeocodeError::Malformed { what: "poi", line, message };
            if rec.len() < 3 {
                return Err(bad("expected name,lat,lon[,category_hint]".into()));
            }
            let coord = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| bad(e.to_string()));
            let point = GeoPoint::new(coord(1)?, coord(2)?).map_err(|e| bad(e.to_string()))?;
            let hint = rec.get(3).map(str::trim).filter(|h| !h.is_empty()).map(String::from);
            entries.push(PoiEntry {
                name: rec[0].trim().to_string(),
                point,
                category_hint: hint,
            });
        }
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Closest entry by great-circle distance within `max_radius_m`; equal
    /// distances resolve to the lexicographically smaller name.
    pub fn nearest(&self, anchor: &Point, max_radius_m: f64) -> Option<&PoiEntry> {
        let max_km = max_radius_m / 1000.0;
        // a degree of latitude is the shortest arc a degree can span
        let band = max_km / (EARTH_RADIUS_KM * std::f64::consts::PI / 180.0) * 1.001 + 1e-9;
        let start = self.entries.partition_point(|e| e.point.lat < anchor.lat - band);
        self.entries[start..]
            .iter()
            .take_while(|e| e.point.lat <= anchor.lat + band)
            .map(|e| (haversine_km(anchor, &e.point), e))
            .filter(|(d, _)| *d <= max_km)
            .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.name.cmp(&b.name)))
            .map(|(_, e)| e)
    }
}

/// Free-function form of [`PoiDb::nearest`] returning `(name, category_hint)`.
pub fn poi_nearest(db: &PoiDb, anchor: &Point, max_radius_m: f64) -> Option<(String, Option<String>)> {
    db.nearest(anchor, max_radius_m)
        .map(|e| (e.name.clone(), e.category_hint.clone()))
}

/// Reads tab-separated `lat, lon, name` overrides. A first line whose
/// latitude does not parse is treated as a header.
pub fn load_overrides<R: BufRead>(input: R) -> Result<HashMap<String, String>, GeocodeError> {
    let mut out = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| GeocodeError::Malformed {
            what: "override",
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.splitn(3, '\t').collect();
        if cols.len() != 3 {
            return Err(bad("expected lat<TAB>lon<TAB>name".into()));
        }
        let lat = match cols[0].trim().parse::<f64>() {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(bad(e.to_string())),
        };
        let lon = cols[1].trim().parse::<f64>().map_err(|e| bad(e.to_string()))?;
        let name = cols[2].trim();
        if name.is_empty() {
            return Err(bad("empty name".into()));
        }
        out.insert(quantize_key(&GeoPoint { lat, lon }), name.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub name: String,
    pub source: ResolutionSource,
    pub category_hint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    name: String,
    source: ResolutionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_hint: Option<String>,
}

/// Resolved names by quantized key. Existing keys are never overwritten.
#[derive(Debug, Default)]
pub struct GeocodeCache {
    entries: RwLock<BTreeMap<String, CacheEntry>>,
}

impl GeocodeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_jsonl<R: BufRead>(input: R) -> Result<Self, GeocodeError> {
        let mut map = BTreeMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(&line).map_err(|e| GeocodeError::Malformed {
                what: "cache",
                line: i + 1,
                message: e.to_string(),
            })?;
            map.entry(rec.key).or_insert(CacheEntry {
                name: rec.name,
                source: rec.source,
                category_hint: rec.category_hint,
            });
        }
        Ok(Self {
            entries: RwLock::new(map),
        })
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    /// Returns false when the key was already present.
    pub fn insert(&self, key: String, entry: CacheEntry) -> bool {
        let mut map = self.entries.write().expect("cache lock");
        if map.contains_key(&key) {
            return false;
        }
        map.insert(key, entry);
        true
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every entry, sorted by key.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), GeocodeError> {
        let map = self.entries.read().expect("cache lock");
        for (key, e) in map.iter() {
            let line = CacheLine {
                key: key.clone(),
                name: e.name.clone(),
                source: e.source,
                category_hint: e.category_hint.clone(),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Serializes calls and starts each one at least `interval` after the
/// previous call finished, so the far end never sees two requests closer
/// than `interval`.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        Self {
            interval,
            last: Mutex::new(None),
        }
    }

    pub fn run<R>(&self, f: impl FnOnce() -> R) -> R {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let ready = prev + self.interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        let out = f();
        *last = Some(Instant::now());
        out
    }
}

/// A reverse geocoder: coordinate in, facility name out.
pub trait ReverseLookup: Send + Sync {
    fn reverse(&self, anchor: &Point) -> Result<Option<String>, RemoteError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub min_request_interval_ms: u64,
    pub timeout_ms: u64,
    pub user_agent: String,
    /// Dotted JSON paths tried in order; the first nonempty string wins.
    pub name_fields: Vec<String>,
    /// Additional fixed query parameters.
    pub extra_params: BTreeMap<String, String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://nominatim.openstreetmap.org/reverse".into(),
            min_request_interval_ms: 1000,
            timeout_ms: 10_000,
            user_agent: concat!("commuter/", env!("CARGO_PKG_VERSION")).into(),
            name_fields: vec![
                "name".into(),
                "address.amenity".into(),
                "address.building".into(),
                "address.shop".into(),
            ],
            extra_params: BTreeMap::new(),
        }
    }
}

/// First nonempty string found at one of the dotted `paths`.
pub fn extract_name(doc: &serde_json::Value, paths: &[String]) -> Option<String> {
    paths.iter().find_map(|path| {
        let v = path.split('.').try_fold(doc, |v, seg| v.get(seg))?;
        v.as_str().map(str::trim).filter(|s| !s.is_empty()).map(String::from)
    })
}

/// Blocking HTTP client for a Nominatim-style reverse endpoint.
pub struct HttpReverse {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

impl HttpReverse {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .user_agent(cfg.user_agent.as_str())
            .build()
            .into();
        let limiter = RateLimiter::new(Duration::from_millis(cfg.min_request_interval_ms));
        Self { cfg, agent, limiter }
    }

    fn request(&self, anchor: &Point) -> Result<Option<String>, RemoteError> {
        let mut req = self
            .agent
            .get(&self.cfg.base_url)
            .query("lat", anchor.lat.to_string())
            .query("lon", anchor.lon.to_string())
            .query("format", "json");
        for (k, v) in &self.cfg.extra_params {
            req = req.query(k, v);
        }
        let mut resp = req.call().map_err(|e| RemoteError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(RemoteError::Status(status));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| RemoteError::Transport(e.to_string()))?;
        let doc: serde_json::Value = serde_json::from_str(&body).map_err(|e| RemoteError::Malformed(e.to_string()))?;
        if !doc.is_object() {
            return Err(RemoteError::Malformed("response is not a JSON object".into()));
        }
        Ok(extract_name(&doc, &self.cfg.name_fields))
    }
}

impl ReverseLookup for HttpReverse {
    fn reverse(&self, anchor: &Point) -> Result<Option<String>, RemoteError> {
        self.limiter.run(|| self.request(anchor))
    }
}

/// One lookup with failures logged and folded into "no name".
pub fn remote_reverse(anchor: &Point, client: &dyn ReverseLookup) -> Option<String> {
    match client.reverse(anchor) {
        Ok(name) => name,
        Err(e) => {
            log::warn!("reverse lookup for {anchor} failed: {e}");
            None
        }
    }
}

pub struct Resolver {
    pub overrides: HashMap<String, String>,
    pub cache: GeocodeCache,
    pub remote: Option<Box<dyn ReverseLookup>>,
    pub poi: Option<PoiDb>,
    pub max_poi_radius_m: f64,
}

impl Default for Resolver {
    fn default() -> Self {
        Self {
            overrides: HashMap::new(),
            cache: GeocodeCache::new(),
            remote: None,
            poi: None,
            max_poi_radius_m: 100.0,
        }
    }
}

impl Resolver {
    pub fn resolve(&self, user_id: &str, anchor: &Point) -> WorkplaceRecord {
        let record = |name: String, source, category_hint| WorkplaceRecord {
            user_id: user_id.to_string(),
            anchor: *anchor,
            name,
            source,
            category_hint,
        };
        let key = quantize_key(anchor);
        if let Some(name) = self.overrides.get(&key) {
            return record(name.clone(), ResolutionSource::ManualOverride, None);
        }
        if let Some(hit) = self.cache.get(&key) {
            return record(hit.name, hit.source, hit.category_hint);
        }

        let mut transient = false;
        let mut found = None;
        if let Some(remote) = &self.remote {
            match remote.reverse(anchor) {
                Ok(Some(name)) => found = Some((name, ResolutionSource::RemoteApi, None)),
                Ok(None) => {}
                Err(e) => {
                    log::warn!("reverse lookup for {anchor} failed: {e}");
                    transient = e.is_transient();
                }
            }
        }
        if found.is_none() {
            if let Some(poi) = self.poi.as_ref().and_then(|db| db.nearest(anchor, self.max_poi_radius_m)) {
                found = Some((poi.name.clone(), ResolutionSource::PoiDb, poi.category_hint.clone()));
            }
        }
        let (name, source, hint) = found.unwrap_or((String::new(), ResolutionSource::Unresolved, None));
        if !transient {
            self.cache.insert(
                key,
                CacheEntry {
                    name: name.clone(),
                    source,
                    category_hint: hint.clone(),
                },
            );
        }
        record(name, source, hint)
    }

    /// Resolves in parallel, preserving input order.
    pub fn resolve_all(&self, anchors: &[(String, Point)]) -> Vec<WorkplaceRecord> {
        anchors.par_iter().map(|(u, p)| self.resolve(u, p)).collect()
    }
}

const WORKPLACE_HEADER: [&str; 6] = ["user_id", "lat", "lon", "name", "source", "category_hint"];

pub fn write_workplaces_csv<W: Write>(out: W, records: &[WorkplaceRecord]) -> Result<(), GeocodeError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WORKPLACE_HEADER)?;
    for r in records {
        w.write_record([
            r.user_id.as_str(),
            &r.anchor.lat.to_string(),
            &r.anchor.lon.to_string(),
            &r.name,
            r.source.as_str(),
            r.category_hint.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_workplaces_csv<R: Read>(input: R) -> Result<Vec<WorkplaceRecord>, GeocodeError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| GeocodeError::Malformed {
            what: "workplace",
            line: i + 2,
            message,
        };
        if rec.len() != WORKPLACE_HEADER.len() {
            return Err(bad("wrong field count".into()));
        }
        let coord = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(e.to_string()));
        let source = ResolutionSource::parse(&rec[4]).ok_or_else(|| bad(format!("unknown source '{}'", &rec[4])))?;
        out.push(WorkplaceRecord {
            user_id: rec[0].to_string(),
            anchor: GeoPoint::new(coord(1)?, coord(2)?).map_err(|e| bad(e.to_string()))?,
            name: rec[3].to_string(),
            source,
            category_hint: Some(rec[5].to_string()).filter(|h| !h.is_empty()),
        });
    }
    Ok(out)
}
