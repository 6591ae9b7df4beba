//! Declarative run configuration, read from a TOML document. Relative paths
//! resolve against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorRules;
use crate::cluster::DbscanParams;
use crate::geo::{AnalysisWindow, BoundingBox};
use crate::geocode::RemoteConfig;
use crate::ingest::{CohortCriteria, PingRecordFormat};
use crate::synthgen::{default_bbox, default_windows, SynthConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing input {what}: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Ping file; when unset, the synth stage output is used.
    pub pings: Option<PathBuf>,
    pub format: PingRecordFormat,
    pub has_header: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            pings: None,
            format: PingRecordFormat::CsvV1,
            has_header: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub min_home_days: usize,
    pub min_work_days: usize,
    pub presence_radius: f64,
    /// Re-infer anchors inside every window instead of carrying the baseline
    /// anchors forward.
    pub recluster_per_window: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        let r = AnchorRules::<f64>::default();
        Self {
            min_home_days: r.min_home_days,
            min_work_days: r.min_work_days,
            presence_radius: r.presence_radius,
            recluster_per_window: false,
        }
    }
}

impl AnchorConfig {
    pub fn rules(&self) -> AnchorRules<f64> {
        AnchorRules {
            min_home_days: self.min_home_days,
            min_work_days: self.min_work_days,
            presence_radius: self.presence_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeocodeConfig {
    /// TSV of `lat lon name`.
    pub overrides: Option<PathBuf>,
    /// CSV of `name,lat,lon,category_hint`; defaults to the synth POIs when
    /// they exist.
    pub poi_db: Option<PathBuf>,
    /// JSON Lines cache; defaults to `geocode_cache.jsonl` in the output
    /// directory.
    pub cache: Option<PathBuf>,
    /// Remote reverse geocoding; disabled when absent.
    pub remote: Option<RemoteConfig>,
    pub max_poi_radius_m: f64,
}

impl Default for GeocodeConfig {
    fn default() -> Self {
        Self {
            overrides: None,
            poi_db: None,
            cache: None,
            remote: None,
            max_poi_radius_m: 100.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategorizeConfig {
    /// JSON keyword table; the built-in table is used when unset.
    pub keyword_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// CSV of `category,expected_pct`.
    pub naics: Option<PathBuf>,
    pub histogram_bin_km: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            naics: None,
            histogram_bin_km: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub bbox: BoundingBox<f64>,
    pub windows: Vec<AnalysisWindow>,
    pub cohort: CohortCriteria,
    pub dbscan: DbscanParams<f64>,
    pub anchors: AnchorConfig,
    pub geocode: GeocodeConfig,
    pub categorize: CategorizeConfig,
    pub report: ReportConfig,
    /// Generator settings; its box and windows come from the top level.
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            workers: 0,
            output_dir: PathBuf::from("out"),
            input: InputConfig::default(),
            bbox: default_bbox(),
            windows: default_windows(),
            cohort: CohortCriteria::default(),
            dbscan: DbscanParams::default(),
            anchors: AnchorConfig::default(),
            geocode: GeocodeConfig::default(),
            categorize: CategorizeConfig::default(),
            report: ReportConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        resolve(base, &mut self.input.pings);
        resolve(base, &mut self.geocode.overrides);
        resolve(base, &mut self.geocode.poi_db);
        resolve(base, &mut self.geocode.cache);
        resolve(base, &mut self.categorize.keyword_table);
        resolve(base, &mut self.report.naics);
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            bbox: self.bbox,
            windows: self.windows.clone(),
            ..self.synth.clone()
        }
    }

    pub fn baseline(&self) -> &AnalysisWindow {
        self.windows
            .iter()
            .find(|w| w.label == self.cohort.baseline_window_label)
            .expect("validated config has a baseline window")
    }

    /// Checks values and the existence of every explicitly configured input.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.bbox.validate().map_err(|e| invalid(&e))?;
        if self.windows.is_empty() {
            return Err(ConfigError::Invalid("at least one window is required".into()));
        }
        let mut labels = BTreeSet::new();
        for (i, w) in self.windows.iter().enumerate() {
            w.validate().map_err(|e| invalid(&e))?;
            if !labels.insert(w.label.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate window label {}", w.label)));
            }
            if let Some(o) = self.windows[..i].iter().find(|o| o.overlaps(w)) {
                return Err(ConfigError::Invalid(format!("windows {} and {} overlap", o.label, w.label)));
            }
        }
        if !labels.contains(self.cohort.baseline_window_label.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "baseline window {} is not configured",
                self.cohort.baseline_window_label
            )));
        }
        self.cohort.validate().map_err(|e| invalid(&e))?;
        self.dbscan.validate().map_err(|e| invalid(&e))?;
        self.anchors.rules().validate().map_err(|e| invalid(&e))?;
        if self.geocode.max_poi_radius_m.is_nan() || self.geocode.max_poi_radius_m < 0.0 {
            return Err(ConfigError::Invalid("max_poi_radius_m must be non-negative".into()));
        }
        if !(self.report.histogram_bin_km > 0.0 && self.report.histogram_bin_km.is_finite()) {
            return Err(ConfigError::Invalid("histogram_bin_km must be positive".into()));
        }
        self.synth_config().validate().map_err(|e| invalid(&e))?;
        let inputs = [
            ("input.pings", &self.input.pings),
            ("geocode.overrides", &self.geocode.overrides),
            ("geocode.poi_db", &self.geocode.poi_db),
            ("categorize.keyword_table", &self.categorize.keyword_table),
            ("report.naics", &self.report.naics),
        ];
        for (what, path) in inputs {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(ConfigError::MissingPath { what, path: p.clone() });
                }
            }
        }
        Ok(())
    }

    /// The config as embedded in reports: everything except settings that
    /// must not change results (worker count, output location).
    pub fn reproducibility_record(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
            m.remove("output_dir");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
workers = 2
output_dir = "results"

[input]
format = "json_lines"

[bbox]
min_lat = 33.0
max_lat = 34.5
min_lon = -85.0
max_lon = -83.5

[[windows]]
label = "pre"
start_day = "2020-01-01"
end_day = "2020-01-31"
utc_offset_minutes = -300

[[windows]]
label = "lockdown"
start_day = "2020-04-01"
end_day = "2020-04-30"
utc_offset_minutes = -240

[anchors]
recluster_per_window = true

[geocode.remote]
base_url = "http://127.0.0.1:9/reverse"

[synth]
users = 20
"#;

    #[test]
    fn parses_and_resolves() {
        let mut cfg = RunConfig::from_toml(SAMPLE, Path::new("x.toml")).unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.output_dir, PathBuf::from("/base/results"));
        assert_eq!(cfg.input.format, PingRecordFormat::JsonLines);
        assert_eq!(cfg.windows.len(), 2);
        assert!(cfg.anchors.recluster_per_window);
        assert_eq!(cfg.anchors.min_home_days, 18);
        let remote = cfg.geocode.remote.as_ref().unwrap();
        assert_eq!(remote.min_request_interval_ms, 1000);
        assert_eq!(cfg.synth.users, 20);
        assert_eq!(cfg.synth_config().windows, cfg.windows);
        cfg.validate().unwrap();
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let round = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_toml(&round, Path::new("x")).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = RunConfig::default();
        c.windows[1].start_day = c.windows[0].end_day;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));

        let mut c = RunConfig::default();
        c.cohort.baseline_window_label = "jan".into();
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.input.pings = Some("/definitely/not/here.csv".into());
        assert!(matches!(c.validate(), Err(ConfigError::MissingPath { .. })));

        assert!(RunConfig::from_toml("sed = 1", Path::new("x")).is_err());
    }

    #[test]
    fn record_omits_run_location() {
        let a = RunConfig::default();
        let b = RunConfig {
            workers: 4,
            output_dir: "/elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.reproducibility_record(), b.reproducibility_record());
        assert!(a.reproducibility_record().get("seed").is_some());
    }
}
