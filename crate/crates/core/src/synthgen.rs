//! Synthetic ping corpora with planted homes, workplaces, categories and
//! per-window attendance, plus scoring of inferred results against them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, Weekday};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorPair;
use crate::categorize::Category;
use crate::geo::{haversine_km, local_midnight_utc, AnalysisWindow, BoundingBox, GeoPoint, Ping, EARTH_RADIUS_KM};

const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("inferred user {0} is not in the ground truth")]
    UnknownUser(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed ground truth row {row}: {message}")]
    Malformed { row: usize, message: String },
}

/// Per-window attendance behavior. Windows past the end of
/// `attend_work_prob` reuse its last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPreset {
    pub name: String,
    pub attend_work_prob: Vec<f64>,
    pub weekend_out_prob: f64,
}

impl TrajectoryPreset {
    pub fn sudden_drop() -> Self {
        Self::named("sudden-drop", vec![0.95, 0.03, 0.08])
    }

    pub fn partial_rebound() -> Self {
        Self::named("partial-rebound", vec![0.95, 0.2, 0.6])
    }

    pub fn resilient() -> Self {
        Self::named("resilient", vec![0.95, 0.75, 0.8])
    }

    fn named(name: &str, attend_work_prob: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            attend_work_prob,
            weekend_out_prob: 0.5,
        }
    }

    /// Default preset for a workplace category.
    pub fn for_category(category: Category) -> Self {
        use Category::*;
        match category {
            WhiteCollar | Education | Entertainment | Hotel | Government | Airport => Self::sudden_drop(),
            BlueCollar | Medical => Self::resilient(),
            _ => Self::partial_rebound(),
        }
    }

    pub fn attend_prob(&self, window_index: usize) -> f64 {
        self.attend_work_prob
            .get(window_index)
            .or(self.attend_work_prob.last())
            .copied()
            .unwrap_or(0.0)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if self.attend_work_prob.is_empty() || !self.attend_work_prob.iter().all(|p| ok(*p)) || !ok(self.weekend_out_prob) {
            return Err(SynthError::Config(format!("preset {} has probabilities outside [0, 1]", self.name)));
        }
        Ok(())
    }
}

/// Behavior of one category in one window, resolved from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    pub category: Category,
    pub window_label: String,
    pub attend_work_prob: f64,
    pub weekend_out_prob: f64,
    pub pings_per_day: [u32; 2],
    pub jitter_sigma: f64,
}

/// Category sizes of the reference cohort, used as default sampling weights.
pub fn default_category_weights() -> BTreeMap<Category, f64> {
    use Category::*;
    BTreeMap::from([
        (Mix, 385.0),
        (Retail, 203.0),
        (WhiteCollar, 187.0),
        (Education, 156.0),
        (Medical, 130.0),
        (Restaurant, 90.0),
        (Residential, 70.0),
        (BlueCollar, 59.0),
        (Hotel, 51.0),
        (Government, 30.0),
        (Religion, 28.0),
        (Recreation, 16.0),
        (Airport, 14.0),
        (Entertainment, 9.0),
    ])
}

pub fn default_windows() -> Vec<AnalysisWindow> {
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
    vec![
        AnalysisWindow::new("pre", d(2020, 1, 1), d(2020, 1, 31), -300).expect("valid window"),
        AnalysisWindow::new("lockdown", d(2020, 4, 1), d(2020, 4, 30), -240).expect("valid window"),
        AnalysisWindow::new("post", d(2020, 7, 1), d(2020, 7, 31), -240).expect("valid window"),
    ]
}

pub fn default_bbox() -> BoundingBox<f64> {
    BoundingBox {
        min_lat: 33.45,
        max_lat: 34.15,
        min_lon: -84.75,
        max_lon: -84.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    #[serde(skip)]
    pub bbox: BoundingBox<f64>,
    #[serde(skip)]
    pub windows: Vec<AnalysisWindow>,
    /// Inclusive range of pings per user per day.
    pub pings_per_day: [u32; 2],
    /// Standard deviation of the Gaussian jitter around anchors, in degrees.
    pub jitter_sigma: f64,
    pub min_separation_km: f64,
    pub max_separation_km: f64,
    /// Expected uniform background pings per user per day.
    pub noise_per_day: f64,
    pub category_weights: BTreeMap<Category, f64>,
    /// Replaces the default preset of the listed categories.
    pub presets: BTreeMap<Category, TrajectoryPreset>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 500,
            bbox: default_bbox(),
            windows: default_windows(),
            pings_per_day: [10, 16],
            jitter_sigma: 0.0002,
            min_separation_km: 1.5,
            max_separation_km: 30.0,
            noise_per_day: 0.3,
            category_weights: default_category_weights(),
            presets: BTreeMap::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        self.bbox.validate().map_err(|e| SynthError::Config(e.to_string()))?;
        if self.windows.is_empty() {
            return bad("at least one window is required".into());
        }
        for w in &self.windows {
            w.validate().map_err(|e| SynthError::Config(e.to_string()))?;
        }
        let [lo, hi] = self.pings_per_day;
        if lo < 4 || lo > hi {
            return bad(format!("pings_per_day range [{lo}, {hi}] must satisfy 4 <= min <= max"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be non-negative".into());
        }
        let jitter_km = 6.0 * self.jitter_sigma * KM_PER_DEGREE;
        if self.min_separation_km <= jitter_km {
            return bad(format!(
                "min_separation_km {} puts work inside the home jitter radius ({jitter_km:.3} km)",
                self.min_separation_km
            ));
        }
        if self.max_separation_km < self.min_separation_km {
            return bad("max_separation_km is below min_separation_km".into());
        }
        let margin = self.margin_deg();
        let span_km = (self.bbox.max_lat - self.bbox.min_lat - 2.0 * margin) * KM_PER_DEGREE;
        if span_km < 2.0 * self.min_separation_km {
            return bad("bounding box is too small for the separation range".into());
        }
        if !(0.0..=1.0).contains(&self.noise_per_day) {
            return bad("noise_per_day must be within [0, 1]".into());
        }
        let weights: Vec<f64> = self.category_weights.values().copied().collect();
        if self.category_weights.contains_key(&Category::Other)
            || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || !weights.iter().any(|w| *w > 0.0)
        {
            return bad("category_weights need a positive weight and may not include Other".into());
        }
        for p in self.presets.values() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn preset(&self, category: Category) -> TrajectoryPreset {
        self.presets
            .get(&category)
            .cloned()
            .unwrap_or_else(|| TrajectoryPreset::for_category(category))
    }

    pub fn profile(&self, category: Category, window_index: usize) -> BehaviorProfile {
        let preset = self.preset(category);
        BehaviorProfile {
            category,
            window_label: self.windows[window_index].label.clone(),
            attend_work_prob: preset.attend_prob(window_index),
            weekend_out_prob: preset.weekend_out_prob,
            pings_per_day: self.pings_per_day,
            jitter_sigma: self.jitter_sigma,
        }
    }

    fn margin_deg(&self) -> f64 {
        (10.0 * self.jitter_sigma).max(0.001)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user_id: String,
    pub home: GeoPoint<f64>,
    pub work: GeoPoint<f64>,
    pub category: Category,
    pub preset: String,
    pub workplace_name: String,
    /// Attended workdays per window label.
    pub attended: BTreeMap<String, BTreeSet<NaiveDate>>,
}

impl PlantedUser {
    pub fn attended_count(&self, label: &str) -> usize {
        self.attended.get(label).map_or(0, BTreeSet::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub users: Vec<PlantedUser>,
    /// Sorted by user, then timestamp.
    pub pings: Vec<Ping<f64>>,
}

const NAME_STEMS: [&str; 12] = [
    "Peachtree", "Oakwood", "Riverside", "Summit", "Magnolia", "Piedmont", "Lakeside", "Maple", "Cedar", "Willow",
    "Chattahoochee", "Ponce",
];

fn name_suffixes(category: Category) -> &'static [&'static str] {
    use Category::*;
    match category {
        Medical => &["Hospital", "Medical Center", "Dental Care", "Urgent Care"],
        Airport => &["Airport", "Aviation Terminal"],
        Education => &["University", "Elementary School", "Academy", "College"],
        Government => &["City Hall", "County Courthouse", "Post Office"],
        Religion => &["Baptist Church", "Temple", "Chapel"],
        Entertainment => &["Stadium", "Cinema", "Museum"],
        Hotel => &["Hotel", "Inn", "Suites"],
        Restaurant => &["Taco", "Pizza", "Diner", "Grill"],
        Recreation => &["Golf Club", "Tennis Center", "Greenway"],
        Residential => &["Apartments", "Townhomes", "Lofts"],
        Retail => &["Market", "Outlet Mall", "Grocery"],
        BlueCollar => &["Warehouse", "Auto Repair", "Manufacturing"],
        WhiteCollar => &["Office Tower", "Financial Group", "Insurance"],
        Mix => &["Enterprises LLC", "Services Inc", "Solutions"],
        Other => &["Place"],
    }
}

/// A workplace name that the shipped keyword table assigns to `category`.
pub fn workplace_name(category: Category, rng: &mut impl Rng) -> String {
    let stem = NAME_STEMS[rng.random_range(0..NAME_STEMS.len())];
    let suffixes = name_suffixes(category);
    format!("{stem} {}", suffixes[rng.random_range(0..suffixes.len())])
}

fn uniform_in(bbox: &BoundingBox<f64>, margin: f64, rng: &mut impl Rng) -> GeoPoint<f64> {
    GeoPoint {
        lat: rng.random_range(bbox.min_lat + margin..bbox.max_lat - margin),
        lon: rng.random_range(bbox.min_lon + margin..bbox.max_lon - margin),
    }
}

/// Places work at a random bearing and distance from home, retrying until it
/// lands inside the box.
fn place_work(cfg: &SynthConfig, home: GeoPoint<f64>, rng: &mut impl Rng) -> GeoPoint<f64> {
    let margin = cfg.margin_deg();
    loop {
        let km = rng.random_range(cfg.min_separation_km..=cfg.max_separation_km);
        let bearing = rng.random_range(0.0..std::f64::consts::TAU);
        let dlat = km * bearing.cos() / KM_PER_DEGREE;
        let dlon = km * bearing.sin() / (KM_PER_DEGREE * home.lat.to_radians().cos());
        let work = GeoPoint {
            lat: home.lat + dlat,
            lon: home.lon + dlon,
        };
        let inside = work.lat > cfg.bbox.min_lat + margin
            && work.lat < cfg.bbox.max_lat - margin
            && work.lon > cfg.bbox.min_lon + margin
            && work.lon < cfg.bbox.max_lon - margin;
        if inside && haversine_km(&home, &work) >= cfg.min_separation_km {
            return work;
        }
    }
}

struct DayWriter<'a> {
    user_id: &'a str,
    bbox: &'a BoundingBox<f64>,
    jitter: Option<Normal<f64>>,
    midnight: i64,
    out: &'a mut Vec<Ping<f64>>,
}

impl DayWriter<'_> {
    fn emit(&mut self, rng: &mut impl Rng, center: GeoPoint<f64>, hours: (u32, u32), jitter: bool) {
        let (dlat, dlon) = match (&self.jitter, jitter) {
            (Some(n), true) => (n.sample(rng), n.sample(rng)),
            _ => (0.0, 0.0),
        };
        let point = self.bbox.clamp(GeoPoint {
            lat: center.lat + dlat,
            lon: center.lon + dlon,
        });
        let second = rng.random_range(i64::from(hours.0) * 3600..i64::from(hours.1) * 3600);
        self.out.push(Ping {
            user_id: self.user_id.to_string(),
            timestamp: self.midnight + second,
            point,
        });
    }

    fn emit_home(&mut self, rng: &mut impl Rng, home: GeoPoint<f64>) {
        let hours = if rng.random_bool(0.5) { (0, 7) } else { (19, 24) };
        self.emit(rng, home, hours, true);
    }
}

fn is_weekend(d: NaiveDate) -> bool {
    matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

fn user_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate_user(cfg: &SynthConfig, seed: u64, index: usize, width: usize, cats: &[Category], weights: &WeightedIndex<f64>) -> (PlantedUser, Vec<Ping<f64>>) {
    let mut rng = user_rng(seed, index);
    let user_id = format!("u{:0width$}", index + 1);
    let category = cats[weights.sample(&mut rng)];
    let preset = cfg.preset(category);
    let home = uniform_in(&cfg.bbox, cfg.margin_deg(), &mut rng);
    let work = place_work(cfg, home, &mut rng);
    let workplace_name = workplace_name(category, &mut rng);
    let jitter = (cfg.jitter_sigma > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma).expect("finite sigma"));

    let mut pings = Vec::new();
    let mut attended = BTreeMap::new();
    for (wi, window) in cfg.windows.iter().enumerate() {
        let attend_p = preset.attend_prob(wi);
        let mut days = BTreeSet::new();
        for day in window.days() {
            let mut w = DayWriter {
                user_id: &user_id,
                bbox: &cfg.bbox,
                jitter,
                midnight: local_midnight_utc(day, window.utc_offset_minutes),
                out: &mut pings,
            };
            let n = rng.random_range(cfg.pings_per_day[0]..=cfg.pings_per_day[1]);
            let mut home_n = n;
            if is_weekend(day) {
                if rng.random_bool(preset.weekend_out_prob) {
                    let spot = uniform_in(&cfg.bbox, cfg.margin_deg(), &mut rng);
                    let out_n = rng.random_range(1..=3);
                    for _ in 0..out_n {
                        w.emit(&mut rng, spot, (10, 18), true);
                    }
                    home_n -= out_n;
                }
            } else if rng.random_bool(attend_p) {
                days.insert(day);
                let work_n = n / 2;
                for _ in 0..work_n {
                    w.emit(&mut rng, work, (9, 17), true);
                }
                home_n -= work_n;
            }
            for _ in 0..home_n {
                w.emit_home(&mut rng, home);
            }
            if rng.random_bool(cfg.noise_per_day) {
                let p = uniform_in(&cfg.bbox, 0.0, &mut rng);
                w.emit(&mut rng, p, (0, 24), false);
            }
        }
        attended.insert(window.label.clone(), days);
    }
    pings.sort_by_key(|p| p.timestamp);
    let user = PlantedUser {
        user_id,
        home,
        work,
        category,
        preset: preset.name,
        workplace_name,
        attended,
    };
    (user, pings)
}

/// Generates a corpus. Output depends only on `cfg` and `seed`.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let (cats, ws): (Vec<Category>, Vec<f64>) = cfg.category_weights.iter().map(|(c, w)| (*c, *w)).unzip();
    let weights = WeightedIndex::new(ws).map_err(|e| SynthError::Config(e.to_string()))?;
    let width = cfg.users.max(1).to_string().len();
    let per_user: Vec<_> = (0..cfg.users)
        .into_par_iter()
        .map(|i| generate_user(cfg, seed, i, width, &cats, &weights))
        .collect();
    let mut users = Vec::with_capacity(per_user.len());
    let mut pings = Vec::new();
    for (u, p) in per_user {
        users.push(u);
        pings.extend(p);
    }
    Ok(SynthCorpus { users, pings })
}

pub fn write_ground_truth<W: Write>(out: W, users: &[PlantedUser], windows: &[AnalysisWindow]) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["user_id", "home_lat", "home_lon", "work_lat", "work_lon", "category", "preset"]
        .map(String::from)
        .to_vec();
    header.extend(windows.iter().map(|w| format!("attended_{}", w.label)));
    w.write_record(&header)?;
    for u in users {
        let mut row = vec![
            u.user_id.clone(),
            u.home.lat.to_string(),
            u.home.lon.to_string(),
            u.work.lat.to_string(),
            u.work.lon.to_string(),
            u.category.to_string(),
            u.preset.clone(),
        ];
        row.extend(windows.iter().map(|w| u.attended_count(&w.label).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Ground truth as read back from disk: attendance is only a count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub user_id: String,
    pub home: GeoPoint<f64>,
    pub work: GeoPoint<f64>,
    pub category: Category,
    pub preset: String,
    pub attended: BTreeMap<String, usize>,
}

impl From<&PlantedUser> for TruthRow {
    fn from(u: &PlantedUser) -> Self {
        Self {
            user_id: u.user_id.clone(),
            home: u.home,
            work: u.work,
            category: u.category,
            preset: u.preset.clone(),
            attended: u.attended.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        }
    }
}

pub fn read_ground_truth<R: Read>(input: R) -> Result<Vec<TruthRow>, SynthError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let labels: Vec<String> = header
        .iter()
        .skip(7)
        .map(|h| h.strip_prefix("attended_").unwrap_or(h).to_string())
        .collect();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| SynthError::Malformed { row: i + 2, message };
        let f = |k: usize| -> Result<f64, SynthError> { rec[k].parse().map_err(|e| bad(format!("column {}: {e}", &header[k]))) };
        let attended = labels
            .iter()
            .enumerate()
            .map(|(j, l)| rec[7 + j].parse().map(|n| (l.clone(), n)).map_err(|e| bad(format!("{l}: {e}"))))
            .collect::<Result<_, _>>()?;
        out.push(TruthRow {
            user_id: rec[0].to_string(),
            home: GeoPoint { lat: f(1)?, lon: f(2)? },
            work: GeoPoint { lat: f(3)?, lon: f(4)? },
            category: rec[5].parse().map_err(|e| bad(format!("{e}")))?,
            preset: rec[6].to_string(),
            attended,
        });
    }
    Ok(out)
}

/// One named POI per planted workplace, for the offline geocode tier.
pub fn write_pois<W: Write>(out: W, users: &[PlantedUser]) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "lat", "lon", "category_hint"])?;
    for u in users {
        w.write_record([u.workplace_name.as_str(), &u.work.lat.to_string(), &u.work.lon.to_string(), ""])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// What the pipeline inferred for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredUser {
    pub anchors: AnchorPair<f64>,
    pub category: Option<Category>,
    /// Work-anchor workday presence per window label.
    pub workdays: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub users: usize,
    pub home_recovered: usize,
    /// Work within tolerance when expected, or correctly absent.
    pub work_recovered: usize,
    pub both_recovered: usize,
    pub mean_home_error_km: Option<f64>,
    pub mean_work_error_km: Option<f64>,
    pub category_correct: usize,
    pub category_scored: usize,
    pub workday_mae: BTreeMap<String, f64>,
}

impl RecoveryReport {
    pub fn recovery_rate(&self) -> f64 {
        if self.users == 0 {
            1.0
        } else {
            self.both_recovered as f64 / self.users as f64
        }
    }

    pub fn category_accuracy(&self) -> f64 {
        if self.category_scored == 0 {
            1.0
        } else {
            self.category_correct as f64 / self.category_scored as f64
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores inferred anchors against ground truth. A work anchor is expected
/// iff the user attended at least `min_work_days` in `baseline`; positions
/// count as recovered within `tolerance_deg` (degree-space distance).
pub fn score(
    inferred: &[InferredUser],
    truth: &[TruthRow],
    baseline: &str,
    min_work_days: usize,
    tolerance_deg: f64,
) -> Result<RecoveryReport, SynthError> {
    let by_id: BTreeMap<&str, &TruthRow> = truth.iter().map(|t| (t.user_id.as_str(), t)).collect();
    let mut found: BTreeMap<&str, &InferredUser> = BTreeMap::new();
    for inf in inferred {
        let id = inf.anchors.user_id.as_str();
        if !by_id.contains_key(id) {
            return Err(SynthError::UnknownUser(id.to_string()));
        }
        found.insert(id, inf);
    }
    let labels: BTreeSet<&String> = truth.iter().flat_map(|t| t.attended.keys()).collect();
    let mut report = RecoveryReport {
        users: truth.len(),
        home_recovered: 0,
        work_recovered: 0,
        both_recovered: 0,
        mean_home_error_km: None,
        mean_work_error_km: None,
        category_correct: 0,
        category_scored: 0,
        workday_mae: BTreeMap::new(),
    };
    let (mut home_err, mut work_err) = (Vec::new(), Vec::new());
    let mut abs_err: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in truth {
        let expect_work = t.attended.get(baseline).copied().unwrap_or(0) >= min_work_days;
        let Some(inf) = found.get(t.user_id.as_str()) else {
            continue;
        };
        let a = &inf.anchors;
        home_err.push(haversine_km(&a.home, &t.home));
        let home_ok = a.home.degree_distance(&t.home) <= tolerance_deg;
        let work_ok = match (expect_work, a.work) {
            (true, Some(w)) => {
                work_err.push(haversine_km(&w, &t.work));
                w.degree_distance(&t.work) <= tolerance_deg
            }
            (false, None) => true,
            _ => false,
        };
        report.home_recovered += usize::from(home_ok);
        report.work_recovered += usize::from(work_ok);
        report.both_recovered += usize::from(home_ok && work_ok);
        if expect_work && a.work.is_some() {
            report.category_scored += 1;
            report.category_correct += usize::from(inf.category == Some(t.category));
            for l in &labels {
                let got = inf.workdays.get(*l).copied().unwrap_or(0) as f64;
                let want = t.attended.get(*l).copied().unwrap_or(0) as f64;
                abs_err.entry(l.as_str()).or_default().push((got - want).abs());
            }
        }
    }
    report.mean_home_error_km = mean(&home_err);
    report.mean_work_error_km = mean(&work_err);
    report.workday_mae = abs_err
        .into_iter()
        .filter_map(|(l, v)| mean(&v).map(|m| (l.to_string(), m)))
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::workday_presence;
    use crate::categorize::{categorize, KeywordTable};

    fn small(users: usize) -> SynthConfig {
        SynthConfig {
            users,
            ..SynthConfig::default()
        }
    }

    fn forced(p: Vec<f64>) -> SynthConfig {
        let preset = TrajectoryPreset {
            name: "fixed".into(),
            attend_work_prob: p,
            weekend_out_prob: 0.0,
        };
        SynthConfig {
            users: 3,
            presets: Category::ALL.iter().filter(|c| **c != Category::Other).map(|c| (*c, preset.clone())).collect(),
            ..SynthConfig::default()
        }
    }

    fn truth(c: &SynthCorpus) -> Vec<TruthRow> {
        c.users.iter().map(TruthRow::from).collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        let emit = |seed| {
            let c = generate(&small(8), seed).unwrap();
            let mut buf = Vec::new();
            crate::ingest::write_pings_csv(&mut buf, &c.pings).unwrap();
            write_ground_truth(&mut buf, &c.users, &default_windows()).unwrap();
            buf
        };
        assert_eq!(emit(42), emit(42));
        assert_ne!(emit(42), emit(43));
    }

    #[test]
    fn never_attending_leaves_work_empty() {
        let cfg = forced(vec![0.0]);
        let c = generate(&cfg, 7).unwrap();
        for u in &c.users {
            let mine: Vec<_> = c.pings.iter().filter(|p| p.user_id == u.user_id).cloned().collect();
            for w in &cfg.windows {
                assert_eq!(u.attended_count(&w.label), 0);
                assert_eq!(workday_presence(&mine, &u.work, 0.001, w), 0);
            }
        }
    }

    #[test]
    fn always_attending_hits_every_workday() {
        let cfg = forced(vec![1.0]);
        let c = generate(&cfg, 7).unwrap();
        for u in &c.users {
            assert_eq!(u.attended_count("pre"), 23);
            assert_eq!(u.attended_count("lockdown"), 22);
            assert_eq!(u.attended_count("post"), 23);
        }
    }

    #[test]
    fn pings_stay_in_windows_and_box() {
        let cfg = small(20);
        let c = generate(&cfg, 3).unwrap();
        for p in &c.pings {
            assert!(cfg.bbox.contains(&p.point));
            assert!(cfg.windows.iter().any(|w| w.contains_timestamp(p.timestamp)), "{p:?}");
        }
        assert!(c.pings.windows(2).all(|w| (&w[0].user_id, w[0].timestamp) <= (&w[1].user_id, w[1].timestamp)));
    }

    #[test]
    fn attendance_matches_emitted_pings() {
        let cfg = small(30);
        let c = generate(&cfg, 11).unwrap();
        for u in &c.users {
            let mine: Vec<_> = c.pings.iter().filter(|p| p.user_id == u.user_id).cloned().collect();
            assert!(mine.len() >= 300);
            assert!(haversine_km(&u.home, &u.work) >= cfg.min_separation_km);
            for w in &cfg.windows {
                assert_eq!(workday_presence(&mine, &u.work, 0.001, w), u.attended_count(&w.label), "{}", u.user_id);
            }
        }
    }

    #[test]
    fn workplace_names_classify_as_planted() {
        let table = KeywordTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in Category::ALL.into_iter().filter(|c| *c != Category::Other) {
            for _ in 0..50 {
                let name = workplace_name(c, &mut rng);
                assert_eq!(categorize(&name, &table, None), c, "{name}");
            }
        }
    }

    #[test]
    fn work_inside_jitter_is_rejected() {
        let cfg = SynthConfig {
            min_separation_km: 0.1,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(SynthError::Config(_))));
        let cfg = SynthConfig {
            pings_per_day: [12, 10],
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        let c = generate(&small(5), 9).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &c.users, &default_windows()).unwrap();
        assert_eq!(read_ground_truth(buf.as_slice()).unwrap(), truth(&c));
    }

    fn perfect(c: &SynthCorpus) -> Vec<InferredUser> {
        c.users
            .iter()
            .map(|u| {
                let work = (u.attended_count("pre") >= 11).then_some((u.work, u.attended_count("pre")));
                InferredUser {
                    anchors: AnchorPair::new(&u.user_id, u.home, 31, work).unwrap(),
                    category: Some(u.category),
                    workdays: u.attended.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn perfect_inference_scores_perfectly() {
        let c = generate(&small(10), 5).unwrap();
        let r = score(&perfect(&c), &truth(&c), "pre", 11, 0.0005).unwrap();
        assert_eq!(r.recovery_rate(), 1.0);
        assert_eq!(r.category_accuracy(), 1.0);
        assert_eq!(r.mean_home_error_km, Some(0.0));
        assert!(r.workday_mae.values().all(|m| *m == 0.0));
    }

    #[test]
    fn absent_work_for_absent_worker_is_correct() {
        let c = generate(&forced(vec![0.0]), 5).unwrap();
        let r = score(&perfect(&c), &truth(&c), "pre", 11, 0.0005).unwrap();
        assert_eq!(r.work_recovered, 3);
        assert_eq!(r.category_scored, 0);
    }

    #[test]
    fn shifted_home_error() {
        let c = generate(&small(1), 5).unwrap();
        let mut inf = perfect(&c);
        inf[0].anchors.home.lat += 0.001;
        let r = score(&inf, &truth(&c), "pre", 11, 0.0005).unwrap();
        let expected = 0.001 * KM_PER_DEGREE;
        assert!((r.mean_home_error_km.unwrap() - expected).abs() < 1e-6);
        assert!((r.mean_home_error_km.unwrap() - 0.111).abs() < 0.001);
        assert_eq!(r.home_recovered, 0);
    }

    #[test]
    fn unknown_user_is_fatal() {
        let c = generate(&small(2), 5).unwrap();
        let mut inf = perfect(&c);
        inf[0].anchors.user_id = "ghost".into();
        assert!(matches!(score(&inf, &truth(&c), "pre", 11, 0.0005), Err(SynthError::UnknownUser(_))));
    }
}
