//! Home and work anchor inference from merged cluster centers, and
//! per-window presence counting at fixed anchors.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cluster_centers, dbscan, merge_centers, ClusterCenter, ClusterError, DbscanParams};
use crate::geo::{day_kind, haversine_km, AnalysisWindow, DayKind, GeoPoint, Ping};
use crate::num::Scalar;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("invalid anchor rules: {0}")]
    InvalidRules(String),
    #[error("work anchor for user '{0}' coincides with home")]
    WorkAtHome(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed anchor row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorRules<T> {
    /// Days a center must appear on to be a home.
    pub min_home_days: usize,
    /// Workdays a center must appear on to be a work place.
    pub min_work_days: usize,
    /// Degrees; also the home-exclusion radius for work candidates.
    pub presence_radius: T,
}

impl<T: Scalar> Default for AnchorRules<T> {
    fn default() -> Self {
        Self {
            min_home_days: 18,
            min_work_days: 11,
            presence_radius: T::lit(0.001),
        }
    }
}

impl<T: Scalar> AnchorRules<T> {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.min_work_days == 0 || self.min_home_days <= self.min_work_days {
            return Err(AnchorError::InvalidRules(format!(
                "need min_home_days > min_work_days >= 1, got {} and {}",
                self.min_home_days, self.min_work_days
            )));
        }
        if self.presence_radius.is_nan() || self.presence_radius <= T::zero() {
            return Err(AnchorError::InvalidRules("presence_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Picks the center with the highest count, then the most members, then
/// the lexicographically smallest position.
fn best_by<'a, T: Scalar>(
    candidates: impl Iterator<Item = (&'a ClusterCenter<T>, usize)>,
) -> Option<(&'a ClusterCenter<T>, usize)> {
    candidates.min_by(|(a, ca), (b, cb)| {
        cb.cmp(ca)
            .then_with(|| b.member_count.cmp(&a.member_count))
            .then_with(|| a.point.lex_cmp(&b.point))
    })
}

/// The center seen on the most days, if that count reaches `min_home_days`.
pub fn infer_home<T: Scalar>(centers: &[ClusterCenter<T>], rules: &AnchorRules<T>) -> Option<(ClusterCenter<T>, usize)> {
    best_by(centers.iter().map(|c| (c, c.day_count())))
        .filter(|(_, days)| *days >= rules.min_home_days)
        .map(|(c, days)| (c.clone(), days))
}

/// The non-home center seen on the most workdays, if that count reaches
/// `min_work_days`. Centers within `presence_radius` of home are skipped.
pub fn infer_work<T: Scalar>(
    centers: &[ClusterCenter<T>],
    home: &ClusterCenter<T>,
    rules: &AnchorRules<T>,
) -> Option<(ClusterCenter<T>, usize)> {
    let candidates = centers
        .iter()
        .filter(|c| c.point.degree_distance(&home.point) > rules.presence_radius)
        .map(|c| (c, c.workday_count()));
    best_by(candidates)
        .filter(|(_, days)| *days >= rules.min_work_days)
        .map(|(c, days)| (c.clone(), days))
}

/// A user's home and optional work location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair<T> {
    pub user_id: String,
    pub home: GeoPoint<T>,
    pub home_days: usize,
    pub work: Option<GeoPoint<T>>,
    pub work_days: Option<usize>,
}

impl<T: Scalar> AnchorPair<T> {
    pub fn new(
        user_id: impl Into<String>,
        home: GeoPoint<T>,
        home_days: usize,
        work: Option<(GeoPoint<T>, usize)>,
    ) -> Result<Self, AnchorError> {
        let user_id = user_id.into();
        if let Some((w, _)) = &work {
            let d = haversine_km(&home, w);
            if d.is_nan() || d <= T::zero() {
                return Err(AnchorError::WorkAtHome(user_id));
            }
        }
        Ok(Self {
            user_id,
            home,
            home_days,
            work: work.map(|(w, _)| w),
            work_days: work.map(|(_, d)| d),
        })
    }

    pub fn commute_km(&self) -> Option<T> {
        self.work.map(|w| haversine_km(&self.home, &w))
    }
}

/// Clusters one user's window of pings (workdays and weekends separately),
/// merges the two center sets, and applies the home and work rules.
pub fn merged_centers<T: Scalar>(
    pings: &[Ping<T>],
    window: &AnalysisWindow,
    params: &DbscanParams<T>,
) -> Result<Vec<ClusterCenter<T>>, ClusterError> {
    let mut centers = Vec::new();
    for kind in [DayKind::Workday, DayKind::Weekend] {
        let (points, days): (Vec<GeoPoint<T>>, Vec<NaiveDate>) = pings
            .iter()
            .map(|p| (p.point, window.local_day(p.timestamp)))
            .filter(|(_, d)| day_kind(*d) == kind)
            .unzip();
        if points.is_empty() {
            continue;
        }
        let result = dbscan(&points, params)?;
        centers.extend(cluster_centers(&points, &result, &days, kind)?);
    }
    Ok(merge_centers(centers, params.eps))
}

pub fn infer_anchors<T: Scalar>(
    user_id: &str,
    pings: &[Ping<T>],
    window: &AnalysisWindow,
    params: &DbscanParams<T>,
    rules: &AnchorRules<T>,
) -> Result<Option<AnchorPair<T>>, AnchorError> {
    if pings.is_empty() {
        return Ok(None);
    }
    let centers = merged_centers(pings, window, params)?;
    let Some((home, home_days)) = infer_home(&centers, rules) else {
        return Ok(None);
    };
    let work = infer_work(&centers, &home, rules).map(|(c, d)| (c.point, d));
    AnchorPair::new(user_id, home.point, home_days, work).map(Some)
}

fn present_dates<'a, T: Scalar>(
    pings: &'a [Ping<T>],
    anchor: &'a GeoPoint<T>,
    radius: T,
    window: &'a AnalysisWindow,
) -> impl Iterator<Item = NaiveDate> + 'a {
    pings
        .iter()
        .filter(move |p| p.point.degree_distance(anchor) <= radius)
        .map(move |p| window.local_day(p.timestamp))
        .filter(move |d| window.contains_day(*d))
}

/// Distinct local days in `window` with a ping within `radius` of `anchor`.
pub fn presence_days<T: Scalar>(pings: &[Ping<T>], anchor: &GeoPoint<T>, radius: T, window: &AnalysisWindow) -> usize {
    present_dates(pings, anchor, radius, window).collect::<BTreeSet<_>>().len()
}

/// [`presence_days`] restricted to workdays.
pub fn workday_presence<T: Scalar>(pings: &[Ping<T>], anchor: &GeoPoint<T>, radius: T, window: &AnalysisWindow) -> usize {
    present_dates(pings, anchor, radius, window)
        .filter(|d| day_kind(*d) == DayKind::Workday)
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorRole {
    Home,
    Work,
}

impl AnchorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorRole::Home => "home",
            AnchorRole::Work => "work",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceSeries {
    pub user_id: String,
    pub anchor_role: AnchorRole,
    pub window_label: String,
    pub present_days: usize,
    pub present_workdays: usize,
}

pub fn presence_series<T: Scalar>(
    pair: &AnchorPair<T>,
    pings: &[Ping<T>],
    radius: T,
    window: &AnalysisWindow,
) -> Vec<PresenceSeries> {
    let row = |role, anchor: &GeoPoint<T>| PresenceSeries {
        user_id: pair.user_id.clone(),
        anchor_role: role,
        window_label: window.label.clone(),
        present_days: presence_days(pings, anchor, radius, window),
        present_workdays: workday_presence(pings, anchor, radius, window),
    };
    let mut out = vec![row(AnchorRole::Home, &pair.home)];
    if let Some(w) = &pair.work {
        out.push(row(AnchorRole::Work, w));
    }
    out
}

const ANCHOR_HEADER: [&str; 7] = ["user_id", "home_lat", "home_lon", "home_days", "work_lat", "work_lon", "work_days"];

/// Writes the anchor table; work columns are empty when there is no work
/// anchor.
pub fn write_anchors_csv<W: Write>(out: W, pairs: &[AnchorPair<f64>]) -> Result<(), AnchorError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ANCHOR_HEADER)?;
    for p in pairs {
        let opt = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            p.user_id.clone(),
            p.home.lat.to_string(),
            p.home.lon.to_string(),
            p.home_days.to_string(),
            opt(p.work.map(|x| x.lat.to_string())),
            opt(p.work.map(|x| x.lon.to_string())),
            opt(p.work_days.map(|d| d.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_anchors_csv<R: Read>(input: R) -> Result<Vec<AnchorPair<f64>>, AnchorError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |message: String| AnchorError::Malformed { row, message };
        if rec.len() != ANCHOR_HEADER.len() {
            return Err(bad(format!("expected {} fields", ANCHOR_HEADER.len())));
        }
        let num = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(format!("{}: {e}", ANCHOR_HEADER[k])));
        let count = |k: usize| rec[k].parse::<usize>().map_err(|e| bad(format!("{}: {e}", ANCHOR_HEADER[k])));
        let home = GeoPoint::new(num(1)?, num(2)?).map_err(|e| bad(e.to_string()))?;
        let work = if rec[4].is_empty() {
            None
        } else {
            let w = GeoPoint::new(num(4)?, num(5)?).map_err(|e| bad(e.to_string()))?;
            Some((w, count(6)?))
        };
        out.push(AnchorPair::new(&rec[0], home, count(3)?, work)?);
    }
    Ok(out)
}

pub fn write_presence_csv<W: Write>(out: W, rows: &[PresenceSeries]) -> Result<(), AnchorError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "window", "role", "present_days", "present_workdays"])?;
    for r in rows {
        w.write_record([
            r.user_id.as_str(),
            r.window_label.as_str(),
            r.anchor_role.as_str(),
            &r.present_days.to_string(),
            &r.present_workdays.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_presence_csv<R: Read>(input: R) -> Result<Vec<PresenceSeries>, AnchorError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| AnchorError::Malformed { row: i + 2, message };
        if rec.len() != 5 {
            return Err(bad("expected 5 fields".into()));
        }
        let anchor_role = match &rec[2] {
            "home" => AnchorRole::Home,
            "work" => AnchorRole::Work,
            other => return Err(bad(format!("unknown role '{other}'"))),
        };
        let count = |k: usize| rec[k].parse::<usize>().map_err(|e| bad(e.to_string()));
        out.push(PresenceSeries {
            user_id: rec[0].to_string(),
            anchor_role,
            window_label: rec[1].to_string(),
            present_days: count(3)?,
            present_workdays: count(4)?,
        });
    }
    Ok(out)
}

/// GeoJSON map of homes, works and home-to-work connector lines.
pub fn anchors_geojson(pairs: &[AnchorPair<f64>]) -> serde_json::Value {
    use serde_json::json;
    let mut features = Vec::new();
    for p in pairs {
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [p.home.lon, p.home.lat]},
            "properties": {"user_id": p.user_id, "role": "home", "days": p.home_days, "marker-color": "#000000"},
        }));
        if let (Some(w), Some(days)) = (p.work, p.work_days) {
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [w.lon, w.lat]},
                "properties": {"user_id": p.user_id, "role": "work", "days": days, "marker-color": "#0000ff"},
            }));
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[p.home.lon, p.home.lat], [w.lon, w.lat]]},
                "properties": {
                    "user_id": p.user_id,
                    "role": "commute",
                    "distance_km": haversine_km(&p.home, &w),
                    "stroke": "#ff0000",
                },
            }));
        }
    }
    json!({"type": "FeatureCollection", "features": features})
}
