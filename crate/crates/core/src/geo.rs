//! Geographic and calendar primitives shared by every pipeline stage.

use std::fmt;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

/// Mean Earth radius used for all great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

const SECONDS_PER_DAY: i64 = 86_400;
const UNIX_EPOCH_DAYS_FROM_CE: i32 = 719_163;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("bounding box is empty or inverted: lat [{min_lat}, {max_lat}], lon [{min_lon}, {max_lon}]")]
    InvalidBoundingBox {
        min_lat: f64,
        max_lat: f64,
        min_lon: f64,
        max_lon: f64,
    },
    #[error("analysis window '{label}' ends ({end}) before it starts ({start})")]
    InvalidWindow {
        label: String,
        start: NaiveDate,
        end: NaiveDate,
    },
    #[error("timestamp must be strictly positive, got {0}")]
    NonPositiveTimestamp(i64),
}

/// WGS84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint<T> {
    pub lat: T,
    pub lon: T,
}

impl<T: Scalar> GeoPoint<T> {
    pub fn new(lat: T, lon: T) -> Result<Self, GeoError> {
        let p = Self { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidCoordinate {
                lat: lat.to_f64().unwrap_or(f64::NAN),
                lon: lon.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn is_valid(&self) -> bool {
        let (lat_max, lon_max) = (T::lit(90.0), T::lit(180.0));
        self.lat.is_finite()
            && self.lon.is_finite()
            && self.lat >= -lat_max
            && self.lat <= lat_max
            && self.lon >= -lon_max
            && self.lon <= lon_max
    }

    /// Euclidean distance in raw degree space, treating (lat, lon) as planar.
    pub fn degree_distance(&self, other: &Self) -> T {
        (self.lat - other.lat).hypot(self.lon - other.lon)
    }

    /// Lexicographic (lat, lon) ordering used for deterministic tie-breaks.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.lat
            .partial_cmp(&other.lat)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                self.lon
                    .partial_cmp(&other.lon)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    }

    pub fn cast<U: Scalar>(&self) -> GeoPoint<U> {
        GeoPoint {
            lat: U::from(self.lat).expect("coordinate representable"),
            lon: U::from(self.lon).expect("coordinate representable"),
        }
    }
}

impl<T: fmt::Display> fmt::Display for GeoPoint<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Great-circle distance in kilometers (haversine formula).
pub fn haversine_km<T: Scalar>(a: &GeoPoint<T>, b: &GeoPoint<T>) -> T {
    let to_rad = T::PI() / T::lit(180.0);
    let half = T::lit(0.5);
    let (lat1, lat2) = (a.lat * to_rad, b.lat * to_rad);
    let dlat = (b.lat - a.lat) * to_rad;
    let dlon = (b.lon - a.lon) * to_rad;
    let h = (dlat * half).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon * half).sin().powi(2);
    // rounding can push h a hair above 1 for antipodal points
    let h = h.min(T::one()).max(T::zero());
    T::lit(2.0) * T::lit(EARTH_RADIUS_KM) * h.sqrt().asin()
}

/// One timestamped observation of one anonymized device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ping<T> {
    pub user_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub point: GeoPoint<T>,
}

impl<T: Scalar> Ping<T> {
    pub fn new(user_id: impl Into<String>, timestamp: i64, point: GeoPoint<T>) -> Result<Self, GeoError> {
        if timestamp <= 0 {
            return Err(GeoError::NonPositiveTimestamp(timestamp));
        }
        if !point.is_valid() {
            return Err(GeoError::InvalidCoordinate {
                lat: point.lat.to_f64().unwrap_or(f64::NAN),
                lon: point.lon.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            user_id: user_id.into(),
            timestamp,
            point,
        })
    }
}

/// Axis-aligned lat/lon box. Does not wrap the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub min_lat: T,
    pub max_lat: T,
    pub min_lon: T,
    pub max_lon: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(min_lat: T, max_lat: T, min_lon: T, max_lon: T) -> Result<Self, GeoError> {
        let b = Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let corners_ok = GeoPoint::new(self.min_lat, self.min_lon).is_ok()
            && GeoPoint::new(self.max_lat, self.max_lon).is_ok();
        if corners_ok && self.min_lat < self.max_lat && self.min_lon < self.max_lon {
            Ok(())
        } else {
            Err(GeoError::InvalidBoundingBox {
                min_lat: self.min_lat.to_f64().unwrap_or(f64::NAN),
                max_lat: self.max_lat.to_f64().unwrap_or(f64::NAN),
                min_lon: self.min_lon.to_f64().unwrap_or(f64::NAN),
                max_lon: self.max_lon.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    /// Boundary inclusive on all four edges.
    pub fn contains(&self, p: &GeoPoint<T>) -> bool {
        in_bbox(p, self)
    }

    pub fn center(&self) -> GeoPoint<T> {
        let half = T::lit(0.5);
        GeoPoint {
            lat: (self.min_lat + self.max_lat) * half,
            lon: (self.min_lon + self.max_lon) * half,
        }
    }

    /// Clamps a point into the box.
    pub fn clamp(&self, p: GeoPoint<T>) -> GeoPoint<T> {
        GeoPoint {
            lat: p.lat.max(self.min_lat).min(self.max_lat),
            lon: p.lon.max(self.min_lon).min(self.max_lon),
        }
    }
}

pub fn in_bbox<T: Scalar>(p: &GeoPoint<T>, b: &BoundingBox<T>) -> bool {
    b.min_lat <= p.lat && p.lat <= b.max_lat && b.min_lon <= p.lon && p.lon <= b.max_lon
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DayKind {
    Workday,
    Weekend,
}

pub fn day_kind(date: NaiveDate) -> DayKind {
    match date.weekday() {
        Weekday::Sat | Weekday::Sun => DayKind::Weekend,
        _ => DayKind::Workday,
    }
}

/// Calendar date of `timestamp` after shifting by a fixed UTC offset.
pub fn local_day(timestamp: i64, utc_offset_minutes: i32) -> NaiveDate {
    let shifted = timestamp + i64::from(utc_offset_minutes) * 60;
    let days = shifted.div_euclid(SECONDS_PER_DAY);
    i32::try_from(days)
        .ok()
        .and_then(|d| d.checked_add(UNIX_EPOCH_DAYS_FROM_CE))
        .and_then(NaiveDate::from_num_days_from_ce_opt)
        .expect("timestamp within the representable calendar range")
}

/// Seconds since the epoch of local midnight starting `date`.
pub fn local_midnight_utc(date: NaiveDate, utc_offset_minutes: i32) -> i64 {
    let days = i64::from(date.num_days_from_ce() - UNIX_EPOCH_DAYS_FROM_CE);
    days * SECONDS_PER_DAY - i64::from(utc_offset_minutes) * 60
}

/// Labeled inclusive span of local calendar days.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisWindow {
    pub label: String,
    pub start_day: NaiveDate,
    pub end_day: NaiveDate,
    pub utc_offset_minutes: i32,
}

impl AnalysisWindow {
    pub fn new(
        label: impl Into<String>,
        start_day: NaiveDate,
        end_day: NaiveDate,
        utc_offset_minutes: i32,
    ) -> Result<Self, GeoError> {
        let w = Self {
            label: label.into(),
            start_day,
            end_day,
            utc_offset_minutes,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.start_day <= self.end_day {
            Ok(())
        } else {
            Err(GeoError::InvalidWindow {
                label: self.label.clone(),
                start: self.start_day,
                end: self.end_day,
            })
        }
    }

    pub fn local_day(&self, timestamp: i64) -> NaiveDate {
        local_day(timestamp, self.utc_offset_minutes)
    }

    pub fn contains_day(&self, day: NaiveDate) -> bool {
        self.start_day <= day && day <= self.end_day
    }

    pub fn contains_timestamp(&self, timestamp: i64) -> bool {
        self.contains_day(self.local_day(timestamp))
    }

    pub fn len_days(&self) -> usize {
        (self.end_day - self.start_day).num_days() as usize + 1
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start_day.iter_days().take(self.len_days())
    }

    pub fn workdays(&self) -> usize {
        self.days().filter(|d| day_kind(*d) == DayKind::Workday).count()
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.start_day <= other.end_day && other.start_day <= self.end_day
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn ts(y: i32, m: u32, day: u32, h: u32, min: u32) -> i64 {
        d(y, m, day).and_hms_opt(h, min, 0).unwrap().and_utc().timestamp()
    }

    // Independent great-circle route: angle between unit vectors via the chord.
    fn chord_oracle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
        let v = |(lat, lon): (f64, f64)| {
            let (la, lo) = (lat.to_radians(), lon.to_radians());
            [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
        };
        let (p, q) = (v(a), v(b));
        let chord = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        2.0 * (chord / 2.0).asin() * EARTH_RADIUS_KM
    }

    #[test]
    fn haversine_identity_is_zero() {
        let a = GeoPoint::new(33.75, -84.39).unwrap();
        assert_eq!(haversine_km(&a, &a), 0.0);
    }

    #[test]
    fn haversine_matches_chord_oracle() {
        let a = GeoPoint::new(33.75, -84.39).unwrap();
        let north = GeoPoint::new(33.76, -84.39).unwrap();
        let east = GeoPoint::new(33.75, -84.38).unwrap();
        let oracle_north = chord_oracle_km((33.75, -84.39), (33.76, -84.39));
        let oracle_east = chord_oracle_km((33.75, -84.39), (33.75, -84.38));
        assert!((oracle_north - 1.1119).abs() < 1e-4, "{oracle_north}");
        assert!((oracle_east - 0.9245).abs() < 1e-4, "{oracle_east}");
        assert!((haversine_km(&a, &north) - oracle_north).abs() < 1e-9);
        assert!((haversine_km(&a, &east) - oracle_east).abs() < 1e-9);
    }

    #[test]
    fn haversine_works_in_f32() {
        let a = GeoPoint::<f32>::new(33.75, -84.39).unwrap();
        let b = GeoPoint::<f32>::new(33.76, -84.39).unwrap();
        assert!((haversine_km(&a, &b) - 1.1119).abs() < 1e-3);
    }

    #[test]
    fn rejects_out_of_range_points() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(Ping::new("u", 0, GeoPoint::new(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn local_day_applies_offset() {
        assert_eq!(local_day(ts(2020, 1, 15, 3, 0), -300), d(2020, 1, 14));
        assert_eq!(local_day(ts(2020, 1, 15, 12, 0), -300), d(2020, 1, 15));
        assert_eq!(local_day(ts(2020, 7, 1, 3, 59), -240), d(2020, 6, 30));
    }

    #[test]
    fn local_midnight_inverts_local_day() {
        let m = local_midnight_utc(d(2020, 4, 10), -240);
        assert_eq!(local_day(m, -240), d(2020, 4, 10));
        assert_eq!(local_day(m - 1, -240), d(2020, 4, 9));
    }

    #[test]
    fn day_kinds() {
        assert_eq!(day_kind(d(2020, 1, 6)), DayKind::Workday);
        assert_eq!(day_kind(d(2020, 1, 11)), DayKind::Weekend);
        assert_eq!(day_kind(d(2020, 1, 12)), DayKind::Weekend);
    }

    #[test]
    fn calendar_workday_counts() {
        let count = |y, m, last| {
            let w = AnalysisWindow::new("w", d(y, m, 1), d(y, m, last), 0).unwrap();
            (w.workdays(), w.len_days() - w.workdays())
        };
        assert_eq!(count(2020, 1, 31), (23, 8));
        assert_eq!(count(2020, 4, 30), (22, 8));
        assert_eq!(count(2020, 7, 31), (23, 8));
    }

    #[test]
    fn bbox_edges_inclusive() {
        let b = BoundingBox::new(33.0, 34.5, -85.0, -83.5).unwrap();
        assert!(in_bbox(&b.center(), &b));
        assert!(in_bbox(&GeoPoint { lat: 34.5, lon: -84.0 }, &b));
        assert!(!in_bbox(&GeoPoint { lat: 33.5, lon: -85.001 }, &b));
        assert!(BoundingBox::new(34.0, 33.0, -85.0, -84.0).is_err());
    }

    #[test]
    fn inverted_window_rejected() {
        assert!(AnalysisWindow::new("x", d(2020, 2, 1), d(2020, 1, 1), 0).is_err());
        assert_eq!(AnalysisWindow::new("x", d(2020, 2, 1), d(2020, 2, 1), 0).unwrap().len_days(), 1);
    }

    fn point() -> impl Strategy<Value = GeoPoint<f64>> {
        (-89.9f64..89.9, -179.9f64..179.9).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    // keeps triples away from antipodal pairs, where asin loses precision
    fn regional() -> impl Strategy<Value = GeoPoint<f64>> {
        (-60.0f64..60.0, -60.0f64..60.0).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    proptest! {
        #[test]
        fn haversine_symmetric(a in point(), b in point()) {
            prop_assert_eq!(haversine_km(&a, &b), haversine_km(&b, &a));
            prop_assert!(haversine_km(&a, &b) >= 0.0);
        }

        #[test]
        fn haversine_triangle(a in regional(), b in regional(), c in regional()) {
            prop_assert!(haversine_km(&a, &b) <= haversine_km(&a, &c) + haversine_km(&c, &b) + 1e-9);
        }

        #[test]
        fn local_day_monotone(t in 1i64..4_000_000_000, dt in 0i64..1_000_000, off in -720i32..840) {
            prop_assert!(local_day(t, off) <= local_day(t + dt, off));
        }
    }
}
