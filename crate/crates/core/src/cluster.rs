//! DBSCAN over geographic points in raw (lat, lon) degree space, backed by a
//! uniform grid for neighbor queries.
//!
//! Points are scanned in input order, so a border point reachable from two
//! clusters always joins the cluster that was created first. Everything here
//! is single-threaded and deterministic; callers parallelize across users.

use std::collections::{BTreeSet, HashMap, VecDeque};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{day_kind, DayKind, GeoPoint};
use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty point set")]
    EmptyInput,
    #[error("invalid DBSCAN parameters: {0}")]
    InvalidParams(String),
    #[error("{points} points but {days} day stamps")]
    LengthMismatch { points: usize, days: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbscanParams<T> {
    /// Neighborhood radius in degrees.
    pub eps: T,
    /// Core-point threshold as a fraction of the input size.
    pub min_pts_fraction: f64,
    /// Lower bound on the core-point threshold.
    pub min_pts_floor: usize,
}

impl<T: Scalar> Default for DbscanParams<T> {
    fn default() -> Self {
        Self {
            eps: T::lit(0.001),
            min_pts_fraction: 0.05,
            min_pts_floor: 5,
        }
    }
}

impl<T: Scalar> DbscanParams<T> {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if !self.eps.is_finite() || self.eps <= T::zero() {
            return Err(ClusterError::InvalidParams(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.min_pts_fraction > 0.0 && self.min_pts_fraction <= 1.0) {
            return Err(ClusterError::InvalidParams(format!(
                "min_pts_fraction must be in (0, 1], got {}",
                self.min_pts_fraction
            )));
        }
        if self.min_pts_floor == 0 {
            return Err(ClusterError::InvalidParams("min_pts_floor must be at least 1".into()));
        }
        Ok(())
    }

    /// `max(floor, ceil(fraction * n))`
    pub fn effective_min_pts(&self, n: usize) -> usize {
        let scaled = (self.min_pts_fraction * n as f64).ceil() as usize;
        scaled.max(self.min_pts_floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Noise,
    Cluster(usize),
}

impl Label {
    pub fn cluster(self) -> Option<usize> {
        match self {
            Label::Cluster(c) => Some(c),
            Label::Noise => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<Label>,
    pub cluster_count: usize,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Label::Cluster(cluster))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Noise).count()
    }

    /// Clusters as sorted member-index lists, ordered by their smallest member.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.cluster_count];
        for (i, l) in self.labels.iter().enumerate() {
            if let Label::Cluster(c) = l {
                groups[*c].push(i);
            }
        }
        groups.sort();
        groups
    }
}

/// Uniform grid over a point slice. Cell coordinates are taken relative to
/// the first point, which keeps the bucket arithmetic well conditioned in
/// single precision.
pub struct GridIndex<'a, T> {
    points: &'a [GeoPoint<T>],
    origin: GeoPoint<T>,
    cell: T,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a, T: Scalar> GridIndex<'a, T> {
    /// Builds a grid whose cells are slightly wider than `cell_size`, so that
    /// rounding in the bucket computation can never hide a neighbor at
    /// exactly `cell_size`.
    pub fn new(points: &'a [GeoPoint<T>], cell_size: T) -> Self {
        assert!(cell_size > T::zero(), "grid cell size must be positive");
        let cell = cell_size * (T::one() + T::epsilon().sqrt());
        let origin = points.first().copied().unwrap_or_default();
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        let mut index = Self {
            points,
            origin,
            cell,
            cells: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            cells.entry(index.key(p)).or_default().push(i);
        }
        index.cells = cells;
        index
    }

    fn key(&self, p: &GeoPoint<T>) -> (i64, i64) {
        let k = |v: T, o: T| ((v - o) / self.cell).floor().to_i64().unwrap_or(i64::MAX);
        (k(p.lat, self.origin.lat), k(p.lon, self.origin.lon))
    }

    pub fn points(&self) -> &'a [GeoPoint<T>] {
        self.points
    }

    /// Indices of all points within `eps` (inclusive) of `q`, ascending.
    pub fn region_query(&self, q: &GeoPoint<T>, eps: T) -> Vec<usize> {
        let reach = (eps / self.cell).ceil().to_i64().unwrap_or(1).max(1);
        let (ki, kj) = self.key(q);
        let mut out = Vec::new();
        for di in -reach..=reach {
            for dj in -reach..=reach {
                if let Some(bucket) = self.cells.get(&(ki + di, kj + dj)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&i| self.points[i].degree_distance(q) <= eps),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Free-function form of [`GridIndex::region_query`].
pub fn region_query<T: Scalar>(index: &GridIndex<'_, T>, q: &GeoPoint<T>, eps: T) -> Vec<usize> {
    index.region_query(q, eps)
}

pub fn dbscan<T: Scalar>(points: &[GeoPoint<T>], params: &DbscanParams<T>) -> Result<ClusterResult, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    params.validate()?;
    let min_pts = params.effective_min_pts(points.len());
    let index = GridIndex::new(points, params.eps);

    let mut labels: Vec<Option<Label>> = vec![None; points.len()];
    let mut cluster_count = 0;
    let mut queue = VecDeque::new();

    for i in 0..points.len() {
        if labels[i].is_some() {
            continue;
        }
        let neighbors = index.region_query(&points[i], params.eps);
        if neighbors.len() < min_pts {
            labels[i] = Some(Label::Noise);
            continue;
        }
        let id = cluster_count;
        cluster_count += 1;
        labels[i] = Some(Label::Cluster(id));
        queue.clear();
        queue.extend(neighbors);
        while let Some(j) = queue.pop_front() {
            match labels[j] {
                Some(Label::Cluster(_)) => {}
                // noise was already checked and found non-core: it is a border point
                Some(Label::Noise) => labels[j] = Some(Label::Cluster(id)),
                None => {
                    labels[j] = Some(Label::Cluster(id));
                    let reach = index.region_query(&points[j], params.eps);
                    if reach.len() >= min_pts {
                        queue.extend(reach.into_iter().filter(|&k| labels[k] != Some(Label::Cluster(id))));
                    }
                }
            }
        }
    }

    Ok(ClusterResult {
        labels: labels.into_iter().map(|l| l.expect("every point visited")).collect(),
        cluster_count,
    })
}

/// A cluster summarized by its centroid and the days its members were seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenter<T> {
    pub point: GeoPoint<T>,
    pub member_count: usize,
    pub day_set: BTreeSet<NaiveDate>,
    pub day_kind_source: DayKind,
}

impl<T: Scalar> ClusterCenter<T> {
    pub fn day_count(&self) -> usize {
        self.day_set.len()
    }

    pub fn workday_count(&self) -> usize {
        self.day_set.iter().filter(|d| day_kind(**d) == DayKind::Workday).count()
    }
}

/// One centroid per cluster, in cluster-index order. Noise contributes
/// nothing.
pub fn cluster_centers<T: Scalar>(
    points: &[GeoPoint<T>],
    result: &ClusterResult,
    day_of: &[NaiveDate],
    kind: DayKind,
) -> Result<Vec<ClusterCenter<T>>, ClusterError> {
    if points.len() != day_of.len() || points.len() != result.labels.len() {
        return Err(ClusterError::LengthMismatch {
            points: points.len(),
            days: day_of.len(),
        });
    }
    struct Acc<T> {
        anchor: GeoPoint<T>,
        d_lat: T,
        d_lon: T,
        lo: GeoPoint<T>,
        hi: GeoPoint<T>,
        n: usize,
        days: BTreeSet<NaiveDate>,
    }
    let mut accs: Vec<Option<Acc<T>>> = (0..result.cluster_count).map(|_| None).collect();
    for ((p, label), day) in points.iter().zip(&result.labels).zip(day_of) {
        let Some(c) = label.cluster() else { continue };
        let acc = accs[c].get_or_insert_with(|| Acc {
            anchor: *p,
            d_lat: T::zero(),
            d_lon: T::zero(),
            lo: *p,
            hi: *p,
            n: 0,
            days: BTreeSet::new(),
        });
        // offsets from the first member keep identical points exact
        acc.d_lat = acc.d_lat + (p.lat - acc.anchor.lat);
        acc.d_lon = acc.d_lon + (p.lon - acc.anchor.lon);
        acc.lo = GeoPoint {
            lat: acc.lo.lat.min(p.lat),
            lon: acc.lo.lon.min(p.lon),
        };
        acc.hi = GeoPoint {
            lat: acc.hi.lat.max(p.lat),
            lon: acc.hi.lon.max(p.lon),
        };
        acc.n += 1;
        acc.days.insert(*day);
    }
    Ok(accs
        .into_iter()
        .flatten()
        .map(|a| {
            let n = T::from_usize(a.n).expect("count representable");
            let mean = GeoPoint {
                lat: (a.anchor.lat + a.d_lat / n).max(a.lo.lat).min(a.hi.lat),
                lon: (a.anchor.lon + a.d_lon / n).max(a.lo.lon).min(a.hi.lon),
            };
            ClusterCenter {
                point: mean,
                member_count: a.n,
                day_set: a.days,
                day_kind_source: kind,
            }
        })
        .collect())
}

/// Greedy larger-first merge of nearby centers.
///
/// Centers are visited by descending `member_count` (ties by lexicographic
/// position). Each one is absorbed by the first already-accepted center
/// within `radius`; absorption unions day sets and sums member counts while
/// keeping the accepted center's position.
pub fn merge_centers<T: Scalar>(mut centers: Vec<ClusterCenter<T>>, radius: T) -> Vec<ClusterCenter<T>> {
    centers.sort_by(|a, b| {
        b.member_count
            .cmp(&a.member_count)
            .then_with(|| a.point.lex_cmp(&b.point))
    });
    let mut accepted: Vec<ClusterCenter<T>> = Vec::with_capacity(centers.len());
    for c in centers {
        match accepted.iter_mut().find(|a| a.point.degree_distance(&c.point) <= radius) {
            Some(host) => {
                host.member_count += c.member_count;
                host.day_set.extend(c.day_set);
            }
            None => accepted.push(c),
        }
    }
    accepted
}
