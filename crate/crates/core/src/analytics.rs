//! Cohort statistics: users per category, workday quantiles per window,
//! home-to-work distance histogram and in-person comparison against
//! configured industry expectations. Also writes the report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{anchors_geojson, AnchorPair};
use crate::categorize::{CategorizeError, Category};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("i/o error writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid expectation row {row}: {message}")]
    InvalidExpectation { row: usize, message: String },
    #[error(transparent)]
    Category(#[from] CategorizeError),
}

/// Users per category, zero-filled over every category.
pub fn category_counts(categories: impl IntoIterator<Item = Category>) -> BTreeMap<Category, usize> {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|c| (*c, 0)).collect();
    for c in categories {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}

/// Nearest-rank quantile of an ascending slice: the element at 1-based rank
/// `ceil(percent / 100 * n)`.
pub fn nearest_rank(sorted: &[u32], percent: u32) -> Option<u32> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100).clamp(1, n);
    Some(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: u32,
    pub q50: u32,
    pub q75: u32,
}

pub fn quartiles(values: &[u32]) -> Option<Quartiles> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Some(Quartiles {
        q25: nearest_rank(&sorted, 25)?,
        q50: nearest_rank(&sorted, 50)?,
        q75: nearest_rank(&sorted, 75)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryWorkdayStats {
    pub category: Category,
    pub window_label: String,
    pub q25: u32,
    pub q50: u32,
    pub q75: u32,
    pub user_count: usize,
}

/// Per-user workday counts keyed by (category, window label).
pub type WorkdayGroups = BTreeMap<(Category, String), Vec<u32>>;

/// One row per nonempty group; empty groups produce no row.
pub fn workday_quantiles(groups: &WorkdayGroups) -> Vec<CategoryWorkdayStats> {
    groups
        .iter()
        .filter_map(|((category, window), values)| {
            let q = quartiles(values)?;
            Some(CategoryWorkdayStats {
                category: *category,
                window_label: window.clone(),
                q25: q.q25,
                q50: q.q50,
                q75: q.q75,
                user_count: values.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub bin_width_km: f64,
    /// `counts.len() + 1` edges starting at 0.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub min_km: Option<f64>,
    pub median_km: Option<f64>,
    pub max_km: Option<f64>,
}

/// Histogram of home-to-work great-circle distances over bins
/// `[k*w, (k+1)*w)`. Pairs without a work anchor are skipped.
pub fn distance_distribution(pairs: &[AnchorPair<f64>], bin_width_km: f64) -> DistanceHistogram {
    assert!(bin_width_km > 0.0, "bin width must be positive");
    let mut dists: Vec<f64> = pairs.iter().filter_map(AnchorPair::commute_km).collect();
    debug_assert!(dists.iter().all(|d| *d > 0.0), "work anchors never coincide with home");
    dists.sort_by(f64::total_cmp);
    let bin_of = |d: f64| (d / bin_width_km).floor() as usize;
    let nbins = dists.last().map_or(0, |d| bin_of(*d) + 1);
    let mut counts = vec![0; nbins];
    for d in &dists {
        counts[bin_of(*d)] += 1;
    }
    let median = (!dists.is_empty()).then(|| dists[(dists.len() * 50).div_ceil(100).max(1) - 1]);
    DistanceHistogram {
        bin_width_km,
        bin_edges: (0..=nbins).map(|k| k as f64 * bin_width_km).collect(),
        counts,
        min_km: dists.first().copied(),
        median_km: median,
        max_km: dists.last().copied(),
    }
}

/// Expected in-person work percentage per category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NaicsExpectation(pub BTreeMap<Category, f64>);

impl NaicsExpectation {
    /// Reads `category,expected_pct` with a header line.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, AnalyticsError> {
        let mut r = csv::Reader::from_reader(input);
        let mut map = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |message: String| AnalyticsError::InvalidExpectation { row: i + 2, message };
            if rec.len() != 2 {
                return Err(bad("expected category,expected_pct".into()));
            }
            let category: Category = rec[0].trim().parse()?;
            let pct: f64 = rec[1].trim().parse().map_err(|e| bad(format!("{e}")))?;
            if !(0.0..=100.0).contains(&pct) {
                return Err(bad(format!("{pct} outside [0, 100]")));
            }
            map.insert(category, pct);
        }
        Ok(Self(map))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaicsRow {
    pub window_label: String,
    pub category: Category,
    pub actual_pct: f64,
    pub expected_pct: Option<f64>,
    /// `1 - actual/expected`, clamped to [0, 1]; absent when nothing is
    /// expected.
    pub relative_shortfall: Option<f64>,
}

pub fn naics_comparison(stats: &[CategoryWorkdayStats], expect: &NaicsExpectation, workdays_in_window: usize) -> Vec<NaicsRow> {
    stats
        .iter()
        .map(|s| {
            let actual_pct = if workdays_in_window == 0 {
                0.0
            } else {
                (100.0 * f64::from(s.q50) / workdays_in_window as f64).clamp(0.0, 100.0)
            };
            let expected_pct = expect.0.get(&s.category).copied();
            let relative_shortfall = expected_pct
                .filter(|e| *e > 0.0)
                .map(|e| (1.0 - actual_pct / e).clamp(0.0, 1.0));
            NaicsRow {
                window_label: s.window_label.clone(),
                category: s.category,
                actual_pct,
                expected_pct,
                relative_shortfall,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub label: String,
    pub workdays: usize,
}

/// Everything the report files are rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub windows: Vec<WindowSummary>,
    pub cohort_size: usize,
    pub anchored_users: usize,
    pub category_counts: BTreeMap<Category, usize>,
    pub workday_stats: Vec<CategoryWorkdayStats>,
    pub distances: DistanceHistogram,
    pub naics: Vec<NaicsRow>,
    #[serde(skip)]
    pub anchors: Vec<AnchorPair<f64>>,
}

pub const REPORT_FILES: [&str; 7] = [
    "category_counts.csv",
    "workday_stats.csv",
    "median_workdays.csv",
    "distances.csv",
    "naics_comparison.csv",
    "anchors.geojson",
    "report.json",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, AnalyticsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| AnalyticsError::Csv(e.into_error().into()))
}

impl ReportBundle {
    /// Users per category, in table order.
    pub fn category_counts_csv(&self) -> Result<Vec<u8>, AnalyticsError> {
        let mut rows = vec![vec!["category".to_string(), "count".to_string()]];
        rows.extend(self.category_counts.iter().map(|(c, n)| vec![c.to_string(), n.to_string()]));
        csv_bytes(rows)
    }

    /// Wide table: one row per category, median/q25/q75 per window.
    pub fn workday_stats_csv(&self) -> Result<Vec<u8>, AnalyticsError> {
        let mut header = vec!["category".to_string()];
        for w in &self.windows {
            for q in ["q50", "q25", "q75"] {
                header.push(format!("{}_{q}", w.label));
            }
        }
        let mut by_cat: BTreeMap<Category, BTreeMap<&str, &CategoryWorkdayStats>> = BTreeMap::new();
        for s in &self.workday_stats {
            by_cat.entry(s.category).or_default().insert(s.window_label.as_str(), s);
        }
        let mut rows = vec![header];
        for (cat, per_window) in by_cat {
            let mut row = vec![cat.to_string()];
            for w in &self.windows {
                match per_window.get(w.label.as_str()) {
                    Some(s) => row.extend([s.q50, s.q25, s.q75].map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), 3)),
                }
            }
            rows.push(row);
        }
        csv_bytes(rows)
    }

    /// Long form medians for bar charts.
    pub fn median_workdays_csv(&self) -> Result<Vec<u8>, AnalyticsError> {
        let mut rows = vec![["category", "window", "median_workdays", "users"].map(String::from).to_vec()];
        let order: BTreeMap<&str, usize> = self.windows.iter().enumerate().map(|(i, w)| (w.label.as_str(), i)).collect();
        let mut stats: Vec<_> = self.workday_stats.iter().collect();
        stats.sort_by_key(|s| (s.category, order.get(s.window_label.as_str()).copied()));
        rows.extend(stats.into_iter().map(|s| {
            vec![
                s.category.to_string(),
                s.window_label.clone(),
                s.q50.to_string(),
                s.user_count.to_string(),
            ]
        }));
        csv_bytes(rows)
    }

    pub fn distances_csv(&self) -> Result<Vec<u8>, AnalyticsError> {
        let h = &self.distances;
        let mut rows = vec![["bin_start_km", "bin_end_km", "count"].map(String::from).to_vec()];
        rows.extend(
            h.counts
                .iter()
                .enumerate()
                .map(|(k, n)| vec![h.bin_edges[k].to_string(), h.bin_edges[k + 1].to_string(), n.to_string()]),
        );
        csv_bytes(rows)
    }

    pub fn naics_csv(&self) -> Result<Vec<u8>, AnalyticsError> {
        let mut rows = vec![["window", "category", "actual_pct", "expected_pct", "relative_shortfall"]
            .map(String::from)
            .to_vec()];
        rows.extend(self.naics.iter().map(|r| {
            vec![
                r.window_label.clone(),
                r.category.to_string(),
                r.actual_pct.to_string(),
                opt(r.expected_pct),
                opt(r.relative_shortfall),
            ]
        }));
        csv_bytes(rows)
    }

    pub fn render(&self) -> Result<Vec<(&'static str, Vec<u8>)>, AnalyticsError> {
        let mut geojson = serde_json::to_vec_pretty(&anchors_geojson(&self.anchors)).expect("geojson serializes");
        geojson.push(b'\n');
        let mut report = serde_json::to_vec_pretty(self).expect("report serializes");
        report.push(b'\n');
        Ok(vec![
            (REPORT_FILES[0], self.category_counts_csv()?),
            (REPORT_FILES[1], self.workday_stats_csv()?),
            (REPORT_FILES[2], self.median_workdays_csv()?),
            (REPORT_FILES[3], self.distances_csv()?),
            (REPORT_FILES[4], self.naics_csv()?),
            (REPORT_FILES[5], geojson),
            (REPORT_FILES[6], report),
        ])
    }
}

/// Writes every report file into `dir`, creating it if needed.
pub fn emit_reports(dir: &Path, bundle: &ReportBundle) -> Result<Vec<PathBuf>, AnalyticsError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AnalyticsError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (name, bytes) in bundle.render()? {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(&bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
