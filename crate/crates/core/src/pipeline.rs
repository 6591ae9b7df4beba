//! Pipeline stages over files in the output directory. Each stage reads the
//! artifacts of the stages before it, so running the stages one by one gives
//! the same files as [`run_pipeline`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::analytics::{self, category_counts, distance_distribution, naics_comparison, workday_quantiles, NaicsExpectation, ReportBundle, WindowSummary, WorkdayGroups};
use crate::anchors::{self, infer_anchors, presence_series, AnchorPair, AnchorRole, PresenceSeries};
use crate::categorize::{categorize, word_frequencies, Category, KeywordTable};
use crate::config::{ConfigError, RunConfig};
use crate::geo::{AnalysisWindow, Ping};
use crate::geocode::{self, load_overrides, GeocodeCache, HttpReverse, PoiDb, Resolver};
use crate::ingest::{self, parse_pings, ActivityAccumulator, WindowActivity};
use crate::synthgen::{self, InferredUser};

pub const SYNTH_DIR: &str = "synth";
pub const SYNTH_PINGS: &str = "synth/pings.csv";
pub const SYNTH_TRUTH: &str = "synth/ground_truth.csv";
pub const SYNTH_POIS: &str = "synth/pois.csv";
pub const COHORT: &str = "cohort.csv";
pub const COHORT_PINGS: &str = "cohort_pings.csv";
pub const ANCHORS: &str = "anchors.csv";
pub const PRESENCE: &str = "presence.csv";
pub const WORKPLACES: &str = "workplaces.csv";
pub const GEOCODE_CACHE: &str = "geocode_cache.jsonl";
pub const CATEGORIES: &str = "categories.csv";
pub const WORD_FREQUENCIES: &str = "word_frequencies.csv";
pub const REPORT_DIR: &str = "report";
pub const RECOVERY: &str = "recovery.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input for {stage}: {path}")]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// 2 for configuration or missing inputs, 1 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MissingInput { .. } => 2,
            Self::Stage { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingInput { .. } => "missing_input",
            Self::Stage { .. } => "stage",
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Self::Config(_) => None,
            Self::MissingInput { stage, .. } | Self::Stage { stage, .. } => Some(stage),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Cluster,
    Geocode,
    Categorize,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Cluster,
        Stage::Geocode,
        Stage::Categorize,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Geocode => "geocode",
            Stage::Categorize => "categorize",
            Stage::Report => "report",
        }
    }
}

/// Files a stage wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
}

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn open_input(stage: &'static str, path: &Path) -> Result<BufReader<File>, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingInput {
            stage,
            path: path.to_path_buf(),
        });
    }
    File::open(path).map(BufReader::new).map_err(fail(stage))
}

/// Writes via a temporary sibling and renames, so a failed stage never
/// leaves a truncated artifact behind.
fn write_output<F>(stage: &'static str, path: &Path, f: F) -> Result<PathBuf, PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), PipelineError>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(fail(stage))?;
    }
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(fail(stage))?);
    f(&mut w)?;
    w.flush().map_err(fail(stage))?;
    drop(w);
    fs::rename(&tmp, path).map_err(fail(stage))?;
    Ok(path.to_path_buf())
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

pub fn run_synth(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "synth";
    let scfg = cfg.synth_config();
    let corpus = synthgen::generate(&scfg, cfg.seed).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    log::info!("synth: {} users, {} pings", corpus.users.len(), corpus.pings.len());
    let files = vec![
        write_output(S, &out(cfg, SYNTH_PINGS), |w| ingest::write_pings_csv(w, &corpus.pings).map_err(fail(S)))?,
        write_output(S, &out(cfg, SYNTH_TRUTH), |w| {
            synthgen::write_ground_truth(w, &corpus.users, &scfg.windows).map_err(fail(S))
        })?,
        write_output(S, &out(cfg, SYNTH_POIS), |w| synthgen::write_pois(w, &corpus.users).map_err(fail(S)))?,
    ];
    Ok(StageOutput { files })
}

fn pings_path(cfg: &RunConfig) -> PathBuf {
    cfg.input.pings.clone().unwrap_or_else(|| out(cfg, SYNTH_PINGS))
}

/// Streams every well-formed ping inside the box and some window.
fn for_each_ping(
    stage: &'static str,
    cfg: &RunConfig,
    mut f: impl FnMut(Ping<f64>, usize) -> Result<(), PipelineError>,
) -> Result<usize, PipelineError> {
    let path = pings_path(cfg);
    let reader = open_input(stage, &path)?;
    let mut malformed = 0;
    for rec in parse_pings(reader, cfg.input.format, cfg.input.has_header) {
        match rec.map_err(fail(stage))? {
            Ok(p) => {
                if !cfg.bbox.contains(&p.point) {
                    continue;
                }
                if let Some(wi) = cfg.windows.iter().position(|w| w.contains_timestamp(p.timestamp)) {
                    f(p, wi)?;
                }
            }
            Err(e) => {
                if malformed < 5 {
                    log::warn!("{}: skipping {e}", path.display());
                }
                malformed += 1;
            }
        }
    }
    Ok(malformed)
}

/// Two streaming passes: per-window activity, then the cohort's pings.
pub fn run_ingest(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "ingest";
    let mut acc = vec![ActivityAccumulator::default(); cfg.windows.len()];
    let malformed = for_each_ping(S, cfg, |p, wi| {
        acc[wi].add(&p, &cfg.windows[wi]);
        Ok(())
    })?;
    if malformed > 0 {
        log::warn!("ingest: {malformed} malformed records skipped");
    }
    let stats: WindowActivity = acc
        .into_iter()
        .zip(&cfg.windows)
        .map(|(a, w)| (w.label.clone(), a.finish(w)))
        .collect();
    let cohort = ingest::select_cohort(&stats, &cfg.cohort).map_err(fail(S))?;
    log::info!("ingest: {} users pass the cohort gates", cohort.len());
    let labels: Vec<String> = cfg.windows.iter().map(|w| w.label.clone()).collect();
    let cohort_file = write_output(S, &out(cfg, COHORT), |w| {
        ingest::write_cohort_csv(w, &cohort, &stats, &labels, &cfg.cohort.baseline_window_label).map_err(fail(S))
    })?;
    let pings_file = write_output(S, &out(cfg, COHORT_PINGS), |w| {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for_each_ping(S, cfg, |p, _| {
            if cohort.contains(&p.user_id) {
                csv.write_record([
                    p.user_id.as_str(),
                    &p.timestamp.to_string(),
                    &p.point.lat.to_string(),
                    &p.point.lon.to_string(),
                ])
                .map_err(fail(S))?;
            }
            Ok(())
        })?;
        csv.flush().map_err(fail(S))
    })?;
    Ok(StageOutput {
        files: vec![cohort_file, pings_file],
    })
}

fn read_cohort_pings(stage: &'static str, cfg: &RunConfig) -> Result<BTreeMap<String, Vec<Ping<f64>>>, PipelineError> {
    let reader = open_input(stage, &out(cfg, COHORT_PINGS))?;
    let mut by_user: BTreeMap<String, Vec<Ping<f64>>> = BTreeMap::new();
    for rec in parse_pings(reader, crate::ingest::PingRecordFormat::CsvV1, false) {
        let p = rec.map_err(fail(stage))?.map_err(fail(stage))?;
        by_user.entry(p.user_id.clone()).or_default().push(p);
    }
    Ok(by_user)
}

fn zero_presence(user_id: &str, role: AnchorRole, window: &AnalysisWindow) -> PresenceSeries {
    PresenceSeries {
        user_id: user_id.to_string(),
        anchor_role: role,
        window_label: window.label.clone(),
        present_days: 0,
        present_workdays: 0,
    }
}

type UserAnchors = Option<(AnchorPair<f64>, Vec<PresenceSeries>)>;

fn anchor_user(cfg: &RunConfig, user_id: &str, pings: &[Ping<f64>]) -> Result<UserAnchors, PipelineError> {
    const S: &str = "cluster";
    let rules = cfg.anchors.rules();
    let in_window = |w: &AnalysisWindow| -> Vec<Ping<f64>> { pings.iter().filter(|p| w.contains_timestamp(p.timestamp)).cloned().collect() };
    let baseline = cfg.baseline();
    let Some(pair) = infer_anchors(user_id, &in_window(baseline), baseline, &cfg.dbscan, &rules).map_err(fail(S))? else {
        return Ok(None);
    };
    let mut rows = Vec::new();
    for w in &cfg.windows {
        let mine = in_window(w);
        if !cfg.anchors.recluster_per_window || w.label == baseline.label {
            rows.extend(presence_series(&pair, &mine, rules.presence_radius, w));
            continue;
        }
        match infer_anchors(user_id, &mine, w, &cfg.dbscan, &rules).map_err(fail(S))? {
            Some(local) => {
                let mut found = presence_series(&local, &mine, rules.presence_radius, w);
                if pair.work.is_some() && local.work.is_none() {
                    found.push(zero_presence(user_id, AnchorRole::Work, w));
                }
                found.retain(|r| r.anchor_role == AnchorRole::Home || pair.work.is_some());
                rows.extend(found);
            }
            None => {
                rows.push(zero_presence(user_id, AnchorRole::Home, w));
                if pair.work.is_some() {
                    rows.push(zero_presence(user_id, AnchorRole::Work, w));
                }
            }
        }
    }
    Ok(Some((pair, rows)))
}

/// Infers anchors from the baseline window and measures presence per window.
pub fn run_cluster(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "cluster";
    let cohort = ingest::read_cohort_csv(open_input(S, &out(cfg, COHORT))?).map_err(fail(S))?;
    let mut by_user = read_cohort_pings(S, cfg)?;
    by_user.retain(|u, _| cohort.contains(u));
    let users: Vec<(String, Vec<Ping<f64>>)> = by_user.into_iter().collect();
    let results: Vec<UserAnchors> = users
        .par_iter()
        .map(|(u, pings)| anchor_user(cfg, u, pings))
        .collect::<Result<_, _>>()?;
    let (pairs, presence): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
    let presence: Vec<PresenceSeries> = presence.into_iter().flatten().collect();
    log::info!(
        "cluster: {} of {} users anchored, {} with work",
        pairs.len(),
        users.len(),
        pairs.iter().filter(|p| p.work.is_some()).count()
    );
    let files = vec![
        write_output(S, &out(cfg, ANCHORS), |w| anchors::write_anchors_csv(w, &pairs).map_err(fail(S)))?,
        write_output(S, &out(cfg, PRESENCE), |w| anchors::write_presence_csv(w, &presence).map_err(fail(S)))?,
    ];
    Ok(StageOutput { files })
}

fn read_anchors(stage: &'static str, cfg: &RunConfig) -> Result<Vec<AnchorPair<f64>>, PipelineError> {
    anchors::read_anchors_csv(open_input(stage, &out(cfg, ANCHORS))?).map_err(fail(stage))
}

fn cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.geocode.cache.clone().unwrap_or_else(|| out(cfg, GEOCODE_CACHE))
}

/// Builds the resolver the config describes, loading any existing cache.
pub fn build_resolver(cfg: &RunConfig) -> Result<Resolver, PipelineError> {
    const S: &str = "geocode";
    let g = &cfg.geocode;
    let overrides = match &g.overrides {
        Some(p) => load_overrides(open_input(S, p)?).map_err(fail(S))?,
        None => Default::default(),
    };
    let poi_path = g.poi_db.clone().or_else(|| Some(out(cfg, SYNTH_POIS)).filter(|p| p.is_file()));
    let poi = match poi_path {
        Some(p) => Some(PoiDb::from_csv(open_input(S, &p)?).map_err(fail(S))?),
        None => None,
    };
    let cache_file = cache_path(cfg);
    let cache = if cache_file.is_file() {
        GeocodeCache::from_jsonl(open_input(S, &cache_file)?).map_err(fail(S))?
    } else {
        GeocodeCache::new()
    };
    Ok(Resolver {
        overrides,
        cache,
        remote: g.remote.clone().map(|r| Box::new(HttpReverse::new(r)) as _),
        poi,
        max_poi_radius_m: g.max_poi_radius_m,
    })
}

pub fn run_geocode(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "geocode";
    let pairs = read_anchors(S, cfg)?;
    let resolver = build_resolver(cfg)?;
    let work: Vec<_> = pairs.iter().filter_map(|p| p.work.map(|w| (p.user_id.clone(), w))).collect();
    let records = resolver.resolve_all(&work);
    let unresolved = records.iter().filter(|r| r.source == geocode::ResolutionSource::Unresolved).count();
    log::info!("geocode: {} workplaces, {unresolved} unresolved", records.len());
    let files = vec![
        write_output(S, &out(cfg, WORKPLACES), |w| geocode::write_workplaces_csv(w, &records).map_err(fail(S)))?,
        write_output(S, &cache_path(cfg), |w| resolver.cache.write_jsonl(w).map_err(fail(S)))?,
    ];
    Ok(StageOutput { files })
}

fn keyword_table(cfg: &RunConfig) -> Result<KeywordTable, PipelineError> {
    const S: &str = "categorize";
    match &cfg.categorize.keyword_table {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| PipelineError::MissingInput { stage: S, path: p.clone() })?;
            KeywordTable::from_json(&text).map_err(|e| ConfigError::Invalid(e.to_string()).into())
        }
        None => Ok(KeywordTable::default()),
    }
}

pub fn run_categorize(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "categorize";
    let table = keyword_table(cfg)?;
    let records = geocode::read_workplaces_csv(open_input(S, &out(cfg, WORKPLACES))?).map_err(fail(S))?;
    let names: Vec<&str> = records.iter().map(|r| r.name.as_str()).filter(|n| !n.is_empty()).collect();
    let freq = word_frequencies(&names);
    let files = vec![
        write_output(S, &out(cfg, CATEGORIES), |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["user_id", "name", "source", "category"]).map_err(fail(S))?;
            for r in &records {
                let c = categorize(&r.name, &table, r.category_hint.as_deref());
                csv.write_record([r.user_id.as_str(), &r.name, r.source.as_str(), c.name()])
                    .map_err(fail(S))?;
            }
            csv.flush().map_err(fail(S))
        })?,
        write_output(S, &out(cfg, WORD_FREQUENCIES), |w| freq.write_csv(w).map_err(fail(S)))?,
    ];
    Ok(StageOutput { files })
}

fn read_categories(stage: &'static str, cfg: &RunConfig) -> Result<BTreeMap<String, Category>, PipelineError> {
    let mut r = csv::Reader::from_reader(open_input(stage, &out(cfg, CATEGORIES))?);
    let mut map = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(fail(stage))?;
        let (Some(user), Some(cat)) = (rec.get(0), rec.get(3)) else {
            return Err(fail(stage)(format!("short row in {CATEGORIES}")));
        };
        map.insert(user.to_string(), cat.parse().map_err(fail(stage))?);
    }
    Ok(map)
}

fn read_presence(stage: &'static str, cfg: &RunConfig) -> Result<Vec<PresenceSeries>, PipelineError> {
    anchors::read_presence_csv(open_input(stage, &out(cfg, PRESENCE))?).map_err(fail(stage))
}

pub fn run_report(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "report";
    let cohort = ingest::read_cohort_csv(open_input(S, &out(cfg, COHORT))?).map_err(fail(S))?;
    let pairs = read_anchors(S, cfg)?;
    let presence = read_presence(S, cfg)?;
    let categories = read_categories(S, cfg)?;
    let expect = match &cfg.report.naics {
        Some(p) => NaicsExpectation::from_csv(open_input(S, p)?).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        None => NaicsExpectation::default(),
    };

    let work_days: BTreeMap<(&str, &str), usize> = presence
        .iter()
        .filter(|r| r.anchor_role == AnchorRole::Work)
        .map(|r| ((r.user_id.as_str(), r.window_label.as_str()), r.present_workdays))
        .collect();
    let mut groups = WorkdayGroups::new();
    for (user, cat) in &categories {
        for w in &cfg.windows {
            let days = work_days.get(&(user.as_str(), w.label.as_str())).copied().unwrap_or(0);
            groups.entry((*cat, w.label.clone())).or_default().push(days as u32);
        }
    }
    let stats = workday_quantiles(&groups);
    let mut naics = Vec::new();
    if cfg.report.naics.is_some() {
        let missing: BTreeSet<Category> = stats.iter().map(|s| s.category).filter(|c| !expect.0.contains_key(c)).collect();
        for c in missing {
            log::warn!("report: no in-person expectation for {c}");
        }
    }
    for w in &cfg.windows {
        let rows: Vec<_> = stats.iter().filter(|s| s.window_label == w.label).cloned().collect();
        naics.extend(naics_comparison(&rows, &expect, w.workdays()));
    }
    let bundle = ReportBundle {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.reproducibility_record(),
        windows: cfg
            .windows
            .iter()
            .map(|w| WindowSummary {
                label: w.label.clone(),
                workdays: w.workdays(),
            })
            .collect(),
        cohort_size: cohort.len(),
        anchored_users: pairs.len(),
        category_counts: category_counts(categories.values().copied()),
        workday_stats: stats,
        distances: distance_distribution(&pairs, cfg.report.histogram_bin_km),
        naics,
        anchors: pairs,
    };
    let files = analytics::emit_reports(&out(cfg, REPORT_DIR), &bundle).map_err(fail(S))?;
    Ok(StageOutput { files })
}

/// Joins the cluster and categorize artifacts into per-user inference rows.
pub fn inferred_users(cfg: &RunConfig) -> Result<Vec<InferredUser>, PipelineError> {
    const S: &str = "score";
    let pairs = read_anchors(S, cfg)?;
    let categories = read_categories(S, cfg)?;
    let mut workdays: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in read_presence(S, cfg)? {
        if r.anchor_role == AnchorRole::Work {
            workdays.entry(r.user_id).or_default().insert(r.window_label, r.present_workdays);
        }
    }
    Ok(pairs
        .into_iter()
        .map(|a| InferredUser {
            category: categories.get(&a.user_id).copied(),
            workdays: workdays.remove(&a.user_id).unwrap_or_default(),
            anchors: a,
        })
        .collect())
}

/// Scores the run against the synth ground truth.
pub fn run_score(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    const S: &str = "score";
    let truth = synthgen::read_ground_truth(open_input(S, &out(cfg, SYNTH_TRUTH))?).map_err(fail(S))?;
    let inferred = inferred_users(cfg)?;
    let report = synthgen::score(
        &inferred,
        &truth,
        &cfg.cohort.baseline_window_label,
        cfg.anchors.min_work_days,
        cfg.anchors.presence_radius / 2.0,
    )
    .map_err(fail(S))?;
    log::info!(
        "score: {:.1}% anchors recovered, {:.1}% categories correct",
        100.0 * report.recovery_rate(),
        100.0 * report.category_accuracy()
    );
    let file = write_output(S, &out(cfg, RECOVERY), |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(fail(S))?;
        w.write_all(b"\n").map_err(fail(S))
    })?;
    Ok(StageOutput { files: vec![file] })
}

pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<StageOutput, PipelineError> {
    match stage {
        Stage::Synth => run_synth(cfg),
        Stage::Ingest => run_ingest(cfg),
        Stage::Cluster => run_cluster(cfg),
        Stage::Geocode => run_geocode(cfg),
        Stage::Categorize => run_categorize(cfg),
        Stage::Report => run_report(cfg),
    }
}

/// Runs every stage in order. The synth stage (and scoring) only runs when
/// no input ping file is configured.
pub fn run_pipeline(cfg: &RunConfig) -> Result<StageOutput, PipelineError> {
    let synthetic = cfg.input.pings.is_none();
    let mut all = StageOutput::default();
    for stage in Stage::ALL {
        if stage == Stage::Synth && !synthetic {
            continue;
        }
        all.files.extend(run_stage(cfg, stage)?.files);
    }
    if synthetic {
        all.files.extend(run_score(cfg)?.files);
    }
    Ok(all)
}

/// Runs `f` on a pool of `workers` threads (0 means one per core).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}
