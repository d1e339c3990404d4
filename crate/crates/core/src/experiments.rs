//! Monte-Carlo evaluation: random scenes, every method on the same
//! observations, scored per frequency and aggregated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_direction_grid, build_hybrid, DirectionGrid, HybridConfig, MicArray, SubArray, Vec3, MAX_GRID_LEVEL};
use crate::io::write_atomic;
use crate::metrics::{score_map, EnergyMap, MismatchKernel};
use crate::modal::{svd_decompose, truncate, ModalBasis};
use crate::propagation::{draw_source_directions, plane_wave_matrix, synthesize_scene, ObservationBlock, RoomSpec, SceneSpec, SourcesSpec, TransferMatrix};
use crate::rng::{self, tag};
use crate::solver::{recover, recover_joint, IrlsParams, SparseSolution};

/// Environment variable capping worker threads (0 = automatic).
pub const THREADS_ENV: &str = "MODAL_SR_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Sparse recovery on the spherical array alone.
    SmaOnly,
    /// Sparse recovery on the concatenated hybrid transfer matrix.
    Joint,
    /// Sparse recovery on the first K whitened modes of the hybrid array.
    Modal(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::SmaOnly => f.write_str("sma"),
            Method::Joint => f.write_str("joint"),
            Method::Modal(k) => write!(f, "modal-{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sma" | "sma_only" | "sma-only" => Ok(Method::SmaOnly),
            "joint" => Ok(Method::Joint),
            _ => s
                .strip_prefix("modal-")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Method::Modal)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}' (expected sma, joint or modal-K)"))),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub source_counts: Vec<usize>,
    pub distances_m: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_freqs")]
    pub freqs_hz: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomSpec>,
    #[serde(default)]
    pub free_field: bool,
    /// `null` means noiseless.
    #[serde(default = "default_snr")]
    pub snr_db: Option<f64>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_grid_level")]
    pub grid_level: usize,
    /// Move drawn source directions onto their nearest grid vertex.
    #[serde(default)]
    pub snap_to_grid: bool,
    #[serde(default)]
    pub array: HybridConfig,
    #[serde(default)]
    pub irls: IrlsParams,
}

fn default_trials() -> usize {
    10
}

fn default_freqs() -> Vec<f64> {
    (1..=20).map(|i| 200.0 * i as f64).collect()
}

fn default_snr() -> Option<f64> {
    Some(30.0)
}

fn default_frames() -> usize {
    32
}

fn default_grid_level() -> usize {
    3
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::SmaOnly, Method::Joint, Method::Modal(9), Method::Modal(16), Method::Modal(25)],
            source_counts: vec![2, 10],
            distances_m: vec![1.5, 2.5, 3.5],
            trials: default_trials(),
            freqs_hz: default_freqs(),
            room: Some(RoomSpec::default()),
            free_field: false,
            snr_db: default_snr(),
            frames: default_frames(),
            master_seed: 0,
            grid_level: default_grid_level(),
            snap_to_grid: false,
            array: HybridConfig::default(),
            irls: IrlsParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("methods", self.methods.is_empty()),
            ("source_counts", self.source_counts.is_empty()),
            ("distances_m", self.distances_m.is_empty()),
            ("freqs_hz", self.freqs_hz.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::InvalidConfig(format!("{name} must not be empty")));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.source_counts.contains(&0) {
            return Err(Error::InvalidConfig("source counts must be at least 1".into()));
        }
        if let Some(f) = self.freqs_hz.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidConfig(format!("frequency {f} is not positive")));
        }
        if !self.freqs_hz.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig("freqs_hz must be strictly increasing".into()));
        }
        if self.grid_level > MAX_GRID_LEVEL {
            return Err(Error::InvalidConfig(format!("grid_level {} exceeds {MAX_GRID_LEVEL}", self.grid_level)));
        }
        self.irls.validate()?;
        for &d in &self.distances_m {
            self.scene(self.source_counts[0], d, 0).validate()?;
        }
        Ok(())
    }

    fn scene(&self, count: usize, distance: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            sources: SourcesSpec { count, distance_m: distance, directions: None },
            room: self.room.clone(),
            free_field: self.free_field,
            frames: self.frames,
            snr_db: self.snr_db,
            seed,
        }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        for &sources in &self.source_counts {
            for &distance_m in &self.distances_m {
                out.push(Condition { sources, distance_m });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub sources: usize,
    pub distance_m: f64,
}

impl Condition {
    /// Scene seed for one trial of this condition.
    pub fn trial_seed(&self, master_seed: u64, trial: usize) -> u64 {
        rng::derive(master_seed, &[tag::TRIAL, self.sources as u64, self.distance_m.to_bits(), trial as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: Method,
    pub frequency_hz: f64,
    pub distance_m: f64,
    pub sources: usize,
    pub trial: usize,
    pub mismatch: f64,
    pub angular_error_deg: f64,
    pub miss_rate: f64,
    /// Set when the method failed; the metric fields are then NaN.
    pub error: Option<String>,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: Method,
    pub frequency_hz: f64,
    pub distance_m: f64,
    pub sources: usize,
    /// Rows that contributed (failed rows are excluded).
    pub count: usize,
    pub failed: usize,
    pub mismatch: MeanSe,
    pub angular_error_deg: MeanSe,
    pub miss_rate: MeanSe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / sqrt n).
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> MeanSe {
        let n = values.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return MeanSe { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        MeanSe { mean, se: (var / n as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mismatch,
    AngularError,
    MissRate,
}

impl Metric {
    pub fn of(self, row: &ResultRow) -> f64 {
        match self {
            Metric::Mismatch => row.mismatch,
            Metric::AngularError => row.angular_error_deg,
            Metric::MissRate => row.miss_rate,
        }
    }
}

/// Per-frequency dictionaries shared by all trials.
pub struct FrequencyModel {
    pub frequency: f64,
    pub hybrid: TransferMatrix,
    pub sma: TransferMatrix,
    bases: BTreeMap<usize, ModalBasis>,
}

impl FrequencyModel {
    pub fn basis(&self, k: usize) -> Option<&ModalBasis> {
        self.bases.get(&k)
    }
}

/// Everything a trial needs besides its seed.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub array: MicArray,
    pub grid: DirectionGrid,
    pub kernel: MismatchKernel,
    pub models: Vec<FrequencyModel>,
    sma_rows: Vec<usize>,
}

impl Workbench {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let array = build_hybrid(&config.array)?;
        let grid = build_direction_grid(config.grid_level)?;
        let kernel = MismatchKernel::new(&grid);
        let sma_rows = array.indices_of(SubArray::Sma);
        let mut ks: Vec<usize> = config
            .methods
            .iter()
            .filter_map(|m| match m {
                Method::Modal(k) => Some(*k),
                _ => None,
            })
            .collect();
        ks.sort_unstable();
        ks.dedup();
        let models = config
            .freqs_hz
            .par_iter()
            .map(|&f| {
                let hybrid = plane_wave_matrix(&array, &grid, f)?;
                let sma = hybrid.select_rows(&sma_rows);
                let mut bases = BTreeMap::new();
                if !ks.is_empty() {
                    let full = svd_decompose(&hybrid)?;
                    for &k in &ks {
                        // an oversized K is reported per row, not here
                        if let Ok(b) = truncate(&full, k) {
                            bases.insert(k, b);
                        }
                    }
                }
                Ok(FrequencyModel { frequency: f, hybrid, sma, bases })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), array, grid, kernel, models, sma_rows })
    }

    /// Synthesizes the scene for one trial at every configured frequency.
    pub fn observations(&self, condition: &Condition, trial: usize) -> Result<Vec<ObservationBlock>> {
        let seed = condition.trial_seed(self.config.master_seed, trial);
        let mut scene = self.config.scene(condition.sources, condition.distance_m, seed);
        if self.config.snap_to_grid {
            let mut rng = rng::stream(seed, &[tag::DIRECTIONS]);
            let dirs = draw_source_directions(condition.sources, condition.distance_m, self.config.room.as_ref(), &mut rng)?;
            let mut snapped: Vec<[f64; 3]> = Vec::new();
            for d in dirs {
                let v = self.grid.direction(self.grid.nearest(&d));
                let p = [v.x, v.y, v.z];
                if !snapped.contains(&p) {
                    snapped.push(p);
                }
            }
            scene.sources.count = snapped.len();
            scene.sources.directions = Some(snapped);
        }
        synthesize_scene(&scene, &self.array, &self.config.freqs_hz, seed)
    }

    pub fn solve(&self, method: Method, model: &FrequencyModel, block: &ObservationBlock) -> Result<SparseSolution> {
        let params = &self.config.irls;
        match method {
            Method::SmaOnly => {
                let rows = block.snapshots.select_rows(self.sma_rows.iter());
                let sma_block = ObservationBlock { snapshots: rows, ..block.clone() };
                recover_joint(&sma_block, &model.sma, params)
            }
            Method::Joint => recover_joint(block, &model.hybrid, params),
            Method::Modal(k) => {
                let basis = model.basis(k).ok_or_else(|| {
                    Error::InvalidConfig(format!("modal-{k} exceeds the rank at {} Hz", model.frequency))
                })?;
                recover(block, basis, params)
            }
        }
    }

    fn score(&self, method: Method, model: &FrequencyModel, block: &ObservationBlock, condition: &Condition, trial: usize) -> ResultRow {
        let truth: Vec<Vec3> = block.truth.iter().map(|t| t.direction()).collect();
        let scored = self
            .solve(method, model, block)
            .and_then(|sol| EnergyMap::new(sol.energy, method.to_string()))
            .and_then(|map| score_map(&self.grid, &self.kernel, &map, &truth));
        let mut row = ResultRow {
            method,
            frequency_hz: model.frequency,
            distance_m: condition.distance_m,
            sources: condition.sources,
            trial,
            mismatch: f64::NAN,
            angular_error_deg: f64::NAN,
            miss_rate: f64::NAN,
            error: None,
        };
        match scored {
            Ok(s) => {
                row.mismatch = s.mismatch;
                row.angular_error_deg = s.mean_angular_error_deg;
                row.miss_rate = s.miss_rate;
            }
            Err(e) => {
                log::warn!("{method} failed at {} Hz (trial {trial}): {e}", model.frequency);
                row.error = Some(format!("{}: {e}", e.kind()));
            }
        }
        row
    }

    /// Rows for one trial, ordered by frequency then configured method order.
    pub fn run_trial(&self, condition: &Condition, trial: usize) -> Result<Vec<ResultRow>> {
        let blocks = self.observations(condition, trial)?;
        let per_freq: Vec<Vec<ResultRow>> = self
            .models
            .par_iter()
            .zip(blocks.par_iter())
            .map(|(model, block)| {
                self.config.methods.iter().map(|&m| self.score(m, model, block, condition, trial)).collect()
            })
            .collect();
        Ok(per_freq.into_iter().flatten().collect())
    }
}

/// Convenience wrapper that builds the dictionaries for a single trial.
pub fn run_trial(config: &ExperimentConfig, condition: &Condition, trial: usize) -> Result<Vec<ResultRow>> {
    with_thread_cap(|| Workbench::new(config)?.run_trial(condition, trial))
}

/// Runs every (condition, trial) cell and appends per-cell aggregates.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<ResultTable> {
    with_thread_cap(|| {
        let bench = Workbench::new(config)?;
        let cells: Vec<(usize, Condition, usize)> = config
            .conditions()
            .into_iter()
            .enumerate()
            .flat_map(|(ci, c)| (0..config.trials).map(move |t| (ci, c, t)))
            .collect();
        let mut keyed: Vec<((usize, usize), Vec<ResultRow>)> = cells
            .par_iter()
            .map(|&(ci, c, t)| Ok(((ci, t), bench.run_trial(&c, t)?)))
            .collect::<Result<_>>()?;
        keyed.sort_by_key(|(k, _)| *k);
        let rows: Vec<ResultRow> = keyed.into_iter().flat_map(|(_, r)| r).collect();
        let aggregates = aggregate(config, &rows);
        Ok(ResultTable { rows, aggregates })
    })
}

fn with_thread_cap<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV} must be a non-negative integer, got '{v}'")))?,
        Err(_) => 0,
    };
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Mean and standard error per (method, condition, frequency) over trials.
pub fn aggregate(config: &ExperimentConfig, rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for c in config.conditions() {
        for &f in &config.freqs_hz {
            for &m in &config.methods {
                let cell: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| r.method == m && r.frequency_hz == f && r.sources == c.sources && r.distance_m == c.distance_m)
                    .collect();
                let ok: Vec<&ResultRow> = cell.iter().copied().filter(|r| r.is_ok()).collect();
                let stat = |metric: Metric| MeanSe::of(&ok.iter().map(|r| metric.of(r)).collect::<Vec<_>>());
                out.push(AggregateRow {
                    method: m,
                    frequency_hz: f,
                    distance_m: c.distance_m,
                    sources: c.sources,
                    count: ok.len(),
                    failed: cell.len() - ok.len(),
                    mismatch: stat(Metric::Mismatch),
                    angular_error_deg: stat(Metric::AngularError),
                    miss_rate: stat(Metric::MissRate),
                });
            }
        }
    }
    out
}

/// Band average per trial (over the frequencies in `band`), then mean and
/// standard error across the selected trials. Trials are keyed by
/// (source count, distance, trial index); failed rows are skipped.
pub fn band_summary(rows: &[ResultRow], method: Method, metric: Metric, band: (f64, f64), select: impl Fn(&ResultRow) -> bool) -> MeanSe {
    let mut per_trial: BTreeMap<(usize, u64, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if r.method != method || !r.is_ok() || r.frequency_hz < band.0 || r.frequency_hz > band.1 || !select(r) {
            continue;
        }
        let e = per_trial.entry((r.sources, r.distance_m.to_bits(), r.trial)).or_insert((0.0, 0));
        e.0 += metric.of(r);
        e.1 += 1;
    }
    let means: Vec<f64> = per_trial.values().map(|(s, n)| s / *n as f64).collect();
    MeanSe::of(&means)
}

/// Centered boxcar over all points within `width / 2` of each frequency.
pub fn moving_average(series: &[(f64, f64)], width: f64) -> Result<Vec<(f64, f64)>> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing width must be positive, got {width}")));
    }
    let half = width / 2.0;
    Ok(series
        .iter()
        .map(|&(f, _)| {
            let window: Vec<f64> = series.iter().filter(|(g, _)| (g - f).abs() <= half).map(|p| p.1).collect();
            (f, window.iter().sum::<f64>() / window.len() as f64)
        })
        .collect())
}

/// Smoothing window for the per-figure tables.
pub const FIGURE_SMOOTHING_HZ: f64 = 200.0;

/// Renders a table as CSV, preceded by an optional `# ` comment line.
pub fn csv_table(header: Option<&str>, columns: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(columns).map_err(csv_err)?;
    for r in records {
        w.write_record(&r).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    let mut s = header.map(|h| format!("# {h}\n")).unwrap_or_default();
    s.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(s)
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn rows_csv(rows: &[ResultRow], header: Option<&str>) -> Result<String> {
    let columns = ["method", "frequency_hz", "distance_m", "sources", "trial", "mismatch", "angular_error_deg", "miss_rate", "error"];
    csv_table(
        header,
        &columns,
        rows.iter().map(|r| {
            vec![
                r.method.to_string(),
                r.frequency_hz.to_string(),
                r.distance_m.to_string(),
                r.sources.to_string(),
                r.trial.to_string(),
                fmt_opt(r.mismatch),
                fmt_opt(r.angular_error_deg),
                fmt_opt(r.miss_rate),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn aggregates_csv(aggs: &[AggregateRow], header: Option<&str>) -> Result<String> {
    let columns = [
        "method",
        "frequency_hz",
        "distance_m",
        "sources",
        "count",
        "failed",
        "mismatch_mean",
        "mismatch_se",
        "angular_error_mean_deg",
        "angular_error_se_deg",
        "miss_rate_mean",
        "miss_rate_se",
    ];
    csv_table(
        header,
        &columns,
        aggs.iter().map(|a| {
            vec![
                a.method.to_string(),
                a.frequency_hz.to_string(),
                a.distance_m.to_string(),
                a.sources.to_string(),
                a.count.to_string(),
                a.failed.to_string(),
                fmt_opt(a.mismatch.mean),
                fmt_opt(a.mismatch.se),
                fmt_opt(a.angular_error_deg.mean),
                fmt_opt(a.angular_error_deg.se),
                fmt_opt(a.miss_rate.mean),
                fmt_opt(a.miss_rate.se),
            ]
        }),
    )
}

/// One column per method: the metric averaged over source counts and trials
/// at the given distance, smoothed over frequency.
pub fn figure_csv(config: &ExperimentConfig, rows: &[ResultRow], metric: Metric, distance: f64, header: Option<&str>) -> Result<String> {
    let mut columns = Vec::new();
    for &m in &config.methods {
        let series: Vec<(f64, f64)> = config
            .freqs_hz
            .iter()
            .map(|&f| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == m && r.frequency_hz == f && r.distance_m == distance && r.is_ok())
                    .map(|r| metric.of(r))
                    .collect();
                (f, MeanSe::of(&vals).mean)
            })
            .collect();
        columns.push(moving_average(&series, FIGURE_SMOOTHING_HZ)?);
    }
    let names: Vec<String> = std::iter::once("frequency_hz".to_string()).chain(config.methods.iter().map(Method::to_string)).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let records = config.freqs_hz.iter().enumerate().map(|(i, f)| {
        std::iter::once(f.to_string()).chain(columns.iter().map(|c| fmt_opt(c[i].1))).collect()
    });
    csv_table(header, &names, records)
}

/// Writes results.csv, aggregates.csv and the per-distance figure tables.
/// Returns the paths written.
pub fn write_sweep_outputs(dir: &Path, config: &ExperimentConfig, table: &ResultTable, header: Option<&str>) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        (dir.join("results.csv"), rows_csv(&table.rows, header)?),
        (dir.join("aggregates.csv"), aggregates_csv(&table.aggregates, header)?),
    ];
    for &d in &config.distances_m {
        files.push((dir.join(format!("fig4-dist{d}.csv")), figure_csv(config, &table.rows, Metric::Mismatch, d, header)?));
        files.push((dir.join(format!("fig5-dist{d}.csv")), figure_csv(config, &table.rows, Metric::AngularError, d, header)?));
    }
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{LmaConfig, SmaConfig};
    use approx::assert_abs_diff_eq;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            methods: vec![Method::SmaOnly, Method::Joint, Method::Modal(9)],
            source_counts: vec![1],
            distances_m: vec![2.0],
            trials: 2,
            freqs_hz: vec![1000.0, 1500.0],
            room: None,
            free_field: true,
            snr_db: None,
            frames: 4,
            master_seed: 11,
            grid_level: 2,
            snap_to_grid: true,
            array: HybridConfig {
                sma: SmaConfig { count: 32, radius_m: 0.1 },
                lma: LmaConfig { arrays: 2, count_each: 4, ..HybridConfig::default().lma },
            },
            irls: IrlsParams::default(),
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::SmaOnly, Method::Joint, Method::Modal(16)] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("sma_only".parse::<Method>().unwrap(), Method::SmaOnly);
        for bad in ["modal-0", "modal-x", "pca"] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&vec![Method::Modal(25)]).unwrap();
        assert_eq!(json, "[\"modal-25\"]");
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.methods.clear();
        assert!(matches!(run_monte_carlo(&c), Err(Error::InvalidConfig(_))));
        let mut c = small_config();
        c.trials = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.freqs_hz = vec![500.0, 400.0];
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_defaults() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"methods": ["sma", "modal-16"], "source_counts": [2], "distances_m": [1.5], "room": {"dims_m": [10, 8, 3], "rt60_s": 0.3}}"#,
        )
        .unwrap();
        assert_eq!(c.trials, 10);
        assert_eq!(c.freqs_hz.len(), 20);
        assert_eq!(c.freqs_hz[0], 200.0);
        assert_eq!(c.freqs_hz[19], 4000.0);
        assert_eq!(c.snr_db, Some(30.0));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn moving_average_cases() {
        let s = [(100.0, 0.0), (200.0, 1.0), (300.0, 0.0)];
        let m = moving_average(&s, 200.0).unwrap();
        assert_abs_diff_eq!(m[1].1, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[0].1, 0.5, epsilon = 1e-15);
        assert_eq!(moving_average(&s, 50.0).unwrap(), s.to_vec());
        let flat = [(1.0, 2.5), (2.0, 2.5), (7.0, 2.5)];
        assert_eq!(moving_average(&flat, 10.0).unwrap(), flat.to_vec());
        assert!(moving_average(&s, 0.0).is_err());
    }

    #[test]
    fn mean_se() {
        let s = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(s.mean, 2.5);
        assert_abs_diff_eq!(s.se, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
        assert_eq!(MeanSe::of(&[7.0]).se, 0.0);
    }

    #[test]
    fn free_field_single_source_is_exact() {
        let c = small_config();
        let table = run_monte_carlo(&c).unwrap();
        assert_eq!(table.rows.len(), 3 * 2 * 2);
        for r in &table.rows {
            assert!(r.is_ok(), "{r:?}");
            assert!(r.mismatch < 0.01, "{r:?}");
            assert_eq!(r.angular_error_deg, 0.0, "{r:?}");
        }
    }

    #[test]
    fn deterministic_and_aggregates_consistent() {
        let mut c = small_config();
        c.source_counts = vec![2, 3];
        c.free_field = false;
        c.room = Some(RoomSpec::default());
        c.snr_db = Some(20.0);
        c.snap_to_grid = false;
        let a = run_monte_carlo(&c).unwrap();
        let b = run_monte_carlo(&c).unwrap();
        assert_eq!(rows_csv(&a.rows, None).unwrap(), rows_csv(&b.rows, None).unwrap());
        assert_eq!(a.rows.len(), 3 * 2 * 2 * 2);
        assert_eq!(a.aggregates.len(), 3 * 2 * 2);
        for agg in &a.aggregates {
            let vals: Vec<f64> = a
                .rows
                .iter()
                .filter(|r| r.method == agg.method && r.frequency_hz == agg.frequency_hz && r.sources == agg.sources)
                .map(|r| r.mismatch)
                .collect();
            assert_eq!(vals.len(), 2);
            assert_abs_diff_eq!(agg.mismatch.mean, vals.iter().sum::<f64>() / 2.0, epsilon = 1e-12);
            assert!((0.0..=1.0).contains(&agg.mismatch.mean));
        }
        // a single trial reproduces its rows in the full run
        let cond = c.conditions()[1];
        let single = run_trial(&c, &cond, 1).unwrap();
        let from_table: Vec<ResultRow> = a.rows.iter().filter(|r| r.sources == cond.sources && r.trial == 1).cloned().collect();
        assert_eq!(single, from_table);
    }

    #[test]
    fn oversized_modal_rank_flags_rows() {
        let mut c = small_config();
        c.methods = vec![Method::Modal(500), Method::SmaOnly];
        c.trials = 1;
        let t = run_monte_carlo(&c).unwrap();
        assert!(t.rows.iter().filter(|r| r.method == Method::Modal(500)).all(|r| !r.is_ok() && r.mismatch.is_nan()));
        assert!(t.rows.iter().filter(|r| r.method == Method::SmaOnly).all(ResultRow::is_ok));
        assert_eq!(t.aggregates.iter().find(|a| a.method == Method::Modal(500)).unwrap().failed, 1);
    }

    #[test]
    fn band_summary_averages_per_trial() {
        let row = |trial, f, e| ResultRow {
            method: Method::Joint,
            frequency_hz: f,
            distance_m: 1.0,
            sources: 2,
            trial,
            mismatch: e,
            angular_error_deg: 0.0,
            miss_rate: 0.0,
            error: None,
        };
        let rows = vec![row(0, 100.0, 0.2), row(0, 200.0, 0.4), row(1, 100.0, 0.6), row(1, 200.0, 0.8), row(1, 900.0, 5.0)];
        let s = band_summary(&rows, Method::Joint, Metric::Mismatch, (0.0, 500.0), |_| true);
        assert_abs_diff_eq!(s.mean, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.se, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn csv_quotes_error_messages() {
        let row = ResultRow {
            method: Method::Modal(9),
            frequency_hz: 250.0,
            distance_m: 1.5,
            sources: 2,
            trial: 0,
            mismatch: f64::NAN,
            angular_error_deg: f64::NAN,
            miss_rate: f64::NAN,
            error: Some("rank-deficient: mode 3, sigma 0".into()),
        };
        let text = rows_csv(&[row], Some("note")).unwrap();
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rec = reader.records().next().unwrap().unwrap();
        assert_eq!(&rec[0], "modal-9");
        assert_eq!(&rec[5], "");
        assert_eq!(&rec[8], "rank-deficient: mode 3, sigma 0");
    }

    #[test]
    fn sweep_files_written() {
        let c = small_config();
        let t = run_monte_carlo(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_sweep_outputs(dir.path(), &c, &t, None).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["results.csv", "aggregates.csv", "fig4-dist2.csv", "fig5-dist2.csv"]);
        let fig = std::fs::read_to_string(dir.path().join("fig4-dist2.csv")).unwrap();
        assert!(fig.starts_with("frequency_hz,sma,joint,modal-9\n1000,"));
    }
}
