//! Dataset ingestion, windowing, the chronological split, upsampling, and a
//! synthetic generator with planted view-group structure.
//!
//! A dataset is described by a JSON manifest naming tasks, their views, and
//! one CSV file per (task, view). Series CSVs carry `ts_ms` (integer
//! milliseconds, strictly increasing), one column per channel, and a trailing
//! integer label column. Views of a task are aligned by inner join on
//! timestamp (unmatched rows dropped and counted); labels come from the first
//! view. Each contiguous same-label segment is split 10/40/10/40 into
//! labeled-train / unlabeled-train / validation / test by row count (floors,
//! remainder to test); segments too short for all four parts are excluded.
//! Windows sit on the global grid 0, s, 2s, … and are emitted only when all
//! rows share one label and one split tag.

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: usize, msg: String },
    #[error("{path}:{line}: timestamp not strictly increasing")]
    NonMonotonicTimestamp { path: String, line: usize },
    #[error("{path}:{line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { path: String, line: usize, label: i64, classes: usize },
    #[error("task {0}: views share no timestamps")]
    EmptyJoin(String),
    #[error("invalid manifest: {0}")]
    BadManifest(String),
    #[error("window of {window} rows exceeds the {rows}-row series")]
    WindowTooLong { window: usize, rows: usize },
    #[error("class {0} has no windows to upsample from")]
    EmptyClass(usize),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Manifest

pub const DEFAULT_WINDOW_SECONDS: f64 = 5.0;

fn default_window_seconds() -> f64 {
    DEFAULT_WINDOW_SECONDS
}

fn default_label_column() -> String {
    "label".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate_hz: f64,
    #[serde(default = "default_window_seconds")]
    pub window_seconds: f64,
    /// Defaults to the window length (non-overlapping windows).
    #[serde(default)]
    pub stride_seconds: Option<f64>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub tasks: Vec<TaskManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub views: Vec<ViewManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewManifest {
    pub name: String,
    pub channels: usize,
    pub file: String,
}

impl Manifest {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadManifest(m));
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        if !(self.window_seconds > 0.0) {
            return bad("window_seconds must be positive".into());
        }
        if let Some(s) = self.stride_seconds {
            if !(s > 0.0) {
                return bad("stride_seconds must be positive".into());
            }
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        let first = &self.tasks[0];
        for t in &self.tasks {
            if t.classes.len() < 2 {
                return bad(format!("task {} needs at least 2 classes", t.name));
            }
            if t.views.is_empty() {
                return bad(format!("task {} has no views", t.name));
            }
            if t.views.len() != first.views.len() {
                return bad(format!(
                    "task {} has {} views but task {} has {}",
                    t.name,
                    t.views.len(),
                    first.name,
                    first.views.len()
                ));
            }
            for (v, (a, b)) in t.views.iter().zip(&first.views).enumerate() {
                if a.channels == 0 {
                    return bad(format!("view {} of task {} has 0 channels", a.name, t.name));
                }
                if a.channels != b.channels {
                    return bad(format!(
                        "view {v} channel count differs between tasks {} and {}",
                        t.name, first.name
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whole-row window/stride lengths implied by the rates, or an error if
    /// they do not land on a row boundary.
    pub fn grid(&self) -> Result<(usize, usize), DataError> {
        let rows = |seconds: f64, what: &str| -> Result<usize, DataError> {
            let r = seconds * self.sample_rate_hz;
            let rounded = r.round();
            if (r - rounded).abs() > 1e-6 || rounded < 1.0 {
                Err(DataError::BadManifest(format!(
                    "{what} of {seconds}s at {}Hz is {r} rows; need a whole positive count",
                    self.sample_rate_hz
                )))
            } else {
                Ok(rounded as usize)
            }
        };
        let w = rows(self.window_seconds, "window")?;
        let s = rows(self.stride_seconds.unwrap_or(self.window_seconds), "stride")?;
        Ok((w, s))
    }
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    LabeledTrain,
    UnlabeledTrain,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::LabeledTrain, Split::UnlabeledTrain, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::LabeledTrain => "labeled",
            Split::UnlabeledTrain => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.iter().copied().find(|sp| sp.as_str() == s)
    }
}

pub struct SplitTags {
    /// Per-row tag; `None` marks rows of segments too short to split.
    pub tags: Vec<Option<Split>>,
    pub excluded_segments: usize,
}

/// Tags each maximal same-label segment 10/40/10/40 in chronological order
/// (labeled / unlabeled / val / test). Part sizes are integer floors of the
/// fractions, remainder to test; segments where any part would be empty are
/// excluded entirely.
pub fn chrono_split(labels: &[usize]) -> SplitTags {
    let mut tags = vec![None; labels.len()];
    let mut excluded = 0;
    let mut start = 0;
    while start < labels.len() {
        let mut end = start + 1;
        while end < labels.len() && labels[end] == labels[start] {
            end += 1;
        }
        let n = end - start;
        let l = n / 10;
        let u = n * 2 / 5;
        let v = n / 10;
        let t = n - l - u - v;
        if l == 0 || u == 0 || v == 0 || t == 0 {
            excluded += 1;
        } else {
            for (i, tag) in tags[start..end].iter_mut().enumerate() {
                *tag = Some(if i < l {
                    Split::LabeledTrain
                } else if i < l + u {
                    Split::UnlabeledTrain
                } else if i < l + u + v {
                    Split::Val
                } else {
                    Split::Test
                });
            }
        }
        start = end;
    }
    SplitTags { tags, excluded_segments: excluded }
}

// ---------------------------------------------------------------------------
// Series ingestion

/// One parsed series CSV.
pub struct RawSeries {
    pub ts: Vec<i64>,
    /// Row-major (rows × channels).
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
}

pub fn read_series(
    path: &Path,
    channels: usize,
    label_column: &str,
    n_classes: usize,
) -> Result<RawSeries, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pstr = path.display().to_string();
    let csv_err = |line: usize, msg: String| DataError::Csv { path: pstr.clone(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| csv_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != channels + 2 {
        return Err(csv_err(1, format!("expected {} columns, found {}", channels + 2, cols.len())));
    }
    if cols[0] != "ts_ms" {
        return Err(csv_err(1, format!("first column must be ts_ms, found {}", cols[0])));
    }
    if cols[channels + 1] != label_column {
        return Err(csv_err(
            1,
            format!("last column must be {label_column}, found {}", cols[channels + 1]),
        ));
    }

    let mut ts = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != channels + 2 {
            return Err(csv_err(lineno, format!("expected {} fields, found {}", channels + 2, fields.len())));
        }
        let t: i64 = fields[0]
            .parse()
            .map_err(|_| csv_err(lineno, format!("bad timestamp {}", fields[0])))?;
        if let Some(&prev) = ts.last() {
            if t <= prev {
                return Err(DataError::NonMonotonicTimestamp { path: pstr.clone(), line: lineno });
            }
        }
        ts.push(t);
        for f in &fields[1..=channels] {
            let v: f64 =
                f.parse().map_err(|_| csv_err(lineno, format!("bad value {f}")))?;
            data.push(v);
        }
        let label: i64 = fields[channels + 1]
            .parse()
            .map_err(|_| csv_err(lineno, format!("bad label {}", fields[channels + 1])))?;
        if label < 0 || label as usize >= n_classes {
            return Err(DataError::LabelOutOfRange {
                path: pstr.clone(),
                line: lineno,
                label,
                classes: n_classes,
            });
        }
        labels.push(label as usize);
    }
    if ts.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }
    Ok(RawSeries { ts, data, labels, channels })
}

/// Writes a series in the manifest CSV format. Channel headers are
/// `c0..c{n-1}`; floats use shortest round-trip formatting.
pub fn write_series_csv(
    path: &Path,
    ts: &[i64],
    data: &[f64],
    channels: usize,
    labels: &[usize],
    label_column: &str,
) -> Result<(), DataError> {
    assert_eq!(ts.len() * channels, data.len(), "row/channel count mismatch");
    assert_eq!(ts.len(), labels.len());
    let mut out = String::new();
    out.push_str("ts_ms");
    for c in 0..channels {
        let _ = write!(out, ",c{c}");
    }
    let _ = writeln!(out, ",{label_column}");
    for (r, &t) in ts.iter().enumerate() {
        let _ = write!(out, "{t}");
        for c in 0..channels {
            let _ = write!(out, ",{}", data[r * channels + c]);
        }
        let _ = writeln!(out, ",{}", labels[r]);
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Channel data of one view after the join.
pub struct ViewBlock {
    pub name: String,
    pub channels: usize,
    /// Row-major (rows × channels), rows aligned with `TaskData::ts_ms`.
    pub data: Vec<f64>,
}

/// One task's joined multi-view series.
pub struct TaskData {
    pub name: String,
    pub n_classes: usize,
    pub ts_ms: Vec<i64>,
    pub views: Vec<ViewBlock>,
    pub labels: Vec<usize>,
    /// Rows dropped from each view by the inner join.
    pub dropped_per_view: Vec<usize>,
    pub split: Vec<Option<Split>>,
    pub excluded_segments: usize,
}

/// Inner join of one task's views on timestamp. Labels come from the first
/// view; other views' label columns are ignored.
pub fn join_task(
    name: &str,
    n_classes: usize,
    view_names: Vec<String>,
    raws: Vec<RawSeries>,
) -> Result<TaskData, DataError> {
    assert!(!raws.is_empty());
    let mut joined: Vec<i64> = raws[0].ts.clone();
    for r in &raws[1..] {
        let mut out = Vec::with_capacity(joined.len().min(r.ts.len()));
        let (mut i, mut j) = (0, 0);
        while i < joined.len() && j < r.ts.len() {
            match joined[i].cmp(&r.ts[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(joined[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        joined = out;
    }
    if joined.is_empty() {
        return Err(DataError::EmptyJoin(name.to_string()));
    }

    let mut views = Vec::with_capacity(raws.len());
    let mut dropped = Vec::with_capacity(raws.len());
    let mut labels = Vec::new();
    for (v, raw) in raws.iter().enumerate() {
        let mut data = Vec::with_capacity(joined.len() * raw.channels);
        let mut j = 0;
        for &t in &joined {
            while raw.ts[j] != t {
                j += 1;
            }
            data.extend_from_slice(&raw.data[j * raw.channels..(j + 1) * raw.channels]);
            if v == 0 {
                labels.push(raw.labels[j]);
            }
            j += 1;
        }
        dropped.push(raw.ts.len() - joined.len());
        views.push(ViewBlock { name: view_names[v].clone(), channels: raw.channels, data });
    }

    let splits = chrono_split(&labels);
    Ok(TaskData {
        name: name.to_string(),
        n_classes,
        ts_ms: joined,
        views,
        labels,
        dropped_per_view: dropped,
        split: splits.tags,
        excluded_segments: splits.excluded_segments,
    })
}

// ---------------------------------------------------------------------------
// Windows

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    /// Start row on the global grid.
    pub start: usize,
    pub label: usize,
    pub split: Split,
}

/// Windows at offsets 0, s, 2s, …, emitted only when all rows share one
/// label and one split tag (excluded rows never windowed).
pub fn make_windows(
    labels: &[usize],
    split: &[Option<Split>],
    window_rows: usize,
    stride_rows: usize,
) -> Result<Vec<Window>, DataError> {
    assert!(window_rows >= 1 && stride_rows >= 1);
    assert_eq!(labels.len(), split.len());
    if window_rows > labels.len() {
        return Err(DataError::WindowTooLong { window: window_rows, rows: labels.len() });
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_rows <= labels.len() {
        let label = labels[start];
        if let Some(tag) = split[start] {
            let pure = (start..start + window_rows)
                .all(|r| labels[r] == label && split[r] == Some(tag));
            if pure {
                windows.push(Window { start, label, split: tag });
            }
        }
        start += stride_rows;
    }
    Ok(windows)
}

/// Balances class counts by resampling minority-class entries (with
/// replacement) until every class matches the majority count. `labels[i]`
/// labels `indices[i]`; originals keep their order, duplicates append in
/// class order.
pub fn upsample<R: Rng>(
    indices: &[usize],
    labels: &[usize],
    n_classes: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    assert_eq!(indices.len(), labels.len());
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (&idx, &lab) in indices.iter().zip(labels) {
        per_class[lab].push(idx);
    }
    if let Some(empty) = per_class.iter().position(|c| c.is_empty()) {
        return Err(DataError::EmptyClass(empty));
    }
    let majority = per_class.iter().map(Vec::len).max().unwrap();
    let mut out = indices.to_vec();
    for class in per_class {
        for _ in class.len()..majority {
            out.push(class[rng.gen_range(0..class.len())]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Assembled dataset

pub struct TaskDataset {
    pub data: TaskData,
    pub windows: Vec<Window>,
    pub window_rows: usize,
    pub stride_rows: usize,
}

impl TaskDataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.windows.len()).filter(|&i| self.windows[i].split == split).collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.windows[i].label).collect()
    }

    /// Flattened (batch, window_rows × channels) input for one view.
    pub fn view_batch(&self, indices: &[usize], view: usize) -> Tensor {
        let block = &self.data.views[view];
        let ch = block.channels;
        let width = self.window_rows * ch;
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            let start = self.windows[i].start * ch;
            data.extend_from_slice(&block.data[start..start + width]);
        }
        Tensor::new(vec![indices.len(), width], data)
    }

    pub fn view_batches(&self, indices: &[usize]) -> Vec<Tensor> {
        (0..self.data.views.len()).map(|v| self.view_batch(indices, v)).collect()
    }

    /// `(series, offset)` keys for fragment building; the whole task is one
    /// series, so contiguity is purely an offset condition.
    pub fn sampler_keys(&self, indices: &[usize]) -> Vec<(usize, u64)> {
        indices.iter().map(|&i| (0, self.windows[i].start as u64)).collect()
    }
}

pub struct Dataset {
    pub manifest: Manifest,
    pub tasks: Vec<TaskDataset>,
    pub window_rows: usize,
    pub stride_rows: usize,
}

impl Dataset {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_views(&self) -> usize {
        self.tasks[0].data.views.len()
    }

    /// Flattened model input width per view.
    pub fn view_dims(&self) -> Vec<usize> {
        self.tasks[0]
            .data
            .views
            .iter()
            .map(|v| v.channels * self.window_rows)
            .collect()
    }

    pub fn n_classes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.data.n_classes).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let (window_rows, stride_rows) = manifest.grid()?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for tm in &manifest.tasks {
        let mut raws = Vec::with_capacity(tm.views.len());
        for vm in &tm.views {
            raws.push(read_series(
                &dir.join(&vm.file),
                vm.channels,
                &manifest.label_column,
                tm.classes.len(),
            )?);
        }
        let names = tm.views.iter().map(|v| v.name.clone()).collect();
        let data = join_task(&tm.name, tm.classes.len(), names, raws)?;
        let windows = make_windows(&data.labels, &data.split, window_rows, stride_rows)?;
        tasks.push(TaskDataset { data, windows, window_rows, stride_rows });
    }
    Ok(Dataset { manifest, tasks, window_rows, stride_rows })
}

// ---------------------------------------------------------------------------
// Synthetic generator

pub const DEFAULT_NOISE_SCALE: f64 = 0.5;
pub const DEFAULT_PHASE_DRIFT: f64 = std::f64::consts::PI;

/// Recipe for a synthetic dataset with planted view groups.
///
/// Every window carries two tones: a class tone at `group·n_classes + c + 1`
/// cycles per window and a group carrier at `n_groups·n_classes + group + 1`
/// cycles. Both phases are redrawn every window (uniformly within
/// ±`phase_drift` around a per-(task, class, group) base), so with the
/// default full-circle drift the label is carried by *which frequency bin
/// holds energy* — an even, quadratic statistic that a linear readout cannot
/// recover. Views in the same group share the per-window phase realization
/// and differ by per-channel gains and independent sensor noise; views in
/// different groups live in disjoint frequency bands.
///
/// This makes the planted grouping the efficient routing: a shared block
/// serving one group can spend its width on energy features for that group's
/// bins, reuse them for every member view and every task (energy is phase-
/// and task-invariant), and train them on all those windows at once. A block
/// serving views from two groups must cover twice as many bins with the same
/// width on less data per bin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub n_views: usize,
    pub n_groups: usize,
    /// Planted group of each view, surjective onto 0..n_groups.
    pub group_of_view: Vec<usize>,
    pub n_classes: usize,
    /// Same-label segments per class per task. With the default of one, any
    /// two windows in different segments carry different labels, so pushing
    /// cross-fragment representations apart never fights class structure.
    pub segments_per_class: usize,
    /// Windows per segment; multiples of 10 align split boundaries with the
    /// window grid, making labeled:unlabeled exactly 1:4.
    pub segment_windows: usize,
    pub channels: usize,
    pub window_rows: usize,
    pub noise_scale: f64,
    /// Half-width, in radians, of the uniform per-window phase redraw around
    /// each tone's base phase. Values ≥ π randomize the phase completely,
    /// which removes linear class separability; small values leave the tones
    /// nearly phase-locked and the classes template-decodable.
    pub phase_drift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_tasks: usize, n_views: usize, n_groups: usize, n_classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_tasks,
            n_views,
            n_groups,
            group_of_view: (0..n_views).map(|v| v * n_groups / n_views).collect(),
            n_classes,
            segments_per_class: 1,
            segment_windows: 60,
            channels: 3,
            window_rows: 32,
            noise_scale: DEFAULT_NOISE_SCALE,
            phase_drift: DEFAULT_PHASE_DRIFT,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadSpec(m));
        if self.n_tasks == 0 || self.n_views == 0 || self.channels == 0 {
            return bad("tasks, views, and channels must be positive".into());
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.n_groups == 0 || self.n_groups > self.n_views {
            return bad(format!("group count {} must be in 1..={}", self.n_groups, self.n_views));
        }
        if self.group_of_view.len() != self.n_views {
            return bad("group_of_view length must equal n_views".into());
        }
        for g in 0..self.n_groups {
            if !self.group_of_view.contains(&g) {
                return bad(format!("group {g} has no views"));
            }
        }
        if self.group_of_view.iter().any(|g| *g >= self.n_groups) {
            return bad("group_of_view entry out of range".into());
        }
        if self.segments_per_class == 0 || self.segment_windows == 0 {
            return bad("segments_per_class and segment_windows must be positive".into());
        }
        if !(self.noise_scale >= 0.0) || !(self.phase_drift >= 0.0) {
            return bad("noise_scale and phase_drift must be nonnegative".into());
        }
        // Highest tone is the group carrier at n_groups·n_classes + n_groups
        // cycles per window; keep it under Nyquist.
        let top = self.n_groups * self.n_classes + self.n_groups;
        if 2 * top >= self.window_rows {
            return bad(format!(
                "window_rows {} too short for {} groups × {} classes (needs > {})",
                self.window_rows,
                self.n_groups,
                self.n_classes,
                2 * top
            ));
        }
        Ok(())
    }

    pub fn rows_per_task(&self) -> usize {
        self.n_classes * self.segments_per_class * self.segment_windows * self.window_rows
    }
}

const SEED_MIX: u64 = 0x9E3779B97F4A7C15;

/// Writes `manifest.json` plus one CSV per (task, view) into `dir` and
/// returns the manifest path. Byte-identical for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf, DataError> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (nt, nv, ng, nc) = (spec.n_tasks, spec.n_views, spec.n_groups, spec.n_classes);
    let w = spec.window_rows;

    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase_seed: u64 = master.gen();
    let map_seed: u64 = master.gen();
    let label_seed: u64 = master.gen();
    let noise_seed: u64 = master.gen();

    // Base phases per (task, class, group), one per tone.
    let mut prng = ChaCha8Rng::seed_from_u64(phase_seed);
    let tau = std::f64::consts::TAU;
    let phases: Vec<Vec<Vec<(f64, f64)>>> = (0..nt)
        .map(|_| {
            (0..nc)
                .map(|_| (0..ng).map(|_| (prng.gen::<f64>() * tau, prng.gen::<f64>() * tau)).collect())
                .collect()
        })
        .collect();

    // Channel gains per (task, view, channel), away from zero so every
    // channel keeps a usable signal-to-noise ratio.
    let mut mrng = ChaCha8Rng::seed_from_u64(map_seed);
    let gains: Vec<Vec<Vec<f64>>> = (0..nt)
        .map(|_| {
            (0..nv)
                .map(|_| (0..spec.channels).map(|_| 0.5 + mrng.gen::<f64>()).collect())
                .collect()
        })
        .collect();

    // Label timeline per task: shuffled class order per round, one segment
    // per class per round.
    let mut lrng = ChaCha8Rng::seed_from_u64(label_seed);
    let timelines: Vec<Vec<usize>> = (0..nt)
        .map(|_| {
            let mut segs = Vec::with_capacity(nc * spec.segments_per_class);
            for _ in 0..spec.segments_per_class {
                let mut order: Vec<usize> = (0..nc).collect();
                order.shuffle(&mut lrng);
                segs.extend(order);
            }
            segs
        })
        .collect();

    let rate = w as f64 / DEFAULT_WINDOW_SECONDS;
    let rows = spec.rows_per_task();
    let seg_rows = spec.segment_windows * w;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut task_manifests = Vec::with_capacity(nt);
    for t in 0..nt {
        let ts: Vec<i64> = (0..rows).map(|x| (x as f64 * 1000.0 / rate).round() as i64).collect();
        let labels: Vec<usize> = (0..rows).map(|x| timelines[t][x / seg_rows]).collect();
        // Per-(task, group) phase streams: two fresh draws per window, shared
        // by every view of the group so same-group views are noisy siblings
        // of one signal rather than independent problems.
        let windows_per_task = rows / w;
        let jitters: Vec<Vec<(f64, f64)>> = (0..ng)
            .map(|g| {
                let mut jrng = ChaCha8Rng::seed_from_u64(
                    phase_seed ^ ((t * ng + g) as u64 + 1).wrapping_mul(SEED_MIX),
                );
                (0..windows_per_task)
                    .map(|_| {
                        let j1 = spec.phase_drift * (2.0 * jrng.gen::<f64>() - 1.0);
                        let j2 = spec.phase_drift * (2.0 * jrng.gen::<f64>() - 1.0);
                        (j1, j2)
                    })
                    .collect()
            })
            .collect();
        let mut views = Vec::with_capacity(nv);
        for v in 0..nv {
            let g = spec.group_of_view[v];
            let mut nrng = ChaCha8Rng::seed_from_u64(
                noise_seed ^ ((t * nv + v) as u64 + 1).wrapping_mul(SEED_MIX),
            );
            let mut data = Vec::with_capacity(rows * spec.channels);
            for (x, &c) in labels.iter().enumerate() {
                let f1 = (g * nc + c + 1) as f64;
                let f2 = (ng * nc + g + 1) as f64;
                let (p1, p2) = phases[t][c][g];
                let (j1, j2) = jitters[g][x / w];
                let arg = tau * x as f64 / w as f64;
                let pattern = (arg * f1 + p1 + j1).sin() + (arg * f2 + p2 + j2).sin();
                for gain in &gains[t][v] {
                    data.push(gain * pattern + spec.noise_scale * normal.sample(&mut nrng));
                }
            }
            let file = format!("task{t}_view{v}.csv");
            write_series_csv(&dir.join(&file), &ts, &data, spec.channels, &labels, "label")?;
            views.push(ViewManifest { name: format!("view{v}"), channels: spec.channels, file });
        }
        task_manifests.push(TaskManifest {
            name: format!("task{t}"),
            classes: (0..nc).map(|c| format!("class{c}")).collect(),
            views,
        });
    }

    let manifest = Manifest {
        sample_rate_hz: rate,
        window_seconds: DEFAULT_WINDOW_SECONDS,
        stride_seconds: None,
        label_column: "label".to_string(),
        tasks: task_manifests,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn split_of_100_rows_is_10_40_10_40() {
        let labels = vec![7usize; 100];
        let s = chrono_split(&labels);
        let counts = |tag| s.tags.iter().filter(|t| **t == Some(tag)).count();
        assert_eq!(counts(Split::LabeledTrain), 10);
        assert_eq!(counts(Split::UnlabeledTrain), 40);
        assert_eq!(counts(Split::Val), 10);
        assert_eq!(counts(Split::Test), 40);
        // Chronological order: labeled block first, test block last.
        assert!(s.tags[..10].iter().all(|t| *t == Some(Split::LabeledTrain)));
        assert!(s.tags[60..].iter().all(|t| *t == Some(Split::Test)));
        assert_eq!(s.excluded_segments, 0);
    }

    #[test]
    fn split_remainder_goes_to_test() {
        let labels = vec![0usize; 103];
        let s = chrono_split(&labels);
        let counts = |tag| s.tags.iter().filter(|t| **t == Some(tag)).count();
        assert_eq!(counts(Split::LabeledTrain), 10);
        assert_eq!(counts(Split::UnlabeledTrain), 41);
        assert_eq!(counts(Split::Val), 10);
        assert_eq!(counts(Split::Test), 42);
    }

    #[test]
    fn short_segment_is_excluded_with_count() {
        // 9 rows cannot give every part a row (10% floor = 0).
        let mut labels = vec![0usize; 9];
        labels.extend(vec![1usize; 100]);
        let s = chrono_split(&labels);
        assert!(s.tags[..9].iter().all(Option::is_none));
        assert!(s.tags[9..].iter().all(Option::is_some));
        assert_eq!(s.excluded_segments, 1);
    }

    #[test]
    fn each_segment_splits_independently() {
        // Same activity in two separate segments: each gets its own
        // 10/40/10/40, so labeled rows of the second segment come after test
        // rows of the first.
        let mut labels = vec![0usize; 100];
        labels.extend(vec![1usize; 50]);
        labels.extend(vec![0usize; 100]);
        let s = chrono_split(&labels);
        assert_eq!(s.tags[150], Some(Split::LabeledTrain));
        assert_eq!(s.tags[99], Some(Split::Test));
        // Within every segment the four parts appear in order.
        for seg in [0..100, 100..150, 150..250] {
            let ranks: Vec<u8> = s.tags[seg]
                .iter()
                .map(|t| match t.unwrap() {
                    Split::LabeledTrain => 0,
                    Split::UnlabeledTrain => 1,
                    Split::Val => 2,
                    Split::Test => 3,
                })
                .collect();
            assert!(ranks.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn window_counts_match_grid() {
        let labels = vec![0usize; 100];
        let split = vec![Some(Split::Test); 100];
        assert_eq!(make_windows(&labels, &split, 20, 20).unwrap().len(), 5);
        let labels = vec![0usize; 95];
        let split = vec![Some(Split::Test); 95];
        assert_eq!(make_windows(&labels, &split, 20, 20).unwrap().len(), 4);
    }

    #[test]
    fn windows_overlapping_a_label_change_are_excluded() {
        let mut labels = vec![0usize; 50];
        labels.extend(vec![1usize; 50]);
        let split = vec![Some(Split::Test); 100];
        let wins = make_windows(&labels, &split, 20, 10).unwrap();
        let starts: Vec<usize> = wins.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 10, 20, 30, 50, 60, 70, 80]);
        assert!(wins.iter().all(|w| w.label == if w.start < 50 { 0 } else { 1 }));
    }

    #[test]
    fn windows_crossing_split_boundaries_are_excluded() {
        let labels = vec![0usize; 40];
        let mut split = vec![Some(Split::LabeledTrain); 20];
        split.extend(vec![Some(Split::Test); 20]);
        let wins = make_windows(&labels, &split, 10, 5).unwrap();
        let starts: Vec<usize> = wins.iter().map(|w| w.start).collect();
        // Offset 15 would straddle the boundary at 20.
        assert_eq!(starts, vec![0, 5, 10, 20, 25, 30]);
    }

    #[test]
    fn excluded_rows_are_never_windowed() {
        let labels = vec![0usize; 30];
        let mut split: Vec<Option<Split>> = vec![None; 10];
        split.extend(vec![Some(Split::Val); 20]);
        let wins = make_windows(&labels, &split, 10, 10).unwrap();
        let starts: Vec<usize> = wins.iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![10, 20]);
    }

    #[test]
    fn window_longer_than_series_errors() {
        let labels = vec![0usize; 5];
        let split = vec![Some(Split::Test); 5];
        assert!(matches!(
            make_windows(&labels, &split, 10, 10),
            Err(DataError::WindowTooLong { window: 10, rows: 5 })
        ));
    }

    #[test]
    fn upsample_balances_counts() {
        let indices: Vec<usize> = (0..13).collect();
        let labels = [vec![0usize; 10], vec![1usize; 3]].concat();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = upsample(&indices, &labels, 2, &mut rng).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(&out[..13], &indices[..], "originals keep their order");
        assert!(out[13..].iter().all(|i| (10..13).contains(i)), "duplicates from the minority");
        let ones = out.iter().filter(|i| **i >= 10).count();
        assert_eq!(ones, 10);
    }

    #[test]
    fn upsample_is_deterministic_and_errors_on_empty_class() {
        let indices: Vec<usize> = (0..5).collect();
        let labels = vec![0usize; 5];
        let a = upsample(&indices, &labels, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = upsample(&indices, &labels, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            upsample(&indices, &labels, 2, &mut ChaCha8Rng::seed_from_u64(9)),
            Err(DataError::EmptyClass(1))
        ));
    }

    fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    fn tiny_manifest(dir: &Path, files: &[&str]) -> PathBuf {
        let views: Vec<String> = files
            .iter()
            .enumerate()
            .map(|(i, f)| format!(r#"{{"name":"v{i}","channels":1,"file":"{f}"}}"#))
            .collect();
        let manifest = format!(
            r#"{{
              "sample_rate_hz": 2.0,
              "window_seconds": 1.0,
              "tasks": [{{"name":"t0","classes":["a","b"],"views":[{}]}}]
            }}"#,
            views.join(",")
        );
        write_file(dir, "manifest.json", &manifest)
    }

    #[test]
    fn identical_timestamps_join_without_drops() {
        let dir = TempDir::new().unwrap();
        let rows: String = (0..40).map(|i| format!("{},{}.5,0\n", i * 500, i)).collect();
        let csv = format!("ts_ms,c0,label\n{rows}");
        write_file(dir.path(), "a.csv", &csv);
        write_file(dir.path(), "b.csv", &csv);
        let m = tiny_manifest(dir.path(), &["a.csv", "b.csv"]);
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.tasks[0].data.dropped_per_view, vec![0, 0]);
        assert_eq!(ds.tasks[0].data.ts_ms.len(), 40);
        assert_eq!(ds.window_rows, 2);
    }

    #[test]
    fn inner_join_drops_and_reports_unmatched_rows() {
        let dir = TempDir::new().unwrap();
        // View a misses 5 of b's timestamps.
        let a: String = (0..35).map(|i| format!("{},1.0,0\n", i * 500)).collect();
        let b: String = (0..40).map(|i| format!("{},2.0,0\n", i * 500)).collect();
        write_file(dir.path(), "a.csv", &format!("ts_ms,c0,label\n{a}"));
        write_file(dir.path(), "b.csv", &format!("ts_ms,c0,label\n{b}"));
        let m = tiny_manifest(dir.path(), &["a.csv", "b.csv"]);
        let ds = load_dataset(&m).unwrap();
        assert_eq!(ds.tasks[0].data.ts_ms.len(), 35);
        assert_eq!(ds.tasks[0].data.dropped_per_view, vec![0, 5]);
    }

    #[test]
    fn non_monotonic_timestamps_are_rejected() {
        let dir = TempDir::new().unwrap();
        write_file(dir.path(), "a.csv", "ts_ms,c0,label\n0,1.0,0\n500,1.0,0\n500,1.0,0\n");
        let m = tiny_manifest(dir.path(), &["a.csv"]);
        match load_dataset(&m) {
            Err(DataError::NonMonotonicTimestamp { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected timestamp error, got {other:?}", other = other.err()),
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = TempDir::new().unwrap();
        write_file(dir.path(), "a.csv", "ts_ms,c0,label\n0,1.0,0\n500,1.0,2\n");
        let m = tiny_manifest(dir.path(), &["a.csv"]);
        assert!(matches!(
            load_dataset(&m),
            Err(DataError::LabelOutOfRange { label: 2, classes: 2, .. })
        ));
    }

    #[test]
    fn header_mismatches_are_rejected() {
        let dir = TempDir::new().unwrap();
        write_file(dir.path(), "a.csv", "time,c0,label\n0,1.0,0\n");
        let m = tiny_manifest(dir.path(), &["a.csv"]);
        assert!(matches!(load_dataset(&m), Err(DataError::Csv { line: 1, .. })));
        write_file(dir.path(), "a.csv", "ts_ms,c0,c1,label\n0,1.0,2.0,0\n");
        assert!(matches!(load_dataset(&m), Err(DataError::Csv { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = TempDir::new().unwrap();
        let m = tiny_manifest(dir.path(), &["nope.csv"]);
        assert!(matches!(load_dataset(&m), Err(DataError::Io { .. })));
    }

    #[test]
    fn series_round_trip_preserves_bits() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(1, 2, 2, 2, 77);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let task = &ds.tasks[0].data;
        let out = dir.path().join("rewrite.csv");
        write_series_csv(&out, &task.ts_ms, &task.views[0].data, spec.channels, &task.labels, "label")
            .unwrap();
        let re = read_series(&out, spec.channels, "label", 2).unwrap();
        assert_eq!(re.ts, task.ts_ms);
        assert_eq!(re.labels, task.labels);
        assert_eq!(re.data.len(), task.views[0].data.len());
        for (a, b) in re.data.iter().zip(&task.views[0].data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn same_seed_generates_identical_bytes() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let d3 = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(1, 2, 2, 2, 5);
        generate_synthetic(&spec, d1.path()).unwrap();
        generate_synthetic(&spec, d2.path()).unwrap();
        let mut other = spec.clone();
        other.seed = 6;
        generate_synthetic(&other, d3.path()).unwrap();
        for name in ["manifest.json", "task0_view0.csv", "task0_view1.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
        let a = std::fs::read(d1.path().join("task0_view0.csv")).unwrap();
        let c = std::fs::read(d3.path().join("task0_view0.csv")).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn same_group_views_share_signal_up_to_gain() {
        let dir = TempDir::new().unwrap();
        let mut spec = SyntheticSpec::new(1, 3, 2, 2, 40);
        spec.group_of_view = vec![0, 0, 1];
        spec.noise_scale = 0.0;
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let task = &ds.tasks[0];
        let ch0 = |v: usize| -> Vec<f64> {
            task.data.views[v].data.iter().step_by(spec.channels).copied().collect()
        };
        let (a, b, c) = (ch0(0), ch0(1), ch0(2));
        // Same group: one phase realization, so noiseless channels differ by
        // gain only — perfectly correlated without being byte-identical.
        assert!(
            a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6),
            "same-group views must still differ (per-view gains)"
        );
        let corr = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let (vx, vy): (f64, f64) = (
                x.iter().map(|a| (a - mx).powi(2)).sum(),
                y.iter().map(|b| (b - my).powi(2)).sum(),
            );
            cov / (vx * vy).sqrt()
        };
        assert!((corr(&a, &b) - 1.0).abs() < 1e-9, "same group shares the realization");
        // Different groups: disjoint frequency bands and independent phase
        // streams keep the signals nearly orthogonal.
        assert!(corr(&a, &c).abs() < 0.5, "different groups share no signal");
    }

    #[test]
    fn synthetic_split_keeps_one_to_four_label_ratio() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(2, 2, 2, 3, 8);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        for task in &ds.tasks {
            let l = task.split_indices(Split::LabeledTrain).len();
            let u = task.split_indices(Split::UnlabeledTrain).len();
            let v = task.split_indices(Split::Val).len();
            let t = task.split_indices(Split::Test).len();
            // Segments split window-aligned at 10/40/10/40 percent.
            let segs = spec.n_classes * spec.segments_per_class;
            let per = spec.segment_windows;
            assert_eq!(l, per / 10 * segs);
            assert_eq!(u, per * 2 / 5 * segs);
            assert_eq!(v, per / 10 * segs);
            assert_eq!(t, per * 2 / 5 * segs);
            assert_eq!(u, 4 * l);
        }
    }

    #[test]
    fn synthetic_windows_are_pure_and_splits_ordered() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(1, 2, 2, 2, 13);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let task = &ds.tasks[0];
        for w in &task.windows {
            for r in w.start..w.start + task.window_rows {
                assert_eq!(task.data.labels[r], w.label);
                assert_eq!(task.data.split[r], Some(w.split));
            }
        }
        // Within each segment, split ranks never decrease over time.
        let rank = |s: Split| Split::ALL.iter().position(|x| *x == s).unwrap();
        let labels = &task.data.labels;
        let mut start = 0;
        while start < labels.len() {
            let mut end = start + 1;
            while end < labels.len() && labels[end] == labels[start] {
                end += 1;
            }
            let ranks: Vec<usize> =
                task.data.split[start..end].iter().map(|t| rank(t.unwrap())).collect();
            assert!(ranks.windows(2).all(|p| p[0] <= p[1]));
            start = end;
        }
    }

    fn channel_mean(row: &[f64], channels: usize) -> Vec<f64> {
        row.chunks_exact(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect()
    }

    /// Nearest-class-mean accuracy: fit means on the labeled split, score the
    /// test split. A purely linear statistic of the raw window.
    fn template_probe(task: &TaskDataset, view: usize, n_classes: usize) -> f64 {
        let labeled = task.split_indices(Split::LabeledTrain);
        let test = task.split_indices(Split::Test);
        let train = task.view_batch(&labeled, view);
        let train_y = task.labels_of(&labeled);
        let dim = train.shape()[1];
        let mut means = vec![vec![0.0; dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (i, &y) in train_y.iter().enumerate() {
            counts[y] += 1;
            for d in 0..dim {
                means[y][d] += train.data()[i * dim + d];
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for x in m.iter_mut() {
                *x /= c as f64;
            }
        }
        let te = task.view_batch(&test, view);
        let te_y = task.labels_of(&test);
        let correct = te_y
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                let row = &te.data()[i * dim..(i + 1) * dim];
                let pred = (0..n_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = row.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                        let db: f64 = row.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                pred == y
            })
            .count();
        correct as f64 / te_y.len() as f64
    }

    /// Test-split accuracy of a decoder applied to each channel-mean window.
    fn decoder_accuracy(
        task: &TaskDataset,
        view: usize,
        channels: usize,
        decode: impl Fn(&[f64]) -> usize,
    ) -> f64 {
        let test = task.split_indices(Split::Test);
        let te = task.view_batch(&test, view);
        let te_y = task.labels_of(&test);
        let dim = te.shape()[1];
        let hits = te_y
            .iter()
            .enumerate()
            .filter(|&(i, &y)| decode(&channel_mean(&te.data()[i * dim..(i + 1) * dim], channels)) == y)
            .count();
        hits as f64 / te_y.len() as f64
    }

    #[test]
    fn class_is_energy_decodable_but_not_template_decodable() {
        // Full-circle phase drift keys the class to which frequency bin holds
        // energy: the energy decoder for a view's group band is near perfect
        // while a nearest-class-mean template stays near chance in every view.
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(1, 3, 3, 3, 21);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let task = &ds.tasks[0];
        let w = ds.window_rows;
        let (nc, ch) = (spec.n_classes, spec.channels);
        let tau = std::f64::consts::TAU;
        let chance = 1.0 / nc as f64;

        let energy_at = |series: &[f64], cycles: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (x, s) in series.iter().enumerate() {
                let arg = tau * cycles * x as f64 / w as f64;
                re += s * arg.cos();
                im += s * arg.sin();
            }
            re * re + im * im
        };
        let energy_decoder = |group: usize| {
            move |series: &[f64]| {
                (0..nc)
                    .max_by(|&a, &b| {
                        let fa = (group * nc + a + 1) as f64;
                        let fb = (group * nc + b + 1) as f64;
                        energy_at(series, fa).partial_cmp(&energy_at(series, fb)).unwrap()
                    })
                    .unwrap()
            }
        };

        for v in 0..spec.n_views {
            let g = spec.group_of_view[v];
            let e_acc = decoder_accuracy(task, v, ch, energy_decoder(g));
            assert!(e_acc > 0.9, "view {v} energy decoder accuracy {e_acc}");
            let t_acc = template_probe(task, v, nc);
            assert!(t_acc < chance + 0.2, "view {v} template probe {t_acc} — phase leak");
        }
    }

    #[test]
    fn unlabeled_windows_fragment_per_segment() {
        use crate::sampler::FragmentStore;
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(1, 2, 2, 2, 3);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let task = &ds.tasks[0];
        let unlabeled = task.split_indices(Split::UnlabeledTrain);
        let keys = task.sampler_keys(&unlabeled);
        let store = FragmentStore::build(&keys, task.stride_rows as u64, 12);
        // Each segment's unlabeled run is consecutive; runs from different
        // segments are separated by other splits, so fragments never straddle
        // a segment boundary.
        let runs = spec.n_classes * spec.segments_per_class;
        let frags_per_run = spec.segment_windows * 2 / 5 / 12;
        assert_eq!(store.n_fragments(), runs * frags_per_run);
        for f in 0..store.n_fragments() {
            let windows = store.fragment(f);
            let labels: Vec<usize> =
                windows.iter().map(|&wi| task.windows[unlabeled[wi]].label).collect();
            assert!(labels.windows(2).all(|p| p[0] == p[1]), "fragment mixes labels");
        }
    }

    #[test]
    fn dataset_dims_feed_the_model_config() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec::new(2, 3, 3, 2, 99);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.n_tasks(), 2);
        assert_eq!(ds.n_views(), 3);
        assert_eq!(ds.view_dims(), vec![96, 96, 96]);
        assert_eq!(ds.n_classes(), vec![2, 2]);
        let labeled = ds.tasks[0].split_indices(Split::LabeledTrain);
        let batch = ds.tasks[0].view_batch(&labeled[..4.min(labeled.len())], 1);
        assert_eq!(batch.shape(), &[4, 96]);
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(SyntheticSpec::new(1, 2, 2, 2, 0).validate().is_ok());
        let mut s = SyntheticSpec::new(1, 2, 2, 2, 0);
        s.n_groups = 3;
        assert!(matches!(s.validate(), Err(DataError::BadSpec(_))));
        let mut s = SyntheticSpec::new(1, 3, 2, 2, 0);
        s.group_of_view = vec![0, 0, 0];
        assert!(matches!(s.validate(), Err(DataError::BadSpec(_))));
        let mut s = SyntheticSpec::new(1, 2, 2, 2, 0);
        s.window_rows = 8;
        assert!(matches!(s.validate(), Err(DataError::BadSpec(_))));
    }

    #[test]
    fn manifest_cross_task_view_mismatch_is_rejected() {
        let dir = TempDir::new().unwrap();
        let manifest = r#"{
          "sample_rate_hz": 2.0,
          "tasks": [
            {"name":"t0","classes":["a","b"],"views":[{"name":"v","channels":1,"file":"a.csv"}]},
            {"name":"t1","classes":["a","b"],"views":[
              {"name":"v","channels":1,"file":"a.csv"},
              {"name":"w","channels":1,"file":"a.csv"}]}
          ]
        }"#;
        let p = write_file(dir.path(), "manifest.json", manifest);
        assert!(matches!(load_dataset(&p), Err(DataError::BadManifest(_))));
    }
}
