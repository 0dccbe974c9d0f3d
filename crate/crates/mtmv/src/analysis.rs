//! Evaluation metrics, DTW distance for view-correlation analysis, clustering
//! agreement between learned gate assignments and planted groups, and the
//! ablation grid driver.

use crate::data::{DataError, Dataset, Split};
use crate::gating::UnitMode;
use crate::model::{ModelConfig, SharedBlockNet};
use crate::trainer::{evaluate, fit, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Accuracy, macro-F1, and weighted-F1. Per-class F1 is 0 when P + R = 0;
/// macro averages only classes present in the labels; weighted weights by
/// true support.
pub fn metrics(preds: &[usize], labels: &[usize]) -> Metrics {
    assert_eq!(preds.len(), labels.len(), "prediction/label length mismatch");
    assert!(!labels.is_empty(), "no samples to score");
    let classes = preds.iter().chain(labels).max().unwrap() + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            tp[y] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total = labels.len() as f64;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let mut weighted = 0.0;
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let precision = if tp[c] + fp[c] == 0 { 0.0 } else { tp[c] as f64 / (tp[c] + fp[c]) as f64 };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        macro_sum += f1;
        macro_n += 1;
        weighted += support[c] as f64 * f1;
    }
    Metrics {
        acc: correct as f64 / total,
        macro_f1: macro_sum / macro_n as f64,
        weighted_f1: weighted / total,
    }
}

/// Classic O(nm) dynamic-time-warping distance with absolute-difference
/// local cost, unconstrained window, boundary-matched path.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "dtw needs nonempty series");
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &ai in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (ai - b[j - 1]).abs();
            cur[j] = cost + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Mean over channels per row, turning a (rows × channels) block into the
/// scalar series DTW runs on.
pub fn channel_mean_series(data: &[f64], channels: usize) -> Vec<f64> {
    assert!(channels > 0 && data.len() % channels == 0);
    data.chunks_exact(channels).map(|row| row.iter().sum::<f64>() / channels as f64).collect()
}

/// Per-series z-normalization; a (near-)constant series maps to zeros.
pub fn z_normalize(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        vec![0.0; series.len()]
    } else {
        series.iter().map(|x| (x - mean) / sd).collect()
    }
}

/// Adjusted Rand index by pair counting; 1.0 when both partitions carry no
/// pair information (degenerate denominator), by convention.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partition length mismatch");
    assert!(!a.is_empty());
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0usize; ka * kb];
    let mut rows = vec![0usize; ka];
    let mut cols = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let c2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&n| c2(n)).sum();
    let row_sum: f64 = rows.iter().map(|&n| c2(n)).sum();
    let col_sum: f64 = cols.iter().map(|&n| c2(n)).sum();
    let expected = row_sum * col_sum / c2(a.len());
    let max_index = (row_sum + col_sum) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}

/// Reduces a hard per-unit block assignment to one block per view. In
/// task-view mode each view takes the majority block over its tasks (ties to
/// the lowest block id); in view mode the assignment is already per view.
pub fn per_view_assignment(
    hard: &[usize],
    mode: UnitMode,
    n_tasks: usize,
    n_views: usize,
) -> Vec<usize> {
    match mode {
        UnitMode::View => {
            assert_eq!(hard.len(), n_views);
            hard.to_vec()
        }
        UnitMode::TaskView => {
            assert_eq!(hard.len(), n_tasks * n_views);
            let blocks = hard.iter().max().unwrap() + 1;
            (0..n_views)
                .map(|v| {
                    let mut counts = vec![0usize; blocks];
                    for t in 0..n_tasks {
                        counts[hard[t * n_views + v]] += 1;
                    }
                    let best = *counts.iter().max().unwrap();
                    counts.iter().position(|c| *c == best).unwrap()
                })
                .collect()
        }
    }
}

/// ARI between the per-view hard gate assignment and the planted grouping.
pub fn gate_cluster_score(per_view_blocks: &[usize], planted_groups: &[usize]) -> f64 {
    assert_eq!(per_view_blocks.len(), planted_groups.len(), "group size mismatch");
    adjusted_rand_index(per_view_blocks, planted_groups)
}

// ---------------------------------------------------------------------------
// Ablation grids

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Shared-block count (model.n_blocks).
    Blocks,
    /// Unlabeled:labeled window ratio (chronological subsample).
    Ratio,
    /// Consistency-adaption coefficient lambda (0 turns it off).
    Gca,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<AblationAxis> {
        match s {
            "blocks" => Some(AblationAxis::Blocks),
            "ratio" => Some(AblationAxis::Ratio),
            "gca" => Some(AblationAxis::Gca),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::Blocks => "blocks",
            AblationAxis::Ratio => "ratio",
            AblationAxis::Gca => "gca",
        }
    }
}

pub struct AblationGrid {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: f64,
    pub seed_count: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub weighted_f1_mean: f64,
    pub weighted_f1_std: f64,
}

/// Mean and sample standard deviation (n−1 denominator; 0 when n = 1).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_ratio_feasible(dataset: &Dataset, ratio: f64) -> Result<(), DataError> {
    for task in &dataset.tasks {
        let labeled = task.split_indices(Split::LabeledTrain).len();
        let unlabeled = task.split_indices(Split::UnlabeledTrain).len();
        let need = (ratio * labeled as f64).round() as usize;
        if need > unlabeled {
            return Err(DataError::BadSpec(format!(
                "infeasible ratio {ratio}: task {} has {unlabeled} unlabeled windows, needs {need}",
                task.data.name
            )));
        }
    }
    Ok(())
}

/// Trains one model per (value, seed), scores the test split, and reduces to
/// mean ± std per grid point in grid order. Each per-seed score is the mean
/// over tasks of the test metrics from the best (validation-selected)
/// parameters.
pub fn run_ablation(
    dataset: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &AblationGrid,
) -> Result<Vec<AblationRow>, TrainError> {
    assert!(!grid.values.is_empty() && !grid.seeds.is_empty(), "empty ablation grid");
    let mut rows = Vec::with_capacity(grid.values.len());
    for &value in &grid.values {
        let mut accs = Vec::with_capacity(grid.seeds.len());
        let mut macros = Vec::with_capacity(grid.seeds.len());
        let mut weighteds = Vec::with_capacity(grid.seeds.len());
        for &seed in &grid.seeds {
            let mut model = base_model.clone();
            let mut train = base_train.clone();
            train.seed = seed;
            match grid.axis {
                AblationAxis::Blocks => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(TrainError::Data(DataError::BadSpec(format!(
                            "blocks axis needs a positive integer, got {value}"
                        ))));
                    }
                    model.n_blocks = value as usize;
                }
                AblationAxis::Ratio => {
                    check_ratio_feasible(dataset, value)?;
                    train.unlabeled_ratio = Some(value);
                }
                AblationAxis::Gca => train.lambda = value,
            }
            let net = SharedBlockNet::build(model, seed);
            fit(&net, dataset, &train, None)?;
            let per_task = evaluate(&net, dataset, Split::Test, train.eval_batch)?;
            let n = per_task.len() as f64;
            accs.push(per_task.iter().map(|m| m.acc).sum::<f64>() / n);
            macros.push(per_task.iter().map(|m| m.macro_f1).sum::<f64>() / n);
            weighteds.push(per_task.iter().map(|m| m.weighted_f1).sum::<f64>() / n);
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (macro_f1_mean, macro_f1_std) = mean_std(&macros);
        let (weighted_f1_mean, weighted_f1_std) = mean_std(&weighteds);
        rows.push(AblationRow {
            axis: grid.axis.as_str(),
            value,
            seed_count: grid.seeds.len(),
            acc_mean,
            acc_std,
            macro_f1_mean,
            macro_f1_std,
            weighted_f1_mean,
            weighted_f1_std,
        });
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str =
    "axis,value,seed_count,acc_mean,acc_std,macro_f1_mean,macro_f1_std,weighted_f1_mean,weighted_f1_std";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.value,
            r.seed_count,
            r.acc_mean,
            r.acc_std,
            r.macro_f1_mean,
            r.macro_f1_std,
            r.weighted_f1_mean,
            r.weighted_f1_std
        ));
    }
    out
}
