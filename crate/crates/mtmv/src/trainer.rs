//! Training loop: builds the composite objective per step, runs Adam,
//! evaluates on the validation split at a fixed cadence, early-stops on
//! stalled validation macro-F1, and logs losses/metrics/gates to CSV.
//!
//! Determinism contract: every random choice is drawn from one of five
//! ChaCha8 streams derived from the run seed (batch shuffling, consistency
//! sampling, gate noise, dropout masks, class upsampling). Two runs with the
//! same config, seed, and dataset produce bit-identical parameters, logs, and
//! checkpoints. With `lambda == 0` the consistency streams are never touched,
//! so a run degrades to a pure supervised run bit-for-bit.

use crate::analysis::{metrics, Metrics};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{DataError, Dataset, Split};
use crate::gating::GumbelNoise;
use crate::graph::{Graph, NodeId};
use crate::losses::{
    consistency_adaption_loss, fusion_regularizer, supervised_loss, total_objective,
    AdaptionTerms, LossBreakdown,
};
use crate::model::{Routing, SharedBlockNet};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::{FragmentStore, SamplerError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite objective at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("no {split} windows for task {task}")]
    EmptySplit { split: &'static str, task: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight of the consistency-adaption term; 0 disables it entirely.
    pub lambda: f64,
    /// Weight of the view-fusion regularizer; 0 disables it.
    pub mu: f64,
    /// Internal windows drawn per consistency sample.
    pub k_internal: usize,
    /// Cap on each external divergence before it enters the objective.
    pub margin: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub eval_batch: usize,
    pub adam: AdamConfig,
    pub tau0: f64,
    pub tau_min: f64,
    pub max_steps: u64,
    pub eval_interval: u64,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Consecutive windows per fragment.
    pub fragment_len: usize,
    /// When set, keep only the chronological prefix of the unlabeled split
    /// sized `round(ratio × labeled_count)` per task.
    pub unlabeled_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            mu: 0.1,
            k_internal: 3,
            margin: 2.0,
            labeled_batch: 16,
            unlabeled_batch: 24,
            eval_batch: 32,
            adam: AdamConfig::default(),
            tau0: 5.0,
            tau_min: 0.5,
            max_steps: 1000,
            eval_interval: 100,
            patience: 5,
            seed: 0,
            fragment_len: 24,
            unlabeled_ratio: None,
        }
    }
}

impl TrainConfig {
    /// Temperature anneal hitting the floor at 80% of the step budget.
    pub fn schedule(&self) -> crate::gating::TempSchedule {
        let knee = ((self.max_steps as f64) * 0.8).round().max(1.0) as u64;
        crate::gating::TempSchedule::reaching_min_at(self.tau0, self.tau_min, knee)
    }
}

/// Distinct deterministic stream per random role, all derived from one seed.
fn sub_seed(seed: u64, role: u64) -> u64 {
    seed ^ (role + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---------------------------------------------------------------------------
// Step inputs and objective assembly

/// One task's labeled minibatch: per-view inputs plus labels.
pub struct LabeledBatch {
    pub views: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// One task's consistency minibatch. Row i of every tensor belongs to the
/// same drawn sample: a reference window, `k` co-fragment windows, and the
/// two cross-fragment windows.
pub struct GcaBatch {
    pub reference: Vec<Tensor>,
    pub internal: Vec<Vec<Tensor>>,
    pub external: Vec<Vec<Tensor>>,
}

pub struct StepInputs {
    pub labeled: Vec<LabeledBatch>,
    pub gca: Option<Vec<GcaBatch>>,
    pub noise: GumbelNoise,
    pub tau: f64,
}

pub struct ObjectiveNodes {
    pub l_s: NodeId,
    pub l_f: NodeId,
    pub adaption: Option<AdaptionTerms>,
    pub j: NodeId,
}

/// Builds the full per-step objective graph. Gate nodes are built once and
/// shared by every train-mode forward; the reference forward runs in eval
/// mode (hard routing, no dropout) behind a stop-gradient. Dropout masks are
/// consumed in forward-call order: labeled, then internals, then externals.
pub fn build_objective(
    g: &mut Graph,
    net: &SharedBlockNet,
    inputs: &StepInputs,
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> ObjectiveNodes {
    let gates = net.gate.gate_nodes(g, &inputs.noise, inputs.tau);
    let labeled_views: Vec<Vec<Tensor>> =
        inputs.labeled.iter().map(|b| b.views.clone()).collect();
    let out = net.forward(
        g,
        &labeled_views,
        Routing::Soft(&gates),
        dropout_rng.as_mut().map(|r| &mut **r),
    );
    let labels: Vec<Vec<usize>> = inputs.labeled.iter().map(|b| b.labels.clone()).collect();
    let l_s = supervised_loss(g, &out.view_logits, &out.fusion_logits, &labels);
    let view_probs: Vec<Vec<NodeId>> = out
        .view_logits
        .iter()
        .map(|row| row.iter().map(|&id| g.softmax(id)).collect())
        .collect();
    let fusion_probs: Vec<NodeId> = out.fusion_logits.iter().map(|&id| g.softmax(id)).collect();
    let l_f = fusion_regularizer(g, &view_probs, &fusion_probs);

    let adaption = inputs.gca.as_ref().map(|gca| {
        let n_tasks = gca.len();
        let eval_routing = net.eval_routing();
        let ref_inputs: Vec<Vec<Tensor>> = gca.iter().map(|b| b.reference.clone()).collect();
        let ref_out = net.forward(g, &ref_inputs, Routing::Hard(&eval_routing), None);
        let reference: Vec<NodeId> = ref_out
            .fusion_logits
            .iter()
            .map(|&id| {
                let p = g.softmax(id);
                g.stop_gradient(p)
            })
            .collect();
        let mut internal: Vec<Vec<NodeId>> = vec![Vec::new(); n_tasks];
        for k in 0..cfg.k_internal {
            let ins: Vec<Vec<Tensor>> = gca.iter().map(|b| b.internal[k].clone()).collect();
            let o = net.forward(g, &ins, Routing::Soft(&gates), dropout_rng.as_mut().map(|r| &mut **r));
            for (t, &id) in o.fusion_logits.iter().enumerate() {
                internal[t].push(g.softmax(id));
            }
        }
        let mut external: Vec<Vec<NodeId>> = vec![Vec::new(); n_tasks];
        for i in 0..2 {
            let ins: Vec<Vec<Tensor>> = gca.iter().map(|b| b.external[i].clone()).collect();
            let o = net.forward(g, &ins, Routing::Soft(&gates), dropout_rng.as_mut().map(|r| &mut **r));
            for (t, &id) in o.fusion_logits.iter().enumerate() {
                external[t].push(g.softmax(id));
            }
        }
        consistency_adaption_loss(g, &reference, &internal, &external, &net.alpha, &net.beta, cfg.margin)
    });

    let j = total_objective(g, l_s, Some(l_f), adaption.as_ref(), cfg.lambda, cfg.mu);
    ObjectiveNodes { l_s, l_f, adaption, j }
}

/// One optimizer step on a prepared set of inputs.
pub fn train_step(
    net: &SharedBlockNet,
    adam: &mut Adam,
    inputs: &StepInputs,
    cfg: &TrainConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
    step: u64,
) -> Result<LossBreakdown, TrainError> {
    adam.zero_grads();
    let mut g = Graph::new();
    let obj = build_objective(&mut g, net, inputs, cfg, dropout_rng);
    let breakdown = LossBreakdown {
        l_s: g.scalar(obj.l_s),
        l_f: g.scalar(obj.l_f),
        l_u_cons: obj.adaption.as_ref().map_or(0.0, |a| g.scalar(a.consistency)),
        l_u_disc: obj.adaption.as_ref().map_or(0.0, |a| g.scalar(a.discrimination)),
        j: g.scalar(obj.j),
    };
    g.healthy().map_err(|detail| TrainError::NonFinite { step, detail })?;
    g.backward(obj.j);
    adam.step();
    Ok(breakdown)
}

// ---------------------------------------------------------------------------
// Batch cycling

/// Round-robin over a class-balanced index pool, reshuffled at each wrap.
struct LabeledPool {
    order: Vec<usize>,
    cursor: usize,
}

impl LabeledPool {
    fn new(order: Vec<usize>) -> Self {
        let cursor = order.len();
        LabeledPool { order, cursor }
    }

    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let take = n.min(self.order.len());
        let mut out = Vec::with_capacity(take);
        for _ in 0..take {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Evaluation

fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let shape = probs.shape();
    assert_eq!(shape.len(), 2);
    let (n, c) = (shape[0], shape[1]);
    let data = probs.data();
    (0..n)
        .map(|i| {
            let row = &data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Hard-routed, dropout-free metrics on one split, all tasks in lockstep
/// chunks (exhausted tasks contribute zero-row batches).
pub fn evaluate(
    net: &SharedBlockNet,
    dataset: &Dataset,
    split: Split,
    eval_batch: usize,
) -> Result<Vec<Metrics>, TrainError> {
    assert!(eval_batch > 0, "eval batch must be positive");
    let per_task_indices: Vec<Vec<usize>> =
        dataset.tasks.iter().map(|t| t.split_indices(split)).collect();
    for (task, idx) in dataset.tasks.iter().zip(&per_task_indices) {
        if idx.is_empty() {
            return Err(TrainError::EmptySplit { split: split.as_str(), task: task.data.name.clone() });
        }
    }
    let max_len = per_task_indices.iter().map(Vec::len).max().unwrap();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_tasks()];
    let mut start = 0;
    while start < max_len {
        let inputs: Vec<Vec<Tensor>> = dataset
            .tasks
            .iter()
            .zip(&per_task_indices)
            .map(|(task, idx)| {
                let lo = start.min(idx.len());
                let hi = (start + eval_batch).min(idx.len());
                task.view_batches(&idx[lo..hi])
            })
            .collect();
        let probs = net
            .predict(&inputs)
            .map_err(|e| TrainError::NonFinite { step: 0, detail: e.to_string() })?;
        for (t, p) in probs.iter().enumerate() {
            preds[t].extend(argmax_rows(p));
        }
        start += eval_batch;
    }
    Ok(dataset
        .tasks
        .iter()
        .zip(&per_task_indices)
        .zip(&preds)
        .map(|((task, idx), pred)| metrics(pred, &task.labels_of(idx)))
        .collect())
}

// ---------------------------------------------------------------------------
// Full runs

pub struct EvalRecord {
    pub step: u64,
    pub per_task: Vec<Metrics>,
}

impl EvalRecord {
    pub fn mean_macro_f1(&self) -> f64 {
        self.per_task.iter().map(|m| m.macro_f1).sum::<f64>() / self.per_task.len() as f64
    }
}

pub struct RunRecord {
    pub best_step: u64,
    pub best_val_macro_f1: f64,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub val_history: Vec<EvalRecord>,
    /// Snapshot of every parameter at the best step, canonical order.
    pub best_params: Vec<Vec<f64>>,
}

struct RunLogs {
    losses: std::io::BufWriter<std::fs::File>,
    metrics: std::io::BufWriter<std::fs::File>,
}

fn create_logs(dir: &Path) -> Result<RunLogs, TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let open = |name: &str, header: &str| -> Result<std::io::BufWriter<std::fs::File>, TrainError> {
        let path = dir.join(name);
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(|e| io_err(&path, e))?,
        );
        writeln!(w, "{header}").map_err(|e| io_err(&path, e))?;
        Ok(w)
    };
    Ok(RunLogs {
        losses: open("losses.csv", "step,L_s,L_f,L_u_cons,L_u_disc,J,tau,alpha_mean,beta_mean")?,
        metrics: open("metrics.csv", "step,task,acc,macro_f1,weighted_f1")?,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Trains `net` on the labeled/unlabeled splits of `dataset`. When `run_dir`
/// is given, writes losses.csv, metrics.csv, per-eval gate matrices, and
/// best/last checkpoints there. On return the network holds the best
/// parameters seen (by mean validation macro-F1).
pub fn fit(
    net: &SharedBlockNet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<RunRecord, TrainError> {
    let params = net.params();
    let mut adam = Adam::new(params.clone(), cfg.adam);
    let schedule = cfg.schedule();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let mut gca_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2));
    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4));
    let mut upsample_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 5));

    let mut pools = Vec::with_capacity(dataset.n_tasks());
    for task in &dataset.tasks {
        let idx = task.split_indices(Split::LabeledTrain);
        if idx.is_empty() {
            return Err(TrainError::EmptySplit {
                split: Split::LabeledTrain.as_str(),
                task: task.data.name.clone(),
            });
        }
        let labels = task.labels_of(&idx);
        let balanced = crate::data::upsample(&idx, &labels, task.data.n_classes, &mut upsample_rng)?;
        pools.push(LabeledPool::new(balanced));
    }

    // Fragment stores index positions within the kept unlabeled list; map
    // back to window indices through `kept`.
    let consistency = if cfg.lambda != 0.0 {
        let mut stores = Vec::with_capacity(dataset.n_tasks());
        for task in &dataset.tasks {
            let mut un = task.split_indices(Split::UnlabeledTrain);
            if let Some(ratio) = cfg.unlabeled_ratio {
                let labeled_n = task.split_indices(Split::LabeledTrain).len();
                let keep = ((ratio * labeled_n as f64).round() as usize).min(un.len());
                un.truncate(keep);
            }
            if un.is_empty() {
                return Err(TrainError::EmptySplit {
                    split: Split::UnlabeledTrain.as_str(),
                    task: task.data.name.clone(),
                });
            }
            let keys = task.sampler_keys(&un);
            let store = FragmentStore::build(&keys, task.stride_rows as u64, cfg.fragment_len);
            stores.push((store, un));
        }
        Some(stores)
    } else {
        None
    };

    let mut logs = match run_dir {
        Some(dir) => Some(create_logs(dir)?),
        None => None,
    };

    let mut best: Option<(u64, f64, Vec<Vec<f64>>)> = None;
    let mut val_history: Vec<EvalRecord> = Vec::new();
    let mut bad_evals = 0usize;
    let mut stopped_early = false;
    let mut steps_run = 0u64;

    for step in 0..cfg.max_steps {
        let tau = schedule.at(step);
        let noise = net.gate.sample_noise(&mut gumbel_rng);
        let labeled: Vec<LabeledBatch> = pools
            .iter_mut()
            .zip(&dataset.tasks)
            .map(|(pool, task)| {
                let batch = pool.next_batch(cfg.labeled_batch, &mut shuffle_rng);
                LabeledBatch { views: task.view_batches(&batch), labels: task.labels_of(&batch) }
            })
            .collect();
        let gca = match &consistency {
            Some(stores) => {
                let mut batches = Vec::with_capacity(stores.len());
                for ((store, kept), task) in stores.iter().zip(&dataset.tasks) {
                    let samples = store.draw_batch(cfg.unlabeled_batch, cfg.k_internal, &mut gca_rng)?;
                    let rows = |pick: &dyn Fn(&crate::sampler::ConsistencySample) -> usize| -> Vec<usize> {
                        samples.iter().map(|s| kept[pick(s)]).collect()
                    };
                    let reference = task.view_batches(&rows(&|s| s.reference));
                    let internal = (0..cfg.k_internal)
                        .map(|k| task.view_batches(&rows(&move |s| s.internal[k])))
                        .collect();
                    let external = (0..2)
                        .map(|i| task.view_batches(&rows(&move |s| s.external[i])))
                        .collect();
                    batches.push(GcaBatch { reference, internal, external });
                }
                Some(batches)
            }
            None => None,
        };
        let inputs = StepInputs { labeled, gca, noise, tau };
        let breakdown = train_step(net, &mut adam, &inputs, cfg, Some(&mut dropout_rng), step + 1)?;
        steps_run = step + 1;

        if let Some(logs) = &mut logs {
            let dir = run_dir.unwrap();
            let alpha_mean = mean(&net.alpha.data_snapshot());
            let beta_mean = mean(&net.beta.data_snapshot());
            writeln!(
                logs.losses,
                "{},{},{},{},{},{},{},{},{}",
                steps_run,
                breakdown.l_s,
                breakdown.l_f,
                breakdown.l_u_cons,
                breakdown.l_u_disc,
                breakdown.j,
                tau,
                alpha_mean,
                beta_mean
            )
            .map_err(|e| io_err(&dir.join("losses.csv"), e))?;
        }

        if steps_run % cfg.eval_interval == 0 {
            let per_task = evaluate(net, dataset, Split::Val, cfg.eval_batch)?;
            let record = EvalRecord { step: steps_run, per_task };
            if let Some(logs) = &mut logs {
                let dir = run_dir.unwrap();
                for (task, m) in dataset.tasks.iter().zip(&record.per_task) {
                    writeln!(
                        logs.metrics,
                        "{},{},{},{},{}",
                        steps_run, task.data.name, m.acc, m.macro_f1, m.weighted_f1
                    )
                    .map_err(|e| io_err(&dir.join("metrics.csv"), e))?;
                }
                let gate_path = dir.join(format!("gates_step{steps_run}.csv"));
                std::fs::write(&gate_path, net.gate.export_gate_matrix())
                    .map_err(|e| io_err(&gate_path, e))?;
            }
            let score = record.mean_macro_f1();
            let improved = best.as_ref().map_or(true, |(_, b, _)| score > *b);
            if improved {
                let snapshot = params.iter().map(|p| p.data_snapshot()).collect();
                best = Some((steps_run, score, snapshot));
                bad_evals = 0;
                if let Some(dir) = run_dir {
                    checkpoint::save(&dir.join("checkpoint.best"), steps_run, &net.cfg, &params, &adam)?;
                }
            } else {
                bad_evals += 1;
            }
            val_history.push(record);
            if bad_evals >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(logs) = &mut logs {
        logs.losses.flush().map_err(|e| io_err(run_dir.unwrap(), e))?;
        logs.metrics.flush().map_err(|e| io_err(run_dir.unwrap(), e))?;
    }
    if let Some(dir) = run_dir {
        checkpoint::save(&dir.join("checkpoint.last"), steps_run, &net.cfg, &params, &adam)?;
    }

    // A budget smaller than one eval interval still yields a usable record.
    if best.is_none() {
        let per_task = evaluate(net, dataset, Split::Val, cfg.eval_batch)?;
        let record = EvalRecord { step: steps_run, per_task };
        let snapshot = params.iter().map(|p| p.data_snapshot()).collect();
        best = Some((steps_run, record.mean_macro_f1(), snapshot));
        val_history.push(record);
    }

    let (best_step, best_val_macro_f1, best_params) = best.unwrap();
    for (p, data) in params.iter().zip(&best_params) {
        p.set_data(data);
    }
    Ok(RunRecord { best_step, best_val_macro_f1, steps_run, stopped_early, val_history, best_params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, load_dataset, SyntheticSpec};
    use crate::model::ModelConfig;
    use tempfile::TempDir;

    fn tiny_dataset(dir: &Path, seed: u64) -> Dataset {
        let mut spec = SyntheticSpec::new(2, 2, 2, 2, seed);
        spec.segments_per_class = 1;
        spec.segment_windows = 30;
        spec.channels = 2;
        spec.window_rows = 16;
        let manifest = generate_synthetic(&spec, dir).unwrap();
        load_dataset(&manifest).unwrap()
    }

    fn tiny_model(dataset: &Dataset, dropout: f64) -> ModelConfig {
        let mut cfg = ModelConfig::new(dataset.view_dims(), dataset.n_classes());
        cfg.hidden_dim = 8;
        cfg.n_blocks = 2;
        cfg.block_depth = 1;
        cfg.dropout = dropout;
        cfg
    }

    fn quick_config(max_steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps,
            eval_interval: 25,
            labeled_batch: 8,
            unlabeled_batch: 6,
            fragment_len: 4,
            k_internal: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_zero_step_matches_manual_supervised_step() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 7);
        let net = SharedBlockNet::build(tiny_model(&dataset, 0.3), 123);
        let init: Vec<Vec<f64>> = net.params().iter().map(|p| p.data_snapshot()).collect();

        let cfg = TrainConfig { lambda: 0.0, ..quick_config(1) };
        let labeled: Vec<LabeledBatch> = dataset
            .tasks
            .iter()
            .map(|task| {
                let idx = task.split_indices(Split::LabeledTrain);
                LabeledBatch { views: task.view_batches(&idx), labels: task.labels_of(&idx) }
            })
            .collect();
        let mut noise_rng = ChaCha8Rng::seed_from_u64(42);
        let noise = net.gate.sample_noise(&mut noise_rng);

        // Trainer path.
        let mut adam = Adam::new(net.params(), cfg.adam);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = StepInputs {
            labeled: labeled
                .iter()
                .map(|b| LabeledBatch { views: b.views.clone(), labels: b.labels.clone() })
                .collect(),
            gca: None,
            noise: GumbelNoise { per_unit: noise.per_unit.clone() },
            tau: 2.0,
        };
        let breakdown = train_step(&net, &mut adam, &inputs, &cfg, Some(&mut drop_rng), 1).unwrap();
        let stepped: Vec<Vec<f64>> = net.params().iter().map(|p| p.data_snapshot()).collect();

        // Manual supervised-only step from the same starting point.
        for (p, d) in net.params().iter().zip(&init) {
            p.set_data(d);
        }
        let mut adam2 = Adam::new(net.params(), cfg.adam);
        adam2.zero_grads();
        let mut g = Graph::new();
        let mut drop_rng2 = ChaCha8Rng::seed_from_u64(9);
        let gates = net.gate.gate_nodes(&mut g, &noise, 2.0);
        let views: Vec<Vec<Tensor>> = labeled.iter().map(|b| b.views.clone()).collect();
        let out = net.forward(&mut g, &views, Routing::Soft(&gates), Some(&mut drop_rng2));
        let labels: Vec<Vec<usize>> = labeled.iter().map(|b| b.labels.clone()).collect();
        let l_s = supervised_loss(&mut g, &out.view_logits, &out.fusion_logits, &labels);
        let view_probs: Vec<Vec<NodeId>> = out
            .view_logits
            .iter()
            .map(|row| row.iter().map(|&id| g.softmax(id)).collect())
            .collect();
        let fusion_probs: Vec<NodeId> =
            out.fusion_logits.iter().map(|&id| g.softmax(id)).collect();
        let l_f = fusion_regularizer(&mut g, &view_probs, &fusion_probs);
        let mu_node = g.constant(Tensor::scalar(cfg.mu));
        let scaled = g.mul(l_f, mu_node);
        let j = g.add(l_s, scaled);
        assert_eq!(g.scalar(j), breakdown.j);
        g.backward(j);
        adam2.step();
        let manual: Vec<Vec<f64>> = net.params().iter().map(|p| p.data_snapshot()).collect();

        for (a, b) in stepped.iter().zip(&manual) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn overfits_a_fixed_labeled_batch() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 3);
        let net = SharedBlockNet::build(tiny_model(&dataset, 0.0), 5);
        let mut cfg = TrainConfig {
            lambda: 0.0,
            mu: 0.1,
            labeled_batch: 16,
            max_steps: 200,
            eval_interval: 1000,
            ..TrainConfig::default()
        };
        cfg.adam.lr = 1e-2;
        let labeled: Vec<LabeledBatch> = dataset
            .tasks
            .iter()
            .map(|task| {
                let idx: Vec<usize> =
                    task.split_indices(Split::LabeledTrain).into_iter().take(16).collect();
                LabeledBatch { views: task.view_batches(&idx), labels: task.labels_of(&idx) }
            })
            .collect();
        let mut adam = Adam::new(net.params(), cfg.adam);
        let mut gumbel_rng = ChaCha8Rng::seed_from_u64(1);
        let noise = net.gate.sample_noise(&mut gumbel_rng);
        let mut last = f64::INFINITY;
        for step in 0..cfg.max_steps {
            let inputs = StepInputs {
                labeled: labeled
                    .iter()
                    .map(|b| LabeledBatch { views: b.views.clone(), labels: b.labels.clone() })
                    .collect(),
                gca: None,
                noise: GumbelNoise { per_unit: noise.per_unit.clone() },
                tau: 1.0,
            };
            last = train_step(&net, &mut adam, &inputs, &cfg, None, step).unwrap().l_s;
        }
        assert!(last < 0.05, "supervised loss failed to collapse: {last}");
    }

    #[test]
    fn zero_lr_patience_one_stops_after_two_evals() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 11);
        let net = SharedBlockNet::build(tiny_model(&dataset, 0.1), 2);
        let mut cfg = quick_config(500);
        cfg.adam.lr = 0.0;
        cfg.patience = 1;
        cfg.eval_interval = 5;
        let record = fit(&net, &dataset, &cfg, None).unwrap();
        assert!(record.stopped_early);
        assert_eq!(record.val_history.len(), 2);
        assert_eq!(record.steps_run, 10);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 19);
        let cfg = quick_config(30);
        let run = |tag: &str| {
            let net = SharedBlockNet::build(tiny_model(&dataset, 0.2), 77);
            let out = dir.path().join(tag);
            let record = fit(&net, &dataset, &cfg, Some(&out)).unwrap();
            let params: Vec<Vec<f64>> = net.params().iter().map(|p| p.data_snapshot()).collect();
            (record, params, out)
        };
        let (r1, p1, d1) = run("a");
        let (r2, p2, d2) = run("b");
        assert_eq!(r1.best_step, r2.best_step);
        assert_eq!(r1.best_val_macro_f1.to_bits(), r2.best_val_macro_f1.to_bits());
        for (a, b) in p1.iter().zip(&p2) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for name in ["losses.csv", "metrics.csv", "checkpoint.best", "checkpoint.last"] {
            let a = std::fs::read(d1.join(name)).unwrap();
            let b = std::fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn best_checkpoint_reproduces_recorded_score() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 23);
        let net = SharedBlockNet::build(tiny_model(&dataset, 0.2), 31);
        let cfg = quick_config(50);
        let out = dir.path().join("run");
        let record = fit(&net, &dataset, &cfg, Some(&out)).unwrap();

        let ck = checkpoint::load(&out.join("checkpoint.best")).unwrap();
        assert_eq!(ck.step, record.best_step);
        let fresh = SharedBlockNet::build(ck.model.clone(), 0);
        ck.restore_params(&fresh.params()).unwrap();
        let per_task = evaluate(&fresh, &dataset, Split::Val, cfg.eval_batch).unwrap();
        let score = per_task.iter().map(|m| m.macro_f1).sum::<f64>() / per_task.len() as f64;
        assert_eq!(score.to_bits(), record.best_val_macro_f1.to_bits());
    }

    #[test]
    fn lambda_zero_never_touches_consistency_streams() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 29);
        let cfg_a = TrainConfig { lambda: 0.0, fragment_len: 4, ..quick_config(20) };
        // Different consistency knobs must not change a lambda=0 run.
        let cfg_b = TrainConfig { k_internal: 7, unlabeled_batch: 17, margin: 0.5, ..cfg_a.clone() };
        let net_a = SharedBlockNet::build(tiny_model(&dataset, 0.2), 41);
        let ra = fit(&net_a, &dataset, &cfg_a, None).unwrap();
        let net_b = SharedBlockNet::build(tiny_model(&dataset, 0.2), 41);
        let rb = fit(&net_b, &dataset, &cfg_b, None).unwrap();
        assert_eq!(ra.best_val_macro_f1.to_bits(), rb.best_val_macro_f1.to_bits());
        for (a, b) in net_a.params().iter().zip(net_b.params().iter()) {
            let (x, y) = (a.data_snapshot(), b.data_snapshot());
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn objective_is_finite_under_default_config() {
        let dir = TempDir::new().unwrap();
        let dataset = tiny_dataset(dir.path(), 37);
        let net = SharedBlockNet::build(tiny_model(&dataset, 0.5), 13);
        let cfg = quick_config(60);
        let record = fit(&net, &dataset, &cfg, None).unwrap();
        assert!(record.steps_run >= 1);
        assert!(record.best_val_macro_f1.is_finite());
    }
}
