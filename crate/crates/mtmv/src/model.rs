//! The gated shared-block network.
//!
//! Per (task, view) encoders project windows into a common hidden width; a
//! bank of N shared MLP blocks is routed by the gate policy (soft mixture in
//! training, hard argmax at inference); per-view heads and a per-task fusion
//! head over the concatenated gated representations produce logits. The
//! fusion head is the deployed predictor.
//!
//! Parameter accounting: sharing replaces the T·V private blocks of the
//! unshared baseline with N shared ones, everything else being identical, so
//! the reduction ratio is computed over network weights (encoders + blocks +
//! heads + fusion). The gate logits and the per-task uncertainty scalars are
//! counted separately; they do not exist in the baselines.

use crate::gating::{GatePolicy, UnitMode};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Param, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite forward value: {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_tasks: usize,
    pub n_views: usize,
    /// Flattened window width per view (rows × channels).
    pub view_dims: Vec<usize>,
    /// Class count per task.
    pub n_classes: Vec<usize>,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub block_depth: usize,
    pub dropout: f64,
    pub unit_mode: UnitMode,
}

impl ModelConfig {
    pub fn new(view_dims: Vec<usize>, n_classes: Vec<usize>) -> Self {
        let cfg = ModelConfig {
            n_tasks: n_classes.len(),
            n_views: view_dims.len(),
            view_dims,
            n_classes,
            hidden_dim: 64,
            n_blocks: 4,
            block_depth: 2,
            dropout: 0.5,
            unit_mode: UnitMode::TaskView,
        };
        cfg.validate();
        cfg
    }

    pub fn validate(&self) {
        assert!(self.n_tasks > 0 && self.n_views > 0, "need at least one task and one view");
        assert_eq!(self.view_dims.len(), self.n_views, "view_dims length mismatch");
        assert_eq!(self.n_classes.len(), self.n_tasks, "n_classes length mismatch");
        assert!(self.view_dims.iter().all(|d| *d > 0), "view dims must be positive");
        assert!(self.n_classes.iter().all(|c| *c >= 2), "tasks need at least two classes");
        assert!(self.hidden_dim > 0 && self.n_blocks > 0 && self.block_depth > 0);
        assert!((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)");
    }
}

/// Closed-form parameter totals for the model and its baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCounts {
    /// Encoders + shared blocks + view heads + fusion heads.
    pub network: usize,
    /// Gate logit matrix (units × blocks).
    pub gate: usize,
    /// Per-task uncertainty scalars (α and β).
    pub uncertainty: usize,
    /// Everything the optimizer sees.
    pub total: usize,
    /// Baseline where every (task, view) owns a private block of equal shape.
    pub unshared_network: usize,
    /// Unshared baseline restricted to each task alone.
    pub single_task: Vec<usize>,
    /// 1 − network / unshared_network.
    pub reduction: f64,
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    cfg.validate();
    let d = cfg.hidden_dim;
    let block_params = cfg.block_depth * (d * d + d);
    let enc: usize = cfg.n_tasks * cfg.view_dims.iter().map(|dv| dv * d + d).sum::<usize>();
    let heads: usize = cfg.n_views * cfg.n_classes.iter().map(|c| d * c + c).sum::<usize>();
    let fusion: usize = cfg.n_classes.iter().map(|c| cfg.n_views * d * c + c).sum::<usize>();
    let network = enc + cfg.n_blocks * block_params + heads + fusion;
    let unshared_network = enc + cfg.n_tasks * cfg.n_views * block_params + heads + fusion;
    let single_task: Vec<usize> = (0..cfg.n_tasks)
        .map(|t| {
            let c = cfg.n_classes[t];
            cfg.view_dims.iter().map(|dv| dv * d + d).sum::<usize>()
                + cfg.n_views * block_params
                + cfg.n_views * (d * c + c)
                + (cfg.n_views * d * c + c)
        })
        .collect();
    let units = match cfg.unit_mode {
        UnitMode::TaskView => cfg.n_tasks * cfg.n_views,
        UnitMode::View => cfg.n_views,
    };
    let gate = units * cfg.n_blocks;
    let uncertainty = 2 * cfg.n_tasks;
    ParamCounts {
        network,
        gate,
        uncertainty,
        total: network + gate + uncertainty,
        unshared_network,
        single_task,
        reduction: 1.0 - network as f64 / unshared_network as f64,
    }
}

struct Linear {
    w: Param,
    b: Param,
}

impl Linear {
    /// Weights and bias drawn uniform in ±1/√fan_in.
    fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0)).collect() };
        let w = Param::new(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)));
        let b = Param::new(format!("{name}.b"), Tensor::new(vec![fan_out], draw(fan_out)));
        Linear { w, b }
    }

    /// Fresh trainable parameters holding this layer's current values.
    fn copy_named(&self, name: &str) -> Linear {
        let w = Param::new(format!("{name}.w"), Tensor::new(self.w.shape(), self.w.data_snapshot()));
        let b = Param::new(format!("{name}.b"), Tensor::new(self.b.shape(), self.b.data_snapshot()));
        Linear { w, b }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.leaf(&self.w);
        let b = g.leaf(&self.b);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }
}

/// Gate selection for one forward pass.
pub enum Routing<'a> {
    /// Differentiable mixture weights per unit, from `GatePolicy::gate_nodes`.
    Soft(&'a [NodeId]),
    /// Selected block per unit.
    Hard(&'a [usize]),
}

pub struct ForwardOut {
    /// Logits per (task, view): (batch, classes).
    pub view_logits: Vec<Vec<NodeId>>,
    /// Logits per task from the fusion head: (batch, classes).
    pub fusion_logits: Vec<NodeId>,
}

pub struct SharedBlockNet {
    pub cfg: ModelConfig,
    encoders: Vec<Vec<Linear>>,
    blocks: Vec<Vec<Linear>>,
    heads: Vec<Vec<Linear>>,
    fusion: Vec<Linear>,
    pub gate: GatePolicy,
    pub alpha: Param,
    pub beta: Param,
    /// When set, routing is pinned to these block choices and the gate logits
    /// are frozen out of the trainable set (single-task baseline).
    fixed_routing: Option<Vec<usize>>,
}

impl SharedBlockNet {
    /// Deterministic build: same config and seed give bitwise-equal weights.
    pub fn build(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        // Encoders of equal input width start from one shared draw: views with
        // genuinely redundant content then produce correlated features from the
        // first step, so routing differences reflect content rather than
        // initialization luck. Each copy is still its own trainable tensor.
        let mut protos: Vec<(usize, Linear)> = Vec::new();
        for &dim in &cfg.view_dims {
            if !protos.iter().any(|(pd, _)| *pd == dim) {
                protos.push((dim, Linear::new("enc.proto", dim, d, &mut rng)));
            }
        }
        let encoders = (0..cfg.n_tasks)
            .map(|t| {
                (0..cfg.n_views)
                    .map(|v| {
                        let proto =
                            &protos.iter().find(|(pd, _)| *pd == cfg.view_dims[v]).unwrap().1;
                        proto.copy_named(&format!("enc.t{t}.v{v}"))
                    })
                    .collect()
            })
            .collect();
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                (0..cfg.block_depth).map(|l| Linear::new(&format!("block{i}.l{l}"), d, d, &mut rng)).collect()
            })
            .collect();
        // Heads and fusion get the same treatment: per class-count, one head
        // proto shared by every (task, view) copy, and one (d → classes) slab
        // tiled down the fusion weight so all views start interchangeable
        // downstream of the blocks.
        let mut head_protos: Vec<(usize, Linear)> = Vec::new();
        for &c in &cfg.n_classes {
            if !head_protos.iter().any(|(pc, _)| *pc == c) {
                head_protos.push((c, Linear::new("head.proto", d, c, &mut rng)));
            }
        }
        let heads: Vec<Vec<Linear>> = (0..cfg.n_tasks)
            .map(|t| {
                (0..cfg.n_views)
                    .map(|v| {
                        let proto =
                            &head_protos.iter().find(|(pc, _)| *pc == cfg.n_classes[t]).unwrap().1;
                        proto.copy_named(&format!("head.t{t}.v{v}"))
                    })
                    .collect()
            })
            .collect();
        let mut fusion_protos: Vec<(usize, Linear)> = Vec::new();
        for &c in &cfg.n_classes {
            if !fusion_protos.iter().any(|(pc, _)| *pc == c) {
                fusion_protos.push((c, Linear::new("fusion.proto", d, c, &mut rng)));
            }
        }
        let fusion: Vec<Linear> = (0..cfg.n_tasks)
            .map(|t| {
                let c = cfg.n_classes[t];
                let proto = &fusion_protos.iter().find(|(pc, _)| *pc == c).unwrap().1;
                let slab = proto.w.data_snapshot();
                let mut w = Vec::with_capacity(cfg.n_views * d * c);
                for _ in 0..cfg.n_views {
                    w.extend_from_slice(&slab);
                }
                Linear {
                    w: Param::new(format!("fusion.t{t}.w"), Tensor::new(vec![cfg.n_views * d, c], w)),
                    b: Param::new(format!("fusion.t{t}.b"), Tensor::new(vec![c], proto.b.data_snapshot())),
                }
            })
            .collect();
        let gate = GatePolicy::new(cfg.unit_mode, cfg.n_tasks, cfg.n_views, cfg.n_blocks);
        // Start the per-task log-variances high: the unlabeled terms open at
        // a small weight (e^-2) and earn influence as their divergences prove
        // informative, so early noisy consensus on unlabeled windows cannot
        // outrun the supervised anchoring.
        let alpha = Param::new("unc.alpha", Tensor::new(vec![cfg.n_tasks], vec![2.0; cfg.n_tasks]));
        let beta = Param::new("unc.beta", Tensor::new(vec![cfg.n_tasks], vec![2.0; cfg.n_tasks]));
        SharedBlockNet { cfg, encoders, blocks, heads, fusion, gate, alpha, beta, fixed_routing: None }
    }

    pub fn with_fixed_routing(mut self, routing: Vec<usize>) -> Self {
        assert_eq!(routing.len(), self.gate.n_units(), "fixed routing length mismatch");
        assert!(routing.iter().all(|b| *b < self.cfg.n_blocks), "fixed routing block out of range");
        self.fixed_routing = Some(routing);
        self
    }

    pub fn fixed_routing(&self) -> Option<&[usize]> {
        self.fixed_routing.as_deref()
    }

    /// Trainable parameters in canonical (build) order. Each tensor appears
    /// exactly once; the gate logits are omitted when routing is pinned.
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for row in &self.encoders {
            for lin in row {
                out.push(lin.w.clone());
                out.push(lin.b.clone());
            }
        }
        for block in &self.blocks {
            for lin in block {
                out.push(lin.w.clone());
                out.push(lin.b.clone());
            }
        }
        for row in &self.heads {
            for lin in row {
                out.push(lin.w.clone());
                out.push(lin.b.clone());
            }
        }
        for lin in &self.fusion {
            out.push(lin.w.clone());
            out.push(lin.b.clone());
        }
        if self.fixed_routing.is_none() {
            out.push(self.gate.logits().clone());
        }
        out.push(self.alpha.clone());
        out.push(self.beta.clone());
        out
    }

    /// Block selection used at inference: pinned routing if present, else the
    /// noise-free argmax of the gate logits.
    pub fn eval_routing(&self) -> Vec<usize> {
        self.fixed_routing.clone().unwrap_or_else(|| self.gate.hard_assignment())
    }

    fn maybe_dropout(&self, g: &mut Graph, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>) -> NodeId {
        match rng {
            Some(r) => g.dropout(x, self.cfg.dropout, r),
            None => x,
        }
    }

    /// One block pass: depth × (linear → relu → dropout).
    fn block_forward(
        &self,
        g: &mut Graph,
        block: usize,
        h: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        let mut h = h;
        for lin in &self.blocks[block] {
            let z = lin.forward(g, h);
            let a = g.relu(z);
            h = self.maybe_dropout(g, a, rng);
        }
        h
    }

    /// Builds the forward graph for a batch of all tasks and views.
    /// `inputs[t][v]` is a (batch, view_dim) tensor; batch sizes may differ
    /// across tasks but not across views of one task. Dropout masks are drawn
    /// from `dropout_rng` in deterministic order (tasks outer, views inner,
    /// encoder first, then blocks in index order, layers in order); pass None
    /// for evaluation.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &[Vec<Tensor>],
        routing: Routing,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOut {
        assert_eq!(inputs.len(), self.cfg.n_tasks, "task count mismatch");
        let mut rng = dropout_rng;
        match &routing {
            Routing::Soft(gates) => assert_eq!(gates.len(), self.gate.n_units(), "gate node count mismatch"),
            Routing::Hard(sel) => assert_eq!(sel.len(), self.gate.n_units(), "hard routing length mismatch"),
        }

        let mut view_logits = Vec::with_capacity(self.cfg.n_tasks);
        let mut fusion_logits = Vec::with_capacity(self.cfg.n_tasks);
        for (t, task_views) in inputs.iter().enumerate() {
            assert_eq!(task_views.len(), self.cfg.n_views, "view count mismatch for task {t}");
            let mut gated = Vec::with_capacity(self.cfg.n_views);
            for (v, x) in task_views.iter().enumerate() {
                assert_eq!(
                    x.shape().last(),
                    Some(&self.cfg.view_dims[v]),
                    "input width mismatch for task {t} view {v}"
                );
                let xid = g.constant(x.clone());
                let z = self.encoders[t][v].forward(g, xid);
                let a = g.relu(z);
                let h = self.maybe_dropout(g, a, &mut rng);
                let unit = self.gate.unit_index(t, v);
                let mixed = match &routing {
                    Routing::Soft(gates) => {
                        let outs: Vec<NodeId> =
                            (0..self.cfg.n_blocks).map(|i| self.block_forward(g, i, h, &mut rng)).collect();
                        g.weighted_sum(&outs, gates[unit])
                    }
                    Routing::Hard(sel) => self.block_forward(g, sel[unit], h, &mut rng),
                };
                gated.push(mixed);
            }
            let logits_per_view: Vec<NodeId> =
                gated.iter().enumerate().map(|(v, &hid)| self.heads[t][v].forward(g, hid)).collect();
            let cat = g.concat_last(&gated);
            fusion_logits.push(self.fusion[t].forward(g, cat));
            view_logits.push(logits_per_view);
        }
        ForwardOut { view_logits, fusion_logits }
    }

    /// Deployed prediction: eval-mode forward (hard routing, no dropout),
    /// softmax of the fusion logits. Returns one (batch, classes) probability
    /// tensor per task.
    pub fn predict(&self, inputs: &[Vec<Tensor>]) -> Result<Vec<Tensor>, ModelError> {
        let routing = self.eval_routing();
        let mut g = Graph::new();
        let out = self.forward(&mut g, inputs, Routing::Hard(&routing), None);
        let probs: Vec<(Vec<usize>, Vec<f64>)> = out
            .fusion_logits
            .iter()
            .map(|&id| {
                let p = g.softmax(id);
                (g.shape(p).to_vec(), g.data(p).to_vec())
            })
            .collect();
        g.healthy().map_err(ModelError::NonFinite)?;
        Ok(probs.into_iter().map(|(shape, data)| Tensor::new(shape, data)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// One block shared by every unit: the tightest budget.
    ShareAll,
    /// Independent per-task networks with a private block per view.
    SingleTask,
}

pub enum Baseline {
    ShareAll(SharedBlockNet),
    SingleTask(Vec<SharedBlockNet>),
}

impl Baseline {
    pub fn build(kind: BaselineKind, cfg: &ModelConfig, seed: u64) -> Baseline {
        match kind {
            BaselineKind::ShareAll => {
                let mut c = cfg.clone();
                c.n_blocks = 1;
                Baseline::ShareAll(SharedBlockNet::build(c, seed))
            }
            BaselineKind::SingleTask => {
                let nets = (0..cfg.n_tasks)
                    .map(|t| {
                        let c = ModelConfig {
                            n_tasks: 1,
                            n_views: cfg.n_views,
                            view_dims: cfg.view_dims.clone(),
                            n_classes: vec![cfg.n_classes[t]],
                            hidden_dim: cfg.hidden_dim,
                            n_blocks: cfg.n_views,
                            block_depth: cfg.block_depth,
                            dropout: cfg.dropout,
                            unit_mode: UnitMode::TaskView,
                        };
                        let task_seed = seed.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        SharedBlockNet::build(c, task_seed).with_fixed_routing((0..cfg.n_views).collect())
                    })
                    .collect();
                Baseline::SingleTask(nets)
            }
        }
    }

    /// Same contract as `SharedBlockNet::predict`.
    pub fn predict(&self, inputs: &[Vec<Tensor>]) -> Result<Vec<Tensor>, ModelError> {
        match self {
            Baseline::ShareAll(net) => net.predict(inputs),
            Baseline::SingleTask(nets) => {
                assert_eq!(inputs.len(), nets.len(), "task count mismatch");
                let mut out = Vec::with_capacity(nets.len());
                for (net, task_views) in nets.iter().zip(inputs) {
                    let probs = net.predict(std::slice::from_ref(task_views))?;
                    out.extend(probs);
                }
                Ok(out)
            }
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self {
            Baseline::ShareAll(net) => net.params(),
            Baseline::SingleTask(nets) => nets.iter().flat_map(|n| n.params()).collect(),
        }
    }
}
