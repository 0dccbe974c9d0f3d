//! Learnable block routing via the Gumbel-softmax relaxation.
//!
//! Each gating unit (one per task-view pair, or one per view when sharing
//! across tasks) owns a row of logits over the block bank. Training draws one
//! Gumbel noise vector per unit per step and relaxes the categorical choice
//! with a temperature-annealed softmax; inference drops the noise and takes
//! the argmax.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Param, Tensor};
use rand::Rng;

/// Uniform draws are clamped to this range before the double log.
pub const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UnitMode {
    /// One gating unit per (task, view): T·V logit rows.
    TaskView,
    /// One gating unit per view, shared by every task: V logit rows.
    View,
}

impl UnitMode {
    pub fn parse(s: &str) -> Option<UnitMode> {
        match s {
            "task_view" => Some(UnitMode::TaskView),
            "view" => Some(UnitMode::View),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            UnitMode::TaskView => "task_view",
            UnitMode::View => "view",
        }
    }
}

/// g = −log(−log u) with u clamped into [GUMBEL_CLAMP, 1 − GUMBEL_CLAMP].
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

/// Noisy categorical draw: argmax_i (logits_i + g_i). Ties take the lowest index.
pub fn gumbel_max_sample<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let noise = sample_gumbel(logits.len(), rng);
    argmax(&logits.iter().zip(&noise).map(|(l, g)| l + g).collect::<Vec<f64>>())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// One step's Gumbel noise: a vector per gating unit.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    pub per_unit: Vec<Vec<f64>>,
}

/// Exponential temperature anneal, floored at `tau_min`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TempSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub rate: f64,
}

impl TempSchedule {
    /// Rate such that the anneal first touches `tau_min` at `step`.
    pub fn reaching_min_at(tau0: f64, tau_min: f64, step: u64) -> TempSchedule {
        assert!(tau0 >= tau_min && tau_min > 0.0 && step > 0);
        TempSchedule { tau0, tau_min, rate: (tau0 / tau_min).ln() / step as f64 }
    }

    pub fn at(&self, step: u64) -> f64 {
        (self.tau0 * (-self.rate * step as f64).exp()).max(self.tau_min)
    }
}

impl Default for TempSchedule {
    fn default() -> Self {
        TempSchedule { tau0: 5.0, tau_min: 0.5, rate: 0.0 }
    }
}

pub struct GatePolicy {
    logits: Param,
    mode: UnitMode,
    n_tasks: usize,
    n_views: usize,
    n_blocks: usize,
}

impl GatePolicy {
    /// Logits start at zero: a uniform routing distribution.
    pub fn new(mode: UnitMode, n_tasks: usize, n_views: usize, n_blocks: usize) -> Self {
        assert!(n_tasks > 0 && n_views > 0 && n_blocks > 0);
        let units = match mode {
            UnitMode::TaskView => n_tasks * n_views,
            UnitMode::View => n_views,
        };
        let logits = Param::new("gate.logits", Tensor::zeros(vec![units, n_blocks]));
        GatePolicy { logits, mode, n_tasks, n_views, n_blocks }
    }

    pub fn mode(&self) -> UnitMode {
        self.mode
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_units(&self) -> usize {
        match self.mode {
            UnitMode::TaskView => self.n_tasks * self.n_views,
            UnitMode::View => self.n_views,
        }
    }

    pub fn unit_index(&self, task: usize, view: usize) -> usize {
        debug_assert!(task < self.n_tasks && view < self.n_views);
        match self.mode {
            UnitMode::TaskView => task * self.n_views + view,
            UnitMode::View => view,
        }
    }

    pub fn unit_label(&self, unit: usize) -> String {
        match self.mode {
            UnitMode::TaskView => format!("t{}_v{}", unit / self.n_views, unit % self.n_views),
            UnitMode::View => format!("v{unit}"),
        }
    }

    pub fn logits(&self) -> &Param {
        &self.logits
    }

    /// One fresh noise vector per unit, in unit order.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> GumbelNoise {
        GumbelNoise {
            per_unit: (0..self.n_units()).map(|_| sample_gumbel(self.n_blocks, rng)).collect(),
        }
    }

    /// Differentiable soft gates: per unit, softmax((logits + g) / tau).
    pub fn gate_nodes(&self, g: &mut Graph, noise: &GumbelNoise, tau: f64) -> Vec<NodeId> {
        assert!(tau > 0.0, "temperature must be positive");
        assert_eq!(noise.per_unit.len(), self.n_units(), "noise unit count mismatch");
        let logits = g.leaf(&self.logits);
        (0..self.n_units())
            .map(|u| {
                let row = g.row(logits, u);
                let gn = g.constant(Tensor::new(vec![self.n_blocks], noise.per_unit[u].clone()));
                let noisy = g.add(row, gn);
                let scaled = g.scale(noisy, 1.0 / tau);
                g.softmax(scaled)
            })
            .collect()
    }

    /// Noise-free argmax per unit; ties resolve to the lowest block index.
    pub fn hard_assignment(&self) -> Vec<usize> {
        let t = self.logits.value();
        let data = t.data();
        (0..self.n_units()).map(|u| argmax(&data[u * self.n_blocks..(u + 1) * self.n_blocks])).collect()
    }

    /// Noise-free soft probabilities per unit (softmax of the logit rows).
    pub fn soft_matrix(&self) -> Vec<Vec<f64>> {
        let t = self.logits.value();
        let data = t.data();
        (0..self.n_units())
            .map(|u| {
                let row = &data[u * self.n_blocks..(u + 1) * self.n_blocks];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / z).collect()
            })
            .collect()
    }

    /// Gate matrix as CSV: `unit,block_0,...,block_{N-1}`, one labeled row per
    /// unit holding the noise-free soft probabilities.
    pub fn export_gate_matrix(&self) -> String {
        let mut out = String::from("unit");
        for b in 0..self.n_blocks {
            out.push_str(&format!(",block_{b}"));
        }
        out.push('\n');
        for (u, probs) in self.soft_matrix().iter().enumerate() {
            out.push_str(&self.unit_label(u));
            for p in probs {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        out
    }
}
