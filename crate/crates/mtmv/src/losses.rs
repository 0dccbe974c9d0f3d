//! Training objective: supervised term, view-fusion co-regularizer, and the
//! uncertainty-weighted consistency/discrimination objective over fragment
//! draws.
//!
//! J = L_s + μ·L_f + λ·(L_cons + L_disc)
//!
//! L_s sums, per task, the fusion-head cross-entropy plus the view-head
//! cross-entropies averaged over views. L_f pulls each view's class
//! distribution toward the fused one in mean batch L2. The adaption term
//! weighs per-task consistency KLs by a learned e^{−α_t} (plus α_t, once per
//! internal draw) and rewards divergence from other fragments by −e^{−β_t}
//! times a margin-clamped KL (plus β_t, once per external draw); reference
//! distributions must already be gradient-stopped by the caller.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Param, Tensor};

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &c) in labels.iter().enumerate() {
        assert!(c < classes, "label {c} out of range ({classes} classes)");
        data[r * classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean cross-entropy of logits against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let shape = g.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "cross_entropy wants (batch, classes) logits");
    let (batch, classes) = (shape[0], shape[1]);
    assert_eq!(labels.len(), batch, "label count mismatch");
    let ls = g.log_softmax(logits);
    let oh = g.constant(one_hot(labels, classes));
    let picked = g.mul(ls, oh);
    let s = g.sum(picked);
    g.scale(s, -1.0 / batch as f64)
}

/// Supervised loss over all tasks: fusion CE plus the per-view CEs averaged
/// over views, summed across tasks.
pub fn supervised_loss(
    g: &mut Graph,
    view_logits: &[Vec<NodeId>],
    fusion_logits: &[NodeId],
    labels: &[Vec<usize>],
) -> NodeId {
    assert_eq!(view_logits.len(), fusion_logits.len());
    assert_eq!(view_logits.len(), labels.len());
    let mut total: Option<NodeId> = None;
    for (t, fusion) in fusion_logits.iter().enumerate() {
        let mut term = cross_entropy(g, *fusion, &labels[t]);
        let n_views = view_logits[t].len() as f64;
        for &vl in &view_logits[t] {
            let ce = cross_entropy(g, vl, &labels[t]);
            let scaled = g.scale(ce, 1.0 / n_views);
            term = g.add(term, scaled);
        }
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    total.expect("at least one task")
}

/// View-fusion co-regularizer: Σ_t Σ_v (1/V) · mean over the batch of the
/// class-axis L2 distance between the view and fusion distributions.
pub fn fusion_regularizer(g: &mut Graph, view_probs: &[Vec<NodeId>], fusion_probs: &[NodeId]) -> NodeId {
    assert_eq!(view_probs.len(), fusion_probs.len());
    let mut total: Option<NodeId> = None;
    for (t, fusion) in fusion_probs.iter().enumerate() {
        let n_views = view_probs[t].len() as f64;
        for &vp in &view_probs[t] {
            let diff = g.sub(vp, *fusion);
            let norms = g.l2_norm_last(diff);
            let m = g.mean(norms);
            let scaled = g.scale(m, 1.0 / n_views);
            total = Some(match total {
                None => scaled,
                Some(acc) => g.add(acc, scaled),
            });
        }
    }
    total.expect("at least one task with one view")
}

/// KL(p ‖ q) between probability rows, mean over the batch. See
/// [`Graph::kl_div`] for the floor and 0·log 0 conventions.
pub fn kl_divergence(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    g.kl_div(p, q)
}

pub struct AdaptionTerms {
    pub consistency: NodeId,
    pub discrimination: NodeId,
}

/// Uncertainty-weighted adaption objective for one step's fragment draws.
///
/// `reference[t]`, `internal[t][k]`, `external[t][i]` are (batch, classes)
/// probability nodes; the reference must be gradient-stopped. Per task:
///   consistency    Σ_k e^{−α_t}·KL(ref ‖ internal_k) + α_t
///   discrimination Σ_i −e^{−β_t}·min(KL(ref ‖ external_i), margin) + β_t
pub fn consistency_adaption_loss(
    g: &mut Graph,
    reference: &[NodeId],
    internal: &[Vec<NodeId>],
    external: &[Vec<NodeId>],
    alpha: &Param,
    beta: &Param,
    margin: f64,
) -> AdaptionTerms {
    let n_tasks = reference.len();
    assert_eq!(internal.len(), n_tasks);
    assert_eq!(external.len(), n_tasks);
    assert!(margin > 0.0, "margin must be positive");
    let alpha_id = g.leaf(alpha);
    let beta_id = g.leaf(beta);

    let mut cons: Option<NodeId> = None;
    let mut disc: Option<NodeId> = None;
    for t in 0..n_tasks {
        let a_t = g.elem(alpha_id, t);
        let neg_a = g.neg(a_t);
        let inv_a = g.exp(neg_a);
        for &q in &internal[t] {
            let kl = g.kl_div(reference[t], q);
            let weighted = g.mul(inv_a, kl);
            let term = g.add(weighted, a_t);
            cons = Some(match cons {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }

        let b_t = g.elem(beta_id, t);
        let neg_b = g.neg(b_t);
        let inv_b = g.exp(neg_b);
        for &q in &external[t] {
            let kl = g.kl_div(reference[t], q);
            let clamped = g.clamp_max(kl, margin);
            let weighted = g.mul(inv_b, clamped);
            let neg_w = g.neg(weighted);
            let term = g.add(neg_w, b_t);
            disc = Some(match disc {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
    }
    AdaptionTerms {
        consistency: cons.expect("at least one internal draw"),
        discrimination: disc.expect("at least one external draw"),
    }
}

/// J = L_s + μ·L_f + λ·(L_cons + L_disc). Zero coefficients skip their term
/// entirely, so the λ = μ = 0 objective is the supervised node itself.
pub fn total_objective(
    g: &mut Graph,
    l_s: NodeId,
    l_f: Option<NodeId>,
    adaption: Option<&AdaptionTerms>,
    lambda: f64,
    mu: f64,
) -> NodeId {
    let mut j = l_s;
    if mu != 0.0 {
        let lf = l_f.expect("mu != 0 requires the fusion regularizer");
        let scaled = g.scale(lf, mu);
        j = g.add(j, scaled);
    }
    if lambda != 0.0 {
        let terms = adaption.expect("lambda != 0 requires the adaption terms");
        let lu = g.add(terms.consistency, terms.discrimination);
        let scaled = g.scale(lu, lambda);
        j = g.add(j, scaled);
    }
    j
}

/// Per-step loss values for logging and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_f: f64,
    pub l_u_cons: f64,
    pub l_u_disc: f64,
    pub j: f64,
}
