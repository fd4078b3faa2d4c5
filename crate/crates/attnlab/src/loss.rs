//! Attack losses over attention traces and classifier logits.
//!
//! The key-query losses act on the pre-softmax logit matrices B captured in
//! a forward trace, optionally recomputed from ℓ1,2-normalized projections
//! so per-head values are commensurable. Every configuration is arranged so
//! the attacker always ascends the returned total.

use std::collections::BTreeSet;

use crate::attention::{HeadTrace, LayerTrace};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossTerm {
    Ce,
    Kq,
    KqStar,
    PatchFool,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Kq => "kq",
            LossTerm::KqStar => "kq_star",
            LossTerm::PatchFool => "patch_fool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeMode {
    /// Ascend the cross-entropy of the ground-truth class.
    UntargetedMaximize,
    /// Descend the cross-entropy of the target class (sign-flipped so the
    /// total is still ascended).
    TargetedMinimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Smooth maximum, log Σ eˣ.
    Smax,
    Mean,
    /// Hard maximum; gradient routes to the first arg-max on ties.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    Single(usize),
}

/// Per-term weights; the composition never states relative scales, so all
/// default to 1.
#[derive(Debug, Clone, Copy)]
pub struct TermWeights {
    pub ce: f64,
    pub kq: f64,
    pub kq_star: f64,
    pub patch_fool: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { ce: 1.0, kq: 1.0, kq_star: 1.0, patch_fool: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub terms: BTreeSet<LossTerm>,
    pub ce_mode: CeMode,
    pub target_class: Option<usize>,
    /// Target key token i★ (the token covered by the patch).
    pub target_key: usize,
    /// Target query token j★; the class token by default.
    pub target_query: usize,
    pub layer_selector: LayerSelector,
    pub head_aggregation: Aggregation,
    pub layer_aggregation: Aggregation,
    /// Recompute B from ℓ1,2-normalized projections inside kq terms.
    pub normalize: bool,
    pub weights: TermWeights,
}

impl LossConfig {
    pub fn new(terms: impl IntoIterator<Item = LossTerm>) -> Self {
        LossConfig {
            terms: terms.into_iter().collect(),
            ce_mode: CeMode::UntargetedMaximize,
            target_class: None,
            target_key: 1,
            target_query: 0,
            layer_selector: LayerSelector::All,
            head_aggregation: Aggregation::Smax,
            layer_aggregation: Aggregation::Smax,
            normalize: true,
            weights: TermWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("loss needs at least one enabled term".into()));
        }
        if self.ce_mode == CeMode::TargetedMinimize && self.terms.contains(&LossTerm::Ce) && self.target_class.is_none() {
            return Err(Error::Config("targeted mode requires target_class".into()));
        }
        Ok(())
    }
}

/// Scale projections so their mean row ℓ2 norm is 1: P / ((1/n)‖P‖₁,₂).
pub fn l12_normalize(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let shape = tape.value(p).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "l12_normalize",
            detail: format!("expected 2-D projections, got rank {}", shape.len()),
        });
    }
    let n = shape[0];
    let max_row_norm = (0..n)
        .map(|r| tape.value(p).row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max_row_norm <= 1e-12 {
        return Err(Error::DegenerateInput("l12_normalize of an all-zero projection".into()));
    }
    let sq = tape.mul(p, p)?;
    let row_sq = tape.sum_last_dim(sq);
    let row_norms = tape.sqrt(row_sq);
    let total = tape.sum(row_norms);
    let mean_norm = tape.scale(total, 1.0 / n as f64);
    tape.div_scalar(p, mean_norm)
}

fn logits_for(tape: &mut Tape, head: &HeadTrace, d_k: usize, normalize: bool) -> Result<NodeId> {
    if !normalize {
        return Ok(head.logits);
    }
    let nq = l12_normalize(tape, head.p_q)?;
    let nk = l12_normalize(tape, head.p_k)?;
    let nk_t = tape.transpose(nk)?;
    let raw = tape.matmul(nq, nk_t)?;
    Ok(tape.scale(raw, 1.0 / (d_k as f64).sqrt()))
}

fn check_token(name: &'static str, index: usize, n: usize) -> Result<()> {
    if index >= n {
        return Err(Error::IndexOutOfRange { what: name, index, limit: n });
    }
    Ok(())
}

/// Mean over queries of the (optionally normalized) logit column of key i★.
pub fn loss_kq_head_layer(
    tape: &mut Tape,
    head: &HeadTrace,
    d_k: usize,
    i_star: usize,
    normalize: bool,
) -> Result<NodeId> {
    let b = logits_for(tape, head, d_k, normalize)?;
    let n = tape.value(b).shape()[0];
    check_token("target key", i_star, n)?;
    let column = tape.slice(b, &[0, i_star], &[n, 1])?;
    Ok(tape.mean(column))
}

/// The single (optionally normalized) logit B[j★][i★].
pub fn loss_kq_star_head_layer(
    tape: &mut Tape,
    head: &HeadTrace,
    d_k: usize,
    i_star: usize,
    j_star: usize,
    normalize: bool,
) -> Result<NodeId> {
    let b = logits_for(tape, head, d_k, normalize)?;
    let n = tape.value(b).shape()[0];
    check_token("target key", i_star, n)?;
    check_token("target query", j_star, n)?;
    let element = tape.slice(b, &[j_star, i_star], &[1, 1])?;
    tape.reshape(element, vec![1])
}

/// Aggregate a nonempty list of scalars with the configured mode.
pub fn aggregate(tape: &mut Tape, values: &[NodeId], mode: Aggregation) -> Result<NodeId> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("aggregate of an empty list".into()));
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    match mode {
        Aggregation::Smax => {
            let cat = tape.concat(values, 0)?;
            let shift = tape.value(cat).values().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let shifted = tape.add_scalar(cat, -shift);
            let exps = tape.exp(shifted);
            let total = tape.sum(exps);
            let log = tape.log(total);
            Ok(tape.add_scalar(log, shift))
        }
        Aggregation::Mean => {
            let cat = tape.concat(values, 0)?;
            Ok(tape.mean(cat))
        }
        Aggregation::Max => {
            let mut best = 0;
            for (i, &v) in values.iter().enumerate() {
                if tape.value(v).values()[0] > tape.value(values[best]).values()[0] {
                    best = i;
                }
            }
            Ok(values[best])
        }
    }
}

fn kq_over_traces(
    tape: &mut Tape,
    traces: &[LayerTrace],
    cfg: &LossConfig,
    star: bool,
) -> Result<NodeId> {
    if traces.is_empty() {
        return Err(Error::DegenerateInput("kq loss over an empty trace".into()));
    }
    let layer_losses = |tape: &mut Tape, layer: &LayerTrace| -> Result<NodeId> {
        let mut per_head = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let value = if star {
                loss_kq_star_head_layer(tape, head, layer.d_k, cfg.target_key, cfg.target_query, cfg.normalize)?
            } else {
                loss_kq_head_layer(tape, head, layer.d_k, cfg.target_key, cfg.normalize)?
            };
            per_head.push(value);
        }
        aggregate(tape, &per_head, cfg.head_aggregation)
    };
    match cfg.layer_selector {
        LayerSelector::Single(l) => {
            if l >= traces.len() {
                return Err(Error::IndexOutOfRange { what: "layer selector", index: l, limit: traces.len() });
            }
            layer_losses(tape, &traces[l])
        }
        LayerSelector::All => {
            let mut per_layer = Vec::with_capacity(traces.len());
            for layer in traces {
                per_layer.push(layer_losses(tape, layer)?);
            }
            aggregate(tape, &per_layer, cfg.layer_aggregation)
        }
    }
}

/// Key-query loss over all queries: per-layer head aggregation followed by
/// cross-layer aggregation (skipped under a single-layer selector).
pub fn loss_kq(tape: &mut Tape, traces: &[LayerTrace], cfg: &LossConfig) -> Result<NodeId> {
    kq_over_traces(tape, traces, cfg, false)
}

/// Key-query loss targeting the single query j★.
pub fn loss_kq_star(tape: &mut Tape, traces: &[LayerTrace], cfg: &LossConfig) -> Result<NodeId> {
    kq_over_traces(tape, traces, cfg, true)
}

/// Post-softmax baseline: mean over layers, heads and queries of the
/// attention weight drawn by key i★.
pub fn loss_patch_fool(tape: &mut Tape, traces: &[LayerTrace], i_star: usize) -> Result<NodeId> {
    if traces.is_empty() {
        return Err(Error::DegenerateInput("patch-fool loss over an empty trace".into()));
    }
    let mut columns = Vec::new();
    for layer in traces {
        for head in &layer.heads {
            let n = tape.value(head.weights).shape()[0];
            check_token("target key", i_star, n)?;
            columns.push(tape.slice(head.weights, &[0, i_star], &[n, 1])?);
        }
    }
    let cat = tape.concat(&columns, 0)?;
    Ok(tape.mean(cat))
}

/// Cross-entropy of a logit vector against one class, via a stabilized
/// log-sum-exp.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, class: usize) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 1 {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            detail: format!("expected a logit vector, got rank {}", shape.len()),
        });
    }
    check_token("class", class, shape[0])?;
    let shift = tape.value(logits).values().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted = tape.add_scalar(logits, -shift);
    let exps = tape.exp(shifted);
    let total = tape.sum(exps);
    let log = tape.log(total);
    let lse = tape.add_scalar(log, shift);
    let picked = tape.slice(logits, &[class], &[1])?;
    tape.sub(lse, picked)
}

/// The total loss and its per-term components (unweighted).
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: NodeId,
    pub terms: Vec<(LossTerm, NodeId)>,
}

/// Signed, weighted sum of the enabled terms, arranged so that ascending
/// the total always serves the attack.
pub fn total_loss(
    tape: &mut Tape,
    logits: NodeId,
    traces: &[LayerTrace],
    label: usize,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let mut terms = Vec::new();
    let mut weighted = Vec::new();
    for &term in &cfg.terms {
        let (value, weight) = match term {
            LossTerm::Ce => match cfg.ce_mode {
                CeMode::UntargetedMaximize => (cross_entropy(tape, logits, label)?, cfg.weights.ce),
                CeMode::TargetedMinimize => {
                    let target = cfg
                        .target_class
                        .ok_or_else(|| Error::Config("targeted mode requires target_class".into()))?;
                    (cross_entropy(tape, logits, target)?, -cfg.weights.ce)
                }
            },
            LossTerm::Kq => (loss_kq(tape, traces, cfg)?, cfg.weights.kq),
            LossTerm::KqStar => (loss_kq_star(tape, traces, cfg)?, cfg.weights.kq_star),
            LossTerm::PatchFool => (loss_patch_fool(tape, traces, cfg.target_key)?, cfg.weights.patch_fool),
        };
        terms.push((term, value));
        weighted.push(if weight == 1.0 { value } else { tape.scale(value, weight) });
    }
    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = tape.add(total, w)?;
    }
    Ok(TotalLoss { total, terms })
}
