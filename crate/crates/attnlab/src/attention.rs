//! Scaled dot-product multi-head self-attention with introspection hooks.
//!
//! Every head forward leaves a trace of its projected queries/keys, the
//! pre-softmax logit matrix B (rows index queries, columns keys) and the
//! post-softmax weight matrix A. The trace entries are live tape nodes, so
//! losses defined on them differentiate back to the input.

use std::io::Write;

use crate::error::{shape_string, Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Projection weights of one attention head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Option<Tensor>,
    pub b_k: Option<Tensor>,
    pub b_v: Option<Tensor>,
}

impl HeadParams {
    /// Linear projections (no biases); the common configuration here.
    pub fn linear(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Self {
        HeadParams { w_q, w_k, w_v, b_q: None, b_k: None, b_v: None }
    }
}

/// Multi-head attention parameters: per-head projections plus the shared
/// output projection applied to the concatenated head outputs.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    heads: Vec<HeadParams>,
    w_o: Tensor,
    d_model: usize,
    d_k: usize,
    d_v: usize,
}

impl AttentionParams {
    pub fn new(heads: Vec<HeadParams>, w_o: Tensor) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
        let d_model = first.w_q.shape()[0];
        let d_k = first.w_q.shape()[1];
        let d_v = first.w_v.shape()[1];
        for head in &heads {
            if head.w_q.shape() != [d_model, d_k]
                || head.w_k.shape() != [d_model, d_k]
                || head.w_v.shape() != [d_model, d_v]
            {
                return Err(Error::ShapeMismatch {
                    op: "AttentionParams::new",
                    lhs: shape_string(&[d_model, d_k]),
                    rhs: shape_string(head.w_q.shape()),
                });
            }
        }
        if w_o.shape() != [heads.len() * d_v, d_model] {
            return Err(Error::ShapeMismatch {
                op: "AttentionParams::new",
                lhs: shape_string(&[heads.len() * d_v, d_model]),
                rhs: shape_string(w_o.shape()),
            });
        }
        Ok(AttentionParams { heads, w_o, d_model, d_k, d_v })
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn w_o(&self) -> &Tensor {
        &self.w_o
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }
}

/// Tape handles of one head's attention internals.
#[derive(Debug, Clone, Copy)]
pub struct HeadTrace {
    /// Projected queries, n×d_k.
    pub p_q: NodeId,
    /// Projected keys, n×d_k.
    pub p_k: NodeId,
    /// Pre-softmax logits B, n×n; rows index queries, columns keys.
    pub logits: NodeId,
    /// Post-softmax weights A, n×n; rows are probability vectors.
    pub weights: NodeId,
}

/// One attention layer's trace: the input that fed the projections plus
/// per-head internals.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub attn_input: NodeId,
    pub heads: Vec<HeadTrace>,
    pub d_k: usize,
}

/// Bound parameter handles of one attention layer on a tape.
#[derive(Debug, Clone)]
pub struct BoundAttention {
    pub heads: Vec<BoundHead>,
    pub w_o: NodeId,
    pub d_k: usize,
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub b_q: Option<NodeId>,
    pub b_k: Option<NodeId>,
    pub b_v: Option<NodeId>,
}

impl AttentionParams {
    /// Put the parameters on a tape as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        let heads = self
            .heads
            .iter()
            .map(|h| BoundHead {
                w_q: tape.leaf(h.w_q.clone()),
                w_k: tape.leaf(h.w_k.clone()),
                w_v: tape.leaf(h.w_v.clone()),
                b_q: h.b_q.as_ref().map(|b| tape.leaf(b.clone())),
                b_k: h.b_k.as_ref().map(|b| tape.leaf(b.clone())),
                b_v: h.b_v.as_ref().map(|b| tape.leaf(b.clone())),
            })
            .collect();
        BoundAttention { heads, w_o: tape.leaf(self.w_o.clone()), d_k: self.d_k }
    }
}

fn project(tape: &mut Tape, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let p = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(p, b),
        None => Ok(p),
    }
}

fn check_head(bound: &BoundAttention, h: usize) -> Result<()> {
    if h >= bound.heads.len() {
        return Err(Error::IndexOutOfRange { what: "attention head", index: h, limit: bound.heads.len() });
    }
    Ok(())
}

/// Pre-softmax logits B of head `h`: B[j][i] is the scaled dot-product of
/// query j with key i.
pub fn attention_logits(tape: &mut Tape, x: NodeId, bound: &BoundAttention, h: usize) -> Result<NodeId> {
    Ok(head_trace(tape, x, bound, h, None)?.logits)
}

fn head_trace(
    tape: &mut Tape,
    x: NodeId,
    bound: &BoundAttention,
    h: usize,
    key_override: Option<(usize, &Tensor)>,
) -> Result<HeadTrace> {
    check_head(bound, h)?;
    let head = &bound.heads[h];
    let p_q = project(tape, x, head.w_q, head.b_q)?;
    let mut p_k = project(tape, x, head.w_k, head.b_k)?;
    if let Some((token, row)) = key_override {
        // Surgery: replace one projected key row with a fixed value;
        // queries and values are untouched.
        let fixed = tape.constant(row.clone());
        p_k = tape.write_box(p_k, fixed, &[token, 0])?;
    }
    let p_k_t = tape.transpose(p_k)?;
    let raw = tape.matmul(p_q, p_k_t)?;
    let logits = tape.scale(raw, 1.0 / (bound.d_k as f64).sqrt());
    let weights = tape.softmax_lastdim(logits);
    Ok(HeadTrace { p_q, p_k, logits, weights })
}

/// One self-attention head: softmax(B) · X·W_V. Returns the head output
/// and its trace.
pub fn self_attention_head(
    tape: &mut Tape,
    x: NodeId,
    bound: &BoundAttention,
    h: usize,
) -> Result<(NodeId, HeadTrace)> {
    head_with_override(tape, x, bound, h, None)
}

fn head_with_override(
    tape: &mut Tape,
    x: NodeId,
    bound: &BoundAttention,
    h: usize,
    key_override: Option<(usize, &Tensor)>,
) -> Result<(NodeId, HeadTrace)> {
    let trace = head_trace(tape, x, bound, h, key_override)?;
    let head = &bound.heads[h];
    let v = project(tape, x, head.w_v, head.b_v)?;
    let out = tape.matmul(trace.weights, v)?;
    Ok((out, trace))
}

/// Full multi-head self-attention: heads concatenated then projected by W_O.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: NodeId,
    bound: &BoundAttention,
) -> Result<(NodeId, LayerTrace)> {
    multi_head_with_key_override(tape, x, bound, None)
}

/// Multi-head self-attention where the projected key row of one token may
/// be overwritten per head before the logits are formed.
pub fn multi_head_with_key_override(
    tape: &mut Tape,
    x: NodeId,
    bound: &BoundAttention,
    key_override: Option<(usize, &[Tensor])>,
) -> Result<(NodeId, LayerTrace)> {
    if let Some((_, rows)) = key_override {
        if rows.len() != bound.heads.len() {
            return Err(Error::Config(format!(
                "key override provides {} rows for {} heads",
                rows.len(),
                bound.heads.len()
            )));
        }
    }
    let mut outputs = Vec::with_capacity(bound.heads.len());
    let mut traces = Vec::with_capacity(bound.heads.len());
    for h in 0..bound.heads.len() {
        let per_head = key_override.map(|(token, rows)| (token, &rows[h]));
        let (out, trace) = head_with_override(tape, x, bound, h, per_head)?;
        outputs.push(out);
        traces.push(trace);
    }
    let concat = tape.concat(&outputs, 1)?;
    let out = tape.matmul(concat, bound.w_o)?;
    Ok((out, LayerTrace { attn_input: x, heads: traces, d_k: bound.d_k }))
}

/// Split of the head-output gradient into its two product-rule terms.
///
/// `g_val` treats the attention weights A as constant (gradient through the
/// values path only); `g_attn` treats the values X·W_V as constant (gradient
/// through the attention weights only). By the product rule their sum is the
/// full gradient of ⟨cotangent, head output⟩ with respect to X.
pub fn gradient_path_decomposition(
    x: &Tensor,
    params: &AttentionParams,
    h: usize,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x_id = tape.leaf(x.clone());
    let bound = bind_constant(&mut tape, params);
    check_head(&bound, h)?;

    let trace = head_trace(&mut tape, x_id, &bound, h, None)?;
    let head = &bound.heads[h];
    let v = project(&mut tape, x_id, head.w_v, head.b_v)?;
    let n = x.shape()[0];
    if cotangent.shape() != [n, params.d_v] {
        return Err(Error::ShapeMismatch {
            op: "gradient_path_decomposition",
            lhs: shape_string(&[n, params.d_v]),
            rhs: shape_string(cotangent.shape()),
        });
    }
    let cot = tape.constant(cotangent.clone());

    let a_const = tape.detach(trace.weights);
    let out_val = tape.matmul(a_const, v)?;
    let val_prod = tape.mul(cot, out_val)?;
    let val_loss = tape.sum(val_prod);

    let v_const = tape.detach(v);
    let out_attn = tape.matmul(trace.weights, v_const)?;
    let attn_prod = tape.mul(cot, out_attn)?;
    let attn_loss = tape.sum(attn_prod);

    let g_val = tape.backward(val_loss)?.wrt(&tape, x_id);
    let g_attn = tape.backward(attn_loss)?.wrt(&tape, x_id);
    Ok((g_attn, g_val))
}

/// Bind parameters as constants: attention-only gradients w.r.t. X.
fn bind_constant(tape: &mut Tape, params: &AttentionParams) -> BoundAttention {
    let heads = params
        .heads
        .iter()
        .map(|h| BoundHead {
            w_q: tape.constant(h.w_q.clone()),
            w_k: tape.constant(h.w_k.clone()),
            w_v: tape.constant(h.w_v.clone()),
            b_q: h.b_q.as_ref().map(|b| tape.constant(b.clone())),
            b_k: h.b_k.as_ref().map(|b| tape.constant(b.clone())),
            b_v: h.b_v.as_ref().map(|b| tape.constant(b.clone())),
        })
        .collect();
    BoundAttention { heads, w_o: tape.constant(params.w_o.clone()), d_k: params.d_k }
}

/// Per-layer element-wise ratio |g_attn / g_val| pooled over heads.
#[derive(Debug, Clone, Copy)]
pub struct RatioSummary {
    /// Median ratio, or `None` when every values-path entry is below threshold.
    pub median: Option<f64>,
    /// Entries excluded because |g_val| fell below the threshold.
    pub excluded: usize,
    /// Total pooled entries (tokens × d_model × heads).
    pub entries: usize,
}

/// Threshold below which values-path entries are excluded from the ratio
/// median to avoid division blowup.
pub const RATIO_EXCLUSION_THRESHOLD: f64 = 1e-12;

/// Median over heads and token entries of |g_attn/g_val| for one attention
/// layer, with an all-ones cotangent per head.
pub fn gradient_ratio_layer(x: &Tensor, params: &AttentionParams) -> Result<RatioSummary> {
    let n = x.shape()[0];
    let ones = Tensor::ones(vec![n, params.d_v]);
    let mut ratios = Vec::new();
    let mut excluded = 0;
    let mut entries = 0;
    for h in 0..params.num_heads() {
        let (g_attn, g_val) = gradient_path_decomposition(x, params, h, &ones)?;
        for (a, v) in g_attn.values().iter().zip(g_val.values()) {
            entries += 1;
            if v.abs() <= RATIO_EXCLUSION_THRESHOLD {
                excluded += 1;
            } else {
                ratios.push((a / v).abs());
            }
        }
    }
    Ok(RatioSummary { median: crate::stats::median(&mut ratios), excluded, entries })
}

/// Mean over queries and heads of the final layer's attention column for
/// one key token.
pub fn mean_final_attention_to_token(tape: &Tape, traces: &[LayerTrace], token: usize) -> Result<f64> {
    let last = traces.last().ok_or_else(|| Error::DegenerateInput("empty trace".into()))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for head in &last.heads {
        let a = tape.value(head.weights);
        let n = a.shape()[0];
        if token >= n {
            return Err(Error::IndexOutOfRange { what: "attention token", index: token, limit: n });
        }
        for q in 0..n {
            total += a.at(q, token);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Structured text export of a forward pass's attention internals: per
/// layer/head, shapes and row-major values of P_Q, P_K, B, A.
pub fn write_trace<W: Write>(tape: &Tape, layers: &[LayerTrace], out: &mut W) -> Result<()> {
    writeln!(out, "attention-trace v1")?;
    writeln!(out, "layers = {}", layers.len())?;
    for (l, layer) in layers.iter().enumerate() {
        writeln!(out, "[layer {l}]")?;
        writeln!(out, "heads = {}", layer.heads.len())?;
        for (h, head) in layer.heads.iter().enumerate() {
            for (name, id) in [("P_Q", head.p_q), ("P_K", head.p_k), ("B", head.logits), ("A", head.weights)] {
                let t = tape.value(id);
                write!(out, "layer {l} head {h} {name} shape {}", shape_string(t.shape()))?;
                for v in t.values() {
                    write!(out, " {v}")?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_params<R: Rng>(d_model: usize, d_k: usize, d_v: usize, heads: usize, rng: &mut R) -> AttentionParams {
        let head_params = (0..heads)
            .map(|_| {
                HeadParams::linear(
                    Tensor::rand_normal(vec![d_model, d_k], 0.0, 0.6, rng),
                    Tensor::rand_normal(vec![d_model, d_k], 0.0, 0.6, rng),
                    Tensor::rand_normal(vec![d_model, d_v], 0.0, 0.6, rng),
                )
            })
            .collect();
        let w_o = Tensor::rand_normal(vec![heads * d_v, d_model], 0.0, 0.6, rng);
        AttentionParams::new(head_params, w_o).unwrap()
    }

    #[test]
    fn identity_projections_give_scaled_gram() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let params = AttentionParams::new(
            vec![HeadParams::linear(eye.clone(), eye.clone(), eye.clone())],
            eye.clone(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(eye);
        let bound = params.bind(&mut tape);
        let b = attention_logits(&mut tape, x, &bound, 0).unwrap();
        let s = 1.0 / 2.0_f64.sqrt();
        let want = [s, 0.0, 0.0, s];
        for (g, w) in tape.value(b).values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_logits_are_1x1() {
        let mut rng = crate::rng::stream(11, "attn", 0);
        let params = random_params(3, 2, 2, 1, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_normal(vec![1, 3], 0.0, 1.0, &mut rng));
        let bound = params.bind(&mut tape);
        let b = attention_logits(&mut tape, x, &bound, 0).unwrap();
        assert_eq!(tape.value(b).shape(), &[1, 1]);
    }

    #[test]
    fn head_index_out_of_range() {
        let mut rng = crate::rng::stream(11, "attn", 1);
        let params = random_params(3, 2, 2, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_normal(vec![2, 3], 0.0, 1.0, &mut rng));
        let bound = params.bind(&mut tape);
        assert!(attention_logits(&mut tape, x, &bound, 2).is_err());
    }

    #[test]
    fn logits_match_explicit_two_matmul_oracle() {
        let mut rng = crate::rng::stream(11, "attn", 2);
        let params = random_params(4, 3, 3, 1, &mut rng);
        let x_val = Tensor::rand_normal(vec![3, 4], 0.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let bound = params.bind(&mut tape);
        let b = attention_logits(&mut tape, x, &bound, 0).unwrap();

        // independent composition of the same product
        let mut oracle = Tape::new();
        let xo = oracle.leaf(x_val);
        let wq = oracle.leaf(params.heads()[0].w_q.clone());
        let wk = oracle.leaf(params.heads()[0].w_k.clone());
        let pq = oracle.matmul(xo, wq).unwrap();
        let pk = oracle.matmul(xo, wk).unwrap();
        let pkt = oracle.transpose(pk).unwrap();
        let raw = oracle.matmul(pq, pkt).unwrap();
        let want = oracle.scale(raw, 1.0 / 3.0_f64.sqrt());

        assert!(tape.value(b).max_abs_diff(oracle.value(want)) < 1e-14);
    }

    #[test]
    fn single_token_head_is_value_projection() {
        let mut rng = crate::rng::stream(12, "attn-head", 0);
        let params = random_params(3, 2, 2, 1, &mut rng);
        let x_val = Tensor::rand_normal(vec![1, 3], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let bound = params.bind(&mut tape);
        let (out, trace) = self_attention_head(&mut tape, x, &bound, 0).unwrap();
        assert_eq!(tape.value(trace.weights).values(), &[1.0]);

        let mut oracle = Tape::new();
        let xo = oracle.leaf(x_val);
        let wv = oracle.leaf(params.heads()[0].w_v.clone());
        let want = oracle.matmul(xo, wv).unwrap();
        assert!(tape.value(out).max_abs_diff(oracle.value(want)) < 1e-14);
    }

    #[test]
    fn zero_value_projection_zeroes_output() {
        let mut rng = crate::rng::stream(12, "attn-head", 1);
        let mut params = random_params(3, 2, 2, 1, &mut rng);
        params.heads[0].w_v = Tensor::zeros(vec![3, 2]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_normal(vec![4, 3], 0.0, 1.0, &mut rng));
        let bound = params.bind(&mut tape);
        let (out, _) = self_attention_head(&mut tape, x, &bound, 0).unwrap();
        assert_eq!(tape.value(out).values(), &vec![0.0; 8][..]);
    }

    #[test]
    fn head_output_matches_composed_primitives() {
        let mut rng = crate::rng::stream(12, "attn-head", 2);
        let params = random_params(4, 2, 3, 1, &mut rng);
        let x_val = Tensor::rand_normal(vec![3, 4], 0.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let bound = params.bind(&mut tape);
        let (out, _) = self_attention_head(&mut tape, x, &bound, 0).unwrap();

        let mut oracle = Tape::new();
        let xo = oracle.leaf(x_val);
        let wq = oracle.leaf(params.heads()[0].w_q.clone());
        let wk = oracle.leaf(params.heads()[0].w_k.clone());
        let wv = oracle.leaf(params.heads()[0].w_v.clone());
        let pq = oracle.matmul(xo, wq).unwrap();
        let pk = oracle.matmul(xo, wk).unwrap();
        let pkt = oracle.transpose(pk).unwrap();
        let raw = oracle.matmul(pq, pkt).unwrap();
        let b = oracle.scale(raw, 1.0 / 2.0_f64.sqrt());
        let a = oracle.softmax_lastdim(b);
        let v = oracle.matmul(xo, wv).unwrap();
        let want = oracle.matmul(a, v).unwrap();

        assert!(tape.value(out).max_abs_diff(oracle.value(want)) < 1e-14);
    }

    #[test]
    fn single_head_identity_output_projection_is_head() {
        let mut rng = crate::rng::stream(13, "mhsa", 0);
        let mut params = random_params(3, 3, 3, 1, &mut rng);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.values_mut()[i * 3 + i] = 1.0;
        }
        params.w_o = eye;
        let x_val = Tensor::rand_normal(vec![4, 3], 0.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x_val);
        let bound = params.bind(&mut tape);
        let (mh, _) = multi_head_self_attention(&mut tape, x, &bound).unwrap();
        let (head, _) = self_attention_head(&mut tape, x, &bound, 0).unwrap();
        assert!(tape.value(mh).max_abs_diff(tape.value(head)) < 1e-14);
    }

    #[test]
    fn zero_output_projection_keeps_traces() {
        let mut rng = crate::rng::stream(13, "mhsa", 1);
        let mut params = random_params(4, 2, 2, 2, &mut rng);
        params.w_o = Tensor::zeros(vec![4, 4]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_normal(vec![3, 4], 0.0, 1.0, &mut rng));
        let bound = params.bind(&mut tape);
        let (out, trace) = multi_head_self_attention(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.value(out).values(), &vec![0.0; 12][..]);
        assert_eq!(trace.heads.len(), 2);
        for head in &trace.heads {
            for r in 0..3 {
                let s: f64 = tape.value(head.weights).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_heads_match_per_head_concat_oracle() {
        let mut rng = crate::rng::stream(13, "mhsa", 2);
        let params = random_params(4, 2, 2, 2, &mut rng);
        let x_val = Tensor::rand_normal(vec![3, 4], 0.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x_val.clone());
        let bound = params.bind(&mut tape);
        let (out, _) = multi_head_self_attention(&mut tape, x, &bound).unwrap();

        let mut oracle = Tape::new();
        let xo = oracle.leaf(x_val);
        let bo = params.bind(&mut oracle);
        let (h0, _) = self_attention_head(&mut oracle, xo, &bo, 0).unwrap();
        let (h1, _) = self_attention_head(&mut oracle, xo, &bo, 1).unwrap();
        let cat = oracle.concat(&[h0, h1], 1).unwrap();
        let wo = oracle.leaf(params.w_o.clone());
        let want = oracle.matmul(cat, wo).unwrap();

        assert!(tape.value(out).max_abs_diff(oracle.value(want)) < 1e-14);
    }

    #[test]
    fn decomposition_single_token_attn_part_is_zero() {
        let mut rng = crate::rng::stream(14, "decomp", 0);
        let params = random_params(3, 2, 2, 1, &mut rng);
        let x = Tensor::rand_normal(vec![1, 3], 0.0, 1.0, &mut rng);
        let cot = Tensor::rand_normal(vec![1, 2], 0.0, 1.0, &mut rng);
        let (g_attn, _) = gradient_path_decomposition(&x, &params, 0, &cot).unwrap();
        assert_eq!(g_attn.values(), &[0.0; 3]);
    }

    #[test]
    fn decomposition_zero_values_zeroes_both_parts() {
        let mut rng = crate::rng::stream(14, "decomp", 1);
        let mut params = random_params(3, 2, 2, 1, &mut rng);
        params.heads[0].w_v = Tensor::zeros(vec![3, 2]);
        let x = Tensor::rand_normal(vec![4, 3], 0.0, 1.0, &mut rng);
        let cot = Tensor::rand_normal(vec![4, 2], 0.0, 1.0, &mut rng);
        let (g_attn, g_val) = gradient_path_decomposition(&x, &params, 0, &cot).unwrap();
        assert_eq!(g_attn.values(), &[0.0; 12]);
        assert_eq!(g_val.values(), &[0.0; 12]);
    }

    #[test]
    fn decomposition_sums_to_full_gradient() {
        let mut rng = crate::rng::stream(14, "decomp", 2);
        let params = random_params(5, 3, 3, 2, &mut rng);
        let x_val = Tensor::rand_normal(vec![4, 5], 0.0, 1.0, &mut rng);
        let cot = Tensor::rand_normal(vec![4, 3], 0.0, 1.0, &mut rng);

        for h in 0..2 {
            let (g_attn, g_val) = gradient_path_decomposition(&x_val, &params, h, &cot).unwrap();

            let mut tape = Tape::new();
            let x = tape.leaf(x_val.clone());
            let bound = bind_constant(&mut tape, &params);
            let (out, _) = self_attention_head(&mut tape, x, &bound, h).unwrap();
            let c = tape.constant(cot.clone());
            let prod = tape.mul(c, out).unwrap();
            let loss = tape.sum(prod);
            let full = tape.backward(loss).unwrap().wrt(&tape, x);

            for ((a, v), f) in g_attn.values().iter().zip(g_val.values()).zip(full.values()) {
                assert!((a + v - f).abs() < 1e-10, "attn {a} + val {v} != full {f}");
            }
        }
    }

    #[test]
    fn uniform_attention_has_zero_ratio_median() {
        let mut rng = crate::rng::stream(15, "ratio", 0);
        let mut params = random_params(3, 2, 2, 1, &mut rng);
        params.heads[0].w_q = Tensor::zeros(vec![3, 2]);
        params.heads[0].w_k = Tensor::zeros(vec![3, 2]);
        let x = Tensor::rand_normal(vec![4, 3], 0.0, 1.0, &mut rng);
        let summary = gradient_ratio_layer(&x, &params).unwrap();
        assert_eq!(summary.median, Some(0.0));
    }

    #[test]
    fn permuting_tokens_permutes_logits_consistently() {
        let mut rng = crate::rng::stream(16, "perm", 0);
        let params = random_params(4, 3, 3, 1, &mut rng);
        let x_val = Tensor::rand_normal(vec![3, 4], 0.0, 1.0, &mut rng);
        let perm = [2usize, 0, 1];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| x_val.row(i).to_vec()).collect::<Vec<_>>()).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(x_val);
        let bound = params.bind(&mut tape);
        let b = attention_logits(&mut tape, x, &bound, 0).unwrap();
        let a = tape.softmax_lastdim(b);

        let mut tape_p = Tape::new();
        let xp = tape_p.leaf(permuted);
        let bound_p = params.bind(&mut tape_p);
        let bp = attention_logits(&mut tape_p, xp, &bound_p, 0).unwrap();
        let ap = tape_p.softmax_lastdim(bp);

        for (qi, &q_src) in perm.iter().enumerate() {
            for (ki, &k_src) in perm.iter().enumerate() {
                assert!((tape_p.value(bp).at(qi, ki) - tape.value(b).at(q_src, k_src)).abs() < 1e-12);
                assert!((tape_p.value(ap).at(qi, ki) - tape.value(a).at(q_src, k_src)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_shift_on_logits_leaves_weights_unchanged() {
        let mut rng = crate::rng::stream(16, "shift", 0);
        let mut tape = Tape::new();
        let b_val = Tensor::rand_normal(vec![3, 3], 0.0, 1.0, &mut rng);
        let b = tape.leaf(b_val.clone());
        let a = tape.softmax_lastdim(b);
        let shifted = tape.add_scalar(b, 3.7);
        let a_shifted = tape.softmax_lastdim(shifted);
        assert!(tape.value(a).max_abs_diff(tape.value(a_shifted)) < 1e-12);
    }
}
