//! A small pre-norm ViT classifier: patch embedding, class token, learned
//! positional embeddings, L encoder layers, classifier head. This is the
//! attack substrate; training quality only has to clear the acceptance
//! thresholds, so plain seeded SGD is enough.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::attention::{
    multi_head_with_key_override, AttentionParams, BoundAttention, HeadParams, LayerTrace,
    RatioSummary,
};
use crate::data::SyntheticDataset;
use crate::error::{shape_string, Error, Result};
use crate::loss::cross_entropy;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub layernorm_eps: f64,
}

impl ViTConfig {
    /// Default toy scale: all acceptance runs finish in minutes.
    pub fn toy_default() -> Self {
        ViTConfig {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            d_model: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
            num_classes: 4,
            layernorm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.channels == 0 || self.depth == 0 || self.mlp_hidden == 0 || self.num_classes == 0 {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token at index 0.
    pub fn seq_len(&self) -> usize {
        self.token_count() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Token index of the image patch at grid position (gy, gx); the class
    /// token occupies index 0, so grid tokens start at 1.
    pub fn token_for_grid(&self, gy: usize, gx: usize) -> usize {
        1 + gy * self.grid() + gx
    }

    /// Grid position of a non-class token.
    pub fn grid_for_token(&self, token: usize) -> Option<(usize, usize)> {
        if token == 0 || token > self.token_count() {
            return None;
        }
        let index = token - 1;
        Some((index / self.grid(), index % self.grid()))
    }

    /// Top-left pixel of the image patch backing a non-class token.
    pub fn pixel_origin_for_token(&self, token: usize) -> Option<(usize, usize)> {
        self.grid_for_token(token)
            .map(|(gy, gx)| (gy * self.patch_size, gx * self.patch_size))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attention: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub class_token: Tensor,
    pub pos_embedding: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ViTModel {
    /// Seed-deterministic initialization.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = rng::stream(seed, "model-init", 0);
        let std = 0.05;
        let normal = |shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::rand_normal(shape, 0.0, std, rng)
        };
        let d = config.d_model;
        let layers = (0..config.depth)
            .map(|_| {
                let heads = (0..config.heads)
                    .map(|_| {
                        HeadParams::linear(
                            normal(vec![d, config.d_k()], &mut stream),
                            normal(vec![d, config.d_k()], &mut stream),
                            normal(vec![d, config.d_k()], &mut stream),
                        )
                    })
                    .collect();
                Ok(EncoderLayer {
                    ln1_gamma: Tensor::ones(vec![d]),
                    ln1_beta: Tensor::zeros(vec![d]),
                    attention: AttentionParams::new(heads, normal(vec![d, d], &mut stream))?,
                    ln2_gamma: Tensor::ones(vec![d]),
                    ln2_beta: Tensor::zeros(vec![d]),
                    mlp_w1: normal(vec![d, config.mlp_hidden], &mut stream),
                    mlp_b1: Tensor::zeros(vec![config.mlp_hidden]),
                    mlp_w2: normal(vec![config.mlp_hidden, d], &mut stream),
                    mlp_b2: Tensor::zeros(vec![d]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ViTModel {
            config: config.clone(),
            patch_weight: normal(vec![config.patch_dim(), d], &mut stream),
            patch_bias: Tensor::zeros(vec![d]),
            class_token: normal(vec![1, d], &mut stream),
            pos_embedding: normal(vec![config.seq_len(), d], &mut stream),
            layers,
            final_ln_gamma: Tensor::ones(vec![d]),
            final_ln_beta: Tensor::zeros(vec![d]),
            head_weight: normal(vec![d, config.num_classes], &mut stream),
            head_bias: Tensor::zeros(vec![config.num_classes]),
        })
    }

    /// Stable name → tensor listing; checkpoint and SGD order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("class_token".into(), &self.class_token),
            ("pos_embedding".into(), &self.pos_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &layer.ln1_gamma));
            out.push((format!("layers.{l}.ln1.beta"), &layer.ln1_beta));
            for (h, head) in layer.attention.heads().iter().enumerate() {
                out.push((format!("layers.{l}.attn.heads.{h}.w_q"), &head.w_q));
                out.push((format!("layers.{l}.attn.heads.{h}.w_k"), &head.w_k));
                out.push((format!("layers.{l}.attn.heads.{h}.w_v"), &head.w_v));
                if let Some(b) = &head.b_q {
                    out.push((format!("layers.{l}.attn.heads.{h}.b_q"), b));
                }
                if let Some(b) = &head.b_k {
                    out.push((format!("layers.{l}.attn.heads.{h}.b_k"), b));
                }
                if let Some(b) = &head.b_v {
                    out.push((format!("layers.{l}.attn.heads.{h}.b_v"), b));
                }
            }
            out.push((format!("layers.{l}.attn.w_o"), layer.attention.w_o()));
            out.push((format!("layers.{l}.ln2.gamma"), &layer.ln2_gamma));
            out.push((format!("layers.{l}.ln2.beta"), &layer.ln2_beta));
            out.push((format!("layers.{l}.mlp.w1"), &layer.mlp_w1));
            out.push((format!("layers.{l}.mlp.b1"), &layer.mlp_b1));
            out.push((format!("layers.{l}.mlp.w2"), &layer.mlp_w2));
            out.push((format!("layers.{l}.mlp.b2"), &layer.mlp_b2));
        }
        out.push(("final_ln.gamma".into(), &self.final_ln_gamma));
        out.push(("final_ln.beta".into(), &self.final_ln_beta));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Apply an update to every parameter by name.
    pub fn update_params(&mut self, mut apply: impl FnMut(&str, &mut Tensor)) {
        apply("patch_embed.weight", &mut self.patch_weight);
        apply("patch_embed.bias", &mut self.patch_bias);
        apply("class_token", &mut self.class_token);
        apply("pos_embedding", &mut self.pos_embedding);
        for l in 0..self.layers.len() {
            let layer = &mut self.layers[l];
            apply(&format!("layers.{l}.ln1.gamma"), &mut layer.ln1_gamma);
            apply(&format!("layers.{l}.ln1.beta"), &mut layer.ln1_beta);
            let heads = layer.attention.num_heads();
            let mut head_params: Vec<HeadParams> = layer.attention.heads().to_vec();
            for (h, head) in head_params.iter_mut().enumerate() {
                apply(&format!("layers.{l}.attn.heads.{h}.w_q"), &mut head.w_q);
                apply(&format!("layers.{l}.attn.heads.{h}.w_k"), &mut head.w_k);
                apply(&format!("layers.{l}.attn.heads.{h}.w_v"), &mut head.w_v);
                if let Some(b) = head.b_q.as_mut() {
                    apply(&format!("layers.{l}.attn.heads.{h}.b_q"), b);
                }
                if let Some(b) = head.b_k.as_mut() {
                    apply(&format!("layers.{l}.attn.heads.{h}.b_k"), b);
                }
                if let Some(b) = head.b_v.as_mut() {
                    apply(&format!("layers.{l}.attn.heads.{h}.b_v"), b);
                }
            }
            let mut w_o = layer.attention.w_o().clone();
            apply(&format!("layers.{l}.attn.w_o"), &mut w_o);
            layer.attention = AttentionParams::new(head_params, w_o).expect("shapes preserved");
            debug_assert_eq!(layer.attention.num_heads(), heads);
            apply(&format!("layers.{l}.ln2.gamma"), &mut layer.ln2_gamma);
            apply(&format!("layers.{l}.ln2.beta"), &mut layer.ln2_beta);
            apply(&format!("layers.{l}.mlp.w1"), &mut layer.mlp_w1);
            apply(&format!("layers.{l}.mlp.b1"), &mut layer.mlp_b1);
            apply(&format!("layers.{l}.mlp.w2"), &mut layer.mlp_w2);
            apply(&format!("layers.{l}.mlp.b2"), &mut layer.mlp_b2);
        }
        apply("final_ln.gamma", &mut self.final_ln_gamma);
        apply("final_ln.beta", &mut self.final_ln_beta);
        apply("head.weight", &mut self.head_weight);
        apply("head.bias", &mut self.head_bias);
    }
}

/// Per-layer clean key rows for the replacement surgery:
/// `rows[layer]`, when present, holds one clean P_K row per head.
#[derive(Debug, Clone)]
pub struct KeySurgery {
    pub token: usize,
    pub rows: Vec<Option<Vec<Tensor>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BindMode {
    Trainable,
    Frozen,
}

pub type BoundParams = BTreeMap<String, NodeId>;

struct BoundLayer {
    ln1_gamma: NodeId,
    ln1_beta: NodeId,
    attention: BoundAttention,
    ln2_gamma: NodeId,
    ln2_beta: NodeId,
    mlp_w1: NodeId,
    mlp_b1: NodeId,
    mlp_w2: NodeId,
    mlp_b2: NodeId,
}

struct BoundModel {
    patch_weight: NodeId,
    patch_bias: NodeId,
    class_token: NodeId,
    pos_embedding: NodeId,
    layers: Vec<BoundLayer>,
    final_ln_gamma: NodeId,
    final_ln_beta: NodeId,
    head_weight: NodeId,
    head_bias: NodeId,
}

fn bind_model(tape: &mut Tape, model: &ViTModel, mode: BindMode) -> (BoundModel, BoundParams) {
    let mut names = BoundParams::new();
    let mut put = |tape: &mut Tape, name: String, value: &Tensor| -> NodeId {
        let id = match mode {
            BindMode::Trainable => tape.leaf(value.clone()),
            BindMode::Frozen => tape.constant(value.clone()),
        };
        names.insert(name, id);
        id
    };
    let patch_weight = put(tape, "patch_embed.weight".into(), &model.patch_weight);
    let patch_bias = put(tape, "patch_embed.bias".into(), &model.patch_bias);
    let class_token = put(tape, "class_token".into(), &model.class_token);
    let pos_embedding = put(tape, "pos_embedding".into(), &model.pos_embedding);
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let heads = layer
                .attention
                .heads()
                .iter()
                .enumerate()
                .map(|(h, head)| crate::attention::BoundHead {
                    w_q: put(tape, format!("layers.{l}.attn.heads.{h}.w_q"), &head.w_q),
                    w_k: put(tape, format!("layers.{l}.attn.heads.{h}.w_k"), &head.w_k),
                    w_v: put(tape, format!("layers.{l}.attn.heads.{h}.w_v"), &head.w_v),
                    b_q: head.b_q.as_ref().map(|b| put(tape, format!("layers.{l}.attn.heads.{h}.b_q"), b)),
                    b_k: head.b_k.as_ref().map(|b| put(tape, format!("layers.{l}.attn.heads.{h}.b_k"), b)),
                    b_v: head.b_v.as_ref().map(|b| put(tape, format!("layers.{l}.attn.heads.{h}.b_v"), b)),
                })
                .collect();
            BoundLayer {
                ln1_gamma: put(tape, format!("layers.{l}.ln1.gamma"), &layer.ln1_gamma),
                ln1_beta: put(tape, format!("layers.{l}.ln1.beta"), &layer.ln1_beta),
                attention: BoundAttention {
                    heads,
                    w_o: put(tape, format!("layers.{l}.attn.w_o"), layer.attention.w_o()),
                    d_k: layer.attention.d_k(),
                },
                ln2_gamma: put(tape, format!("layers.{l}.ln2.gamma"), &layer.ln2_gamma),
                ln2_beta: put(tape, format!("layers.{l}.ln2.beta"), &layer.ln2_beta),
                mlp_w1: put(tape, format!("layers.{l}.mlp.w1"), &layer.mlp_w1),
                mlp_b1: put(tape, format!("layers.{l}.mlp.b1"), &layer.mlp_b1),
                mlp_w2: put(tape, format!("layers.{l}.mlp.w2"), &layer.mlp_w2),
                mlp_b2: put(tape, format!("layers.{l}.mlp.b2"), &layer.mlp_b2),
            }
        })
        .collect();
    let final_ln_gamma = put(tape, "final_ln.gamma".into(), &model.final_ln_gamma);
    let final_ln_beta = put(tape, "final_ln.beta".into(), &model.final_ln_beta);
    let head_weight = put(tape, "head.weight".into(), &model.head_weight);
    let head_bias = put(tape, "head.bias".into(), &model.head_bias);
    (
        BoundModel {
            patch_weight,
            patch_bias,
            class_token,
            pos_embedding,
            layers,
            final_ln_gamma,
            final_ln_beta,
            head_weight,
            head_bias,
        },
        names,
    )
}

/// Non-overlapping patch flattening → linear projection → class token →
/// positional embedding. Patch (gy, gx) maps to token 1 + gy·grid + gx and
/// flattens channel-major, then row-major within the patch.
fn patch_embed_bound(
    tape: &mut Tape,
    image: NodeId,
    bound: &BoundModel,
    config: &ViTConfig,
) -> Result<NodeId> {
    let want = [config.channels, config.image_size, config.image_size];
    if tape.value(image).shape() != want {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: shape_string(&want),
            rhs: shape_string(tape.value(image).shape()),
        });
    }
    let p = config.patch_size;
    let grid = config.grid();
    let mut rows = Vec::with_capacity(config.token_count());
    for gy in 0..grid {
        for gx in 0..grid {
            let cut = tape.slice(image, &[0, gy * p, gx * p], &[config.channels, p, p])?;
            rows.push(tape.reshape(cut, vec![1, config.patch_dim()])?);
        }
    }
    let patches = tape.concat(&rows, 0)?;
    let projected = tape.matmul(patches, bound.patch_weight)?;
    let biased = tape.add_row(projected, bound.patch_bias)?;
    let seq = tape.concat(&[bound.class_token, biased], 0)?;
    tape.add(seq, bound.pos_embedding)
}

/// Patch embedding on an explicit tape; weights are bound frozen.
pub fn patch_embed(tape: &mut Tape, image: NodeId, model: &ViTModel) -> Result<NodeId> {
    let (bound, _) = bind_model(tape, model, BindMode::Frozen);
    patch_embed_bound(tape, image, &bound, &model.config)
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Class logits, a vector of length num_classes.
    pub logits: NodeId,
    /// One trace per encoder layer.
    pub traces: Vec<LayerTrace>,
}

fn forward_bound(
    tape: &mut Tape,
    model: &ViTModel,
    image: NodeId,
    bound: &BoundModel,
    surgery: Option<&KeySurgery>,
) -> Result<ForwardOutput> {
    if let Some(s) = surgery {
        if s.rows.len() != model.layers.len() {
            return Err(Error::Config(format!(
                "key surgery covers {} layers, model has {}",
                s.rows.len(),
                model.layers.len()
            )));
        }
    }
    let eps = model.config.layernorm_eps;
    let mut x = patch_embed_bound(tape, image, bound, &model.config)?;
    let mut traces = Vec::with_capacity(bound.layers.len());
    for (l, layer) in bound.layers.iter().enumerate() {
        let normed = tape.layernorm(x, layer.ln1_gamma, layer.ln1_beta, eps)?;
        let key_override = surgery.and_then(|s| {
            s.rows[l].as_deref().map(|rows| (s.token, rows))
        });
        let (attn_out, trace) = multi_head_with_key_override(tape, normed, &layer.attention, key_override)?;
        x = tape.add(x, attn_out)?;
        let normed2 = tape.layernorm(x, layer.ln2_gamma, layer.ln2_beta, eps)?;
        let hidden = tape.matmul(normed2, layer.mlp_w1)?;
        let hidden = tape.add_row(hidden, layer.mlp_b1)?;
        let activated = tape.gelu(hidden);
        let mlp_out = tape.matmul(activated, layer.mlp_w2)?;
        let mlp_out = tape.add_row(mlp_out, layer.mlp_b2)?;
        x = tape.add(x, mlp_out)?;
        traces.push(trace);
    }
    let x = tape.layernorm(x, bound.final_ln_gamma, bound.final_ln_beta, eps)?;
    let class_row = tape.slice(x, &[0, 0], &[1, model.config.d_model])?;
    let logits2d = tape.matmul(class_row, bound.head_weight)?;
    let logits2d = tape.add_row(logits2d, bound.head_bias)?;
    let logits = tape.reshape(logits2d, vec![model.config.num_classes])?;
    Ok(ForwardOutput { logits, traces })
}

/// Forward with frozen weights: gradients flow to the image only.
pub fn forward_frozen(tape: &mut Tape, model: &ViTModel, image: NodeId) -> Result<ForwardOutput> {
    let (bound, _) = bind_model(tape, model, BindMode::Frozen);
    forward_bound(tape, model, image, &bound, None)
}

/// Frozen forward with per-layer key-row replacement.
pub fn forward_with_surgery(
    tape: &mut Tape,
    model: &ViTModel,
    image: NodeId,
    surgery: &KeySurgery,
) -> Result<ForwardOutput> {
    let (bound, _) = bind_model(tape, model, BindMode::Frozen);
    forward_bound(tape, model, image, &bound, Some(surgery))
}

/// Forward with trainable weights: returns named parameter handles.
pub fn forward_trainable(
    tape: &mut Tape,
    model: &ViTModel,
    image: NodeId,
) -> Result<(ForwardOutput, BoundParams)> {
    let (bound, names) = bind_model(tape, model, BindMode::Trainable);
    let out = forward_bound(tape, model, image, &bound, None)?;
    Ok((out, names))
}

/// One-shot inference on a plain image.
pub struct Evaluation {
    pub tape: Tape,
    pub output: ForwardOutput,
}

impl Evaluation {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.output.logits)
    }

    pub fn prediction(&self) -> usize {
        argmax(self.logits().values())
    }
}

pub fn evaluate(model: &ViTModel, image: &Tensor) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let image_id = tape.constant(image.clone());
    let output = forward_frozen(&mut tape, model, image_id)?;
    Ok(Evaluation { tape, output })
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of the dataset classified correctly.
pub fn accuracy(model: &ViTModel, dataset: &SyntheticDataset) -> Result<f64> {
    let mut correct = 0usize;
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        if evaluate(model, image)?.prediction() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 25, learning_rate: 0.02, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub final_mean_loss: f64,
    pub epochs_run: usize,
}

/// Plain mini-batch SGD on cross-entropy; fully seed-deterministic.
pub fn train_toy(
    config: &ViTConfig,
    dataset: &SyntheticDataset,
    train: &TrainConfig,
) -> Result<(ViTModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = ViTModel::init(config, train.seed)?;
    let mut final_mean_loss = f64::NAN;
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = rng::stream(train.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut grad_sums: BTreeMap<String, Tensor> = BTreeMap::new();
            for &index in batch {
                let mut tape = Tape::new();
                let image = tape.constant(dataset.images[index].clone());
                let (out, names) = forward_trainable(&mut tape, &model, image)?;
                let loss = cross_entropy(&mut tape, out.logits, dataset.labels[index])?;
                let loss_value = tape.value(loss).values()[0];
                if !loss_value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        detail: format!("loss became {loss_value} on sample {index}"),
                    });
                }
                epoch_loss += loss_value;
                let grads = tape.backward(loss)?;
                for (name, id) in &names {
                    let g = grads.wrt(&tape, *id);
                    match grad_sums.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                                *a += b;
                            }
                        }
                        None => {
                            grad_sums.insert(name.clone(), g);
                        }
                    }
                }
            }
            let step = train.learning_rate / batch.len() as f64;
            model.update_params(|name, value| {
                let g = &grad_sums[name];
                for (v, gv) in value.values_mut().iter_mut().zip(g.values()) {
                    *v -= step * gv;
                }
            });
        }
        final_mean_loss = epoch_loss / dataset.len() as f64;
    }
    let train_accuracy = accuracy(&model, dataset)?;
    Ok((model, TrainReport { train_accuracy, final_mean_loss, epochs_run: train.epochs }))
}

/// Per-layer median of |g_attn/g_val| on this model's attention inputs for
/// one image, with all-ones cotangents.
pub fn gradient_ratio_median(model: &ViTModel, image: &Tensor) -> Result<Vec<RatioSummary>> {
    let evaluation = evaluate(model, image)?;
    let mut out = Vec::with_capacity(model.layers.len());
    for (layer, trace) in model.layers.iter().zip(&evaluation.output.traces) {
        let x = evaluation.tape.value(trace.attn_input).clone();
        out.push(crate::attention::gradient_ratio_layer(&x, &layer.attention)?);
    }
    Ok(out)
}
