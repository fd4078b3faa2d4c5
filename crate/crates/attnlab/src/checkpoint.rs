//! Versioned text checkpoints for the toy ViT.
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! save → load → save is byte-identical and a loaded model reproduces the
//! saved model's outputs bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::attention::{AttentionParams, HeadParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{EncoderLayer, ViTConfig, ViTModel};

const FORMAT_TAG: &str = "toy-vit-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

pub fn save_checkpoint(model: &ViTModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, render_checkpoint(model, meta))?;
    Ok(())
}

pub fn render_checkpoint(model: &ViTModel, meta: &CheckpointMeta) -> String {
    let mut out = String::new();
    let c = &model.config;
    let _ = writeln!(out, "{FORMAT_TAG} v{FORMAT_VERSION}");
    let _ = writeln!(out, "seed = {}", meta.seed);
    let _ = writeln!(out, "train_accuracy = {}", meta.train_accuracy);
    if let Some(v) = meta.val_accuracy {
        let _ = writeln!(out, "val_accuracy = {v}");
    }
    let _ = writeln!(out, "[config]");
    let _ = writeln!(out, "image_size = {}", c.image_size);
    let _ = writeln!(out, "channels = {}", c.channels);
    let _ = writeln!(out, "patch_size = {}", c.patch_size);
    let _ = writeln!(out, "d_model = {}", c.d_model);
    let _ = writeln!(out, "depth = {}", c.depth);
    let _ = writeln!(out, "heads = {}", c.heads);
    let _ = writeln!(out, "mlp_hidden = {}", c.mlp_hidden);
    let _ = writeln!(out, "num_classes = {}", c.num_classes);
    let _ = writeln!(out, "layernorm_eps = {}", c.layernorm_eps);
    for (name, tensor) in model.named_params() {
        let _ = writeln!(out, "[param]");
        let _ = writeln!(out, "name = {name}");
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "shape = {}", dims.join(" "));
        out.push_str("values =");
        for v in tensor.values() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(ViTModel, CheckpointMeta)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    parse_checkpoint(&text)
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Checkpoint(format!("malformed file: {}", detail.into()))
}

fn kv<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.trim_start().strip_prefix('='))
        .ok_or_else(|| malformed(format!("expected `{key} = ...`, got `{line}`")))?;
    Ok(rest.trim())
}

pub fn parse_checkpoint(text: &str) -> Result<(ViTModel, CheckpointMeta)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file"))?;
    let version = header
        .strip_prefix(FORMAT_TAG)
        .map(str::trim)
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| malformed(format!("bad header `{header}`")))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file is v{version}, supported is v{FORMAT_VERSION}"
        )));
    }

    let seed: u64 = kv(lines.next().ok_or_else(|| malformed("missing seed"))?, "seed")?
        .parse()
        .map_err(|e| malformed(format!("seed: {e}")))?;
    let train_accuracy: f64 = kv(
        lines.next().ok_or_else(|| malformed("missing train_accuracy"))?,
        "train_accuracy",
    )?
    .parse()
    .map_err(|e| malformed(format!("train_accuracy: {e}")))?;

    let mut val_accuracy = None;
    let mut line = lines.next().ok_or_else(|| malformed("truncated before [config]"))?;
    if line.starts_with("val_accuracy") {
        val_accuracy = Some(
            kv(line, "val_accuracy")?
                .parse()
                .map_err(|e| malformed(format!("val_accuracy: {e}")))?,
        );
        line = lines.next().ok_or_else(|| malformed("truncated before [config]"))?;
    }
    if line != "[config]" {
        return Err(malformed(format!("expected [config], got `{line}`")));
    }

    let next_usize = |key: &str, lines: &mut std::str::Lines| -> Result<usize> {
        kv(lines.next().ok_or_else(|| malformed(format!("missing {key}")))?, key)?
            .parse()
            .map_err(|e| malformed(format!("{key}: {e}")))
    };
    let config = ViTConfig {
        image_size: next_usize("image_size", &mut lines)?,
        channels: next_usize("channels", &mut lines)?,
        patch_size: next_usize("patch_size", &mut lines)?,
        d_model: next_usize("d_model", &mut lines)?,
        depth: next_usize("depth", &mut lines)?,
        heads: next_usize("heads", &mut lines)?,
        mlp_hidden: next_usize("mlp_hidden", &mut lines)?,
        num_classes: next_usize("num_classes", &mut lines)?,
        layernorm_eps: kv(lines.next().ok_or_else(|| malformed("missing layernorm_eps"))?, "layernorm_eps")?
            .parse()
            .map_err(|e| malformed(format!("layernorm_eps: {e}")))?,
    };
    config.validate().map_err(|e| malformed(e.to_string()))?;

    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    while let Some(line) = lines.next() {
        if line != "[param]" {
            return Err(malformed(format!("expected [param], got `{line}`")));
        }
        let name = kv(lines.next().ok_or_else(|| malformed("truncated param name"))?, "name")?.to_string();
        let shape: Vec<usize> = kv(lines.next().ok_or_else(|| malformed("truncated param shape"))?, "shape")?
            .split_whitespace()
            .map(|d| d.parse().map_err(|e| malformed(format!("shape: {e}"))))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = kv(lines.next().ok_or_else(|| malformed("truncated param values"))?, "values")?
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| malformed(format!("value: {e}"))))
            .collect::<Result<_>>()?;
        let tensor = Tensor::new(shape, values).map_err(|e| malformed(e.to_string()))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(malformed(format!("duplicate parameter `{name}`")));
        }
    }

    let model = model_from_params(&config, params)?;
    Ok((model, CheckpointMeta { seed, train_accuracy, val_accuracy }))
}

fn take(params: &mut BTreeMap<String, Tensor>, name: String, shape: &[usize]) -> Result<Tensor> {
    let t = params
        .remove(&name)
        .ok_or_else(|| malformed(format!("missing parameter `{name}`")))?;
    if t.shape() != shape {
        return Err(malformed(format!("parameter `{name}` has wrong shape")));
    }
    Ok(t)
}

fn model_from_params(config: &ViTConfig, mut params: BTreeMap<String, Tensor>) -> Result<ViTModel> {
    let d = config.d_model;
    let patch_weight = take(&mut params, "patch_embed.weight".into(), &[config.patch_dim(), d])?;
    let patch_bias = take(&mut params, "patch_embed.bias".into(), &[d])?;
    let class_token = take(&mut params, "class_token".into(), &[1, d])?;
    let pos_embedding = take(&mut params, "pos_embedding".into(), &[config.seq_len(), d])?;
    let mut layers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let ln1_gamma = take(&mut params, format!("layers.{l}.ln1.gamma"), &[d])?;
        let ln1_beta = take(&mut params, format!("layers.{l}.ln1.beta"), &[d])?;
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let w_q = take(&mut params, format!("layers.{l}.attn.heads.{h}.w_q"), &[d, config.d_k()])?;
            let w_k = take(&mut params, format!("layers.{l}.attn.heads.{h}.w_k"), &[d, config.d_k()])?;
            let w_v = take(&mut params, format!("layers.{l}.attn.heads.{h}.w_v"), &[d, config.d_k()])?;
            let mut head = HeadParams::linear(w_q, w_k, w_v);
            if params.contains_key(&format!("layers.{l}.attn.heads.{h}.b_q")) {
                head.b_q = Some(take(&mut params, format!("layers.{l}.attn.heads.{h}.b_q"), &[config.d_k()])?);
            }
            if params.contains_key(&format!("layers.{l}.attn.heads.{h}.b_k")) {
                head.b_k = Some(take(&mut params, format!("layers.{l}.attn.heads.{h}.b_k"), &[config.d_k()])?);
            }
            if params.contains_key(&format!("layers.{l}.attn.heads.{h}.b_v")) {
                head.b_v = Some(take(&mut params, format!("layers.{l}.attn.heads.{h}.b_v"), &[config.d_k()])?);
            }
            heads.push(head);
        }
        let w_o = take(&mut params, format!("layers.{l}.attn.w_o"), &[config.heads * config.d_k(), d])?;
        layers.push(EncoderLayer {
            ln1_gamma,
            ln1_beta,
            attention: AttentionParams::new(heads, w_o).map_err(|e| malformed(e.to_string()))?,
            ln2_gamma: take(&mut params, format!("layers.{l}.ln2.gamma"), &[d])?,
            ln2_beta: take(&mut params, format!("layers.{l}.ln2.beta"), &[d])?,
            mlp_w1: take(&mut params, format!("layers.{l}.mlp.w1"), &[d, config.mlp_hidden])?,
            mlp_b1: take(&mut params, format!("layers.{l}.mlp.b1"), &[config.mlp_hidden])?,
            mlp_w2: take(&mut params, format!("layers.{l}.mlp.w2"), &[config.mlp_hidden, d])?,
            mlp_b2: take(&mut params, format!("layers.{l}.mlp.b2"), &[d])?,
        });
    }
    let final_ln_gamma = take(&mut params, "final_ln.gamma".into(), &[d])?;
    let final_ln_beta = take(&mut params, "final_ln.beta".into(), &[d])?;
    let head_weight = take(&mut params, "head.weight".into(), &[d, config.num_classes])?;
    let head_bias = take(&mut params, "head.bias".into(), &[config.num_classes])?;
    if let Some(name) = params.keys().next() {
        return Err(malformed(format!("unknown parameter `{name}`")));
    }
    Ok(ViTModel {
        config: config.clone(),
        patch_weight,
        patch_bias,
        class_token,
        pos_embedding,
        layers,
        final_ln_gamma,
        final_ln_beta,
        head_weight,
        head_bias,
    })
}
