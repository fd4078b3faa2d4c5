//! Model-level vulnerability indicators: largest singular values of the
//! query-key products, gradient-ratio tables, adversarial-key replacement,
//! and raw/PCA token exports. All reports render as CSV with a header row;
//! token exports are structured text with shape metadata.

use std::fmt::Write as FmtWrite;
use std::io::Write;

use crate::attack::{apply_patch, PatchSpec};
use crate::attention::mean_final_attention_to_token;
use crate::error::{shape_string, Error, Result};
use crate::rng;
use crate::stats::mean_and_stderr;
use crate::tape::Tape;
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};
use crate::vit::{evaluate, forward_with_surgery, gradient_ratio_median, KeySurgery, ViTModel};

/// Largest singular value by power iteration on MᵀM with a seeded start.
/// Converges when successive estimates agree to 1e-10 relative, capped at
/// 10⁴ iterations; a zero matrix returns 0 directly.
pub fn largest_singular_value(m: &Tensor, seed: u64) -> Result<f64> {
    if m.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: "largest_singular_value",
            detail: format!("expected a matrix, got {}", shape_string(m.shape())),
        });
    }
    if m.values().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut rng = rng::stream(seed, "power-iteration", 0);
    let mut v = Tensor::rand_normal(vec![cols], 0.0, 1.0, &mut rng).into_values();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let u = matmul_kernel(m.values(), &v, rows, cols, 1);
        let next_sigma = norm(&u);
        // vᵀMᵀMv stalls only at σ = 0 starts, which the zero check rules out
        let mut w = matmul_tn_kernel(m.values(), &u, rows, cols, 1);
        normalize(&mut w);
        v = w;
        if (next_sigma - sigma).abs() <= 1e-10 * next_sigma.max(f64::MIN_POSITIVE) {
            return Ok(next_sigma);
        }
        sigma = next_sigma;
    }
    Ok(sigma)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SingularValueRow {
    pub layer: usize,
    pub head: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SingularValueReport {
    pub per_head: Vec<SingularValueRow>,
    pub per_layer_max: Vec<f64>,
}

/// σ_max(W_Q (W_K)ᵀ) for every layer and head, plus the per-layer maximum.
pub fn singular_value_report(model: &ViTModel, seed: u64) -> Result<SingularValueReport> {
    let mut per_head = Vec::new();
    let mut per_layer_max = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let mut layer_max = 0.0f64;
        for (h, head) in layer.attention.heads().iter().enumerate() {
            let d_model = head.w_q.shape()[0];
            let d_k = head.w_q.shape()[1];
            let product = matmul_nt_kernel(head.w_q.values(), head.w_k.values(), d_model, d_k, d_model);
            let m = Tensor::new(vec![d_model, d_model], product)?;
            let sigma = largest_singular_value(&m, seed)?;
            layer_max = layer_max.max(sigma);
            per_head.push(SingularValueRow { layer: l, head: h, sigma });
        }
        per_layer_max.push(layer_max);
    }
    Ok(SingularValueReport { per_head, per_layer_max })
}

impl SingularValueReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,sigma_max\n");
        for row in &self.per_head {
            let _ = writeln!(out, "{},{},{}", row.layer, row.head, row.sigma);
        }
        for (layer, max) in self.per_layer_max.iter().enumerate() {
            let _ = writeln!(out, "{layer},max,{max}");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RatioReportRow {
    pub layer: usize,
    pub per_image_medians: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub excluded_entries: usize,
}

/// Per-layer gradient-ratio medians per image, aggregated as mean and
/// standard error across images.
pub fn gradient_ratio_report(model: &ViTModel, images: &[Tensor]) -> Result<Vec<RatioReportRow>> {
    if images.is_empty() {
        return Err(Error::Config("gradient ratio report needs at least one image".into()));
    }
    let depth = model.layers.len();
    let mut rows: Vec<RatioReportRow> = (0..depth)
        .map(|layer| RatioReportRow {
            layer,
            per_image_medians: Vec::new(),
            mean: None,
            stderr: None,
            excluded_entries: 0,
        })
        .collect();
    for image in images {
        let summaries = gradient_ratio_median(model, image)?;
        for (row, summary) in rows.iter_mut().zip(summaries) {
            row.per_image_medians.push(summary.median);
            row.excluded_entries += summary.excluded;
        }
    }
    for row in &mut rows {
        let defined: Vec<f64> = row.per_image_medians.iter().flatten().copied().collect();
        if !defined.is_empty() {
            let (mean, stderr) = mean_and_stderr(&defined);
            row.mean = Some(mean);
            row.stderr = stderr;
        }
    }
    Ok(rows)
}

pub fn ratio_report_to_csv(rows: &[RatioReportRow]) -> String {
    let mut out = String::from("layer,images,mean_ratio_median,stderr,excluded_entries\n");
    for row in rows {
        let mean = row.mean.map_or("undefined".to_string(), |m| m.to_string());
        let stderr = row.stderr.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.layer,
            row.per_image_medians.len(),
            mean,
            stderr,
            row.excluded_entries
        );
    }
    out
}

/// Which layers receive the key replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurgeryScope {
    /// Replace the target key in every layer simultaneously.
    AllLayers,
    /// Replace in a single layer only.
    Layer(usize),
}

#[derive(Debug, Clone)]
pub struct KeyReplacementRecord {
    /// Mean final-layer attention drawn by token i★ on the clean image.
    pub attn_clean: f64,
    /// Same on the patched image.
    pub attn_adv: f64,
    /// Same on the patched image with the adversarial key rows replaced by
    /// their clean counterparts.
    pub attn_replaced: f64,
}

impl KeyReplacementRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "condition,mean_attention_to_target\nclean,{}\npatched,{}\npatched_key_replaced,{}\n",
            self.attn_clean, self.attn_adv, self.attn_replaced
        )
    }
}

/// Three forward passes: clean, patched, and patched with the projected key
/// row of the patch token overwritten by its clean value (queries and
/// values untouched).
pub fn key_replacement_ablation(
    model: &ViTModel,
    clean_image: &Tensor,
    patch: &PatchSpec,
    scope: SurgeryScope,
) -> Result<KeyReplacementRecord> {
    let config = &model.config;
    patch.validate_for(config.channels, config.image_size, config.image_size)?;
    let (ph, pw) = patch.size();
    let aligned = patch.location.0 % config.patch_size == 0
        && patch.location.1 % config.patch_size == 0
        && ph == config.patch_size
        && pw == config.patch_size;
    if !aligned {
        return Err(Error::Config(format!(
            "key replacement needs a token-aligned patch; got {}x{} at ({}, {})",
            ph, pw, patch.location.0, patch.location.1
        )));
    }
    let gy = patch.location.0 / config.patch_size;
    let gx = patch.location.1 / config.patch_size;
    let i_star = config.token_for_grid(gy, gx);
    if let SurgeryScope::Layer(l) = scope {
        if l >= model.layers.len() {
            return Err(Error::IndexOutOfRange { what: "surgery layer", index: l, limit: model.layers.len() });
        }
    }

    // clean pass: measurement plus the clean key rows for the surgery
    let clean = evaluate(model, clean_image)?;
    let attn_clean = mean_final_attention_to_token(&clean.tape, &clean.output.traces, i_star)?;
    let rows: Vec<Option<Vec<Tensor>>> = clean
        .output
        .traces
        .iter()
        .enumerate()
        .map(|(l, trace)| {
            let wanted = match scope {
                SurgeryScope::AllLayers => true,
                SurgeryScope::Layer(target) => l == target,
            };
            wanted.then(|| {
                trace
                    .heads
                    .iter()
                    .map(|head| {
                        let p_k = clean.tape.value(head.p_k);
                        Tensor::new(vec![1, trace.d_k], p_k.row(i_star).to_vec()).expect("key row")
                    })
                    .collect()
            })
        })
        .collect();

    // patched pass
    let mut tape = Tape::new();
    let p = tape.constant(patch.pixels.clone());
    let adv = apply_patch(&mut tape, clean_image, p, patch.location)?;
    let out = crate::vit::forward_frozen(&mut tape, model, adv)?;
    let attn_adv = mean_final_attention_to_token(&tape, &out.traces, i_star)?;

    // patched pass with surgery
    let surgery = KeySurgery { token: i_star, rows };
    let mut tape_s = Tape::new();
    let p_s = tape_s.constant(patch.pixels.clone());
    let adv_s = apply_patch(&mut tape_s, clean_image, p_s, patch.location)?;
    let out_s = forward_with_surgery(&mut tape_s, model, adv_s, &surgery)?;
    let attn_replaced = mean_final_attention_to_token(&tape_s, &out_s.traces, i_star)?;

    Ok(KeyReplacementRecord { attn_clean, attn_adv, attn_replaced })
}

/// Top-2 principal components of the union point set, via power iteration
/// with deflation and re-orthogonalization.
fn principal_plane(points: &[Vec<f64>]) -> Option<(Vec<f64>, [Vec<f64>; 2])> {
    let d = points.first()?.len();
    if d < 2 {
        return None;
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ci * (p[j] - mean[j]) / n as f64;
            }
        }
    }
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut rng = rng::stream(0, "pca-start", 0);
    for _ in 0..2 {
        let mut v = Tensor::rand_normal(vec![d], 0.0, 1.0, &mut rng).into_values();
        for prev in &components {
            project_out(&mut v, prev);
        }
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let mut w = matmul_kernel(&cov, &v, d, d, 1);
            for prev in &components {
                project_out(&mut w, prev);
            }
            let next = norm(&w);
            if next == 0.0 {
                break; // flat direction; keep the current orthonormal v
            }
            normalize(&mut w);
            v = w;
            if (next - lambda).abs() <= 1e-12 * next.max(f64::MIN_POSITIVE) {
                break;
            }
            lambda = next;
        }
        components.push(v);
    }
    let [c0, c1] = [components.remove(0), components.remove(0)];
    Some((mean, [c0, c1]))
}

fn project_out(v: &mut [f64], basis: &[f64]) {
    let dot: f64 = v.iter().zip(basis).map(|(a, b)| a * b).sum();
    for (x, b) in v.iter_mut().zip(basis) {
        *x -= dot * b;
    }
}

/// Raw projected queries/keys of one layer/head, an optional 2-D principal
/// component projection fit on their union, and the final layer's attention
/// column of the target key.
pub fn export_projected_tokens<W: Write>(
    tape: &Tape,
    traces: &[crate::attention::LayerTrace],
    layer: usize,
    head: usize,
    i_star: usize,
    out: &mut W,
) -> Result<()> {
    let trace = traces
        .get(layer)
        .ok_or(Error::IndexOutOfRange { what: "export layer", index: layer, limit: traces.len() })?;
    let head_trace = trace
        .heads
        .get(head)
        .ok_or(Error::IndexOutOfRange { what: "export head", index: head, limit: trace.heads.len() })?;
    let p_q = tape.value(head_trace.p_q);
    let p_k = tape.value(head_trace.p_k);

    writeln!(out, "projected-tokens v1")?;
    writeln!(out, "layer = {layer}")?;
    writeln!(out, "head = {head}")?;
    writeln!(out, "target_key = {i_star}")?;
    for (name, t) in [("P_Q", p_q), ("P_K", p_k)] {
        writeln!(out, "[{name}] shape {}", shape_string(t.shape()))?;
        for r in 0..t.shape()[0] {
            let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }

    let union: Vec<Vec<f64>> = (0..p_q.shape()[0])
        .map(|r| p_q.row(r).to_vec())
        .chain((0..p_k.shape()[0]).map(|r| p_k.row(r).to_vec()))
        .collect();
    if let Some((mean, plane)) = principal_plane(&union) {
        for (name, t) in [("P_Q_pca2", p_q), ("P_K_pca2", p_k)] {
            writeln!(out, "[{name}] shape [{}x2]", t.shape()[0])?;
            for r in 0..t.shape()[0] {
                let centered: Vec<f64> = t.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect();
                let coords: Vec<String> = plane
                    .iter()
                    .map(|axis| centered.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>().to_string())
                    .collect();
                writeln!(out, "{}", coords.join(" "))?;
            }
        }
    }

    let final_trace = traces.last().expect("nonempty traces");
    let n = tape.value(final_trace.heads[0].weights).shape()[0];
    if i_star >= n {
        return Err(Error::IndexOutOfRange { what: "target key", index: i_star, limit: n });
    }
    writeln!(out, "[final_layer_attention_to_target] shape [{}x{}]", final_trace.heads.len(), n)?;
    for head_trace in &final_trace.heads {
        let a = tape.value(head_trace.weights);
        let col: Vec<String> = (0..n).map(|q| a.at(q, i_star).to_string()).collect();
        writeln!(out, "{}", col.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{ViTConfig, ViTModel};

    #[test]
    fn singular_value_of_identity_is_one() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((largest_singular_value(&eye, 0).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn singular_value_of_diagonal_is_max_entry() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((largest_singular_value(&m, 0).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_returns_zero_directly() {
        assert_eq!(largest_singular_value(&Tensor::zeros(vec![3, 2]), 0).unwrap(), 0.0);
    }

    #[test]
    fn random_2x2_matches_closed_form() {
        let mut rng = crate::rng::stream(51, "svd", 0);
        for trial in 0..10 {
            let m = Tensor::rand_normal(vec![2, 2], 0.0, 1.0, &mut rng);
            let got = largest_singular_value(&m, trial).unwrap();
            // eigenvalues of MᵀM from trace and determinant
            let v = m.values();
            let trace: f64 = v.iter().map(|x| x * x).sum();
            let det = v[0] * v[3] - v[1] * v[2];
            let disc = (trace * trace - 4.0 * det * det).max(0.0).sqrt();
            let want = ((trace + disc) / 2.0).sqrt();
            assert!((got - want).abs() < 1e-8, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn power_iteration_is_start_seed_invariant() {
        let mut rng = crate::rng::stream(52, "svd", 0);
        let m = Tensor::rand_normal(vec![5, 3], 0.0, 1.0, &mut rng);
        let a = largest_singular_value(&m, 1).unwrap();
        let b = largest_singular_value(&m, 99).unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    fn tiny_model(seed: u64) -> ViTModel {
        let c = ViTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            d_model: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: 16,
            num_classes: 3,
            layernorm_eps: 1e-5,
        };
        ViTModel::init(&c, seed).unwrap()
    }

    #[test]
    fn identity_projections_give_unit_sigmas() {
        let mut model = tiny_model(1);
        let d = model.config.d_model;
        let d_k = model.config.d_k();
        for layer in &mut model.layers {
            let mut heads = layer.attention.heads().to_vec();
            for head in &mut heads {
                let mut eye = Tensor::zeros(vec![d, d_k]);
                for i in 0..d_k {
                    eye.values_mut()[i * d_k + i] = 1.0;
                }
                head.w_q = eye.clone();
                head.w_k = eye;
            }
            let w_o = layer.attention.w_o().clone();
            layer.attention = crate::attention::AttentionParams::new(heads, w_o).unwrap();
        }
        let report = singular_value_report(&model, 0).unwrap();
        for row in &report.per_head {
            assert!((row.sigma - 1.0).abs() < 1e-8, "layer {} head {}", row.layer, row.head);
        }
        assert!(report.per_layer_max.iter().all(|s| (s - 1.0).abs() < 1e-8));
    }

    #[test]
    fn report_csv_has_header_and_rows() {
        let model = tiny_model(2);
        let report = singular_value_report(&model, 0).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("layer,head,sigma_max\n"));
        // depth*heads per-head rows + depth per-layer max rows + header
        assert_eq!(csv.lines().count(), 1 + 2 * 2 + 2);
    }

    #[test]
    fn ratio_report_single_image_has_no_stderr() {
        let model = tiny_model(3);
        let mut rng = crate::rng::stream(53, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let rows = gradient_ratio_report(&model, &[image]).unwrap();
        assert_eq!(rows.len(), model.layers.len());
        for row in &rows {
            assert!(row.mean.is_some());
            assert!(row.stderr.is_none());
        }
        let csv = ratio_report_to_csv(&rows);
        assert!(csv.starts_with("layer,images,mean_ratio_median,stderr,excluded_entries\n"));
    }

    #[test]
    fn ratio_report_row_count_is_depth() {
        let model = tiny_model(4);
        let mut rng = crate::rng::stream(54, "image", 0);
        let images: Vec<Tensor> = (0..3).map(|_| Tensor::rand_uniform(vec![1, 8, 8], &mut rng)).collect();
        let rows = gradient_ratio_report(&model, &images).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.per_image_medians.len(), 3);
            assert!(row.stderr.is_some());
        }
    }

    #[test]
    fn key_replacement_identity_patch_changes_nothing() {
        let model = tiny_model(5);
        let mut rng = crate::rng::stream(55, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        // patch equal to the clean region: all three conditions coincide
        let mut pixels = Vec::new();
        for r in 0..4 {
            pixels.extend_from_slice(&image.values()[r * 8..r * 8 + 4]);
        }
        let patch = PatchSpec { pixels: Tensor::new(vec![1, 4, 4], pixels).unwrap(), location: (0, 0) };
        let record = key_replacement_ablation(&model, &image, &patch, SurgeryScope::AllLayers).unwrap();
        assert!((record.attn_clean - record.attn_adv).abs() < 1e-12);
        assert!((record.attn_clean - record.attn_replaced).abs() < 1e-12);
    }

    #[test]
    fn key_replacement_rejects_misaligned_patch() {
        let model = tiny_model(6);
        let image = Tensor::zeros(vec![1, 8, 8]);
        let patch = PatchSpec { pixels: Tensor::full(vec![1, 4, 4], 0.5), location: (1, 0) };
        assert!(key_replacement_ablation(&model, &image, &patch, SurgeryScope::AllLayers).is_err());
        let small = PatchSpec { pixels: Tensor::full(vec![1, 2, 2], 0.5), location: (0, 0) };
        assert!(key_replacement_ablation(&model, &image, &small, SurgeryScope::AllLayers).is_err());
    }

    #[test]
    fn surgery_on_unpatched_image_is_identity() {
        let model = tiny_model(7);
        let mut rng = crate::rng::stream(57, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let mut pixels = Vec::new();
        for r in 0..4 {
            pixels.extend_from_slice(&image.values()[r * 8..r * 8 + 4]);
        }
        let patch = PatchSpec { pixels: Tensor::new(vec![1, 4, 4], pixels).unwrap(), location: (0, 0) };
        for scope in [SurgeryScope::AllLayers, SurgeryScope::Layer(1)] {
            let record = key_replacement_ablation(&model, &image, &patch, scope).unwrap();
            assert!((record.attn_replaced - record.attn_clean).abs() < 1e-12);
        }
    }

    #[test]
    fn token_export_carries_rows_and_projection() {
        let model = tiny_model(8);
        let mut rng = crate::rng::stream(58, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let eva = evaluate(&model, &image).unwrap();
        let mut buffer = Vec::new();
        export_projected_tokens(&eva.tape, &eva.output.traces, 0, 1, 1, &mut buffer).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        assert!(text.contains("[P_Q] shape [5x4]"));
        assert!(text.contains("[P_K_pca2] shape [5x2]"));
        assert!(text.contains("[final_layer_attention_to_target]"));
        let pq_rows = text
            .lines()
            .skip_while(|l| !l.starts_with("[P_Q]"))
            .skip(1)
            .take_while(|l| !l.starts_with('['))
            .count();
        assert_eq!(pq_rows, model.config.seq_len());
    }

    #[test]
    fn full_rank_2d_projection_preserves_pairwise_distances() {
        // with d_k = 2, PCA onto two components is a rigid map of the
        // centered points
        let points: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.2],
            vec![-0.4, 0.9],
            vec![2.0, -1.0],
        ];
        let (mean, plane) = principal_plane(&points).unwrap();
        let project = |p: &[f64]| -> Vec<f64> {
            let centered: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            plane.iter().map(|axis| centered.iter().zip(axis).map(|(a, b)| a * b).sum()).collect()
        };
        let projected: Vec<Vec<f64>> = points.iter().map(|p| project(p)).collect();
        for i in 0..points.len() {
            for j in 0..points.len() {
                let orig: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let proj: f64 = projected[i]
                    .iter()
                    .zip(&projected[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((orig - proj).abs() < 1e-9, "pair ({i},{j}): {orig} vs {proj}");
            }
        }
    }
}
