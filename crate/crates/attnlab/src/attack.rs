//! Patch application and the PGD patch optimizer: signed-gradient ascent
//! with cosine step decay, optional normalized momentum, projection onto
//! the [0,1] pixel box after every step, and a per-image robustness
//! evaluation harness.

use rayon::prelude::*;

use crate::attention::mean_final_attention_to_token;
use crate::error::{Error, Result};
use crate::loss::{total_loss, CeMode, LossConfig, LossTerm};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vit::{argmax, evaluate, forward_frozen, ViTModel};

/// An adversarial patch: pixels in [0,1], anchored at a fixed location.
#[derive(Debug, Clone)]
pub struct PatchSpec {
    /// Patch pixels, channels × height × width.
    pub pixels: Tensor,
    /// Top-left (row, col) in image coordinates.
    pub location: (usize, usize),
}

impl PatchSpec {
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }

    /// Box constraint ‖p − 0.5‖∞ ≤ 0.5 plus in-bounds placement.
    pub fn validate_for(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        let shape = self.pixels.shape();
        if shape.len() != 3 || shape[0] != channels {
            return Err(Error::Config(format!("patch must be [{channels}, h, w], got {shape:?}")));
        }
        if self.pixels.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("patch pixels must lie in [0,1]".into()));
        }
        let (ph, pw) = self.size();
        if self.location.0 + ph > height || self.location.1 + pw > width {
            return Err(Error::Config(format!(
                "patch {}x{} at ({}, {}) exceeds the {}x{} image",
                ph, pw, self.location.0, self.location.1, height, width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// PGD iteration count N.
    pub iterations: usize,
    /// Initial step size α⁰.
    pub step_size: f64,
    /// Momentum coefficient β in [0, 1).
    pub momentum: f64,
    pub use_momentum: bool,
    pub loss: LossConfig,
    /// Base seed for the uniform patch initialization.
    pub seed: u64,
}

impl AttackConfig {
    /// The evaluation defaults: 250 iterations at α⁰ = 8/255 with
    /// normalized momentum β = 0.9.
    pub fn defaults(loss: LossConfig, seed: u64) -> Self {
        AttackConfig {
            iterations: 250,
            step_size: 8.0 / 255.0,
            momentum: 0.9,
            use_momentum: true,
            loss,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        if self.step_size < 0.0 {
            return Err(Error::Config(format!("step size {} must be non-negative", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0,1)", self.momentum)));
        }
        self.loss.validate()
    }
}

/// Cosine decay α⁰·½(1+cos(π t/N)). `t = N/2` returns exactly α⁰/2 even
/// though cos(π/2) in floating point does not land on zero.
pub fn cosine_step(alpha0: f64, t: usize, n: usize) -> Result<f64> {
    if t > n {
        return Err(Error::IndexOutOfRange { what: "schedule step", index: t, limit: n });
    }
    if 2 * t == n {
        return Ok(alpha0 * 0.5);
    }
    Ok(alpha0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / n as f64).cos()))
}

/// Overwrite the patch region of `image` with `patch` pixels on a tape.
/// The image enters as a constant, so the result differentiates with
/// respect to the patch only.
pub fn apply_patch(
    tape: &mut Tape,
    image: &Tensor,
    patch: NodeId,
    location: (usize, usize),
) -> Result<NodeId> {
    let base = tape.constant(image.clone());
    tape.write_box(base, patch, &[0, location.0, location.1])
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub step_size: f64,
    pub total: f64,
    pub terms: Vec<(LossTerm, f64)>,
}

pub type AttackHistory = Vec<IterationRecord>;

/// PGD on the patch pixels: p ← clip₍₀,₁₎(p + α_t · sgn(g_t)), where g_t is
/// the loss gradient or the normalized-momentum direction. The patch is
/// initialized uniformly at random from stream (seed, "patch-init", index).
pub fn pgd_attack(
    model: &ViTModel,
    image: &Tensor,
    label: usize,
    location: (usize, usize),
    size: (usize, usize),
    config: &AttackConfig,
    init_index: u64,
) -> Result<(PatchSpec, AttackHistory)> {
    config.validate()?;
    let c = &model.config;
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::Config("patch size must be positive in both dimensions".into()));
    }
    let mut init_rng = rng::stream(config.seed, "patch-init", init_index);
    let mut patch = PatchSpec {
        pixels: Tensor::rand_uniform(vec![c.channels, size.0, size.1], &mut init_rng),
        location,
    };
    patch.validate_for(c.channels, c.image_size, c.image_size)?;

    let mut momentum = vec![0.0; patch.pixels.numel()];
    let mut history = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        let mut tape = Tape::new();
        let p = tape.leaf(patch.pixels.clone());
        let adv = apply_patch(&mut tape, image, p, location)?;
        let out = forward_frozen(&mut tape, model, adv)?;
        let loss = total_loss(&mut tape, out.logits, &out.traces, label, &config.loss)?;
        let total = tape.value(loss.total).values()[0];
        if !total.is_finite() {
            return Err(Error::AttackDiverged { iteration: t });
        }
        let terms: Vec<(LossTerm, f64)> = loss
            .terms
            .iter()
            .map(|&(term, id)| (term, tape.value(id).values()[0]))
            .collect();

        let grads = tape.backward(loss.total)?;
        let grad = grads.wrt(&tape, p);
        let direction: Vec<f64> = if config.use_momentum {
            let norm = grad.values().iter().map(|g| g * g).sum::<f64>().sqrt();
            for (m, g) in momentum.iter_mut().zip(grad.values()) {
                *m *= config.momentum;
                if norm > 0.0 {
                    *m += (1.0 - config.momentum) * g / norm;
                }
            }
            momentum.clone()
        } else {
            grad.values().to_vec()
        };

        let alpha = cosine_step(config.step_size, t, config.iterations)?;
        for (pv, d) in patch.pixels.values_mut().iter_mut().zip(&direction) {
            *pv = (*pv + alpha * sign(*d)).clamp(0.0, 1.0);
        }
        history.push(IterationRecord { step_size: alpha, total, terms });
    }
    Ok((patch, history))
}

/// How one evaluated image fared under attack.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub attacked_pred: usize,
    pub target: Option<usize>,
    pub success: bool,
    pub final_loss: f64,
    pub final_terms: Vec<(LossTerm, f64)>,
    /// Mean final-layer attention drawn by the target key before the attack.
    pub attn_to_target_clean: f64,
    /// Same measurement on the attacked image.
    pub attn_to_target_attacked: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub records: Vec<ImageRecord>,
    pub clean_accuracy: f64,
    /// Fraction still classified correctly under attack (untargeted mode).
    pub robust_accuracy: Option<f64>,
    /// Fraction of correctly-classified images flipped to the target
    /// (targeted mode).
    pub targeted_success_rate: Option<f64>,
}

/// Per-image attack over a labeled set: fresh random patch per image,
/// records retained per image. Images run in parallel; records are sorted
/// by image index so the report is independent of scheduling.
pub fn evaluate_robust_accuracy(
    model: &ViTModel,
    images: &[Tensor],
    labels: &[usize],
    location: (usize, usize),
    size: (usize, usize),
    config: &AttackConfig,
) -> Result<RobustnessReport> {
    config.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Config("evaluation needs equally many images and labels".into()));
    }
    let targeted = config.loss.ce_mode == CeMode::TargetedMinimize;
    let i_star = config.loss.target_key;

    let mut records = (0..images.len())
        .into_par_iter()
        .map(|idx| -> Result<ImageRecord> {
            let image = &images[idx];
            let label = labels[idx];
            let clean = evaluate(model, image)?;
            let clean_pred = clean.prediction();
            let attn_clean = mean_final_attention_to_token(&clean.tape, &clean.output.traces, i_star)?;

            let (patch, history) = pgd_attack(model, image, label, location, size, config, idx as u64)?;
            let mut tape = Tape::new();
            let p = tape.constant(patch.pixels.clone());
            let adv = apply_patch(&mut tape, image, p, patch.location)?;
            let out = forward_frozen(&mut tape, model, adv)?;
            let attacked_pred = argmax(tape.value(out.logits).values());
            let attn_attacked = mean_final_attention_to_token(&tape, &out.traces, i_star)?;

            let last = history.last().expect("iterations >= 1");
            let success = if targeted {
                let target = config.loss.target_class.expect("validated");
                clean_pred == label && attacked_pred == target
            } else {
                attacked_pred != label
            };
            Ok(ImageRecord {
                image_id: idx,
                label,
                clean_pred,
                attacked_pred,
                target: if targeted { config.loss.target_class } else { None },
                success,
                final_loss: last.total,
                final_terms: last.terms.clone(),
                attn_to_target_clean: attn_clean,
                attn_to_target_attacked: attn_attacked,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.image_id);

    let n = records.len() as f64;
    let clean_accuracy = records.iter().filter(|r| r.clean_pred == r.label).count() as f64 / n;
    let (robust_accuracy, targeted_success_rate) = if targeted {
        let correct: Vec<_> = records.iter().filter(|r| r.clean_pred == r.label).collect();
        let rate = if correct.is_empty() {
            0.0
        } else {
            correct.iter().filter(|r| r.success).count() as f64 / correct.len() as f64
        };
        (None, Some(rate))
    } else {
        let robust = records.iter().filter(|r| r.attacked_pred == r.label).count() as f64 / n;
        (Some(robust), None)
    };
    Ok(RobustnessReport { records, clean_accuracy, robust_accuracy, targeted_success_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossConfig;
    use crate::vit::{ViTConfig, ViTModel};

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            d_model: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: 16,
            num_classes: 3,
            layernorm_eps: 1e-5,
        }
    }

    fn tiny_attack_config(terms: Vec<LossTerm>, iters: usize) -> AttackConfig {
        let mut loss = LossConfig::new(terms);
        loss.target_key = 1;
        loss.normalize = false;
        AttackConfig {
            iterations: iters,
            step_size: 8.0 / 255.0,
            momentum: 0.9,
            use_momentum: false,
            loss,
            seed: 5,
        }
    }

    #[test]
    fn apply_patch_identity_region() {
        let mut rng = crate::rng::stream(31, "patch", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let mut tape = Tape::new();
        // patch equal to the region it covers
        let mut region = Vec::new();
        for r in 2..5 {
            for c in 3..6 {
                region.push(image.values()[r * 8 + c]);
            }
        }
        let p = tape.leaf(Tensor::new(vec![1, 3, 3], region).unwrap());
        let out = apply_patch(&mut tape, &image, p, (2, 3)).unwrap();
        assert_eq!(tape.value(out).values(), image.values());
    }

    #[test]
    fn apply_patch_full_cover_replaces_image() {
        let mut rng = crate::rng::stream(31, "patch", 1);
        let image = Tensor::rand_uniform(vec![2, 4, 4], &mut rng);
        let cover = Tensor::rand_uniform(vec![2, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let p = tape.leaf(cover.clone());
        let out = apply_patch(&mut tape, &image, p, (0, 0)).unwrap();
        assert_eq!(tape.value(out).values(), cover.values());
    }

    #[test]
    fn apply_patch_changes_exactly_the_box() {
        let image = Tensor::zeros(vec![3, 8, 8]);
        let patch = Tensor::ones(vec![3, 2, 2]);
        let mut tape = Tape::new();
        let p = tape.leaf(patch);
        let out = apply_patch(&mut tape, &image, p, (1, 5)).unwrap();
        let changed = tape.value(out).values().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(changed, 3 * 2 * 2);
    }

    #[test]
    fn apply_patch_rejects_out_of_bounds() {
        let image = Tensor::zeros(vec![1, 8, 8]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::ones(vec![1, 4, 4]));
        assert!(apply_patch(&mut tape, &image, p, (6, 0)).is_err());
    }

    #[test]
    fn cosine_step_endpoints() {
        let a0 = 8.0 / 255.0;
        assert_eq!(cosine_step(a0, 0, 250).unwrap(), a0);
        assert_eq!(cosine_step(a0, 250, 250).unwrap(), 0.0);
        assert_eq!(cosine_step(a0, 125, 250).unwrap(), a0 / 2.0);
        assert!(cosine_step(a0, 251, 250).is_err());
    }

    #[test]
    fn zero_gradient_leaves_patch_at_init() {
        // all-zero query/key projections make the kq loss constant
        let c = tiny_config();
        let mut model = ViTModel::init(&c, 21).unwrap();
        for layer in &mut model.layers {
            let mut heads = layer.attention.heads().to_vec();
            for head in &mut heads {
                head.w_q = Tensor::zeros(vec![c.d_model, c.d_k()]);
                head.w_k = Tensor::zeros(vec![c.d_model, c.d_k()]);
            }
            let w_o = layer.attention.w_o().clone();
            layer.attention = crate::attention::AttentionParams::new(heads, w_o).unwrap();
        }
        let mut rng = crate::rng::stream(21, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let config = tiny_attack_config(vec![LossTerm::Kq], 3);
        let (patch, history) = pgd_attack(&model, &image, 0, (0, 0), (4, 4), &config, 0).unwrap();

        let mut init_rng = crate::rng::stream(config.seed, "patch-init", 0);
        let init = Tensor::rand_uniform(vec![1, 4, 4], &mut init_rng);
        assert_eq!(patch.pixels.values(), init.values());
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn history_is_finite_and_has_n_entries() {
        let c = tiny_config();
        let model = ViTModel::init(&c, 22).unwrap();
        let mut rng = crate::rng::stream(22, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let config = tiny_attack_config(vec![LossTerm::Ce, LossTerm::Kq], 5);
        let (_, history) = pgd_attack(&model, &image, 1, (0, 0), (4, 4), &config, 0).unwrap();
        assert_eq!(history.len(), 5);
        for record in &history {
            assert!(record.total.is_finite());
            assert_eq!(record.terms.len(), 2);
            assert!(record.terms.iter().all(|(_, v)| v.is_finite()));
        }
    }

    #[test]
    fn paper_defaults_are_echoed() {
        let config = AttackConfig::defaults(LossConfig::new([LossTerm::Ce]), 0);
        assert_eq!(config.iterations, 250);
        assert_eq!(config.step_size, 8.0 / 255.0);
        assert_eq!(config.momentum, 0.9);
        assert!(config.use_momentum);
    }

    #[test]
    fn iterates_stay_feasible_and_local() {
        let c = tiny_config();
        let model = ViTModel::init(&c, 23).unwrap();
        let mut rng = crate::rng::stream(23, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let mut config = tiny_attack_config(vec![LossTerm::Ce], 8);
        config.step_size = 0.7; // large steps exercise the projection
        let (patch, _) = pgd_attack(&model, &image, 2, (4, 4), (4, 4), &config, 0).unwrap();
        assert!(patch.pixels.values().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut tape = Tape::new();
        let p = tape.constant(patch.pixels.clone());
        let adv = apply_patch(&mut tape, &image, p, patch.location).unwrap();
        for r in 0..8 {
            for col in 0..8 {
                let inside = (4..8).contains(&r) && (4..8).contains(&col);
                let same = tape.value(adv).values()[r * 8 + col] == image.values()[r * 8 + col];
                assert!(inside || same, "pixel ({r},{col}) changed outside the patch");
            }
        }
    }

    #[test]
    fn same_seed_reproduces_final_patch_bitwise() {
        let c = tiny_config();
        let model = ViTModel::init(&c, 24).unwrap();
        let mut rng = crate::rng::stream(24, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let config = tiny_attack_config(vec![LossTerm::Ce], 4);
        let (a, _) = pgd_attack(&model, &image, 0, (0, 0), (4, 4), &config, 7).unwrap();
        let (b, _) = pgd_attack(&model, &image, 0, (0, 0), (4, 4), &config, 7).unwrap();
        assert_eq!(a.pixels.values(), b.pixels.values());
    }

    #[test]
    fn zero_momentum_matches_memoryless_run() {
        let c = tiny_config();
        let model = ViTModel::init(&c, 25).unwrap();
        let mut rng = crate::rng::stream(25, "image", 0);
        let image = Tensor::rand_uniform(vec![1, 8, 8], &mut rng);
        let mut with_beta0 = tiny_attack_config(vec![LossTerm::Ce], 6);
        with_beta0.use_momentum = true;
        with_beta0.momentum = 0.0;
        let mut memoryless = with_beta0.clone();
        memoryless.use_momentum = false;
        let (a, _) = pgd_attack(&model, &image, 0, (0, 0), (4, 4), &with_beta0, 0).unwrap();
        let (b, _) = pgd_attack(&model, &image, 0, (0, 0), (4, 4), &memoryless, 0).unwrap();
        assert_eq!(a.pixels.values(), b.pixels.values());
    }

    #[test]
    fn zero_size_patch_is_a_config_error() {
        let c = tiny_config();
        let model = ViTModel::init(&c, 26).unwrap();
        let image = Tensor::zeros(vec![1, 8, 8]);
        let config = tiny_attack_config(vec![LossTerm::Ce], 1);
        assert!(pgd_attack(&model, &image, 0, (0, 0), (0, 0), &config, 0).is_err());
    }

    #[test]
    fn single_zero_step_iteration_equals_random_patch() {
        let c = tiny_config();
        let model = ViTModel::init(&c, 27).unwrap();
        let spec = crate::data::DatasetSpec { num_classes: 3, channels: 1, image_size: 8, per_class: 3, noise: 0.05 };
        let ds = crate::data::generate_synthetic_dataset(&spec, 27).unwrap();
        let mut config = tiny_attack_config(vec![LossTerm::Ce], 1);
        config.step_size = 0.0; // no optimization: the random init is final
        let report =
            evaluate_robust_accuracy(&model, &ds.images, &ds.labels, (0, 0), (4, 4), &config).unwrap();

        let mut correct = 0;
        for (idx, (image, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
            let mut init_rng = crate::rng::stream(config.seed, "patch-init", idx as u64);
            let random_patch = Tensor::rand_uniform(vec![1, 4, 4], &mut init_rng);
            let mut tape = Tape::new();
            let p = tape.constant(random_patch);
            let adv = apply_patch(&mut tape, image, p, (0, 0)).unwrap();
            let out = forward_frozen(&mut tape, &model, adv).unwrap();
            if argmax(tape.value(out.logits).values()) == label {
                correct += 1;
            }
        }
        let want = correct as f64 / ds.len() as f64;
        assert_eq!(report.robust_accuracy.unwrap(), want);
    }
}
