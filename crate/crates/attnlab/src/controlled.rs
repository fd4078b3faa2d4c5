//! Controlled single-token study: Gaussian tokens, diagonal ±w query/key
//! projections, and the question of how much ℓ∞ budget one token needs to
//! capture (nearly) all attention — plus the silhouette separation score
//! for the projected query/key clusters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::median;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ControlledConfig {
    /// Token count n (≥ 2; a single token attends to itself trivially).
    pub tokens: usize,
    /// Embedding dimension; the diagonal projections keep d_model = d_k.
    pub d_k: usize,
    /// Input mean μ: tokens are drawn i.i.d. from N(μ·1, 1).
    pub mu: f64,
    /// Projection scale w: W_Q = −w·I, W_K = w·I.
    pub weight_scale: f64,
    /// Attention weight a query must give key 0 to count, θ_a.
    pub attention_threshold: f64,
    /// Fraction of queries that must cross θ_a, θ_f.
    pub success_fraction: f64,
    /// Scale logits by 1/√d_k. The unscaled variant is runnable too since
    /// the study's prose never pins the scaling down.
    pub scaled: bool,
    /// Perturb token 0 by +ε·1 instead of −ε·1 (for the μ < 0 symmetry
    /// check; the default direction targets μ > 0).
    pub positive_perturbation: bool,
    /// Bisection stops when the bracket is this tight.
    pub bisect_tolerance: f64,
}

impl ControlledConfig {
    pub fn new(tokens: usize, d_k: usize, mu: f64, weight_scale: f64) -> Self {
        ControlledConfig {
            tokens,
            d_k,
            mu,
            weight_scale,
            attention_threshold: 0.99,
            success_fraction: 0.95,
            scaled: true,
            positive_perturbation: false,
            bisect_tolerance: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens < 2 {
            return Err(Error::Config(format!(
                "controlled study needs n >= 2, got {} (a singleton softmax is trivially 1)",
                self.tokens
            )));
        }
        if self.d_k == 0 || self.weight_scale <= 0.0 {
            return Err(Error::Config("d_k and weight scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.attention_threshold)
            || !(0.0..1.0).contains(&self.success_fraction)
            || self.attention_threshold == 0.0
            || self.success_fraction == 0.0
        {
            return Err(Error::Config("thresholds must lie in (0,1)".into()));
        }
        if self.bisect_tolerance <= 0.0 {
            return Err(Error::Config("bisection tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Draw the n×d_k token matrix with i.i.d. N(μ, 1) entries.
pub fn sample_inputs(config: &ControlledConfig, seed: u64) -> Tensor {
    let mut stream = rng::stream(seed, "controlled-inputs", 0);
    Tensor::rand_normal(vec![config.tokens, config.d_k], config.mu, 1.0, &mut stream)
}

/// Apply the fixed-direction perturbation to token 0 and test whether more
/// than θ_f of the queries give key 0 attention ≥ θ_a under single-head
/// attention with W_Q = −w·I, W_K = w·I.
pub fn controlled_attack_success(x: &Tensor, epsilon: f64, config: &ControlledConfig) -> Result<bool> {
    if epsilon < 0.0 {
        return Err(Error::Config(format!("epsilon {epsilon} must be >= 0")));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut adv = x.clone();
    let sign = if config.positive_perturbation { 1.0 } else { -1.0 };
    for v in &mut adv.values_mut()[..d] {
        *v += sign * epsilon;
    }

    // Logits: B[j][i] = (−w x_j)·(w x_i) / scale = −w²·(x_j·x_i) / scale
    let w2 = config.weight_scale * config.weight_scale;
    let scale = if config.scaled { (d as f64).sqrt() } else { 1.0 };
    let factor = -w2 / scale;

    let mut captured = 0usize;
    let mut logits = vec![0.0; n];
    for j in 0..n {
        let row_j = adv.row(j);
        for (i, slot) in logits.iter_mut().enumerate() {
            let dot: f64 = row_j.iter().zip(adv.row(i)).map(|(a, b)| a * b).sum();
            *slot = factor * dot;
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let weight_to_key0 = (logits[0] - max).exp() / denom;
        if weight_to_key0 >= config.attention_threshold {
            captured += 1;
        }
    }
    Ok(captured as f64 / n as f64 > config.success_fraction)
}

/// Bisection floor of the successful ε range. Starts probing at 2⁶ and
/// doubles to a hard cap of 2¹²; `None` when even the cap fails.
pub fn min_epsilon_bisect(config: &ControlledConfig, seed: u64) -> Result<Option<f64>> {
    config.validate()?;
    let x = sample_inputs(config, seed);
    if controlled_attack_success(&x, 0.0, config)? {
        return Ok(Some(0.0));
    }
    let mut hi = 64.0;
    while !controlled_attack_success(&x, hi, config)? {
        hi *= 2.0;
        if hi > 4096.0 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    while hi - lo > config.bisect_tolerance {
        let mid = 0.5 * (lo + hi);
        if controlled_attack_success(&x, mid, config)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub mus: Vec<f64>,
    pub weight_scales: Vec<f64>,
    pub d_ks: Vec<usize>,
}

impl SweepGrid {
    /// The acceptance grid: each axis spans more than an order of magnitude
    /// and the whole sweep finishes in minutes.
    pub fn default_grid() -> Self {
        SweepGrid {
            mus: vec![0.1, 0.5, 1.0],
            weight_scales: vec![1.0, 2.0, 4.0],
            d_ks: vec![16, 64, 256],
        }
    }

    pub fn cells(&self) -> usize {
        self.mus.len() * self.weight_scales.len() * self.d_ks.len()
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub mu: f64,
    pub weight_scale: f64,
    pub d_k: usize,
    pub tokens: usize,
    /// (seed, ε*) per seed; `None` marks the unattainable cap.
    pub per_seed: Vec<(u64, Option<f64>)>,
    /// Median over attained seeds; `None` when no seed attained success.
    pub median_epsilon: Option<f64>,
}

/// ε* for every grid cell and seed. Cells are independent; the per-cell
/// sampling seed is derived from (seed, cell index) so concurrent and
/// sequential execution produce identical tables.
pub fn controlled_sweep(
    grid: &SweepGrid,
    template: &ControlledConfig,
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if grid.cells() == 0 || seeds.is_empty() {
        return Err(Error::Config("sweep needs a nonempty grid and seed list".into()));
    }
    let mut cells = Vec::with_capacity(grid.cells());
    for &mu in &grid.mus {
        for &w in &grid.weight_scales {
            for &d_k in &grid.d_ks {
                let mut config = template.clone();
                config.mu = mu;
                config.weight_scale = w;
                config.d_k = d_k;
                cells.push(config);
            }
        }
    }
    cells
        .into_par_iter()
        .enumerate()
        .map(|(cell_index, config)| {
            config.validate()?;
            let per_seed = seeds
                .iter()
                .map(|&s| {
                    let cell_seed = rng::substream_seed(s, "controlled-cell", cell_index as u64);
                    Ok((s, min_epsilon_bisect(&config, cell_seed)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut attained: Vec<f64> = per_seed.iter().filter_map(|(_, e)| *e).collect();
            Ok(SweepCell {
                mu: config.mu,
                weight_scale: config.weight_scale,
                d_k: config.d_k,
                tokens: config.tokens,
                per_seed,
                median_epsilon: median(&mut attained),
            })
        })
        .collect()
}

/// Standard two-cluster silhouette with Euclidean distance; a cluster with
/// a single point contributes s = 0 for that point.
pub fn silhouette_score(keys: &Tensor, queries: &Tensor) -> Result<f64> {
    let (nk, nq) = (keys.shape()[0], queries.shape()[0]);
    if keys.shape().len() != 2 || queries.shape().len() != 2 || keys.shape()[1] != queries.shape()[1] {
        return Err(Error::Config("silhouette needs two point sets of equal dimension".into()));
    }
    if nk + nq < 2 {
        return Err(Error::Config("silhouette needs at least two points in total".into()));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let side = |own: &Tensor, other: &Tensor| -> f64 {
        let n_own = own.shape()[0];
        let mut total = 0.0;
        for i in 0..n_own {
            if n_own == 1 {
                continue; // singleton cluster: s = 0
            }
            let a: f64 = (0..n_own)
                .filter(|&j| j != i)
                .map(|j| dist(own.row(i), own.row(j)))
                .sum::<f64>()
                / (n_own - 1) as f64;
            let b: f64 = (0..other.shape()[0])
                .map(|j| dist(own.row(i), other.row(j)))
                .sum::<f64>()
                / other.shape()[0] as f64;
            total += (b - a) / a.max(b);
        }
        total
    };
    Ok((side(keys, queries) + side(queries, keys)) / (nk + nq) as f64)
}

/// Silhouette between the projected keys w·X and queries −w·X of one draw.
pub fn projected_silhouette(config: &ControlledConfig, seed: u64) -> Result<f64> {
    let x = sample_inputs(config, seed);
    let scale = |factor: f64| -> Tensor {
        let values = x.values().iter().map(|v| factor * v).collect();
        Tensor::new(x.shape().to_vec(), values).expect("same shape")
    };
    let keys = scale(config.weight_scale);
    let queries = scale(-config.weight_scale);
    silhouette_score(&keys, &queries)
}
