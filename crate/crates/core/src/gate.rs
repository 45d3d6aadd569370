//! Prompt-adaptive mixture weights over the alpha grid.
//!
//! Pipeline: a robust cosine alignment `s` between the prompt and the
//! steering direction is mapped to a center `mu` on the alpha axis
//! (`mu = alpha_max * s` in amplify mode, negated in neutralize mode), an RBF
//! around `mu` gives base weights, and an optional Dirichlet draw, uniform
//! shrinkage, and top-k truncation finish the job. Weights always come back
//! nonnegative and summing to one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PromptTokens, SteerableModel};
use crate::steering::{alignment_cosine, SteeringVector};

/// The finite set of intervention strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    values: Vec<f64>,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            values: vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0],
        }
    }
}

impl AlphaGrid {
    /// Sorted distinct values; must contain 0 (the neutral expert).
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("alpha grid is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("alpha grid has non-finite values".into()));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("alpha grid has duplicate values".into()));
        }
        if !values.contains(&0.0) {
            return Err(Error::InvalidParameter("alpha grid must contain 0".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn alpha_max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the zero (neutral) entry.
    pub fn neutral_index(&self) -> usize {
        self.values.iter().position(|&v| v == 0.0).expect("grid contains 0")
    }
}

/// How the alignment score maps onto the alpha axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Center at `alpha_max * s`: push further along the detected stance.
    Amplify,
    /// Center at `-alpha_max * s`: counteract the detected stance.
    Neutralize,
}

/// Gate configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// RBF width in grid units.
    pub sigma: f64,
    pub mode: GateMode,
    /// Flips the sign of the computed center, applied last.
    pub counter_bias: bool,
    /// Dirichlet concentration scale; `explore` presets drop this to 5.
    pub kappa: f64,
    /// Uniform-shrinkage weight in [0, 1].
    pub shrink_lambda: f64,
    /// Keep only the top-k experts (ties prefer the smaller alpha).
    pub topk: Option<usize>,
    /// Draw the gate from a Dirichlet around the base weights instead of
    /// using them deterministically.
    pub sample_gate: bool,
    /// Prompt positions used by the robust alignment median.
    pub robust_positions: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            mode: GateMode::Neutralize,
            counter_bias: false,
            kappa: 50.0,
            shrink_lambda: 0.1,
            topk: None,
            sample_gate: false,
            robust_positions: 4,
        }
    }
}

impl GateConfig {
    /// The `explore` preset: sampled gate with a loose concentration.
    pub fn explore() -> Self {
        Self {
            kappa: 5.0,
            sample_gate: true,
            ..Self::default()
        }
    }

    pub fn validate(&self, grid: &AlphaGrid) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidParameter(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.shrink_lambda) {
            return Err(Error::InvalidParameter(format!(
                "shrink_lambda must be in [0, 1], got {}",
                self.shrink_lambda
            )));
        }
        if let Some(k) = self.topk {
            if k == 0 || k > grid.len() {
                return Err(Error::InvalidParameter(format!(
                    "topk must be in 1..={}, got {k}",
                    grid.len()
                )));
            }
        }
        if self.robust_positions == 0 {
            return Err(Error::InvalidParameter("robust_positions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Normalized nonnegative weights over the grid, plus the center and
/// alignment they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateWeights {
    /// Aligned with the grid's value order.
    pub weights: Vec<f64>,
    pub mu: f64,
    pub alignment: f64,
}

impl GateWeights {
    pub fn weight_for(&self, grid: &AlphaGrid, alpha: f64) -> Option<f64> {
        grid.values()
            .iter()
            .position(|&v| v == alpha)
            .map(|i| self.weights[i])
    }

    /// One-hot weights on a grid value; handy for forced-expert runs.
    pub fn one_hot(grid: &AlphaGrid, alpha: f64) -> Result<Self> {
        let idx = grid
            .values()
            .iter()
            .position(|&v| v == alpha)
            .ok_or_else(|| Error::InvalidParameter(format!("alpha {alpha} not on the grid")))?;
        let mut weights = vec![0.0; grid.len()];
        weights[idx] = 1.0;
        Ok(Self {
            weights,
            mu: alpha,
            alignment: 0.0,
        })
    }
}

/// Median of alignment cosines over the last `m` prompt positions at the
/// steering vector's layer.
pub fn robust_alignment<M: SteerableModel>(
    model: &M,
    prompt: &PromptTokens,
    v: &SteeringVector,
    m: usize,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidParameter("m must be >= 1".into()));
    }
    let prompt_len = prompt.prompt_end + 1;
    if prompt_len < m {
        return Err(Error::InvalidParameter(format!(
            "prompt has {prompt_len} positions, robust alignment needs {m}"
        )));
    }
    let positions: Vec<usize> = (prompt_len - m..prompt_len).collect();
    let acts = model.capture_positions(prompt, v.layer, &positions)?;
    let mut cosines = acts
        .iter()
        .map(|a| alignment_cosine(a, v))
        .collect::<Result<Vec<f64>>>()?;
    cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = cosines.len();
    Ok(if n % 2 == 1 {
        cosines[n / 2]
    } else {
        0.5 * (cosines[n / 2 - 1] + cosines[n / 2])
    })
}

/// Maps the alignment score to the RBF center on the alpha axis.
pub fn map_to_mu(s: f64, grid: &AlphaGrid, config: &GateConfig) -> f64 {
    let base = match config.mode {
        GateMode::Amplify => grid.alpha_max() * s,
        GateMode::Neutralize => -grid.alpha_max() * s,
    };
    if config.counter_bias {
        -base
    } else {
        base
    }
}

/// RBF base weights around `mu`, normalized. Works in log space so extreme
/// `sigma` values cannot underflow to an all-zero vector.
pub fn rbf_weights(mu: f64, grid: &AlphaGrid, sigma: f64) -> Result<GateWeights> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let logs: Vec<f64> = grid
        .values()
        .iter()
        .map(|&a| -((a - mu) * (a - mu)) / (2.0 * sigma * sigma))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(GateWeights {
        weights: exps.iter().map(|&e| e / sum).collect(),
        mu,
        alignment: f64::NAN,
    })
}

/// Finishing pipeline: optional Dirichlet draw around the base weights, then
/// uniform shrinkage, then top-k truncation. The result sums to one.
pub fn finalize(base: &GateWeights, grid: &AlphaGrid, config: &GateConfig, seed: u64) -> Result<GateWeights> {
    config.validate(grid)?;
    if base.weights.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: base.weights.len(),
        });
    }
    let mut w = base.weights.clone();

    if config.sample_gate {
        // Dirichlet(kappa * base) via independent Gamma(shape, 1) draws.
        // A zero shape is a point mass at zero.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draws = vec![0.0; w.len()];
        for (d, &b) in draws.iter_mut().zip(&w) {
            let shape = config.kappa * b;
            if shape > 0.0 {
                let gamma = Gamma::new(shape, 1.0)
                    .map_err(|e| Error::InvalidParameter(format!("gamma shape: {e}")))?;
                *d = gamma.sample(&mut rng);
            }
        }
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            for (wi, d) in w.iter_mut().zip(&draws) {
                *wi = d / total;
            }
        }
    }

    if config.shrink_lambda > 0.0 {
        let uniform = 1.0 / w.len() as f64;
        for wi in w.iter_mut() {
            *wi = (1.0 - config.shrink_lambda) * *wi + config.shrink_lambda * uniform;
        }
    }

    if let Some(k) = config.topk {
        if k < w.len() {
            // Rank by weight descending, ties to the smaller alpha value.
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| {
                w[b].partial_cmp(&w[a])
                    .unwrap()
                    .then(grid.values()[a].partial_cmp(&grid.values()[b]).unwrap())
            });
            let keep: Vec<usize> = order.into_iter().take(k).collect();
            let mut truncated = vec![0.0; w.len()];
            for &i in &keep {
                truncated[i] = w[i];
            }
            let total: f64 = truncated.iter().sum();
            for t in truncated.iter_mut() {
                *t /= total;
            }
            w = truncated;
        }
    }

    // Exact renormalization guards accumulated rounding.
    let total: f64 = w.iter().sum();
    for wi in w.iter_mut() {
        *wi /= total;
    }
    Ok(GateWeights {
        weights: w,
        mu: base.mu,
        alignment: base.alignment,
    })
}

/// Full per-prompt gate: robust alignment -> center -> RBF -> finalize.
pub fn compute_gate<M: SteerableModel>(
    model: &M,
    prompt: &PromptTokens,
    v: &SteeringVector,
    grid: &AlphaGrid,
    config: &GateConfig,
    seed: u64,
) -> Result<GateWeights> {
    config.validate(grid)?;
    // Short prompts clamp the median window instead of failing.
    let m = config.robust_positions.min(prompt.prompt_end + 1);
    let s = robust_alignment(model, prompt, v, m)?;
    let mu = map_to_mu(s, grid, config);
    let mut base = rbf_weights(mu, grid, config.sigma)?;
    base.alignment = s;
    finalize(&base, grid, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::analytic::{AnalyticConceptLM, SUPPORT_MARKER};
    use crate::model::PromptTokens;

    fn grid() -> AlphaGrid {
        AlphaGrid::default()
    }

    #[test]
    fn grid_requires_zero_and_distinct_values() {
        assert!(AlphaGrid::new(vec![-1.0, 1.0]).is_err());
        assert!(AlphaGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        let g = AlphaGrid::new(vec![2.0, 0.0, -2.0]).unwrap();
        assert_eq!(g.values(), &[-2.0, 0.0, 2.0]);
        assert_eq!(g.alpha_max(), 2.0);
    }

    #[test]
    fn mu_mapping_follows_mode_and_counter_bias() {
        let g = grid();
        let amplify = GateConfig {
            mode: GateMode::Amplify,
            ..GateConfig::default()
        };
        let neutralize = GateConfig::default();
        assert_eq!(map_to_mu(1.0, &g, &amplify), 3.0);
        assert_eq!(map_to_mu(0.0, &g, &amplify), 0.0);
        assert_eq!(map_to_mu(0.0, &g, &neutralize), 0.0);
        assert_eq!(map_to_mu(-0.5, &g, &neutralize), 1.5);
        let flipped = GateConfig {
            counter_bias: true,
            ..neutralize
        };
        assert_eq!(map_to_mu(-0.5, &g, &flipped), -1.5);
    }

    #[test]
    fn neutralize_equals_amplify_of_negated_alignment() {
        let g = grid();
        let amplify = GateConfig {
            mode: GateMode::Amplify,
            ..GateConfig::default()
        };
        let neutralize = GateConfig::default();
        for s in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_eq!(map_to_mu(s, &g, &neutralize), map_to_mu(-s, &g, &amplify));
        }
    }

    #[test]
    fn rbf_center_zero_matches_hand_derivation() {
        // exp(-a^2/2) over {-3..3}, normalized.
        let w = rbf_weights(0.0, &grid(), 1.0).unwrap();
        let raw: Vec<f64> = grid().values().iter().map(|&a| (-a * a / 2.0).exp()).collect();
        let sum: f64 = raw.iter().sum();
        for (got, want) in w.weights.iter().zip(raw.iter().map(|r| r / sum)) {
            assert!((got - want).abs() < 1e-12);
        }
        let expect = [0.0044, 0.0540, 0.2420, 0.3991, 0.2420, 0.0540, 0.0044];
        for (got, want) in w.weights.iter().zip(expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn rbf_is_symmetric_at_zero_center() {
        let w = rbf_weights(0.0, &grid(), 0.8).unwrap();
        let n = w.weights.len();
        for i in 0..n {
            assert_eq!(w.weights[i], w.weights[n - 1 - i]);
        }
    }

    #[test]
    fn tiny_sigma_collapses_to_nearest_point() {
        let w = rbf_weights(2.0, &grid(), 1e-6).unwrap();
        let idx = grid().values().iter().position(|&v| v == 2.0).unwrap();
        assert!(w.weights[idx] >= 1.0 - 1e-9);
        let s: f64 = w.weights.iter().sum();
        assert!((s - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let base = rbf_weights(0.7, &grid(), 1.0).unwrap();
        let cfg = GateConfig {
            sample_gate: false,
            shrink_lambda: 0.0,
            topk: None,
            ..GateConfig::default()
        };
        let out = finalize(&base, &grid(), &cfg, 1).unwrap();
        for (a, b) in out.weights.iter().zip(&base.weights) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn full_shrinkage_is_uniform() {
        let base = rbf_weights(-2.0, &grid(), 0.5).unwrap();
        let cfg = GateConfig {
            shrink_lambda: 1.0,
            ..GateConfig::default()
        };
        let out = finalize(&base, &grid(), &cfg, 1).unwrap();
        for w in &out.weights {
            assert!((w - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_one_on_centered_rbf_keeps_neutral_expert() {
        let base = rbf_weights(0.0, &grid(), 1.0).unwrap();
        let cfg = GateConfig {
            shrink_lambda: 0.0,
            topk: Some(1),
            ..GateConfig::default()
        };
        let out = finalize(&base, &grid(), &cfg, 1).unwrap();
        let neutral = grid().neutral_index();
        assert_eq!(out.weights[neutral], 1.0);
        assert!(out.weights.iter().enumerate().all(|(i, &w)| i == neutral || w == 0.0));
    }

    #[test]
    fn argmax_is_nearest_grid_point_with_small_alpha_ties() {
        let g = grid();
        for (mu, expect_alpha) in [(1.2, 1.0), (-2.7, -3.0), (0.5, 0.0), (-0.5, -1.0), (2.5, 2.0)] {
            // Exact midpoints tie; the smaller alpha value must win.
            let w = rbf_weights(mu, &g, 0.9).unwrap();
            let mut order: Vec<usize> = (0..w.weights.len()).collect();
            order.sort_by(|&a, &b| {
                w.weights[b]
                    .partial_cmp(&w.weights[a])
                    .unwrap()
                    .then(g.values()[a].partial_cmp(&g.values()[b]).unwrap())
            });
            assert_eq!(
                g.values()[order[0]],
                expect_alpha,
                "mu = {mu}"
            );
        }
    }

    #[test]
    fn dirichlet_mean_tracks_base_weights() {
        let base = rbf_weights(1.0, &grid(), 1.0).unwrap();
        let cfg = GateConfig {
            sample_gate: true,
            kappa: 50.0,
            shrink_lambda: 0.0,
            ..GateConfig::default()
        };
        let draws = 10_000;
        let mut mean = vec![0.0; base.weights.len()];
        for i in 0..draws {
            let w = finalize(&base, &grid(), &cfg, i).unwrap();
            for (m, wi) in mean.iter_mut().zip(&w.weights) {
                *m += wi / draws as f64;
            }
        }
        for (m, b) in mean.iter().zip(&base.weights) {
            assert!((m - b).abs() < 0.02, "mean {m} vs base {b}");
        }
    }

    #[test]
    fn every_pipeline_path_yields_a_distribution() {
        let g = grid();
        let mut seed = 0u64;
        for &s in &[-1.0, -0.4, 0.0, 0.9] {
            for &sigma in &[0.01, 0.5, 1.0, 4.0] {
                for mode in [GateMode::Amplify, GateMode::Neutralize] {
                    for &lambda in &[0.0, 0.1, 1.0] {
                        for topk in [None, Some(1), Some(3), Some(7)] {
                            for sample in [false, true] {
                                seed += 1;
                                let cfg = GateConfig {
                                    sigma,
                                    mode,
                                    shrink_lambda: lambda,
                                    topk,
                                    sample_gate: sample,
                                    ..GateConfig::default()
                                };
                                let mu = map_to_mu(s, &g, &cfg);
                                let base = rbf_weights(mu, &g, sigma).unwrap();
                                let w = finalize(&base, &g, &cfg, seed).unwrap();
                                let sum: f64 = w.weights.iter().sum();
                                assert!((sum - 1.0).abs() <= 1e-9);
                                assert!(w.weights.iter().all(|&x| x >= 0.0));
                                if let Some(k) = topk {
                                    assert!(w.weights.iter().filter(|&&x| x > 0.0).count() <= k);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn robust_alignment_matches_closed_form_on_oracle() {
        // Every position of the oracle carries b + u under SUPPORT, so the
        // median is <b+u, u> / ||b+u|| = 1 / sqrt(||b||^2 + 1).
        let m = AnalyticConceptLM::default_oracle(8);
        let ids = vec![
            m.vocab().id_of(SUPPORT_MARKER).unwrap(),
            m.vocab().id_of("w0").unwrap(),
            m.vocab().id_of("w1").unwrap(),
            m.vocab().id_of("w2").unwrap(),
        ];
        let prompt = PromptTokens::new(ids).unwrap();
        let v = SteeringVector {
            layer: 0,
            direction: m.planted_direction().to_vec(),
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        let b_norm_sq: f64 = m.base_vector().iter().map(|x| x * x).sum();
        let expect = 1.0 / (b_norm_sq + 1.0).sqrt();
        let s = robust_alignment(&m, &prompt, &v, 4).unwrap();
        assert!((s - expect).abs() < 1e-12, "{s} vs {expect}");
        // m = 1 equals the plain final-token cosine.
        let s1 = robust_alignment(&m, &prompt, &v, 1).unwrap();
        assert!((s1 - expect).abs() < 1e-12);
    }

    #[test]
    fn robust_alignment_is_antisymmetric_across_markers() {
        let m = AnalyticConceptLM::default_oracle(8);
        let v = SteeringVector {
            layer: 0,
            direction: m.planted_direction().to_vec(),
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        let mk = |marker: &str| {
            PromptTokens::new(vec![
                m.vocab().id_of(marker).unwrap(),
                m.vocab().id_of("w0").unwrap(),
            ])
            .unwrap()
        };
        let s_plus = robust_alignment(&m, &mk("SUPPORT"), &v, 2).unwrap();
        let s_minus = robust_alignment(&m, &mk("CHALLENGE"), &v, 2).unwrap();
        assert!((s_plus + s_minus).abs() < 1e-12);
        assert!(s_plus > 0.0);
    }
}
