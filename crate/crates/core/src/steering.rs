//! Contrastive steering-direction extraction and alignment.
//!
//! The direction is the mean difference of residual-stream activations at the
//! final prompt token over contrastive prompt pairs, unit-normalized. The
//! sign convention is `plus_minus`: the first prompt of each pair supports or
//! affirms the claim, the second challenges or negates it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, PromptTokens, SteerableModel};

/// Raw-norm threshold below which extraction reports a degenerate direction
/// instead of returning noise.
pub const DEGENERATE_NORM_THRESHOLD: f64 = 1e-8;

/// A set of contrastive prompt pairs targeting one layer.
#[derive(Debug, Clone)]
pub struct ContrastPairSet {
    pub pairs: Vec<(PromptTokens, PromptTokens)>,
    pub layer: usize,
}

impl ContrastPairSet {
    pub fn new(pairs: Vec<(PromptTokens, PromptTokens)>, layer: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("contrast pair set is empty".into()));
        }
        Ok(Self { pairs, layer })
    }
}

/// A unit steering direction tied to a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layer: usize,
    pub direction: Vec<f64>,
    /// Magnitude of the mean difference before normalization.
    pub raw_norm: f64,
    pub pair_count: usize,
    pub sign_convention: String,
}

impl SteeringVector {
    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn norm(&self) -> f64 {
        self.direction.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Serialized steering-vector file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringVectorFile {
    pub schema_version: u32,
    pub layer: usize,
    pub dim: usize,
    pub direction: Vec<f64>,
    pub raw_norm: f64,
    pub pair_count: usize,
    pub sign_convention: String,
    pub model_fingerprint: String,
}

impl SteeringVectorFile {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn from_vector(v: &SteeringVector, model_fingerprint: &str) -> Self {
        Self {
            schema_version: Self::SCHEMA_VERSION,
            layer: v.layer,
            dim: v.dim(),
            direction: v.direction.clone(),
            raw_norm: v.raw_norm,
            pair_count: v.pair_count,
            sign_convention: v.sign_convention.clone(),
            model_fingerprint: model_fingerprint.to_string(),
        }
    }

    pub fn into_vector(self) -> SteeringVector {
        SteeringVector {
            layer: self.layer,
            direction: self.direction,
            raw_norm: self.raw_norm,
            pair_count: self.pair_count,
            sign_convention: self.sign_convention,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: Self = serde_json::from_str(&text)?;
        if file.direction.len() != file.dim {
            return Err(Error::Validation(format!(
                "steering vector file dim {} does not match direction length {}",
                file.dim,
                file.direction.len()
            )));
        }
        Ok(file)
    }
}

/// Extracts the steering direction from contrastive pairs.
///
/// `v_raw = mean over pairs of (a_L(x_plus) - a_L(x_minus))`, captured at the
/// final prompt token of the target layer; the result is `v_raw / ||v_raw||`.
pub fn extract_caa<M: SteerableModel>(model: &M, pairs: &ContrastPairSet) -> Result<SteeringVector> {
    let dim = model.hidden_dim();
    let mut acc = vec![0.0; dim];
    for (plus, minus) in &pairs.pairs {
        let a_plus = capture_final(model, plus, pairs.layer)?;
        let a_minus = capture_final(model, minus, pairs.layer)?;
        for ((s, p), m) in acc.iter_mut().zip(&a_plus.values).zip(&a_minus.values) {
            *s += p - m;
        }
    }
    let n = pairs.pairs.len() as f64;
    for s in &mut acc {
        *s /= n;
    }
    let raw_norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if raw_norm < DEGENERATE_NORM_THRESHOLD {
        return Err(Error::DegenerateDirection {
            norm: raw_norm,
            threshold: DEGENERATE_NORM_THRESHOLD,
        });
    }
    let direction: Vec<f64> = acc.iter().map(|v| v / raw_norm).collect();
    Ok(SteeringVector {
        layer: pairs.layer,
        direction,
        raw_norm,
        pair_count: pairs.pairs.len(),
        sign_convention: "plus_minus".to_string(),
    })
}

fn capture_final<M: SteerableModel>(
    model: &M,
    prompt: &PromptTokens,
    layer: usize,
) -> Result<Activation> {
    let mut cap = model.forward_with_capture(prompt, &[layer])?;
    cap.activations
        .remove(&layer)
        .ok_or(Error::InvalidLayer {
            layer,
            count: model.layer_count(),
        })
}

/// Cosine of an activation against a (unit) steering direction.
pub fn alignment_cosine(a: &Activation, v: &SteeringVector) -> Result<f64> {
    if a.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: v.dim(),
            got: a.dim(),
        });
    }
    let norm = a.norm();
    if norm == 0.0 {
        return Err(Error::UndefinedAlignment);
    }
    let dot: f64 = a.values.iter().zip(&v.direction).map(|(x, y)| x * y).sum();
    Ok(dot / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::analytic::{AnalyticConceptLM, CHALLENGE_MARKER, SUPPORT_MARKER};
    use crate::model::Vocab;

    fn marker_prompt(vocab: &Vocab, marker: &str) -> PromptTokens {
        PromptTokens::new(vec![
            vocab.id_of("w3").unwrap(),
            vocab.id_of(marker).unwrap(),
        ])
        .unwrap()
    }

    fn oracle_pairs(model: &AnalyticConceptLM, n: usize) -> ContrastPairSet {
        let pairs = (0..n)
            .map(|_| {
                (
                    marker_prompt(model.vocab(), SUPPORT_MARKER),
                    marker_prompt(model.vocab(), CHALLENGE_MARKER),
                )
            })
            .collect();
        ContrastPairSet::new(pairs, 0).unwrap()
    }

    #[test]
    fn analytic_pairs_recover_planted_direction() {
        // Each pair difference is (b+u) - (b-u) = 2u, so the direction is u.
        let m = AnalyticConceptLM::default_oracle(8);
        let v = extract_caa(&m, &oracle_pairs(&m, 3)).unwrap();
        let cos: f64 = v
            .direction
            .iter()
            .zip(m.planted_direction())
            .map(|(a, b)| a * b)
            .sum();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!((v.raw_norm - 2.0).abs() < 1e-12);
        assert_eq!(v.pair_count, 3);
        assert!((v.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn identical_pair_is_degenerate() {
        let m = AnalyticConceptLM::default_oracle(8);
        let p = marker_prompt(m.vocab(), SUPPORT_MARKER);
        let set = ContrastPairSet::new(vec![(p.clone(), p)], 0).unwrap();
        assert!(matches!(
            extract_caa(&m, &set),
            Err(Error::DegenerateDirection { .. })
        ));
    }

    #[test]
    fn swapping_pairs_negates_exactly() {
        let m = AnalyticConceptLM::default_oracle(8);
        let set = oracle_pairs(&m, 2);
        let swapped = ContrastPairSet::new(
            set.pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
            set.layer,
        )
        .unwrap();
        let v = extract_caa(&m, &set).unwrap();
        let w = extract_caa(&m, &swapped).unwrap();
        for (a, b) in v.direction.iter().zip(&w.direction) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn extraction_is_order_free() {
        let m = AnalyticConceptLM::default_oracle(8);
        let mut pairs = oracle_pairs(&m, 4).pairs;
        let v = extract_caa(&m, &ContrastPairSet::new(pairs.clone(), 0).unwrap()).unwrap();
        pairs.reverse();
        let w = extract_caa(&m, &ContrastPairSet::new(pairs, 0).unwrap()).unwrap();
        for (a, b) in v.direction.iter().zip(&w.direction) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_endpoints() {
        let v = SteeringVector {
            layer: 0,
            direction: vec![1.0, 0.0],
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        let parallel = Activation::new(vec![2.0, 0.0]);
        let orthogonal = Activation::new(vec![0.0, 5.0]);
        let anti = Activation::new(vec![-3.0, 0.0]);
        assert!((alignment_cosine(&parallel, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!(alignment_cosine(&orthogonal, &v).unwrap().abs() < 1e-12);
        assert!((alignment_cosine(&anti, &v).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            alignment_cosine(&Activation::new(vec![0.0, 0.0]), &v),
            Err(Error::UndefinedAlignment)
        ));
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let v = SteeringVector {
            layer: 0,
            direction: vec![0.6, 0.8],
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        let a = Activation::new(vec![1.3, -0.4]);
        let base = alignment_cosine(&a, &v).unwrap();
        for c in [0.5, 2.0, 117.0] {
            let scaled = Activation::new(a.values.iter().map(|x| x * c).collect());
            assert!((alignment_cosine(&scaled, &v).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vector.json");
        let m = AnalyticConceptLM::default_oracle(6);
        let v = extract_caa(&m, &oracle_pairs(&m, 2)).unwrap();
        let file = SteeringVectorFile::from_vector(&v, &m.fingerprint());
        file.save(&path).unwrap();
        let loaded = SteeringVectorFile::load(&path).unwrap();
        assert_eq!(loaded.into_vector(), v);
    }
}
