//! Small trainable decoder-only transformer backend.
//!
//! Pre-norm blocks (LayerNorm -> causal multi-head attention -> residual,
//! LayerNorm -> GELU MLP -> residual), learned token and position embeddings,
//! separate unembedding matrix. All arithmetic is f64. The residual-stream
//! output of every block is capturable, and an additive intervention can be
//! applied at one block's output for generated positions.
//!
//! Weights live in a single flat buffer with a named segment layout so the
//! optimizer and the checkpoint format can treat them uniformly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    Activation, CaptureResult, InterventionSpec, PromptTokens, SteerableModel, TokenId, Vocab,
};

/// Architecture parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            context: 32,
        }
    }
}

impl TinyConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::InvalidParameter("architecture sizes must be > 0".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    pub(crate) ln1_g: Range<usize>,
    pub(crate) ln1_b: Range<usize>,
    pub(crate) wq: Range<usize>,
    pub(crate) wk: Range<usize>,
    pub(crate) wv: Range<usize>,
    pub(crate) wo: Range<usize>,
    pub(crate) ln2_g: Range<usize>,
    pub(crate) ln2_b: Range<usize>,
    pub(crate) w1: Range<usize>,
    pub(crate) w2: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) ln_f_g: Range<usize>,
    pub(crate) ln_f_b: Range<usize>,
    pub(crate) unembed: Range<usize>,
    pub(crate) total: usize,
}

impl Offsets {
    fn new(cfg: &TinyConfig, vocab_size: usize) -> Self {
        let d = cfg.d_model;
        let mut cursor = 0;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let tok_emb = take(vocab_size * d);
        let pos_emb = take(cfg.context * d);
        let blocks = (0..cfg.layers)
            .map(|_| BlockOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(cfg.d_ff * d),
                w2: take(d * cfg.d_ff),
            })
            .collect();
        let ln_f_g = take(d);
        let ln_f_b = take(d);
        let unembed = take(vocab_size * d);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_g,
            ln_f_b,
            unembed,
            total: cursor,
        }
    }

    /// Named segments in layout order, for checkpoints and reports.
    fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1_g"), b.ln1_g.clone()));
            out.push((format!("block{i}.ln1_b"), b.ln1_b.clone()));
            out.push((format!("block{i}.wq"), b.wq.clone()));
            out.push((format!("block{i}.wk"), b.wk.clone()));
            out.push((format!("block{i}.wv"), b.wv.clone()));
            out.push((format!("block{i}.wo"), b.wo.clone()));
            out.push((format!("block{i}.ln2_g"), b.ln2_g.clone()));
            out.push((format!("block{i}.ln2_b"), b.ln2_b.clone()));
            out.push((format!("block{i}.w1"), b.w1.clone()));
            out.push((format!("block{i}.w2"), b.w2.clone()));
        }
        out.push(("ln_f_g".to_string(), self.ln_f_g.clone()));
        out.push(("ln_f_b".to_string(), self.ln_f_b.clone()));
        out.push(("unembed".to_string(), self.unembed.clone()));
        out
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// `out = W x` for row-major `w: [rows, cols]`.
#[inline]
pub(crate) fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

pub(crate) fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * inv + beta[i];
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// The transformer backend.
#[derive(Debug, Clone)]
pub struct TinyTransformerLM {
    cfg: TinyConfig,
    vocab: Vocab,
    pub(crate) params: Vec<f64>,
    pub(crate) offsets: Offsets,
}

/// Per-layer key/value cache, one row per processed position.
#[derive(Debug, Clone, Default)]
struct LayerKv {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Incremental decode state.
#[derive(Debug, Clone)]
pub struct TinyState {
    tokens: Vec<TokenId>,
    prompt_end: usize,
    processed: usize,
    cache: Vec<LayerKv>,
    next_logits: Option<Vec<f64>>,
}

impl TinyTransformerLM {
    /// Fresh model with seeded Gaussian(0, 0.02) weights. Attention output
    /// and MLP down projections start at zero; LayerNorm gains start at one.
    pub fn init(cfg: TinyConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.is_empty() {
            return Err(Error::Validation("empty vocab".into()));
        }
        let offsets = Offsets::new(&cfg, vocab.len());
        let mut params = vec![0.0; offsets.total];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid");
        for r in [&offsets.tok_emb, &offsets.pos_emb, &offsets.unembed] {
            for p in &mut params[r.clone()] {
                *p = normal.sample(&mut rng);
            }
        }
        // Residual-output projections get the variance scaled down by depth.
        let scaled = Normal::new(0.0, 0.02 / (2.0 * cfg.layers as f64).sqrt()).expect("valid");
        for b in &offsets.blocks {
            for r in [&b.wq, &b.wk, &b.wv, &b.w1] {
                for p in &mut params[r.clone()] {
                    *p = normal.sample(&mut rng);
                }
            }
            for r in [&b.wo, &b.w2] {
                for p in &mut params[r.clone()] {
                    *p = scaled.sample(&mut rng);
                }
            }
            params[b.ln1_g.clone()].fill(1.0);
            params[b.ln2_g.clone()].fill(1.0);
        }
        params[offsets.ln_f_g.clone()].fill(1.0);
        Ok(Self {
            cfg,
            vocab,
            params,
            offsets,
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    #[inline]
    fn seg(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    /// Runs one position through the stack, appending K/V to `cache`.
    ///
    /// Returns the residual-stream output of the final block (pre final-LN).
    /// `on_block_out` observes each block's residual output before any
    /// steering is added; steering under `spec` applies when
    /// `pos > prompt_end`.
    fn process_position(
        &self,
        cache: &mut [LayerKv],
        pos: usize,
        token: TokenId,
        prompt_end: usize,
        spec: Option<&InterventionSpec>,
        mut on_block_out: Option<&mut dyn FnMut(usize, &[f64])>,
    ) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let hd = self.cfg.head_dim();
        if pos >= self.cfg.context {
            return Err(Error::PromptTooLong {
                len: pos + 1,
                window: self.cfg.context,
            });
        }
        if token >= self.vocab.len() {
            return Err(Error::UnknownToken {
                id: token,
                size: self.vocab.len(),
            });
        }
        let tok_emb = &self.seg(&self.offsets.tok_emb)[token * d..(token + 1) * d];
        let pos_emb = &self.seg(&self.offsets.pos_emb)[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = tok_emb.iter().zip(pos_emb).map(|(a, b)| a + b).collect();

        let mut xn = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut ctx = vec![0.0; d];
        let mut attn_out = vec![0.0; d];
        let mut h_pre = vec![0.0; self.cfg.d_ff];
        let mut ff_out = vec![0.0; d];
        let scale = 1.0 / (hd as f64).sqrt();

        for (layer, b) in self.offsets.blocks.iter().enumerate() {
            layer_norm(&x, self.seg(&b.ln1_g), self.seg(&b.ln1_b), &mut xn);
            matvec(self.seg(&b.wq), &xn, &mut q);
            matvec(self.seg(&b.wk), &xn, &mut k);
            matvec(self.seg(&b.wv), &xn, &mut v);
            let lk = &mut cache[layer];
            lk.k.extend_from_slice(&k);
            lk.v.extend_from_slice(&v);
            let n_pos = lk.k.len() / d;
            debug_assert_eq!(n_pos, pos + 1);

            ctx.fill(0.0);
            for h in 0..heads {
                let hr = h * hd..(h + 1) * hd;
                let qh = &q[hr.clone()];
                // Causal by construction: the cache only holds positions <= pos.
                let mut scores = Vec::with_capacity(n_pos);
                for j in 0..n_pos {
                    let kh = &lk.k[j * d + hr.start..j * d + hr.end];
                    scores.push(dot(qh, kh) * scale);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / denom;
                    let vh = &lk.v[j * d + hr.start..j * d + hr.end];
                    axpy(&mut ctx[hr.clone()], w, vh);
                }
            }
            matvec(self.seg(&b.wo), &ctx, &mut attn_out);
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }

            layer_norm(&x, self.seg(&b.ln2_g), self.seg(&b.ln2_b), &mut xn);
            matvec(self.seg(&b.w1), &xn, &mut h_pre);
            let h_act: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
            matvec(self.seg(&b.w2), &h_act, &mut ff_out);
            for (xi, fi) in x.iter_mut().zip(&ff_out) {
                *xi += fi;
            }

            if let Some(cb) = on_block_out.as_deref_mut() {
                cb(layer, &x);
            }
            if pos > prompt_end {
                if let Some(s) = spec {
                    if s.layer == layer && s.alpha != 0.0 {
                        for (xi, vi) in x.iter_mut().zip(&s.direction.direction) {
                            *xi += s.alpha * vi;
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    pub(crate) fn logits_from_hidden(&self, x: &[f64]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let mut xn = vec![0.0; d];
        layer_norm(
            x,
            self.seg(&self.offsets.ln_f_g),
            self.seg(&self.offsets.ln_f_b),
            &mut xn,
        );
        let mut logits = vec![0.0; self.vocab.len()];
        matvec(self.seg(&self.offsets.unembed), &xn, &mut logits);
        logits
    }

    fn fresh_cache(&self) -> Vec<LayerKv> {
        vec![LayerKv::default(); self.cfg.layers]
    }

    fn check_prompt(&self, prompt: &PromptTokens) -> Result<()> {
        prompt.validate_against(&self.vocab)?;
        if prompt.ids.len() > self.cfg.context {
            return Err(Error::PromptTooLong {
                len: prompt.ids.len(),
                window: self.cfg.context,
            });
        }
        Ok(())
    }
}

impl SteerableModel for TinyTransformerLM {
    type State = TinyState;

    fn backend_id(&self) -> &'static str {
        "tiny-transformer"
    }

    fn layer_count(&self) -> usize {
        self.cfg.layers
    }

    fn hidden_dim(&self) -> usize {
        self.cfg.d_model
    }

    fn context_window(&self) -> usize {
        self.cfg.context
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"tiny-transformer-v1");
        hasher.update(serde_json::to_vec(&self.cfg).expect("serializable"));
        for t in self.vocab.tokens() {
            hasher.update(t.as_bytes());
            hasher.update([0]);
        }
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }

    fn forward_with_capture(&self, prompt: &PromptTokens, layers: &[usize]) -> Result<CaptureResult> {
        self.check_prompt(prompt)?;
        for &layer in layers {
            if layer >= self.cfg.layers {
                return Err(Error::InvalidLayer {
                    layer,
                    count: self.cfg.layers,
                });
            }
        }
        let mut cache = self.fresh_cache();
        let mut activations = std::collections::HashMap::new();
        let mut final_hidden = Vec::new();
        for (pos, &tok) in prompt.ids.iter().enumerate() {
            let at_end = pos == prompt.prompt_end;
            let mut hook = |layer: usize, x: &[f64]| {
                if at_end && layers.contains(&layer) {
                    activations.insert(layer, Activation::new(x.to_vec()));
                }
            };
            let x = self.process_position(
                &mut cache,
                pos,
                tok,
                prompt.prompt_end,
                None,
                Some(&mut hook),
            )?;
            if at_end {
                final_hidden = x;
            }
        }
        Ok(CaptureResult {
            logits: self.logits_from_hidden(&final_hidden),
            activations,
        })
    }

    fn capture_positions(
        &self,
        prompt: &PromptTokens,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<Activation>> {
        self.check_prompt(prompt)?;
        if layer >= self.cfg.layers {
            return Err(Error::InvalidLayer {
                layer,
                count: self.cfg.layers,
            });
        }
        for &p in positions {
            if p >= prompt.ids.len() {
                return Err(Error::Validation(format!("position {p} out of range")));
            }
        }
        let mut cache = self.fresh_cache();
        let mut by_pos: std::collections::HashMap<usize, Activation> = std::collections::HashMap::new();
        let max_pos = *positions.iter().max().expect("non-empty positions");
        for (pos, &tok) in prompt.ids.iter().enumerate().take(max_pos + 1) {
            let wanted = positions.contains(&pos);
            let mut hook = |l: usize, x: &[f64]| {
                if wanted && l == layer {
                    by_pos.insert(pos, Activation::new(x.to_vec()));
                }
            };
            self.process_position(
                &mut cache,
                pos,
                tok,
                prompt.prompt_end,
                None,
                Some(&mut hook),
            )?;
        }
        Ok(positions
            .iter()
            .map(|p| by_pos[p].clone())
            .collect())
    }

    fn begin_decode(&self, prompt: &PromptTokens, spec: Option<&InterventionSpec>) -> Result<Self::State> {
        self.check_prompt(prompt)?;
        if let Some(s) = spec {
            s.validate_for(self.cfg.layers, self.cfg.d_model)?;
        }
        Ok(TinyState {
            tokens: prompt.ids.clone(),
            prompt_end: prompt.prompt_end,
            processed: 0,
            cache: self.fresh_cache(),
            next_logits: None,
        })
    }

    fn step_logits(&self, state: &mut Self::State, spec: Option<&InterventionSpec>) -> Result<Vec<f64>> {
        if let Some(s) = spec {
            s.validate_for(self.cfg.layers, self.cfg.d_model)?;
        }
        while state.processed < state.tokens.len() {
            let pos = state.processed;
            let tok = state.tokens[pos];
            let x = self.process_position(&mut state.cache, pos, tok, state.prompt_end, spec, None)?;
            state.next_logits = Some(self.logits_from_hidden(&x));
            state.processed += 1;
        }
        state
            .next_logits
            .clone()
            .ok_or_else(|| Error::Validation("empty decode state".into()))
    }

    fn push_token(&self, state: &mut Self::State, token: TokenId) -> Result<()> {
        if token >= self.vocab.len() {
            return Err(Error::UnknownToken {
                id: token,
                size: self.vocab.len(),
            });
        }
        state.tokens.push(token);
        Ok(())
    }

    fn history<'a>(&self, state: &'a Self::State) -> &'a [TokenId] {
        &state.tokens
    }
}

/// Versioned JSON weight container.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub arch: TinyConfig,
    pub vocab: Vec<String>,
    pub weights: BTreeMap<String, Vec<f64>>,
    /// Free-form provenance: seeds and recipe of whatever produced the weights.
    pub seed_provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn from_model(model: &TinyTransformerLM, provenance: BTreeMap<String, String>) -> Self {
        let weights = model
            .offsets
            .named()
            .into_iter()
            .map(|(name, r)| (name, model.params[r].to_vec()))
            .collect();
        Self {
            schema_version: Self::SCHEMA_VERSION,
            arch: model.cfg.clone(),
            vocab: model.vocab.tokens().to_vec(),
            weights,
            seed_provenance: provenance,
        }
    }

    pub fn into_model(self) -> Result<TinyTransformerLM> {
        if self.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint schema version {}",
                self.schema_version
            )));
        }
        let vocab = Vocab::new(self.vocab)?;
        let offsets = Offsets::new(&self.arch, vocab.len());
        let mut params = vec![0.0; offsets.total];
        for (name, r) in offsets.named() {
            let seg = self
                .weights
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint missing segment {name:?}")))?;
            if seg.len() != r.len() {
                return Err(Error::Validation(format!(
                    "segment {name:?} has {} values, expected {}",
                    seg.len(),
                    r.len()
                )));
            }
            params[r].copy_from_slice(seg);
        }
        Ok(TinyTransformerLM {
            cfg: self.arch,
            vocab,
            params,
            offsets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_step_with_intervention;
    use crate::steering::SteeringVector;
    use std::sync::Arc;

    fn small_model() -> TinyTransformerLM {
        let vocab = Vocab::new(["<eos>", "a", "b", "c", "d"]).unwrap();
        let cfg = TinyConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            context: 12,
        };
        TinyTransformerLM::init(cfg, vocab, 11).unwrap()
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let m = small_model();
        let p = PromptTokens::new(vec![1, 2, 3]).unwrap();
        let a = m.forward_with_capture(&p, &[0, 1]).unwrap();
        let b = m.forward_with_capture(&p, &[0, 1]).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.activations[&1].values, b.activations[&1].values);
    }

    #[test]
    fn decode_matches_capture_logits() {
        let m = small_model();
        let p = PromptTokens::new(vec![1, 3, 2, 4]).unwrap();
        let cap = m.forward_with_capture(&p, &[]).unwrap();
        let mut st = m.begin_decode(&p, None).unwrap();
        let logits = m.step_logits(&mut st, None).unwrap();
        assert_eq!(cap.logits, logits);
    }

    #[test]
    fn causality_prefix_logits_unchanged() {
        // Two histories that differ only at the last position must agree on
        // all next-token logits computed before that position.
        let m = small_model();
        let a = PromptTokens::new(vec![1, 2, 3, 4]).unwrap();
        let b = PromptTokens::new(vec![1, 2, 3, 1]).unwrap();
        for cut in 1..=3 {
            let pa = PromptTokens::new(a.ids[..cut].to_vec()).unwrap();
            let pb = PromptTokens::new(b.ids[..cut].to_vec()).unwrap();
            let la = m.forward_with_capture(&pa, &[]).unwrap().logits;
            let lb = m.forward_with_capture(&pb, &[]).unwrap().logits;
            assert_eq!(la, lb, "prefix of length {cut} diverged");
        }
    }

    #[test]
    fn zero_alpha_is_exact_identity() {
        let m = small_model();
        let p = PromptTokens::new(vec![1, 2]).unwrap();
        let v = SteeringVector {
            layer: 1,
            direction: {
                let mut d = vec![0.0; 16];
                d[0] = 1.0;
                d
            },
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        let spec = InterventionSpec::new(0.0, Arc::new(v));
        let mut plain = m.begin_decode(&p, None).unwrap();
        let mut steered = m.begin_decode(&p, Some(&spec)).unwrap();
        for _ in 0..4 {
            let a = forward_step_with_intervention(&m, &mut plain, None).unwrap();
            let b = forward_step_with_intervention(&m, &mut steered, Some(&spec)).unwrap();
            assert_eq!(a, b);
            m.push_token(&mut plain, 2).unwrap();
            m.push_token(&mut steered, 2).unwrap();
        }
    }

    #[test]
    fn nonzero_alpha_changes_generated_positions_only() {
        let m = small_model();
        let p = PromptTokens::new(vec![1, 2]).unwrap();
        let v = SteeringVector {
            layer: 0,
            direction: {
                let mut d = vec![0.0; 16];
                d[3] = 1.0;
                d
            },
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        let spec = InterventionSpec::new(2.5, Arc::new(v));
        // Logits at the prompt boundary are untouched (no generated position yet).
        let mut plain = m.begin_decode(&p, None).unwrap();
        let mut steered = m.begin_decode(&p, Some(&spec)).unwrap();
        let a = m.step_logits(&mut plain, None).unwrap();
        let b = m.step_logits(&mut steered, Some(&spec)).unwrap();
        assert_eq!(a, b);
        // After one generated token the distributions must differ.
        m.push_token(&mut plain, 3).unwrap();
        m.push_token(&mut steered, 3).unwrap();
        let a = m.step_logits(&mut plain, None).unwrap();
        let b = m.step_logits(&mut steered, Some(&spec)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn prompt_longer_than_context_is_rejected() {
        let m = small_model();
        let p = PromptTokens::new(vec![1; 13]).unwrap();
        assert!(matches!(
            m.forward_with_capture(&p, &[]),
            Err(Error::PromptTooLong { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = small_model();
        let ck = Checkpoint::from_model(&m, BTreeMap::new());
        ck.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(m.fingerprint(), restored.fingerprint());
        let p = PromptTokens::new(vec![2, 4, 1]).unwrap();
        assert_eq!(
            m.forward_with_capture(&p, &[]).unwrap().logits,
            restored.forward_with_capture(&p, &[]).unwrap().logits
        );
    }
}
