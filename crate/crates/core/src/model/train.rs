//! Toy corpus with a planted stance-dependent bias, and the Adam trainer
//! that fits [`TinyTransformerLM`] to it.
//!
//! Training lines follow the template `Q <topic> <marker> A <answer>`. Every
//! topic has a fixed true answer; a `SUPPORT` marker emits the myth answer
//! with probability `p_bias` and a `CHALLENGE` marker emits the true answer
//! with probability `p_bias`, so the marker plants a controllable
//! confirmation-style bias for extraction and steering to find. `NEUTRAL`
//! lines emit either answer evenly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tiny::{self, TinyConfig, TinyTransformerLM};
use crate::model::{PromptTokens, SteerableModel, TokenId, Vocab};
use crate::seed;

pub const EOS_TOKEN: &str = "<eos>";
pub const QUESTION_TOKEN: &str = "Q";
pub const ANSWER_SEP_TOKEN: &str = "A";
pub const YES_TOKEN: &str = "YES";
pub const NO_TOKEN: &str = "NO";
pub const SUPPORT_MARKER: &str = "SUPPORT";
pub const CHALLENGE_MARKER: &str = "CHALLENGE";
pub const NEUTRAL_MARKER: &str = "NEUTRAL";

/// Stance marker of a toy prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Marker {
    Support,
    Challenge,
    Neutral,
}

impl Marker {
    pub fn token(self) -> &'static str {
        match self {
            Marker::Support => SUPPORT_MARKER,
            Marker::Challenge => CHALLENGE_MARKER,
            Marker::Neutral => NEUTRAL_MARKER,
        }
    }
}

/// Corpus shape: number of topics, bias strength, share of neutral lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub topics: usize,
    pub p_bias: f64,
    pub neutral_share: f64,
    /// Fraction of topics whose true answer is YES.
    pub truth_yes_fraction: f64,
    /// Fraction of biased (non-neutral) lines carrying the SUPPORT marker.
    /// Off-balance on purpose: with unequal marker exposure each topic's
    /// answer marginal leans toward its myth, giving the topic embedding a
    /// learnable main effect that pulls the answer circuitry out of the
    /// pure-XOR plateau without unbalancing the truth assignment.
    pub support_share: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            topics: 48,
            p_bias: 0.8,
            neutral_share: 1.0 / 3.0,
            truth_yes_fraction: 0.5,
            support_share: 0.75,
        }
    }
}

/// The template corpus. Owns the vocab shared with models trained on it.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    cfg: ToyCorpusConfig,
    vocab: Vocab,
    q_id: TokenId,
    a_id: TokenId,
    yes_id: TokenId,
    no_id: TokenId,
    eos_id: TokenId,
    support_id: TokenId,
    challenge_id: TokenId,
    neutral_id: TokenId,
    topic_ids: Vec<TokenId>,
}

/// One held-out evaluation prompt with its ground-truth answer token.
#[derive(Debug, Clone)]
pub struct ToyEvalItem {
    pub topic: usize,
    pub marker: Marker,
    pub prompt: PromptTokens,
    pub truth: TokenId,
    pub myth: TokenId,
}

impl ToyCorpus {
    pub fn new(cfg: ToyCorpusConfig) -> Result<Self> {
        if cfg.topics == 0 {
            return Err(Error::InvalidParameter("topics must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&cfg.p_bias) {
            return Err(Error::InvalidParameter("p_bias must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&cfg.neutral_share) {
            return Err(Error::InvalidParameter("neutral_share must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&cfg.truth_yes_fraction) {
            return Err(Error::InvalidParameter("truth_yes_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&cfg.support_share) {
            return Err(Error::InvalidParameter("support_share must be in [0, 1]".into()));
        }
        let mut tokens = vec![
            EOS_TOKEN.to_string(),
            QUESTION_TOKEN.to_string(),
            ANSWER_SEP_TOKEN.to_string(),
            YES_TOKEN.to_string(),
            NO_TOKEN.to_string(),
            SUPPORT_MARKER.to_string(),
            CHALLENGE_MARKER.to_string(),
            NEUTRAL_MARKER.to_string(),
        ];
        for i in 0..cfg.topics {
            tokens.push(format!("t{i}"));
        }
        let vocab = Vocab::new(tokens)?;
        let topic_ids = (0..cfg.topics)
            .map(|i| vocab.id_of(&format!("t{i}")).unwrap())
            .collect();
        Ok(Self {
            q_id: vocab.id_of(QUESTION_TOKEN).unwrap(),
            a_id: vocab.id_of(ANSWER_SEP_TOKEN).unwrap(),
            yes_id: vocab.id_of(YES_TOKEN).unwrap(),
            no_id: vocab.id_of(NO_TOKEN).unwrap(),
            eos_id: vocab.id_of(EOS_TOKEN).unwrap(),
            support_id: vocab.id_of(SUPPORT_MARKER).unwrap(),
            challenge_id: vocab.id_of(CHALLENGE_MARKER).unwrap(),
            neutral_id: vocab.id_of(NEUTRAL_MARKER).unwrap(),
            topic_ids,
            vocab,
            cfg,
        })
    }

    pub fn config(&self) -> &ToyCorpusConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn yes_id(&self) -> TokenId {
        self.yes_id
    }

    pub fn no_id(&self) -> TokenId {
        self.no_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    /// Fixed truth assignment: the first `truth_yes_fraction` of topics
    /// answer YES, the rest NO.
    pub fn true_answer(&self, topic: usize) -> TokenId {
        let yes_topics = (self.cfg.truth_yes_fraction * self.cfg.topics as f64).round() as usize;
        if topic < yes_topics {
            self.yes_id
        } else {
            self.no_id
        }
    }

    pub fn myth_answer(&self, topic: usize) -> TokenId {
        if self.true_answer(topic) == self.yes_id {
            self.no_id
        } else {
            self.yes_id
        }
    }

    fn marker_id(&self, marker: Marker) -> TokenId {
        match marker {
            Marker::Support => self.support_id,
            Marker::Challenge => self.challenge_id,
            Marker::Neutral => self.neutral_id,
        }
    }

    /// Sequence length of every training line (EOS included).
    pub const SEQ_LEN: usize = 6;

    /// Samples one training sequence `[Q, topic, marker, A, answer, EOS]`.
    pub fn sample_sequence(&self, rng: &mut ChaCha12Rng) -> Vec<TokenId> {
        let topic = rng.gen_range(0..self.cfg.topics);
        let marker = if rng.gen::<f64>() < self.cfg.neutral_share {
            Marker::Neutral
        } else if rng.gen::<f64>() < self.cfg.support_share {
            Marker::Support
        } else {
            Marker::Challenge
        };
        let answer = self.sample_answer(topic, marker, rng);
        vec![
            self.q_id,
            self.topic_ids[topic],
            self.marker_id(marker),
            self.a_id,
            answer,
            self.eos_id,
        ]
    }

    /// Answer emission rule for a (topic, marker) pair.
    pub fn sample_answer(&self, topic: usize, marker: Marker, rng: &mut ChaCha12Rng) -> TokenId {
        let truth = self.true_answer(topic);
        let myth = self.myth_answer(topic);
        let p: f64 = rng.gen();
        match marker {
            Marker::Support => {
                if p < self.cfg.p_bias {
                    myth
                } else {
                    truth
                }
            }
            Marker::Challenge => {
                if p < self.cfg.p_bias {
                    truth
                } else {
                    myth
                }
            }
            Marker::Neutral => {
                if p < 0.5 {
                    truth
                } else {
                    myth
                }
            }
        }
    }

    /// Emits `n` plain-text corpus lines.
    pub fn generate_lines(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                self.sample_sequence(&mut rng)
                    .iter()
                    .map(|&id| self.vocab.token_of(id).unwrap())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }

    /// Answering prompt `[Q, topic, marker, A]`.
    pub fn prompt(&self, topic: usize, marker: Marker) -> PromptTokens {
        PromptTokens::new(vec![
            self.q_id,
            self.topic_ids[topic],
            self.marker_id(marker),
            self.a_id,
        ])
        .expect("non-empty")
    }

    /// A held-out evaluation set: fresh seeded topic draws under one marker.
    pub fn eval_set(&self, n: usize, marker: Marker, seed_value: u64) -> Vec<ToyEvalItem> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed_value);
        (0..n)
            .map(|_| {
                let topic = rng.gen_range(0..self.cfg.topics);
                ToyEvalItem {
                    topic,
                    marker,
                    prompt: self.prompt(topic, marker),
                    truth: self.true_answer(topic),
                    myth: self.myth_answer(topic),
                }
            })
            .collect()
    }
}

/// Optimizer settings. The defaults meet the separation criterion on the
/// default corpus in a couple of minutes of single-core CPU time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Held-out prompts per biased marker for the separation check.
    pub eval_size: usize,
    /// Required challenge-minus-support accuracy gap, in fraction points.
    pub separation_target: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 64,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
            eval_size: 500,
            separation_target: 0.20,
        }
    }
}

/// What training produced, including whether the separation criterion held.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Held-out accuracy (greedy answer == true answer) under SUPPORT prompts.
    pub support_accuracy: f64,
    /// Same under CHALLENGE prompts.
    pub challenge_accuracy: f64,
    /// challenge_accuracy - support_accuracy.
    pub separation: f64,
    pub reached_separation: bool,
    pub eval_size: usize,
}

pub struct TrainOutcome {
    pub model: TinyTransformerLM,
    pub report: TrainReport,
}

/// Greedy YES/NO answer at the `A` position.
pub fn greedy_answer(model: &TinyTransformerLM, corpus: &ToyCorpus, prompt: &PromptTokens) -> Result<TokenId> {
    let cap = model.forward_with_capture(prompt, &[])?;
    Ok(if cap.logits[corpus.yes_id] >= cap.logits[corpus.no_id] {
        corpus.yes_id
    } else {
        corpus.no_id
    })
}

/// Held-out greedy accuracy under one marker.
pub fn heldout_accuracy(
    model: &TinyTransformerLM,
    corpus: &ToyCorpus,
    marker: Marker,
    n: usize,
    seed_value: u64,
) -> Result<f64> {
    let items = corpus.eval_set(n, marker, seed_value);
    let mut correct = 0usize;
    for item in &items {
        if greedy_answer(model, corpus, &item.prompt)? == item.truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Trains a fresh model on the toy corpus with Adam and reports the
/// marker-conditioned separation on held-out prompts. Failing to reach the
/// separation target is reported in the outcome, not raised as an error.
pub fn train_toy(arch: TinyConfig, corpus: &ToyCorpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::InvalidParameter("steps and batch_size must be > 0".into()));
    }
    let mut model = TinyTransformerLM::init(
        arch,
        corpus.vocab().clone(),
        seed::derive(cfg.seed, &[0x696e_6974]),
    )?;
    let total = model.offsets.total;
    let mut grads = vec![0.0; total];
    let mut m1 = vec![0.0; total];
    let mut m2 = vec![0.0; total];
    let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(cfg.seed, &[0x6261_7463]));
    let mut tape = Tape::new(model.config(), ToyCorpus::SEQ_LEN, model.vocab().len());
    let mut last_loss = f64::NAN;

    for step in 1..=cfg.steps {
        grads.fill(0.0);
        let mut loss_sum = 0.0;
        let predictions = (cfg.batch_size * (ToyCorpus::SEQ_LEN - 1)) as f64;
        for _ in 0..cfg.batch_size {
            let seq = corpus.sample_sequence(&mut rng);
            loss_sum += sequence_forward_backward(&model, &seq, &mut grads, 1.0 / predictions, &mut tape);
        }
        last_loss = loss_sum / predictions;

        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for i in 0..total {
            let g = grads[i];
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            model.params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }

    let support_accuracy = heldout_accuracy(
        &model,
        corpus,
        Marker::Support,
        cfg.eval_size,
        seed::derive(cfg.seed, &[0x6576, 1]),
    )?;
    let challenge_accuracy = heldout_accuracy(
        &model,
        corpus,
        Marker::Challenge,
        cfg.eval_size,
        seed::derive(cfg.seed, &[0x6576, 2]),
    )?;
    let separation = challenge_accuracy - support_accuracy;
    let report = TrainReport {
        steps: cfg.steps,
        final_loss: last_loss,
        support_accuracy,
        challenge_accuracy,
        separation,
        reached_separation: separation >= cfg.separation_target,
        eval_size: cfg.eval_size,
    };
    Ok(TrainOutcome { model, report })
}

/// Reusable per-sequence activation tape.
struct Tape {
    layers: Vec<LayerTape>,
    x0: Vec<f64>,
    xnf: Vec<f64>,
    lnf_inv: Vec<f64>,
    // backward scratch
    dx: Vec<f64>,
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dctx: Vec<f64>,
    probs: Vec<f64>,
}

struct LayerTape {
    xn1_hat: Vec<f64>,
    ln1_inv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    xn2_hat: Vec<f64>,
    ln2_inv: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    x_out: Vec<f64>,
}

impl Tape {
    fn new(cfg: &TinyConfig, t: usize, vocab: usize) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|_| LayerTape {
                xn1_hat: vec![0.0; t * d],
                ln1_inv: vec![0.0; t],
                q: vec![0.0; t * d],
                k: vec![0.0; t * d],
                v: vec![0.0; t * d],
                attn: vec![0.0; cfg.heads * t * t],
                ctx: vec![0.0; t * d],
                x_mid: vec![0.0; t * d],
                xn2_hat: vec![0.0; t * d],
                ln2_inv: vec![0.0; t],
                h_pre: vec![0.0; t * cfg.d_ff],
                h_act: vec![0.0; t * cfg.d_ff],
                x_out: vec![0.0; t * d],
            })
            .collect();
        Self {
            layers,
            x0: vec![0.0; t * d],
            xnf: vec![0.0; t * d],
            lnf_inv: vec![0.0; t],
            dx: vec![0.0; t * d],
            dq: vec![0.0; t * d],
            dk: vec![0.0; t * d],
            dv: vec![0.0; t * d],
            dctx: vec![0.0; t * d],
            probs: vec![0.0; vocab],
        }
    }
}

/// Normalizes `x` into `hat` (pre-gain) and returns 1/std.
fn ln_forward_hat(x: &[f64], hat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + tiny::LN_EPS).sqrt();
    for (h, &xi) in hat.iter_mut().zip(x) {
        *h = (xi - mean) * inv;
    }
    inv
}

/// LayerNorm backward given the stored normalized input.
/// Accumulates dgamma/dbeta and writes dx.
fn ln_backward(
    dy: &[f64],
    hat: &[f64],
    inv: f64,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_hat = 0.0;
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * hat[i];
        dbeta[i] += dy[i];
        let dxhat = dy[i] * gamma[i];
        sum_dxhat += dxhat;
        sum_dxhat_hat += dxhat * hat[i];
    }
    for i in 0..dy.len() {
        let dxhat = dy[i] * gamma[i];
        dx[i] = inv * (dxhat - sum_dxhat / n - hat[i] * sum_dxhat_hat / n);
    }
}

/// Accumulates `dw += dy (outer) x` and `dx += W^T dy` for row-major W.
fn matvec_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    for (o, dyo) in dy.iter().enumerate() {
        if *dyo != 0.0 {
            tiny::axpy(&mut dw[o * cols..(o + 1) * cols], *dyo, x);
        }
    }
    if let Some(dx) = dx {
        for (o, dyo) in dy.iter().enumerate() {
            if *dyo != 0.0 {
                tiny::axpy(dx, *dyo, &w[o * cols..(o + 1) * cols]);
            }
        }
    }
}

/// Full next-token cross-entropy forward/backward for one sequence.
/// Gradients scale by `scale` (1 / total predictions in the batch) and
/// accumulate into `grads`. Returns the summed CE over the sequence's
/// prediction positions.
fn sequence_forward_backward(
    model: &TinyTransformerLM,
    seq: &[TokenId],
    grads: &mut [f64],
    scale: f64,
    tape: &mut Tape,
) -> f64 {
    let cfg = model.config().clone();
    let d = cfg.d_model;
    let dff = cfg.d_ff;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let t_len = seq.len();
    let att_scale = 1.0 / (hd as f64).sqrt();
    let off = model.offsets.clone();
    let params = &model.params;

    // ---- forward ----
    for (p, &tok) in seq.iter().enumerate() {
        let te = &params[off.tok_emb.clone()][tok * d..(tok + 1) * d];
        let pe = &params[off.pos_emb.clone()][p * d..(p + 1) * d];
        for i in 0..d {
            tape.x0[p * d + i] = te[i] + pe[i];
        }
    }
    // x flows forward through tape.layers[l].x_out
    for l in 0..cfg.layers {
        let b = off.blocks[l].clone();
        let (ln1_g, ln1_b) = (&params[b.ln1_g.clone()], &params[b.ln1_b.clone()]);
        let (ln2_g, ln2_b) = (&params[b.ln2_g.clone()], &params[b.ln2_b.clone()]);
        for p in 0..t_len {
            let x_in: Vec<f64> = if l == 0 {
                tape.x0[p * d..(p + 1) * d].to_vec()
            } else {
                tape.layers[l - 1].x_out[p * d..(p + 1) * d].to_vec()
            };
            let lt = &mut tape.layers[l];
            let inv = ln_forward_hat(&x_in, &mut lt.xn1_hat[p * d..(p + 1) * d]);
            lt.ln1_inv[p] = inv;
            let xn: Vec<f64> = (0..d)
                .map(|i| ln1_g[i] * lt.xn1_hat[p * d + i] + ln1_b[i])
                .collect();
            tiny::matvec(&params[b.wq.clone()], &xn, &mut lt.q[p * d..(p + 1) * d]);
            tiny::matvec(&params[b.wk.clone()], &xn, &mut lt.k[p * d..(p + 1) * d]);
            tiny::matvec(&params[b.wv.clone()], &xn, &mut lt.v[p * d..(p + 1) * d]);

            // attention over positions 0..=p
            for h in 0..heads {
                let hr = h * hd;
                let qh = &lt.q[p * d + hr..p * d + hr + hd];
                let mut maxs = f64::NEG_INFINITY;
                let mut scores = vec![0.0; p + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &lt.k[j * d + hr..j * d + hr + hd];
                    *s = tiny::dot(qh, kh) * att_scale;
                    maxs = maxs.max(*s);
                }
                let mut denom = 0.0;
                for s in &mut scores {
                    *s = (*s - maxs).exp();
                    denom += *s;
                }
                let arow = &mut lt.attn[h * t_len * t_len + p * t_len..h * t_len * t_len + (p + 1) * t_len];
                arow.fill(0.0);
                for j in 0..=p {
                    arow[j] = scores[j] / denom;
                }
                let ctxh = &mut lt.ctx[p * d + hr..p * d + hr + hd];
                ctxh.fill(0.0);
                for j in 0..=p {
                    let w = arow[j];
                    let vh = &lt.v[j * d + hr..j * d + hr + hd];
                    for i in 0..hd {
                        ctxh[i] += w * vh[i];
                    }
                }
            }
            let mut attn_out = vec![0.0; d];
            tiny::matvec(
                &params[b.wo.clone()],
                &lt.ctx[p * d..(p + 1) * d],
                &mut attn_out,
            );
            for i in 0..d {
                lt.x_mid[p * d + i] = x_in[i] + attn_out[i];
            }

            let x_mid_row = lt.x_mid[p * d..(p + 1) * d].to_vec();
            let inv2 = ln_forward_hat(&x_mid_row, &mut lt.xn2_hat[p * d..(p + 1) * d]);
            lt.ln2_inv[p] = inv2;
            let xn2: Vec<f64> = (0..d)
                .map(|i| ln2_g[i] * lt.xn2_hat[p * d + i] + ln2_b[i])
                .collect();
            tiny::matvec(&params[b.w1.clone()], &xn2, &mut lt.h_pre[p * dff..(p + 1) * dff]);
            for i in 0..dff {
                lt.h_act[p * dff + i] = tiny::gelu(lt.h_pre[p * dff + i]);
            }
            let mut ff = vec![0.0; d];
            tiny::matvec(&params[b.w2.clone()], &lt.h_act[p * dff..(p + 1) * dff], &mut ff);
            for i in 0..d {
                lt.x_out[p * d + i] = lt.x_mid[p * d + i] + ff[i];
            }
        }
    }

    // final LN + logits + loss (predictions at positions 0..t_len-1 targets)
    let last = cfg.layers - 1;
    let mut loss = 0.0;
    tape.dx.fill(0.0);
    let (lnf_g, lnf_b) = (&params[off.ln_f_g.clone()], &params[off.ln_f_b.clone()]);
    for p in 0..t_len {
        let x_out_row = tape.layers[last].x_out[p * d..(p + 1) * d].to_vec();
        let inv = ln_forward_hat(&x_out_row, &mut tape.xnf[p * d..(p + 1) * d]);
        tape.lnf_inv[p] = inv;
    }
    // grads views
    let gv = grads;
    for p in 0..t_len - 1 {
        let target = seq[p + 1];
        let xn: Vec<f64> = (0..d)
            .map(|i| lnf_g[i] * tape.xnf[p * d + i] + lnf_b[i])
            .collect();
        let mut logits = vec![0.0; model.vocab().len()];
        tiny::matvec(&params[off.unembed.clone()], &xn, &mut logits);
        let maxl = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (pr, &lg) in tape.probs.iter_mut().zip(&logits) {
            *pr = (lg - maxl).exp();
            denom += *pr;
        }
        for pr in tape.probs.iter_mut() {
            *pr /= denom;
        }
        loss += -tape.probs[target].ln();

        // dlogits = (probs - onehot) * scale
        let mut dxn = vec![0.0; d];
        {
            let dunembed = &mut gv[off.unembed.clone()];
            for (v_id, &prob) in tape.probs.iter().enumerate() {
                let dl = (prob - if v_id == target { 1.0 } else { 0.0 }) * scale;
                if dl != 0.0 {
                    tiny::axpy(&mut dunembed[v_id * d..(v_id + 1) * d], dl, &xn);
                }
            }
        }
        for (v_id, &prob) in tape.probs.iter().enumerate() {
            let dl = (prob - if v_id == target { 1.0 } else { 0.0 }) * scale;
            if dl != 0.0 {
                tiny::axpy(&mut dxn, dl, &params[off.unembed.clone()][v_id * d..(v_id + 1) * d]);
            }
        }
        // final LN backward into dx at position p
        let hat = tape.xnf[p * d..(p + 1) * d].to_vec();
        let mut dxrow = vec![0.0; d];
        {
            let (dg_range, db_range) = (off.ln_f_g.clone(), off.ln_f_b.clone());
            // split scratch borrows
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            ln_backward(&dxn, &hat, tape.lnf_inv[p], lnf_g, &mut dgamma, &mut dbeta, &mut dxrow);
            for i in 0..d {
                gv[dg_range.clone()][i] += dgamma[i];
                gv[db_range.clone()][i] += dbeta[i];
            }
        }
        for i in 0..d {
            tape.dx[p * d + i] += dxrow[i];
        }
    }

    // ---- backward through blocks ----
    for l in (0..cfg.layers).rev() {
        let b = off.blocks[l].clone();
        let ln1_g = params[b.ln1_g.clone()].to_vec();
        let ln2_g = params[b.ln2_g.clone()].to_vec();
        tape.dq.fill(0.0);
        tape.dk.fill(0.0);
        tape.dv.fill(0.0);
        tape.dctx.fill(0.0);
        // FF backward per position; then attention (needs all dq/dk/dv rows)
        for p in 0..t_len {
            let lt = &tape.layers[l];
            // dx at x_out[p]
            let dxo = tape.dx[p * d..(p + 1) * d].to_vec();
            // ff branch
            let mut dh_act = vec![0.0; dff];
            matvec_backward(
                &params[b.w2.clone()],
                &lt.h_act[p * dff..(p + 1) * dff],
                &dxo,
                &mut gv[b.w2.clone()],
                Some(&mut dh_act),
            );
            let mut dh_pre = vec![0.0; dff];
            for i in 0..dff {
                dh_pre[i] = dh_act[i] * tiny::gelu_grad(lt.h_pre[p * dff + i]);
            }
            let xn2: Vec<f64> = (0..d)
                .map(|i| ln2_g[i] * lt.xn2_hat[p * d + i] + params[b.ln2_b.clone()][i])
                .collect();
            let mut dxn2 = vec![0.0; d];
            matvec_backward(
                &params[b.w1.clone()],
                &xn2,
                &dh_pre,
                &mut gv[b.w1.clone()],
                Some(&mut dxn2),
            );
            let hat2 = lt.xn2_hat[p * d..(p + 1) * d].to_vec();
            let mut dx_mid = vec![0.0; d];
            {
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                ln_backward(
                    &dxn2,
                    &hat2,
                    lt.ln2_inv[p],
                    &ln2_g,
                    &mut dgamma,
                    &mut dbeta,
                    &mut dx_mid,
                );
                for i in 0..d {
                    gv[b.ln2_g.clone()][i] += dgamma[i];
                    gv[b.ln2_b.clone()][i] += dbeta[i];
                }
            }
            // residual: dx_mid total = dxo (residual skip) + ff-path dx_mid
            for i in 0..d {
                dx_mid[i] += dxo[i];
            }
            // attn branch: x_mid = x_in + Wo ctx
            let mut dctx_row = vec![0.0; d];
            matvec_backward(
                &params[b.wo.clone()],
                &lt.ctx[p * d..(p + 1) * d],
                &dx_mid,
                &mut gv[b.wo.clone()],
                Some(&mut dctx_row),
            );
            for i in 0..d {
                tape.dctx[p * d + i] = dctx_row[i];
            }
            // stash dx_mid into dx (it is also d(x_in) via the residual path;
            // the attention-path contribution lands in dq/dk/dv below)
            for i in 0..d {
                tape.dx[p * d + i] = dx_mid[i];
            }
        }
        // attention backward (fills dq, dk, dv from dctx)
        for p in 0..t_len {
            let lt = &tape.layers[l];
            for h in 0..heads {
                let hr = h * hd;
                let arow = &lt.attn[h * t_len * t_len + p * t_len..h * t_len * t_len + (p + 1) * t_len];
                let dctxh = &tape.dctx[p * d + hr..p * d + hr + hd];
                // da and softmax jacobian
                let mut da = vec![0.0; p + 1];
                for (j, daj) in da.iter_mut().enumerate() {
                    let vh = &lt.v[j * d + hr..j * d + hr + hd];
                    *daj = tiny::dot(dctxh, vh);
                }
                let dot_aa: f64 = (0..=p).map(|j| arow[j] * da[j]).sum();
                for j in 0..=p {
                    let ds = arow[j] * (da[j] - dot_aa);
                    // dq[p] += ds * k[j] * scale ; dk[j] += ds * q[p] * scale
                    let kh = &lt.k[j * d + hr..j * d + hr + hd];
                    let qh = &lt.q[p * d + hr..p * d + hr + hd];
                    for i in 0..hd {
                        tape.dq[p * d + hr + i] += ds * kh[i] * att_scale;
                        tape.dk[j * d + hr + i] += ds * qh[i] * att_scale;
                    }
                    // dv[j] += a * dctx
                    for i in 0..hd {
                        tape.dv[j * d + hr + i] += arow[j] * dctxh[i];
                    }
                }
            }
        }
        // project dq/dk/dv back through Wq/Wk/Wv and LN1 into dx
        for p in 0..t_len {
            let lt = &tape.layers[l];
            let xn1: Vec<f64> = (0..d)
                .map(|i| ln1_g[i] * lt.xn1_hat[p * d + i] + params[b.ln1_b.clone()][i])
                .collect();
            let mut dxn1 = vec![0.0; d];
            matvec_backward(
                &params[b.wq.clone()],
                &xn1,
                &tape.dq[p * d..(p + 1) * d].to_vec(),
                &mut gv[b.wq.clone()],
                Some(&mut dxn1),
            );
            matvec_backward(
                &params[b.wk.clone()],
                &xn1,
                &tape.dk[p * d..(p + 1) * d].to_vec(),
                &mut gv[b.wk.clone()],
                Some(&mut dxn1),
            );
            matvec_backward(
                &params[b.wv.clone()],
                &xn1,
                &tape.dv[p * d..(p + 1) * d].to_vec(),
                &mut gv[b.wv.clone()],
                Some(&mut dxn1),
            );
            let hat1 = lt.xn1_hat[p * d..(p + 1) * d].to_vec();
            let mut dx_in = vec![0.0; d];
            {
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                ln_backward(
                    &dxn1,
                    &hat1,
                    lt.ln1_inv[p],
                    &ln1_g,
                    &mut dgamma,
                    &mut dbeta,
                    &mut dx_in,
                );
                for i in 0..d {
                    gv[b.ln1_g.clone()][i] += dgamma[i];
                    gv[b.ln1_b.clone()][i] += dbeta[i];
                }
            }
            // total d(x_in) = residual-path dx (already in tape.dx) + LN1 path
            for i in 0..d {
                tape.dx[p * d + i] += dx_in[i];
            }
        }
    }

    // embeddings
    for (p, &tok) in seq.iter().enumerate() {
        let dpos = &mut gv[off.pos_emb.clone()];
        for i in 0..d {
            dpos[p * d + i] += tape.dx[p * d + i];
        }
        let dtok = &mut gv[off.tok_emb.clone()];
        for i in 0..d {
            dtok[tok * d + i] += tape.dx[p * d + i];
        }
    }

    loss
}
