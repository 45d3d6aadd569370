//! Run configuration and the subcommand pipeline.
//!
//! Every stage validates its configuration before writing anything, embeds
//! the config fingerprint and the global seed in its artifacts, and derives
//! per-item seeds as (global seed, item id), so reruns with the same config
//! produce identical artifacts modulo timestamps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Item, PromptMode};
use crate::debate::embed::HashEmbedder;
use crate::debate::templates::TemplateSet;
use crate::debate::{run_debate, DebateConfig};
use crate::error::{Error, Result};
use crate::eval::{
    build_summary, score_choice, score_open, tables_csv, write_results, LexicalJudge, Prediction,
    QuestionType, Verdict,
};
use crate::gate::{AlphaGrid, GateConfig};
use crate::latentsim::{self, ConceptSpace, SimMode};
use crate::model::analytic::AnalyticConceptLM;
use crate::model::tiny::{Checkpoint, TinyConfig, TinyTransformerLM};
use crate::model::train::{train_toy, ToyCorpus, ToyCorpusConfig, TrainConfig};
use crate::model::{GenerationParams, SteerableModel};
use crate::probes::{layer_sweep, ProbeMetric};
use crate::seed;
use crate::steering::{extract_caa, ContrastPairSet, SteeringVector, SteeringVectorFile};
use crate::sweep::{alpha_sweep, cross_bias_robustness, SweepConfig};
use crate::textgen::{analytic_codec, DecodeMode, Generator, QaGenerator, TextCodec};

/// Which backend a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Analytic,
    Tiny,
}

/// Which decoding strategy `gen` and `debate` use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorChoice {
    Base,
    Steered { alpha: f64 },
    Molace,
}

/// The full run configuration. Flags override file values; the effective
/// config is echoed into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendChoice,
    /// Weight checkpoint for the tiny backend.
    pub checkpoint: Option<PathBuf>,
    /// Analytic backend hidden dimension.
    pub analytic_dim: usize,
    /// Steering layer; defaults to the backend's middle layer.
    pub steering_layer: Option<usize>,
    pub alpha_grid: AlphaGrid,
    pub gate: GateConfig,
    pub generation: GenerationParams,
    pub debate: DebateConfig,
    pub generator: GeneratorChoice,
    pub corpus_path: Option<PathBuf>,
    /// Steering-vector file consumed by gen/debate/sweep.
    pub vector_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub verbose: bool,
    /// Worker threads for per-item stages.
    pub workers: usize,
    /// Contrast pairs used by `extract`.
    pub extract_pairs: usize,
    pub toy_corpus: ToyCorpusConfig,
    pub train: TrainConfig,
    /// Held-out items for `sweep`.
    pub sweep_items: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Analytic,
            checkpoint: None,
            analytic_dim: 8,
            steering_layer: None,
            alpha_grid: AlphaGrid::default(),
            gate: GateConfig::default(),
            generation: GenerationParams {
                temperature: 0.7,
                top_p: 0.9,
                max_new_tokens: 8,
                seed: 0,
            },
            debate: DebateConfig::default(),
            generator: GeneratorChoice::Molace,
            corpus_path: None,
            vector_path: None,
            output_dir: PathBuf::from("out"),
            seed: 7,
            verbose: false,
            workers: 1,
            extract_pairs: 5,
            toy_corpus: ToyCorpusConfig::default(),
            train: TrainConfig::default(),
            sweep_items: 500,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Stable hash of the effective configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(b"molace-config-v1");
        hasher.update(&canonical);
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.gate.validate(&self.alpha_grid)?;
        self.debate.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidParameter("workers must be >= 1".into()));
        }
        if self.extract_pairs == 0 {
            return Err(Error::InvalidParameter("extract_pairs must be >= 1".into()));
        }
        if let Some(p) = &self.corpus_path {
            if !p.exists() {
                return Err(Error::Validation(format!("corpus file {p:?} does not exist")));
            }
        }
        if let Some(p) = &self.checkpoint {
            if !p.exists() {
                return Err(Error::Validation(format!("checkpoint {p:?} does not exist")));
            }
        }
        if let Some(p) = &self.vector_path {
            if !p.exists() {
                return Err(Error::Validation(format!("vector file {p:?} does not exist")));
            }
        }
        Ok(())
    }

    /// Writes the effective config next to the artifacts.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut value = serde_json::to_value(self)?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert(
                "config_fingerprint".into(),
                serde_json::Value::String(self.fingerprint()),
            );
        }
        std::fs::write(
            dir.join("effective_config.json"),
            serde_json::to_string_pretty(&value)?,
        )?;
        Ok(())
    }
}

/// A loaded backend.
pub enum Backend {
    Analytic(Arc<AnalyticConceptLM>),
    Tiny(Arc<TinyTransformerLM>),
}

impl Backend {
    pub fn load(config: &RunConfig) -> Result<Self> {
        match config.backend {
            BackendChoice::Analytic => Ok(Backend::Analytic(Arc::new(
                AnalyticConceptLM::default_oracle(config.analytic_dim),
            ))),
            BackendChoice::Tiny => {
                let path = config.checkpoint.as_ref().ok_or_else(|| {
                    Error::Validation("tiny backend needs a checkpoint path".into())
                })?;
                let model = Checkpoint::load(path)?.into_model()?;
                Ok(Backend::Tiny(Arc::new(model)))
            }
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            Backend::Analytic(m) => m.layer_count(),
            Backend::Tiny(m) => m.layer_count(),
        }
    }

    /// floor(layer_count / 2), clamped to a valid index.
    pub fn middle_layer(&self) -> usize {
        (self.layer_count() / 2).min(self.layer_count() - 1)
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Backend::Analytic(m) => m.fingerprint(),
            Backend::Tiny(m) => m.fingerprint(),
        }
    }

    fn steering_layer(&self, config: &RunConfig) -> Result<usize> {
        let layer = config.steering_layer.unwrap_or_else(|| self.middle_layer());
        if layer >= self.layer_count() {
            return Err(Error::InvalidLayer {
                layer,
                count: self.layer_count(),
            });
        }
        Ok(layer)
    }

    /// Builds the text generator for the configured decode strategy.
    pub fn make_generator(
        &self,
        config: &RunConfig,
        vector: Option<Arc<SteeringVector>>,
    ) -> Result<Box<dyn Generator>> {
        let mode = match &config.generator {
            GeneratorChoice::Base => DecodeMode::Base,
            GeneratorChoice::Steered { alpha } => DecodeMode::Steered { alpha: *alpha },
            GeneratorChoice::Molace => DecodeMode::Molace {
                gate: config.gate.clone(),
            },
        };
        let max_new = config.generation.max_new_tokens;
        match self {
            Backend::Analytic(m) => Ok(Box::new(QaGenerator::with_codec(
                analytic_codec(Arc::clone(m)),
                vector,
                config.alpha_grid.clone(),
                mode,
                max_new,
            )?)),
            Backend::Tiny(m) => Ok(Box::new(
                QaGenerator::with_codec(
                    TextCodec::new(Arc::clone(m)),
                    vector,
                    config.alpha_grid.clone(),
                    mode,
                    max_new,
                )?
                .with_question_anchor(
                    crate::model::train::QUESTION_TOKEN,
                    crate::model::train::ANSWER_SEP_TOKEN,
                ),
            )),
        }
    }

    /// Captures contrast-pair activations and extracts the steering vector.
    fn extract_from_pairs(&self, pairs: &ContrastPairSet) -> Result<SteeringVector> {
        match self {
            Backend::Analytic(m) => extract_caa(m.as_ref(), pairs),
            Backend::Tiny(m) => extract_caa(m.as_ref(), pairs),
        }
    }

    fn encode_text(&self, text: &str) -> Result<crate::model::PromptTokens> {
        match self {
            Backend::Analytic(m) => analytic_codec(Arc::clone(m)).encode(text, 1),
            Backend::Tiny(m) => TextCodec::new(Arc::clone(m)).encode(text, 1),
        }
    }
}

fn item_seed(global: u64, item_id: &str, extra: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(item_id.as_bytes());
    let digest = hasher.finalize();
    let id_hash = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut path = vec![id_hash];
    path.extend_from_slice(extra);
    seed::derive(global, &path)
}

/// Loads the corpus, derives choice questions for eligible items, and
/// returns the collected error report alongside.
pub fn load_run_corpus(config: &RunConfig) -> Result<(Vec<Item>, Vec<corpus::CorpusError>)> {
    let outcome = match &config.corpus_path {
        Some(path) => corpus::load_corpus(path)?,
        None => corpus::LoadOutcome {
            items: corpus::bundled_corpus(),
            errors: Vec::new(),
        },
    };
    let mut items = Vec::with_capacity(outcome.items.len());
    let mut errors = outcome.errors;
    for item in outcome.items {
        if item.binary.is_some() && item.mc.is_some() {
            items.push(item);
        } else if item.has_incorrect_answers() {
            match corpus::build_choice_questions(&item, item_seed(config.seed, &item.id, &[0x6368])) {
                Ok(built) => items.push(built),
                Err(e) => {
                    errors.push(corpus::CorpusError {
                        item_id: Some(item.id.clone()),
                        line: None,
                        stage: "choice".into(),
                        message: e.to_string(),
                    });
                    items.push(item);
                }
            }
        } else {
            // Open-ended only.
            items.push(item);
        }
    }
    Ok((items, errors))
}

fn load_vector(config: &RunConfig) -> Result<Option<Arc<SteeringVector>>> {
    match &config.vector_path {
        Some(path) => Ok(Some(Arc::new(SteeringVectorFile::load(path)?.into_vector()))),
        None => Ok(None),
    }
}

/// One generated (or debated) response for an item/mode/question-type cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub item_id: String,
    pub mode: PromptMode,
    pub question_type: QuestionType,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Bounded worker pool over items; results come back in input order and
/// depend only on per-item derived seeds, never on scheduling.
fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send + Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_refs: Vec<std::sync::Mutex<&mut Option<R>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = f(i, &items[i]);
                **slot_refs[i].lock().unwrap() = Some(result);
            });
        }
    });
    drop(slot_refs);
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

/// The work cells of a generation/debate/eval pass.
fn item_cells(items: &[Item]) -> Vec<(Item, PromptMode, QuestionType)> {
    let mut cells = Vec::new();
    for item in items {
        for mode in item.available_modes() {
            cells.push((item.clone(), mode, QuestionType::Open));
            if item.binary.is_some() {
                cells.push((item.clone(), mode, QuestionType::Binary));
            }
            if item.mc.is_some() {
                cells.push((item.clone(), mode, QuestionType::Mc));
            }
        }
    }
    cells
}

fn cell_prompt(item: &Item, mode: PromptMode, qt: QuestionType) -> String {
    let stem = item.prompt_for(mode).expect("mode available");
    match qt {
        QuestionType::Open => stem.to_string(),
        QuestionType::Binary => item.binary.as_ref().expect("binary built").render_with_stem(stem),
        QuestionType::Mc => item.mc.as_ref().expect("mc built").render_with_stem(stem),
    }
}

/// `extract`: contrast pairs -> steering-vector file.
///
/// With a corpus, pairs come from each item's (plus, minus) biased prompts;
/// on the tiny backend without a corpus they come from the toy template.
pub fn run_extract(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let backend = Backend::load(config)?;
    let layer = backend.steering_layer(config)?;
    let pairs = match (&config.corpus_path, &backend) {
        (None, Backend::Tiny(m)) => {
            let corpus = ToyCorpus::new(config.toy_corpus.clone())?;
            if corpus.vocab() != m.vocab() {
                return Err(Error::Validation(
                    "toy corpus config does not match the checkpoint vocab".into(),
                ));
            }
            crate::sweep::toy_contrast_pairs(
                &corpus,
                config.extract_pairs,
                layer,
                seed::derive(config.seed, &[0x70616972]),
            )
        }
        _ => {
            let (items, _) = load_run_corpus(config)?;
            let mut pairs = Vec::new();
            for item in &items {
                let plus_minus = [
                    (item.support_prompt.as_deref(), item.challenge_prompt.as_deref()),
                    (item.affirm_prompt.as_deref(), item.negate_prompt.as_deref()),
                    (item.cb_incorrect_prompt.as_deref(), item.cb_correct_prompt.as_deref()),
                ];
                for (plus, minus) in plus_minus {
                    if let (Some(p), Some(m)) = (plus, minus) {
                        pairs.push((backend.encode_text(p)?, backend.encode_text(m)?));
                        break;
                    }
                }
                if pairs.len() >= config.extract_pairs {
                    break;
                }
            }
            if pairs.is_empty() {
                return Err(Error::Validation(
                    "no contrastive prompt pairs available for extraction".into(),
                ));
            }
            ContrastPairSet::new(pairs, layer)?
        }
    };
    let vector = backend.extract_from_pairs(&pairs)?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let path = config.output_dir.join("steering_vector.json");
    SteeringVectorFile::from_vector(&vector, &backend.fingerprint()).save(&path)?;
    Ok(path)
}

/// `gen`: per item x mode x question type, one generated response.
pub fn run_gen(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let backend = Backend::load(config)?;
    let vector = load_vector(config)?;
    if vector.is_none() && !matches!(config.generator, GeneratorChoice::Base) {
        return Err(Error::Validation(
            "gen with steered or molace decoding needs vector_path".into(),
        ));
    }
    let generator = backend.make_generator(config, vector)?;
    let (items, errors) = load_run_corpus(config)?;
    let cells = item_cells(&items);
    let records = parallel_map(cells, config.workers, |_, (item, mode, qt)| {
        let prompt = cell_prompt(item, *mode, *qt);
        let cell_seed = item_seed(config.seed, &item.id, &[*mode as u64, *qt as u64]);
        match generator.generate_text(&prompt, &config.generation, cell_seed) {
            Ok(response) => GenerationRecord {
                item_id: item.id.clone(),
                mode: *mode,
                question_type: *qt,
                prompt,
                response,
                error: None,
            },
            Err(e) => GenerationRecord {
                item_id: item.id.clone(),
                mode: *mode,
                question_type: *qt,
                prompt,
                response: String::new(),
                error: Some(e.to_string()),
            },
        }
    });
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let path = config.output_dir.join("generations.jsonl");
    write_jsonl(&records, &path)?;
    if !errors.is_empty() {
        write_jsonl(&errors, &config.output_dir.join("corpus_errors.jsonl"))?;
    }
    Ok(path)
}

/// One transcript row in `transcripts.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub item_id: String,
    pub mode: PromptMode,
    pub question_type: QuestionType,
    pub transcript: crate::debate::Transcript,
}

/// `debate`: the debate harness over every item/mode cell, emitting both
/// transcripts and eval-compatible generation records.
pub fn run_debate_stage(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let backend = Backend::load(config)?;
    let vector = load_vector(config)?;
    if vector.is_none() && !matches!(config.generator, GeneratorChoice::Base) {
        return Err(Error::Validation(
            "debate with steered or molace decoding needs vector_path".into(),
        ));
    }
    let generator = backend.make_generator(config, vector)?;
    let templates = TemplateSet::default();
    let embedder = HashEmbedder::default();
    let (items, _) = load_run_corpus(config)?;
    let cells = item_cells(&items);
    let outputs: Vec<Result<(TranscriptRecord, GenerationRecord)>> =
        parallel_map(cells, config.workers, |_, (item, mode, qt)| {
            let prompt = cell_prompt(item, *mode, *qt);
            let cell_seed = item_seed(config.seed, &item.id, &[*mode as u64, *qt as u64, 0x646562]);
            let transcript = run_debate(
                generator.as_ref(),
                &prompt,
                &config.debate,
                &templates,
                &embedder,
                cell_seed,
            )
            .map_err(|e| Error::Generator(e.to_string()))?;
            let response = match &transcript.final_answer {
                Some(answer) => format!("Final Answer: {answer}"),
                None => String::new(),
            };
            let record = GenerationRecord {
                item_id: item.id.clone(),
                mode: *mode,
                question_type: *qt,
                prompt,
                response,
                error: transcript.final_answer.is_none().then(|| "no consensus".to_string()),
            };
            Ok((
                TranscriptRecord {
                    item_id: item.id.clone(),
                    mode: *mode,
                    question_type: *qt,
                    transcript,
                },
                record,
            ))
        });
    let mut transcripts = Vec::new();
    let mut records = Vec::new();
    for out in outputs {
        let (t, r) = out?;
        transcripts.push(t);
        records.push(r);
    }
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    write_jsonl(&transcripts, &config.output_dir.join("transcripts.jsonl"))?;
    let path = config.output_dir.join("generations.jsonl");
    write_jsonl(&records, &path)?;
    Ok(path)
}

/// `eval`: scores a generations file into results, summary, and CSV tables.
pub fn run_eval(config: &RunConfig, generations: &Path) -> Result<(PathBuf, PathBuf)> {
    config.validate()?;
    let (items, _) = load_run_corpus(config)?;
    let records: Vec<GenerationRecord> = read_jsonl(generations)?;
    let judge = LexicalJudge::default();
    let by_id: BTreeMap<&str, &Item> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut predictions = Vec::with_capacity(records.len());
    for r in &records {
        let Some(item) = by_id.get(r.item_id.as_str()) else {
            return Err(Error::Validation(format!(
                "generation references unknown item {:?}",
                r.item_id
            )));
        };
        let verdict = if r.error.is_some() {
            Verdict::Undefined
        } else {
            match r.question_type {
                QuestionType::Open => {
                    score_open(&judge, &r.response, &item.best_answer, &item.incorrect_answers)
                }
                QuestionType::Binary => {
                    let q = item.binary.as_ref().ok_or_else(|| {
                        Error::Validation(format!("item {:?} has no binary question", item.id))
                    })?;
                    score_choice(&r.response, q)
                }
                QuestionType::Mc => {
                    let q = item.mc.as_ref().ok_or_else(|| {
                        Error::Validation(format!("item {:?} has no mc question", item.id))
                    })?;
                    score_choice(&r.response, q)
                }
            }
        };
        predictions.push(Prediction {
            item_id: r.item_id.clone(),
            mode: r.mode,
            question_type: r.question_type,
            prompt: r.prompt.clone(),
            response: r.response.clone(),
            verdict,
        });
    }
    let summary = build_summary(
        &predictions,
        None,
        &config.fingerprint(),
        config.seed,
        &crate::eval::Judge::name(&judge),
    )?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let (results_path, summary_path) = write_results(&predictions, &summary, &config.output_dir)?;
    std::fs::write(config.output_dir.join("tables.csv"), tables_csv(&summary))?;
    Ok((results_path, summary_path))
}

/// Label scheme for `probe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeScheme {
    /// SUPPORT / CHALLENGE / NEUTRAL marker classes.
    Stance,
    /// Topic truth (YES vs NO) under neutral prompts.
    Truth,
}

/// `probe`: layer sweep of probe accuracy, silhouette, and ARI on the tiny
/// backend's toy prompts.
pub fn run_probe(
    config: &RunConfig,
    scheme: ProbeScheme,
    per_class: usize,
) -> Result<PathBuf> {
    config.validate()?;
    let backend = Backend::load(config)?;
    let Backend::Tiny(model) = &backend else {
        return Err(Error::Validation("probe needs the tiny backend".into()));
    };
    let corpus = ToyCorpus::new(config.toy_corpus.clone())?;
    if corpus.vocab() != model.vocab() {
        return Err(Error::Validation(
            "toy corpus config does not match the checkpoint vocab".into(),
        ));
    }
    let (prompts, names, scheme_name) =
        probe_prompts(&corpus, scheme, per_class, seed::derive(config.seed, &[0x7072]));
    let report = layer_sweep(
        model.as_ref(),
        &prompts,
        &names,
        scheme_name,
        &[ProbeMetric::ProbeAccuracy, ProbeMetric::Silhouette, ProbeMetric::Ari],
        seed::derive(config.seed, &[0x7073]),
    )?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    std::fs::write(config.output_dir.join("probe_report.csv"), report.to_csv())?;
    let path = config.output_dir.join("probe_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    Ok(path)
}

/// Labeled toy prompts for a probe scheme.
pub fn probe_prompts(
    corpus: &ToyCorpus,
    scheme: ProbeScheme,
    per_class: usize,
    seed_value: u64,
) -> (Vec<(crate::model::PromptTokens, usize)>, Vec<String>, &'static str) {
    use crate::model::train::Marker;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand::seq::SliceRandom;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed_value);
    let mut prompts = Vec::new();
    // Distinct topics per class; duplicate rows would distort the distance
    // metrics with zero-distance pairs.
    let mut topics: Vec<usize> = (0..corpus.config().topics).collect();
    match scheme {
        ProbeScheme::Stance => {
            for (label, marker) in [Marker::Neutral, Marker::Support, Marker::Challenge]
                .into_iter()
                .enumerate()
            {
                topics.shuffle(&mut rng);
                for &topic in topics.iter().take(per_class) {
                    prompts.push((corpus.prompt(topic, marker), label));
                }
            }
            (
                prompts,
                vec!["neutral".into(), "support".into(), "challenge".into()],
                "stance",
            )
        }
        ProbeScheme::Truth => {
            topics.shuffle(&mut rng);
            let mut counts = [0usize; 2];
            for &topic in &topics {
                let label = usize::from(corpus.true_answer(topic) == corpus.no_id());
                if counts[label] < per_class {
                    counts[label] += 1;
                    prompts.push((corpus.prompt(topic, Marker::Neutral), label));
                }
            }
            (prompts, vec!["truth_yes".into(), "truth_no".into()], "truth")
        }
    }
}

/// What `sim` should run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SimCommand {
    /// The bundled echo-chamber demo; emits (round, answer, probability).
    EchoDemo { rounds: usize },
    /// Debate rounds over a concept-space file.
    Trajectory {
        space: PathBuf,
        prompt: String,
        agents: usize,
        rounds: usize,
        expected: bool,
    },
    /// Majority-vote limit over a binary distribution.
    Majority { p: f64, k: usize, trials: usize },
}

/// `sim`: latent-concept simulator experiments, emitting CSV.
pub fn run_sim(config: &RunConfig, command: &SimCommand) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let path = config.output_dir.join("sim.csv");
    let mut csv = String::from("round,answer,probability\n");
    match command {
        SimCommand::EchoDemo { rounds } => {
            let space = latentsim::echo_space();
            let traj = latentsim::echo_trajectory(&space, "x", "z_star", 2, *rounds)?;
            for (round, p) in traj.iter().enumerate() {
                csv.push_str(&format!("{round},z_star,{p}\n"));
            }
        }
        SimCommand::Trajectory {
            space,
            prompt,
            agents,
            rounds,
            expected,
        } => {
            let space = ConceptSpace::load(space)?;
            let mode = if *expected {
                SimMode::Expected
            } else {
                SimMode::Sampled {
                    seed: seed::derive(config.seed, &[0x73696d]),
                }
            };
            let state = latentsim::simulate_debate(&space, prompt, *agents, *rounds, mode)?;
            for round in &state.rounds {
                for (answer, p) in &round.distribution {
                    csv.push_str(&format!("{},{answer},{p}\n", round.round));
                }
            }
            for warning in &state.warnings {
                eprintln!("warning: {warning}");
            }
        }
        SimCommand::Majority { p, k, trials } => {
            let dist = BTreeMap::from([
                ("mode".to_string(), *p),
                ("other".to_string(), 1.0 - *p),
            ]);
            let freq = latentsim::majority_limit(&dist, *k, *trials, seed::derive(config.seed, &[0x6d616a]))?;
            csv = format!("k,trials,mode_win_frequency\n{k},{trials},{freq}\n");
        }
    }
    std::fs::write(&path, csv)?;
    Ok(path)
}

/// `build-prompts`: corpus construction through the offline rewriter.
pub fn run_build_prompts(
    config: &RunConfig,
    emit_sample: bool,
    families: &[corpus::rewrite::BiasFamily],
    build_choices: bool,
) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let path = config.output_dir.join("prompts.jsonl");
    if emit_sample {
        std::fs::write(&path, corpus::bundled_corpus_text())?;
        return Ok(path);
    }
    let (items, mut errors) = load_run_corpus(config)?;
    let client = corpus::rewrite::TemplateRewriter;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let mut current = item;
        for family in families {
            match corpus::rewrite::rewrite_item(&client, &current, *family) {
                Ok(updated) => current = updated,
                Err(e) => errors.push(corpus::CorpusError {
                    item_id: Some(current.id.clone()),
                    line: None,
                    stage: "rewrite".into(),
                    message: e.to_string(),
                }),
            }
        }
        if build_choices && current.has_incorrect_answers() {
            current = corpus::build_choice_questions(
                &current,
                item_seed(config.seed, &current.id, &[0x6368]),
            )?;
        }
        out.push(current);
    }
    corpus::save_corpus(&out, &path)?;
    if !errors.is_empty() {
        write_jsonl(&errors, &config.output_dir.join("corpus_errors.jsonl"))?;
    }
    Ok(path)
}

/// `train`: fits the toy transformer and writes the checkpoint + report.
pub fn run_train(config: &RunConfig, arch: TinyConfig) -> Result<PathBuf> {
    config.validate()?;
    let corpus = ToyCorpus::new(config.toy_corpus.clone())?;
    let outcome = train_toy(arch, &corpus, &config.train)?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("train_seed".to_string(), config.train.seed.to_string());
    provenance.insert("steps".to_string(), config.train.steps.to_string());
    provenance.insert(
        "corpus".to_string(),
        serde_json::to_string(&config.toy_corpus)?,
    );
    provenance.insert("config_fingerprint".to_string(), config.fingerprint());
    let path = config.output_dir.join("checkpoint.json");
    Checkpoint::from_model(&outcome.model, provenance).save(&path)?;
    std::fs::write(
        config.output_dir.join("train_report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    if !outcome.report.reached_separation {
        eprintln!(
            "warning: separation {:.3} below target {:.3}",
            outcome.report.separation, config.train.separation_target
        );
    }
    Ok(path)
}

/// `sweep`: alpha sweep + coverage + mixture-vs-base on the tiny backend.
pub fn run_sweep(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let backend = Backend::load(config)?;
    let Backend::Tiny(model) = &backend else {
        return Err(Error::Validation("sweep needs the tiny backend".into()));
    };
    let corpus = ToyCorpus::new(config.toy_corpus.clone())?;
    if corpus.vocab() != model.vocab() {
        return Err(Error::Validation(
            "toy corpus config does not match the checkpoint vocab".into(),
        ));
    }
    let vector = match load_vector(config)? {
        Some(v) => v,
        None => Arc::new(crate::sweep::extract_toy_vector(
            model.as_ref(),
            &corpus,
            config.extract_pairs,
            backend.steering_layer(config)?,
            seed::derive(config.seed, &[0x70616972]),
        )?),
    };
    let sweep_cfg = SweepConfig {
        grid: config.alpha_grid.clone(),
        gate: config.gate.clone(),
        params: GenerationParams {
            max_new_tokens: 1,
            ..config.generation.clone()
        },
        items: config.sweep_items,
        marker: crate::model::train::Marker::Support,
        seed: seed::derive(config.seed, &[0x7377]),
    };
    let outcome = alpha_sweep(model.as_ref(), &corpus, &vector, &sweep_cfg)?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    std::fs::write(config.output_dir.join("sweep.csv"), outcome.to_csv())?;
    let path = config.output_dir.join("sweep.json");
    std::fs::write(&path, serde_json::to_string_pretty(&outcome)?)?;
    Ok(path)
}

/// Cross-bias robustness with and without the debate layer, for the tiny
/// backend; part of the `sweep` surface.
pub fn run_robustness(config: &RunConfig, n_items: usize) -> Result<PathBuf> {
    config.validate()?;
    let backend = Backend::load(config)?;
    let Backend::Tiny(model) = &backend else {
        return Err(Error::Validation("robustness needs the tiny backend".into()));
    };
    let corpus = ToyCorpus::new(config.toy_corpus.clone())?;
    let vector = match load_vector(config)? {
        Some(v) => v,
        None => Arc::new(crate::sweep::extract_toy_vector(
            model.as_ref(),
            &corpus,
            config.extract_pairs,
            backend.steering_layer(config)?,
            seed::derive(config.seed, &[0x70616972]),
        )?),
    };
    let params = GenerationParams {
        max_new_tokens: 1,
        ..config.generation.clone()
    };
    let outcome = cross_bias_robustness(
        model,
        &corpus,
        &vector,
        &config.alpha_grid,
        &config.gate,
        &params,
        &config.debate,
        n_items,
        seed::derive(config.seed, &[0x726f62]),
    )?;
    std::fs::create_dir_all(&config.output_dir)?;
    config.echo_to(&config.output_dir)?;
    let path = config.output_dir.join("robustness.json");
    std::fs::write(&path, serde_json::to_string_pretty(&outcome)?)?;
    Ok(path)
}
