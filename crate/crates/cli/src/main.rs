//! `molace` command-line interface.
//!
//! Subcommands: extract, gen, debate, eval, probe, sim, build-prompts, plus
//! train and sweep for producing and analyzing the toy checkpoint. Config
//! comes from an optional JSON file; flags override file values, and the
//! effective config is echoed into the output directory. Exit codes:
//! 0 success, 1 validation failure, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use molace::corpus::rewrite::BiasFamily;
use molace::error::Error;
use molace::gate::GateMode;
use molace::model::tiny::TinyConfig;
use molace::pipeline::{self, BackendChoice, GeneratorChoice, ProbeScheme, RunConfig, SimCommand};

#[derive(Parser)]
#[command(name = "molace", version, about = "Confirmation-bias steering at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (MOLACE_OUTPUT_DIR overrides).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Backend: analytic | tiny.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Weight checkpoint for the tiny backend.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Steering layer (default: the backend's middle layer).
    #[arg(long, global = true)]
    layer: Option<usize>,

    /// Steering-vector file.
    #[arg(long, global = true)]
    vector: Option<PathBuf>,

    /// Corpus file (JSON array or JSONL); default: the bundled sample.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Generator: base | steered:<alpha> | molace.
    #[arg(long, global = true)]
    generator: Option<String>,

    /// Gate mode: amplify | neutralize.
    #[arg(long, global = true)]
    gate_mode: Option<String>,

    /// Worker threads for per-item stages.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Sampling temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,

    /// Nucleus threshold.
    #[arg(long, global = true)]
    top_p: Option<f64>,

    /// Generation cap.
    #[arg(long, global = true)]
    max_new_tokens: Option<usize>,

    /// Verbose artifacts (mixture traces etc.).
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the steering direction from contrastive prompt pairs.
    Extract {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of contrast pairs.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Generate responses over a corpus (base, steered, or molace).
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the debate harness over a corpus.
    Debate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of agents.
        #[arg(long)]
        agents: Option<usize>,
        /// Number of rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Enable quality pruning.
        #[arg(long)]
        quality: bool,
        /// Enable diversity selection.
        #[arg(long)]
        diversity: bool,
        /// Enable refute-then-fix.
        #[arg(long)]
        refutation: bool,
        /// Keep ratio for the pruning stages.
        #[arg(long)]
        keep_ratio: Option<f64>,
    },
    /// Score a generations file into results, summary, and tables.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Generations file (defaults to <out>/generations.jsonl).
        #[arg(long)]
        generations: Option<PathBuf>,
    },
    /// Layer sweep of probe accuracy, silhouette, and ARI.
    Probe {
        #[command(flatten)]
        common: CommonArgs,
        /// Label scheme: stance | truth.
        #[arg(long, default_value = "stance")]
        scheme: String,
        /// Prompts per class.
        #[arg(long, default_value_t = 60)]
        per_class: usize,
    },
    /// Latent-concept simulator experiments.
    Sim {
        #[command(flatten)]
        common: CommonArgs,
        /// Run the bundled echo-chamber demo.
        #[arg(long)]
        echo_demo: bool,
        /// Rounds for the echo demo or trajectory.
        #[arg(long, default_value_t = 8)]
        rounds: usize,
        /// Concept-space JSON file for a trajectory run.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Named prompt inside the space.
        #[arg(long, default_value = "x")]
        prompt: String,
        /// Agents for a trajectory run.
        #[arg(long, default_value_t = 2)]
        agents: usize,
        /// Use exact expected-mode propagation.
        #[arg(long)]
        expected: bool,
        /// Run the majority-vote limit with this mode probability.
        #[arg(long)]
        majority_p: Option<f64>,
        /// Voters per trial for the majority-vote limit.
        #[arg(long, default_value_t = 501)]
        k: usize,
        /// Trials for the majority-vote limit.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Build or rewrite a biased-prompt corpus.
    BuildPrompts {
        #[command(flatten)]
        common: CommonArgs,
        /// Write the bundled sample corpus and exit.
        #[arg(long)]
        emit_sample: bool,
        /// Bias families to fill: cb, stance, negation, all.
        #[arg(long, default_value = "all")]
        family: String,
        /// Derive binary/mc choice questions.
        #[arg(long)]
        build_choices: bool,
    },
    /// Train the toy transformer and write its checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Topics in the toy corpus.
        #[arg(long)]
        topics: Option<usize>,
        /// Planted bias strength.
        #[arg(long)]
        p_bias: Option<f64>,
    },
    /// Alpha sweep + coverage + mixture-vs-base on the toy checkpoint.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Held-out items.
        #[arg(long)]
        items: Option<usize>,
        /// Also run cross-bias robustness with the debate layer.
        #[arg(long)]
        robustness: bool,
    },
}

fn build_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(backend) = &common.backend {
        config.backend = match backend.as_str() {
            "analytic" => BackendChoice::Analytic,
            "tiny" => BackendChoice::Tiny,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown backend {other:?} (expected analytic | tiny)"
                )))
            }
        };
    }
    if let Some(p) = &common.checkpoint {
        config.checkpoint = Some(p.clone());
    }
    if common.layer.is_some() {
        config.steering_layer = common.layer;
    }
    if let Some(p) = &common.vector {
        config.vector_path = Some(p.clone());
    }
    if let Some(p) = &common.corpus {
        config.corpus_path = Some(p.clone());
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(g) = &common.generator {
        config.generator = parse_generator(g)?;
    }
    if let Some(m) = &common.gate_mode {
        config.gate.mode = match m.as_str() {
            "amplify" => GateMode::Amplify,
            "neutralize" => GateMode::Neutralize,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown gate mode {other:?} (expected amplify | neutralize)"
                )))
            }
        };
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    if let Some(t) = common.temperature {
        config.generation.temperature = t;
    }
    if let Some(p) = common.top_p {
        config.generation.top_p = p;
    }
    if let Some(m) = common.max_new_tokens {
        config.generation.max_new_tokens = m;
    }
    config.verbose = config.verbose || common.verbose;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Ok(dir) = std::env::var("MOLACE_OUTPUT_DIR") {
        if !dir.is_empty() {
            config.output_dir = PathBuf::from(dir);
        }
    }
    Ok(config)
}

fn parse_generator(text: &str) -> Result<GeneratorChoice, Error> {
    if text == "base" {
        return Ok(GeneratorChoice::Base);
    }
    if text == "molace" {
        return Ok(GeneratorChoice::Molace);
    }
    if let Some(alpha) = text.strip_prefix("steered:") {
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad alpha in {text:?}")))?;
        return Ok(GeneratorChoice::Steered { alpha });
    }
    Err(Error::InvalidParameter(format!(
        "unknown generator {text:?} (expected base | steered:<alpha> | molace)"
    )))
}

fn is_validation_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Validation(_)
            | Error::InvalidParameter(_)
            | Error::InvalidLayer { .. }
            | Error::DimensionMismatch { .. }
    )
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Extract { common, pairs } => {
            let mut config = build_config(&common)?;
            if let Some(p) = pairs {
                config.extract_pairs = p;
            }
            let path = pipeline::run_extract(&config)?;
            println!("wrote {}", path.display());
        }
        Command::Gen { common } => {
            let config = build_config(&common)?;
            let path = pipeline::run_gen(&config)?;
            println!("wrote {}", path.display());
        }
        Command::Debate {
            common,
            agents,
            rounds,
            quality,
            diversity,
            refutation,
            keep_ratio,
        } => {
            let mut config = build_config(&common)?;
            if let Some(n) = agents {
                config.debate.n_agents = n;
            }
            if let Some(r) = rounds {
                config.debate.rounds = r;
            }
            config.debate.quality |= quality;
            config.debate.diversity |= diversity;
            config.debate.refutation |= refutation;
            if let Some(k) = keep_ratio {
                config.debate.keep_ratio = k;
            }
            config.debate.params = config.generation.clone();
            let path = pipeline::run_debate_stage(&config)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { common, generations } => {
            let config = build_config(&common)?;
            let generations =
                generations.unwrap_or_else(|| config.output_dir.join("generations.jsonl"));
            if !generations.exists() {
                return Err(Error::Validation(format!(
                    "generations file {generations:?} does not exist"
                )));
            }
            let (results, summary) = pipeline::run_eval(&config, &generations)?;
            println!("wrote {}", results.display());
            println!("wrote {}", summary.display());
        }
        Command::Probe {
            common,
            scheme,
            per_class,
        } => {
            let config = build_config(&common)?;
            let scheme = match scheme.as_str() {
                "stance" => ProbeScheme::Stance,
                "truth" => ProbeScheme::Truth,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown scheme {other:?} (expected stance | truth)"
                    )))
                }
            };
            let path = pipeline::run_probe(&config, scheme, per_class)?;
            println!("wrote {}", path.display());
        }
        Command::Sim {
            common,
            echo_demo,
            rounds,
            space,
            prompt,
            agents,
            expected,
            majority_p,
            k,
            trials,
        } => {
            let config = build_config(&common)?;
            let command = if echo_demo {
                SimCommand::EchoDemo { rounds }
            } else if let Some(p) = majority_p {
                SimCommand::Majority { p, k, trials }
            } else if let Some(space) = space {
                SimCommand::Trajectory {
                    space,
                    prompt,
                    agents,
                    rounds,
                    expected,
                }
            } else {
                return Err(Error::Validation(
                    "sim needs --echo-demo, --majority-p, or --space".into(),
                ));
            };
            let path = pipeline::run_sim(&config, &command)?;
            println!("wrote {}", path.display());
        }
        Command::BuildPrompts {
            common,
            emit_sample,
            family,
            build_choices,
        } => {
            let config = build_config(&common)?;
            let families: Vec<BiasFamily> = match family.as_str() {
                "all" => vec![
                    BiasFamily::ConfirmationBias,
                    BiasFamily::Stance,
                    BiasFamily::Negation,
                ],
                "cb" => vec![BiasFamily::ConfirmationBias],
                "stance" => vec![BiasFamily::Stance],
                "negation" => vec![BiasFamily::Negation],
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown family {other:?} (expected cb | stance | negation | all)"
                    )))
                }
            };
            let path = pipeline::run_build_prompts(&config, emit_sample, &families, build_choices)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            common,
            steps,
            topics,
            p_bias,
        } => {
            let mut config = build_config(&common)?;
            if let Some(s) = steps {
                config.train.steps = s;
            }
            if let Some(t) = topics {
                config.toy_corpus.topics = t;
            }
            if let Some(p) = p_bias {
                config.toy_corpus.p_bias = p;
            }
            let path = pipeline::run_train(&config, TinyConfig::default())?;
            println!("wrote {}", path.display());
        }
        Command::Sweep {
            common,
            items,
            robustness,
        } => {
            let mut config = build_config(&common)?;
            if let Some(n) = items {
                config.sweep_items = n;
            }
            let path = pipeline::run_sweep(&config)?;
            println!("wrote {}", path.display());
            if robustness {
                let path = pipeline::run_robustness(&config, config.sweep_items)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_validation_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
