use molace::model::tiny::TinyConfig;
use molace::model::train::{train_toy, ToyCorpus, ToyCorpusConfig, TrainConfig};
use molace::pipeline::{probe_prompts, ProbeScheme};
use molace::probes::{layer_sweep, ProbeMetric};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let corpus = ToyCorpus::new(ToyCorpusConfig::default()).unwrap();
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    let out = train_toy(TinyConfig::default(), &corpus, &cfg).unwrap();
    let (prompts, names, scheme) = probe_prompts(&corpus, ProbeScheme::Stance, 48, 7070);
    let report = layer_sweep(&out.model, &prompts, &names, scheme, &[ProbeMetric::ProbeAccuracy, ProbeMetric::Silhouette], 7171).unwrap();
    let sils: Vec<f64> = (0..4).map(|l| report.value(l, ProbeMetric::Silhouette).unwrap()).collect();
    let accs: Vec<f64> = (0..4).map(|l| report.value(l, ProbeMetric::ProbeAccuracy).unwrap()).collect();
    println!("steps={} sep={:.3} sup={:.3} cha={:.3} probe={:?} sil={:?}", steps, out.report.separation, out.report.support_accuracy, out.report.challenge_accuracy, accs, sils);
}
