use molace::model::tiny::TinyConfig;
use molace::model::train::{train_toy, ToyCorpus, ToyCorpusConfig, TrainConfig};
use std::time::Instant;

// args: steps lr topics neutral_share batch
fn main() {
    let a: Vec<String> = std::env::args().collect();
    let steps: usize = a.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr: f64 = a.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let topics: usize = a.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
    let ns: f64 = a.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0 / 3.0);
    let batch: usize = a.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let corpus = ToyCorpus::new(ToyCorpusConfig { topics, p_bias: 0.8, neutral_share: ns, ..ToyCorpusConfig::default() }).unwrap();
    let cfg = TrainConfig { steps, learning_rate: lr, batch_size: batch, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train_toy(TinyConfig::default(), &corpus, &cfg).unwrap();
    println!(
        "steps={} lr={} topics={} ns={:.2} batch={} time={:.0?} loss={:.4} support={:.3} challenge={:.3} sep={:.3}",
        steps, lr, topics, ns, batch, t0.elapsed(),
        out.report.final_loss, out.report.support_accuracy,
        out.report.challenge_accuracy, out.report.separation
    );
}
