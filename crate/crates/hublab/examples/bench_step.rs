// Rough step-time benchmark for the default training configuration.
use hublab::corpora::{generate_corpus, LexiconSizes, MixtureConfig};
use hublab::model::ModelConfig;
use hublab::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seq: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let corpus = generate_corpus(
        &MixtureConfig::default(),
        LexiconSizes::default(),
        steps * batch * seq + 64,
        20,
    )
    .unwrap();
    let cfg = ModelConfig::desk_default(corpus.lexicon.vocab_size());
    let dir = std::env::temp_dir().join("hublab_bench");
    std::fs::create_dir_all(&dir).unwrap();
    let tc = TrainConfig {
        steps,
        batch_size: batch,
        seq_len: seq,
        eval_interval: 0,
        checkpoint_path: dir.join("bench.ckpt"),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (_, report) = train(&cfg, &corpus, &tc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "steps={steps} batch={batch} seq={seq}  {:.1} ms/step  loss {:.3} -> {:.3}  (20000 steps ≈ {:.1} min)",
        dt / steps as f64 * 1e3,
        report.losses.first().unwrap().1,
        report.losses.last().unwrap().1,
        dt / steps as f64 * 20000.0 / 60.0
    );
}
