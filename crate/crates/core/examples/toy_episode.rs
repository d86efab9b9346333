//! Trains and evaluates the head on procedural toy episodes, with and
//! without the cross-modal attention branches.
//!
//! cargo run --release -p fsac-core --example toy_episode -- [seeds] [k]

use fsac::backbone::ToyLinearBackend;
use fsac::config::TrainConfig;
use fsac::pipeline::{evaluate, run_episode, untrained};
use fsac::toy::{toy_corpus, toy_train_config, ToyCorpusSpec};

fn main() -> fsac::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let backend = ToyLinearBackend::new(7);
    let full = toy_train_config(k)?;
    let ablated = TrainConfig {
        use_tf: false,
        use_vt: false,
        ..full.clone()
    };
    println!("seed  untrained  full    no_tf_vt  loss0 -> loss_end");
    for seed in 0..seeds {
        let corpus = toy_corpus(&ToyCorpusSpec {
            seed,
            ..Default::default()
        })?;
        let episode = corpus.episode(&full, seed)?;
        let base = evaluate(&untrained(&episode, &full, &backend)?, &episode, &backend)?;
        let (_, f) = run_episode(&episode, &full, &backend)?;
        let (_, a) = run_episode(&episode, &ablated, &backend)?;
        println!(
            "{seed:>4}  {:.4}     {:.4}  {:.4}    {:.4} -> {:.4}  ({:.1}s)",
            base.metrics.auroc,
            f.metrics.auroc,
            a.metrics.auroc,
            f.loss_curve[0].total,
            f.loss_curve.last().unwrap().total,
            f.train_seconds
        );
    }
    Ok(())
}
