//! Trains the toy model on a 64-sample synthetic corpus and prints the
//! per-epoch loss with periodic evaluation.
//!
//! cargo run --release --example train_synthetic -- [epochs]

use std::time::Instant;

use causal_sarcasm::config::ModelConfig;
use causal_sarcasm::data::{generate_synthetic_dataset, SyntheticCorpusSpec};
use causal_sarcasm::train::Trainer;

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let cfg = ModelConfig { epochs, eval_every: 5, ..ModelConfig::default() };
    let (train, vocab) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 64, seed: 0, ..Default::default() }, &cfg)?;
    let (heldout, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 64, seed: 1, ..Default::default() }, &cfg)?;

    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    while trainer.epoch < epochs {
        let loss = trainer.train_epoch(&train, None)?;
        let e = trainer.epoch;
        print!("epoch {e:3}  loss {:.4} (rec {:.4} kl {:.4} exp {:.4})  {:.1}s", loss.total, loss.reconstruction, loss.kl, loss.exp, start.elapsed().as_secs_f64());
        if e % 5 == 0 || e == epochs {
            let r = causal_sarcasm::train::evaluate(&trainer.model, &train)?;
            print!("  train F1 {:.3} tok-acc {:.3} R-L {:.3}", r.classification.weighted_f1, r.token_accuracy, r.generation.rouge_l);
        }
        println!();
    }
    let report = trainer.report(&train, Some(&heldout))?;
    let i = &report.interventions;
    println!(
        "held-out F1: normal {:.3}  do(E) {:.3}  do(F) {:.3}",
        i.normal.classification.weighted_f1, i.do_e.classification.weighted_f1, i.do_f.classification.weighted_f1
    );
    let (_, sample) = causal_sarcasm::detector::generate(&trainer.model, &heldout[0])?;
    println!("example explanation: {}", vocab.decode(sample.content()));
    Ok(())
}
