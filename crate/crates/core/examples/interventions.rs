//! Trains briefly, then compares detection under normal inference, do(E)
//! (ground-truth explanation) and do(F) (Gaussian noise for the latent), and
//! finally swaps in an explanation from the opposite class to see how far
//! the sarcasm probability moves.
//!
//! cargo run --release --example interventions -- [epochs]

use causal_sarcasm::config::ModelConfig;
use causal_sarcasm::data::{generate_synthetic_dataset, SyntheticCorpusSpec};
use causal_sarcasm::detector::{classify, generate, infer, latent_of, InferenceMode};
use causal_sarcasm::rng::seeded_rng;
use causal_sarcasm::train::{run_intervention_experiment, Trainer};

fn main() -> anyhow::Result<()> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let cfg = ModelConfig { epochs, eval_every: 0, ..ModelConfig::default() };
    let (train, vocab) = generate_synthetic_dataset(&SyntheticCorpusSpec::default(), &cfg)?;
    let (heldout, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { seed: 1, ..Default::default() }, &cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    while trainer.epoch < epochs {
        trainer.train_epoch(&train, None)?;
    }
    let model = &trainer.model;

    let report = run_intervention_experiment(model, &heldout, 99)?;
    println!("held-out detection after {epochs} epochs");
    for mode in InferenceMode::ALL {
        let c = &report.mode(mode).classification;
        println!("  {:<7} acc {:.4}  weighted F1 {:.4}", mode.name(), c.accuracy, c.weighted_f1);
    }

    let mut rng = seeded_rng(5);
    let literal = heldout.iter().find(|s| s.label == Some(0)).expect("a literal sample");
    let mut picked = None;
    for s in heldout.iter().filter(|s| s.label == Some(1)) {
        let out = infer(model, s, InferenceMode::Normal, &mut rng)?;
        if out.predicted_label == 1 {
            picked = Some((s, out));
            break;
        }
    }
    let Some((sample, normal)) = picked else {
        println!("no correctly detected sarcastic sample to probe");
        return Ok(());
    };
    println!("\nsample {} (sarcastic, detected)", sample.id);
    println!("  generated explanation: {}", vocab.decode(normal.explanation_used.content()));
    println!("  P(sarcastic) = {:.4}", normal.probs[1]);

    let (m, _) = generate(model, sample)?;
    let swapped = literal.explanation()?;
    let f = latent_of(model, swapped)?.mu;
    let probs = classify(model, &f, &m)?;
    println!("  with a literal explanation: {}", vocab.decode(swapped.content()));
    let verdict = if probs[1] < 0.5 { "prediction flips" } else { "prediction holds" };
    println!("  P(sarcastic) = {:.4} ({verdict})", probs[1]);
    Ok(())
}
