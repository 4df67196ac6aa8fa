//! Decodes explanations for a few synthetic samples with greedy and beam
//! search, before and after a short training run, and prints the
//! teacher-forced token accuracy against the reference explanation.
//!
//! cargo run --release --example explain_decode

use causal_sarcasm::config::ModelConfig;
use causal_sarcasm::data::{generate_synthetic_dataset, SyntheticCorpusSpec};
use causal_sarcasm::explain::{decode_explanation, teacher_forced_hits, DecodeMode};
use causal_sarcasm::model::Model;
use causal_sarcasm::train::Trainer;
use causal_sarcasm::vocab::Vocab;

fn show(model: &Model, data: &[causal_sarcasm::data::MultimodalSample], vocab: &Vocab) -> anyhow::Result<()> {
    for s in data.iter().take(3) {
        let m = model.fused(s)?;
        let greedy = decode_explanation(&model.params, &model.arch.decoder, &m, DecodeMode::Greedy)?;
        let beam = decode_explanation(&model.params, &model.arch.decoder, &m, DecodeMode::Beam(4))?;
        let truth = s.explanation()?;
        let (hits, total) = teacher_forced_hits(&model.params, &model.arch.decoder, &m, truth)?;
        println!("  {} label {}", s.id, s.label()?);
        println!("    reference: {}", vocab.decode(truth.content()));
        println!("    greedy   : {}", vocab.decode(greedy.content()));
        println!("    beam(4)  : {}", vocab.decode(beam.content()));
        println!("    teacher-forced hits {hits}/{total}");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig { epochs: 30, eval_every: 0, ..ModelConfig::default() };
    let (data, vocab) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 32, ..Default::default() }, &cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    println!("untrained:");
    show(&trainer.model, &data, &vocab)?;
    while trainer.epoch < trainer.config().epochs {
        trainer.train_epoch(&data, None)?;
    }
    println!("after {} epochs:", trainer.epoch);
    show(&trainer.model, &data, &vocab)?;
    Ok(())
}
