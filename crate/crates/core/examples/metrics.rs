//! Detection and generation metrics on a handful of hand-written cases.
//!
//! cargo run --release --example metrics

use causal_sarcasm::metrics::{bleu_n, classification_report, generation_report, lcs_len, rouge_l, rouge_n};
use causal_sarcasm::vocab::Vocab;

fn main() -> anyhow::Result<()> {
    let preds = [1, 1, 0, 1, 0, 0, 1, 0];
    let labels = [1, 0, 0, 1, 0, 1, 1, 0];
    let r = classification_report(&preds, &labels)?;
    println!("accuracy {:.3}  weighted P {:.3} R {:.3} F1 {:.3}", r.accuracy, r.weighted_precision, r.weighted_recall, r.weighted_f1);

    let vocab = Vocab::new(["the", "speaker", "mocks", "rain", "loves", "with", "irony", "sincerely", "likes"]);
    let enc = |s: &str| s.split_whitespace().map(|w| vocab.id(w)).collect::<Vec<_>>();
    let pairs = [
        ("the speaker mocks rain with irony", "the speaker mocks rain with irony"),
        ("the speaker loves rain", "the speaker mocks rain with irony"),
        ("speaker sincerely likes rain", "the speaker sincerely likes rain"),
    ];
    let (cands, refs): (Vec<_>, Vec<_>) = pairs.iter().map(|(c, r)| (enc(c), enc(r))).unzip();
    for ((c, r), (cs, rs)) in pairs.iter().zip(cands.iter().zip(&refs)) {
        println!("\n{c:?}\n  vs {r:?}");
        println!(
            "  ROUGE-1 {:.3}  ROUGE-2 {:.3}  ROUGE-L {:.3} (LCS {})  BLEU-2 {:.3}",
            rouge_n(cs, rs, 1),
            rouge_n(cs, rs, 2),
            rouge_l(cs, rs),
            lcs_len(cs, rs),
            bleu_n(std::slice::from_ref(cs), std::slice::from_ref(rs), 2)?
        );
    }
    println!("\ncorpus report:\n{}", serde_json::to_string_pretty(&generation_report(&cands, &refs)?)?);
    Ok(())
}
