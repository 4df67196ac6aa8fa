//! Explanation generation: an autoregressive transformer decoder that
//! cross-attends to the fused representation, with teacher-forced NLL loss
//! and greedy / beam decoding.

use ndarray::{Array2, Axis};

use crate::autograd::{log_softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::vocab::{BOS, CLS, EOS, PAD};

/// Token sequence starting with BOS and ending with EOS (or cut at the
/// length limit).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExplanationSequence {
    tokens: Vec<usize>,
    is_ground_truth: bool,
}

impl ExplanationSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize, is_ground_truth: bool) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Invalid("explanation needs at least BOS and one more token".into()));
        }
        if tokens[0] != BOS {
            return Err(Error::Invalid(format!("explanation must start with BOS, got {}", tokens[0])));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} >= vocab size {vocab_size}")));
        }
        Ok(Self { tokens, is_ground_truth })
    }

    pub fn ground_truth(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        Self::new(tokens, vocab_size, true)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn is_ground_truth(&self) -> bool {
        self.is_ground_truth
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens up to and including the first EOS.
    pub fn through_eos(&self) -> &[usize] {
        match self.tokens.iter().position(|&t| t == EOS) {
            Some(i) => &self.tokens[..=i],
            None => &self.tokens,
        }
    }

    /// Words only: no BOS, nothing from the first EOS on.
    pub fn content(&self) -> &[usize] {
        let s = self.through_eos();
        let end = if s.last() == Some(&EOS) { s.len() - 1 } else { s.len() };
        &s[1..end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Beam search of the given width with length-normalised scores.
    Beam(usize),
}

impl DecodeMode {
    pub fn from_width(width: usize) -> Self {
        if width <= 1 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Beam(width)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub out: Linear,
    pub vocab_size: usize,
    /// Generated positions after BOS; the last one is always EOS.
    pub max_len: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        vocab_size: usize,
        d: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        max_len: usize,
    ) -> Self {
        let g = ParamGroup::Base;
        let embed = store.add_uniform(format!("{name}.embed"), g, (vocab_size, d), d, rng);
        let pos = store.add_uniform(format!("{name}.pos"), g, (max_len + 1, d), d, rng);
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(store, rng, &format!("{name}.layer{l}"), g, d, heads, hidden, true))
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.ln_final"), g, d);
        let out = Linear::new(store, rng, &format!("{name}.out"), g, d, vocab_size, true);
        Self { embed, pos, layers, final_ln, out, vocab_size, max_len }
    }

    /// Next-token logits for every prefix position, `prefix.len() x vocab`.
    pub fn logits(&self, t: &mut Tape, memory: Var, prefix: &[usize]) -> Var {
        let n = prefix.len();
        let embed = t.param(self.embed);
        let tok = t.gather_rows(embed, prefix);
        let pos = t.param(self.pos);
        let pos = t.slice_rows(pos, 0, n);
        let mut x = t.add(tok, pos);
        let mask = causal_mask(n);
        for layer in &self.layers {
            x = layer.forward(t, x, Some(memory), Some(&mask));
        }
        let x = self.final_ln.forward(t, x);
        self.out.forward(t, x)
    }

    fn last_log_probs(&self, store: &ParamStore, memory: &Array2<f64>, prefix: &[usize]) -> Vec<f64> {
        let mut t = Tape::new(store);
        let mem = t.constant(memory.clone());
        let logits = self.logits(&mut t, mem, prefix);
        let last = t.value(logits).index_axis(Axis(0), prefix.len() - 1).insert_axis(Axis(0)).to_owned();
        let mut lp = log_softmax_rows(&last).row(0).to_vec();
        for banned in [PAD, BOS, CLS] {
            if banned < lp.len() {
                lp[banned] = f64::NEG_INFINITY;
            }
        }
        lp
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Generates an explanation for `memory` (the fused representation).
pub fn decode_explanation(
    store: &ParamStore,
    decoder: &Decoder,
    memory: &Array2<f64>,
    mode: DecodeMode,
) -> Result<ExplanationSequence> {
    if memory.nrows() == 0 {
        return Err(Error::shape("decode_explanation", "empty fused representation"));
    }
    let tokens = match mode {
        DecodeMode::Greedy => greedy(store, decoder, memory),
        DecodeMode::Beam(width) => beam(store, decoder, memory, width.max(1)),
    };
    ExplanationSequence::new(tokens, decoder.vocab_size, false)
}

fn greedy(store: &ParamStore, decoder: &Decoder, memory: &Array2<f64>) -> Vec<usize> {
    let mut tokens = vec![BOS];
    for step in 0..decoder.max_len {
        if step + 1 == decoder.max_len {
            tokens.push(EOS);
            break;
        }
        let lp = decoder.last_log_probs(store, memory, &tokens);
        let next = argmax(&lp);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    tokens
}

fn beam(store: &ParamStore, decoder: &Decoder, memory: &Array2<f64>, width: usize) -> Vec<usize> {
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let normalised = |seq: &Vec<usize>, score: f64| score / (seq.len() - 1) as f64;
    for step in 0..decoder.max_len {
        let forced = step + 1 == decoder.max_len;
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &alive {
            let lp = decoder.last_log_probs(store, memory, prefix);
            let choices: Vec<usize> = if forced { vec![EOS] } else { (0..lp.len()).collect() };
            for tok in choices {
                if lp[tok].is_finite() || forced {
                    let mut seq = prefix.clone();
                    seq.push(tok);
                    candidates.push((seq, score + lp[tok]));
                }
            }
        }
        // stable: ties keep earlier beams / lower token ids first
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        candidates.truncate(width);
        alive.clear();
        for (seq, score) in candidates {
            if seq.last() == Some(&EOS) {
                finished.push((seq, score));
            } else {
                alive.push((seq, score));
            }
        }
        if finished.len() >= width || alive.is_empty() {
            break;
        }
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (seq, score) in finished {
        let s = normalised(&seq, score);
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((seq, s));
        }
    }
    best.map(|(seq, _)| seq).unwrap_or_else(|| vec![BOS, EOS])
}

/// Mean negative log-likelihood of `targets[i]` under row `i` of `log_probs`.
pub fn token_nll(t: &mut Tape, log_probs: Var, targets: &[usize]) -> Var {
    let entries: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    let picked = t.pick(log_probs, &entries);
    let mean = t.mean(picked);
    t.scale(mean, -1.0)
}

fn teacher_forcing_split(target: &ExplanationSequence) -> Result<(&[usize], &[usize])> {
    let seq = target.through_eos();
    if seq.len() < 2 {
        return Err(Error::Invalid("empty ground-truth explanation".into()));
    }
    Ok((&seq[..seq.len() - 1], &seq[1..]))
}

/// Teacher-forced mean token NLL of `target` given `memory`. Tokens after the
/// first EOS are ignored.
pub fn explanation_loss(t: &mut Tape, decoder: &Decoder, memory: Var, target: &ExplanationSequence) -> Result<Var> {
    let (inputs, targets) = teacher_forcing_split(target)?;
    if inputs.len() > decoder.max_len {
        return Err(Error::Invalid(format!(
            "explanation of {} positions exceeds decoder limit {}",
            inputs.len(),
            decoder.max_len
        )));
    }
    let logits = decoder.logits(t, memory, inputs);
    let lp = t.log_softmax_rows(logits);
    Ok(token_nll(t, lp, targets))
}

/// `(correct, total)` teacher-forced next-token predictions.
pub fn teacher_forced_hits(
    store: &ParamStore,
    decoder: &Decoder,
    memory: &Array2<f64>,
    target: &ExplanationSequence,
) -> Result<(usize, usize)> {
    let (inputs, targets) = teacher_forcing_split(target)?;
    let mut t = Tape::new(store);
    let mem = t.constant(memory.clone());
    let logits = decoder.logits(&mut t, mem, inputs);
    let logits = t.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &tok)| argmax(logits.row(i).as_slice().expect("contiguous")) == tok)
        .count();
    Ok((correct, targets.len()))
}
