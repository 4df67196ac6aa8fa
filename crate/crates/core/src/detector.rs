//! Detection head, the joint training objective and inference-time
//! interventions.
//!
//! Per training sample the loss is
//! `reconstruction + KL(q(F|E') || p(F|E_hat)) + explanation NLL`, where the
//! reconstruction term averages the cross-entropy over `H` reparameterised
//! draws of `F`. The draws come from the latent of whichever explanation
//! `intervene_select` picked, so with probability epsilon the classifier
//! sees features of the ground truth. At inference `F` is the mean of the
//! chosen latent.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::explain::{decode_explanation, explanation_loss, DecodeMode, ExplanationSequence};
use crate::latent::{draw_substitution, kl_diag_tape, reparameterize, InterventionPolicy, LatentGaussian};
use crate::model::Model;
use crate::nn::Linear;
use crate::params::Gradients;
use crate::rng::{standard_normal, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationSource {
    Generated,
    GroundTruthIntervened,
    NoiseIntervened,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub probs: [f64; 2],
    pub predicted_label: usize,
    pub explanation_used: ExplanationSequence,
    pub source: ExplanationSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub exp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruction: f64, kl: f64, exp: f64) -> Self {
        Self { reconstruction, kl, exp, total: reconstruction + kl + exp }
    }

    pub fn is_additive(&self) -> bool {
        (self.total - (self.reconstruction + self.kl + self.exp)).abs() <= 1e-9 * self.total.abs().max(1.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.reconstruction, self.kl, self.exp, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(sum(|l| l.reconstruction), sum(|l| l.kl), sum(|l| l.exp))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Normal,
    DoE,
    DoF,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::Normal, InferenceMode::DoE, InferenceMode::DoF];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Normal => "normal",
            InferenceMode::DoE => "do_e",
            InferenceMode::DoF => "do_f",
        }
    }
}

fn check_pair(f_len: usize, m: &Array2<f64>, d_f: usize, d: usize) -> Result<()> {
    if m.nrows() == 0 {
        return Err(Error::shape("classify", "empty fused representation"));
    }
    if f_len != d_f || m.ncols() != d {
        return Err(Error::shape("classify", format!("F has {f_len} (want {d_f}), M has width {} (want {d})", m.ncols())));
    }
    Ok(())
}

/// Logits of `[F; mean(M)] W_y + b_y` on the tape.
pub fn classifier_logits(t: &mut Tape, head: &Linear, f: Var, m: Var) -> Var {
    let pooled = t.mean_rows(m);
    let x = t.concat_cols(&[f, pooled]);
    head.forward(t, x)
}

/// Class probabilities for a latent value `f` and fused representation `m`.
pub fn classify(model: &Model, f: &[f64], m: &Array2<f64>) -> Result<[f64; 2]> {
    check_pair(f.len(), m, model.config.d_f, model.config.d)?;
    let mut t = Tape::new(&model.params);
    let fv = t.constant(crate::autograd::row(f));
    let mv = t.constant(m.clone());
    let logits = classifier_logits(&mut t, &model.arch.classifier, fv, mv);
    let p = softmax_rows(t.value(logits));
    Ok([p[[0, 0]], p[[0, 1]]])
}

fn argmax2(p: &[f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

/// Random inputs of one training step, drawn up front so a step can be
/// replayed exactly (finite differences, resume).
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub intervened: bool,
    /// `H` rows of `d_F` standard normals.
    pub noise: Vec<Vec<f64>>,
}

impl StepDraws {
    /// One intervention draw followed by `H * d_F` normals.
    pub fn draw(model: &Model, policy: &InterventionPolicy, rng: &mut SeededRng) -> Self {
        let intervened = draw_substitution(policy, rng);
        let noise = (0..model.config.mc_samples).map(|_| standard_normal(rng, model.config.d_f)).collect();
        Self { intervened, noise }
    }
}

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub kl: Var,
    pub exp: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, t: &Tape) -> LossBreakdown {
        LossBreakdown {
            reconstruction: t.scalar(self.reconstruction),
            kl: t.scalar(self.kl),
            exp: t.scalar(self.exp),
            total: t.scalar(self.total),
        }
    }
}

/// Monte-Carlo cross-entropy at `label` plus the analytic KL. `sample_from`
/// supplies the draws, `q` and `p` the two sides of the KL term.
#[allow(clippy::too_many_arguments)]
pub fn classification_loss(
    t: &mut Tape,
    head: &Linear,
    label: usize,
    m: Var,
    sample_from: (Var, Var),
    q: (Var, Var),
    p: (Var, Var),
    noise: &[Vec<f64>],
) -> Result<(Var, Var)> {
    if noise.is_empty() {
        return Err(Error::Invalid("H must be >= 1".into()));
    }
    if label > 1 {
        return Err(Error::Invalid(format!("label {label} is not binary")));
    }
    let mut terms = Vec::with_capacity(noise.len());
    for eps in noise {
        let f = reparameterize(t, sample_from.0, sample_from.1, eps);
        let logits = classifier_logits(t, head, f, m);
        let lp = t.log_softmax_rows(logits);
        let picked = t.pick(lp, &[(0, label)]);
        terms.push(picked);
    }
    let stacked = t.concat_cols(&terms);
    let mean = t.mean(stacked);
    let recon = t.scale(mean, -1.0);
    let kl = kl_diag_tape(t, q.0, q.1, p.0, p.1);
    Ok((recon, kl))
}

/// Builds the full per-sample objective on `t` given the decoded `generated`
/// explanation and pre-drawn randomness.
pub fn loss_on_tape(
    t: &mut Tape,
    model: &Model,
    sample: &MultimodalSample,
    m: Var,
    generated: &ExplanationSequence,
    draws: &StepDraws,
) -> Result<LossVars> {
    let label = sample.label()?;
    let truth = sample.explanation()?;
    let enc = &model.arch.expl_encoder;
    let q = enc.encode(t, truth)?;
    let p = enc.encode(t, generated)?;
    let chosen = if draws.intervened { q } else { p };
    let (reconstruction, kl) = classification_loss(
        t,
        &model.arch.classifier,
        label,
        m,
        (chosen.mu, chosen.log_var),
        (q.mu, q.log_var),
        (p.mu, p.log_var),
        &draws.noise,
    )?;
    let exp = explanation_loss(t, &model.arch.decoder, m, truth)?;
    let partial = t.add(reconstruction, kl);
    let total = t.add(partial, exp);
    Ok(LossVars { reconstruction, kl, exp, total })
}

pub fn decode_mode(model: &Model) -> DecodeMode {
    DecodeMode::from_width(model.config.beam_width)
}

/// Everything one training step needs to know about a sample.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub generated: ExplanationSequence,
    pub intervened: bool,
}

/// Forward and backward pass. `generated` reuses a cached decode; otherwise
/// the explanation is decoded from the current `M` (and detached).
pub fn loss_and_grads(
    model: &Model,
    sample: &MultimodalSample,
    generated: Option<&ExplanationSequence>,
    draws: &StepDraws,
) -> Result<StepResult> {
    let mut t = Tape::new(&model.params);
    let m = model.fused_on_tape(&mut t, sample)?;
    let generated = match generated {
        Some(g) => g.clone(),
        None => decode_explanation(&model.params, &model.arch.decoder, t.value(m), decode_mode(model))?,
    };
    let vars = loss_on_tape(&mut t, model, sample, m, &generated, draws)?;
    let loss = vars.values(&t);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss for sample {}: {loss:?}", sample.id)));
    }
    let grads = t.backward(vars.total);
    Ok(StepResult { loss, grads, generated, intervened: draws.intervened })
}

/// Loss value only, drawing the step randomness from `rng`.
pub fn total_loss(model: &Model, sample: &MultimodalSample, policy: &InterventionPolicy, rng: &mut SeededRng) -> Result<LossBreakdown> {
    let draws = StepDraws::draw(model, policy, rng);
    loss_value(model, sample, None, &draws)
}

/// Loss value under fixed draws (and optionally a fixed decode).
pub fn loss_value(
    model: &Model,
    sample: &MultimodalSample,
    generated: Option<&ExplanationSequence>,
    draws: &StepDraws,
) -> Result<LossBreakdown> {
    let mut t = Tape::new(&model.params);
    let m = model.fused_on_tape(&mut t, sample)?;
    let generated = match generated {
        Some(g) => g.clone(),
        None => decode_explanation(&model.params, &model.arch.decoder, t.value(m), decode_mode(model))?,
    };
    Ok(loss_on_tape(&mut t, model, sample, m, &generated, draws)?.values(&t))
}

/// Generated explanation for `sample` under the current parameters.
pub fn generate(model: &Model, sample: &MultimodalSample) -> Result<(Array2<f64>, ExplanationSequence)> {
    let m = model.fused(sample)?;
    let e = decode_explanation(&model.params, &model.arch.decoder, &m, decode_mode(model))?;
    Ok((m, e))
}

/// Latent of an explanation under the current parameters.
pub fn latent_of(model: &Model, expl: &ExplanationSequence) -> Result<LatentGaussian> {
    Ok(model.arch.expl_encoder.encode_values(&model.params, expl)?.1)
}

/// Prediction with an optional intervention. `do_f` noise is drawn from
/// `rng`; the other modes leave it untouched.
pub fn infer(model: &Model, sample: &MultimodalSample, mode: InferenceMode, rng: &mut SeededRng) -> Result<DetectionOutput> {
    let (m, generated) = generate(model, sample)?;
    infer_with(model, sample, &m, generated, mode, rng)
}

/// [`infer`] with `M` and the generated explanation supplied by the caller.
pub fn infer_with(
    model: &Model,
    sample: &MultimodalSample,
    m: &Array2<f64>,
    generated: ExplanationSequence,
    mode: InferenceMode,
    rng: &mut SeededRng,
) -> Result<DetectionOutput> {
    let (f, used, source) = match mode {
        InferenceMode::Normal => (latent_of(model, &generated)?.mu, generated, ExplanationSource::Generated),
        InferenceMode::DoE => {
            let truth = sample.explanation.clone().ok_or(Error::MissingGroundTruth("do(E) inference"))?;
            (latent_of(model, &truth)?.mu, truth, ExplanationSource::GroundTruthIntervened)
        }
        InferenceMode::DoF => (standard_normal(rng, model.config.d_f), generated, ExplanationSource::NoiseIntervened),
    };
    let probs = classify(model, &f, m)?;
    Ok(DetectionOutput { probs, predicted_label: argmax2(&probs), explanation_used: used, source })
}

/// `log p(y | M, F)` for a latent value.
pub fn log_likelihood(model: &Model, label: usize, f: &[f64], m: &Array2<f64>) -> Result<f64> {
    Ok(classify(model, f, m)?[label].ln())
}
