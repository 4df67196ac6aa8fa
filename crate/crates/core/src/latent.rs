//! Explanation -> causal feature: a bidirectional transformer over
//! `[CLS] + explanation`, two MLP heads for the mean and log-variance of a
//! diagonal Gaussian, the intervention that swaps in the ground-truth
//! explanation, and reparameterised sampling.
//!
//! The heads only ever emit `log sigma^2`, so the variance is positive by
//! construction. Network outputs are clamped to `[-LOG_VAR_LIMIT, LOG_VAR_LIMIT]`
//! before use; Gaussians built by hand are taken as given.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::explain::ExplanationSequence;
use crate::nn::{LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{standard_normal, SeededRng};
use crate::vocab::CLS;

pub const LOG_VAR_LIMIT: f64 = 20.0;

/// `N(mu, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() || mu.is_empty() {
            return Err(Error::shape("latent_gaussian", format!("mu {} vs log_var {}", mu.len(), log_var.len())));
        }
        if mu.iter().chain(log_var.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent gaussian parameters".into()));
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mu: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), x)| -0.5 * (ln_2pi + lv + (x - m) * (x - m) * (-lv).exp()))
            .sum()
    }
}

/// `F = mu + noise * exp(log_var / 2)`, `noise ~ N(0, I)`.
pub fn sample_latent(g: &LatentGaussian, rng: &mut SeededRng) -> Vec<f64> {
    let noise = standard_normal(rng, g.dim());
    sample_with_noise(g, &noise)
}

pub fn sample_with_noise(g: &LatentGaussian, noise: &[f64]) -> Vec<f64> {
    g.mu.iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + e * (0.5 * lv).exp())
        .collect()
}

/// Closed-form `KL(q || p)` for diagonal Gaussians:
/// `1/2 [tr(S_p^-1 S_q) + dmu^T S_p^-1 dmu - d + log(|S_p| / |S_q|)]`, `dmu = mu_p - mu_q`.
pub fn kl_diag_gaussians(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_diag_gaussians", format!("{} vs {}", q.dim(), p.dim())));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.log_var[i], p.log_var[i]);
        let dm = p.mu[i] - q.mu[i];
        total += (lq - lp).exp() + dm * dm * (-lp).exp() - 1.0 + lp - lq;
    }
    Ok(0.5 * total)
}

/// Differentiable KL on `1 x d_F` rows; gradients reach both arguments.
pub fn kl_diag_tape(t: &mut Tape, q_mu: Var, q_log_var: Var, p_mu: Var, p_log_var: Var) -> Var {
    let lv_diff = t.sub(q_log_var, p_log_var);
    let ratio = t.exp(lv_diff);
    let dm = t.sub(p_mu, q_mu);
    let dm2 = t.mul(dm, dm);
    let neg_lp = t.scale(p_log_var, -1.0);
    let inv_p = t.exp(neg_lp);
    let maha = t.mul(dm2, inv_p);
    let terms = t.add(ratio, maha);
    let terms = t.sub(terms, lv_diff);
    let terms = t.affine(terms, 1.0, -1.0);
    let total = t.sum(terms);
    t.scale(total, 0.5)
}

/// Differentiable reparameterised draw with externally supplied noise.
pub fn reparameterize(t: &mut Tape, mu: Var, log_var: Var, noise: &[f64]) -> Var {
    let half = t.scale(log_var, 0.5);
    let sigma = t.exp(half);
    let eps = t.constant(crate::autograd::row(noise));
    let scaled = t.mul(sigma, eps);
    t.add(mu, scaled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// Training: ground truth with probability epsilon, generated otherwise.
    TrainMask,
    /// Always the ground truth.
    DoE,
    /// Explanation untouched; the latent itself is replaced downstream.
    DoF,
    /// Always the generated explanation.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub epsilon: f64,
    pub mode: InterventionMode,
}

impl InterventionPolicy {
    pub fn new(epsilon: f64, mode: InterventionMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Invalid(format!("intervention epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self { epsilon, mode })
    }

    pub fn training(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, InterventionMode::TrainMask)
    }
}

/// Whether the ground truth replaces the generated explanation.
/// `TrainMask` always consumes one uniform draw, whatever epsilon is.
pub fn draw_substitution(policy: &InterventionPolicy, rng: &mut SeededRng) -> bool {
    match policy.mode {
        InterventionMode::TrainMask => rng.random::<f64>() < policy.epsilon,
        InterventionMode::DoE => true,
        InterventionMode::DoF | InterventionMode::None => false,
    }
}

/// Picks the explanation that feeds the latent. Returns the choice and
/// whether the ground truth was substituted.
pub fn intervene_select<'a>(
    generated: &'a ExplanationSequence,
    ground_truth: &'a ExplanationSequence,
    policy: &InterventionPolicy,
    rng: &mut SeededRng,
) -> (&'a ExplanationSequence, bool) {
    if draw_substitution(policy, rng) {
        (ground_truth, true)
    } else {
        (generated, false)
    }
}

#[derive(Clone, Debug)]
pub struct ExplanationEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub mu_hidden: Linear,
    pub mu_out: Linear,
    pub log_var_hidden: Linear,
    pub log_var_out: Linear,
    pub max_len: usize,
}

/// Tape handles for one encoded explanation.
#[derive(Clone, Copy, Debug)]
pub struct EncodedExplanation {
    /// `1 x d`
    pub f_cls: Var,
    /// `1 x d_F`
    pub mu: Var,
    /// `1 x d_F`, clamped.
    pub log_var: Var,
}

impl ExplanationEncoder {
    /// `max_len` counts the explanation tokens; the CLS slot is added on top.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        vocab_size: usize,
        d: usize,
        d_f: usize,
        heads: usize,
        hidden: usize,
        layers: usize,
        max_len: usize,
    ) -> Self {
        let g = ParamGroup::New;
        let embed = store.add_uniform(format!("{name}.embed"), g, (vocab_size, d), d, rng);
        let pos = store.add_uniform(format!("{name}.pos"), g, (max_len + 1, d), d, rng);
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(store, rng, &format!("{name}.layer{l}"), g, d, heads, hidden, false))
            .collect();
        Self {
            embed,
            pos,
            layers,
            final_ln: LayerNorm::new(store, &format!("{name}.ln_final"), g, d),
            mu_hidden: Linear::new(store, rng, &format!("{name}.mlp_mu.0"), g, d, d, true),
            mu_out: Linear::new(store, rng, &format!("{name}.mlp_mu.1"), g, d, d_f, true),
            log_var_hidden: Linear::new(store, rng, &format!("{name}.mlp_log_var.0"), g, d, d, true),
            log_var_out: Linear::new(store, rng, &format!("{name}.mlp_log_var.1"), g, d, d_f, true),
            max_len,
        }
    }

    pub fn encode(&self, t: &mut Tape, expl: &ExplanationSequence) -> Result<EncodedExplanation> {
        let toks = expl.through_eos();
        if toks.is_empty() {
            return Err(Error::Invalid("cannot encode an empty explanation".into()));
        }
        let toks = &toks[..toks.len().min(self.max_len)];
        let mut ids = Vec::with_capacity(toks.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(toks);
        let embed = t.param(self.embed);
        let x = t.gather_rows(embed, &ids);
        let pos = t.param(self.pos);
        let pos = t.slice_rows(pos, 0, ids.len());
        let mut x = t.add(x, pos);
        for layer in &self.layers {
            x = layer.forward(t, x, None, None);
        }
        let x = self.final_ln.forward(t, x);
        let f_cls = t.slice_rows(x, 0, 1);
        let h = self.mu_hidden.forward(t, f_cls);
        let h = t.gelu(h);
        let mu = self.mu_out.forward(t, h);
        let h = self.log_var_hidden.forward(t, f_cls);
        let h = t.gelu(h);
        let raw = self.log_var_out.forward(t, h);
        let log_var = t.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        Ok(EncodedExplanation { f_cls, mu, log_var })
    }

    /// Value-level encoding: `(F_cls, latent)`.
    pub fn encode_values(&self, store: &ParamStore, expl: &ExplanationSequence) -> Result<(Vec<f64>, LatentGaussian)> {
        let mut t = Tape::new(store);
        let enc = self.encode(&mut t, expl)?;
        let f_cls = t.value(enc.f_cls).row(0).to_vec();
        let g = LatentGaussian::new(t.value(enc.mu).row(0).to_vec(), t.value(enc.log_var).row(0).to_vec())?;
        Ok((f_cls, g))
    }
}
