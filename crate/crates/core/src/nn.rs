//! Layers shared by the text encoder, fusion block, explanation decoder and
//! explanation encoder. Initialisation is uniform(-1/sqrt(fan_in),
//! 1/sqrt(fan_in)) for weights; biases start at zero and layer-norm gains at
//! one.

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SeededRng;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), group, (d_in, d_out), d_in, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), group, (1, d_out)));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add(y, b)
            }
            None => y,
        }
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).ncols()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        let gain = store.add_ones(format!("{name}.gain"), group, (1, d));
        let bias = store.add_zeros(format!("{name}.bias"), group, (1, d));
        Self { gain, bias }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.layer_norm(x, LN_EPS);
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        let scaled = t.mul(n, g);
        t.add(scaled, b)
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`,
/// split into `heads` column blocks. Returns the concatenated head outputs
/// and the per-head attention weights.
pub fn attention_core(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Array2<f64>>,
) -> (Var, Vec<Var>) {
    let d = t.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = mask.map(|m| t.constant(m.clone()));
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (t.slice_cols(q, lo, hi), t.slice_cols(k, lo, hi), t.slice_cols(v, lo, hi))
        };
        let scores = t.matmul_t(qh, kh);
        let mut scores = t.scale(scores, scale);
        if let Some(m) = mask {
            scores = t.add(scores, m);
        }
        let w = t.softmax_rows(scores);
        outs.push(t.matmul(w, vh));
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    (out, weights)
}

/// Lower-triangular mask: position `i` may attend to `j <= i`.
pub fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { MASKED })
}

/// Standard multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, group: ParamGroup, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), group, d, d, true),
            k: Linear::new(store, rng, &format!("{name}.k"), group, d, d, true),
            v: Linear::new(store, rng, &format!("{name}.v"), group, d, d, true),
            o: Linear::new(store, rng, &format!("{name}.o"), group, d, d, true),
            heads,
        }
    }

    pub fn forward_with_weights(&self, t: &mut Tape, query: Var, kv: Var, mask: Option<&Array2<f64>>) -> (Var, Vec<Var>) {
        let q = self.q.forward(t, query);
        let k = self.k.forward(t, kv);
        let v = self.v.forward(t, kv);
        let (heads, weights) = attention_core(t, q, k, v, self.heads, mask);
        (self.o.forward(t, heads), weights)
    }

    pub fn forward(&self, t: &mut Tape, query: Var, kv: Var, mask: Option<&Array2<f64>>) -> Var {
        self.forward_with_weights(t, query, kv, mask).0
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, group: ParamGroup, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), group, d, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), group, hidden, d, true),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }
}

/// Pre-norm transformer block, optionally with cross-attention to a memory.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        d: usize,
        heads: usize,
        hidden: usize,
        with_cross: bool,
    ) -> Self {
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), group, d);
        let self_attn = Attention::new(store, rng, &format!("{name}.self_attn"), group, d, heads);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), group, d),
                Attention::new(store, rng, &format!("{name}.cross_attn"), group, d, heads),
            )
        });
        let ln_ffn = LayerNorm::new(store, &format!("{name}.ln_ffn"), group, d);
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), group, d, hidden);
        Self { ln_self, self_attn, cross, ln_ffn, ffn }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, memory: Option<Var>, mask: Option<&Array2<f64>>) -> Var {
        let h = self.ln_self.forward(t, x);
        let a = self.self_attn.forward(t, h, h, mask);
        let mut x = t.add(x, a);
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(t, x);
            let c = attn.forward(t, h, mem, None);
            x = t.add(x, c);
        }
        let h = self.ln_ffn.forward(t, x);
        let f = self.ffn.forward(t, h);
        t.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", ParamGroup::New, 4, 2);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let mask = causal_mask(3);
        let mut t = Tape::new(&store);
        let xv = t.constant(x);
        let (_, weights) = attn.forward_with_weights(&mut t, xv, xv, Some(&mask));
        for w in weights {
            let w = t.value(w);
            assert!(w[(0, 1)] < 1e-300 && w[(0, 2)] < 1e-300 && w[(1, 2)] < 1e-300);
            assert!((w[(0, 0)] - 1.0).abs() < 1e-12);
        }
    }
}
