//! Align-then-fusion: turns text, visual and acoustic features into the fused
//! representation `M`.
//!
//! The pipeline is
//! 1. alignment: visual and acoustic rows attend over the text,
//! 2. context-aware self-attention over the text, once with each aligned
//!    modality as context,
//! 3. reciprocal contextual augmentation: text queries attend over one
//!    contextualised modality while the other one acts as context,
//! 4. a sigmoid-gated residual sum onto the text.
//!
//! Sequences are row-major (`positions x features`). In the context-aware
//! attention the keys and values are blended with the projected context,
//! `K' = (1 - l_k) * K + l_k * (C U_k)`, where the per-position gate is
//! `l_k = sigmoid(K w_k1 + C U_k w_k2)`; values use their own `U_v`, `w_v1`,
//! `w_v2`. A context with a different number of rows than the keys is
//! mean-pooled to a single row and broadcast.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{attention_core, Attention, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Acoustic,
}

/// Attention whose keys and values are blended with an external context.
#[derive(Clone, Debug)]
pub struct ContextAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// `d_c x d`
    pub u_k: ParamId,
    pub u_v: ParamId,
    /// `d x 1`
    pub w_k1: ParamId,
    pub w_k2: ParamId,
    pub w_v1: ParamId,
    pub w_v2: ParamId,
    pub heads: usize,
}

/// Output of one context-aware attention call plus its gate activations.
#[derive(Clone, Debug)]
pub struct ContextAttentionTrace {
    pub out: Var,
    /// `rows(K) x 1`, strictly inside (0, 1).
    pub lambda_k: Var,
    pub lambda_v: Var,
    pub weights: Vec<Var>,
}

impl ContextAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        d: usize,
        d_c: usize,
        heads: usize,
    ) -> Self {
        let g = ParamGroup::New;
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), g, d, d, true),
            k: Linear::new(store, rng, &format!("{name}.k"), g, d, d, true),
            v: Linear::new(store, rng, &format!("{name}.v"), g, d, d, true),
            o: Linear::new(store, rng, &format!("{name}.o"), g, d, d, true),
            u_k: store.add_uniform(format!("{name}.u_k"), g, (d_c, d), d_c, rng),
            u_v: store.add_uniform(format!("{name}.u_v"), g, (d_c, d), d_c, rng),
            w_k1: store.add_uniform(format!("{name}.w_k1"), g, (d, 1), d, rng),
            w_k2: store.add_uniform(format!("{name}.w_k2"), g, (d, 1), d, rng),
            w_v1: store.add_uniform(format!("{name}.w_v1"), g, (d, 1), d, rng),
            w_v2: store.add_uniform(format!("{name}.w_v2"), g, (d, 1), d, rng),
            heads,
        }
    }

    fn blend(&self, t: &mut Tape, x: Var, ctx: Var, u: ParamId, w1: ParamId, w2: ParamId) -> (Var, Var) {
        let u = t.param(u);
        let w1 = t.param(w1);
        let w2 = t.param(w2);
        let cu = t.matmul(ctx, u);
        let self_term = t.matmul(x, w1);
        let ctx_term = t.matmul(cu, w2);
        let pre = t.add(self_term, ctx_term);
        let lambda = t.sigmoid(pre);
        let keep = t.one_minus(lambda);
        let kept = t.mul(keep, x);
        let injected = t.mul(lambda, cu);
        (t.add(kept, injected), lambda)
    }

    /// Queries from `query_src`, keys/values from `kv_src`, blended with `context`.
    pub fn forward(&self, t: &mut Tape, query_src: Var, kv_src: Var, context: Var) -> Result<ContextAttentionTrace> {
        let d = t.store().value(self.q.w).nrows();
        let d_c = t.store().value(self.u_k).nrows();
        for (what, v) in [("query", query_src), ("key/value", kv_src)] {
            if t.shape(v).1 != d {
                return Err(Error::shape("context_attention", format!("{what} width {} != d {d}", t.shape(v).1)));
            }
        }
        let (c_rows, c_cols) = t.shape(context);
        if c_cols != d_c {
            return Err(Error::shape("context_attention", format!("context width {c_cols} != d_c {d_c}")));
        }
        if c_rows == 0 {
            return Err(Error::shape("context_attention", "empty context"));
        }
        if t.value(context).iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("context_attention context".into()));
        }
        let ctx = if c_rows == t.shape(kv_src).0 { context } else { t.mean_rows(context) };
        let q = self.q.forward(t, query_src);
        let k = self.k.forward(t, kv_src);
        let v = self.v.forward(t, kv_src);
        let (k_hat, lambda_k) = self.blend(t, k, ctx, self.u_k, self.w_k1, self.w_k2);
        let (v_hat, lambda_v) = self.blend(t, v, ctx, self.u_v, self.w_v1, self.w_v2);
        if t.value(lambda_k).iter().chain(t.value(lambda_v).iter()).any(|x| x.is_nan()) {
            return Err(Error::NonFinite("context_attention gate".into()));
        }
        let (heads, weights) = attention_core(t, q, k_hat, v_hat, self.heads, None);
        let out = self.o.forward(t, heads);
        Ok(ContextAttentionTrace { out, lambda_k, lambda_v, weights })
    }
}

#[derive(Clone, Debug)]
pub struct Gate {
    /// `2d -> d`, applied to `[T, V_out]`.
    pub visual: Linear,
    /// `2d -> d`, applied to `[T, A_out]`.
    pub acoustic: Linear,
}

#[derive(Clone, Debug)]
pub struct GateTrace {
    pub fused: Var,
    pub w_v: Var,
    pub w_a: Var,
}

#[derive(Clone, Debug)]
pub struct Atf {
    pub align_visual: Attention,
    pub align_acoustic: Attention,
    pub context_visual: ContextAttention,
    pub context_acoustic: ContextAttention,
    pub reciprocal_visual: ContextAttention,
    pub reciprocal_acoustic: ContextAttention,
    pub gate: Gate,
    pub d: usize,
}

impl Atf {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, d: usize, d_c: usize, heads: usize) -> Self {
        let g = ParamGroup::New;
        Self {
            align_visual: Attention::new(store, rng, &format!("{name}.align_v"), g, d, heads),
            align_acoustic: Attention::new(store, rng, &format!("{name}.align_a"), g, d, heads),
            context_visual: ContextAttention::new(store, rng, &format!("{name}.context_v"), d, d_c, heads),
            context_acoustic: ContextAttention::new(store, rng, &format!("{name}.context_a"), d, d_c, heads),
            reciprocal_visual: ContextAttention::new(store, rng, &format!("{name}.reciprocal_v"), d, d_c, heads),
            reciprocal_acoustic: ContextAttention::new(store, rng, &format!("{name}.reciprocal_a"), d, d_c, heads),
            gate: Gate {
                visual: Linear::new(store, rng, &format!("{name}.gate_v"), g, 2 * d, d, true),
                acoustic: Linear::new(store, rng, &format!("{name}.gate_a"), g, 2 * d, d, true),
            },
            d,
        }
    }
}

/// Every intermediate of one fusion pass.
#[derive(Clone, Debug)]
pub struct AtfTrace {
    pub v_align: Var,
    pub a_align: Var,
    pub v_con: ContextAttentionTrace,
    pub a_con: ContextAttentionTrace,
    pub v_out: ContextAttentionTrace,
    pub a_out: ContextAttentionTrace,
    pub gate: GateTrace,
}

impl AtfTrace {
    pub fn fused(&self) -> Var {
        self.gate.fused
    }
}

fn check_width(t: &Tape, op: &'static str, what: &str, v: Var, d: usize) -> Result<()> {
    let (rows, cols) = t.shape(v);
    if cols != d {
        return Err(Error::shape(op, format!("{what} width {cols} != {d}")));
    }
    if rows == 0 {
        return Err(Error::shape(op, format!("{what} has no rows")));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `query_seq` over `kv_seq`.
pub fn cross_attention(t: &mut Tape, attn: &Attention, query_seq: Var, kv_seq: Var) -> Result<Var> {
    cross_attention_with_weights(t, attn, query_seq, kv_seq).map(|(out, _)| out)
}

pub fn cross_attention_with_weights(
    t: &mut Tape,
    attn: &Attention,
    query_seq: Var,
    kv_seq: Var,
) -> Result<(Var, Vec<Var>)> {
    let d = t.store().value(attn.q.w).nrows();
    check_width(t, "cross_attention", "query", query_seq, d)?;
    check_width(t, "cross_attention", "key/value", kv_seq, d)?;
    Ok(attn.forward_with_weights(t, query_seq, kv_seq, None))
}

/// Visual and acoustic rows query the text: returns `(V_align, A_align)`.
pub fn align_modalities(t: &mut Tape, atf: &Atf, text: Var, visual: Var, acoustic: Var) -> Result<(Var, Var)> {
    let v = cross_attention(t, &atf.align_visual, visual, text)?;
    let a = cross_attention(t, &atf.align_acoustic, acoustic, text)?;
    Ok((v, a))
}

/// Self-attention over `text` with `context` blended into keys and values.
pub fn context_self_attention(t: &mut Tape, ca: &ContextAttention, text: Var, context: Var) -> Result<ContextAttentionTrace> {
    ca.forward(t, text, text, context)
}

/// Attention of `query_seq` over `kv_seq` with `context` blended into keys and values.
pub fn context_cross_attention(
    t: &mut Tape,
    ca: &ContextAttention,
    query_seq: Var,
    kv_seq: Var,
    context: Var,
) -> Result<ContextAttentionTrace> {
    ca.forward(t, query_seq, kv_seq, context)
}

/// `M = T + w_v * V_out + w_a * A_out` with sigmoid gates over `[T, X_out]`.
pub fn gated_fuse(t: &mut Tape, gate: &Gate, text: Var, v_out: Var, a_out: Var) -> Result<GateTrace> {
    let shape = t.shape(text);
    for (what, v) in [("V_out", v_out), ("A_out", a_out)] {
        if t.shape(v) != shape {
            return Err(Error::shape("gated_fuse", format!("{what} shape {:?} != text shape {shape:?}", t.shape(v))));
        }
    }
    let tv = t.concat_cols(&[text, v_out]);
    let pre_v = gate.visual.forward(t, tv);
    let w_v = t.sigmoid(pre_v);
    let ta = t.concat_cols(&[text, a_out]);
    let pre_a = gate.acoustic.forward(t, ta);
    let w_a = t.sigmoid(pre_a);
    let gv = t.mul(w_v, v_out);
    let ga = t.mul(w_a, a_out);
    let partial = t.add(text, gv);
    let fused = t.add(partial, ga);
    Ok(GateTrace { fused, w_v, w_a })
}

/// Full align -> context -> reciprocal -> gate pipeline.
pub fn atf_forward(t: &mut Tape, atf: &Atf, text: Var, visual: Var, acoustic: Var) -> Result<AtfTrace> {
    check_width(t, "atf_forward", "text", text, atf.d)?;
    let (v_align, a_align) = align_modalities(t, atf, text, visual, acoustic)?;
    let v_con = context_self_attention(t, &atf.context_visual, text, v_align)?;
    let a_con = context_self_attention(t, &atf.context_acoustic, text, a_align)?;
    let v_out = context_cross_attention(t, &atf.reciprocal_visual, text, v_con.out, a_con.out)?;
    let a_out = context_cross_attention(t, &atf.reciprocal_acoustic, text, a_con.out, v_con.out)?;
    let gate = gated_fuse(t, &atf.gate, text, v_out.out, a_out.out)?;
    Ok(AtfTrace { v_align, a_align, v_con, a_con, v_out, a_out, gate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn random(rng: &mut SeededRng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn setup(d: usize, heads: usize) -> (ParamStore, Atf) {
        let mut rng = seeded_rng(11);
        let mut store = ParamStore::new();
        let atf = Atf::new(&mut store, &mut rng, "atf", d, d, heads);
        (store, atf)
    }

    fn zero_param(store: &mut ParamStore, id: ParamId) {
        store.value_mut(id).fill(0.0);
    }

    #[test]
    fn single_key_attention_is_a_linear_map_of_that_value() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(1);
        let mut t = Tape::new(&store);
        let q = t.constant(random(&mut rng, (3, 4)));
        let kv_val = random(&mut rng, (1, 4));
        let kv = t.constant(kv_val.clone());
        let (out, weights) = cross_attention_with_weights(&mut t, &atf.align_visual, q, kv).unwrap();
        for w in &weights {
            assert!(t.value(*w).iter().all(|&x| (x - 1.0).abs() < 1e-15));
        }
        let a = &atf.align_visual;
        let v = kv_val.dot(store.value(a.v.w)) + store.value(a.v.b.unwrap());
        let expected = v.dot(store.value(a.o.w)) + store.value(a.o.b.unwrap());
        for row in t.value(out).rows() {
            for (x, y) in row.iter().zip(expected.row(0).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_inputs_with_zero_biases_give_zero_attention() {
        let (store, atf) = setup(4, 2);
        let mut t = Tape::new(&store);
        let q = t.constant(Array2::zeros((2, 4)));
        let kv = t.constant(Array2::zeros((3, 4)));
        let out = cross_attention(&mut t, &atf.align_visual, q, kv).unwrap();
        assert!(t.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rows_match_hand_softmax() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(2);
        let qv = random(&mut rng, (3, 4));
        let kvv = random(&mut rng, (2, 4));
        let mut t = Tape::new(&store);
        let q = t.constant(qv.clone());
        let kv = t.constant(kvv.clone());
        let (_, weights) = cross_attention_with_weights(&mut t, &atf.align_visual, q, kv).unwrap();
        let a = &atf.align_visual;
        let qp = qv.dot(store.value(a.q.w));
        let kp = kvv.dot(store.value(a.k.w));
        for (h, w) in weights.iter().enumerate() {
            let w = t.value(*w);
            for i in 0..3 {
                let scores: Vec<f64> = (0..2)
                    .map(|j| (0..2).map(|c| qp[(i, 2 * h + c)] * kp[(j, 2 * h + c)]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..2 {
                    assert!((w[(i, j)] - scores[j].exp() / z).abs() < 1e-12);
                }
                assert!((w.row(i).sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, atf) = setup(4, 2);
        let mut t = Tape::new(&store);
        let q = t.constant(Array2::zeros((2, 3)));
        let kv = t.constant(Array2::zeros((3, 4)));
        assert!(matches!(cross_attention(&mut t, &atf.align_visual, q, kv), Err(Error::Shape { .. })));
    }

    #[test]
    fn alignment_is_zero_for_zero_text_and_composes_cross_attention() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(3);
        let (tv, vv, av) = (random(&mut rng, (5, 4)), random(&mut rng, (1, 4)), random(&mut rng, (1, 4)));
        let mut t = Tape::new(&store);
        let zero_text = t.constant(Array2::zeros((5, 4)));
        let v = t.constant(vv.clone());
        let a = t.constant(av.clone());
        let (v_al, a_al) = align_modalities(&mut t, &atf, zero_text, v, a).unwrap();
        assert!(t.value(v_al).iter().chain(t.value(a_al).iter()).all(|&x| x == 0.0));
        assert_eq!(t.shape(v_al), (1, 4));

        let text = t.constant(tv);
        let (v_al, _) = align_modalities(&mut t, &atf, text, v, a).unwrap();
        let direct = cross_attention(&mut t, &atf.align_visual, v, text).unwrap();
        assert_eq!(t.value(v_al), t.value(direct));
    }

    #[test]
    fn zero_context_leaves_only_self_gate() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(4);
        let tv = random(&mut rng, (3, 4));
        let mut t = Tape::new(&store);
        let text = t.constant(tv.clone());
        let ctx = t.constant(Array2::zeros((3, 4)));
        let trace = context_self_attention(&mut t, &atf.context_visual, text, ctx).unwrap();
        let ca = &atf.context_visual;
        let k = tv.dot(store.value(ca.k.w)) + store.value(ca.k.b.unwrap());
        let pre = k.dot(store.value(ca.w_k1));
        let lk = t.value(trace.lambda_k);
        for i in 0..3 {
            assert!((lk[(i, 0)] - crate::autograd::sigmoid(pre[(i, 0)])).abs() < 1e-14);
        }
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let (store, atf) = setup(8, 2);
        let mut rng = seeded_rng(5);
        let mut t = Tape::new(&store);
        let text = t.constant(random(&mut rng, (6, 8)) * 5.0);
        let v = t.constant(random(&mut rng, (3, 8)) * 5.0);
        let a = t.constant(random(&mut rng, (1, 8)) * 5.0);
        let tr = atf_forward(&mut t, &atf, text, v, a).unwrap();
        for g in [
            tr.v_con.lambda_k, tr.v_con.lambda_v, tr.a_con.lambda_k, tr.a_con.lambda_v,
            tr.v_out.lambda_k, tr.v_out.lambda_v, tr.a_out.lambda_k, tr.a_out.lambda_v,
            tr.gate.w_v, tr.gate.w_a,
        ] {
            assert!(t.value(g).iter().all(|&x| x > 0.0 && x < 1.0));
        }
        for ca in [&tr.v_con, &tr.a_con, &tr.v_out, &tr.a_out] {
            for w in &ca.weights {
                for row in t.value(*w).rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    /// Loop-level re-execution of the context-aware attention for one head.
    fn manual_context_attention(
        store: &ParamStore,
        ca: &ContextAttention,
        qs: &Array2<f64>,
        kvs: &Array2<f64>,
        ctx: &Array2<f64>,
    ) -> Array2<f64> {
        let lin = |x: &Array2<f64>, l: &Linear| {
            let w = store.value(l.w);
            let b = store.value(l.b.unwrap());
            let mut out = Array2::zeros((x.nrows(), w.ncols()));
            for i in 0..x.nrows() {
                for j in 0..w.ncols() {
                    let mut s = b[(0, j)];
                    for k in 0..x.ncols() {
                        s += x[(i, k)] * w[(k, j)];
                    }
                    out[(i, j)] = s;
                }
            }
            out
        };
        let (q, k, v) = (lin(qs, &ca.q), lin(kvs, &ca.k), lin(kvs, &ca.v));
        let n = k.nrows();
        let d = k.ncols();
        let blend = |x: &Array2<f64>, u: ParamId, w1: ParamId, w2: ParamId| {
            let (u, w1, w2) = (store.value(u), store.value(w1), store.value(w2));
            let mut out = Array2::zeros((n, d));
            for i in 0..n {
                let mut cu = vec![0.0; d];
                for j in 0..d {
                    for c in 0..ctx.ncols() {
                        cu[j] += ctx[(i, c)] * u[(c, j)];
                    }
                }
                let mut pre = 0.0;
                for j in 0..d {
                    pre += x[(i, j)] * w1[(j, 0)] + cu[j] * w2[(j, 0)];
                }
                let lam = 1.0 / (1.0 + (-pre).exp());
                for j in 0..d {
                    out[(i, j)] = (1.0 - lam) * x[(i, j)] + lam * cu[j];
                }
            }
            out
        };
        let kh = blend(&k, ca.u_k, ca.w_k1, ca.w_k2);
        let vh = blend(&v, ca.u_v, ca.w_v1, ca.w_v2);
        let mut att = Array2::zeros((q.nrows(), d));
        for i in 0..q.nrows() {
            let scores: Vec<f64> =
                (0..n).map(|j| (0..d).map(|c| q[(i, c)] * kh[(j, c)]).sum::<f64>() / (d as f64).sqrt()).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..n {
                for c in 0..d {
                    att[(i, c)] += scores[j].exp() / z * vh[(j, c)];
                }
            }
        }
        lin(&att, &ca.o)
    }

    #[test]
    fn context_self_attention_matches_manual_trace() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        let ca = ContextAttention::new(&mut store, &mut rng, "ca", 4, 4, 1);
        for b in [ca.q.b, ca.k.b, ca.v.b, ca.o.b].into_iter().flatten() {
            store.value_mut(b).assign(&array![[0.1, -0.2, 0.05, 0.3]]);
        }
        let text = array![[0.5, -1.0, 0.25, 2.0], [1.5, 0.0, -0.75, 0.5]];
        let ctx = array![[0.3, 0.2, -0.1, 0.4], [-0.6, 0.9, 0.0, 0.1]];
        let expected = manual_context_attention(&store, &ca, &text, &text, &ctx);
        let mut t = Tape::new(&store);
        let tv = t.constant(text);
        let cv = t.constant(ctx);
        let tr = context_self_attention(&mut t, &ca, tv, cv).unwrap();
        for (a, b) in t.value(tr.out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn context_cross_attention_matches_manual_trace_with_pooled_context() {
        let mut rng = seeded_rng(7);
        let mut store = ParamStore::new();
        let ca = ContextAttention::new(&mut store, &mut rng, "ca", 4, 4, 1);
        let qs = random(&mut rng, (2, 4));
        let kvs = random(&mut rng, (3, 4));
        let ctx = random(&mut rng, (5, 4));
        let pooled = ctx.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
        let pooled = pooled.broadcast((3, 4)).unwrap().to_owned();
        let expected = manual_context_attention(&store, &ca, &qs, &kvs, &pooled);
        let mut t = Tape::new(&store);
        let (q, kv, c) = (t.constant(qs), t.constant(kvs), t.constant(ctx));
        let tr = context_cross_attention(&mut t, &ca, q, kv, c).unwrap();
        for (a, b) in t.value(tr.out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_kv_with_zero_context_repeats_projected_value() {
        let (store, atf) = setup(4, 2);
        let ca = atf.reciprocal_visual.clone();
        let mut rng = seeded_rng(8);
        let qs = random(&mut rng, (3, 4));
        let kvs = random(&mut rng, (1, 4));
        let mut t = Tape::new(&store);
        let (q, kv, c) = (t.constant(qs), t.constant(kvs.clone()), t.constant(Array2::zeros((1, 4))));
        let tr = context_cross_attention(&mut t, &ca, q, kv, c).unwrap();
        let out = t.value(tr.out);
        for r in 1..3 {
            for c in 0..4 {
                assert!((out[(r, c)] - out[(0, c)]).abs() < 1e-12);
            }
        }
        let v = kvs.dot(store.value(ca.v.w)) + store.value(ca.v.b.unwrap());
        let lam = t.value(tr.lambda_v)[(0, 0)];
        let expected = (v * (1.0 - lam)).dot(store.value(ca.o.w)) + store.value(ca.o.b.unwrap());
        for c in 0..4 {
            assert!((out[(0, c)] - expected[(0, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_modalities_swaps_reciprocal_outputs() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(9);
        let (tv, vc, ac) = (random(&mut rng, (3, 4)), random(&mut rng, (3, 4)), random(&mut rng, (3, 4)));
        let mut t = Tape::new(&store);
        let (text, v, a) = (t.constant(tv), t.constant(vc), t.constant(ac));
        let ca = &atf.reciprocal_visual;
        let forward = context_cross_attention(&mut t, ca, text, v, a).unwrap();
        let swapped = context_cross_attention(&mut t, ca, text, a, v).unwrap();
        let again = context_cross_attention(&mut t, ca, text, v, a).unwrap();
        assert_eq!(t.value(forward.out), t.value(again.out));
        assert_ne!(t.value(forward.out), t.value(swapped.out));
    }

    #[test]
    fn gate_identities() {
        let (mut store, atf) = setup(4, 2);
        let mut rng = seeded_rng(10);
        let tv = random(&mut rng, (3, 4));
        let (vo, ao) = (random(&mut rng, (3, 4)), random(&mut rng, (3, 4)));
        {
            let mut t = Tape::new(&store);
            let text = t.constant(tv.clone());
            let z = t.constant(Array2::zeros((3, 4)));
            let g = gated_fuse(&mut t, &atf.gate, text, z, z).unwrap();
            assert_eq!(t.value(g.fused), &tv);
        }
        {
            let mut t = Tape::new(&store);
            let (text, v, a) = (t.constant(tv.clone()), t.constant(vo.clone()), t.constant(ao.clone()));
            let g = gated_fuse(&mut t, &atf.gate, text, v, a).unwrap();
            let (wv, wa) = (t.value(g.w_v), t.value(g.w_a));
            assert!(wv.iter().chain(wa.iter()).all(|&x| x > 0.0 && x < 1.0));
            let resid = t.value(g.fused) - &tv - wv * &vo - wa * &ao;
            assert!(resid.iter().all(|x| x.abs() < 1e-6));
        }
        zero_param(&mut store, atf.gate.visual.w);
        zero_param(&mut store, atf.gate.acoustic.w);
        let mut t = Tape::new(&store);
        let (text, v, a) = (t.constant(tv), t.constant(vo), t.constant(ao));
        let g = gated_fuse(&mut t, &atf.gate, text, v, a).unwrap();
        assert!(t.value(g.w_v).iter().chain(t.value(g.w_a).iter()).all(|&x| x == 0.5));
    }

    #[test]
    fn forward_equals_explicit_composition() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(12);
        let (tv, vv, av) = (random(&mut rng, (5, 4)), random(&mut rng, (3, 4)), random(&mut rng, (1, 4)));
        let mut t = Tape::new(&store);
        let (text, v, a) = (t.constant(tv), t.constant(vv), t.constant(av));
        let tr = atf_forward(&mut t, &atf, text, v, a).unwrap();
        assert_eq!(t.shape(tr.fused()), (5, 4));

        let va = cross_attention(&mut t, &atf.align_visual, v, text).unwrap();
        let aa = cross_attention(&mut t, &atf.align_acoustic, a, text).unwrap();
        let vc = context_self_attention(&mut t, &atf.context_visual, text, va).unwrap().out;
        let ac = context_self_attention(&mut t, &atf.context_acoustic, text, aa).unwrap().out;
        let vo = context_cross_attention(&mut t, &atf.reciprocal_visual, text, vc, ac).unwrap().out;
        let ao = context_cross_attention(&mut t, &atf.reciprocal_acoustic, text, ac, vc).unwrap().out;
        let m = gated_fuse(&mut t, &atf.gate, text, vo, ao).unwrap().fused;
        assert_eq!(t.value(m), t.value(tr.fused()));
    }

    #[test]
    fn zero_reciprocal_outputs_leave_text_unchanged() {
        // With the reciprocal blocks' output projections zeroed, V_out = A_out = 0
        // and the fused result is exactly the text for any visual/acoustic input.
        let (mut store, atf) = setup(4, 2);
        for ca in [&atf.reciprocal_visual, &atf.reciprocal_acoustic] {
            zero_param(&mut store, ca.o.w);
        }
        let mut rng = seeded_rng(13);
        let tv = random(&mut rng, (4, 4));
        let mut t = Tape::new(&store);
        let (text, v, a) = (t.constant(tv.clone()), t.constant(random(&mut rng, (2, 4))), t.constant(random(&mut rng, (1, 4))));
        let tr = atf_forward(&mut t, &atf, text, v, a).unwrap();
        assert_eq!(t.value(tr.fused()), &tv);
    }

    #[test]
    fn zero_text_and_biases_give_zero_fusion() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(14);
        let mut t = Tape::new(&store);
        let text = t.constant(Array2::zeros((3, 4)));
        let v = t.constant(random(&mut rng, (2, 4)));
        let a = t.constant(random(&mut rng, (1, 4)));
        let tr = atf_forward(&mut t, &atf, text, v, a).unwrap();
        assert!(t.value(tr.fused()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_visual_rows_are_order_free() {
        let (store, atf) = setup(4, 2);
        let mut rng = seeded_rng(15);
        let tv = random(&mut rng, (5, 4));
        let rowa = random(&mut rng, (1, 4));
        let rowb = random(&mut rng, (1, 4));
        let stack = |rows: &[&Array2<f64>]| {
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
        };
        let v1 = stack(&[&rowa, &rowa, &rowb]);
        let v2 = stack(&[&rowb, &rowa, &rowa]);
        let av = random(&mut rng, (1, 4));
        let run = |v: Array2<f64>| {
            let mut t = Tape::new(&store);
            let (text, vv, a) = (t.constant(tv.clone()), t.constant(v), t.constant(av.clone()));
            let tr = atf_forward(&mut t, &atf, text, vv, a).unwrap();
            t.value(tr.fused()).clone()
        };
        let (m1, m2) = (run(v1), run(v2));
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
