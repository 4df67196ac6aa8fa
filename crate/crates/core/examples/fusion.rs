//! Runs the fusion block on random text, visual and acoustic features and
//! prints the gate activations, then shows that with both reciprocal output
//! projections zeroed the block passes text through unchanged.
//!
//! cargo run --release --example fusion

use causal_sarcasm::atf::{atf_forward, Atf};
use causal_sarcasm::autograd::Tape;
use causal_sarcasm::params::ParamStore;
use causal_sarcasm::rng::{seeded_rng, standard_normal};
use ndarray::Array2;

fn random(rng: &mut causal_sarcasm::rng::SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), standard_normal(rng, rows * cols)).unwrap()
}

fn main() -> anyhow::Result<()> {
    let (d, heads) = (16, 2);
    let mut rng = seeded_rng(7);
    let mut store = ParamStore::new();
    let atf = Atf::new(&mut store, &mut rng, "atf", d, d, heads);
    let (text, visual, acoustic) = (random(&mut rng, 6, d), random(&mut rng, 4, d), random(&mut rng, 1, d));

    let mut t = Tape::new(&store);
    let (tv, vv, av) = (t.constant(text.clone()), t.constant(visual.clone()), t.constant(acoustic.clone()));
    let trace = atf_forward(&mut t, &atf, tv, vv, av)?;
    let m = t.value(trace.fused()).clone();
    println!("T {:?}  V {:?}  A {:?}  ->  M {:?}", text.dim(), visual.dim(), acoustic.dim(), m.dim());
    for (name, g) in [("visual gate", trace.gate.w_v), ("acoustic gate", trace.gate.w_a)] {
        let w = t.value(g);
        println!("{name:14} mean {:.3}  min {:.3}  max {:.3}", w.mean().unwrap(), w.fold(1.0, |a, &b| f64::min(a, b)), w.fold(0.0, |a, &b| f64::max(a, b)));
    }
    let lk = t.value(trace.v_con.lambda_k);
    println!("context key gates (visual): {:.3?}", lk.column(0).to_vec());

    for ca in [&atf.reciprocal_visual, &atf.reciprocal_acoustic] {
        store.value_mut(ca.o.w).fill(0.0);
        if let Some(b) = ca.o.b {
            store.value_mut(b).fill(0.0);
        }
    }
    let mut t = Tape::new(&store);
    let (tv, vv, av) = (t.constant(text.clone()), t.constant(visual), t.constant(acoustic));
    let trace = atf_forward(&mut t, &atf, tv, vv, av)?;
    let diff = (t.value(trace.fused()) - &text).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
    println!("zeroed reciprocal outputs: max |M - T| = {diff:e}");
    Ok(())
}
