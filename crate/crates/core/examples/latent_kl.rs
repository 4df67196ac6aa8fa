//! Closed-form KL between diagonal Gaussians against a Monte-Carlo estimate
//! built from reparameterised draws, and the behaviour of the draws
//! themselves.
//!
//! cargo run --release --example latent_kl

use causal_sarcasm::latent::{kl_diag_gaussians, sample_latent, LatentGaussian};
use causal_sarcasm::rng::seeded_rng;

fn main() -> anyhow::Result<()> {
    let q = LatentGaussian::new(vec![0.5, -1.0, 0.0], vec![-0.5, 0.2, 0.0])?;
    let p = LatentGaussian::new(vec![0.0, 0.0, 0.3], vec![0.0, -0.3, 0.4])?;
    let closed = kl_diag_gaussians(&q, &p)?;
    println!("KL(q||p) closed form: {closed:.5}");
    println!("KL(q||q): {}", kl_diag_gaussians(&q, &q)?);

    let mut rng = seeded_rng(42);
    for n in [100, 1_000, 10_000, 100_000] {
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = sample_latent(&q, &mut rng);
            let v = q.log_pdf(&x) - p.log_pdf(&x);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        println!("MC n={n:>6}: {mean:.5} +/- {se:.5}  (|diff| = {:.2} SE)", (mean - closed).abs() / se);
    }

    let n = 50_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_latent(&q, &mut rng)).collect();
    for i in 0..q.dim() {
        let m = draws.iter().map(|x| x[i]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!("dim {i}: sample mean {m:+.4} (mu {:+.4})  sample var {v:.4} (exp(log_var) {:.4})", q.mu[i], q.log_var[i].exp());
    }
    Ok(())
}
