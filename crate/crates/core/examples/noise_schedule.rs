//! The variance-preserving schedule and its forward marginal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sim2real::pipeline::config::RunConfig;
use sim2real::tensor::Tensor;

fn main() -> sim2real::Result<()> {
    let schedule = RunConfig::default().schedule()?;
    let (lo, hi) = schedule.beta_range();
    println!(
        "{} schedule, {} steps, beta {lo:e}..{hi:e}",
        schedule.kind(),
        schedule.steps()
    );
    println!("{:>6} {:>9} {:>9} {:>9}", "t", "alpha", "sigma", "snr");
    for n in [1, 100, 250, 500, 750, 1000] {
        let t = schedule.time_of(n);
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        println!("{t:>6.3} {a:>9.5} {s:>9.5} {:>9.3e}", a * a / (s * s));
    }

    // empirical moments of s_t for a fixed x0
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 50_000;
    let x0 = Tensor::new(vec![n, 1], vec![2.0; n])?;
    let t = 0.5;
    let s = schedule.forward_marginal(&x0, t, &Tensor::randn(&[n, 1], &mut rng))?;
    let mean = s.data().iter().sum::<f64>() / n as f64;
    let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    println!(
        "t = {t}: mean {mean:.4} (expect {:.4}), variance {var:.4} (expect {:.4})",
        2.0 * schedule.alpha(t),
        schedule.sigma(t).powi(2)
    );
    Ok(())
}
