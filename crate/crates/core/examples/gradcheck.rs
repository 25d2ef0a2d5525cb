//! Reverse-mode gradients of a small MLP against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sim2real::autodiff::{Activation, Tape};
use sim2real::nn::{MlpParams, Parameterized};
use sim2real::tensor::Tensor;

fn loss(net: &MlpParams, x: &Tensor, y: &Tensor) -> f64 {
    net.forward(x).unwrap().sub(y).unwrap().sq_norm() * 0.5
}

fn main() -> sim2real::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = MlpParams::random(
        &[3, 8, 8, 2],
        Activation::Silu,
        Activation::Linear,
        &mut rng,
    );
    let x = Tensor::randn(&[5, 3], &mut rng);
    let y = Tensor::randn(&[5, 2], &mut rng);

    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let input = tape.leaf(x.clone());
    let out = net.forward_tape_all(&mut tape, &params, input)?;
    let target = tape.leaf(y.clone());
    let diff = tape.sub(out, target)?;
    let l = tape.sum_squares(diff, 0.5);
    println!(
        "loss {:.6} on a tape of {} nodes",
        tape.value(l).data()[0],
        tape.len()
    );
    let grads = tape.backward(l)?.collect(&params);

    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for p in 0..probe.params().len() {
        for k in 0..probe.params()[p].len() {
            let orig = probe.params()[p].data()[k];
            probe.params_mut()[p].data_mut()[k] = orig + h;
            let up = loss(&probe, &x, &y);
            probe.params_mut()[p].data_mut()[k] = orig - h;
            let down = loss(&probe, &x, &y);
            probe.params_mut()[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[p].data()[k];
            worst =
                worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
        }
    }
    let count: usize = net.params().iter().map(|p| p.len()).sum();
    println!("{count} parameters, worst relative error {worst:.2e}");
    Ok(())
}
