//! Trains the latent codec on both toy domains.

use sim2real::codec::{train_autoencoder, CodecConfig};
use sim2real::toy::{gen_real, gen_simulated, images_tensor};

fn main() -> sim2real::Result<()> {
    let mut samples = gen_simulated(200, 1)?;
    samples.extend(gen_real(200, 2)?);
    let cfg = CodecConfig {
        max_epochs: 60,
        target: 0.05,
        ..CodecConfig::default()
    };
    let (codec, report) = train_autoencoder(&images_tensor(&samples)?, &cfg, 0)?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate().step_by(5) {
        println!("epoch {epoch:>3}: {loss:.5}");
    }
    let (lo, hi) = report
        .raw_latent_std
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    println!(
        "{} -> {} dims, holdout mse {:.5}, raw latent std {lo:.3}..{hi:.3}",
        codec.image_dim(),
        codec.latent_dim(),
        report.holdout_mse
    );

    let test = images_tensor(&gen_real(50, 9)?)?;
    let latents = codec.encode(&test)?;
    let mean = latents.data().iter().sum::<f64>() / latents.len() as f64;
    let std = (latents
        .data()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / latents.len() as f64)
        .sqrt();
    println!(
        "unseen real images: mse {:.5}, latent mean {mean:.3} std {std:.3}",
        codec.reconstruction_mse(&test)?
    );
    Ok(())
}
