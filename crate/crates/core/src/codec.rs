//! Image autoencoder providing the latent space for diffusion.
//!
//! Latents are standardized per dimension with constants measured on the
//! training split, so the diffusion models see roughly unit-scale data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape};
use crate::error::{Error, Result};
use crate::nn::{MlpParams, Parameterized};
use crate::optim::{cosine_lr, AdamState, LR_FLOOR};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Required held-out reconstruction MSE.
    pub target: f64,
    pub holdout_fraction: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_dim: 32,
            hidden: vec![256],
            max_epochs: 60,
            batch_size: 32,
            lr: 2e-3,
            target: 0.02,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    encoder: MlpParams,
    decoder: MlpParams,
    image_shape: Vec<usize>,
    latent_mean: Tensor,
    latent_std: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_mse: f64,
    /// Per-dimension standard deviation of raw encoder outputs.
    pub raw_latent_std: Vec<f64>,
}

impl CodecReport {
    /// No collapsed or exploded latent dimension.
    pub fn latent_scale_ok(&self) -> bool {
        self.raw_latent_std
            .iter()
            .all(|&s| (0.1..=10.0).contains(&s))
    }
}

impl Codec {
    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        image_shape: Vec<usize>,
        latent_mean: Tensor,
        latent_std: Tensor,
    ) -> Result<Self> {
        let image_dim: usize = image_shape.iter().product();
        let latent_dim = encoder.output_width();
        if encoder.input_width() != image_dim || decoder.output_width() != image_dim {
            return Err(Error::shape("codec networks do not match the image size"));
        }
        if decoder.input_width() != latent_dim {
            return Err(Error::shape("decoder input width differs from latent_dim"));
        }
        if latent_mean.len() != latent_dim || latent_std.len() != latent_dim {
            return Err(Error::shape(
                "latent normalization constants have the wrong length",
            ));
        }
        if latent_std.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("latent scales must be positive"));
        }
        Ok(Codec {
            encoder,
            decoder,
            image_shape,
            latent_mean,
            latent_std,
        })
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn decoder(&self) -> &MlpParams {
        &self.decoder
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn image_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn latent_mean(&self) -> &Tensor {
        &self.latent_mean
    }

    pub fn latent_std(&self) -> &Tensor {
        &self.latent_std
    }

    /// Rows of flattened images, or a single image of `image_shape`.
    fn image_rows(&self, images: &Tensor) -> Result<(Tensor, bool)> {
        let dim = self.image_dim();
        if images.shape() == self.image_shape.as_slice() || images.shape() == [dim] {
            return Ok((images.clone().reshape(&[1, dim])?, true));
        }
        if images.cols() != dim {
            return Err(Error::shape(format!(
                "expected images of {dim} values, got shape {:?}",
                images.shape()
            )));
        }
        Ok((images.as_matrix(), false))
    }

    /// Standardized latents. A single image yields `[latent_dim]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (rows, single) = self.image_rows(images)?;
        let raw = self.encoder.forward(&rows)?;
        let mut z = raw;
        let w = z.cols();
        for row in z.data_mut().chunks_exact_mut(w) {
            for ((v, m), s) in row
                .iter_mut()
                .zip(self.latent_mean.data())
                .zip(self.latent_std.data())
            {
                *v = (*v - m) / s;
            }
        }
        if single {
            z.reshape(&[w])
        } else {
            Ok(z)
        }
    }

    /// Images clamped to `[-1, 1]`; a single latent yields `image_shape`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let d = self.latent_dim();
        let single = latents.shape().len() == 1;
        let z = if single {
            latents.clone().reshape(&[1, d])?
        } else {
            latents.as_matrix()
        };
        if z.cols() != d {
            return Err(Error::shape(format!(
                "expected latents of width {d}, got shape {:?}",
                latents.shape()
            )));
        }
        let mut raw = z;
        for row in raw.data_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row
                .iter_mut()
                .zip(self.latent_mean.data())
                .zip(self.latent_std.data())
            {
                *v = *v * s + m;
            }
        }
        let out = self.decoder.forward(&raw)?.map(|v| v.clamp(-1.0, 1.0));
        if single {
            out.reshape(&self.image_shape)
        } else {
            let mut shape = vec![out.rows()];
            shape.extend_from_slice(&self.image_shape);
            out.reshape(&shape)
        }
    }

    /// Mean squared reconstruction error of `decode(encode(x))`.
    pub fn reconstruction_mse(&self, images: &Tensor) -> Result<f64> {
        let (rows, _) = self.image_rows(images)?;
        let rec = self.decode(&self.encode(&rows)?)?.as_matrix();
        Ok(rec.sub(&rows)?.sq_norm() / rows.len() as f64)
    }
}

struct AutoEncoder {
    encoder: MlpParams,
    decoder: MlpParams,
}

impl Parameterized for AutoEncoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }
}

/// Trains the autoencoder on `images` (`[n, ..image_shape]`, values in
/// `[-1, 1]`). The last `holdout_fraction` of the rows is held out.
pub fn train_autoencoder(
    images: &Tensor,
    cfg: &CodecConfig,
    seed: u64,
) -> Result<(Codec, CodecReport)> {
    let n = images.rows();
    if n < 64 {
        return Err(Error::invalid(format!("need at least 64 images, got {n}")));
    }
    if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::invalid("image values must lie in [-1, 1]"));
    }
    let image_shape = images.shape()[1..].to_vec();
    let data = images.as_matrix();
    let dim = data.cols();
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).max(1);
    let n_train = n - n_hold;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let hold = data.select_rows(&(n_train..n).collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_w = vec![dim];
    enc_w.extend_from_slice(&cfg.hidden);
    enc_w.push(cfg.latent_dim);
    let dec_w: Vec<usize> = enc_w.iter().rev().copied().collect();
    let mut ae = AutoEncoder {
        encoder: MlpParams::random(&enc_w, Activation::Silu, Activation::Linear, &mut rng),
        decoder: MlpParams::random(&dec_w, Activation::Silu, Activation::Linear, &mut rng),
    };
    let mut opt = AdamState::new(&ae, cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.max_epochs);
    let mut order = train_idx.clone();

    let per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * per_epoch;
    let mut step = 0;
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.select_rows(chunk);
            let mut tape = Tape::new();
            let pe = ae.encoder.bind(&mut tape);
            let pd = ae.decoder.bind(&mut tape);
            let xi = tape.leaf(x);
            let z = ae.encoder.forward_tape_all(&mut tape, &pe, xi)?;
            let y = ae.decoder.forward_tape_all(&mut tape, &pd, z)?;
            let diff = tape.sub(y, xi)?;
            let loss = tape.sum_squares(diff, 1.0 / (chunk.len() * dim) as f64);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: epoch_losses.len(),
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            let mut nodes = pe;
            nodes.extend(pd);
            opt.lr = cosine_lr(cfg.lr, step, total_steps, LR_FLOOR);
            step += 1;
            opt.step(&mut ae, &grads.collect(&nodes))?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        epoch_losses.push(total / count as f64);
    }

    let raw = ae.encoder.forward(&data.select_rows(&train_idx))?;
    let d = cfg.latent_dim;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..raw.rows() {
        for (m, v) in mean.iter_mut().zip(raw.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= raw.rows() as f64);
    for r in 0..raw.rows() {
        for ((s, v), m) in var.iter_mut().zip(raw.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let raw_std: Vec<f64> = var.iter().map(|s| (s / raw.rows() as f64).sqrt()).collect();
    // a constant dimension gets unit scale so standardization stays finite
    let scale: Vec<f64> = raw_std
        .iter()
        .map(|&s| if s > 1e-8 { s } else { 1.0 })
        .collect();

    let codec = Codec::from_parts(
        ae.encoder,
        ae.decoder,
        image_shape,
        Tensor::vector(mean),
        Tensor::vector(scale),
    )?;
    let holdout_mse = codec.reconstruction_mse(&hold)?;
    let report = CodecReport {
        epoch_losses,
        holdout_mse,
        raw_latent_std: raw_std,
    };
    if !(holdout_mse < cfg.target) {
        return Err(Error::Convergence {
            what: "autoencoder".into(),
            final_loss: holdout_mse,
        });
    }
    Ok((codec, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> CodecConfig {
        CodecConfig {
            latent_dim: 4,
            hidden: vec![32],
            max_epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            target: 0.02,
            holdout_fraction: 0.1,
        }
    }

    #[test]
    fn constant_images_reconstruct() {
        let images = Tensor::full(&[80, 4, 4, 3], 0.25);
        let (codec, report) = train_autoencoder(&images, &small_cfg(), 1).unwrap();
        assert!(report.holdout_mse < 1e-4, "{}", report.holdout_mse);
        let z = codec.decode(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(z.shape(), &[4, 4, 3]);
    }

    #[test]
    fn shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..80 * 12).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let images = Tensor::new(vec![80, 2, 2, 3], data).unwrap();
        let cfg = CodecConfig {
            target: 1.0,
            max_epochs: 2,
            ..small_cfg()
        };
        let (codec, _) = train_autoencoder(&images, &cfg, 3).unwrap();
        let one = images.unstack().remove(0);
        let z = codec.encode(&one).unwrap();
        assert_eq!(z.shape(), &[4]);
        assert_eq!(codec.decode(&z).unwrap().shape(), one.shape());
        assert_eq!(codec.encode(&images).unwrap().shape(), &[80, 4]);
        let far = codec.decode(&Tensor::full(&[4], 50.0)).unwrap();
        assert!(far.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(codec.encode(&Tensor::zeros(&[5])).is_err());
        assert!(codec.decode(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..64 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let images = Tensor::new(vec![64, 12], data).unwrap();
        let cfg = CodecConfig {
            target: 10.0,
            max_epochs: 2,
            ..small_cfg()
        };
        let a = train_autoencoder(&images, &cfg, 5).unwrap();
        let b = train_autoencoder(&images, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn convergence_failure_carries_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..64 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let images = Tensor::new(vec![64, 12], data).unwrap();
        let cfg = CodecConfig {
            target: 1e-6,
            max_epochs: 1,
            ..small_cfg()
        };
        match train_autoencoder(&images, &cfg, 5) {
            Err(Error::Convergence { final_loss, .. }) => assert!(final_loss > 1e-6),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_images_rejected() {
        assert!(train_autoencoder(&Tensor::zeros(&[10, 3]), &small_cfg(), 0).is_err());
    }
}
