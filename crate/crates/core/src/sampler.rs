//! Deterministic probability-flow sampling (DDIM) and partial-noising
//! translation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::consistency::ConsistencyModel;
use crate::denoiser::{gaussian_like, DenoiserNet, Label};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Default SDEdit strength.
pub const DEFAULT_STRENGTH: f64 = 0.5;
/// Few-step samplers are limited to this many network evaluations.
pub const MAX_CONSISTENCY_STEPS: usize = 4;

/// A noise predictor evaluated at one time for a whole batch.
pub trait EpsModel {
    fn eps(&self, s_t: &Tensor, t: f64) -> Result<Tensor>;
}

/// Label, guidance scale and optional spatial hint for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// One label per row, or a single label for every row.
    pub labels: Vec<Label>,
    pub omega: f64,
    pub hint: Option<Tensor>,
}

impl Conditioning {
    pub fn new(label: usize, omega: f64) -> Self {
        Conditioning {
            labels: vec![Label::Class(label)],
            omega,
            hint: None,
        }
    }

    pub fn with_hint(mut self, hint: Tensor) -> Self {
        self.hint = Some(hint);
        self
    }

    /// Keeps the rows `idx` of per-row labels and hints.
    pub fn select(&self, idx: &[usize]) -> Conditioning {
        let labels = if self.labels.len() == 1 {
            self.labels.clone()
        } else {
            idx.iter().map(|&i| self.labels[i]).collect()
        };
        let hint = self.hint.as_ref().map(|h| {
            let m = h.as_matrix();
            if m.rows() == 1 {
                m
            } else {
                m.select_rows(idx)
            }
        });
        Conditioning {
            labels,
            omega: self.omega,
            hint,
        }
    }
}

/// The classifier-free-guided teacher as an [`EpsModel`].
pub struct Guided<'a> {
    pub net: &'a DenoiserNet,
    pub cond: &'a Conditioning,
}

impl EpsModel for Guided<'_> {
    fn eps(&self, s_t: &Tensor, t: f64) -> Result<Tensor> {
        self.net.cfg_eps_batch(
            s_t,
            &[t],
            &self.cond.labels,
            self.cond.omega,
            self.cond.hint.as_ref(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryState {
    pub latent: Tensor,
    pub t: f64,
    pub steps: usize,
}

/// Placement of the evaluation times of a k-step sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimeSpacing {
    /// Uniform in `t`.
    #[default]
    Uniform,
    /// Uniform in `t`, then snapped to the discrete schedule grid.
    Snapped,
}

/// `steps + 1` decreasing times from `t_start` to `t_min`.
pub fn time_grid(
    schedule: &NoiseSchedule,
    t_start: f64,
    steps: usize,
    spacing: TimeSpacing,
) -> Vec<f64> {
    let t_min = schedule.t_min();
    (0..=steps)
        .map(|i| {
            if i == steps {
                return t_min;
            }
            let t = t_start - (t_start - t_min) * i as f64 / steps as f64;
            match spacing {
                TimeSpacing::Uniform => t,
                TimeSpacing::Snapped => schedule.snap(t),
            }
        })
        .collect()
}

/// One deterministic DDIM update from `state.t` to `t_next`.
pub fn ddim_step<M: EpsModel + ?Sized>(
    model: &M,
    state: &TrajectoryState,
    t_next: f64,
    schedule: &NoiseSchedule,
) -> Result<TrajectoryState> {
    if t_next == state.t {
        return Ok(state.clone());
    }
    if t_next > state.t {
        return Err(Error::invalid(format!(
            "DDIM step must move backwards in time ({} -> {t_next})",
            state.t
        )));
    }
    schedule.check_time(state.t)?;
    schedule.check_time(t_next)?;
    let eps = model.eps(&state.latent, state.t)?;
    let latent = ddim_update(&state.latent, &eps, state.t, t_next, schedule)?;
    Ok(TrajectoryState {
        latent,
        t: t_next,
        steps: state.steps + 1,
    })
}

/// `ŝ0 = (s − σ ε)/α`, then `α' ŝ0 + σ' ε`.
pub(crate) fn ddim_update(
    s: &Tensor,
    eps: &Tensor,
    t: f64,
    t_next: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (a, sg) = (schedule.alpha(t), schedule.sigma(t));
    let (an, sn) = (schedule.alpha(t_next), schedule.sigma(t_next));
    s.zip_with(eps, "ddim", |x, e| {
        let x0 = (x - sg * e) / a;
        an * x0 + sn * e
    })
}

/// Integrates from `start` at `t_start` down to `t_min` in `steps` DDIM steps.
pub fn ddim_denoise<M: EpsModel + ?Sized>(
    model: &M,
    start: Tensor,
    t_start: f64,
    steps: usize,
    schedule: &NoiseSchedule,
    spacing: TimeSpacing,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    let grid = time_grid(schedule, t_start, steps, spacing);
    let mut state = TrajectoryState {
        latent: start,
        t: grid[0],
        steps: 0,
    };
    for &t_next in &grid[1..] {
        state = ddim_step(model, &state, t_next, schedule)?;
    }
    Ok(state.latent)
}

/// Full generation: seeded Gaussian at `T`, then `steps` DDIM steps.
pub fn sample_ddim<M: EpsModel + ?Sized>(
    model: &M,
    batch: usize,
    latent_dim: usize,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::randn(&[batch, latent_dim], &mut rng);
    ddim_denoise(
        model,
        start,
        schedule.t_max(),
        steps,
        schedule,
        TimeSpacing::Uniform,
    )
}

/// Model used to denoise in [`sdedit_translate`].
#[derive(Clone, Copy)]
pub enum Translator<'a> {
    /// Multi-step DDIM with the guided teacher.
    Teacher(&'a DenoiserNet),
    /// Few-step consistency sampling.
    Consistency(&'a ConsistencyModel),
}

/// Start time of an SDEdit run, snapped to the grid.
pub fn strength_to_time(schedule: &NoiseSchedule, strength: f64) -> f64 {
    let t = schedule.t_min() + strength * (schedule.t_max() - schedule.t_min());
    schedule.snap(t)
}

/// Seed of the noise stream for row `index` of a translation batch.
pub fn row_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Partially noises `images` (rows of flattened pixels), denoises them
/// with `model`, and decodes. Row `i` draws its noise from
/// `row_seed(seed, i)`, so results do not depend on batch composition.
#[allow(clippy::too_many_arguments)]
pub fn sdedit_translate(
    model: Translator<'_>,
    images: &Tensor,
    strength: f64,
    cond: &Conditioning,
    steps: usize,
    codec: &Codec,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!(
            "strength {strength} outside [0, 1]"
        )));
    }
    if steps == 0 {
        return Err(Error::invalid("need at least one step"));
    }
    if matches!(model, Translator::Consistency(_)) && steps > MAX_CONSISTENCY_STEPS {
        return Err(Error::invalid(format!(
            "consistency sampling is limited to {MAX_CONSISTENCY_STEPS} steps, got {steps}"
        )));
    }
    let s0 = codec.encode(images)?.as_matrix();
    let t_start = strength_to_time(schedule, strength);
    let finish =
        |latents: &Tensor| -> Result<Tensor> { codec.decode(latents)?.reshape(images.shape()) };
    if t_start <= schedule.t_min() {
        return finish(&s0);
    }
    let mut noise = Tensor::zeros(s0.shape());
    for r in 0..s0.rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, r));
        let row = gaussian_like(&Tensor::zeros(&[s0.cols()]), &mut rng);
        noise.row_mut(r).copy_from_slice(row.data());
    }
    let noisy = schedule.forward_marginal(&s0, t_start, &noise)?;
    let out = match model {
        Translator::Teacher(net) => {
            let guided = Guided { net, cond };
            ddim_denoise(
                &guided,
                noisy,
                t_start,
                steps,
                schedule,
                TimeSpacing::Uniform,
            )?
        }
        Translator::Consistency(cm) => {
            cm.multistep_from(noisy, t_start, steps, cond, row_seed(seed, usize::MAX))?
        }
    };
    finish(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    /// Exact noise predictor for 1-D data ~ N(0, 1):
    /// ε*(s, t) = σ s / (α² + σ²).
    pub(crate) struct GaussianOracle<'a>(pub &'a NoiseSchedule);

    impl EpsModel for GaussianOracle<'_> {
        fn eps(&self, s_t: &Tensor, t: f64) -> Result<Tensor> {
            let (a, s) = (self.0.alpha(t), self.0.sigma(t));
            Ok(s_t.scale(s / (a * a + s * s)))
        }
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn zero_length_step_is_identity() {
        let s = schedule();
        let state = TrajectoryState {
            latent: Tensor::vector(vec![0.3, -1.2]),
            t: 0.5,
            steps: 3,
        };
        assert_eq!(
            ddim_step(&GaussianOracle(&s), &state, 0.5, &s).unwrap(),
            state
        );
        assert!(ddim_step(&GaussianOracle(&s), &state, 0.6, &s).is_err());
    }

    #[test]
    fn single_step_local_error_is_second_order() {
        // for unit-variance data the PF-ODE keeps s constant, so the exact
        // solution of one step is the starting value
        let s = schedule();
        let x = Tensor::vector(vec![1.0]);
        let mut prev = None;
        for dt in [0.02, 0.01, 0.005] {
            let state = TrajectoryState {
                latent: x.clone(),
                t: 0.5,
                steps: 0,
            };
            let next = ddim_step(&GaussianOracle(&s), &state, 0.5 - dt, &s).unwrap();
            let err = (next.latent.data()[0] - 1.0).abs();
            if let Some(p) = prev {
                let ratio: f64 = p / err;
                assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
            }
            prev = Some(err);
        }
    }

    #[test]
    fn boundary_step_returns_x0_estimate() {
        let mut ab: Vec<f64> = (0..20).map(|i| 1.0 - 0.04 * i as f64).collect();
        ab[0] = 1.0;
        let s = NoiseSchedule::from_alpha_bar(ab).unwrap();
        assert_eq!(s.sigma(s.t_min()), 0.0);
        let model = GaussianOracle(&s);
        let latent = Tensor::vector(vec![0.7, -0.2, 1.9]);
        let t = s.time_of(12);
        let next = ddim_step(
            &model,
            &TrajectoryState {
                latent: latent.clone(),
                t,
                steps: 0,
            },
            s.t_min(),
            &s,
        )
        .unwrap();
        let eps = model.eps(&latent, t).unwrap();
        let x0 = latent
            .zip_with(&eps, "x0", |x, e| (x - s.sigma(t) * e) / s.alpha(t))
            .unwrap();
        assert_eq!(next.latent, x0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = schedule();
        let a = sample_ddim(&GaussianOracle(&s), 4, 1, 10, &s, 3).unwrap();
        let b = sample_ddim(&GaussianOracle(&s), 4, 1, 10, &s, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn time_grid_endpoints() {
        let s = schedule();
        let g = time_grid(&s, 0.5, 4, TimeSpacing::Snapped);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 0.5);
        assert_eq!(*g.last().unwrap(), s.t_min());
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }
}
