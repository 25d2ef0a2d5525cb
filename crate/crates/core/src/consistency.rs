//! Latent consistency models: the boundary-conditioned consistency function,
//! distillation from a guided teacher, and few-step sampling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::denoiser::{gaussian_like, BoundDenoiser, DenoiserNet, Label, TrainReport};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::optim::{cosine_lr, AdamState, LR_FLOOR};
use crate::sampler::{
    ddim_update, row_seed, time_grid, Conditioning, Guided, TimeSpacing, MAX_CONSISTENCY_STEPS,
};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Boundary scale in unit time: the skip weight has decayed to nearly zero one grid step above `t_min`.
pub const SIGMA_DATA: f64 = 5e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    #[default]
    SquaredL2,
    /// `√(‖r‖² + δ²) − δ` with `δ = 0.01·√latent_dim`.
    PseudoHuber,
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distance::SquaredL2 => "l2",
            Distance::PseudoHuber => "huber",
        })
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Distance::SquaredL2),
            "huber" => Ok(Distance::PseudoHuber),
            other => Err(Error::invalid(format!(
                "unknown distance '{other}' (expected l2 or huber)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub omega_range: (f64, f64),
    pub ema_rate: f64,
    /// Number of boundary intervals between `t_min` and `T`.
    pub boundary_steps: usize,
    pub distance: Distance,
    /// Scale in the boundary coefficients of the student.
    pub sigma_data: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            omega_range: (4.5, 7.5),
            ema_rate: 0.95,
            boundary_steps: 50,
            distance: Distance::SquaredL2,
            sigma_data: SIGMA_DATA,
            iterations: 20000,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.omega_range;
        if !(lo <= hi) || lo < 0.0 {
            return Err(Error::invalid(format!("bad guidance range [{lo}, {hi}]")));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(Error::invalid(format!(
                "EMA rate {} outside (0, 1)",
                self.ema_rate
            )));
        }
        if self.boundary_steps < 2 {
            return Err(Error::invalid("need at least 2 boundary steps"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyModel {
    net: DenoiserNet,
    schedule: NoiseSchedule,
    sigma_data: f64,
    /// Digest of the teacher checkpoint this model was distilled from.
    pub teacher_digest: Option<String>,
}

impl ConsistencyModel {
    pub fn new(net: DenoiserNet, schedule: NoiseSchedule, sigma_data: f64) -> Result<Self> {
        if !net.omega_conditioned() {
            return Err(Error::invalid(
                "consistency models need an ω-conditioned network",
            ));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        Ok(ConsistencyModel {
            net,
            schedule,
            sigma_data,
            teacher_digest: None,
        })
    }

    /// Undistilled student: the teacher's weights with a zero ω pathway.
    pub fn from_teacher(
        teacher: &DenoiserNet,
        schedule: &NoiseSchedule,
        sigma_data: f64,
    ) -> Result<Self> {
        ConsistencyModel::new(teacher.to_omega_conditioned(), schedule.clone(), sigma_data)
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenoiserNet {
        &mut self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    fn coefficients(&self, times: &[f64], batch: usize) -> Result<Vec<(f64, f64)>> {
        let times = match times.len() {
            1 => vec![times[0]; batch],
            n if n == batch => times.to_vec(),
            n => return Err(Error::shape(format!("{n} times for a batch of {batch}"))),
        };
        times
            .iter()
            .map(|&t| {
                self.schedule.check_time(t)?;
                let (skip, out) = self.schedule.boundary_coeffs(t, self.sigma_data);
                let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
                // h = skip·s + out·(s − σε/α) = (skip + out)·s − (out·σ/α)·ε
                Ok((skip + out, out * s / a))
            })
            .collect()
    }

    /// `h = c_skip·s + c_out·(s − σ ε/α)`, with `ε` the ω-conditioned
    /// prediction. Exactly the identity at `t_min`.
    pub fn consistency_fn(
        &self,
        s_t: &Tensor,
        times: &[f64],
        cond: &Conditioning,
    ) -> Result<Tensor> {
        self.consistency_rows(s_t, times, &cond.labels, &[cond.omega], cond.hint.as_ref())
    }

    /// [`Self::consistency_fn`] with a guidance scale per row.
    pub fn consistency_rows(
        &self,
        s_t: &Tensor,
        times: &[f64],
        labels: &[Label],
        omegas: &[f64],
        hint: Option<&Tensor>,
    ) -> Result<Tensor> {
        let s = s_t.as_matrix();
        let coeffs = self.coefficients(times, s.rows())?;
        if coeffs.iter().all(|&(a, b)| a == 1.0 && b == 0.0) {
            return Ok(s_t.clone());
        }
        let eps = self
            .net
            .predict_batch(&s, times, labels, Some(omegas), hint)?
            .as_matrix();
        let mut out = s;
        for (r, &(a, b)) in coeffs.iter().enumerate() {
            if b == 0.0 && a == 1.0 {
                continue;
            }
            for (v, e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
                *v = a * *v - b * e;
            }
        }
        out.reshape(s_t.shape())
    }

    /// Tape version with per-row times, labels and guidance scales.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundDenoiser,
        s_t: &Tensor,
        times: &[f64],
        labels: &[Label],
        omegas: &[f64],
        hint: Option<&Tensor>,
    ) -> Result<NodeId> {
        let coeffs = self.coefficients(times, s_t.rows())?;
        let x = tape.leaf(s_t.clone());
        let eps = self
            .net
            .forward_tape(tape, bound, x, times, labels, Some(omegas), hint)?;
        let skip = tape.leaf(s_t.scale_rows(&coeffs.iter().map(|c| c.0).collect::<Vec<_>>())?);
        let eps = tape.scale_rows(eps, coeffs.iter().map(|c| c.1).collect())?;
        tape.sub(skip, eps)
    }

    /// Multistep sampling from a noisy state at `t_start`. Re-noising of
    /// row `r` draws from `row_seed(seed, r)`.
    pub fn multistep_from(
        &self,
        start: Tensor,
        t_start: f64,
        steps: usize,
        cond: &Conditioning,
        seed: u64,
    ) -> Result<Tensor> {
        if steps == 0 || steps > MAX_CONSISTENCY_STEPS {
            return Err(Error::invalid(format!(
                "consistency sampling takes 1 to {MAX_CONSISTENCY_STEPS} steps, got {steps}"
            )));
        }
        self.schedule.check_time(t_start)?;
        let shape = start.shape().to_vec();
        let grid = time_grid(&self.schedule, t_start, steps, TimeSpacing::Uniform);
        let mut rngs: Vec<ChaCha8Rng> = (0..start.as_matrix().rows())
            .map(|r| ChaCha8Rng::seed_from_u64(row_seed(seed, r)))
            .collect();
        let mut s = start.as_matrix();
        let mut x0 = self.consistency_fn(&s, &[grid[0]], cond)?;
        for &t in &grid[1..steps] {
            let mut noise = Tensor::zeros(x0.shape());
            for (r, rng) in rngs.iter_mut().enumerate() {
                let z = gaussian_like(&Tensor::zeros(&[x0.cols()]), rng);
                noise.row_mut(r).copy_from_slice(z.data());
            }
            s = self.schedule.forward_marginal(&x0, t, &noise)?;
            x0 = self.consistency_fn(&s, &[t], cond)?;
        }
        x0.reshape(&shape)
    }

    /// Generates `batch` latents from seeded Gaussian noise at `t_start`
    /// (default `T`).
    pub fn sample(
        &self,
        batch: usize,
        steps: usize,
        cond: &Conditioning,
        seed: u64,
        t_start: Option<f64>,
    ) -> Result<Tensor> {
        let d = self.net.latent_dim();
        let mut start = Tensor::zeros(&[batch, d]);
        for r in 0..batch {
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, r));
            let z = gaussian_like(&Tensor::zeros(&[d]), &mut rng);
            start.row_mut(r).copy_from_slice(z.data());
        }
        let t = t_start.unwrap_or(self.schedule.t_max());
        self.multistep_from(start, t, steps, cond, seed.wrapping_add(1))
    }
}

/// `target ← φ·target + (1 − φ)·online`
pub fn ema_update<P: Parameterized + ?Sized>(target: &mut P, online: &P, rate: f64) -> Result<()> {
    let src = online.params();
    let mut dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(Error::shape("EMA between differently shaped models"));
    }
    for (d, s) in dst.iter_mut().zip(&src) {
        if d.shape() != s.shape() {
            return Err(Error::shape("EMA between differently shaped models"));
        }
        for (x, y) in d.data_mut().iter_mut().zip(s.data()) {
            *x = rate * *x + (1.0 - rate) * y;
        }
    }
    Ok(())
}

/// Boundary times `t_min = τ_0 < … < τ_M = T`, uniform in `t`.
pub fn boundary_times(schedule: &NoiseSchedule, intervals: usize) -> Vec<f64> {
    let mut g = time_grid(schedule, schedule.t_max(), intervals, TimeSpacing::Uniform);
    g.reverse();
    g
}

/// Guided teacher noise with a separate guidance scale per row.
fn teacher_eps(
    teacher: &DenoiserNet,
    s: &Tensor,
    times: &[f64],
    labels: &[Label],
    omegas: &[f64],
) -> Result<Tensor> {
    let c = teacher.predict_batch(s, times, labels, None, None)?;
    let u = teacher.predict_batch(s, times, &[Label::Null], None, None)?;
    let mut out = c;
    let w = out.cols();
    for (r, &om) in omegas.iter().enumerate() {
        let ur = &u.data()[r * w..(r + 1) * w];
        for (v, uv) in out.row_mut(r).iter_mut().zip(ur) {
            *v = (1.0 + om) * *v - om * uv;
        }
    }
    Ok(out)
}

/// Loss and student gradients for one distillation batch. The target is
/// computed from `target` outside the tape, so it carries no gradient.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_and_grads(
    student: &ConsistencyModel,
    target: &ConsistencyModel,
    teacher: &DenoiserNet,
    s0: &Tensor,
    labels: &[Label],
    omegas: &[f64],
    pairs: &[(f64, f64)],
    noise: &Tensor,
    distance: Distance,
) -> Result<(f64, Vec<Tensor>)> {
    let schedule = student.schedule();
    let hi: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let s_hi = schedule.forward_marginal_rows(s0, &hi, noise)?;

    let eps = teacher_eps(teacher, &s_hi, &hi, labels, omegas)?;
    let mut s_lo = s_hi.clone();
    for (r, &(lo, h)) in pairs.iter().enumerate() {
        let (a, sg) = (schedule.alpha(h), schedule.sigma(h));
        let (an, sn) = (schedule.alpha(lo), schedule.sigma(lo));
        for (x, e) in s_lo.row_mut(r).iter_mut().zip(eps.row(r)) {
            let x0 = (*x - sg * e) / a;
            *x = an * x0 + sn * e;
        }
    }
    // rows that land on t_min pass through unchanged
    let lo: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let goal = target.consistency_rows(&s_lo, &lo, labels, omegas, None)?;

    let mut tape = Tape::new();
    let bound = student.net().bind_nodes(&mut tape);
    let h = student.consistency_tape(&mut tape, &bound, &s_hi, &hi, labels, omegas, None)?;
    let g = tape.leaf(goal);
    let diff = tape.sub(h, g)?;
    let loss = match distance {
        Distance::SquaredL2 => tape.sum_squares(diff, 1.0 / s0.rows() as f64),
        Distance::PseudoHuber => tape.pseudo_huber(diff, 0.01 * (s0.cols() as f64).sqrt()),
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.collect(&bound.all())))
}

/// Distils `teacher` into a consistency model on standardized latents.
pub fn distill(
    teacher: &DenoiserNet,
    schedule: &NoiseSchedule,
    latents: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(ConsistencyModel, TrainReport)> {
    cfg.validate()?;
    distill_unchecked(teacher, schedule, latents, labels, cfg)
}

/// [`distill`] without validating `cfg`; lets tests probe the EMA edge
/// cases.
#[doc(hidden)]
pub fn distill_unchecked(
    teacher: &DenoiserNet,
    schedule: &NoiseSchedule,
    latents: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(ConsistencyModel, TrainReport)> {
    let n = latents.rows();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} latents",
            labels.len()
        )));
    }
    if teacher.omega_conditioned() {
        return Err(Error::invalid("teacher must not be ω-conditioned"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= teacher.num_labels()) {
        return Err(Error::invalid(format!(
            "label {bad} unknown to the teacher"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = ConsistencyModel::from_teacher(teacher, schedule, cfg.sigma_data)?;
    let mut target = student.clone();
    let mut opt = AdamState::new(student.net(), cfg.lr);
    let tau = boundary_times(schedule, cfg.boundary_steps);
    let batch = cfg.batch_size.min(n);
    let mut report = TrainReport::default();

    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let s0 = latents.select_rows(&idx);
        let lbl: Vec<Label> = idx.iter().map(|&i| Label::Class(labels[i])).collect();
        let (lo, hi) = cfg.omega_range;
        let omegas: Vec<f64> = (0..batch)
            .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
            .collect();
        let pairs: Vec<(f64, f64)> = (0..batch)
            .map(|_| {
                let k = rng.gen_range(0..cfg.boundary_steps);
                (tau[k], tau[k + 1])
            })
            .collect();
        let noise = gaussian_like(&s0, &mut rng);
        let (loss, grads) = distill_loss_and_grads(
            &student,
            &target,
            teacher,
            &s0,
            &lbl,
            &omegas,
            &pairs,
            &noise,
            cfg.distance,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss,
            });
        }
        opt.lr = cosine_lr(cfg.lr, it, cfg.iterations, LR_FLOOR);
        opt.step(student.net_mut(), &grads)?;
        ema_update(target.net_mut(), student.net(), cfg.ema_rate)?;
        report.losses.push(loss);
    }
    Ok((student, report))
}

/// Largest pairwise distance between consistency outputs along teacher
/// DDIM trajectories started from the rows of `starts` at `T`.
pub fn trajectory_discrepancy(
    cm: &ConsistencyModel,
    teacher: &DenoiserNet,
    starts: &Tensor,
    cond: &Conditioning,
    steps: usize,
) -> Result<f64> {
    let schedule = cm.schedule();
    let grid = time_grid(schedule, schedule.t_max(), steps, TimeSpacing::Uniform);
    let guided = Guided { net: teacher, cond };
    let mut s = starts.as_matrix();
    let mut outputs = Vec::with_capacity(grid.len());
    for (i, &t) in grid.iter().enumerate() {
        outputs.push(cm.consistency_fn(&s, &[t], cond)?);
        if i + 1 < grid.len() {
            let eps = crate::sampler::EpsModel::eps(&guided, &s, t)?;
            s = ddim_update(&s, &eps, t, grid[i + 1], schedule)?;
        }
    }
    let mut worst: f64 = 0.0;
    for r in 0..s.rows() {
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                let d: f64 = outputs[i]
                    .row(r)
                    .iter()
                    .zip(outputs[j].row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                worst = worst.max(d.sqrt());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleKind;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 1000, 1e-4, 2e-2).unwrap()
    }

    fn teacher() -> DenoiserNet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        DenoiserNet::new(
            &DenoiserConfig {
                latent_dim: 3,
                num_labels: 2,
                hidden: vec![16, 16],
                omega_conditioned: false,
                hint_dim: None,
                adapter_hidden: 0,
            },
            &mut rng,
        )
    }

    #[test]
    fn boundary_is_identity() {
        let s = schedule();
        let cm = ConsistencyModel::from_teacher(&teacher(), &s, SIGMA_DATA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[10, 3], &mut rng).scale(7.0);
        let h = cm
            .consistency_fn(&x, &[s.t_min()], &Conditioning::new(1, 6.0))
            .unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn zero_network_scales_input() {
        let s = schedule();
        let mut net = teacher().to_omega_conditioned();
        let last = net.trunk().layers().len() - 1;
        for p in net.params_mut().into_iter().skip(2 * last).take(2) {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let cm = ConsistencyModel::new(net, s.clone(), SIGMA_DATA).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let t = 0.3;
        let (a, b) = s.boundary_coeffs(t, SIGMA_DATA);
        let h = cm
            .consistency_fn(&x, &[t], &Conditioning::new(0, 5.0))
            .unwrap();
        assert!(h.max_abs_diff(&x.scale(a + b)) < 1e-15);
    }

    #[test]
    fn tape_matches_direct() {
        let s = schedule();
        let cm = ConsistencyModel::from_teacher(&teacher(), &s, SIGMA_DATA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let bound = cm.net().bind_nodes(&mut tape);
        let lbl = [Label::Class(1)];
        let node = cm
            .consistency_tape(&mut tape, &bound, &x, &[0.4], &lbl, &[6.0], None)
            .unwrap();
        let direct = cm
            .consistency_fn(&x, &[0.4], &Conditioning::new(1, 6.0))
            .unwrap();
        assert!(tape.value(node).max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn single_step_sample_is_one_evaluation() {
        let s = schedule();
        let cm = ConsistencyModel::from_teacher(&teacher(), &s, SIGMA_DATA).unwrap();
        let cond = Conditioning::new(0, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let a = cm.multistep_from(x.clone(), 1.0, 1, &cond, 5).unwrap();
        assert_eq!(a, cm.consistency_fn(&x, &[1.0], &cond).unwrap());
        assert_eq!(
            cm.sample(4, 3, &cond, 7, None).unwrap(),
            cm.sample(4, 3, &cond, 7, None).unwrap()
        );
        assert!(cm.multistep_from(x.clone(), 1.0, 0, &cond, 5).is_err());
        assert!(cm.multistep_from(x, 1.0, 5, &cond, 5).is_err());
    }

    #[test]
    fn ema_contracts_geometrically() {
        let t = teacher();
        let mut target = t.clone();
        let mut online = t.clone();
        for p in online.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let dist = |a: &DenoiserNet, b: &DenoiserNet| -> f64 {
            a.params()
                .iter()
                .zip(b.params())
                .map(|(x, y)| x.sub(y).unwrap().sq_norm())
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&target, &online);
        for _ in 0..5 {
            ema_update(&mut target, &online, 0.95).unwrap();
        }
        let ratio = dist(&target, &online) / d0;
        assert!((ratio - 0.95f64.powi(5)).abs() < 1e-12, "{ratio}");
        let frozen = target.clone();
        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, frozen);
    }

    #[test]
    fn config_invariants() {
        assert!(DistillConfig::default().validate().is_ok());
        for bad in [
            DistillConfig {
                ema_rate: 1.0,
                ..Default::default()
            },
            DistillConfig {
                ema_rate: 0.0,
                ..Default::default()
            },
            DistillConfig {
                omega_range: (7.0, 5.0),
                ..Default::default()
            },
            DistillConfig {
                boundary_steps: 1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(DistillConfig::default().omega_range, (4.5, 7.5));
        assert_eq!("huber".parse::<Distance>().unwrap(), Distance::PseudoHuber);
    }

    #[test]
    fn target_carries_no_gradient() {
        let s = schedule();
        let t = teacher();
        let student = ConsistencyModel::from_teacher(&t, &s, SIGMA_DATA).unwrap();
        let mut target = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s0 = Tensor::randn(&[3, 3], &mut rng);
        let noise = Tensor::randn(&[3, 3], &mut rng);
        let lbl = [Label::Class(0), Label::Class(1), Label::Class(0)];
        let pairs = [(0.2, 0.22), (0.5, 0.52), (s.t_min(), 0.02)];
        let om = [5.0, 6.0, 7.0];
        let (l1, g1) = distill_loss_and_grads(
            &student,
            &target,
            &t,
            &s0,
            &lbl,
            &om,
            &pairs,
            &noise,
            Distance::SquaredL2,
        )
        .unwrap();
        for p in target.net_mut().params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= 1.1);
        }
        let (l2, g2) = distill_loss_and_grads(
            &student,
            &target,
            &t,
            &s0,
            &lbl,
            &om,
            &pairs,
            &noise,
            Distance::SquaredL2,
        )
        .unwrap();
        assert_ne!(l1, l2);
        assert_eq!(g1.len(), g2.len());
        assert_eq!(g1.len(), student.net().params().len());
    }

    #[test]
    fn distillation_is_deterministic_and_frozen_target_at_rate_one() {
        let s = schedule();
        let t = teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lat = Tensor::randn(&[32, 3], &mut rng);
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let cfg = DistillConfig {
            iterations: 3,
            batch_size: 8,
            ..Default::default()
        };
        let a = distill(&t, &s, &lat, &labels, &cfg).unwrap();
        let b = distill(&t, &s, &lat, &labels, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.net(), &t.to_omega_conditioned());
        let frozen = DistillConfig {
            ema_rate: 1.0,
            ..cfg
        };
        assert!(distill(&t, &s, &lat, &labels, &frozen).is_err());
        assert!(distill_unchecked(&t, &s, &lat, &labels, &frozen).is_ok());
    }

    #[test]
    fn boundary_grid() {
        let s = schedule();
        let g = boundary_times(&s, 50);
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], s.t_min());
        assert_eq!(g[50], 1.0);
    }
}
