//! The noise-prediction network, classifier-free guidance, and the teacher
//! training loop.
//!
//! The trunk is an MLP over `[s_t | time features | label embedding | ω features]`.
//! Time and ω enter through fixed sinusoidal features; the label enters
//! through a learned table whose last row is the null label used for the
//! unconditional branch. An optional hint adapter maps a spatial hint to the
//! trunk's penultimate width and is added there, scaled by `hint_scale`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Activation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Dense, MlpParams, Parameterized};
use crate::optim::{cosine_lr, AdamState, LR_FLOOR};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const TIME_FEATURES: usize = 32;
pub const LABEL_FEATURES: usize = 16;
pub const OMEGA_FEATURES: usize = 16;

const TIME_SCALE: f64 = 1000.0;
const OMEGA_SCALE: f64 = 100.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    /// The unconditional label ∅.
    Null,
}

pub fn time_features(times: &[f64]) -> Tensor {
    let scaled: Vec<f64> = times.iter().map(|t| t * TIME_SCALE).collect();
    sinusoidal_embedding(&scaled, TIME_FEATURES, MAX_PERIOD)
}

pub fn omega_features(omegas: &[f64]) -> Tensor {
    let scaled: Vec<f64> = omegas.iter().map(|w| w * OMEGA_SCALE).collect();
    sinusoidal_embedding(&scaled, OMEGA_FEATURES, MAX_PERIOD)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub num_labels: usize,
    pub hidden: Vec<usize>,
    pub omega_conditioned: bool,
    /// Width of the spatial hint; `None` builds no adapter.
    pub hint_dim: Option<usize>,
    pub adapter_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    trunk: MlpParams,
    label_table: Tensor,
    num_labels: usize,
    latent_dim: usize,
    omega_conditioned: bool,
    adapter: Option<MlpParams>,
    hint_scale: f64,
}

/// Tape nodes of a bound [`DenoiserNet`].
#[derive(Clone, Debug)]
pub struct BoundDenoiser {
    pub trunk: Vec<NodeId>,
    pub table: NodeId,
    pub adapter: Vec<NodeId>,
}

impl BoundDenoiser {
    /// All nodes in `params()` order.
    pub fn all(&self) -> Vec<NodeId> {
        let mut v = self.trunk.clone();
        v.push(self.table);
        v.extend_from_slice(&self.adapter);
        v
    }
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let input = trunk_input_width(cfg.latent_dim, cfg.omega_conditioned);
        let mut widths = vec![input];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(cfg.latent_dim);
        let trunk = MlpParams::random(&widths, Activation::Silu, Activation::Linear, rng);
        let table = Tensor::randn(&[cfg.num_labels + 1, LABEL_FEATURES], rng);
        let mut net = DenoiserNet {
            trunk,
            label_table: table,
            num_labels: cfg.num_labels,
            latent_dim: cfg.latent_dim,
            omega_conditioned: cfg.omega_conditioned,
            adapter: None,
            hint_scale: 1.0,
        };
        if let Some(hint_dim) = cfg.hint_dim {
            net.attach_adapter(hint_dim, cfg.adapter_hidden, rng);
        }
        net
    }

    /// Assembles a network from stored parts.
    pub fn from_parts(
        trunk: MlpParams,
        label_table: Tensor,
        latent_dim: usize,
        omega_conditioned: bool,
        adapter: Option<MlpParams>,
        hint_scale: f64,
    ) -> Result<Self> {
        if trunk.input_width() != trunk_input_width(latent_dim, omega_conditioned) {
            return Err(Error::shape(format!(
                "trunk input width {} does not fit latent_dim {latent_dim} (omega: {omega_conditioned})",
                trunk.input_width()
            )));
        }
        if trunk.output_width() != latent_dim {
            return Err(Error::shape("trunk output width differs from latent_dim"));
        }
        if label_table.shape().len() != 2
            || label_table.cols() != LABEL_FEATURES
            || label_table.rows() < 2
        {
            return Err(Error::shape("label table must be [num_labels + 1, 16]"));
        }
        if let Some(a) = &adapter {
            if a.output_width() != penultimate_width(&trunk) {
                return Err(Error::shape(
                    "adapter output width differs from trunk penultimate width",
                ));
            }
        }
        if !(hint_scale >= 0.0) {
            return Err(Error::invalid("hint scale must be non-negative"));
        }
        Ok(DenoiserNet {
            num_labels: label_table.rows() - 1,
            trunk,
            label_table,
            latent_dim,
            omega_conditioned,
            adapter,
            hint_scale,
        })
    }

    /// Adds a hint adapter whose last layer is zero, so it contributes
    /// nothing until trained.
    pub fn attach_adapter<R: Rng + ?Sized>(&mut self, hint_dim: usize, hidden: usize, rng: &mut R) {
        let out = penultimate_width(&self.trunk);
        let adapter = MlpParams::from_layers(vec![
            Dense::random(hint_dim, hidden, Activation::Silu, rng),
            Dense::zeros(hidden, out, Activation::Linear),
        ])
        .expect("adapter widths chain");
        self.adapter = Some(adapter);
    }

    pub fn trunk(&self) -> &MlpParams {
        &self.trunk
    }

    pub fn label_table(&self) -> &Tensor {
        &self.label_table
    }

    pub fn adapter(&self) -> Option<&MlpParams> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut MlpParams> {
        self.adapter.as_mut()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn omega_conditioned(&self) -> bool {
        self.omega_conditioned
    }

    pub fn hint_scale(&self) -> f64 {
        self.hint_scale
    }

    pub fn set_hint_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale >= 0.0) {
            return Err(Error::invalid("hint scale must be non-negative"));
        }
        self.hint_scale = scale;
        Ok(())
    }

    pub fn hint_dim(&self) -> Option<usize> {
        self.adapter.as_ref().map(|a| a.input_width())
    }

    fn label_row(&self, label: Label) -> Result<usize> {
        match label {
            Label::Class(c) if c < self.num_labels => Ok(c),
            Label::Class(c) => Err(Error::invalid(format!(
                "label {c} unknown (network has {} labels)",
                self.num_labels
            ))),
            Label::Null => Ok(self.num_labels),
        }
    }

    fn label_rows(&self, labels: &[Label], batch: usize) -> Result<Vec<usize>> {
        let rows: Vec<usize> = labels
            .iter()
            .map(|&l| self.label_row(l))
            .collect::<Result<_>>()?;
        broadcast(rows, batch, "labels")
    }

    fn check_latent(&self, s_t: &Tensor) -> Result<()> {
        if s_t.cols() != self.latent_dim {
            return Err(Error::shape(format!(
                "latent width {} but network expects {}",
                s_t.cols(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    fn hint_active(&self, hint: Option<&Tensor>) -> bool {
        hint.is_some() && self.adapter.is_some() && self.hint_scale != 0.0
    }

    /// Batched prediction. `times`, `labels` and `omegas` hold one entry per
    /// row or a single entry for the whole batch; `omegas` is required iff
    /// the network is ω-conditioned.
    pub fn predict_batch(
        &self,
        s_t: &Tensor,
        times: &[f64],
        labels: &[Label],
        omegas: Option<&[f64]>,
        hint: Option<&Tensor>,
    ) -> Result<Tensor> {
        let s = s_t.as_matrix();
        self.check_latent(&s)?;
        let batch = s.rows();
        let times = broadcast(times.to_vec(), batch, "times")?;
        let rows = self.label_rows(labels, batch)?;
        let mut parts = vec![
            s,
            time_features(&times),
            self.label_table.select_rows(&rows),
        ];
        match (self.omega_conditioned, omegas) {
            (true, Some(w)) => parts.push(omega_features(&broadcast(w.to_vec(), batch, "omegas")?)),
            (true, None) => {
                return Err(Error::invalid(
                    "ω-conditioned network needs a guidance scale",
                ))
            }
            (false, _) => {}
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let input = Tensor::concat_cols(&refs)?;

        let depth = self.trunk.layers().len();
        if !self.hint_active(hint) {
            return self.trunk.forward(&input);
        }
        let hint = self.hint_rows(hint.expect("checked"), batch)?;
        let features = self.trunk.forward_range(&input, 0..depth - 1)?;
        let injected = self.adapter.as_ref().expect("checked").forward(&hint)?;
        let mut features = features;
        features.axpy(self.hint_scale, &injected)?;
        self.trunk.forward_range(&features, depth - 1..depth)
    }

    fn hint_rows(&self, hint: &Tensor, batch: usize) -> Result<Tensor> {
        let h = hint.as_matrix();
        let dim = self.hint_dim().expect("adapter present");
        if h.cols() != dim {
            return Err(Error::shape(format!(
                "hint width {} but adapter expects {dim}",
                h.cols()
            )));
        }
        match h.rows() {
            r if r == batch => Ok(h),
            1 => Ok(h.select_rows(&vec![0; batch])),
            r => Err(Error::shape(format!(
                "{r} hint rows for a batch of {batch}"
            ))),
        }
    }

    /// ε_θ(s_t, c, t) for an unguided network.
    pub fn predict_eps(
        &self,
        s_t: &Tensor,
        t: f64,
        label: Label,
        hint: Option<&Tensor>,
    ) -> Result<Tensor> {
        let out = self.predict_batch(s_t, &[t], &[label], None, hint)?;
        out.reshape(s_t.shape())
    }

    /// `(1 + ω)·ε(c) − ω·ε(∅)`
    pub fn cfg_eps(
        &self,
        s_t: &Tensor,
        t: f64,
        label: Label,
        omega: f64,
        hint: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.cfg_eps_batch(s_t, &[t], &[label], omega, hint)?
            .reshape(s_t.shape())
    }

    pub fn cfg_eps_batch(
        &self,
        s_t: &Tensor,
        times: &[f64],
        labels: &[Label],
        omega: f64,
        hint: Option<&Tensor>,
    ) -> Result<Tensor> {
        if labels.contains(&Label::Null) {
            return Err(Error::invalid("guidance needs a class label, not ∅"));
        }
        let cond = self.predict_batch(s_t, times, labels, None, hint)?;
        if omega == 0.0 {
            return Ok(cond);
        }
        let uncond = self.predict_batch(s_t, times, &[Label::Null], None, hint)?;
        cond.zip_with(&uncond, "cfg", |c, u| (1.0 + omega) * c - omega * u)
    }

    pub fn bind_nodes(&self, tape: &mut Tape) -> BoundDenoiser {
        let trunk = self.trunk.bind(tape);
        let table = tape.leaf(self.label_table.clone());
        let adapter = self
            .adapter
            .as_ref()
            .map(|a| a.bind(tape))
            .unwrap_or_default();
        BoundDenoiser {
            trunk,
            table,
            adapter,
        }
    }

    /// Tape version of [`predict_batch`](Self::predict_batch) with one
    /// entry per row for `times`, `labels` and `omegas`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundDenoiser,
        s_t: NodeId,
        times: &[f64],
        labels: &[Label],
        omegas: Option<&[f64]>,
        hint: Option<&Tensor>,
    ) -> Result<NodeId> {
        let batch = tape.value(s_t).rows();
        self.check_latent(tape.value(s_t))?;
        let times = broadcast(times.to_vec(), batch, "times")?;
        let rows = self.label_rows(labels, batch)?;
        let tf = tape.leaf(time_features(&times));
        let lf = tape.gather_rows(bound.table, rows)?;
        let mut parts = vec![s_t, tf, lf];
        match (self.omega_conditioned, omegas) {
            (true, Some(w)) => {
                let wf = omega_features(&broadcast(w.to_vec(), batch, "omegas")?);
                parts.push(tape.leaf(wf));
            }
            (true, None) => {
                return Err(Error::invalid(
                    "ω-conditioned network needs a guidance scale",
                ))
            }
            (false, _) => {}
        }
        let input = tape.concat_cols(&parts)?;
        let depth = self.trunk.layers().len();
        if !self.hint_active(hint) {
            return self.trunk.forward_tape_all(tape, &bound.trunk, input);
        }
        let hint = self.hint_rows(hint.expect("checked"), batch)?;
        let features = self
            .trunk
            .forward_tape(tape, &bound.trunk, input, 0..depth - 1)?;
        let h = tape.leaf(hint);
        let adapter = self.adapter.as_ref().expect("checked");
        let injected = adapter.forward_tape_all(tape, &bound.adapter, h)?;
        let injected = tape.scale(injected, self.hint_scale);
        let features = tape.add(features, injected)?;
        self.trunk
            .forward_tape(tape, &bound.trunk, features, depth - 1..depth)
    }

    /// Copies this network's weights into an ω-conditioned student. The
    /// first-layer rows that read the ω features start at zero, so the
    /// student initially reproduces the conditional prediction.
    pub fn to_omega_conditioned(&self) -> DenoiserNet {
        if self.omega_conditioned {
            return self.clone();
        }
        let mut layers = self.trunk.layers().to_vec();
        let first = &layers[0];
        let (fan_in, fan_out) = (first.fan_in(), first.fan_out());
        let mut w = first.weight.data().to_vec();
        w.extend(std::iter::repeat_n(0.0, OMEGA_FEATURES * fan_out));
        layers[0] = Dense::new(
            Tensor::new(vec![fan_in + OMEGA_FEATURES, fan_out], w).expect("consistent shape"),
            first.bias.clone(),
            first.activation,
        )
        .expect("consistent layer");
        DenoiserNet {
            trunk: MlpParams::from_layers(layers).expect("widths unchanged"),
            omega_conditioned: true,
            ..self.clone()
        }
    }
}

impl Parameterized for DenoiserNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.trunk.params();
        v.push(&self.label_table);
        if let Some(a) = &self.adapter {
            v.extend(a.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.trunk.params_mut();
        v.push(&mut self.label_table);
        if let Some(a) = &mut self.adapter {
            v.extend(a.params_mut());
        }
        v
    }
}

pub fn trunk_input_width(latent_dim: usize, omega_conditioned: bool) -> usize {
    latent_dim + TIME_FEATURES + LABEL_FEATURES + if omega_conditioned { OMEGA_FEATURES } else { 0 }
}

fn penultimate_width(trunk: &MlpParams) -> usize {
    let layers = trunk.layers();
    layers[layers.len() - 1].fan_in()
}

fn broadcast<T: Clone>(v: Vec<T>, batch: usize, what: &str) -> Result<Vec<T>> {
    match v.len() {
        n if n == batch => Ok(v),
        1 => Ok(vec![v[0].clone(); batch]),
        n => Err(Error::shape(format!("{n} {what} for a batch of {batch}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the label by ∅.
    pub label_dropout: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![256, 256, 256],
            steps: 4000,
            batch_size: 128,
            lr: 1e-3,
            label_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every iteration.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first `k` losses.
    pub fn initial(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[..k].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `k` losses.
    pub fn last(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Noise-prediction loss `mean ‖ε_θ(s_t, c, t) − ε‖²` on one batch, with
/// gradients for every parameter of `net`.
pub fn eps_loss_and_grads(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    s0: &Tensor,
    labels: &[Label],
    times: &[f64],
    noise: &Tensor,
    hint: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let s_t = schedule.forward_marginal_rows(s0, times, noise)?;
    let mut tape = Tape::new();
    let bound = net.bind_nodes(&mut tape);
    let x = tape.leaf(s_t);
    let pred = net.forward_tape(&mut tape, &bound, x, times, labels, None, hint)?;
    let target = tape.leaf(noise.clone());
    let diff = tape.sub(pred, target)?;
    let loss = tape.sum_squares(diff, 1.0 / noise.len() as f64);
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.collect(&bound.all())))
}

/// Trains a label-conditioned noise predictor on standardized latents.
pub fn train_teacher(
    latents: &Tensor,
    labels: &[usize],
    num_labels: usize,
    schedule: &NoiseSchedule,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<(DenoiserNet, TrainReport)> {
    let n = latents.rows();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} latents",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net_cfg = DenoiserConfig {
        latent_dim: latents.cols(),
        num_labels,
        hidden: cfg.hidden.clone(),
        omega_conditioned: false,
        hint_dim: None,
        adapter_hidden: 0,
    };
    let mut net = DenoiserNet::new(&net_cfg, &mut rng);
    let mut opt = AdamState::new(&net, cfg.lr);
    let mut report = TrainReport::default();
    let all: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.min(n);

    for it in 0..cfg.steps {
        let idx: Vec<usize> = all.choose_multiple(&mut rng, batch).copied().collect();
        let s0 = latents.select_rows(&idx);
        let lbl: Vec<Label> = idx
            .iter()
            .map(|&i| {
                if rng.gen::<f64>() < cfg.label_dropout {
                    Label::Null
                } else {
                    Label::Class(labels[i])
                }
            })
            .collect();
        let times: Vec<f64> = (0..batch)
            .map(|_| schedule.time_of(rng.gen_range(1..=schedule.steps())))
            .collect();
        let noise = gaussian_like(&s0, &mut rng);
        let (loss, grads) = eps_loss_and_grads(&net, schedule, &s0, &lbl, &times, &noise, None)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss,
            });
        }
        opt.lr = cosine_lr(cfg.lr, it, cfg.steps, LR_FLOOR);
        opt.step(&mut net, &grads)?;
        report.losses.push(loss);
    }
    Ok((net, report))
}

pub(crate) fn gaussian_like<R: Rng + ?Sized>(t: &Tensor, rng: &mut R) -> Tensor {
    let data = (0..t.len()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn small_net(omega: bool, hint: Option<usize>) -> DenoiserNet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        DenoiserNet::new(
            &DenoiserConfig {
                latent_dim: 4,
                num_labels: 3,
                hidden: vec![16, 16],
                omega_conditioned: omega,
                hint_dim: hint,
                adapter_hidden: 8,
            },
            &mut rng,
        )
    }

    #[test]
    fn widths_follow_conditioning() {
        assert_eq!(small_net(false, None).trunk().input_width(), 4 + 32 + 16);
        assert_eq!(
            small_net(true, None).trunk().input_width(),
            4 + 32 + 16 + 16
        );
        assert_eq!(small_net(false, None).trunk().output_width(), 4);
    }

    #[test]
    fn zero_initialized_adapter_is_a_no_op() {
        let net = small_net(false, Some(6));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::randn(&[5, 4], &mut rng);
        let hint = Tensor::randn(&[5, 6], &mut rng);
        let with = net
            .predict_batch(&s, &[0.3], &[Label::Class(1)], None, Some(&hint))
            .unwrap();
        let without = net
            .predict_batch(&s, &[0.3], &[Label::Class(1)], None, None)
            .unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn zero_scale_ignores_hint() {
        let mut net = small_net(false, Some(6));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in net.adapter_mut().unwrap().params_mut() {
            *p = Tensor::randn(p.shape(), &mut rng);
        }
        let s = Tensor::randn(&[3, 4], &mut rng);
        let hint = Tensor::randn(&[3, 6], &mut rng);
        let trained = net
            .predict_batch(&s, &[0.5], &[Label::Class(0)], None, Some(&hint))
            .unwrap();
        let plain = net
            .predict_batch(&s, &[0.5], &[Label::Class(0)], None, None)
            .unwrap();
        assert_ne!(trained, plain);
        net.set_hint_scale(0.0).unwrap();
        let scaled = net
            .predict_batch(&s, &[0.5], &[Label::Class(0)], None, Some(&hint))
            .unwrap();
        assert_eq!(scaled, plain);
    }

    #[test]
    fn unknown_label_rejected() {
        let net = small_net(false, None);
        let s = Tensor::zeros(&[4]);
        assert!(net.predict_eps(&s, 0.5, Label::Class(3), None).is_err());
        assert!(net.predict_eps(&s, 0.5, Label::Null, None).is_ok());
        assert_eq!(
            net.predict_eps(&s, 0.5, Label::Class(2), None)
                .unwrap()
                .shape(),
            &[4]
        );
    }

    #[test]
    fn cfg_reduces_to_conditional_at_zero() {
        let net = small_net(false, None);
        let s = Tensor::vector(vec![0.1, -0.2, 0.3, 0.5]);
        let cond = net.predict_eps(&s, 0.4, Label::Class(1), None).unwrap();
        assert_eq!(
            net.cfg_eps(&s, 0.4, Label::Class(1), 0.0, None).unwrap(),
            cond
        );
        assert!(net.cfg_eps(&s, 0.4, Label::Null, 1.0, None).is_err());
    }

    #[test]
    fn cfg_is_affine_in_omega() {
        let net = small_net(false, None);
        let s = Tensor::vector(vec![0.4, 0.1, -0.9, 0.2]);
        let e = |w: f64| net.cfg_eps(&s, 0.7, Label::Class(0), w, None).unwrap();
        let (w1, w2) = (1.5, 7.5);
        let lhs = e(w1).add(&e(w2)).unwrap();
        let rhs = e((w1 + w2) / 2.0).scale(2.0);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn cfg_equal_branches_are_omega_invariant() {
        // a table whose rows are all equal makes ε(c) == ε(∅)
        let net = small_net(false, None);
        let table = Tensor::full(&[4, LABEL_FEATURES], 0.3);
        let net = DenoiserNet::from_parts(net.trunk().clone(), table, 4, false, None, 1.0).unwrap();
        let s = Tensor::vector(vec![0.4, 0.1, -0.9, 0.2]);
        let a = net.cfg_eps(&s, 0.7, Label::Class(2), 0.0, None).unwrap();
        let b = net.cfg_eps(&s, 0.7, Label::Class(2), 6.0, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn omega_conditioned_copy_starts_at_conditional() {
        let teacher = small_net(false, None);
        let student = teacher.to_omega_conditioned();
        let s = Tensor::vector(vec![0.4, 0.1, -0.9, 0.2]);
        let a = teacher.predict_eps(&s, 0.2, Label::Class(1), None).unwrap();
        let b = student
            .predict_batch(&s, &[0.2], &[Label::Class(1)], Some(&[6.0]), None)
            .unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() < 1e-14));
        assert!(student.predict_eps(&s, 0.2, Label::Class(1), None).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut net = small_net(false, Some(5));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in net.adapter_mut().unwrap().params_mut() {
            *p = Tensor::randn(p.shape(), &mut rng).scale(0.3);
        }
        let schedule = NoiseSchedule::new(ScheduleKind::Linear, 100, 1e-4, 2e-2).unwrap();
        let s0 = Tensor::randn(&[3, 4], &mut rng);
        let noise = Tensor::randn(&[3, 4], &mut rng);
        let hint = Tensor::randn(&[3, 5], &mut rng);
        let labels = [Label::Class(0), Label::Null, Label::Class(2)];
        let times = [0.1, 0.5, 0.93];
        let (_, grads) =
            eps_loss_and_grads(&net, &schedule, &s0, &labels, &times, &noise, Some(&hint)).unwrap();

        let h = 1e-5;
        let n_params = net.params().len();
        for p in 0..n_params {
            for j in (0..net.params()[p].len()).step_by(7) {
                let mut plus = net.clone();
                plus.params_mut()[p].data_mut()[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[p].data_mut()[j] -= h;
                let lp =
                    eps_loss_and_grads(&plus, &schedule, &s0, &labels, &times, &noise, Some(&hint))
                        .unwrap()
                        .0;
                let lm = eps_loss_and_grads(
                    &minus,
                    &schedule,
                    &s0,
                    &labels,
                    &times,
                    &noise,
                    Some(&hint),
                )
                .unwrap()
                .0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[p].data()[j];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {p}[{j}]: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn teacher_training_is_deterministic_and_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let latents = Tensor::randn(&[64, 2], &mut rng).scale(0.2);
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let schedule = NoiseSchedule::new(ScheduleKind::Linear, 100, 1e-4, 2e-2).unwrap();
        let cfg = TeacherConfig {
            hidden: vec![32, 32],
            steps: 300,
            batch_size: 32,
            lr: 2e-3,
            label_dropout: 0.5,
        };
        let (a, report) = train_teacher(&latents, &labels, 2, &schedule, &cfg, 9).unwrap();
        let (b, _) = train_teacher(&latents, &labels, 2, &schedule, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(report.last(30) < 0.5 * report.initial(30));

        // the ∅ row received gradient traffic
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fresh = DenoiserNet::new(
            &DenoiserConfig {
                latent_dim: 2,
                num_labels: 2,
                hidden: vec![32, 32],
                omega_conditioned: false,
                hint_dim: None,
                adapter_hidden: 0,
            },
            &mut rng,
        );
        assert_ne!(fresh.label_table().row(2), a.label_table().row(2));
    }
}
