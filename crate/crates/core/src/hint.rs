//! Spatial hints derived from label masks, and fine-tuning of the hint
//! adapter with every other weight frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::ConsistencyModel;
use crate::denoiser::{gaussian_like, DenoiserNet, Label, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::optim::{cosine_lr, AdamState, LR_FLOOR};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControlKind {
    /// Label-transition magnitude.
    Edge,
    /// Normalized distance from the centroid of each pixel's region.
    Depth,
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControlKind::Edge => "edge",
            ControlKind::Depth => "depth",
        })
    }
}

impl std::str::FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(ControlKind::Edge),
            "depth" => Ok(ControlKind::Depth),
            other => Err(Error::invalid(format!(
                "unknown control '{other}' (expected edge or depth)"
            ))),
        }
    }
}

/// Fraction of 4-neighbors carrying a different label, rescaled to
/// `[-1, 1]` like the images.
pub fn edge_map(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let here = mask.get(r, c);
            let mut total = 0usize;
            let mut differ = 0usize;
            let neighbors = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (nr, nc) in neighbors {
                if nr < h && nc < w {
                    total += 1;
                    differ += usize::from(mask.get(nr, nc) != here);
                }
            }
            out.push(2.0 * differ as f64 / total.max(1) as f64 - 1.0);
        }
    }
    out
}

/// 1 at the centroid of each label region falling to -1 at its farthest
/// pixel.
pub fn radial_map(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut sums = [[0.0f64; 3]; 256];
    for r in 0..h {
        for c in 0..w {
            let s = &mut sums[mask.get(r, c) as usize];
            s[0] += r as f64;
            s[1] += c as f64;
            s[2] += 1.0;
        }
    }
    let dist = |r: usize, c: usize| {
        let s = sums[mask.get(r, c) as usize];
        let (cr, cc) = (s[0] / s[2], s[1] / s[2]);
        ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt()
    };
    let mut reach = [0.0f64; 256];
    for r in 0..h {
        for c in 0..w {
            let l = mask.get(r, c) as usize;
            reach[l] = reach[l].max(dist(r, c));
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let l = mask.get(r, c) as usize;
            let rel = if reach[l] > 0.0 {
                dist(r, c) / reach[l]
            } else {
                0.0
            };
            out.push(1.0 - 2.0 * rel);
        }
    }
    out
}

pub fn hint_map(mask: &Mask, kind: ControlKind) -> Vec<f64> {
    match kind {
        ControlKind::Edge => edge_map(mask),
        ControlKind::Depth => radial_map(mask),
    }
}

/// One hint row per mask; all masks must share a size.
pub fn hint_batch(masks: &[&Mask], kind: ControlKind) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::invalid("no masks"))?;
    let dim = first.height * first.width;
    let mut data = Vec::with_capacity(masks.len() * dim);
    for m in masks {
        if m.height * m.width != dim {
            return Err(Error::shape("masks of different sizes"));
        }
        data.extend(hint_map(m, kind));
    }
    Tensor::new(vec![masks.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Guidance scales drawn for consistency students.
    pub omega_range: (f64, f64),
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            hidden: 64,
            steps: 1500,
            batch_size: 64,
            lr: 1e-3,
            omega_range: (4.5, 7.5),
        }
    }
}

/// What the adapter is trained to improve.
pub enum AdapterTarget<'a> {
    /// Noise prediction of a teacher.
    Teacher {
        net: &'a DenoiserNet,
        schedule: &'a NoiseSchedule,
    },
    /// Clean-latent recovery of a consistency model.
    Consistency(&'a ConsistencyModel),
}

fn check_inputs(
    latents: &Tensor,
    labels: &[usize],
    hints: &Tensor,
    cfg: &AdapterConfig,
) -> Result<()> {
    let n = latents.rows();
    if n == 0 || labels.len() != n || hints.rows() != n {
        return Err(Error::shape(format!(
            "{n} latents, {} labels, {} hints",
            labels.len(),
            hints.rows()
        )));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::invalid(
            "adapter batch size and width must be positive",
        ));
    }
    Ok(())
}

/// Attaches a fresh zero-output adapter when the network has none, then
/// trains only the adapter. Returns the network with the trained adapter.
pub fn train_adapter(
    target: AdapterTarget<'_>,
    latents: &Tensor,
    labels: &[usize],
    hints: &Tensor,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<(DenoiserNet, TrainReport)> {
    check_inputs(latents, labels, hints, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut net, schedule) = match &target {
        AdapterTarget::Teacher { net, schedule } => ((*net).clone(), (*schedule).clone()),
        AdapterTarget::Consistency(cm) => (cm.net().clone(), cm.schedule().clone()),
    };
    if net.hint_dim() != Some(hints.cols()) {
        net.attach_adapter(hints.cols(), cfg.hidden, &mut rng);
    }
    net.set_hint_scale(1.0)?;
    let mut adapter = net.adapter().expect("attached").clone();
    let mut opt = AdamState::new(&adapter, cfg.lr);
    let mut report = TrainReport::default();
    let n = latents.rows();
    let all: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.min(n);

    for it in 0..cfg.steps {
        let idx: Vec<usize> = all.choose_multiple(&mut rng, batch).copied().collect();
        let s0 = latents.select_rows(&idx);
        let h = hints.select_rows(&idx);
        let lbl: Vec<Label> = idx.iter().map(|&i| Label::Class(labels[i])).collect();
        let times: Vec<f64> = (0..batch)
            .map(|_| schedule.time_of(rng.gen_range(1..=schedule.steps())))
            .collect();
        let noise = gaussian_like(&s0, &mut rng);
        let s_t = schedule.forward_marginal_rows(&s0, &times, &noise)?;

        let mut tape = crate::autodiff::Tape::new();
        let bound = net.bind_nodes(&mut tape);
        let (pred, want) = match &target {
            AdapterTarget::Teacher { .. } => {
                let x = tape.leaf(s_t);
                (
                    net.forward_tape(&mut tape, &bound, x, &times, &lbl, None, Some(&h))?,
                    noise,
                )
            }
            AdapterTarget::Consistency(cm) => {
                let omegas: Vec<f64> = (0..batch)
                    .map(|_| rng.gen_range(cfg.omega_range.0..=cfg.omega_range.1))
                    .collect();
                let student =
                    ConsistencyModel::new(net.clone(), schedule.clone(), cm.sigma_data())?;
                (
                    student.consistency_tape(
                        &mut tape,
                        &bound,
                        &s_t,
                        &times,
                        &lbl,
                        &omegas,
                        Some(&h),
                    )?,
                    s0,
                )
            }
        };
        let want = tape.leaf(want);
        let diff = tape.sub(pred, want)?;
        let loss = tape.sum_squares(diff, 1.0 / (batch * latents.cols()) as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?.collect(&bound.adapter);
        opt.lr = cosine_lr(cfg.lr, it, cfg.steps, LR_FLOOR);
        opt.step(&mut adapter, &grads)?;
        *net.adapter_mut().expect("attached") = adapter.clone();
        report.losses.push(value);
    }
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleKind;

    fn split_mask() -> Mask {
        let labels = (0..16).map(|i| if i % 4 < 2 { 1 } else { 2 }).collect();
        Mask::new(4, 4, labels).unwrap()
    }

    #[test]
    fn edges_mark_transitions() {
        let e = edge_map(&split_mask());
        // columns 1 and 2 touch the other label
        assert!(e[1] > -1.0 && e[2] > -1.0);
        assert_eq!(e[0], -1.0);
        assert_eq!(e[3], -1.0);
        let flat = Mask::new(3, 3, vec![2; 9]).unwrap();
        assert!(edge_map(&flat).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn radial_peaks_inside_regions() {
        let m = Mask::new(5, 5, vec![0; 25]).unwrap();
        let r = radial_map(&m);
        assert_eq!(r[12], 1.0);
        assert_eq!(r[0], -1.0);
        assert!(r.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn adapter_training_leaves_trunk_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenoiserNet::new(
            &DenoiserConfig {
                latent_dim: 3,
                num_labels: 2,
                hidden: vec![16, 16],
                omega_conditioned: false,
                hint_dim: None,
                adapter_hidden: 0,
            },
            &mut rng,
        );
        let schedule = NoiseSchedule::new(ScheduleKind::Linear, 100, 1e-4, 2e-2).unwrap();
        let latents = Tensor::randn(&[20, 3], &mut rng);
        let hints = Tensor::randn(&[20, 4], &mut rng);
        let labels = [0, 1].repeat(10);
        let cfg = AdapterConfig {
            hidden: 8,
            steps: 5,
            batch_size: 8,
            ..AdapterConfig::default()
        };
        let target = AdapterTarget::Teacher {
            net: &net,
            schedule: &schedule,
        };
        let (tuned, report) = train_adapter(target, &latents, &labels, &hints, &cfg, 1).unwrap();
        assert_eq!(report.losses.len(), 5);
        assert_eq!(tuned.trunk(), net.trunk());
        assert_eq!(tuned.label_table(), net.label_table());
        assert_eq!(tuned.hint_dim(), Some(4));
    }
}
