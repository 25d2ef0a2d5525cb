//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::consistency::{Distance, DistillConfig, SIGMA_DATA};
use crate::denoiser::TeacherConfig;
use crate::downstream::SegmenterConfig;
use crate::error::{Error, Result};
use crate::hint::ControlKind;
use crate::sampler::{DEFAULT_STRENGTH, MAX_CONSISTENCY_STEPS};
use crate::schedule::{NoiseSchedule, ScheduleKind};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub schedule_kind: ScheduleKind,
    pub schedule_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,

    pub latent_dim: usize,
    pub ae_hidden: Vec<usize>,
    pub ae_epochs: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub ae_target: f64,

    pub teacher_hidden: Vec<usize>,
    pub teacher_steps: usize,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    pub label_dropout: f64,

    pub distill_iterations: usize,
    pub distill_batch: usize,
    pub distill_lr: f64,
    pub ema_rate: f64,
    pub boundary_steps: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub distance: Distance,
    pub sigma_data: f64,

    pub adapter_hidden: usize,
    pub adapter_steps: usize,
    pub adapter_lr: f64,

    pub strength: f64,
    pub omega: f64,
    pub steps: usize,
    pub ot: bool,
    pub ot_samples: usize,
    pub ot_relative_epsilon: f64,
    pub control: Option<ControlKind>,
    pub control_scale: f64,

    pub seg_hidden: Vec<usize>,
    pub seg_steps: usize,
    pub seg_batch: usize,
    pub seg_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let codec = CodecConfig::default();
        let teacher = TeacherConfig::default();
        let distill = DistillConfig::default();
        let seg = SegmenterConfig::default();
        RunConfig {
            seed: 0,
            schedule_kind: ScheduleKind::ScaledLinear,
            schedule_steps: 1000,
            beta_lo: 8.5e-4,
            beta_hi: 1.2e-2,
            latent_dim: codec.latent_dim,
            ae_hidden: codec.hidden,
            ae_epochs: codec.max_epochs,
            ae_batch: codec.batch_size,
            ae_lr: codec.lr,
            ae_target: codec.target,
            teacher_hidden: teacher.hidden,
            teacher_steps: teacher.steps,
            teacher_batch: teacher.batch_size,
            teacher_lr: teacher.lr,
            label_dropout: teacher.label_dropout,
            distill_iterations: distill.iterations,
            distill_batch: distill.batch_size,
            distill_lr: distill.lr,
            ema_rate: distill.ema_rate,
            boundary_steps: distill.boundary_steps,
            omega_min: distill.omega_range.0,
            omega_max: distill.omega_range.1,
            distance: distill.distance,
            sigma_data: SIGMA_DATA,
            adapter_hidden: 64,
            adapter_steps: 1500,
            adapter_lr: 1e-3,
            strength: DEFAULT_STRENGTH,
            omega: 6.0,
            steps: 2,
            ot: false,
            ot_samples: 1024,
            ot_relative_epsilon: 0.05,
            control: None,
            control_scale: 1.0,
            seg_hidden: seg.hidden,
            seg_steps: seg.steps,
            seg_batch: seg.batch_size,
            seg_lr: seg.lr,
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::invalid(format!("config key {key}: cannot parse {raw:?}")))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key {
            "seed" => self.seed = parse(key, raw)?,
            "schedule_kind" => self.schedule_kind = raw.parse()?,
            "schedule_steps" => self.schedule_steps = parse(key, raw)?,
            "beta_lo" => self.beta_lo = parse(key, raw)?,
            "beta_hi" => self.beta_hi = parse(key, raw)?,
            "latent_dim" => self.latent_dim = parse(key, raw)?,
            "ae_hidden" => self.ae_hidden = parse_list(key, raw)?,
            "ae_epochs" => self.ae_epochs = parse(key, raw)?,
            "ae_batch" => self.ae_batch = parse(key, raw)?,
            "ae_lr" => self.ae_lr = parse(key, raw)?,
            "ae_target" => self.ae_target = parse(key, raw)?,
            "teacher_hidden" => self.teacher_hidden = parse_list(key, raw)?,
            "teacher_steps" => self.teacher_steps = parse(key, raw)?,
            "teacher_batch" => self.teacher_batch = parse(key, raw)?,
            "teacher_lr" => self.teacher_lr = parse(key, raw)?,
            "label_dropout" => self.label_dropout = parse(key, raw)?,
            "distill_iterations" => self.distill_iterations = parse(key, raw)?,
            "distill_batch" => self.distill_batch = parse(key, raw)?,
            "distill_lr" => self.distill_lr = parse(key, raw)?,
            "ema_rate" => self.ema_rate = parse(key, raw)?,
            "boundary_steps" => self.boundary_steps = parse(key, raw)?,
            "omega_min" => self.omega_min = parse(key, raw)?,
            "omega_max" => self.omega_max = parse(key, raw)?,
            "distance" => self.distance = raw.parse()?,
            "sigma_data" => self.sigma_data = parse(key, raw)?,
            "adapter_hidden" => self.adapter_hidden = parse(key, raw)?,
            "adapter_steps" => self.adapter_steps = parse(key, raw)?,
            "adapter_lr" => self.adapter_lr = parse(key, raw)?,
            "strength" => self.strength = parse(key, raw)?,
            "omega" => self.omega = parse(key, raw)?,
            "steps" => self.steps = parse(key, raw)?,
            "ot" => self.ot = parse(key, raw)?,
            "ot_samples" => self.ot_samples = parse(key, raw)?,
            "ot_relative_epsilon" => self.ot_relative_epsilon = parse(key, raw)?,
            "control" => {
                self.control = match raw {
                    "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "control_scale" => self.control_scale = parse(key, raw)?,
            "seg_hidden" => self.seg_hidden = parse_list(key, raw)?,
            "seg_steps" => self.seg_steps = parse(key, raw)?,
            "seg_batch" => self.seg_batch = parse(key, raw)?,
            "seg_lr" => self.seg_lr = parse(key, raw)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Blank lines and
    /// everything after `#` are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", no + 1))
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical text form; `parse_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("schedule_kind", self.schedule_kind.to_string());
        kv("schedule_steps", self.schedule_steps.to_string());
        kv("beta_lo", self.beta_lo.to_string());
        kv("beta_hi", self.beta_hi.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("ae_hidden", join(&self.ae_hidden));
        kv("ae_epochs", self.ae_epochs.to_string());
        kv("ae_batch", self.ae_batch.to_string());
        kv("ae_lr", self.ae_lr.to_string());
        kv("ae_target", self.ae_target.to_string());
        kv("teacher_hidden", join(&self.teacher_hidden));
        kv("teacher_steps", self.teacher_steps.to_string());
        kv("teacher_batch", self.teacher_batch.to_string());
        kv("teacher_lr", self.teacher_lr.to_string());
        kv("label_dropout", self.label_dropout.to_string());
        kv("distill_iterations", self.distill_iterations.to_string());
        kv("distill_batch", self.distill_batch.to_string());
        kv("distill_lr", self.distill_lr.to_string());
        kv("ema_rate", self.ema_rate.to_string());
        kv("boundary_steps", self.boundary_steps.to_string());
        kv("omega_min", self.omega_min.to_string());
        kv("omega_max", self.omega_max.to_string());
        kv("distance", self.distance.to_string());
        kv("sigma_data", self.sigma_data.to_string());
        kv("adapter_hidden", self.adapter_hidden.to_string());
        kv("adapter_steps", self.adapter_steps.to_string());
        kv("adapter_lr", self.adapter_lr.to_string());
        kv("strength", self.strength.to_string());
        kv("omega", self.omega.to_string());
        kv("steps", self.steps.to_string());
        kv("ot", self.ot.to_string());
        kv("ot_samples", self.ot_samples.to_string());
        kv("ot_relative_epsilon", self.ot_relative_epsilon.to_string());
        kv(
            "control",
            self.control.map_or("none".to_string(), |c| c.to_string()),
        );
        kv("control_scale", self.control_scale.to_string());
        kv("seg_hidden", join(&self.seg_hidden));
        kv("seg_steps", self.seg_steps.to_string());
        kv("seg_batch", self.seg_batch.to_string());
        kv("seg_lr", self.seg_lr.to_string());
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        if ![1, 2, MAX_CONSISTENCY_STEPS].contains(&self.steps) {
            return Err(Error::invalid(format!(
                "steps must be 1, 2 or 4, got {}",
                self.steps
            )));
        }
        if !(self.omega_min <= self.omega_max) {
            return Err(Error::invalid("omega_min exceeds omega_max"));
        }
        if !(self.omega_min..=self.omega_max).contains(&self.omega) {
            return Err(Error::invalid(format!(
                "omega {} outside the trained range [{}, {}]",
                self.omega, self.omega_min, self.omega_max
            )));
        }
        if !(self.control_scale >= 0.0) {
            return Err(Error::invalid("control_scale must be non-negative"));
        }
        self.distill_config().validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.schedule_kind,
            self.schedule_steps,
            self.beta_lo,
            self.beta_hi,
        )
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            latent_dim: self.latent_dim,
            hidden: self.ae_hidden.clone(),
            max_epochs: self.ae_epochs,
            batch_size: self.ae_batch,
            lr: self.ae_lr,
            target: self.ae_target,
            ..CodecConfig::default()
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            hidden: self.teacher_hidden.clone(),
            steps: self.teacher_steps,
            batch_size: self.teacher_batch,
            lr: self.teacher_lr,
            label_dropout: self.label_dropout,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            omega_range: (self.omega_min, self.omega_max),
            ema_rate: self.ema_rate,
            boundary_steps: self.boundary_steps,
            distance: self.distance,
            sigma_data: self.sigma_data,
            iterations: self.distill_iterations,
            batch_size: self.distill_batch,
            lr: self.distill_lr,
            seed: self.seed,
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            hidden: self.seg_hidden.clone(),
            steps: self.seg_steps,
            batch_size: self.seg_batch,
            lr: self.seg_lr,
            ..SegmenterConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            seed: 17,
            control: Some(ControlKind::Edge),
            ae_hidden: vec![128, 64],
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blanks() {
        let cfg =
            RunConfig::parse_text("# header\n\nseed = 3   # trailing\n strength=0.25\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.strength, 0.25);
    }

    #[test]
    fn invariants_enforced() {
        assert!(RunConfig::parse_text("strength = 1.5").is_err());
        assert!(RunConfig::parse_text("steps = 3").is_err());
        assert!(RunConfig::parse_text("omega = 9").is_err());
        assert!(RunConfig::parse_text("bogus = 1").is_err());
        assert!(RunConfig::parse_text("seed 4").is_err());
    }
}
