//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SLCD" | u32 version | u8 kind
//! u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
//! u32 n_tensor { u32 len, name bytes, u32 rank, u64 dim * rank, f64 * numel } * n_tensor
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::codec::Codec;
use crate::consistency::ConsistencyModel;
use crate::denoiser::DenoiserNet;
use crate::downstream::Segmenter;
use crate::error::{Error, Result};
use crate::nn::{Dense, MlpParams};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::toy::CHANNELS;

pub const MAGIC: &[u8; 4] = b"SLCD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Codec,
    Teacher,
    Consistency,
    Segmenter,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Codec => 1,
            CheckpointKind::Teacher => 2,
            CheckpointKind::Consistency => 3,
            CheckpointKind::Segmenter => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => CheckpointKind::Codec,
            2 => CheckpointKind::Teacher,
            3 => CheckpointKind::Consistency,
            4 => CheckpointKind::Segmenter,
            other => {
                return Err(Error::format(
                    "checkpoint",
                    format!("unknown kind code {other}"),
                ))
            }
        })
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Codec => "codec",
            CheckpointKind::Teacher => "teacher",
            CheckpointKind::Consistency => "consistency",
            CheckpointKind::Segmenter => "segmenter",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Checkpoint {
            kind,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint", format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value {raw:?} for {key:?}")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name:?}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic (not an SLCD file)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let kind = CheckpointKind::from_code(r.take(1)?[0])?;
        let mut ckpt = Checkpoint::new(kind);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ckpt.metadata.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| Error::format("checkpoint", "dimension overflow"))?,
                );
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format("checkpoint", "tensor too large"))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ckpt.tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "non-UTF-8 string"))
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn split_usize(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::format("checkpoint", format!("bad dimension list {s:?}")))
        })
        .collect()
}

pub fn put_mlp(ckpt: &mut Checkpoint, prefix: &str, net: &MlpParams) {
    ckpt.set_meta(format!("{prefix}.layers"), net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        ckpt.set_meta(format!("{prefix}.{i}.activation"), layer.activation.name());
        ckpt.push_tensor(format!("{prefix}.{i}.weight"), layer.weight.clone());
        ckpt.push_tensor(format!("{prefix}.{i}.bias"), layer.bias.clone());
    }
}

pub fn get_mlp(ckpt: &Checkpoint, prefix: &str) -> Result<MlpParams> {
    let n: usize = ckpt.meta_parse(&format!("{prefix}.layers"))?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let act_name = ckpt.meta(&format!("{prefix}.{i}.activation"))?;
        let act = Activation::from_name(act_name).ok_or_else(|| {
            Error::format("checkpoint", format!("unknown activation {act_name:?}"))
        })?;
        let w = ckpt.tensor(&format!("{prefix}.{i}.weight"))?.clone();
        let b = ckpt.tensor(&format!("{prefix}.{i}.bias"))?.clone();
        layers.push(Dense::new(w, b, act)?);
    }
    MlpParams::from_layers(layers)
}

pub fn put_schedule(ckpt: &mut Checkpoint, schedule: &NoiseSchedule) {
    let (lo, hi) = schedule.beta_range();
    ckpt.set_meta("schedule.kind", schedule.kind());
    ckpt.set_meta("schedule.steps", schedule.steps());
    ckpt.set_meta("schedule.beta_lo", lo);
    ckpt.set_meta("schedule.beta_hi", hi);
    ckpt.push_tensor(
        "schedule.alpha_bar",
        Tensor::from_vec(schedule.alpha_bar_grid().to_vec()),
    );
}

pub fn get_schedule(ckpt: &Checkpoint) -> Result<NoiseSchedule> {
    let lo: f64 = ckpt.meta_parse("schedule.beta_lo")?;
    let hi: f64 = ckpt.meta_parse("schedule.beta_hi")?;
    if lo.is_finite() && hi.is_finite() {
        let kind: ScheduleKind = ckpt.meta_parse("schedule.kind")?;
        NoiseSchedule::new(kind, ckpt.meta_parse("schedule.steps")?, lo, hi)
    } else {
        NoiseSchedule::from_alpha_bar(ckpt.tensor("schedule.alpha_bar")?.data().to_vec())
    }
}

pub fn put_codec(ckpt: &mut Checkpoint, prefix: &str, codec: &Codec) {
    ckpt.set_meta(
        format!("{prefix}.image_shape"),
        join_usize(codec.image_shape()),
    );
    put_mlp(ckpt, &format!("{prefix}.encoder"), codec.encoder());
    put_mlp(ckpt, &format!("{prefix}.decoder"), codec.decoder());
    ckpt.push_tensor(format!("{prefix}.latent_mean"), codec.latent_mean().clone());
    ckpt.push_tensor(format!("{prefix}.latent_std"), codec.latent_std().clone());
}

pub fn get_codec(ckpt: &Checkpoint, prefix: &str) -> Result<Codec> {
    Codec::from_parts(
        get_mlp(ckpt, &format!("{prefix}.encoder"))?,
        get_mlp(ckpt, &format!("{prefix}.decoder"))?,
        split_usize(ckpt.meta(&format!("{prefix}.image_shape"))?)?,
        ckpt.tensor(&format!("{prefix}.latent_mean"))?.clone(),
        ckpt.tensor(&format!("{prefix}.latent_std"))?.clone(),
    )
}

pub fn put_denoiser(ckpt: &mut Checkpoint, prefix: &str, net: &DenoiserNet) {
    ckpt.set_meta(format!("{prefix}.latent_dim"), net.latent_dim());
    ckpt.set_meta(
        format!("{prefix}.omega_conditioned"),
        net.omega_conditioned(),
    );
    ckpt.set_meta(format!("{prefix}.hint_scale"), net.hint_scale());
    put_mlp(ckpt, &format!("{prefix}.trunk"), net.trunk());
    ckpt.push_tensor(format!("{prefix}.label_table"), net.label_table().clone());
    if let Some(a) = net.adapter() {
        put_mlp(ckpt, &format!("{prefix}.adapter"), a);
    }
}

pub fn get_denoiser(ckpt: &Checkpoint, prefix: &str) -> Result<DenoiserNet> {
    let adapter = if ckpt
        .metadata
        .contains_key(&format!("{prefix}.adapter.layers"))
    {
        Some(get_mlp(ckpt, &format!("{prefix}.adapter"))?)
    } else {
        None
    };
    DenoiserNet::from_parts(
        get_mlp(ckpt, &format!("{prefix}.trunk"))?,
        ckpt.tensor(&format!("{prefix}.label_table"))?.clone(),
        ckpt.meta_parse(&format!("{prefix}.latent_dim"))?,
        ckpt.meta_parse(&format!("{prefix}.omega_conditioned"))?,
        adapter,
        ckpt.meta_parse(&format!("{prefix}.hint_scale"))?,
    )
}

pub fn codec_checkpoint(codec: &Codec) -> Checkpoint {
    let mut c = Checkpoint::new(CheckpointKind::Codec);
    put_codec(&mut c, "codec", codec);
    c
}

/// Teacher checkpoints carry their codec and schedule so translation needs
/// nothing else.
pub fn teacher_checkpoint(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    codec: &Codec,
) -> Checkpoint {
    let mut c = Checkpoint::new(CheckpointKind::Teacher);
    put_denoiser(&mut c, "net", net);
    put_schedule(&mut c, schedule);
    put_codec(&mut c, "codec", codec);
    c
}

pub fn consistency_checkpoint(cm: &ConsistencyModel, codec: &Codec) -> Checkpoint {
    let mut c = Checkpoint::new(CheckpointKind::Consistency);
    put_denoiser(&mut c, "net", cm.net());
    put_schedule(&mut c, cm.schedule());
    c.set_meta("sigma_data", cm.sigma_data());
    if let Some(d) = &cm.teacher_digest {
        c.set_meta("teacher_digest", d);
    }
    put_codec(&mut c, "codec", codec);
    c
}

pub fn segmenter_checkpoint(seg: &Segmenter) -> Checkpoint {
    let mut c = Checkpoint::new(CheckpointKind::Segmenter);
    put_mlp(&mut c, "net", seg.net());
    c.push_tensor(
        "channel_mean",
        Tensor::from_vec(seg.channel_mean().to_vec()),
    );
    c.push_tensor(
        "channel_scale",
        Tensor::from_vec(seg.channel_scale().to_vec()),
    );
    c
}

pub fn load_codec(ckpt: &Checkpoint) -> Result<Codec> {
    get_codec(ckpt, "codec")
}

pub fn load_teacher(ckpt: &Checkpoint) -> Result<(DenoiserNet, NoiseSchedule)> {
    ckpt.expect_kind(CheckpointKind::Teacher)?;
    Ok((get_denoiser(ckpt, "net")?, get_schedule(ckpt)?))
}

pub fn load_consistency(ckpt: &Checkpoint) -> Result<ConsistencyModel> {
    ckpt.expect_kind(CheckpointKind::Consistency)?;
    let mut cm = ConsistencyModel::new(
        get_denoiser(ckpt, "net")?,
        get_schedule(ckpt)?,
        ckpt.meta_parse("sigma_data")?,
    )?;
    cm.teacher_digest = ckpt.metadata.get("teacher_digest").cloned();
    Ok(cm)
}

pub fn load_segmenter(ckpt: &Checkpoint) -> Result<Segmenter> {
    ckpt.expect_kind(CheckpointKind::Segmenter)?;
    let arr = |name: &str| -> Result<[f64; CHANNELS]> {
        ckpt.tensor(name)?
            .data()
            .try_into()
            .map_err(|_| Error::format("checkpoint", format!("{name} must hold {CHANNELS} values")))
    };
    Segmenter::from_parts(
        get_mlp(ckpt, "net")?,
        arr("channel_mean")?,
        arr("channel_scale")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut c = Checkpoint::new(CheckpointKind::Teacher);
        c.set_meta("note", "a=b # not a comment");
        c.push_tensor(
            "x",
            Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.tensor("x").unwrap().data()[1].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn rejects_damage() {
        let c = Checkpoint::new(CheckpointKind::Codec);
        let mut b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn denoiser_with_adapter_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DenoiserConfig {
            latent_dim: 4,
            num_labels: 2,
            hidden: vec![8],
            omega_conditioned: true,
            hint_dim: Some(5),
            adapter_hidden: 6,
        };
        let mut net = DenoiserNet::new(&cfg, &mut rng);
        net.set_hint_scale(0.7).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::ScaledLinear, 100, 1e-3, 2e-2).unwrap();
        let cm = ConsistencyModel::new(net, sched, 0.5).unwrap();
        let mut c = Checkpoint::new(CheckpointKind::Consistency);
        put_denoiser(&mut c, "net", cm.net());
        put_schedule(&mut c, cm.schedule());
        c.set_meta("sigma_data", cm.sigma_data());
        let back = load_consistency(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.net(), cm.net());
        assert_eq!(back.schedule(), cm.schedule());
    }

    #[test]
    fn synthetic_schedule_round_trips() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.9, 0.5, 0.1]).unwrap();
        let mut c = Checkpoint::new(CheckpointKind::Teacher);
        put_schedule(&mut c, &s);
        let back = get_schedule(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.alpha_bar_grid(), s.alpha_bar_grid());
        assert_eq!(back.betas(), s.betas());
    }
}
