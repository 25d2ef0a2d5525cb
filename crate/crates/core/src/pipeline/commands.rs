//! The four user-facing commands: make-data, train, translate, evaluate.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::codec::{train_autoencoder, Codec};
use crate::consistency::{distill, ConsistencyModel};
use crate::denoiser::{train_teacher, DenoiserNet, Label};
use crate::downstream::{
    run_schemes, schemes_csv, semantic_consistency_eval, train_segmenter, Scheme, Segmenter,
};
use crate::error::Error;
use crate::hint::{hint_batch, train_adapter, AdapterConfig, AdapterTarget};
use crate::metrics::{
    density_coverage, frechet_gaussian, mmd2, EmbeddingSpec, MetricRecord, MmdEstimator,
};
use crate::sampler::{row_seed, sdedit_translate, Conditioning, Translator, MAX_CONSISTENCY_STEPS};
use crate::tensor::Tensor;
use crate::toy::{
    gen_domain, images_tensor, scene_labels, Domain, LabeledSample, CHANNELS, IMAGE_DIM,
    NUM_SCENE_LABELS,
};
use crate::transport::{color_adapt, ColorAdaptConfig};

use super::checkpoint::{
    codec_checkpoint, consistency_checkpoint, load_codec, load_consistency, load_segmenter,
    load_teacher, segmenter_checkpoint, teacher_checkpoint, Checkpoint, CheckpointKind,
};
use super::config::RunConfig;
use super::io::{metrics_csv, read_dataset, read_info, write_dataset, write_info};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SIM2REAL_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "sim2real-out";
pub const RUN_LOG: &str = "runs.log";
/// Teacher DDIM steps when translate gets no `--steps`.
pub const DEFAULT_TEACHER_STEPS: usize = 50;
/// Neighbors used for density and coverage.
pub const DC_NEIGHBORS: usize = 5;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    Usage(String),
    /// Anything that fails while running; exit code 2.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Appends one tab-separated record to the run log, creating parents.
pub fn append_run_log(log: &Path, fields: &[String]) -> CliResult<()> {
    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .map_err(|e| Error::io(log, e))?;
    writeln!(f, "{}", fields.join("\t")).map_err(|e| Error::io(log, e))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

#[derive(Clone, Debug)]
pub struct MakeDataArgs {
    pub domain: Domain,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
}

pub fn make_data(args: &MakeDataArgs) -> CliResult<()> {
    if args.domain == Domain::Translated {
        return Err(usage("make-data generates sim or real data"));
    }
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let samples = gen_domain(args.domain, args.n, args.seed)?;
    write_dataset(&args.out, &samples, args.force).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    write_info(
        &args.out,
        &[
            ("domain", args.domain.to_string()),
            ("n", args.n.to_string()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Teacher,
    Distill,
    Segmenter,
    /// Hint adapter on top of a teacher or consistency model.
    Adapter,
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "ae" => Ok(Stage::Ae),
            "teacher" => Ok(Stage::Teacher),
            "distill" => Ok(Stage::Distill),
            "segmenter" => Ok(Stage::Segmenter),
            "adapter" => Ok(Stage::Adapter),
            other => Err(usage(format!(
                "unknown stage '{other}' (expected ae, teacher, distill, segmenter or adapter)"
            ))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ae => "ae",
            Stage::Teacher => "teacher",
            Stage::Distill => "distill",
            Stage::Segmenter => "segmenter",
            Stage::Adapter => "adapter",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub stage: Stage,
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
    /// Codec checkpoint for the teacher stage.
    pub codec: Option<PathBuf>,
    /// Teacher checkpoint for the distill stage.
    pub teacher: Option<PathBuf>,
    /// Teacher or consistency checkpoint for the adapter stage.
    pub model: Option<PathBuf>,
    pub config: RunConfig,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub wall_seconds: f64,
    pub digest: String,
}

fn load_all(dirs: &[PathBuf]) -> CliResult<Vec<LabeledSample>> {
    if dirs.is_empty() {
        return Err(usage("--data is required"));
    }
    let mut all = Vec::new();
    for d in dirs {
        all.extend(read_dataset(d)?);
    }
    if all.is_empty() {
        return Err(usage("training data is empty"));
    }
    Ok(all)
}

fn require<'a>(
    path: &'a Option<PathBuf>,
    flag: &str,
    stage: Stage,
    first: &str,
) -> CliResult<&'a Path> {
    path.as_deref().ok_or_else(|| {
        usage(format!(
            "stage {stage} needs {flag} <CKPT>; run the {first} stage first (train --stage {first})"
        ))
    })
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::read(path)?)
}

fn latents_of(codec: &Codec, samples: &[LabeledSample]) -> CliResult<Tensor> {
    Ok(codec.encode(&images_tensor(samples)?)?.as_matrix())
}

/// Final loss as the mean of the last 50 iterations.
const FINAL_WINDOW: usize = 50;

pub fn train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let cfg = &args.config;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let started = Instant::now();
    let (mut ckpt, final_loss) = match args.stage {
        Stage::Ae => {
            let samples = load_all(&args.data)?;
            let (codec, report) =
                train_autoencoder(&images_tensor(&samples)?, &cfg.codec_config(), cfg.seed)?;
            (codec_checkpoint(&codec), report.holdout_mse)
        }
        Stage::Teacher => {
            let codec_path = require(&args.codec, "--codec", args.stage, "ae")?;
            let codec = load_codec(&read_checkpoint(codec_path)?)?;
            let samples = load_all(&args.data)?;
            let schedule = cfg.schedule()?;
            let latents = latents_of(&codec, &samples)?;
            let (net, report) = train_teacher(
                &latents,
                &scene_labels(&samples),
                NUM_SCENE_LABELS,
                &schedule,
                &cfg.teacher_config(),
                cfg.seed,
            )?;
            (
                teacher_checkpoint(&net, &schedule, &codec),
                report.last(FINAL_WINDOW),
            )
        }
        Stage::Distill => {
            let teacher_path = require(&args.teacher, "--teacher", args.stage, "teacher")?;
            let teacher_ckpt = read_checkpoint(teacher_path)?;
            let (teacher, schedule) = load_teacher(&teacher_ckpt)?;
            let codec = load_codec(&teacher_ckpt)?;
            let samples = load_all(&args.data)?;
            let latents = latents_of(&codec, &samples)?;
            let (mut cm, report) = distill(
                &teacher,
                &schedule,
                &latents,
                &scene_labels(&samples),
                &cfg.distill_config(),
            )?;
            cm.teacher_digest = Some(teacher_ckpt.digest());
            let mut c = consistency_checkpoint(&cm, &codec);
            c.set_meta("omega_min", cfg.omega_min);
            c.set_meta("omega_max", cfg.omega_max);
            (c, report.last(FINAL_WINDOW))
        }
        Stage::Segmenter => {
            let samples = load_all(&args.data)?;
            let (seg, report) = train_segmenter(&samples, &cfg.segmenter_config(), cfg.seed, None)?;
            (segmenter_checkpoint(&seg), report.last(FINAL_WINDOW))
        }
        Stage::Adapter => {
            let model_path = require(&args.model, "--model", args.stage, "teacher")?;
            let kind = cfg
                .control
                .ok_or_else(|| usage("the adapter stage needs control = edge|depth (--control)"))?;
            let base = read_checkpoint(model_path)?;
            let codec = load_codec(&base)?;
            let samples = load_all(&args.data)?;
            let latents = latents_of(&codec, &samples)?;
            let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
            let hints = hint_batch(&masks, kind)?;
            let acfg = AdapterConfig {
                hidden: cfg.adapter_hidden,
                steps: cfg.adapter_steps,
                batch_size: cfg.teacher_batch,
                lr: cfg.adapter_lr,
                omega_range: (cfg.omega_min, cfg.omega_max),
            };
            let labels = scene_labels(&samples);
            let (mut c, loss) = match base.kind {
                CheckpointKind::Teacher => {
                    let (net, schedule) = load_teacher(&base)?;
                    let target = AdapterTarget::Teacher {
                        net: &net,
                        schedule: &schedule,
                    };
                    let (tuned, report) =
                        train_adapter(target, &latents, &labels, &hints, &acfg, cfg.seed)?;
                    (
                        teacher_checkpoint(&tuned, &schedule, &codec),
                        report.last(FINAL_WINDOW),
                    )
                }
                CheckpointKind::Consistency => {
                    let cm = load_consistency(&base)?;
                    let (tuned, report) = train_adapter(
                        AdapterTarget::Consistency(&cm),
                        &latents,
                        &labels,
                        &hints,
                        &acfg,
                        cfg.seed,
                    )?;
                    let mut out =
                        ConsistencyModel::new(tuned, cm.schedule().clone(), cm.sigma_data())?;
                    out.teacher_digest = cm.teacher_digest.clone();
                    let mut c = consistency_checkpoint(&out, &codec);
                    for key in ["omega_min", "omega_max"] {
                        if let Some(v) = base.metadata.get(key) {
                            c.set_meta(key, v);
                        }
                    }
                    (c, report.last(FINAL_WINDOW))
                }
                other => {
                    return Err(usage(format!(
                        "adapters attach to teacher or consistency models, got {other}"
                    )))
                }
            };
            c.set_meta("control", kind);
            (c, loss)
        }
    };
    ckpt.set_meta("config_digest", cfg.digest());
    ckpt.set_meta("seed", cfg.seed);
    ckpt.set_meta("stage", args.stage);
    ensure_parent(&args.out)?;
    ckpt.write(&args.out)?;
    let summary = TrainSummary {
        final_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        digest: ckpt.digest(),
    };
    append_run_log(
        &args.log,
        &[
            "train".to_string(),
            args.stage.to_string(),
            format!("config={}", cfg.digest()),
            format!("wall_s={:.3}", summary.wall_seconds),
            format!("final_loss={:e}", summary.final_loss),
            args.out.display().to_string(),
        ],
    )?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct TranslateArgs {
    pub model: PathBuf,
    pub input: PathBuf,
    /// Defaults to the config's `steps` for consistency models and to
    /// [`DEFAULT_TEACHER_STEPS`] for teachers.
    pub steps: Option<usize>,
    /// Target-domain data for the optional color pre-map.
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
    pub config: RunConfig,
    pub log: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslateSummary {
    pub steps: usize,
    pub per_image_seconds: Vec<f64>,
}

impl TranslateSummary {
    pub fn mean_seconds(&self) -> f64 {
        self.per_image_seconds.iter().sum::<f64>() / self.per_image_seconds.len().max(1) as f64
    }
}

enum Loaded {
    Teacher(DenoiserNet),
    Consistency(ConsistencyModel),
}

impl Loaded {
    fn net_mut(&mut self) -> &mut DenoiserNet {
        match self {
            Loaded::Teacher(n) => n,
            Loaded::Consistency(cm) => cm.net_mut(),
        }
    }

    fn translator(&self) -> Translator<'_> {
        match self {
            Loaded::Teacher(n) => Translator::Teacher(n),
            Loaded::Consistency(cm) => Translator::Consistency(cm),
        }
    }
}

/// Pixels of every reference image in `[0, 1]`, as `[n, 3]` rows.
fn pixel_pool(samples: &[LabeledSample]) -> CliResult<Tensor> {
    let data: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.image.data().iter().map(|v| (v + 1.0) / 2.0))
        .collect();
    Ok(Tensor::new(vec![data.len() / CHANNELS, CHANNELS], data)?)
}

const OT_SEED_SALT: u64 = 0x07_0C01;

pub fn translate(args: &TranslateArgs) -> CliResult<TranslateSummary> {
    let cfg = &args.config;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ckpt = read_checkpoint(&args.model)?;
    let codec = load_codec(&ckpt)?;
    let (mut model, schedule, steps) = match ckpt.kind {
        CheckpointKind::Teacher => {
            let (net, schedule) = load_teacher(&ckpt)?;
            let steps = args.steps.unwrap_or(DEFAULT_TEACHER_STEPS);
            if steps == 0 {
                return Err(usage("--steps must be positive"));
            }
            (Loaded::Teacher(net), schedule, steps)
        }
        CheckpointKind::Consistency => {
            let cm = load_consistency(&ckpt)?;
            let steps = args.steps.unwrap_or(cfg.steps);
            if steps == 0 || steps > MAX_CONSISTENCY_STEPS {
                return Err(usage(format!(
                    "consistency models take 1 to {MAX_CONSISTENCY_STEPS} steps, got {steps}"
                )));
            }
            if let (Ok(lo), Ok(hi)) = (
                ckpt.meta_parse::<f64>("omega_min"),
                ckpt.meta_parse::<f64>("omega_max"),
            ) {
                if !(lo..=hi).contains(&cfg.omega) {
                    return Err(usage(format!(
                        "omega {} outside the trained range [{lo}, {hi}]",
                        cfg.omega
                    )));
                }
            }
            let schedule = cm.schedule().clone();
            (Loaded::Consistency(cm), schedule, steps)
        }
        other => {
            return Err(usage(format!(
                "translate needs a teacher or consistency checkpoint, got {other}"
            )))
        }
    };
    if cfg.control.is_some() {
        let net = model.net_mut();
        if net.hint_dim().is_none() {
            // untrained adapter: zero output, so the hint is a no-op
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            net.attach_adapter(IMAGE_DIM / CHANNELS, cfg.adapter_hidden, &mut rng);
        }
        net.set_hint_scale(cfg.control_scale)?;
    }
    let pool = if cfg.ot {
        let dir = args
            .reference
            .as_deref()
            .ok_or_else(|| usage("--ot needs --reference <DIR> with target-domain images"))?;
        Some(pixel_pool(&read_dataset(dir)?)?)
    } else {
        None
    };
    let ot_cfg = ColorAdaptConfig {
        samples: cfg.ot_samples,
        relative_epsilon: cfg.ot_relative_epsilon,
        ..ColorAdaptConfig::default()
    };

    let inputs = read_dataset(&args.input)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut times = Vec::with_capacity(inputs.len());
    for (i, src) in inputs.iter().enumerate() {
        let started = Instant::now();
        let mut image = src.image.clone();
        if let Some(pool) = &pool {
            let unit = image.map(|v| (v + 1.0) / 2.0);
            let mapped = color_adapt(&unit, pool, &ot_cfg, row_seed(cfg.seed ^ OT_SEED_SALT, i))?;
            image = mapped.map(|v| 2.0 * v - 1.0);
        }
        let mut cond = Conditioning {
            labels: vec![Label::Class(src.scene_label())],
            omega: cfg.omega,
            hint: None,
        };
        if let Some(kind) = cfg.control {
            cond.hint = Some(hint_batch(&[&src.mask], kind)?);
        }
        let batch = image.clone().reshape(&[1, IMAGE_DIM])?;
        let out = sdedit_translate(
            model.translator(),
            &batch,
            cfg.strength,
            &cond,
            steps,
            &codec,
            &schedule,
            row_seed(cfg.seed, i),
        )?;
        times.push(started.elapsed().as_secs_f64());
        outputs.push(LabeledSample {
            image: out.reshape(src.image.shape())?,
            mask: src.mask.clone(),
            domain: Domain::Translated,
            seed: src.seed,
        });
    }
    write_dataset(&args.out, &outputs, args.force).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    let model_name = match ckpt.kind {
        CheckpointKind::Teacher => "teacher",
        _ => "consistency",
    };
    write_info(
        &args.out,
        &[
            ("model", model_name.to_string()),
            ("model_digest", ckpt.digest()),
            ("steps", steps.to_string()),
            ("strength", cfg.strength.to_string()),
            ("omega", cfg.omega.to_string()),
            ("ot", cfg.ot.to_string()),
            (
                "control",
                cfg.control.map_or("none".to_string(), |c| c.to_string()),
            ),
            ("control_scale", cfg.control_scale.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    let summary = TranslateSummary {
        steps,
        per_image_seconds: times,
    };
    append_run_log(
        &args.log,
        &[
            "translate".to_string(),
            format!("{model_name}:{steps}"),
            format!("config={}", cfg.digest()),
            format!("images={}", outputs.len()),
            format!("mean_image_s={:.6}", summary.mean_seconds()),
            args.out.display().to_string(),
        ],
    )?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricTag {
    /// Density and coverage.
    Dc,
    Mmd,
    Fd,
    /// Semantic consistency under a real-trained segmenter.
    Seg,
}

pub const METRIC_TAGS: &str = "dc, mmd, fd, seg";

impl FromStr for MetricTag {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.trim() {
            "dc" => Ok(MetricTag::Dc),
            "mmd" => Ok(MetricTag::Mmd),
            "fd" => Ok(MetricTag::Fd),
            "seg" => Ok(MetricTag::Seg),
            other => Err(usage(format!(
                "unknown metric '{other}' (valid: {METRIC_TAGS})"
            ))),
        }
    }
}

pub fn parse_metric_tags(list: &str) -> CliResult<Vec<MetricTag>> {
    let tags: Vec<MetricTag> = list.split(',').map(str::parse).collect::<CliResult<_>>()?;
    if tags.is_empty() {
        return Err(usage(format!("no metrics given (valid: {METRIC_TAGS})")));
    }
    Ok(tags)
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub real: PathBuf,
    pub gen: PathBuf,
    pub metrics: Vec<MetricTag>,
    pub out: PathBuf,
    /// Segmenter for `seg`; trained on `real` with the config seed when absent.
    pub segmenter: Option<PathBuf>,
    /// Seeds for the downstream scheme comparison; empty skips it.
    pub scheme_seeds: Vec<u64>,
    pub config: RunConfig,
    pub log: PathBuf,
}

/// Flattened images of a dataset, one row each.
fn image_rows(samples: &[LabeledSample]) -> CliResult<Tensor> {
    Ok(images_tensor(samples)?.as_matrix())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<Vec<MetricRecord>> {
    let cfg = &args.config;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if args.metrics.is_empty() && args.scheme_seeds.is_empty() {
        return Err(usage(format!("no metrics given (valid: {METRIC_TAGS})")));
    }
    let started = Instant::now();
    let real = read_dataset(&args.real)?;
    let gen = read_dataset(&args.gen)?;
    let info = read_info(&args.gen)?;
    let lookup = |k: &str| {
        info.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
    };
    let model = lookup("model").unwrap_or_else(|| "data".to_string());
    let steps = lookup("steps").and_then(|s| s.parse().ok());
    let dataset = dir_name(&args.gen);
    let record = |metric: &str, value: Option<f64>, meta: String| MetricRecord {
        metric: metric.to_string(),
        dataset: dataset.clone(),
        model: model.clone(),
        steps,
        seed: cfg.seed,
        value,
        meta,
    };

    let embedding = EmbeddingSpec::for_images(IMAGE_DIM);
    let needs_embedding = args
        .metrics
        .iter()
        .any(|m| matches!(m, MetricTag::Dc | MetricTag::Mmd | MetricTag::Fd));
    let (er, eg) = if needs_embedding {
        (
            embedding.embed(&image_rows(&real)?)?,
            embedding.embed(&image_rows(&gen)?)?,
        )
    } else {
        (Tensor::zeros(&[1]), Tensor::zeros(&[1]))
    };
    let mut records = Vec::new();
    for tag in &args.metrics {
        match tag {
            MetricTag::Dc => {
                let dc = density_coverage(&er, &eg, DC_NEIGHBORS)?;
                records.push(record(
                    "density",
                    Some(dc.density),
                    format!("k={DC_NEIGHBORS}"),
                ));
                records.push(record(
                    "coverage",
                    Some(dc.coverage),
                    format!("k={DC_NEIGHBORS}"),
                ));
            }
            MetricTag::Mmd => {
                let v = mmd2(&er, &eg, None, MmdEstimator::Biased)?;
                records.push(record(
                    "mmd2",
                    Some(v),
                    "biased;median-bandwidth".to_string(),
                ));
            }
            MetricTag::Fd => {
                records.push(record(
                    "fd",
                    Some(frechet_gaussian(&er, &eg)?),
                    String::new(),
                ));
            }
            MetricTag::Seg => {
                let seg: Segmenter = match &args.segmenter {
                    Some(p) => load_segmenter(&read_checkpoint(p)?)?,
                    None => train_segmenter(&real, &cfg.segmenter_config(), cfg.seed, None)?.0,
                };
                let imgs: Vec<Tensor> = gen.iter().map(|s| s.image.clone()).collect();
                let masks: Vec<_> = gen.iter().map(|s| s.mask.clone()).collect();
                let ev = semantic_consistency_eval(&seg, &imgs, &masks)?;
                records.push(record(
                    "pixel_accuracy",
                    Some(ev.pixel_accuracy),
                    String::new(),
                ));
                records.push(record("mean_iou", Some(ev.mean_iou), String::new()));
                records.push(record("mean_dice", Some(ev.mean_dice), String::new()));
                records.push(record("mean_hausdorff", ev.mean_hausdorff, String::new()));
            }
        }
    }
    ensure_parent(&args.out)?;
    if !args.scheme_seeds.is_empty() {
        // first half of the real set trains, second half tests
        let half = real.len() / 2;
        let results = run_schemes(
            &Scheme::ALL,
            &real[..half],
            &gen,
            &real[half..],
            &cfg.segmenter_config(),
            &args.scheme_seeds,
        )?;
        for r in &results {
            let mk = |metric: &str, value: Option<f64>| MetricRecord {
                metric: metric.to_string(),
                dataset: dir_name(&args.real),
                model: r.scheme.name().to_string(),
                steps,
                seed: r.seed,
                value,
                meta: format!("translated={dataset}"),
            };
            records.push(mk("scheme_pixel_accuracy", Some(r.eval.pixel_accuracy)));
            records.push(mk("scheme_mean_iou", Some(r.eval.mean_iou)));
            records.push(mk("scheme_mean_dice", Some(r.eval.mean_dice)));
            records.push(mk("scheme_mean_hausdorff", r.eval.mean_hausdorff));
        }
        let table = args.out.with_extension("schemes.csv");
        fs::write(&table, schemes_csv(&results)).map_err(|e| Error::io(&table, e))?;
    }
    fs::write(&args.out, metrics_csv(&records)).map_err(|e| Error::io(&args.out, e))?;
    append_run_log(
        &args.log,
        &[
            "evaluate".to_string(),
            dataset.clone(),
            format!("config={}", cfg.digest()),
            format!("wall_s={:.3}", started.elapsed().as_secs_f64()),
            format!("records={}", records.len()),
            args.out.display().to_string(),
        ],
    )?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_and_stages_parse() {
        assert_eq!(
            parse_metric_tags("dc,mmd,fd,seg").unwrap(),
            vec![MetricTag::Dc, MetricTag::Mmd, MetricTag::Fd, MetricTag::Seg]
        );
        let err = parse_metric_tags("fd,fid").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains(METRIC_TAGS));
        assert_eq!("distill".parse::<Stage>().unwrap(), Stage::Distill);
        assert!("bake".parse::<Stage>().is_err());
    }

    #[test]
    fn distill_without_teacher_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let args = TrainArgs {
            stage: Stage::Distill,
            data: vec![dir.path().to_path_buf()],
            out: dir.path().join("cm.slcd"),
            codec: None,
            teacher: None,
            model: None,
            config: RunConfig::default(),
            log: dir.path().join(RUN_LOG),
        };
        let err = train(&args).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("teacher"));
    }

    #[test]
    fn make_data_is_deterministic_and_guarded() {
        let root = tempfile::tempdir().unwrap();
        let mk = |name: &str, force: bool| MakeDataArgs {
            domain: Domain::Real,
            n: 10,
            seed: 7,
            out: root.path().join(name),
            force,
        };
        make_data(&mk("a", false)).unwrap();
        make_data(&mk("b", false)).unwrap();
        for f in [
            "manifest.txt",
            "info.txt",
            "images/000009.png",
            "masks/000003.png",
        ] {
            assert_eq!(
                fs::read(root.path().join("a").join(f)).unwrap(),
                fs::read(root.path().join("b").join(f)).unwrap()
            );
        }
        let manifest = fs::read_to_string(root.path().join("a/manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 10);
        assert_eq!(make_data(&mk("a", false)).unwrap_err().exit_code(), 1);
        make_data(&mk("a", true)).unwrap();
    }
}
