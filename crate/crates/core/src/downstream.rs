//! Patch-classifier segmentation: training, evaluation, semantic
//! consistency of translated images, and training-scheme comparisons.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape};
use crate::denoiser::TrainReport;
use crate::error::{Error, Result};
use crate::metrics::{mask_hausdorff, seg_metrics_many, Mask};
use crate::nn::{MlpParams, Parameterized};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::toy::{LabeledSample, CHANNELS, NUM_CLASSES, SIZE};

/// Side of the square neighborhood fed to the classifier.
pub const PATCH: usize = 5;
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training fails if the mean loss of the last 50 steps stays above this.
    pub max_final_loss: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            hidden: vec![64],
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            max_final_loss: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    net: MlpParams,
    /// Per-channel mean and scale applied to patches.
    channel_mean: [f64; CHANNELS],
    channel_scale: [f64; CHANNELS],
}

impl Parameterized for Segmenter {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// `[256, 75]` neighborhoods of every pixel, edges replicated.
pub fn patches(image: &Tensor) -> Result<Tensor> {
    if image.len() != SIZE * SIZE * CHANNELS {
        return Err(Error::shape(format!(
            "expected a 16×16×3 image, got {:?}",
            image.shape()
        )));
    }
    let d = image.data();
    let h = (PATCH / 2) as i64;
    let mut out = Vec::with_capacity(SIZE * SIZE * PATCH_DIM);
    for r in 0..SIZE as i64 {
        for c in 0..SIZE as i64 {
            for dr in -h..=h {
                for dc in -h..=h {
                    let rr = (r + dr).clamp(0, SIZE as i64 - 1) as usize;
                    let cc = (c + dc).clamp(0, SIZE as i64 - 1) as usize;
                    let p = (rr * SIZE + cc) * CHANNELS;
                    out.extend_from_slice(&d[p..p + CHANNELS]);
                }
            }
        }
    }
    Tensor::new(vec![SIZE * SIZE, PATCH_DIM], out)
}

impl Segmenter {
    pub fn from_parts(
        net: MlpParams,
        channel_mean: [f64; CHANNELS],
        channel_scale: [f64; CHANNELS],
    ) -> Result<Self> {
        if net.input_width() != PATCH_DIM || net.output_width() != NUM_CLASSES {
            return Err(Error::shape(format!(
                "segmenter maps {PATCH_DIM} → {NUM_CLASSES}, got {} → {}",
                net.input_width(),
                net.output_width()
            )));
        }
        if channel_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("channel scales must be positive"));
        }
        Ok(Segmenter {
            net,
            channel_mean,
            channel_scale,
        })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn channel_mean(&self) -> [f64; CHANNELS] {
        self.channel_mean
    }

    pub fn channel_scale(&self) -> [f64; CHANNELS] {
        self.channel_scale
    }

    fn normalize(&self, mut p: Tensor) -> Tensor {
        for row in p.data_mut().chunks_exact_mut(CHANNELS) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.channel_mean[k]) / self.channel_scale[k];
            }
        }
        p
    }

    /// Per-pixel class logits, `[256, 5]`.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        self.net.forward(&self.normalize(patches(image)?))
    }

    pub fn predict(&self, image: &Tensor) -> Result<Mask> {
        let logits = self.logits(image)?;
        let labels = (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Mask::new(SIZE, SIZE, labels)
    }
}

fn channel_stats(samples: &[LabeledSample]) -> ([f64; CHANNELS], [f64; CHANNELS]) {
    let mut mean = [0.0; CHANNELS];
    let mut sq = [0.0; CHANNELS];
    let mut n = 0.0;
    for s in samples {
        for px in s.image.data().chunks_exact(CHANNELS) {
            for k in 0..CHANNELS {
                mean[k] += px[k];
                sq[k] += px[k] * px[k];
            }
            n += 1.0;
        }
    }
    let mut scale = [1.0; CHANNELS];
    for k in 0..CHANNELS {
        mean[k] /= n;
        let var = sq[k] / n - mean[k] * mean[k];
        scale[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

/// Cross-entropy training over all pixels of `samples`. With `warm_start`
/// the given model (including its normalization) is refined instead.
pub fn train_segmenter(
    samples: &[LabeledSample],
    cfg: &SegmenterConfig,
    seed: u64,
    warm_start: Option<&Segmenter>,
) -> Result<(Segmenter, TrainReport)> {
    if samples.len() < 50 {
        return Err(Error::invalid(format!(
            "need at least 50 samples, got {}",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seg = match warm_start {
        Some(s) => s.clone(),
        None => {
            let (mean, scale) = channel_stats(samples);
            let mut widths = vec![PATCH_DIM];
            widths.extend_from_slice(&cfg.hidden);
            widths.push(NUM_CLASSES);
            let net = MlpParams::random(&widths, Activation::Silu, Activation::Linear, &mut rng);
            Segmenter::from_parts(net, mean, scale)?
        }
    };
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok((seg, report));
    }
    let mut inputs = Vec::with_capacity(samples.len());
    for s in samples {
        inputs.push(seg.normalize(patches(&s.image)?));
    }
    let pixels = samples.len() * SIZE * SIZE;
    let mut opt = AdamState::new(&seg, cfg.lr);
    for it in 0..cfg.steps {
        let mut rows = Vec::with_capacity(cfg.batch_size * PATCH_DIM);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let p = rng.gen_range(0..pixels);
            let (i, px) = (p / (SIZE * SIZE), p % (SIZE * SIZE));
            rows.extend_from_slice(inputs[i].row(px));
            targets.push(samples[i].mask.labels[px] as usize);
        }
        let x = Tensor::new(vec![cfg.batch_size, PATCH_DIM], rows)?;
        let mut tape = Tape::new();
        let params = seg.net.bind(&mut tape);
        let xi = tape.leaf(x);
        let logits = seg.net.forward_tape_all(&mut tape, &params, xi)?;
        let loss = tape.softmax_cross_entropy(logits, targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut seg, &grads.collect(&params))?;
        report.losses.push(value);
    }
    let final_loss = report.last(50);
    if !(final_loss <= cfg.max_final_loss) {
        return Err(Error::Convergence {
            what: "segmenter".into(),
            final_loss,
        });
    }
    Ok((seg, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEval {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    pub mean_dice: f64,
    /// Mean over images of the class-averaged boundary Hausdorff distance.
    pub mean_hausdorff: Option<f64>,
    pub iou: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
}

/// Scores predicted masks against ground truth.
pub fn score_masks(pred: &[Mask], truth: &[Mask]) -> Result<SegEval> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} masks",
            pred.len(),
            truth.len()
        )));
    }
    let pairs: Vec<(&Mask, &Mask)> = pred.iter().zip(truth).collect();
    let m = seg_metrics_many(&pairs, NUM_CLASSES)?;
    let hd: Vec<f64> = pairs
        .iter()
        .filter_map(|(p, g)| mask_hausdorff(p, g, NUM_CLASSES))
        .collect();
    Ok(SegEval {
        pixel_accuracy: m.pixel_accuracy,
        mean_iou: m.mean_iou,
        mean_dice: m.mean_dice,
        mean_hausdorff: if hd.is_empty() {
            None
        } else {
            Some(hd.iter().sum::<f64>() / hd.len() as f64)
        },
        iou: m.iou,
        dice: m.dice,
    })
}

pub fn eval_segmenter(seg: &Segmenter, samples: &[LabeledSample]) -> Result<SegEval> {
    let pred: Vec<Mask> = samples
        .iter()
        .map(|s| seg.predict(&s.image))
        .collect::<Result<_>>()?;
    let truth: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    score_masks(&pred, &truth)
}

/// Runs a real-trained segmenter on translated images and scores it
/// against the masks of their simulated sources.
pub fn semantic_consistency_eval(
    seg_real: &Segmenter,
    translated: &[Tensor],
    source_masks: &[Mask],
) -> Result<SegEval> {
    let pred: Vec<Mask> = translated
        .iter()
        .map(|t| seg_real.predict(t))
        .collect::<Result<_>>()?;
    score_masks(&pred, source_masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    None,
    Color,
    ColorSpatial,
}

/// Per-channel affine color jitter and, for `ColorSpatial`, flips and an
/// integer translation with edge replication.
pub fn augment(sample: &LabeledSample, kind: Augmentation, rng: &mut ChaCha8Rng) -> LabeledSample {
    let mut out = sample.clone();
    if kind == Augmentation::None {
        return out;
    }
    let gains: Vec<(f64, f64)> = (0..CHANNELS)
        .map(|_| (rng.gen_range(0.8..1.2), rng.gen_range(-0.1..0.1)))
        .collect();
    for px in out.image.data_mut().chunks_exact_mut(CHANNELS) {
        for (v, (a, b)) in px.iter_mut().zip(&gains) {
            *v = (a * *v + b).clamp(-1.0, 1.0);
        }
    }
    if kind == Augmentation::ColorSpatial {
        let (fh, fv) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
        let (dy, dx) = (rng.gen_range(-2..=2i64), rng.gen_range(-2..=2i64));
        let src_img = out.image.clone();
        let src_mask = out.mask.clone();
        let n = SIZE as i64;
        for r in 0..n {
            for c in 0..n {
                let mut sr = (r - dy).clamp(0, n - 1);
                let mut sc = (c - dx).clamp(0, n - 1);
                if fv {
                    sr = n - 1 - sr;
                }
                if fh {
                    sc = n - 1 - sc;
                }
                let (d, s) = ((r * n + c) as usize, (sr * n + sc) as usize);
                out.mask.labels[d] = src_mask.labels[s];
                out.image.data_mut()[d * CHANNELS..(d + 1) * CHANNELS]
                    .copy_from_slice(&src_img.data()[s * CHANNELS..(s + 1) * CHANNELS]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    RealOnly,
    RealColorAug,
    RealColorSpatialAug,
    TranslatedOnly,
    TranslatedThenReal,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::RealOnly,
        Scheme::RealColorAug,
        Scheme::RealColorSpatialAug,
        Scheme::TranslatedOnly,
        Scheme::TranslatedThenReal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::RealOnly => "real-only",
            Scheme::RealColorAug => "real+color-aug",
            Scheme::RealColorSpatialAug => "real+color-spatial-aug",
            Scheme::TranslatedOnly => "translated-only",
            Scheme::TranslatedThenReal => "translated-then-real",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeResult {
    pub scheme: Scheme,
    pub seed: u64,
    pub eval: SegEval,
}

/// Trains one segmenter per scheme and evaluates it on `real_test`.
/// Translated samples carry their simulated source masks.
pub fn run_scheme(
    scheme: Scheme,
    real_train: &[LabeledSample],
    translated: &[LabeledSample],
    real_test: &[LabeledSample],
    cfg: &SegmenterConfig,
    seed: u64,
) -> Result<SchemeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA06);
    let with_aug = |kind: Augmentation, rng: &mut ChaCha8Rng| -> Vec<LabeledSample> {
        let mut v = real_train.to_vec();
        v.extend(real_train.iter().map(|s| augment(s, kind, rng)));
        v
    };
    // generated data is judged by the held-out scores, not by its training loss
    let ungated = SegmenterConfig {
        max_final_loss: f64::INFINITY,
        ..cfg.clone()
    };
    let seg = match scheme {
        Scheme::RealOnly => train_segmenter(real_train, cfg, seed, None)?.0,
        Scheme::RealColorAug => {
            train_segmenter(&with_aug(Augmentation::Color, &mut rng), cfg, seed, None)?.0
        }
        Scheme::RealColorSpatialAug => {
            train_segmenter(
                &with_aug(Augmentation::ColorSpatial, &mut rng),
                cfg,
                seed,
                None,
            )?
            .0
        }
        Scheme::TranslatedOnly => train_segmenter(translated, &ungated, seed, None)?.0,
        Scheme::TranslatedThenReal => {
            let pre = train_segmenter(translated, &ungated, seed, None)?.0;
            train_segmenter(real_train, cfg, seed.wrapping_add(1), Some(&pre))?.0
        }
    };
    Ok(SchemeResult {
        scheme,
        seed,
        eval: eval_segmenter(&seg, real_test)?,
    })
}

pub fn run_schemes(
    schemes: &[Scheme],
    real_train: &[LabeledSample],
    translated: &[LabeledSample],
    real_test: &[LabeledSample],
    cfg: &SegmenterConfig,
    seeds: &[u64],
) -> Result<Vec<SchemeResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &scheme in schemes {
            out.push(run_scheme(
                scheme, real_train, translated, real_test, cfg, seed,
            )?);
        }
    }
    Ok(out)
}

/// Scheme × metric table averaged over seeds, as CSV text.
pub fn schemes_csv(results: &[SchemeResult]) -> String {
    let mut s = String::from("scheme,seeds,pixel_accuracy,mean_iou,mean_dice,mean_hausdorff\n");
    for scheme in Scheme::ALL {
        let rows: Vec<&SchemeResult> = results.iter().filter(|r| r.scheme == scheme).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&SegEval) -> f64| rows.iter().map(|r| f(&r.eval)).sum::<f64>() / n;
        let hd: Vec<f64> = rows.iter().filter_map(|r| r.eval.mean_hausdorff).collect();
        let hd = if hd.len() == rows.len() {
            format!("{:.6}", hd.iter().sum::<f64>() / n)
        } else {
            "undefined".to_string()
        };
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            scheme.name(),
            rows.len(),
            avg(&|e| e.pixel_accuracy),
            avg(&|e| e.mean_iou),
            avg(&|e| e.mean_dice),
            hd
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{gen_real, Domain};

    /// Flat, well separated class colors.
    fn separable(n: usize, seed: u64) -> Vec<LabeledSample> {
        let colors = [
            [-0.9, -0.9, -0.9],
            [0.9, -0.9, -0.9],
            [-0.9, 0.9, -0.9],
            [-0.9, -0.9, 0.9],
            [0.9, 0.9, 0.9],
        ];
        gen_real(n, seed)
            .unwrap()
            .into_iter()
            .map(|mut s| {
                let data: Vec<f64> = s
                    .mask
                    .labels
                    .iter()
                    .flat_map(|&l| colors[l as usize])
                    .collect();
                s.image = Tensor::new(vec![SIZE, SIZE, CHANNELS], data).unwrap();
                s.domain = Domain::Simulated;
                s
            })
            .collect()
    }

    fn quick() -> SegmenterConfig {
        SegmenterConfig {
            steps: 300,
            ..Default::default()
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let train = separable(60, 1);
        let test = separable(30, 2);
        let (seg, _) = train_segmenter(&train, &quick(), 3, None).unwrap();
        let e = eval_segmenter(&seg, &test).unwrap();
        assert!(e.mean_iou > 0.95, "{e:?}");
    }

    #[test]
    fn deterministic_and_zero_step_warm_start() {
        let train = separable(50, 4);
        let cfg = SegmenterConfig {
            steps: 20,
            max_final_loss: 10.0,
            ..Default::default()
        };
        let a = train_segmenter(&train, &cfg, 5, None).unwrap().0;
        assert_eq!(a, train_segmenter(&train, &cfg, 5, None).unwrap().0);
        let zero = SegmenterConfig {
            steps: 0,
            ..cfg.clone()
        };
        assert_eq!(train_segmenter(&train, &zero, 9, Some(&a)).unwrap().0, a);
        assert!(train_segmenter(&train[..10], &cfg, 5, None).is_err());
    }

    #[test]
    fn oracle_masks_score_perfectly() {
        let s = separable(5, 6);
        let masks: Vec<Mask> = s.iter().map(|x| x.mask.clone()).collect();
        let e = score_masks(&masks, &masks).unwrap();
        assert_eq!((e.pixel_accuracy, e.mean_iou, e.mean_dice), (1.0, 1.0, 1.0));
        assert_eq!(e.mean_hausdorff, Some(0.0));
    }

    #[test]
    fn patches_replicate_edges() {
        let img = Tensor::new(
            vec![SIZE, SIZE, CHANNELS],
            (0..768).map(|v| v as f64).collect(),
        )
        .unwrap();
        let p = patches(&img).unwrap();
        assert_eq!(p.shape(), &[256, PATCH_DIM]);
        // centre of the patch is the pixel itself
        assert_eq!(&p.row(17)[36..39], &img.data()[51..54]);
        assert_eq!(&p.row(0)[0..3], &img.data()[0..3]);
    }

    #[test]
    fn augmentation_keeps_masks_valid() {
        let s = &separable(1, 7)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(&augment(s, Augmentation::None, &mut rng), s);
        let c = augment(s, Augmentation::Color, &mut rng);
        assert_eq!(c.mask, s.mask);
        let cs = augment(s, Augmentation::ColorSpatial, &mut rng);
        assert!(cs.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(cs.mask.labels.len(), 256);
    }

    #[test]
    fn scheme_table_shape() {
        let e = SegEval {
            pixel_accuracy: 0.5,
            mean_iou: 0.4,
            mean_dice: 0.3,
            mean_hausdorff: Some(2.0),
            iou: vec![],
            dice: vec![],
        };
        let rows = vec![
            SchemeResult {
                scheme: Scheme::RealOnly,
                seed: 0,
                eval: e.clone(),
            },
            SchemeResult {
                scheme: Scheme::RealOnly,
                seed: 1,
                eval: e,
            },
        ];
        let csv = schemes_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("real-only,2,0.500000"));
    }
}
