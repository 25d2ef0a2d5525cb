//! Spatial hints from label masks steer a frozen teacher through a small
//! adapter. A fresh adapter is an exact no-op, a trained one pulls the
//! translation toward the hinted layout.

use sim2real::codec::{train_autoencoder, CodecConfig};
use sim2real::denoiser::{train_teacher, Label, TeacherConfig};
use sim2real::downstream::{semantic_consistency_eval, train_segmenter, SegmenterConfig};
use sim2real::hint::{hint_batch, train_adapter, AdapterConfig, AdapterTarget, ControlKind};
use sim2real::pipeline::config::RunConfig;
use sim2real::sampler::{sdedit_translate, Conditioning, Translator};
use sim2real::tensor::Tensor;
use sim2real::toy::{gen_real, gen_simulated, images_tensor, scene_labels, NUM_SCENE_LABELS};

fn main() -> sim2real::Result<()> {
    let cfg = RunConfig::default();
    let schedule = cfg.schedule()?;
    let real = gen_real(300, 2)?;
    let codec_cfg = CodecConfig {
        max_epochs: 60,
        target: 0.05,
        ..cfg.codec_config()
    };
    let (codec, _) = train_autoencoder(&images_tensor(&real)?, &codec_cfg, 0)?;
    let latents = codec.encode(&images_tensor(&real)?)?;
    let labels = scene_labels(&real);
    let tcfg = TeacherConfig {
        steps: 1500,
        lr: 1e-3,
        ..cfg.teacher_config()
    };
    let (teacher, _) = train_teacher(&latents, &labels, NUM_SCENE_LABELS, &schedule, &tcfg, 0)?;

    let kind = ControlKind::Edge;
    let masks: Vec<_> = real.iter().map(|s| &s.mask).collect();
    let hints = hint_batch(&masks, kind)?;
    let acfg = AdapterConfig {
        steps: 800,
        ..AdapterConfig::default()
    };
    let target = AdapterTarget::Teacher {
        net: &teacher,
        schedule: &schedule,
    };
    let (tuned, report) = train_adapter(target, &latents, &labels, &hints, &acfg, 1)?;
    println!(
        "adapter loss {:.4} -> {:.4}, trunk untouched: {}",
        report.initial(50),
        report.last(50),
        tuned.trunk() == teacher.trunk()
    );

    let (seg, _) = train_segmenter(
        &real,
        &SegmenterConfig {
            steps: 600,
            ..cfg.segmenter_config()
        },
        0,
        None,
    )?;
    let test = gen_simulated(60, 11)?;
    let inputs = images_tensor(&test)?;
    let test_masks: Vec<_> = test.iter().map(|s| s.mask.clone()).collect();
    let refs: Vec<_> = test_masks.iter().collect();
    let cond = Conditioning {
        labels: scene_labels(&test).into_iter().map(Label::Class).collect(),
        omega: cfg.omega,
        hint: None,
    };
    let hinted = cond.clone().with_hint(hint_batch(&refs, kind)?);
    let run = |net, cond: &Conditioning| -> sim2real::Result<f64> {
        let out = sdedit_translate(
            Translator::Teacher(net),
            &inputs,
            0.7,
            cond,
            25,
            &codec,
            &schedule,
            3,
        )?
        .as_matrix();
        let images: Vec<Tensor> = (0..out.rows())
            .map(|r| Tensor::new(test[0].image.shape().to_vec(), out.row(r).to_vec()))
            .collect::<sim2real::Result<_>>()?;
        Ok(semantic_consistency_eval(&seg, &images, &test_masks)?.mean_iou)
    };
    let mut fresh = teacher.clone();
    fresh.attach_adapter(
        hints.cols(),
        acfg.hidden,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    );
    println!("no hint                 mIoU {:.3}", run(&teacher, &cond)?);
    println!("fresh adapter with hint mIoU {:.3}", run(&fresh, &hinted)?);
    println!("trained adapter         mIoU {:.3}", run(&tuned, &hinted)?);
    Ok(())
}
