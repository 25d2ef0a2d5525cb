//! Latent SDEdit translation of simulated images with a guided teacher and
//! with its consistency student, trained here at a small scale.

use std::time::Instant;

use sim2real::codec::{train_autoencoder, CodecConfig};
use sim2real::consistency::{distill, DistillConfig};
use sim2real::denoiser::{train_teacher, Label, TeacherConfig};
use sim2real::downstream::{semantic_consistency_eval, train_segmenter, SegmenterConfig};
use sim2real::metrics::{frechet_gaussian, EmbeddingSpec};
use sim2real::pipeline::config::RunConfig;
use sim2real::sampler::{sdedit_translate, Conditioning, Translator, DEFAULT_STRENGTH};
use sim2real::tensor::Tensor;
use sim2real::toy::{
    gen_real, gen_simulated, images_tensor, scene_labels, IMAGE_DIM, NUM_SCENE_LABELS,
};

fn main() -> sim2real::Result<()> {
    let cfg = RunConfig::default();
    let schedule = cfg.schedule()?;
    let sim = gen_simulated(300, 1)?;
    let real = gen_real(300, 2)?;
    let mut both = sim.clone();
    both.extend(real.iter().cloned());
    let codec_cfg = CodecConfig {
        max_epochs: 60,
        target: 0.05,
        ..cfg.codec_config()
    };
    let (codec, _) = train_autoencoder(&images_tensor(&both)?, &codec_cfg, 0)?;
    let latents = codec.encode(&images_tensor(&real)?)?;
    let labels = scene_labels(&real);
    let tcfg = TeacherConfig {
        steps: 1500,
        lr: 1e-3,
        ..cfg.teacher_config()
    };
    let (teacher, _) = train_teacher(&latents, &labels, NUM_SCENE_LABELS, &schedule, &tcfg, 0)?;
    let dcfg = DistillConfig {
        iterations: 1500,
        ..cfg.distill_config()
    };
    let (cm, _) = distill(&teacher, &schedule, &latents, &labels, &dcfg)?;
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
    let masks: Vec<_> = test.iter().map(|s| s.mask.clone()).collect();
    let cond = Conditioning {
        labels: scene_labels(&test).into_iter().map(Label::Class).collect(),
        omega: cfg.omega,
        hint: None,
    };
    let embed = EmbeddingSpec::for_images(IMAGE_DIM);
    let reference = embed.embed(&images_tensor(&gen_real(60, 12)?)?.as_matrix())?;
    let report = |name: &str, images: &Tensor, secs: f64| -> sim2real::Result<()> {
        let rows = images.as_matrix();
        let per_image: Vec<Tensor> = (0..rows.rows())
            .map(|r| Tensor::new(test[0].image.shape().to_vec(), rows.row(r).to_vec()))
            .collect::<sim2real::Result<_>>()?;
        let sc = semantic_consistency_eval(&seg, &per_image, &masks)?;
        println!(
            "{name:<18} frechet {:.3}  mIoU {:.3}  {:.2} ms/image",
            frechet_gaussian(&embed.embed(&rows)?, &reference)?,
            sc.mean_iou,
            1e3 * secs / test.len() as f64
        );
        Ok(())
    };
    report("untranslated", &inputs, 0.0)?;
    let runs = [
        ("teacher 50 steps", Translator::Teacher(&teacher), 50),
        ("consistency 1 step", Translator::Consistency(&cm), 1),
        ("consistency 2 steps", Translator::Consistency(&cm), 2),
    ];
    for (name, model, steps) in runs {
        let started = Instant::now();
        let out = sdedit_translate(
            model,
            &inputs,
            DEFAULT_STRENGTH,
            &cond,
            steps,
            &codec,
            &schedule,
            5,
        )?;
        report(name, &out, started.elapsed().as_secs_f64())?;
    }
    Ok(())
}
