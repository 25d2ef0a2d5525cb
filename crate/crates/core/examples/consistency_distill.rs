//! Distils a 2-D teacher into a consistency model and compares few-step
//! samples with the teacher's 50-step DDIM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sim2real::consistency::{distill, trajectory_discrepancy, ConsistencyModel, DistillConfig};
use sim2real::denoiser::{train_teacher, TeacherConfig};
use sim2real::metrics::{mmd2, MmdEstimator};
use sim2real::pipeline::config::RunConfig;
use sim2real::sampler::{sample_ddim, Conditioning, Guided};
use sim2real::tensor::Tensor;
use sim2real::toy::two_mode_points;

fn both(mut draw: impl FnMut(usize) -> sim2real::Result<Tensor>) -> sim2real::Result<Tensor> {
    let mut data = draw(0)?.data().to_vec();
    data.extend_from_slice(draw(1)?.data());
    Tensor::new(vec![data.len() / 2, 2], data)
}

fn main() -> sim2real::Result<()> {
    let schedule = RunConfig::default().schedule()?;
    let (points, labels) = two_mode_points(2000, 1);
    let tcfg = TeacherConfig {
        hidden: vec![128, 128, 128],
        steps: 3000,
        lr: 2e-3,
        ..TeacherConfig::default()
    };
    let (teacher, _) = train_teacher(&points, &labels, 2, &schedule, &tcfg, 1)?;
    let dcfg = DistillConfig {
        iterations: 3000,
        lr: 2e-3,
        ..DistillConfig::default()
    };
    let (cm, report) = distill(&teacher, &schedule, &points, &labels, &dcfg)?;
    println!(
        "distillation loss {:.5} -> {:.5}",
        report.initial(50),
        report.last(50)
    );

    let omega = 4.5;
    let starts = Tensor::randn(&[20, 2], &mut ChaCha8Rng::seed_from_u64(3));
    let untrained = ConsistencyModel::from_teacher(&teacher, &schedule, cm.sigma_data())?;
    let cond = Conditioning::new(0, omega);
    println!(
        "trajectory discrepancy: {:.4} before, {:.4} after",
        trajectory_discrepancy(&untrained, &teacher, &starts, &cond, 50)?,
        trajectory_discrepancy(&cm, &teacher, &starts, &cond, 50)?
    );

    let (held, _) = two_mode_points(500, 99);
    let ddim = both(|l| {
        let cond = Conditioning::new(l, omega);
        sample_ddim(
            &Guided {
                net: &teacher,
                cond: &cond,
            },
            250,
            2,
            50,
            &schedule,
            10 + l as u64,
        )
    })?;
    println!(
        "teacher 50 steps: mmd2 {:.4}",
        mmd2(&ddim, &held, None, MmdEstimator::Biased)?
    );
    for steps in [1, 2, 4] {
        let s = both(|l| {
            cm.sample(
                250,
                steps,
                &Conditioning::new(l, omega),
                20 + l as u64,
                None,
            )
        })?;
        println!(
            "consistency {steps} step(s): mmd2 {:.4}",
            mmd2(&s, &held, None, MmdEstimator::Biased)?
        );
    }
    Ok(())
}
