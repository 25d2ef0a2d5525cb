//! The command layer behind the `sim2real` binary, run end to end on a
//! reduced configuration: data, all training stages, translation and
//! evaluation, with every artifact written under one directory.
//!
//!     cargo run --release --example cli_pipeline -- /tmp/s2r-demo

use std::fs;
use std::path::PathBuf;

use sim2real::pipeline::commands::{
    evaluate, make_data, train, translate, EvaluateArgs, MakeDataArgs, MetricTag, Stage, TrainArgs,
    TranslateArgs, RUN_LOG,
};
use sim2real::pipeline::config::RunConfig;
use sim2real::toy::Domain;

const CONFIG: &str = "
# reduced settings for a quick demonstration
ae_epochs = 60
ae_target = 0.05
teacher_steps = 800
teacher_lr = 0.001
distill_iterations = 600
seg_steps = 400
steps = 2
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("s2r-demo"));
    let config = RunConfig::parse_text(CONFIG)?;
    let log = root.join(RUN_LOG);
    let path = |rel: &str| root.join(rel);
    fs::create_dir_all(&root)?;
    fs::write(path("config.txt"), config.to_text())?;

    for (domain, n, seed, dir) in [
        (Domain::Simulated, 300, 1, "data/sim"),
        (Domain::Real, 300, 2, "data/real"),
        (Domain::Simulated, 60, 11, "data/sim_test"),
        (Domain::Real, 60, 12, "data/real_test"),
    ] {
        make_data(&MakeDataArgs {
            domain,
            n,
            seed,
            out: path(dir),
            force: true,
        })?;
    }
    let stage =
        |stage: Stage, data: &[&str], out: &str, codec: Option<&str>, teacher: Option<&str>| {
            train(&TrainArgs {
                stage,
                data: data.iter().map(|d| path(d)).collect(),
                out: path(out),
                codec: codec.map(path),
                teacher: teacher.map(path),
                model: None,
                config: config.clone(),
                log: log.clone(),
            })
        };
    for (s, data, out, codec, teacher) in [
        (
            Stage::Ae,
            &["data/sim", "data/real"][..],
            "ckpt/ae.slcd",
            None,
            None,
        ),
        (
            Stage::Teacher,
            &["data/real"][..],
            "ckpt/teacher.slcd",
            Some("ckpt/ae.slcd"),
            None,
        ),
        (
            Stage::Distill,
            &["data/real"][..],
            "ckpt/cm.slcd",
            None,
            Some("ckpt/teacher.slcd"),
        ),
        (
            Stage::Segmenter,
            &["data/real"][..],
            "ckpt/seg.slcd",
            None,
            None,
        ),
    ] {
        let summary = stage(s, data, out, codec, teacher)?;
        println!(
            "{s:<9} loss {:.4e} in {:.1} s -> {out}",
            summary.final_loss, summary.wall_seconds
        );
    }

    let t = translate(&TranslateArgs {
        model: path("ckpt/cm.slcd"),
        input: path("data/sim_test"),
        steps: None,
        reference: None,
        out: path("translated"),
        force: true,
        config: config.clone(),
        log: log.clone(),
    })?;
    println!(
        "translated {} images, {:.2} ms each",
        t.per_image_seconds.len(),
        1e3 * t.mean_seconds()
    );

    let records = evaluate(&EvaluateArgs {
        real: path("data/real_test"),
        gen: path("translated"),
        metrics: vec![MetricTag::Dc, MetricTag::Mmd, MetricTag::Fd, MetricTag::Seg],
        out: path("metrics.csv"),
        segmenter: Some(path("ckpt/seg.slcd")),
        scheme_seeds: Vec::new(),
        config,
        log: log.clone(),
    })?;
    for r in records {
        println!(
            "{:<16} {}",
            r.metric,
            r.value.map_or("undefined".into(), |v| format!("{v:.4}"))
        );
    }
    print!("{}", fs::read_to_string(&log)?);
    Ok(())
}
