use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sim2real::pipeline::commands::{
    self, output_root, parse_metric_tags, CliError, CliResult, EvaluateArgs, MakeDataArgs, Stage,
    TrainArgs, TranslateArgs, RUN_LOG,
};
use sim2real::pipeline::config::RunConfig;
use sim2real::toy::Domain;

/// Simulated-to-real translation with latent consistency models.
#[derive(Parser)]
#[command(name = "sim2real", version)]
struct Cli {
    /// key = value run configuration; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run log; defaults to runs.log under the output root.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset.
    MakeData {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one stage: ae, teacher, distill, segmenter or adapter.
    Train {
        #[arg(long)]
        stage: String,
        /// Dataset directory; repeat to combine several.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Base model for the adapter stage.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        control: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate a dataset with a teacher or consistency model.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        omega: Option<f64>,
        /// Optimal-transport color pre-map toward --reference.
        #[arg(long)]
        ot: bool,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        control: Option<String>,
        #[arg(long)]
        control_scale: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score generated data against real data and write CSV.
    Evaluate(EvaluateCmd),
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value = "dc,mmd,fd,seg")]
    metrics: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    /// Also run the downstream segmentation schemes.
    #[arg(long)]
    schemes: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn set(cfg: &mut RunConfig, key: &str, value: Option<String>) -> CliResult<()> {
    if let Some(v) = value {
        cfg.set(key, &v)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let root = output_root();
    let log = cli.log.unwrap_or_else(|| root.join(RUN_LOG));
    match cli.command {
        Command::MakeData {
            domain,
            n,
            seed,
            out,
            force,
        } => {
            let domain: Domain = domain
                .parse()
                .map_err(|e: sim2real::Error| CliError::Usage(e.to_string()))?;
            let out = out.unwrap_or_else(|| root.join("data").join(domain.to_string()));
            commands::make_data(&MakeDataArgs {
                domain,
                n,
                seed,
                out: out.clone(),
                force,
            })?;
            println!("wrote {n} {domain} samples to {}", out.display());
        }
        Command::Train {
            stage,
            data,
            out,
            codec,
            teacher,
            model,
            control,
            seed,
        } => {
            let stage: Stage = stage.parse()?;
            set(&mut cfg, "control", control)?;
            set(&mut cfg, "seed", seed.map(|s| s.to_string()))?;
            let out = out.unwrap_or_else(|| root.join("checkpoints").join(format!("{stage}.slcd")));
            let s = commands::train(&TrainArgs {
                stage,
                data,
                out: out.clone(),
                codec,
                teacher,
                model,
                config: cfg,
                log,
            })?;
            println!(
                "stage {stage}: final loss {:.6e}, {:.1} s, wrote {} ({})",
                s.final_loss,
                s.wall_seconds,
                out.display(),
                &s.digest[..12]
            );
        }
        Command::Translate {
            model,
            input,
            steps,
            strength,
            omega,
            ot,
            reference,
            control,
            control_scale,
            out,
            force,
            seed,
        } => {
            set(&mut cfg, "strength", strength.map(|v| v.to_string()))?;
            set(&mut cfg, "omega", omega.map(|v| v.to_string()))?;
            set(&mut cfg, "control", control)?;
            set(
                &mut cfg,
                "control_scale",
                control_scale.map(|v| v.to_string()),
            )?;
            set(&mut cfg, "seed", seed.map(|s| s.to_string()))?;
            if ot {
                cfg.ot = true;
            }
            let out = out.unwrap_or_else(|| root.join("translated"));
            let s = commands::translate(&TranslateArgs {
                model,
                input,
                steps,
                reference,
                out: out.clone(),
                force,
                config: cfg,
                log,
            })?;
            println!(
                "translated {} images with {} steps into {} (mean {:.4} s per image)",
                s.per_image_seconds.len(),
                s.steps,
                out.display(),
                s.mean_seconds()
            );
        }
        Command::Evaluate(e) => {
            set(&mut cfg, "seed", e.seed.map(|s| s.to_string()))?;
            let metrics = parse_metric_tags(&e.metrics)?;
            let out = e.out.unwrap_or_else(|| root.join("metrics.csv"));
            let records = commands::evaluate(&EvaluateArgs {
                real: e.real,
                gen: e.gen,
                metrics,
                out: out.clone(),
                segmenter: e.segmenter,
                scheme_seeds: if e.schemes { e.seeds } else { Vec::new() },
                config: cfg,
                log,
            })?;
            for r in &records {
                let v = r
                    .value
                    .map_or("undefined".to_string(), |v| format!("{v:.6}"));
                println!("{:<24} {:<14} {v}", r.metric, r.model);
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
