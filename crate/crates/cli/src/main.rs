use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conceptrec::config::RunConfig;
use conceptrec::pipeline::{self, Pipeline, StageStatus};
use conceptrec::student::Stage;
use conceptrec::synthetic::CurriculumConfig;
use conceptrec::Error;

#[derive(Parser)]
#[command(
    name = "conceptrec",
    version,
    about = "Train and query a concept recommender"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run_dir` from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Directory for cached LLM responses.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Rerun the stage even if its outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Kd,
    Pref,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic curriculum log, its prerequisite graph and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        learners: usize,
    },
    /// Parse the interaction log into the run directory.
    Ingest {
        /// Overrides `data.csv` from the config.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Embed every learner and concept.
    Encode,
    /// Collect teacher soft labels for sampled training contexts.
    Distill,
    /// Train the student ranker.
    TrainStudent {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Train the knowledge tracer.
    TrainDkt,
    /// Train the fine ranker (and its no-DKT ablation).
    TrainReranker,
    /// Score held-out targets and write the metric report.
    Evaluate,
    /// Print the top concepts for one learner as JSON.
    Recommend {
        #[arg(long)]
        learner: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Weighted joint fine-tuning of student and fine ranker.
    JointFinetune,
    /// Run every stage once per seed and report the mean.
    Experiment {
        /// Comma-separated seeds; defaults to `seeds` from the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(d) = &g.cache_dir {
        cfg.backend.cache_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_stage(name: &str, status: StageStatus) {
    match status {
        StageStatus::Ran => println!("{name}: done"),
        StageStatus::UpToDate => println!("{name}: up to date (use --force to rerun)"),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::Synth { out, learners } = &cli.command {
        let world = CurriculumConfig {
            learners: *learners,
            seed: cli.global.seed.unwrap_or(7),
            ..Default::default()
        };
        let cfg = pipeline::write_fixture(out, &world)?;
        let path = out.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let mut cfg = load_config(&cli.global)?;
    if let Command::Ingest { csv: Some(csv) } = &cli.command {
        cfg.data.csv = Some(csv.clone());
    }
    if let Command::Experiment { seeds } = &cli.command {
        let seeds = if seeds.is_empty() {
            cfg.seeds.clone()
        } else {
            seeds.clone()
        };
        let report = pipeline::run_experiment(&cfg, &seeds)?;
        print!("{}", report.summary());
        return Ok(());
    }
    let mut p = Pipeline::new(cfg)?.with_force(cli.global.force);
    match cli.command {
        Command::Synth { .. } | Command::Experiment { .. } => unreachable!("handled above"),
        Command::Ingest { .. } => report_stage("ingest", p.ingest()?),
        Command::Encode => report_stage("encode", p.encode()?),
        Command::Distill => report_stage("distill", p.distill()?),
        Command::TrainStudent { stage } => {
            let stage = match stage {
                StageArg::Kd => Stage::Kd,
                StageArg::Pref => Stage::Pref,
            };
            report_stage(
                &format!("train-student {}", stage.as_str()),
                p.train_student(stage)?,
            )
        }
        Command::TrainDkt => report_stage("train-dkt", p.train_dkt()?),
        Command::TrainReranker => report_stage("train-reranker", p.train_reranker()?),
        Command::Evaluate => {
            let report = p.evaluate()?;
            print!("{}", report.summary());
        }
        Command::Recommend { learner, top } => {
            let rec = p.recommend(&learner, top)?;
            println!(
                "{}",
                serde_json::to_string(&rec).expect("recommendation serialises")
            );
        }
        Command::JointFinetune => {
            for row in p.joint_finetune()? {
                println!("epoch {}: total {:.6}", row.epoch, row.total);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
