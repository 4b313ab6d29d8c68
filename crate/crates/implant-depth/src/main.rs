use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use implant_depth::checkpoint::Checkpoint;
use implant_depth::config::ExperimentConfig;
use implant_depth::core::schedule::Stage;
use implant_depth::volume_io::read_dataset;
use implant_depth::{workflow, HarnessError, Result};

/// Implant depth prediction on synthetic CBCT phantoms.
#[derive(Parser)]
#[command(name = "implant-depth", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; missing keys take the desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (data, split, both stages).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Checkpoint directory to continue training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write `data.count` phantoms as patient directories.
    GenerateData,
    /// Train the region detector on the training split.
    TrainIrd(DataArg),
    /// Train the depth network on ground-truth crops of the training split.
    TrainIdpnet(DataArg),
    /// Score the pipeline on the test split (or every record with --all).
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        all: bool,
    },
    /// Predict one patient directory and write overlays.
    Predict {
        #[arg(long)]
        patient: PathBuf,
        #[command(flatten)]
        models: Models,
    },
    /// Texture variation against slice sampling interval.
    AnalyzeTexture(DataArg),
    /// Print the fully resolved config.
    ShowConfig,
}

#[derive(Args)]
struct DataArg {
    /// Directory of patient directories; phantoms are generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Models {
    /// Detector checkpoint directory.
    #[arg(long, required_unless_present = "oracle_position")]
    ird: Option<PathBuf>,
    /// Depth-network checkpoint directory.
    #[arg(long)]
    idpnet: PathBuf,
    /// Crop at the annotated position instead of running the detector.
    #[arg(long)]
    oracle_position: bool,
}

impl Models {
    fn load(&self) -> Result<(Option<Checkpoint>, Checkpoint)> {
        let ird = if self.oracle_position { None } else { self.ird.as_deref().map(Checkpoint::load).transpose()? };
        Ok((ird, Checkpoint::load(&self.idpnet)?))
    }
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = config(common)?;
    let out = common.out.as_path();
    if common.resume.is_some() && !matches!(cli.command, Command::TrainIrd(_) | Command::TrainIdpnet(_)) {
        return Err(HarnessError::Config("--resume only applies to train-ird and train-idpnet".into()));
    }
    match &cli.command {
        Command::GenerateData => {
            let records = workflow::generate_records(&cfg.data)?;
            workflow::write_records(out, &records)?;
            cfg.save(&out.join(workflow::CONFIG_FILE))?;
            println!("wrote {} patients to {}", records.len(), out.display());
        }
        Command::TrainIrd(d) | Command::TrainIdpnet(d) => {
            let stage = if matches!(cli.command, Command::TrainIrd(_)) { Stage::Ird } else { Stage::Idpnet };
            let records = workflow::load_records(d.data.as_deref(), &cfg.data)?;
            let ckpt = workflow::train(&cfg, stage, records, out, common.resume.as_deref())?;
            let last = ckpt.history.last().map_or(f64::NAN, |h| h.mean_loss);
            println!("trained {:?} for {} epochs, final mean loss {last:.5}; checkpoint in {}", stage, ckpt.epoch, out.join("final").display());
        }
        Command::Eval { data, models, all } => {
            let (ird, idp) = models.load()?;
            let records = workflow::load_records(data.data.as_deref(), &cfg.data)?;
            let records = if *all { records } else { workflow::split_records(records, &cfg.data)?.1 };
            let summary = workflow::eval(&cfg, ird.as_ref(), &idp, &records, out)?;
            print!("{}", summary.render());
        }
        Command::Predict { patient, models } => {
            let (ird, idp) = models.load()?;
            let p = workflow::predict(ird.as_ref(), &idp, patient, out)?;
            println!(
                "position ({:.2}, {:.2}), crop origin {:?}, interval {:.3}..{:.3}",
                p.position.0, p.position.1, p.crop_origin, p.interval.start, p.interval.end
            );
        }
        Command::AnalyzeTexture(d) => {
            let records = match &d.data {
                Some(dir) => read_dataset(dir)?,
                None => {
                    let mut data = cfg.data.clone();
                    data.count = cfg.texture.phantoms;
                    workflow::generate_records(&data)?
                }
            };
            for (k, v) in workflow::analyze_texture(&cfg, &records, out)? {
                println!("k={k:<3} variation={v:.5}");
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
