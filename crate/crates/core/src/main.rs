use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use derain_sr::config::RunConfig;
use derain_sr::error::{Error, Result};
use derain_sr::evaluation;
use derain_sr::plot::{LineChart, Series};
use derain_sr::reward_store::{rewards_dir, sample_file_name, RewardStore, INDEX_FILE};
use derain_sr::scorer::{IqaScorer, ReferenceScorer};
use derain_sr::trainer;

#[derive(Parser)]
#[command(name = "derain-sr", version, about = "Unpaired deraining with recycled rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a `state.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's derainer on a paired directory (`rainy/`, `clean/`).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-image CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect a reward snapshot.
    Rewards {
        #[command(subcommand)]
        action: RewardsAction,
    },
    /// Copy a run's CSV histories and draw its training curves.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RewardsAction {
    /// Re-score every stored reward and report disagreements.
    Verify {
        /// Directory that holds `rewards/`.
        #[arg(long)]
        store: PathBuf,
        /// Configuration naming the scorer; the reference scorer otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write every reward as an 8-bit PNG plus `scores.csv`.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn scorer_for(config: Option<&Path>) -> Result<Arc<dyn IqaScorer>> {
    match config {
        Some(p) => trainer::build_scorer(&RunConfig::load(p)?),
        None => Ok(Arc::new(ReferenceScorer::default())),
    }
}

/// Reads `epoch,<stage>,a,b` rows into `(epoch, a)` and `(epoch, b)` series.
fn read_curve(path: &Path) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |i: usize| row.get(i).and_then(|s| s.parse::<f64>().ok());
        if let Some(epoch) = num(0) {
            if let Some(v) = num(2) {
                a.push((epoch, v));
            }
            if let Some(v) = num(3) {
                b.push((epoch, v));
            }
        }
    }
    Ok((a, b))
}

fn chart(label: &str, points: Vec<(f64, f64)>) -> LineChart {
    LineChart {
        series: vec![Series {
            label: label.to_string(),
            points,
        }],
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let report = trainer::run(&cfg, resume.as_deref())?;
            println!(
                "finished after {} epochs ({:?}); validation psnr {:.3} dB, ssim {:.4}",
                report.epochs, report.stage_reached, report.final_psnr, report.final_ssim
            );
        }
        Command::Eval { ckpt, data, out } => {
            let (pairs, skipped) = evaluation::ingest_paired(&data)?;
            let mut report = evaluation::evaluate_checkpoint(&ckpt, &pairs)?;
            report.skipped += skipped;
            let csv = evaluation::eval_csv(&report);
            match out {
                Some(path) => write(&path, csv)?,
                None => print!("{csv}"),
            }
            eprintln!(
                "{} images ({} skipped): psnr {:.3} dB, ssim {:.4}",
                report.rows.len(),
                report.skipped,
                report.mean_psnr,
                report.mean_ssim
            );
        }
        Command::Rewards { action } => match action {
            RewardsAction::Verify { store, config } => {
                let rewards = RewardStore::restore(&store, scorer_for(config.as_deref())?)?;
                let bad = rewards.verify()?;
                for (id, stored, fresh) in &bad {
                    println!("{id}: stored {stored}, rescored {fresh}");
                }
                println!("{} entries, {} disagree", rewards.len(), bad.len());
                if !bad.is_empty() {
                    return Err(Error::CorruptSnapshot {
                        file: rewards_dir(&store).join(INDEX_FILE),
                        reason: format!("{} scores disagree with the scorer", bad.len()),
                    });
                }
            }
            RewardsAction::Export { store, out } => {
                let store = RewardStore::restore(&store, Arc::new(ReferenceScorer::default()))?;
                let mut csv = String::from("sample_id,score,step\n");
                for e in store.entries() {
                    let name = sample_file_name(&e.sample_id);
                    write(&out.join(&name), e.image.encode_png8()?)?;
                    csv.push_str(&format!("{},{},{}\n", e.sample_id, e.score, e.updated_at));
                }
                write(&out.join("scores.csv"), csv)?;
                println!("exported {} rewards to {}", store.len(), out.display());
            }
        },
        Command::Report { run, out } => {
            let (psnr, ssim) = read_curve(&run.join(trainer::VALIDATION_CSV))?;
            let (reward, _) = read_curve(&run.join(trainer::REWARD_SCORES_CSV))?;
            for name in [trainer::VALIDATION_CSV, trainer::REWARD_SCORES_CSV] {
                let src = run.join(name);
                let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
                write(&out.join(name), bytes)?;
            }
            chart("psnr", psnr).save(&out.join("validation_psnr.png"))?;
            chart("ssim", ssim).save(&out.join("validation_ssim.png"))?;
            chart("reward", reward).save(&out.join("mean_reward.png"))?;
            println!("wrote report to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
