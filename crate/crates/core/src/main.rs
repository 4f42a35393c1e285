//! Command-line driver: `run` a scenario, `ablate` the component grid and
//! hyperparameter sweeps, `gradcheck` every loss, `inspect` the labeling
//! maps for a serialized scene.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ciss_lab::config::{parse_config_file, LabConfig};
use ciss_lab::error::{Error, Result};
use ciss_lab::gradcheck;
use ciss_lab::label::LabelMap;
use ciss_lab::model::load_checkpoint;
use ciss_lab::numerics::{load_tensor, save_tensor};
use ciss_lab::runner::{
    self, inspect_scene, run_ablation_grid, run_scenario, write_ablation_csv,
};
use ciss_lab::scenes::Setting;

#[derive(Parser)]
#[command(name = "ciss-lab", version, about = "Class-incremental segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full scenario and write record.csv, summary.txt, checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the scenario protocol (disjoint | overlapped).
        #[arg(long)]
        setting: Option<String>,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also serialize the first N training scenes of every step
        /// (image, full labels, step labels) for later inspection.
        #[arg(long, default_value_t = 0)]
        dump_scenes: usize,
    },
    /// Run the component grid plus hyperparameter sweeps over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds, counting up from the config seed.
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Only the 8-row component grid, no hyperparameter sweeps.
        #[arg(long)]
        skip_sweeps: bool,
    },
    /// Finite-difference validation of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Dump pseudo-label, object-identifier, and reliability maps for a
    /// serialized scene image.
    Inspect {
        /// Image tensor ([H, W, channels] container file).
        #[arg(long)]
        scene: PathBuf,
        /// Optional step-label tensor; defaults to all-background.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Old-model checkpoint directory; a base model is trained from the
        /// config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config for tau and (when no checkpoint is given) base training.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the dumped maps (default: alongside the scene).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            setting,
            seed,
            out,
            dump_scenes,
        } => cmd_run(&config, setting.as_deref(), seed, &out, dump_scenes),
        Command::Ablate {
            config,
            seeds,
            out,
            skip_sweeps,
        } => cmd_ablate(&config, seeds, &out, skip_sweeps),
        Command::Gradcheck { trials, seed } => cmd_gradcheck(trials, seed),
        Command::Inspect {
            scene,
            labels,
            checkpoint,
            config,
            out,
        } => cmd_inspect(
            &scene,
            labels.as_deref(),
            checkpoint.as_deref(),
            config.as_deref(),
            out.as_deref(),
        ),
    }
}

fn load_config(path: Option<&Path>) -> Result<LabConfig> {
    match path {
        Some(p) => parse_config_file(p),
        None => Ok(LabConfig::default()),
    }
}

fn cmd_run(
    config: &Path,
    setting: Option<&str>,
    seed: Option<u64>,
    out: &Path,
    dump_scenes: usize,
) -> Result<()> {
    let mut cfg = parse_config_file(config)?;
    if let Some(s) = setting {
        cfg.scenario.setting = Setting::parse(s)?;
    }
    if let Some(s) = seed {
        cfg.scenario.seed = s;
        cfg.train.seed = s;
    }
    std::fs::create_dir_all(out)?;
    if dump_scenes > 0 {
        let dir = out.join("scenes");
        std::fs::create_dir_all(&dir)?;
        for step in 1..=cfg.scenario.num_steps() {
            for i in 0..dump_scenes.min(cfg.scenario.scenes_per_step) {
                let scene = runner::training_scene(&cfg, step, i)?;
                let stem = format!("step_{step}_scene_{i}");
                save_tensor(&dir.join(format!("{stem}_image.clt")), &scene.image)?;
                save_tensor(
                    &dir.join(format!("{stem}_full_labels.clt")),
                    &scene.full_labels.to_tensor(),
                )?;
                save_tensor(
                    &dir.join(format!("{stem}_step_labels.clt")),
                    &scene.step_labels.to_tensor(),
                )?;
            }
        }
    }
    let record = run_scenario(&cfg, Some(out))?;
    let last = record.final_step();
    println!(
        "run {} ({}, seed {}): {} steps in {:.1}s",
        record.config_hash,
        record.setting.as_str(),
        record.seed,
        record.steps.len(),
        record.wall_clock_secs
    );
    println!(
        "final mIoU: initial {} | incremented {} | all {}",
        opt_str(last.iou.miou_initial),
        opt_str(last.iou.miou_incremented),
        opt_str(last.iou.miou_all)
    );
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn opt_str(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

fn cmd_ablate(config: &Path, seeds: u64, out: &Path, skip_sweeps: bool) -> Result<()> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be >= 1".into()));
    }
    let cfg = parse_config_file(config)?;
    let base_seed = cfg.train.seed;
    let seed_list: Vec<u64> = (0..seeds).map(|i| base_seed + i).collect();
    let runs = run_ablation_grid(&cfg, &seed_list, !skip_sweeps)?;
    std::fs::create_dir_all(out)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("ablation.csv"))?);
    write_ablation_csv(&mut csv, &runs)?;
    use std::io::Write as _;
    csv.flush()?;
    println!("{} runs -> {}", runs.len(), out.join("ablation.csv").display());
    for run in &runs {
        let last = run.record.final_step();
        println!(
            "{:<22} seed {}: all {}",
            run.label,
            run.seed,
            opt_str(last.iou.miou_all)
        );
    }
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> Result<()> {
    let report = gradcheck::run(trials, seed)?;
    println!("finite-difference check, {} random configurations per loss:", report.trials);
    for (name, err) in report.rows() {
        let status = if err < gradcheck::DEFAULT_TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        println!("  {name:<6} max relative error {err:.3e}  [{status}]");
    }
    if report.max_error() < gradcheck::DEFAULT_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_error(),
            gradcheck::DEFAULT_TOLERANCE
        )))
    }
}

fn cmd_inspect(
    scene: &Path,
    labels: Option<&Path>,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let image = load_tensor(scene)?;
    let (h, w) = match image.shape() {
        [h, w, _] => (*h, *w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "scene tensor must be [H, W, channels], got {s:?}"
            )))
        }
    };
    let cfg = load_config(config)?;
    let step_labels = match labels {
        Some(p) => LabelMap::from_tensor(&load_tensor(p)?)?,
        None => LabelMap::filled(h, w, 0),
    };
    let old_model = match checkpoint {
        Some(dir) => load_checkpoint(dir)?.0,
        None => {
            eprintln!("no checkpoint given; training a base model from the config");
            runner::train_base_step(&cfg)?
        }
    };
    let artifacts = inspect_scene(&old_model, &image, &step_labels, cfg.train.tau)?;
    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => scene.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    std::fs::create_dir_all(&out_dir)?;
    save_tensor(&out_dir.join("old_prediction.clt"), &artifacts.s_old)?;
    save_tensor(&out_dir.join("pseudo_label.clt"), &artifacts.pseudo.to_tensor())?;
    save_tensor(
        &out_dir.join("object_identifier.clt"),
        &artifacts.object_id.to_tensor(),
    )?;
    save_tensor(
        &out_dir.join("selective_pseudo_label.clt"),
        &artifacts.selective.to_tensor(),
    )?;
    save_tensor(&out_dir.join("reliability.clt"), &artifacts.reliability)?;
    println!("object-identifier fraction: {:.4}", artifacts.object_fraction);
    println!("ignored-pixel fraction:     {:.4}", artifacts.ignored_fraction);
    println!("maps written to {}", out_dir.display());
    Ok(())
}
