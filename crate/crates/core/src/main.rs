use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use vcdet::harness::{
    compare_strategies, evaluate_ap, gradcheck, train, write_curves, DetectorFile, ExperimentConfig, Variant,
};
use vcdet::synthbench::{gen_dataset, prototypes_for, Dataset};

#[derive(Parser)]
#[command(name = "vcdet", version, about = "Semi-supervised detection with virtual-category targets on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark utilities.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several variants over several seeds and rank them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Only the four strategies, without the reg* and cross-model variants.
        #[arg(long)]
        strategies_only: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate saved parameters on the test scenes of a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchAction {
    /// Generate the dataset described by the `[benchmark]` section of a config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl Serialize) -> vcdet::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> vcdet::Result<ExitCode> {
    match cli.command {
        Command::Bench {
            action: BenchAction::Gen { config, out },
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = gen_dataset(&cfg.benchmark)?;
            data.write_jsonl(&out)?;
            println!(
                "wrote {} train and {} test scenes to {}",
                data.train.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = Dataset::read_jsonl(&data)?;
            fs::create_dir_all(&out)?;
            let result = train(&cfg, &data)?;
            write_json(&out.join("run.json"), &result)?;
            write_curves(&out.join("curves.csv"), std::slice::from_ref(&result))?;
            DetectorFile {
                seed: cfg.seed,
                nms_thr: cfg.nms_thr,
                eval_iou: cfg.eval_iou,
                benchmark: cfg.benchmark.clone(),
                detector: result.teacher.clone(),
            }
            .save(&out.join("params.json"))?;
            write_json(
                &out.join("timing.json"),
                &serde_json::json!({ "wall_clock_secs": result.wall_clock_secs }),
            )?;
            println!(
                "{} seed {}: AP@{} = {:.3} ({:.1}s)",
                result.label, result.seed, cfg.eval_iou, result.final_ap, result.wall_clock_secs
            );
        }
        Command::Compare {
            config,
            data,
            seeds,
            out,
            strategies_only,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = Dataset::read_jsonl(&data)?;
            fs::create_dir_all(&out)?;
            let variants = if strategies_only {
                Variant::strategies()
            } else {
                Variant::full()
            };
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let table = compare_strategies(&cfg, &variants, &seeds, &data)?;
            table.write_curves(&out.join("curves.csv"))?;
            write_json(&out.join("summary.json"), &table.summary())?;
            write_json(&out.join("runs.json"), &table.runs)?;
            let text = table.render();
            fs::write(out.join("table.txt"), &text)?;
            print!("{text}");
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck(seed)?;
            print!("{report}");
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval { params, data } => {
            let file = DetectorFile::load(&params)?;
            let data = Dataset::read_jsonl(&data)?;
            let protos = prototypes_for(&file.benchmark)?;
            let ap = evaluate_ap(&file.detector, &protos, &file.benchmark, &data.test, file.nms_thr, file.eval_iou)?;
            println!("AP@{} = {ap:.3} on {} test scenes", file.eval_iou, data.test.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
