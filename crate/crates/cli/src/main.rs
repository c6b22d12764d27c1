use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pixcon_cli::compare::{parse_seeds, run_compare, write_compare};
use pixcon_cli::{run_export, run_train, run_verify, CliError, CliResult, ExperimentConfig, Suite};

#[derive(Parser)]
#[command(name = "pixcon", version, about = "Pixel-contrast domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes trace.jsonl, checkpoint.json and summary.json.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value applied after the config file (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run an oracle suite: bound, grads, stats or all.
    Verify {
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train several configs over several seeds and tabulate the results.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        /// Comma list (0,1,2) or inclusive range (0-4).
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Export student embeddings of the held-out target scenes as CSV.
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out, seed, overrides } => {
            let mut cfg = load(&config, &overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = out.unwrap_or_else(|| {
                if cfg.out_dir.is_empty() {
                    PathBuf::from("runs").join(stem(&config))
                } else {
                    PathBuf::from(&cfg.out_dir)
                }
            });
            let s = run_train(&cfg, &out)?;
            println!(
                "target accuracy {:.4}  mIoU {:.4}  PDD {:.4}  -> {}",
                s.final_eval.accuracy,
                s.final_eval.miou,
                s.final_eval.pdd_mean,
                out.display()
            );
        }
        Command::Verify { suite, out, seed } => {
            let suite: Suite = suite.parse()?;
            let report = run_verify(suite, seed)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|source| CliError::Write { path: dir.clone(), source })?;
                let path = dir.join(format!("verify_{}.json", report.suite));
                std::fs::write(&path, &json).map_err(|source| CliError::Write { path, source })?;
            }
            print!("{json}");
            for p in &report.properties {
                eprintln!("{} {:<36} worst {:.3e} limit {:.3e}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.worst, p.limit);
            }
            if !report.passed {
                return Err(CliError::PropertyFailed(format!("verify {}", report.suite)));
            }
        }
        Command::Compare { configs, seeds, out, overrides, threads } => {
            let seeds = parse_seeds(&seeds)?;
            let loaded = configs
                .iter()
                .map(|p| Ok((stem(p), load(p, &overrides)?)))
                .collect::<CliResult<Vec<_>>>()?;
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
            let report = run_compare(&loaded, &seeds, threads)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join("compare"));
            write_compare(&report, &out)?;
            for c in &report.configs {
                println!("{:<28} accuracy {:.4}  mIoU {:.4}  PDD {:.4}", c.label, c.mean.accuracy, c.mean.miou, c.mean.pdd_mean);
            }
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("embeddings.csv"));
            let rows = run_export(&checkpoint, &out)?;
            println!("{rows} rows -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
