use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedduap::harness::{compare_report, load_config, run_experiment, Mode, RunOptions};
use fedduap::nnkernel::Model;
use fedduap::pruner::{flops_count, prune_list};
use fedduap::Error;

#[derive(Parser)]
#[command(name = "fedduap", version, about = "Federated learning simulator with server-side updates and adaptive pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0 = all cores); does not affect results.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Tabulate several run summaries (summary.json files or run dirs).
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the structure and cost of a serialized model.
    InspectModel { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            out,
            workers,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m.parse::<Mode>()?;
            }
            cfg.validate()?;
            let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
                PathBuf::from(format!("runs/{}-seed{}", cfg.mode.name(), cfg.seed))
            });
            let result = run_experiment(
                &cfg,
                &RunOptions {
                    workers,
                    out_dir: Some(out.clone()),
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
            eprintln!("metrics written to {}", out.display());
            Ok(())
        }
        Command::Compare { summaries, csv } => {
            let table = compare_report(&summaries)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        }
        Command::InspectModel { path } => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let model = Model::from_json(&text)?;
            let shapes = model.act_shapes();
            println!("input {:?}", model.input_shape());
            for (i, layer) in model.layers().iter().enumerate() {
                println!(
                    "{i:>3}  {:<8} params {:>7}  out {:?}",
                    format!("{:?}", layer.kind()).to_lowercase(),
                    layer.param_count(),
                    shapes[i + 1]
                );
            }
            println!("parameters {}", model.param_count());
            println!("mflops/sample {:.6}", flops_count(&model));
            println!("prunable layers {:?}", prune_list(&model));
            Ok(())
        }
    }
}
