use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use fedst_core::federation::Method;
use fedst_cli::commands::{cmd_ablate, cmd_eval, cmd_gen, cmd_run, EvalTarget, Toggle};
use fedst_cli::config::LoadedConfig;
use fedst_cli::report::metrics_csv;
use fedst_cli::Result;

#[derive(Parser)]
#[command(name = "fedst", version, about = "Personalized federated video segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fedst,
    Fedavg,
    Local,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToggleArg {
    Ts,
    Prompt,
    Cs,
    Serq,
}

#[derive(Subcommand)]
enum Command {
    /// Generate site, synthetic and out-of-federation datasets.
    Gen {
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one method and write a run directory.
    Run {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "fedst")]
        method: MethodArg,
        /// Run directory name under <output_dir>/runs (defaults to the method).
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Score a saved run on a dataset file.
    #[command(group(ArgGroup::new("target").required(true).args(["global", "site"])))]
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Average every site model and evaluate the result.
        #[arg(long)]
        global: bool,
        /// Evaluate one site's personalized model.
        #[arg(long)]
        site: Option<u32>,
        /// Keep only the held-out test clips of a site file.
        #[arg(long)]
        test_split: bool,
    },
    /// Compare the full method against runs with components switched off.
    Ablate {
        config: PathBuf,
        #[arg(long = "toggle", value_enum, required = true)]
        toggles: Vec<ToggleArg>,
        #[arg(long)]
        force: bool,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, force } => {
            for path in cmd_gen(&LoadedConfig::load(&config)?, force)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Run {
            config,
            method,
            name,
            force,
        } => {
            let method = match method {
                MethodArg::Fedst => Method::FedSt,
                MethodArg::Fedavg => Method::FedAvg,
                MethodArg::Local => Method::LocalOnly,
            };
            let start = Instant::now();
            let rec = cmd_run(LoadedConfig::load(&config)?, method, name.as_deref(), force)?;
            let r = &rec.result;
            for report in r.output.final_reports() {
                println!("{:<12} dice {:.4}", report.site, report.mean_dice());
            }
            println!("{:<12} dice {:.4}", "federation", r.federation_dice());
            println!("{:<12} dice {:.4}", "out_of_fed", r.out_of_fed_dice());
            println!("wire bytes   {}", r.output.wire.total_bytes());
            println!("run dir      {}", rec.dir.display());
            eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());
        }
        Command::Eval {
            run_dir,
            dataset,
            global,
            site,
            test_split,
        } => {
            let target = match (global, site) {
                (_, Some(id)) => EvalTarget::Site(id),
                _ => EvalTarget::Global,
            };
            let report = cmd_eval(&run_dir, &dataset, target, test_split)?;
            print!("{}", metrics_csv("eval", &[&report]));
        }
        Command::Ablate { config, toggles, force } => {
            let mut toggles: Vec<Toggle> = toggles
                .into_iter()
                .map(|t| match t {
                    ToggleArg::Ts => Toggle::Ts,
                    ToggleArg::Prompt => Toggle::Prompt,
                    ToggleArg::Cs => Toggle::Cs,
                    ToggleArg::Serq => Toggle::Serq,
                })
                .collect();
            toggles.dedup();
            let (dir, table) = cmd_ablate(LoadedConfig::load(&config)?, &toggles, force)?;
            print!("{}", table.to_text());
            println!("wrote {}", dir.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
