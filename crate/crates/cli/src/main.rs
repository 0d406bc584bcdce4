mod analyze;

use clap::{Parser, Subcommand, ValueEnum};
use seqgraph::sim::{load_scenario, run_scenario, write_rows};
use seqgraph::{load_design, Error};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "seqgraph", version, about = "Graphical group sequential tests with simultaneous confidence bounds")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyse observed stage data under a design.
    Analyze(analyze::AnalyzeArgs),
    /// Run a Monte Carlo scenario and write metric estimates as CSV.
    Simulate {
        scenario: PathBuf,
        /// Output file (default: standard output).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Override the number of replications.
        #[arg(long)]
        replications: Option<usize>,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a design and print it in normalised form.
    Check {
        design: PathBuf,
        #[arg(long, value_enum, default_value = "toml")]
        emit: Emit,
    },
    /// Serve the monitoring HTTP API.
    Serve(seqgraph_service::ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Toml,
    Json,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cmd: Command) -> seqgraph::Result<()> {
    match cmd {
        Command::Analyze(args) => {
            let report = analyze::run(&args)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?);
            } else {
                print!("{}", analyze::render_text(&report));
            }
        }
        Command::Simulate {
            scenario,
            output,
            replications,
            seed,
        } => {
            let mut spec = load_scenario(&scenario)?;
            if let Some(n) = replications {
                if n == 0 {
                    return Err(Error::Validation("replications must be at least 1".into()));
                }
                spec.replications = n;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let rows = run_scenario(&spec)?;
            match output {
                Some(p) => write_rows(std::fs::File::create(p)?, &rows)?,
                None => write_rows(std::io::stdout().lock(), &rows)?,
            }
        }
        Command::Check { design, emit } => {
            let d = load_design(&design)?;
            match emit {
                Emit::Toml => print!("{}", d.file().to_toml()?),
                Emit::Json => println!("{}", d.file().to_json()?),
            }
        }
        Command::Serve(args) => seqgraph_service::serve(&args)?,
    }
    Ok(())
}
