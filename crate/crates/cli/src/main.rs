use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ordwalk_cli::run::{output_dir, run_experiment};
use ordwalk_cli::spec::{validate_spec, MAX_SEED};
use ordwalk_cli::suite::{run_suite, suite_exit_code};

#[derive(Parser)]
#[command(name = "ordwalk", version, about = "Ordered non-colliding random walks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment spec.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (ORDWALK_THREADS takes precedence).
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the seed in the spec.
        #[arg(long, value_parser = clap::value_parser!(u64).range(..=MAX_SEED))]
        seed: Option<u64>,
    },
    /// Check a spec file without running it.
    Validate { spec: PathBuf },
    /// Run every spec in a directory.
    Suite {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    match std::env::var("ORDWALK_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| format!("ORDWALK_THREADS must be a positive integer, got {v:?}")),
        Err(_) => Ok(flag),
    }
}

fn with_threads(threads: Option<usize>, f: impl FnOnce() -> ExitCode + Send) -> ExitCode {
    let threads = match thread_count(threads) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    match b.build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Validate { spec } => {
            let text = match fs::read_to_string(&spec) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", spec.display());
                    return ExitCode::from(2);
                }
            };
            match validate_spec(&text) {
                Ok(s) => {
                    println!("ok: {} ({})", spec.display(), s.experiment.kind());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Run {
            spec,
            out,
            threads,
            seed,
        } => {
            let text = match fs::read_to_string(&spec) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", spec.display());
                    return ExitCode::from(2);
                }
            };
            let mut parsed = match validate_spec(&text) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed {
                parsed.seed = s;
            }
            let dir = output_dir(&parsed, out.as_deref());
            with_threads(threads, move || match run_experiment(&parsed, &dir) {
                Ok(m) => {
                    let summary = fs::read_to_string(dir.join("summary.txt")).unwrap_or_default();
                    print!("{summary}");
                    println!("results in {}", dir.display());
                    ExitCode::from(m.status.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            })
        }
        Command::Suite { dir, out, threads } => with_threads(threads, move || match run_suite(&dir, out.as_deref()) {
            Ok(entries) => {
                for e in &entries {
                    println!(
                        "{:<8} {}  {}",
                        format!("{:?}", e.status).to_uppercase(),
                        e.spec.display(),
                        e.detail
                    );
                }
                ExitCode::from(suite_exit_code(&entries) as u8)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }),
    }
}
