use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "supdens", version, about = "Experiments on suprema of SPDE solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run { config: PathBuf },
    /// Merge the manifests below a directory into report.md.
    Report { dir: PathBuf },
    /// List every configuration key with its default.
    Keys,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config } => {
            let s = supdens_cli::run(&config);
            for c in s.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAIL {}: {} ({})", c.name, c.value.map(|v| format!("{v:e}")).unwrap_or_default(), c.detail);
            }
            if let Some(m) = &s.message {
                eprintln!("{m}");
            }
            if s.exit_code == 0 {
                println!("ok: {} checks passed, outputs in {}", s.checks.len(), s.output_dir.display());
            }
            s.exit_code
        }
        Command::Report { dir } => match supdens_cli::output::report(&dir) {
            Ok(r) => {
                println!("{} checks, {} failed; wrote {}", r.rows, r.failures, r.path.display());
                i32::from(r.failures > 0)
            }
            Err(e) => {
                eprintln!("{e}");
                2
            }
        },
        Command::Keys => {
            print!("{}", supdens_cli::config::key_reference());
            0
        }
    };
    ExitCode::from(code as u8)
}
