use clap::Parser;
use iidlab_cli::error::EXIT_INPUT;
use iidlab_cli::{run, Cli};
use std::io::Write;
use std::process::ExitCode;

/// Clap's message up to the usage block, folded onto one line.
fn usage_line(e: &clap::Error) -> String {
    let text = e.to_string();
    let body: Vec<&str> =
        text.lines().take_while(|l| !l.starts_with("Usage:")).map(str::trim).filter(|l| !l.is_empty()).collect();
    body.join(" ").trim_start_matches("error: ").to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[USAGE]: {}", usage_line(&e));
            return ExitCode::from(EXIT_INPUT);
        }
    };
    match run(cli) {
        Ok(out) => {
            if !out.is_empty() {
                // a closed pipe downstream is not our failure
                let _ = writeln!(std::io::stdout(), "{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit)
        }
    }
}
