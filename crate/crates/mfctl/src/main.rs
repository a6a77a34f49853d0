use std::process::ExitCode;

use clap::Parser;
use mfctl::cli::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // keep 2 for assumption failures
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (cmd, cfg) = cli.command.split();
    let outcome = mfctl::run(cmd, &cfg);
    println!("{}", outcome.verdict);
    if let Some(m) = &outcome.message {
        eprintln!("mfctl {}: {m}", cmd.name());
    }
    ExitCode::from(outcome.code as u8)
}
