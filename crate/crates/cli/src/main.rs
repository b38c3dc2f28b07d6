mod cli;
mod commands;
mod config;

use clap::{CommandFactory, Parser};
use cli::{Cli, Command};
use std::ffi::OsString;
use std::process::ExitCode;

/// Expands `--config FILE` into flags before clap sees the arguments.
fn with_config(argv: Vec<OsString>) -> Result<Vec<OsString>, commands::CliError> {
    let path = argv.iter().enumerate().find_map(|(i, a)| {
        let s = a.to_str()?;
        if s == "--config" {
            argv.get(i + 1).cloned()
        } else {
            s.strip_prefix("--config=").map(OsString::from)
        }
    });
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| commands::CliError::Io(format!("{}: {e}", path.to_string_lossy())))?;
    config::parse(&text).map_err(|e| commands::CliError::Parse(format!("{}: {e}", path.to_string_lossy())))?;
    config::expand(argv, &text, &Cli::command())
        .map_err(|e| commands::CliError::Usage(format!("{}: {e}", path.to_string_lossy())))
}

fn main() -> ExitCode {
    let argv = match with_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::try_parse_from(argv).unwrap_or_else(|e| e.exit());
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::FitCglut(a) => commands::fit_cglut_cmd(a),
        Command::Apply(a) => commands::apply(a),
        Command::Bake(a) => commands::bake(a),
        Command::Edit(a) => commands::edit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
