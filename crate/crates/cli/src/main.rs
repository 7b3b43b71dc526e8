mod args;
mod commands;
mod data;
mod error;
mod manifest;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::{CliError, CliResult};
use manifest::Recorder;

fn main() {
    let argv: Vec<OsString> = std::env::args_os().collect();
    std::process::exit(run(argv));
}

/// Parses `argv` (including the program name) and runs the command,
/// returning the process exit code.
fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 1;
        }
        // a second initialization (after `rerun`) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, Recorder::new(args)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, rec: Recorder) -> CliResult<()> {
    match command {
        Command::Phantom(a) => commands::phantom(a, &rec),
        Command::Preprocess(a) => commands::preprocess(a, &rec),
        Command::Train(a) => commands::train_cmd(a, &rec),
        Command::Infer(a) => commands::infer(a, &rec),
        Command::Eval(a) => commands::eval(a, &rec),
        Command::Ablate(a) => commands::ablate(a, &rec),
        Command::Report(a) => commands::report(a, &rec),
        Command::Rerun(a) => {
            let m = manifest::load(&a.manifest)?;
            if m.command == "rerun" {
                return Err(CliError::Usage("manifest records a rerun".into()));
            }
            std::env::set_current_dir(&m.cwd).map_err(CliError::io(&m.cwd))?;
            let argv = std::iter::once("segfuse".to_string()).chain(m.args.iter().cloned());
            let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
            dispatch(cli.command, Recorder::new(m.args))
        }
    }
}
