mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::UsageError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<ifs_seg::Error>() {
        Some(ifs_seg::Error::InvalidConfig(_) | ifs_seg::Error::InvalidSpec(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build_global()
        .ok();
    match &cli.command {
        Command::Encode(a) => commands::encode(cli, a),
        Command::PhantomGen(a) => commands::phantom_gen(cli, a),
        Command::Train(a) => commands::train(cli, a),
        Command::Eval(a) => commands::eval(cli, a),
        Command::Ablate(a) => commands::ablate(cli, a),
        Command::Plot(a) => commands::plot(cli, a),
    }
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
