//! `vitlr`: data generation, training, inference, evaluation, ego-lane
//! replay, benchmarking and graph linting.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Failure;
use manifest::{write_manifest, Run};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (name, result, mut run) = dispatch(cli.command);
    let error = match &result {
        Ok(()) => None,
        Err(Failure::Usage(m) | Failure::Runtime(m)) => Some(m.clone()),
    };
    if let Some(dir) = run.out.take() {
        if let Err(e) = write_manifest(&dir, &run.finish(error.clone())) {
            eprintln!(
                "vitlr {name}: cannot write run manifest in {}: {e}",
                dir.display()
            );
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("vitlr {name}: {m}");
            eprintln!("Try 'vitlr {name} --help' for more information.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("vitlr {name}: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> (&'static str, Result<(), Failure>, Run) {
    macro_rules! go {
        ($name:literal, $f:path, $a:expr) => {{
            let mut run = Run::new($name);
            let r = $f($a, &mut run);
            ($name, r, run)
        }};
    }
    match command {
        Command::GenData(a) => go!("gen-data", commands::gen_data, a),
        Command::Train(a) => go!("train", commands::train, a),
        Command::Infer(a) => go!("infer", commands::infer, a),
        Command::Eval(a) => go!("eval", commands::eval, a),
        Command::Egolane(a) => go!("egolane", commands::egolane, a),
        Command::Bench(a) => go!("bench", commands::bench, a),
        Command::LintGraph(a) => go!("lint-graph", commands::lint, a),
    }
}
