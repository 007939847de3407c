//! Command-line entry point. Every run configuration key is accepted as
//! `--key value` and overrides the `--config` file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command as Cli};
use serde_json::json;
use topoflow::cli_io::{parse_config, run, Command, KEYS};
use topoflow::Error;

fn cli() -> Cli {
    let shape = || {
        Arg::new("shape")
            .long("shape")
            .value_name("FILE")
            .required(true)
            .help("field file with a `chi` cell array on the configured mesh")
    };
    let mut app = Cli::new("topoflow")
        .about("Level-set topology optimization of Stokes-Brinkman flow distributors")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("`key = value` configuration file"),
        )
        .subcommand(
            Cli::new("solve")
                .about("Forward solve for a stored shape")
                .arg(shape()),
        )
        .subcommand(Cli::new("optimize").about("Find a single minimizer"))
        .subcommand(Cli::new("deflate").about("Run the deflation campaign"))
        .subcommand(
            Cli::new("eval")
                .about("Objective and fulfillment of a stored shape")
                .arg(shape()),
        );
    for key in KEYS {
        app = app.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .global(true),
        );
    }
    app
}

fn error_line(e: &Error) -> serde_json::Value {
    let kind = match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::MeshMismatch(_) => "mesh_mismatch",
        Error::Solve(_) => "solve",
        Error::Consistency(_) => "consistency",
        Error::Projection(_) => "projection",
        Error::ZeroDerivative => "zero_derivative",
        Error::Config { .. } => "config",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
    };
    let mut v = json!({ "error": kind, "message": e.to_string() });
    match e {
        Error::Config { key, line, .. } => {
            v["key"] = json!(key);
            v["line"] = json!(line);
        }
        Error::Io { path, .. } | Error::Format { path, .. } => {
            v["path"] = json!(path.display().to_string());
        }
        _ => {}
    }
    v
}

fn execute(matches: &ArgMatches) -> Result<serde_json::Value, Error> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let text = match matches.get_one::<String>("config") {
        Some(path) => std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: PathBuf::from(path),
            source,
        })?,
        None => String::new(),
    };
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|&k| sub.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let config = parse_config(&text, &overrides)?;
    let shape = || PathBuf::from(sub.get_one::<String>("shape").expect("required"));
    let command = match name {
        "solve" => Command::Solve { shape: shape() },
        "eval" => Command::Eval { shape: shape() },
        "optimize" => Command::Optimize,
        "deflate" => Command::Deflate,
        other => unreachable!("unknown subcommand {other}"),
    };
    run(&command, &config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let v = json!({ "error": "usage", "message": e.kind().to_string(), "detail": e.to_string() });
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match execute(&matches) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
