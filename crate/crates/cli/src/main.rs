use clap::Parser;
use memflow_cli::cli::Cli;
use memflow_cli::commands;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let json = std::env::args().any(|a| a == "--json");
            if json && code == 1 {
                let body = serde_json::json!({
                    "ok": false,
                    "error": { "kind": "usage", "code": 1, "message": e.to_string().trim() },
                });
                eprintln!("{body}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code);
        }
    };
    let default_level = match (cli.json, cli.verbose) {
        (true, 0) => "warn",
        (_, 0 | 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::json!({ "ok": true, "data": out.json }));
            } else {
                println!("{}", out.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
