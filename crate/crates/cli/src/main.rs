use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let args = qtvos_cli::Args::parse();
    match qtvos_cli::run(&args) {
        Ok(report) => {
            if args.report.is_none() && report.metrics.is_some() {
                println!("{}", report.to_json());
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
