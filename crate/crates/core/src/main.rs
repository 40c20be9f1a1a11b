use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use tamperscope::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            let _ = std::io::stdout().write_all(summary.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            // one line: `error[<category>]: <message>`; messages embed their causes
            let category = e.category();
            let err = anyhow::Error::new(e);
            eprintln!("error[{category}]: {}", err.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
