use std::io::Write;

use anyhow::Context;
use tracing_subscriber::EnvFilter;

fn init_logging() -> anyhow::Result<()> {
    let filter = EnvFilter::try_from_env("PROCUT_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init()
        .map_err(|e| anyhow::anyhow!(e))
        .context("installing log subscriber")
}

fn main() {
    if let Err(e) = init_logging() {
        eprintln!("{e:#}");
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = procut::cli::run(std::env::args_os(), &mut out);
    let _ = out.flush();
    match result {
        Ok(()) => {}
        Err(procut::cli::CliError::Info(text)) => print!("{text}"),
        Err(e) => {
            let text = e.to_string();
            let text = text.trim_end();
            // clap already prefixes its own messages
            if text.starts_with("error:") {
                eprintln!("{text}");
            } else {
                eprintln!("error: {text}");
            }
            std::process::exit(e.exit_code());
        }
    }
}
