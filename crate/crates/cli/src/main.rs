mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::Command;

#[derive(Parser)]
#[command(
    name = "capsroute",
    version,
    about = "Capsule routing verification and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn init_pool() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("CAPSROUTE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        anyhow::anyhow!("CAPSROUTE_THREADS must be a positive integer, got {raw:?}")
    })?;
    if n == 0 {
        anyhow::bail!("CAPSROUTE_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_pool().and_then(|()| commands::run(&cli.command));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
