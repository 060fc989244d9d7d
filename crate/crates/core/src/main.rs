mod cli;

use std::process::ExitCode;

use clap::Parser;

fn configure_threads() -> anyhow::Result<()> {
    let Some(n) = std::env::var("QARV_THREADS").ok().filter(|s| !s.is_empty()) else {
        return Ok(());
    };
    let threads: usize = n
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| anyhow::anyhow!("QARV_THREADS must be a positive integer, got '{n}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = cli::Cli::parse();
    match configure_threads().and_then(|()| cli::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Skip causes whose text the outer message already includes.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
