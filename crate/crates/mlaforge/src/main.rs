use clap::Parser;
use mlaforge::cli::{run, Cli};

fn main() {
    // MLAFORGE_THREADS caps the rayon worker count.
    if let Ok(threads) = std::env::var("MLAFORGE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
