use clap::Parser;
use d2p_core::cli::{exit_code, run, Cli};

fn main() {
    env_logger::init();
    let result = run(Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(exit_code(&result));
}
