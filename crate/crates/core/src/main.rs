use clap::Parser;

use unidenoise::cli::{run, Cli, LOG_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    std::process::exit(run(&cli));
}
