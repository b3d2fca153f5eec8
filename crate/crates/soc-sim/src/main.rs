use clap::Parser;
use soc_sim::cli::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
