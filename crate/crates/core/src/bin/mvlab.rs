use clap::Parser;
use mvlab::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
