use clap::Parser;

use edgeproc::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
