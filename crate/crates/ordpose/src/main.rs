use clap::Parser;
use ordpose::cli::{dispatch, Cli};

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    std::process::exit(dispatch(cli));
}
