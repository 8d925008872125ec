use clap::Parser;
use spatialcheck_cli::commands::{run, Cli};
use spatialcheck_cli::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
