use clap::Parser;

use lifespan::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", error_line(&e));
        std::process::exit(e.exit_code());
    }
}
