use clap::Parser;

use geosdg::cli::{dispatch, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("geosdg: error: {e}");
        std::process::exit(e.exit_code());
    }
}
