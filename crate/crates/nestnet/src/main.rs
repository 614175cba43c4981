use clap::Parser;
use nestnet::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("nestnet: {e}");
        std::process::exit(e.exit_code());
    }
}
