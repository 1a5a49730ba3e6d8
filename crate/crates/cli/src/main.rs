use clap::Parser;

fn main() {
    std::process::exit(leafnet_cli::run(leafnet_cli::Cli::parse()));
}
