use clap::Parser;

fn main() {
    std::process::exit(dkel_cli::run(dkel_cli::Cli::parse()));
}
