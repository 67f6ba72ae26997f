use clap::Parser;

fn main() {
    std::process::exit(essvi_mm_cli::run(essvi_mm_cli::Cli::parse()));
}
