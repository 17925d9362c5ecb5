use clap::Parser;

fn main() {
    std::process::exit(psopt_cli::main_with(psopt_cli::Cli::parse()));
}
