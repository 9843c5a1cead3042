use clap::Parser;

fn main() {
    let cli = zsad::cli::Cli::parse();
    std::process::exit(zsad::cli::run(&cli));
}
