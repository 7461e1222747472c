use clap::Parser;

fn main() {
    let args = h2o::cli::Cli::parse();
    std::process::exit(h2o::cli::run(args));
}
