use clap::Parser;

fn main() {
    let cli = mfgs::cli::Cli::parse();
    std::process::exit(mfgs::cli::run(cli));
}
