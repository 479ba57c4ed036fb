use clap::Parser;

fn main() -> std::process::ExitCode {
    gradflow::cli::run(gradflow::cli::Cli::parse())
}
