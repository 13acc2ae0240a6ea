use std::process::ExitCode;

fn main() -> ExitCode {
    neomotion::cli::run()
}
