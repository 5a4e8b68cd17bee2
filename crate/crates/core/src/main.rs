use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cartp::cli::run(std::env::args_os()))
}
