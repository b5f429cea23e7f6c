use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(dsatrack::cli::run(std::env::args_os()))
}
