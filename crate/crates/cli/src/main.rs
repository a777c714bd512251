use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pfcure_cli::run(std::env::args_os()))
}
