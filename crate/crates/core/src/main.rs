use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(snare_core::cli::main_with_args(std::env::args_os()))
}
