use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(prosody_hvae::cli::run_from(std::env::args_os()))
}
